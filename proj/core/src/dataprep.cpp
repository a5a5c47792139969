#include "limcast/dataprep.hpp"

#include "limcast/error.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

namespace limcast::dataprep {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string join_names(const std::vector<std::string>& names) {
  std::string out;
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (i) out += '\n';
    out += names[i];
  }
  return out;
}

std::vector<std::string> split_names(const std::string& table) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : table) {
    if (c == '\n') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!table.empty()) out.push_back(cur);
  return out;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

double parse_double(const std::string& s, const std::string& field, std::size_t line_no) {
  if (s == "nan" || s == "NaN" || s.empty()) return kNaN;
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw DataError(field, "cannot parse '" + s + "' on line " + std::to_string(line_no));
  return v;
}

// "YYYY-MM" -> months since year 0.
long parse_month_stamp(const std::string& s, std::size_t line_no) {
  auto dash = s.rfind('-');
  if (dash == std::string::npos || dash == 0) throw DataError("time", "expected YYYY-MM on line " + std::to_string(line_no));
  int year = 0, month = 0;
  auto y = std::from_chars(s.data(), s.data() + dash, year);
  auto m = std::from_chars(s.data() + dash + 1, s.data() + s.size(), month);
  if (y.ec != std::errc() || m.ec != std::errc() || month < 1 || month > 12)
    throw DataError("time", "expected YYYY-MM on line " + std::to_string(line_no) + ", got '" + s + "'");
  return static_cast<long>(year) * 12 + (month - 1);
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

GriddedSeries read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(path.string(), "cannot open file");
  std::string line;
  if (!std::getline(in, line)) throw DataError("header", "empty CSV file");
  auto header = split_csv_line(line);
  if (header != std::vector<std::string>{"time", "var", "lat", "lon", "value"})
    throw DataError("header", "expected 'time,var,lat,lon,value'");

  struct Row {
    long stamp;
    std::size_t var;
    double lat, lon, value;
  };
  std::vector<Row> rows;
  std::vector<std::string> vars;
  std::set<long> stamps;
  std::set<double> lats, lons;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    auto f = split_csv_line(line);
    if (f.size() != 5) throw DataError("row", "expected 5 fields on line " + std::to_string(line_no));
    Row r{};
    r.stamp = parse_month_stamp(f[0], line_no);
    auto it = std::find(vars.begin(), vars.end(), f[1]);
    r.var = static_cast<std::size_t>(it - vars.begin());
    if (it == vars.end()) vars.push_back(f[1]);
    r.lat = parse_double(f[2], "lat", line_no);
    r.lon = parse_double(f[3], "lon", line_no);
    r.value = parse_double(f[4], "value", line_no);
    if (std::isnan(r.lat) || std::isnan(r.lon)) throw DataError("lat/lon", "missing coordinate on line " + std::to_string(line_no));
    stamps.insert(r.stamp);
    lats.insert(r.lat);
    lons.insert(r.lon);
    rows.push_back(r);
  }
  if (rows.empty()) throw DataError("values", "no data rows");

  const long first = *stamps.begin();
  const long last = *stamps.rbegin();
  if (static_cast<std::size_t>(last - first + 1) != stamps.size())
    throw DataError("time", "records are not a contiguous monthly sequence");

  GriddedSeries g;
  g.lat.assign(lats.begin(), lats.end());
  g.lon.assign(lons.begin(), lons.end());
  g.var_names = vars;
  g.start_year = static_cast<int>(first / 12);
  g.start_month = static_cast<int>(first % 12) + 1;
  const std::size_t nt = stamps.size();
  g.mask.assign(g.n_cells(), 1);
  g.values.assign(nt * g.frame_size(), kNaN);
  std::vector<std::uint8_t> seen(g.values.size(), 0);

  auto lat_index = [&](double v) { return static_cast<std::size_t>(std::lower_bound(g.lat.begin(), g.lat.end(), v) - g.lat.begin()); };
  auto lon_index = [&](double v) { return static_cast<std::size_t>(std::lower_bound(g.lon.begin(), g.lon.end(), v) - g.lon.begin()); };
  for (const auto& r : rows) {
    const std::size_t cell = lat_index(r.lat) * g.n_lon() + lon_index(r.lon);
    const std::size_t idx = g.index(static_cast<std::size_t>(r.stamp - first), r.var, cell);
    if (seen[idx]) throw DataError("row", "duplicate entry for one time/var/cell");
    seen[idx] = 1;
    g.values[idx] = r.value;
  }
  // A cell is valid only if every (time, var) entry is finite; partial coverage is an error.
  for (std::size_t c = 0; c < g.n_cells(); ++c) {
    std::size_t finite = 0;
    for (std::size_t t = 0; t < nt; ++t)
      for (std::size_t v = 0; v < g.n_var(); ++v) finite += std::isfinite(g.at(t, v, c)) ? 1 : 0;
    if (finite == 0) {
      g.mask[c] = 0;
    } else if (finite != nt * g.n_var()) {
      throw DataError("mask", "cell " + std::to_string(c) + " is defined for some records/variables but not all");
    }
  }
  g.validate();
  return g;
}

void write_csv(const std::filesystem::path& path, const GriddedSeries& g) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError(path.string(), "cannot open file for writing");
  out << "time,var,lat,lon,value\n";
  for (std::size_t t = 0; t < g.n_time(); ++t) {
    const long stamp = static_cast<long>(g.start_year) * 12 + (g.start_month - 1) + static_cast<long>(t);
    char stamp_buf[32];
    std::snprintf(stamp_buf, sizeof(stamp_buf), "%04ld-%02ld", stamp / 12, stamp % 12 + 1);
    for (std::size_t v = 0; v < g.n_var(); ++v)
      for (std::size_t i = 0; i < g.n_lat(); ++i)
        for (std::size_t j = 0; j < g.n_lon(); ++j) {
          out << stamp_buf << ',' << g.var_names[v] << ',' << format_double(g.lat[i]) << ','
              << format_double(g.lon[j]) << ',' << format_double(g.at(t, v, i * g.n_lon() + j)) << '\n';
        }
  }
}

}  // namespace

GridFormat format_from_path(const std::filesystem::path& path) {
  return path.extension() == ".csv" ? GridFormat::csv : GridFormat::flat_binary;
}

std::vector<std::uint8_t> encode_grid(const GriddedSeries& g) {
  io::ByteWriter w;
  w.tag("LIMG");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(g.n_time()));
  w.u32(static_cast<std::uint32_t>(g.n_var()));
  w.u32(static_cast<std::uint32_t>(g.n_lat()));
  w.u32(static_cast<std::uint32_t>(g.n_lon()));
  w.u32(static_cast<std::uint32_t>(g.start_year));
  w.u32(static_cast<std::uint32_t>(g.start_month));
  w.f64_array(g.lat);
  w.f64_array(g.lon);
  for (auto m : g.mask) w.u8(m);
  const std::string names = join_names(g.var_names);
  w.f64(static_cast<double>(names.size()));
  for (char c : names) w.u8(static_cast<std::uint8_t>(c));
  w.f64_array(g.values);
  return w.take();
}

GriddedSeries decode_grid(std::span<const std::uint8_t> bytes, const std::string& context) {
  io::ByteReader r(bytes, context);
  if (r.tag("magic") != "LIMG") throw DataError("magic", "not a LIMG grid file");
  if (auto version = r.u32("version"); version != 1)
    throw DataError("version", "unsupported version " + std::to_string(version));
  const auto nt = r.u32("n_time");
  const auto nv = r.u32("n_var");
  const auto nlat = r.u32("n_lat");
  const auto nlon = r.u32("n_lon");
  GriddedSeries g;
  g.start_year = static_cast<int>(r.u32("start_year"));
  g.start_month = static_cast<int>(r.u32("start_month"));
  if (nv == 0 || nlat == 0 || nlon == 0) throw DataError("header", "zero-sized grid dimension");
  g.lat = r.f64_array(nlat, "lat");
  g.lon = r.f64_array(nlon, "lon");
  auto mask = r.bytes(std::size_t(nlat) * nlon, "mask");
  g.mask.assign(mask.begin(), mask.end());
  for (auto& m : g.mask) m = m ? 1 : 0;
  const double names_len = r.f64("names_len");
  if (!(names_len >= 0.0) || names_len != std::floor(names_len) || names_len > static_cast<double>(r.remaining()))
    throw DataError("names_len", "invalid name table length");
  auto names = r.bytes(static_cast<std::size_t>(names_len), "names");
  g.var_names = split_names(std::string(names.begin(), names.end()));
  if (g.var_names.size() != nv)
    throw DataError("names", "name table holds " + std::to_string(g.var_names.size()) + " names, header declares " +
                                 std::to_string(nv));
  const std::size_t expected = std::size_t(nt) * nv * nlat * nlon * 8;
  if (r.remaining() != expected)
    throw DataError("n_time", "declared length " + std::to_string(nt) + " records does not match payload (" +
                                  std::to_string(r.remaining()) + " bytes, expected " + std::to_string(expected) + ")");
  g.values = r.f64_array(expected / 8, "values");
  g.validate();
  return g;
}

GriddedSeries ingest_grid(const std::filesystem::path& path, GridFormat format) {
  if (!std::filesystem::exists(path)) throw DataError(path.string(), "file does not exist");
  if (format == GridFormat::csv) return read_csv(path);
  return decode_grid(io::read_file(path), path.string());
}

void write_grid(const std::filesystem::path& path, const GriddedSeries& series, GridFormat format) {
  if (format == GridFormat::csv) {
    write_csv(path, series);
  } else {
    io::write_file(path, encode_grid(series));
  }
}

io::Section Climatology::to_section() const {
  io::ByteWriter w;
  w.u64(train_range.begin);
  w.u64(train_range.end);
  for (const auto* arr : {&monthly_mean, &trend_slope, &trend_intercept, &scale}) {
    w.u64(arr->size());
    w.f64_array(*arr);
  }
  return {"CLIM", 1, w.take()};
}

Climatology Climatology::from_section(const io::Section& section) {
  if (section.tag != "CLIM") throw DataError("tag", "expected CLIM section");
  io::ByteReader r(section.payload, "CLIM");
  Climatology c;
  c.train_range.begin = r.u64("train_begin");
  c.train_range.end = r.u64("train_end");
  for (auto* arr : {&c.monthly_mean, &c.trend_slope, &c.trend_intercept, &c.scale}) {
    auto n = r.u64("length");
    *arr = r.f64_array(n, "climatology");
  }
  return c;
}

DetrendResult detrend_linear(const GriddedSeries& series, std::optional<TimeRange> fit_range) {
  const std::size_t nt = series.n_time();
  const TimeRange fit = fit_range.value_or(TimeRange{0, nt});
  if (fit.end > nt || fit.size() < 24) throw DataError("time", "detrending needs at least 24 records in the fit range");

  DetrendResult out{series, {}, {}};
  const std::size_t nv = series.n_var(), nc = series.n_cells();
  out.slopes.assign(nv * nc, kNaN);
  out.intercepts.assign(nv * nc, kNaN);

  // Slope from within-calendar-month deviations of the time index, so a
  // seasonal cycle does not leak into the trend.
  const double n = static_cast<double>(fit.size());
  const double t_mean = (static_cast<double>(fit.begin) + static_cast<double>(fit.end - 1)) / 2.0;
  std::array<double, 12> month_t{}, month_n{};
  for (std::size_t t = fit.begin; t < fit.end; ++t) {
    const auto m = static_cast<std::size_t>(series.month(t) - 1);
    month_t[m] += static_cast<double>(t);
    month_n[m] += 1.0;
  }
  for (std::size_t m = 0; m < 12; ++m)
    if (month_n[m] > 0.0) month_t[m] /= month_n[m];
  std::vector<double> dev(fit.size());
  double stt = 0.0;
  for (std::size_t t = fit.begin; t < fit.end; ++t) {
    dev[t - fit.begin] = static_cast<double>(t) - month_t[static_cast<std::size_t>(series.month(t) - 1)];
    stt += dev[t - fit.begin] * dev[t - fit.begin];
  }

  for (std::size_t v = 0; v < nv; ++v)
    for (std::size_t c = 0; c < nc; ++c) {
      if (!series.valid(c)) continue;
      double mean = 0.0, sty = 0.0;
      for (std::size_t t = fit.begin; t < fit.end; ++t) {
        mean += series.at(t, v, c);
        sty += dev[t - fit.begin] * series.at(t, v, c);
      }
      mean /= n;
      const double slope = sty / stt;
      const double intercept = mean - slope * t_mean;
      out.slopes[v * nc + c] = slope;
      out.intercepts[v * nc + c] = intercept;
      for (std::size_t t = 0; t < nt; ++t) out.series.at(t, v, c) -= intercept + slope * static_cast<double>(t);
    }
  return out;
}

ClimatologyResult remove_climatology(const GriddedSeries& series, TimeRange train_range) {
  if (train_range.end > series.n_time() || train_range.size() < 24)
    throw DataError("train_range", "climatology needs at least 24 training months");
  const std::size_t nv = series.n_var(), nc = series.n_cells();
  Climatology clim;
  clim.train_range = train_range;
  clim.monthly_mean.assign(12 * nv * nc, kNaN);
  std::array<std::size_t, 12> counts{};
  std::vector<double> sums(12 * nv * nc, 0.0);
  for (std::size_t t = train_range.begin; t < train_range.end; ++t) {
    const std::size_t m = static_cast<std::size_t>(series.month(t) - 1);
    ++counts[m];
    for (std::size_t v = 0; v < nv; ++v)
      for (std::size_t c = 0; c < nc; ++c)
        if (series.valid(c)) sums[(m * nv + v) * nc + c] += series.at(t, v, c);
  }
  for (std::size_t m = 0; m < 12; ++m)
    for (std::size_t v = 0; v < nv; ++v)
      for (std::size_t c = 0; c < nc; ++c)
        if (series.valid(c)) clim.monthly_mean[(m * nv + v) * nc + c] = sums[(m * nv + v) * nc + c] / double(counts[m]);
  return {apply_climatology(series, clim), std::move(clim)};
}

GriddedSeries apply_climatology(const GriddedSeries& series, const Climatology& clim) {
  const std::size_t nv = series.n_var(), nc = series.n_cells();
  if (clim.monthly_mean.size() != 12 * nv * nc) throw DataError("climatology", "does not match the grid");
  GriddedSeries out = series;
  for (std::size_t t = 0; t < series.n_time(); ++t) {
    const std::size_t m = static_cast<std::size_t>(series.month(t) - 1);
    for (std::size_t v = 0; v < nv; ++v)
      for (std::size_t c = 0; c < nc; ++c)
        if (series.valid(c)) out.at(t, v, c) -= clim.monthly_mean[(m * nv + v) * nc + c];
  }
  return out;
}

GriddedSeries zscore_normalize(const GriddedSeries& series, Climatology& clim, bool fit,
                               std::optional<TimeRange> fit_range) {
  const std::size_t nv = series.n_var(), nc = series.n_cells();
  if (fit) {
    const TimeRange range = fit_range.value_or(TimeRange{0, series.n_time()});
    if (range.end > series.n_time() || range.size() == 0) throw DataError("fit_range", "empty or out of range");
    clim.scale.assign(nv, 0.0);
    for (std::size_t v = 0; v < nv; ++v) {
      double sum = 0.0, count = 0.0;
      for (std::size_t t = range.begin; t < range.end; ++t)
        for (std::size_t c = 0; c < nc; ++c)
          if (series.valid(c)) {
            sum += series.at(t, v, c);
            count += 1.0;
          }
      const double mean = sum / count;
      double ss = 0.0;
      for (std::size_t t = range.begin; t < range.end; ++t)
        for (std::size_t c = 0; c < nc; ++c)
          if (series.valid(c)) ss += (series.at(t, v, c) - mean) * (series.at(t, v, c) - mean);
      const double sd = std::sqrt(ss / count);
      if (!(sd > 0.0) || !std::isfinite(sd))
        throw DataError("scale", "variable '" + series.var_names[v] + "' has zero variance");
      clim.scale[v] = sd;
    }
  } else if (clim.scale.size() != nv) {
    throw DataError("scale", "climatology has no stored scale for this grid");
  }
  GriddedSeries out = series;
  for (std::size_t t = 0; t < series.n_time(); ++t)
    for (std::size_t v = 0; v < nv; ++v)
      for (std::size_t c = 0; c < nc; ++c)
        if (series.valid(c)) out.at(t, v, c) = series.at(t, v, c) / clim.scale[v];
  return out;
}

std::vector<double> region_weights(const GriddedSeries& grid, const Region& region) {
  std::vector<double> w(grid.n_cells(), 0.0);
  auto in_lon = [&](double lon) {
    if (region.lon_min <= region.lon_max) return lon >= region.lon_min && lon <= region.lon_max;
    return lon >= region.lon_min || lon <= region.lon_max;  // box straddles 0/360
  };
  double total = 0.0;
  for (std::size_t i = 0; i < grid.n_lat(); ++i) {
    if (grid.lat[i] < region.lat_min || grid.lat[i] > region.lat_max) continue;
    const double cw = std::cos(grid.lat[i] * std::numbers::pi / 180.0);
    for (std::size_t j = 0; j < grid.n_lon(); ++j) {
      const std::size_t c = i * grid.n_lon() + j;
      if (!grid.valid(c) || !in_lon(grid.lon[j])) continue;
      w[c] = cw;
      total += cw;
    }
  }
  if (!(total > 0.0)) throw DataError("region", "index region does not intersect any unmasked cell");
  for (auto& x : w) x /= total;
  return w;
}

std::vector<double> nino_index(const GriddedSeries& series, const std::string& var, const Region& region) {
  const auto v = series.var_index(var);
  const auto w = region_weights(series, region);
  std::vector<double> out(series.n_time(), 0.0);
  for (std::size_t t = 0; t < series.n_time(); ++t) {
    double s = 0.0;
    for (std::size_t c = 0; c < series.n_cells(); ++c)
      if (w[c] != 0.0) s += w[c] * series.at(t, v, c);
    out[t] = s;
  }
  return out;
}

std::array<std::size_t, 3> split_years(std::size_t n_years, const SplitSpec& spec) {
  for (double f : {spec.train_fraction, spec.val_fraction, spec.test_fraction})
    if (!(f > 0.0 && f < 1.0)) throw DataError("split", "fractions must lie in (0, 1)");
  if (std::abs(spec.train_fraction + spec.val_fraction + spec.test_fraction - 1.0) > 1e-9)
    throw DataError("split", "fractions must sum to 1");
  const double n = static_cast<double>(n_years);
  constexpr double eps = 1e-9;
  const auto train_end = static_cast<std::size_t>(std::floor(spec.train_fraction * n + eps));
  const auto val_end = static_cast<std::size_t>(std::floor((spec.train_fraction + spec.val_fraction) * n + eps));
  std::array<std::size_t, 3> years{train_end, val_end - std::min(val_end, train_end), n_years - std::min(n_years, val_end)};
  static constexpr const char* names[] = {"train", "validation", "test"};
  for (int i = 0; i < 3; ++i)
    if (years[i] == 0) throw DataError("split", std::string(names[i]) + " partition is empty after rounding to whole years");
  return years;
}

Split split_series(const GriddedSeries& series, const SplitSpec& spec) {
  const std::size_t nt = series.n_time();
  if (nt < 48) throw DataError("time", "splitting needs at least 4 years of records");
  const auto years = split_years(nt / 12, spec);
  Split out;
  out.years = years;
  out.ranges[0] = {0, years[0] * 12};
  out.ranges[1] = {out.ranges[0].end, out.ranges[0].end + years[1] * 12};
  out.ranges[2] = {out.ranges[1].end, nt};  // trailing partial year stays with the test block
  out.train = series.slice(out.ranges[0]);
  out.val = series.slice(out.ranges[1]);
  out.test = series.slice(out.ranges[2]);
  return out;
}

}  // namespace limcast::dataprep
