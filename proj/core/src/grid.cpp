#include "limcast/grid.hpp"

#include "limcast/error.hpp"

#include <cmath>
#include <limits>

namespace limcast {

std::size_t GriddedSeries::var_index(const std::string& name) const {
  for (std::size_t v = 0; v < var_names.size(); ++v)
    if (var_names[v] == name) return v;
  throw DataError("var", "unknown variable '" + name + "'");
}

std::vector<std::size_t> GriddedSeries::valid_cells() const {
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < mask.size(); ++c)
    if (mask[c]) out.push_back(c);
  return out;
}

void GriddedSeries::validate() const {
  if (lat.empty()) throw DataError("lat", "empty latitude axis");
  if (lon.empty()) throw DataError("lon", "empty longitude axis");
  if (var_names.empty()) throw DataError("var_names", "no variables");
  for (std::size_t i = 1; i < lat.size(); ++i)
    if (!(lat[i] > lat[i - 1])) throw DataError("lat", "coordinates must be strictly increasing");
  for (std::size_t i = 1; i < lon.size(); ++i)
    if (!(lon[i] > lon[i - 1])) throw DataError("lon", "coordinates must be strictly increasing");
  for (double v : lat)
    if (!(v >= -90.0 && v <= 90.0)) throw DataError("lat", "latitude outside [-90, 90]");
  for (double v : lon)
    if (!(v >= 0.0 && v < 360.0)) throw DataError("lon", "longitude outside [0, 360)");
  if (start_month < 1 || start_month > 12) throw DataError("start_month", "must be in 1..12");
  if (mask.size() != n_cells()) throw DataError("mask", "size does not match grid");
  if (values.size() % frame_size() != 0) throw DataError("values", "length is not a whole number of frames");
  for (std::size_t i = 0; i < var_names.size(); ++i)
    for (std::size_t j = i + 1; j < var_names.size(); ++j)
      if (var_names[i] == var_names[j]) throw DataError("var_names", "duplicate variable '" + var_names[i] + "'");
  const auto nt = n_time();
  for (std::size_t t = 0; t < nt; ++t)
    for (std::size_t v = 0; v < n_var(); ++v)
      for (std::size_t c = 0; c < n_cells(); ++c) {
        double x = at(t, v, c);
        if (mask[c] && !std::isfinite(x))
          throw DataError("values", "non-finite value on unmasked cell " + std::to_string(c) + " at t=" +
                                        std::to_string(t));
        if (!mask[c] && !std::isnan(x)) throw DataError("values", "masked cell must hold NaN");
      }
}

GriddedSeries GriddedSeries::slice(TimeRange range) const {
  if (range.end > n_time() || range.begin > range.end) throw DataError("time", "slice out of range");
  GriddedSeries out = like(0);
  out.values.assign(values.begin() + static_cast<std::ptrdiff_t>(range.begin * frame_size()),
                    values.begin() + static_cast<std::ptrdiff_t>(range.end * frame_size()));
  const std::size_t months = static_cast<std::size_t>(start_month - 1) + range.begin;
  out.start_year = start_year + static_cast<int>(months / 12);
  out.start_month = static_cast<int>(months % 12) + 1;
  return out;
}

GriddedSeries GriddedSeries::like(std::size_t nt) const {
  GriddedSeries out;
  out.lat = lat;
  out.lon = lon;
  out.start_year = start_year;
  out.start_month = start_month;
  out.var_names = var_names;
  out.mask = mask;
  out.values.assign(nt * frame_size(), 0.0);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t t = 0; t < nt; ++t)
    for (std::size_t v = 0; v < n_var(); ++v)
      for (std::size_t c = 0; c < n_cells(); ++c)
        if (!mask[c]) out.at(t, v, c) = nan;
  return out;
}

bool GriddedSeries::same_grid(const GriddedSeries& other) const {
  return lat == other.lat && lon == other.lon && mask == other.mask && var_names == other.var_names;
}

}  // namespace limcast
