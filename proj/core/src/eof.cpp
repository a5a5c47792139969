#include "limcast/eof.hpp"

#include "limcast/error.hpp"
#include "limcast/random.hpp"

#include <Eigen/SVD>

#include <cmath>
#include <limits>

namespace limcast::eof {

namespace {

std::uint64_t fnv1a(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

io::ByteWriter encode_basis_payload(const EofBasis& b) {
  io::ByteWriter w;
  w.u32(static_cast<std::uint32_t>(b.vars.size()));
  w.u32(static_cast<std::uint32_t>(b.n_noise_hi));
  w.u64(b.lat.size());
  w.f64_array(b.lat);
  w.u64(b.lon.size());
  w.f64_array(b.lon);
  w.u64(b.mask.size());
  w.bytes(b.mask);
  w.u64(b.cell_index.size());
  for (auto c : b.cell_index) w.u64(c);
  for (const auto& v : b.vars) {
    w.str(v.name);
    w.u32(static_cast<std::uint32_t>(v.n_keep));
    w.matrix(v.patterns);
    w.matrix(v.singular_values);
    w.matrix(v.train_pc_std);
  }
  return w;
}

}  // namespace

Eigen::VectorXd VariableBasis::explained_variance() const {
  Eigen::VectorXd s2 = singular_values.array().square();
  const double total = s2.sum();
  return total > 0.0 ? Eigen::VectorXd(s2 / total) : Eigen::VectorXd::Zero(s2.size());
}

int EofBasis::dim() const noexcept {
  int d = 0;
  for (const auto& v : vars) d += v.n_keep;
  return d;
}

int EofBasis::offset(std::size_t v) const noexcept {
  int off = 0;
  for (std::size_t i = 0; i < v; ++i) off += vars[i].n_keep;
  return off;
}

Eigen::MatrixXd EofBasis::kept_map() const {
  const auto nv = static_cast<Eigen::Index>(n_valid());
  Eigen::MatrixXd map = Eigen::MatrixXd::Zero(dim(), nv * static_cast<Eigen::Index>(vars.size()));
  for (std::size_t v = 0; v < vars.size(); ++v)
    map.block(offset(v), static_cast<Eigen::Index>(v) * nv, vars[v].n_keep, nv) = vars[v].patterns.topRows(vars[v].n_keep);
  return map;
}

bool EofBasis::matches(const GriddedSeries& grid) const {
  if (grid.lat != lat || grid.lon != lon || grid.mask != mask || grid.n_var() != vars.size()) return false;
  for (std::size_t v = 0; v < vars.size(); ++v)
    if (grid.var_names[v] != vars[v].name) return false;
  return true;
}

GriddedSeries EofBasis::grid_template(std::size_t n_time, int start_year, int start_month) const {
  GriddedSeries g;
  g.lat = lat;
  g.lon = lon;
  g.mask = mask;
  for (const auto& v : vars) g.var_names.push_back(v.name);
  g.start_year = start_year;
  g.start_month = start_month;
  return g.like(n_time);
}

std::uint64_t EofBasis::content_id() const { return fnv1a(encode_basis_payload(*this).buffer()); }

io::Section EofBasis::to_section() const { return {"EOFB", 1, encode_basis_payload(*this).take()}; }

EofBasis EofBasis::from_section(const io::Section& section) {
  if (section.tag != "EOFB") throw DataError("tag", "expected EOFB section");
  io::ByteReader r(section.payload, "EOFB");
  EofBasis b;
  const auto nvars = r.u32("n_var");
  b.n_noise_hi = static_cast<int>(r.u32("n_noise_hi"));
  b.lat = r.f64_array(r.u64("n_lat"), "lat");
  b.lon = r.f64_array(r.u64("n_lon"), "lon");
  auto mask = r.bytes(r.u64("n_mask"), "mask");
  b.mask.assign(mask.begin(), mask.end());
  const auto nc = r.u64("n_cell_index");
  for (std::uint64_t i = 0; i < nc; ++i) b.cell_index.push_back(r.u64("cell_index"));
  for (std::uint32_t v = 0; v < nvars; ++v) {
    VariableBasis vb;
    vb.name = r.str("name");
    vb.n_keep = static_cast<int>(r.u32("n_keep"));
    vb.patterns = r.matrix("patterns");
    vb.singular_values = r.matrix("singular_values");
    vb.train_pc_std = r.matrix("train_pc_std");
    b.vars.push_back(std::move(vb));
  }
  b.id = fnv1a(section.payload);
  return b;
}

PcSeries PcSeries::slice(TimeRange range) const {
  if (range.end > size() || range.begin > range.end) throw DataError("time", "PC slice out of range");
  PcSeries out;
  out.z = z.middleRows(static_cast<Eigen::Index>(range.begin), static_cast<Eigen::Index>(range.size()));
  out.month.assign(month.begin() + static_cast<std::ptrdiff_t>(range.begin), month.begin() + static_cast<std::ptrdiff_t>(range.end));
  out.basis_id = basis_id;
  out.start_year = start_year + static_cast<int>((static_cast<std::size_t>(month.empty() ? 0 : month[0] - 1) + range.begin) / 12);
  return out;
}

void PcSeries::validate() const {
  if (month.size() != size()) throw DataError("month", "month labels do not match record count");
  for (std::size_t t = 0; t < month.size(); ++t) {
    if (month[t] < 1 || month[t] > 12) throw DataError("month", "label outside 1..12");
    if (t > 0 && month[t] != month[t - 1] % 12 + 1) throw DataError("month", "labels are not consecutive");
  }
}

io::Section PcSeries::to_section() const {
  io::ByteWriter w;
  w.u64(basis_id);
  w.u32(static_cast<std::uint32_t>(start_year));
  w.u32(static_cast<std::uint32_t>(month.empty() ? 1 : month[0]));
  w.matrix(z);
  return {"PCSR", 1, w.take()};
}

PcSeries PcSeries::from_section(const io::Section& section) {
  if (section.tag != "PCSR") throw DataError("tag", "expected PCSR section");
  io::ByteReader r(section.payload, "PCSR");
  const auto id = r.u64("basis_id");
  const auto year = static_cast<int>(r.u32("start_year"));
  const auto m0 = static_cast<int>(r.u32("start_month"));
  return make_pc_series(r.matrix("z"), m0, year, id);
}

PcSeries make_pc_series(Eigen::MatrixXd z, int start_month, int start_year, std::uint64_t basis_id) {
  PcSeries s;
  s.month.resize(static_cast<std::size_t>(z.rows()));
  for (std::size_t t = 0; t < s.month.size(); ++t) s.month[t] = month_of(start_month, t);
  s.z = std::move(z);
  s.start_year = start_year;
  s.basis_id = basis_id;
  return s;
}

Eigen::MatrixXd stacked_fields(const GriddedSeries& series) {
  const auto cells = series.valid_cells();
  const auto nc = static_cast<Eigen::Index>(cells.size());
  Eigen::MatrixXd out(static_cast<Eigen::Index>(series.n_time()), nc * static_cast<Eigen::Index>(series.n_var()));
  for (std::size_t t = 0; t < series.n_time(); ++t)
    for (std::size_t v = 0; v < series.n_var(); ++v)
      for (Eigen::Index k = 0; k < nc; ++k)
        out(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(v) * nc + k) = series.at(t, v, cells[static_cast<std::size_t>(k)]);
  return out;
}

GriddedSeries unstack_fields(const Eigen::MatrixXd& stacked, const EofBasis& basis, int start_year, int start_month) {
  const auto nc = static_cast<Eigen::Index>(basis.n_valid());
  if (stacked.cols() != nc * static_cast<Eigen::Index>(basis.vars.size()))
    throw DataError("fields", "stacked width does not match the basis grid");
  GriddedSeries g = basis.grid_template(static_cast<std::size_t>(stacked.rows()), start_year, start_month);
  for (Eigen::Index t = 0; t < stacked.rows(); ++t)
    for (std::size_t v = 0; v < basis.vars.size(); ++v)
      for (Eigen::Index k = 0; k < nc; ++k)
        g.at(static_cast<std::size_t>(t), v, basis.cell_index[static_cast<std::size_t>(k)]) =
            stacked(t, static_cast<Eigen::Index>(v) * nc + k);
  return g;
}

EofBasis fit_eof(const GriddedSeries& train, const std::vector<int>& n_keep, int n_total, int n_noise_hi) {
  if (n_keep.size() != train.n_var())
    throw ConfigError("n_keep must list one truncation per variable (" + std::to_string(train.n_var()) + ")");
  EofBasis basis;
  basis.lat = train.lat;
  basis.lon = train.lon;
  basis.mask = train.mask;
  basis.cell_index = train.valid_cells();
  basis.n_noise_hi = n_noise_hi;
  const auto nc = static_cast<Eigen::Index>(basis.n_valid());
  const auto nt = static_cast<Eigen::Index>(train.n_time());
  const Eigen::Index rank = std::min(nt, nc);
  if (n_total < 1 || n_total > rank)
    throw DataError("n_total", "requested " + std::to_string(n_total) + " modes but the data matrix has rank at most " +
                                   std::to_string(rank));

  const Eigen::MatrixXd all = stacked_fields(train);
  for (std::size_t v = 0; v < train.n_var(); ++v) {
    if (n_keep[v] < 1 || n_keep[v] > n_total || n_keep[v] > n_noise_hi)
      throw ConfigError("n_keep for '" + train.var_names[v] + "' must satisfy 1 <= n_keep <= min(n_total, n_noise_hi)");
    const Eigen::MatrixXd x = all.middleCols(static_cast<Eigen::Index>(v) * nc, nc);
    Eigen::BDCSVD<Eigen::MatrixXd> svd(x, Eigen::ComputeThinV);
    VariableBasis vb;
    vb.name = train.var_names[v];
    vb.n_keep = n_keep[v];
    vb.singular_values = svd.singularValues().head(n_total);
    vb.patterns = svd.matrixV().leftCols(n_total).transpose();
    for (Eigen::Index k = 0; k < vb.patterns.rows(); ++k) {
      Eigen::Index imax = 0;
      vb.patterns.row(k).cwiseAbs().maxCoeff(&imax);
      if (vb.patterns(k, imax) < 0.0) vb.patterns.row(k) *= -1.0;
    }
    const Eigen::MatrixXd pcs = x * vb.patterns.transpose();  // nt x n_total
    const Eigen::RowVectorXd mean = pcs.colwise().mean();
    vb.train_pc_std = ((pcs.rowwise() - mean).array().square().colwise().sum() / static_cast<double>(nt)).sqrt().transpose();
    basis.vars.push_back(std::move(vb));
  }
  basis.id = basis.content_id();
  return basis;
}

PcSeries project(const GriddedSeries& field, const EofBasis& basis) {
  if (!basis.matches(field)) throw DataError("basis", "field grid, mask or variables differ from the EOF basis");
  const Eigen::MatrixXd x = stacked_fields(field);
  Eigen::MatrixXd z = x * basis.kept_map().transpose();
  return make_pc_series(std::move(z), field.start_month, field.start_year, basis.id);
}

GriddedSeries reconstruct(const PcSeries& z, const EofBasis& basis, std::optional<std::uint64_t> noise_seed) {
  if (z.dim() != basis.dim()) throw DataError("z", "PC dimension does not match the basis");
  Eigen::MatrixXd x = z.z * basis.kept_map();
  if (noise_seed) {
    const auto nc = static_cast<Eigen::Index>(basis.n_valid());
    for (Eigen::Index t = 0; t < x.rows(); ++t) {
      Rng rng = substream(*noise_seed, static_cast<std::uint64_t>(t));
      std::normal_distribution<double> normal(0.0, 1.0);
      for (std::size_t v = 0; v < basis.vars.size(); ++v) {
        const auto& vb = basis.vars[v];
        const int hi = std::min(basis.n_noise_hi, vb.n_modes());
        for (int k = vb.n_keep; k < hi; ++k) {
          const double eps = normal(rng) * vb.train_pc_std(k);
          x.row(t).segment(static_cast<Eigen::Index>(v) * nc, nc) += eps * vb.patterns.row(k);
        }
      }
    }
  }
  const int m0 = z.month.empty() ? 1 : z.month.front();
  return unstack_fields(x, basis, z.start_year, m0);
}

}  // namespace limcast::eof
