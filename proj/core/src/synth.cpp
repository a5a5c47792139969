#include "limcast/synth.hpp"

#include "limcast/error.hpp"
#include "limcast/linalg.hpp"
#include "limcast/random.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

namespace limcast::synth {

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using json = nlohmann::json;

constexpr double kForcedDamping = 0.1;
constexpr double kForcedNoise = 0.05;

struct Layout {
  int forced = 0;
  bool pair0 = false;  // modes 0, 1 oscillate
  bool pair2 = false;  // modes 2, 3 oscillate
  int first_fast = 0;
};

Layout layout_for(int d) {
  Layout lay;
  if (d == 2) {
    lay.forced = 1;
    lay.first_fast = 2;
  } else if (d < 5) {
    lay.pair0 = true;
    lay.forced = 2;
    lay.first_fast = 3;
  } else {
    lay.pair0 = lay.pair2 = true;
    lay.forced = 4;
    lay.first_fast = 5;
  }
  return lay;
}

double season(int month, bool seasonal) {
  return seasonal ? std::cos(2.0 * std::numbers::pi * (month - 1) / 12.0) : 0.0;
}

MatrixXd modal_operator(int d, const Layout& lay, int month, bool seasonal) {
  const double s = season(month, seasonal);
  MatrixXd a = MatrixXd::Zero(d, d);
  const double r0 = 0.1 + 0.05 * s;
  if (lay.pair0) {
    const double w = 2.0 * std::numbers::pi / 48.0;
    a(0, 0) = a(1, 1) = -r0;
    a(0, 1) = w;
    a(1, 0) = -w;
  } else {
    a(0, 0) = -r0;
  }
  if (lay.pair2) {
    const double w = 2.0 * std::numbers::pi / 18.0;
    const double r = 0.25 + 0.08 * s;
    a(2, 2) = a(3, 3) = -r;
    a(2, 3) = w;
    a(3, 2) = -w;
  }
  a(lay.forced, lay.forced) = -kForcedDamping;
  const int n_fast = d - lay.first_fast;
  for (int i = 0; i < n_fast; ++i) {
    const double r = n_fast == 1 ? 0.2 : 0.15 + 0.15 * i / (n_fast - 1);
    a(lay.first_fast + i, lay.first_fast + i) = -r;
  }
  return a;
}

MatrixXd modal_noise(int d, const Layout& lay, int month, bool seasonal, const MatrixXd& w) {
  const double s = season(month, seasonal);
  VectorXd q = VectorXd::Ones(d);
  q(0) = 1.0 + 0.5 * s;
  if (lay.pair0) q(1) = 1.0 + 0.5 * s;
  q(lay.forced) = kForcedNoise;
  return MatrixXd(q.asDiagonal()) + 0.1 * w * w.transpose() / d;
}

double condition_number(const MatrixXd& m) {
  Eigen::JacobiSVD<MatrixXd> svd(m);
  const auto& sv = svd.singularValues();
  return sv(0) / sv(sv.size() - 1);
}

// Smooth random field: a few Gaussian bumps with random centres, widths and signs.
VectorXd smooth_field(const std::vector<double>& lat, const std::vector<double>& lon,
                      const std::vector<std::size_t>& cells, Rng& rng) {
  std::uniform_real_distribution<double> ulat(lat.front(), lat.back());
  std::uniform_real_distribution<double> ulon(lon.front(), lon.back());
  std::uniform_real_distribution<double> uw(0.5, 1.5);
  std::normal_distribution<double> amp;
  VectorXd f = VectorXd::Zero(static_cast<Eigen::Index>(cells.size()));
  for (int bump = 0; bump < 4; ++bump) {
    const double clat = ulat(rng), clon = ulon(rng);
    const double wlat = 6.0 * uw(rng), wlon = 30.0 * uw(rng);
    const double a = amp(rng);
    for (std::size_t i = 0; i < cells.size(); ++i) {
      const double y = lat[cells[i] / lon.size()], x = lon[cells[i] % lon.size()];
      f(static_cast<Eigen::Index>(i)) +=
          a * std::exp(-0.5 * (std::pow((y - clat) / wlat, 2) + std::pow((x - clon) / wlon, 2)));
    }
  }
  return f;
}

// Rows orthonormalised in order (modified Gram-Schmidt); near-dependent rows
// are redrawn.
MatrixXd orthonormal_patterns(int n, const std::vector<double>& lat, const std::vector<double>& lon,
                              const std::vector<std::size_t>& cells, Rng& rng, const VectorXd* first) {
  MatrixXd p(n, static_cast<Eigen::Index>(cells.size()));
  for (int k = 0; k < n; ++k) {
    for (;;) {
      VectorXd f = (k == 0 && first) ? *first : smooth_field(lat, lon, cells, rng);
      const double norm0 = f.norm();
      for (int j = 0; j < k; ++j) f -= p.row(j).dot(f) * p.row(j).transpose();
      if (f.norm() > 1e-3 * norm0) {
        p.row(k) = (f / f.norm()).transpose();
        break;
      }
    }
  }
  return p;
}

std::vector<std::size_t> valid_cells(const std::vector<std::uint8_t>& mask) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) out.push_back(i);
  return out;
}

std::vector<double> component_std(const SynthSystem& system) {
  const auto cov = linear_covariances(system);
  MatrixXd mean = MatrixXd::Zero(system.d, system.d);
  for (const auto& c : cov) mean += c / static_cast<double>(cov.size());
  std::vector<double> out(static_cast<std::size_t>(system.d));
  for (int i = 0; i < system.d; ++i) out[static_cast<std::size_t>(i)] = std::sqrt(mean(i, i));
  return out;
}

json matrix_json(const MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

MatrixXd matrix_from_json(const json& j, const std::string& field) {
  if (!j.is_array() || j.empty()) throw DataError(field, "expected a non-empty array of rows");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = static_cast<Eigen::Index>(j[0].size());
  MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const auto& row = j[static_cast<std::size_t>(i)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols) throw DataError(field, "ragged matrix");
    for (Eigen::Index k = 0; k < cols; ++k) m(i, k) = row[static_cast<std::size_t>(k)].get<double>();
  }
  return m;
}

VectorXd vector_from_json(const json& j, const std::string& field) {
  if (!j.is_array()) throw DataError(field, "expected an array");
  VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
  return v;
}

}  // namespace

std::size_t SynthSystem::n_valid() const {
  std::size_t n = 0;
  for (auto m : mask) n += m != 0;
  return n;
}

SynthSystem make_synth_system(int d, bool seasonal, double nonlin_coeff, std::uint64_t seed) {
  if (d < 2) throw ConfigError("synthetic system needs d >= 2");
  if (!(nonlin_coeff >= 0.0)) throw ConfigError("nonlin_coeff must be >= 0");
  SynthSystem s;
  s.d = d;
  s.seasonal = seasonal;
  s.nonlin_coeff = nonlin_coeff;
  s.seed = seed;
  const Layout lay = layout_for(d);
  s.forced_mode = lay.forced;

  Rng vrng = substream(seed, 1);
  std::normal_distribution<double> normal;
  MatrixXd v;
  do {
    MatrixXd r(d, d);
    for (Eigen::Index i = 0; i < r.size(); ++i) r.data()[i] = normal(vrng);
    v = MatrixXd::Identity(d, d) + 0.25 * r / std::sqrt(static_cast<double>(d));
  } while (condition_number(v) > 10.0);
  // Warm-amplifying: the forced direction loads positively on component 0.
  if (v(0, lay.forced) < 0.0) v.col(lay.forced) *= -1.0;
  s.v = v;
  s.v_inv = v.inverse();
  s.u = s.v_inv.row(0).transpose();
  s.b = v.col(lay.forced);

  MatrixXd w(d, d);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = normal(vrng);
  w.row(lay.forced).setZero();

  const int n_reg = seasonal ? 12 : 1;
  for (int m = 1; m <= n_reg; ++m) {
    s.l.push_back(v * modal_operator(d, lay, m, seasonal) * s.v_inv);
    MatrixXd q = v * modal_noise(d, lay, m, seasonal, w) * v.transpose();
    s.q.push_back(0.5 * (q + q.transpose()));
  }

  // Synthetic tropical Pacific grid.
  for (double y = -12.5; y <= 12.5 + 1e-9; y += 5.0) s.lat.push_back(y);
  for (double x = 130.0; x <= 280.0 + 1e-9; x += 10.0) s.lon.push_back(x);
  s.mask.assign(s.lat.size() * s.lon.size(), 1);
  s.mask[4 * s.lon.size() + 15] = 0;
  s.mask[5 * s.lon.size() + 15] = 0;
  const auto cells = valid_cells(s.mask);
  if (static_cast<int>(cells.size()) < d) throw ConfigError("synthetic grid has fewer cells than state components");

  s.n_ssta = std::max(1, static_cast<int>(std::lround(0.6 * d)));
  if (s.n_ssta >= d) s.n_ssta = d - 1;
  VectorXd nino(static_cast<Eigen::Index>(cells.size()));
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const double y = s.lat[cells[i] / s.lon.size()], x = s.lon[cells[i] % s.lon.size()];
    nino(static_cast<Eigen::Index>(i)) = std::exp(-0.5 * (std::pow(y / 6.0, 2) + std::pow((x - 185.0) / 25.0, 2)));
  }
  Rng prng = substream(seed, 2);
  s.patterns_ssta = orthonormal_patterns(s.n_ssta, s.lat, s.lon, cells, prng, &nino);
  s.patterns_ssha = orthonormal_patterns(d - s.n_ssta, s.lat, s.lon, cells, prng, nullptr);

  const auto cov = linear_covariances(s);
  double var0 = 0.0;
  for (const auto& c : cov) var0 += (s.v_inv * c * s.v_inv.transpose())(0, 0) / static_cast<double>(cov.size());
  s.stability_bound = kForcedDamping / std::sqrt(var0);
  return s;
}

SynthSystem with_nonlinearity(const SynthSystem& system, double nonlin_coeff) {
  if (!(nonlin_coeff >= 0.0)) throw ConfigError("nonlin_coeff must be >= 0");
  SynthSystem s = system;
  s.nonlin_coeff = nonlin_coeff;
  return s;
}

lim::LimOperator linear_operator(const SynthSystem& system) {
  if (system.l.size() == 1) return lim::LimOperator::stationary(system.l[0], system.q[0]);
  return lim::LimOperator::cyclostationary(system.l, system.q);
}

MatrixXd euler_month_map(const SynthSystem& system, int month, double delta) {
  const int n = lim::substeps_per_month(delta);
  const MatrixXd step = MatrixXd::Identity(system.d, system.d) + delta * system.l_month(month);
  MatrixXd g = MatrixXd::Identity(system.d, system.d);
  for (int i = 0; i < n; ++i) g = step * g;
  return g;
}

std::vector<MatrixXd> linear_covariances(const SynthSystem& system, double delta) {
  const int n = lim::substeps_per_month(delta);
  const int d = system.d;
  std::vector<MatrixXd> step(12);
  for (int m = 1; m <= 12; ++m) step[static_cast<std::size_t>(m - 1)] = MatrixXd::Identity(d, d) + delta * system.l_month(m);
  std::vector<MatrixXd> c(12, MatrixXd::Zero(d, d));
  MatrixXd cur = MatrixXd::Zero(d, d);
  for (int year = 0; year < 20000; ++year) {
    const MatrixXd jan = cur;
    for (int m = 1; m <= 12; ++m) {
      c[static_cast<std::size_t>(m - 1)] = cur;
      const auto& a = step[static_cast<std::size_t>(m - 1)];
      const MatrixXd qd = delta * system.q_month(m);
      for (int i = 0; i < n; ++i) cur = a * cur * a.transpose() + qd;
    }
    if (year > 0 && (cur - jan).norm() <= 1e-13 * cur.norm()) break;
  }
  for (auto& m : c) m = 0.5 * (m + m.transpose());
  return c;
}

eof::PcSeries generate(const SynthSystem& system, int years, std::uint64_t seed, const GenerateOptions& opt) {
  if (years < 2) throw ConfigError("generate needs years >= 2");
  if (opt.spinup_years < 0) throw ConfigError("spinup_years must be >= 0");
  const int n = lim::substeps_per_month(opt.delta);
  const int d = system.d;
  const double sqrt_delta = std::sqrt(opt.delta);
  const double c = system.nonlin_coeff;

  std::vector<MatrixXd> factor;
  for (const auto& q : system.q) factor.push_back(linalg::psd_lower_factor(q));
  const auto stds = component_std(system);
  VectorXd limit(d);
  for (int i = 0; i < d; ++i) limit(i) = opt.divergence_sigmas * stds[static_cast<std::size_t>(i)];

  Rng rng = substream(seed, 0);
  std::normal_distribution<double> normal;
  const std::size_t total = static_cast<std::size_t>(opt.spinup_years + years) * 12;
  const std::size_t skip = static_cast<std::size_t>(opt.spinup_years) * 12;
  MatrixXd out(static_cast<Eigen::Index>(total - skip), d);
  VectorXd z = VectorXd::Zero(d), drift(d), eta(d);
  for (std::size_t t = 0; t < total; ++t) {
    const int month = month_of(1, t);
    const std::size_t r = factor.size() == 1 ? 0 : static_cast<std::size_t>(month - 1);
    const MatrixXd& l = system.l[r];
    const MatrixXd& f = factor[r];
    for (int k = 0; k < n; ++k) {
      drift.noalias() = l * z;
      if (c != 0.0) {
        const double a = system.u.dot(z);
        drift += c * a * a * system.b;
      }
      for (int i = 0; i < d; ++i) eta(i) = normal(rng);
      z += opt.delta * drift;
      z.noalias() += sqrt_delta * (f * eta);
    }
    if (!z.allFinite() || (z.array().abs() > limit.array()).any()) {
      std::ostringstream msg;
      msg << "synthetic trajectory diverged in month " << t << " (c=" << c << ", seed=" << seed << ")";
      throw DivergenceError(msg.str());
    }
    if (t >= skip) out.row(static_cast<Eigen::Index>(t - skip)) = z.transpose();
  }
  return eof::make_pc_series(std::move(out), 1, 1, embedding_basis(system).id);
}

GriddedSeries embed(const SynthSystem& system, const eof::PcSeries& z, std::optional<std::uint64_t> noise_seed) {
  if (z.dim() != system.d) throw DataError("dim", "state dimension does not match the synthetic system");
  GriddedSeries g;
  g.lat = system.lat;
  g.lon = system.lon;
  g.mask = system.mask;
  g.var_names = {"ssta", "ssha"};
  g.start_year = z.start_year;
  g.start_month = z.month.empty() ? 1 : z.month.front();
  const auto cells = valid_cells(system.mask);
  const std::size_t nt = z.size();
  g.values.assign(nt * g.frame_size(), std::numeric_limits<double>::quiet_NaN());
  const int na = system.n_ssta;
  const MatrixXd fa = z.z.leftCols(na) * system.patterns_ssta;
  const MatrixXd fb = z.z.rightCols(system.d - na) * system.patterns_ssha;
  std::optional<Rng> rng;
  if (noise_seed) rng.emplace(substream(*noise_seed, 3));
  std::normal_distribution<double> normal(0.0, system.obs_noise);
  for (std::size_t t = 0; t < nt; ++t) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      double a = fa(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(i));
      double b = fb(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(i));
      if (rng) {
        a += normal(*rng);
        b += normal(*rng);
      }
      g.at(t, 0, cells[i]) = a;
      g.at(t, 1, cells[i]) = b;
    }
  }
  return g;
}

eof::EofBasis embedding_basis(const SynthSystem& system) {
  eof::EofBasis basis;
  basis.lat = system.lat;
  basis.lon = system.lon;
  basis.mask = system.mask;
  basis.cell_index = valid_cells(system.mask);
  const auto stds = component_std(system);
  const int na = system.n_ssta;
  basis.n_noise_hi = std::max(na, system.d - na);
  for (int v = 0; v < 2; ++v) {
    eof::VariableBasis vb;
    vb.name = v == 0 ? "ssta" : "ssha";
    vb.patterns = v == 0 ? system.patterns_ssta : system.patterns_ssha;
    vb.n_keep = static_cast<int>(vb.patterns.rows());
    vb.singular_values = VectorXd::Ones(vb.n_keep);
    vb.train_pc_std.resize(vb.n_keep);
    for (int k = 0; k < vb.n_keep; ++k) vb.train_pc_std(k) = stds[static_cast<std::size_t>(v == 0 ? k : na + k)];
    basis.vars.push_back(std::move(vb));
  }
  basis.id = basis.content_id();
  return basis;
}

std::vector<double> quadratic_pattern(const SynthSystem& system) {
  const std::size_t n_cells = system.mask.size();
  std::vector<double> out(2 * n_cells, std::numeric_limits<double>::quiet_NaN());
  const auto cells = valid_cells(system.mask);
  const int na = system.n_ssta;
  const VectorXd fa = system.patterns_ssta.transpose() * system.b.head(na);
  const VectorXd fb = system.patterns_ssha.transpose() * system.b.tail(system.d - na);
  for (std::size_t i = 0; i < cells.size(); ++i) {
    out[cells[i]] = fa(static_cast<Eigen::Index>(i));
    out[n_cells + cells[i]] = fb(static_cast<Eigen::Index>(i));
  }
  return out;
}

std::string to_json(const SynthSystem& s) {
  json j;
  j["d"] = s.d;
  j["seasonal"] = s.seasonal;
  j["nonlin_coeff"] = s.nonlin_coeff;
  j["seed"] = s.seed;
  j["forced_mode"] = s.forced_mode;
  j["stability_bound"] = s.stability_bound;
  j["l"] = json::array();
  j["q"] = json::array();
  for (const auto& m : s.l) j["l"].push_back(matrix_json(m));
  for (const auto& m : s.q) j["q"].push_back(matrix_json(m));
  j["v"] = matrix_json(s.v);
  j["v_inv"] = matrix_json(s.v_inv);
  j["u"] = std::vector<double>(s.u.data(), s.u.data() + s.u.size());
  j["b"] = std::vector<double>(s.b.data(), s.b.data() + s.b.size());
  j["n_ssta"] = s.n_ssta;
  j["lat"] = s.lat;
  j["lon"] = s.lon;
  j["mask"] = s.mask;
  j["patterns_ssta"] = matrix_json(s.patterns_ssta);
  j["patterns_ssha"] = matrix_json(s.patterns_ssha);
  j["obs_noise"] = s.obs_noise;
  return j.dump(1);
}

SynthSystem from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw DataError("json", e.what());
  }
  SynthSystem s;
  try {
    s.d = j.at("d").get<int>();
    s.seasonal = j.at("seasonal").get<bool>();
    s.nonlin_coeff = j.at("nonlin_coeff").get<double>();
    s.seed = j.at("seed").get<std::uint64_t>();
    s.forced_mode = j.at("forced_mode").get<int>();
    s.stability_bound = j.at("stability_bound").get<double>();
    for (const auto& m : j.at("l")) s.l.push_back(matrix_from_json(m, "l"));
    for (const auto& m : j.at("q")) s.q.push_back(matrix_from_json(m, "q"));
    s.v = matrix_from_json(j.at("v"), "v");
    s.v_inv = matrix_from_json(j.at("v_inv"), "v_inv");
    s.u = vector_from_json(j.at("u"), "u");
    s.b = vector_from_json(j.at("b"), "b");
    s.n_ssta = j.at("n_ssta").get<int>();
    s.lat = j.at("lat").get<std::vector<double>>();
    s.lon = j.at("lon").get<std::vector<double>>();
    s.mask = j.at("mask").get<std::vector<std::uint8_t>>();
    s.patterns_ssta = matrix_from_json(j.at("patterns_ssta"), "patterns_ssta");
    s.patterns_ssha = matrix_from_json(j.at("patterns_ssha"), "patterns_ssha");
    s.obs_noise = j.at("obs_noise").get<double>();
  } catch (const json::exception& e) {
    throw DataError("json", e.what());
  }
  const auto d = static_cast<Eigen::Index>(s.d);
  auto square = [d](const MatrixXd& m) { return m.rows() == d && m.cols() == d; };
  bool ok = (s.l.size() == 1 || s.l.size() == 12) && s.q.size() == s.l.size() && square(s.v) && square(s.v_inv) &&
            s.u.size() == d && s.b.size() == d && s.n_ssta >= 1 && s.n_ssta < s.d &&
            s.mask.size() == s.lat.size() * s.lon.size() && s.patterns_ssta.rows() == s.n_ssta &&
            s.patterns_ssha.rows() == d - s.n_ssta;
  for (std::size_t i = 0; ok && i < s.l.size(); ++i) ok = square(s.l[i]) && square(s.q[i]);
  const auto nv = static_cast<Eigen::Index>(s.n_valid());
  ok = ok && s.patterns_ssta.cols() == nv && s.patterns_ssha.cols() == nv;
  if (!ok) throw DataError("synth", "inconsistent synthetic system dimensions");
  s.seasonal = s.l.size() == 12;
  return s;
}

}  // namespace limcast::synth
