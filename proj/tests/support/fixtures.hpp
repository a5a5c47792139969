#pragma once

#include "limcast/grid.hpp"
#include "limcast/random.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

namespace limcast::testing {

/// Regular grid with `n_var` variables, every cell valid, values from `fill(t, v, cell)`.
inline GriddedSeries make_grid(std::size_t n_time, std::size_t n_var, std::size_t n_lat, std::size_t n_lon,
                               const std::function<double(std::size_t, std::size_t, std::size_t)>& fill,
                               int start_month = 1) {
  GriddedSeries g;
  for (std::size_t i = 0; i < n_lat; ++i) g.lat.push_back(-10.0 + 20.0 * static_cast<double>(i) / std::max<double>(1, n_lat - 1));
  for (std::size_t j = 0; j < n_lon; ++j) g.lon.push_back(140.0 + 10.0 * static_cast<double>(j));
  for (std::size_t v = 0; v < n_var; ++v) g.var_names.push_back(v == 0 ? "ssta" : v == 1 ? "ssha" : "v" + std::to_string(v));
  g.mask.assign(n_lat * n_lon, 1);
  g.start_year = 1;
  g.start_month = start_month;
  g.values.resize(n_time * g.frame_size());
  for (std::size_t t = 0; t < n_time; ++t)
    for (std::size_t v = 0; v < n_var; ++v)
      for (std::size_t c = 0; c < g.n_cells(); ++c) g.at(t, v, c) = fill(t, v, c);
  return g;
}

inline void mask_cell(GriddedSeries& g, std::size_t cell) {
  g.mask[cell] = 0;
  for (std::size_t t = 0; t < g.n_time(); ++t)
    for (std::size_t v = 0; v < g.n_var(); ++v) g.at(t, v, cell) = std::numeric_limits<double>::quiet_NaN();
}

inline Eigen::MatrixXd random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = n(rng);
  return m;
}

/// Stable non-normal test operator of size d.
inline Eigen::MatrixXd stable_operator(Rng& rng, int d) {
  Eigen::MatrixXd v = Eigen::MatrixXd::Identity(d, d) + 0.3 * random_matrix(rng, d, d) / std::sqrt(d);
  Eigen::MatrixXd lam = Eigen::MatrixXd::Zero(d, d);
  for (int i = 0; i < d; ++i) lam(i, i) = -0.05 - 0.45 * i / std::max(1, d - 1);
  if (d >= 2) {
    lam(0, 1) = 0.15;
    lam(1, 0) = -0.15;
    lam(1, 1) = lam(0, 0);
  }
  return v * lam * v.inverse();
}

inline Eigen::MatrixXd random_spd(Rng& rng, int d, double ridge = 0.2) {
  const Eigen::MatrixXd a = random_matrix(rng, d, d);
  return a * a.transpose() / d + ridge * Eigen::MatrixXd::Identity(d, d);
}

/// Truncated Taylor series of exp(A).
inline Eigen::MatrixXd exp_series(const Eigen::MatrixXd& a, int terms = 30) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Identity(a.rows(), a.cols());
  Eigen::MatrixXd term = out;
  for (int k = 1; k <= terms; ++k) {
    term = term * a / static_cast<double>(k);
    out += term;
  }
  return out;
}

inline double rel_frob(const Eigen::MatrixXd& a, const Eigen::MatrixXd& ref) { return (a - ref).norm() / ref.norm(); }

inline double sample_skewness(const Eigen::VectorXd& x) {
  const double mu = x.mean();
  const Eigen::ArrayXd c = x.array() - mu;
  const double m2 = (c * c).mean();
  const double m3 = (c * c * c).mean();
  return m3 / std::pow(m2, 1.5);
}

/// Central finite-difference gradient of a scalar function of a flat vector.
inline Eigen::VectorXd numeric_gradient(const std::function<double(const Eigen::VectorXd&)>& f, Eigen::VectorXd x,
                                        double h = 1e-5) {
  Eigen::VectorXd g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double x0 = x(i);
    x(i) = x0 + h;
    const double fp = f(x);
    x(i) = x0 - h;
    const double fm = f(x);
    x(i) = x0;
    g(i) = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)
inline double max_rel_error(const Eigen::VectorXd& a, const Eigen::VectorXd& b, double floor = 1e-3) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double den = std::max({std::abs(a(i)), std::abs(b(i)), floor});
    worst = std::max(worst, std::abs(a(i) - b(i)) / den);
  }
  return worst;
}

}  // namespace limcast::testing

namespace limcast::testing {

/// Exact monthly sampling of a linear process: z_{t+1} = G_{m(t)} z_t + S_{m(t)} eta.
/// `g` and `s` hold one matrix (stationary) or twelve (by calendar month).
inline Eigen::MatrixXd simulate_discrete(const std::vector<Eigen::MatrixXd>& g, const std::vector<Eigen::MatrixXd>& s,
                                         std::size_t n, std::uint64_t seed, int start_month = 1,
                                         std::size_t burn_in = 600) {
  const auto d = g[0].rows();
  Rng rng(seed);
  std::normal_distribution<double> normal;
  Eigen::VectorXd z = Eigen::VectorXd::Zero(d), eta(d);
  Eigen::MatrixXd out(static_cast<Eigen::Index>(n), d);
  int month = month_of(start_month, 0);
  // Burn-in is a whole number of years so the first kept record sits in start_month.
  const std::size_t skip = burn_in - burn_in % 12;
  for (std::size_t t = 0; t < n + skip; ++t) {
    if (t >= skip) out.row(static_cast<Eigen::Index>(t - skip)) = z.transpose();
    const std::size_t j = g.size() == 1 ? 0 : static_cast<std::size_t>(month - 1);
    for (Eigen::Index i = 0; i < d; ++i) eta(i) = normal(rng);
    z = g[j] * z + s[j] * eta;
    month = month % 12 + 1;
  }
  return out;
}

}  // namespace limcast::testing
