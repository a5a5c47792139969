#include "limcast/verify.hpp"

#include "limcast/error.hpp"
#include "limcast/random.hpp"

#include "json.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace limcast::verify {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void check_pair(std::span<const double> f, std::span<const double> x, std::size_t min_n, const char* what) {
  if (f.size() != x.size()) throw DataError(what, "forecast and target lengths differ");
  if (f.size() < min_n) throw DataError(what, "needs at least " + std::to_string(min_n) + " samples");
}

std::span<const double> col_span(const Eigen::MatrixXd& m, Eigen::Index c, std::vector<double>& buf) {
  buf.resize(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) buf[static_cast<std::size_t>(i)] = m(i, c);
  return buf;
}

double score(std::span<const double> f, std::span<const double> x, Metric metric) {
  switch (metric) {
    case Metric::acc: return acc(f, x);
    case Metric::rmsess: return rmsess(f, x);
    case Metric::rmse: return rmse(f, x);
    default: throw ConfigError("metric '" + metric_name(metric) + "' needs ensemble forecasts");
  }
}

}  // namespace

double crps_empirical(std::span<const double> members, double target, bool fair) {
  const std::size_t m = members.size();
  if (m == 0) throw DataError("members", "ensemble is empty");
  if (fair && m < 2) throw ConfigError("fair CRPS needs at least 2 members");
  double abs_err = 0.0;
  for (double x : members) abs_err += std::abs(x - target);
  if (m == 1) return abs_err;
  std::vector<double> s(members.begin(), members.end());
  std::sort(s.begin(), s.end());
  // sum_{i<j} (s_j - s_i) = sum_k (s_k - s_0) (2k - m + 1); the shift keeps
  // equal members exactly at zero.
  double pair = 0.0;
  for (std::size_t k = 1; k < m; ++k)
    pair += (s[k] - s[0]) * (2.0 * static_cast<double>(k) - static_cast<double>(m) + 1.0);
  const double md = static_cast<double>(m);
  const double denom = fair ? md * (md - 1.0) : md * md;
  const double crps = abs_err / md - pair / denom;
  return fair ? crps : std::max(0.0, crps);
}

double mean_crps(const Eigen::MatrixXd& ensemble, const Eigen::VectorXd& target, bool fair) {
  if (ensemble.rows() != target.size()) throw DataError("target", "ensemble and target lengths differ");
  if (ensemble.rows() == 0) throw DataError("target", "no samples");
  std::vector<double> row(static_cast<std::size_t>(ensemble.cols()));
  double total = 0.0;
  for (Eigen::Index i = 0; i < ensemble.rows(); ++i) {
    for (Eigen::Index j = 0; j < ensemble.cols(); ++j) row[static_cast<std::size_t>(j)] = ensemble(i, j);
    total += crps_empirical(row, target(i), fair);
  }
  return total / static_cast<double>(ensemble.rows());
}

double acc(std::span<const double> f, std::span<const double> x) {
  check_pair(f, x, 3, "acc");
  const double n = static_cast<double>(f.size());
  const double mf = std::accumulate(f.begin(), f.end(), 0.0) / n;
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  double sff = 0.0, sxx = 0.0, sfx = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    const double a = f[i] - mf, b = x[i] - mx;
    sff += a * a;
    sxx += b * b;
    sfx += a * b;
  }
  if (sff <= 0.0 || sxx <= 0.0) throw NumericalError("acc: correlation undefined for a zero-variance series");
  return std::clamp(sfx / std::sqrt(sff * sxx), -1.0, 1.0);
}

double rmse(std::span<const double> f, std::span<const double> x) {
  check_pair(f, x, 1, "rmse");
  double s = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) s += (f[i] - x[i]) * (f[i] - x[i]);
  return std::sqrt(s / static_cast<double>(f.size()));
}

double rmsess(std::span<const double> f, std::span<const double> x) {
  check_pair(f, x, 3, "rmsess");
  double s = 0.0;
  for (double v : x) s += v * v;
  const double sigma = std::sqrt(s / static_cast<double>(x.size()));
  if (sigma <= 0.0) throw NumericalError("rmsess: reference RMSE is zero");
  return 1.0 - rmse(f, x) / sigma;
}

double crpss(const Eigen::MatrixXd& model, const Eigen::MatrixXd& reference, const Eigen::VectorXd& target, bool fair) {
  const double ref = mean_crps(reference, target, fair);
  if (ref <= 0.0) throw NumericalError("crpss: reference CRPS is zero");
  return 1.0 - mean_crps(model, target, fair) / ref;
}

Eigen::MatrixXd climatology_ensemble(std::span<const double> train_values, std::span<const int> train_months,
                                     std::span<const int> months, int members, std::uint64_t seed,
                                     ClimatologyReference kind) {
  if (members < 1) throw ConfigError("climatology ensemble needs at least one member");
  const auto n = static_cast<Eigen::Index>(months.size());
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, members);
  if (kind == ClimatologyReference::zero) return out;
  if (train_values.size() != train_months.size()) throw DataError("train_months", "length differs from values");
  std::array<std::vector<double>, 12> pool;
  for (std::size_t i = 0; i < train_values.size(); ++i) pool[static_cast<std::size_t>(train_months[i] - 1)].push_back(train_values[i]);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int m = months[static_cast<std::size_t>(i)];
    if (m < 1 || m > 12) throw DataError("month", "calendar month out of range");
    const auto& p = pool[static_cast<std::size_t>(m - 1)];
    if (p.empty()) throw DataError("train_months", "no training samples for month " + std::to_string(m));
    Rng rng = substream(seed, static_cast<std::uint64_t>(i));
    std::uniform_int_distribution<std::size_t> pick(0, p.size() - 1);
    for (int j = 0; j < members; ++j) out(i, j) = p[pick(rng)];
  }
  return out;
}

Eigen::MatrixXd persistence_forecast(const Eigen::VectorXd& z0, int horizon) {
  if (horizon < 1) throw ConfigError("horizon must be >= 1");
  return z0.transpose().replicate(horizon, 1);
}

double welch_p_value(double ma, double va, double na, double mb, double vb, double nb, double* t_out, double* dof_out) {
  const double se2 = va / na + vb / nb;
  double t = 0.0, dof = na + nb - 2.0, p = 1.0;
  if (se2 <= 0.0) {
    p = ma == mb ? 1.0 : 0.0;
    t = ma == mb ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), ma - mb);
  } else {
    t = (ma - mb) / std::sqrt(se2);
    const double num = se2 * se2;
    const double den = (va > 0 ? (va / na) * (va / na) / (na - 1.0) : 0.0) + (vb > 0 ? (vb / nb) * (vb / nb) / (nb - 1.0) : 0.0);
    dof = den > 0 ? num / den : dof;
    boost::math::students_t dist(dof);
    p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
  }
  if (t_out) *t_out = t;
  if (dof_out) *dof_out = dof;
  return std::clamp(p, 0.0, 1.0);
}

BootstrapResult bootstrap_significance(std::span<const double> a, std::span<const double> b, int n_boot,
                                       std::uint64_t seed) {
  if (a.size() != b.size()) throw DataError("bootstrap", "paired series must have equal length");
  if (a.size() < 2) throw DataError("bootstrap", "needs at least 2 samples");
  if (n_boot < 2) throw ConfigError("bootstrap needs at least 2 resamples");
  const std::size_t n = a.size();
  std::vector<double> ma(static_cast<std::size_t>(n_boot)), mb(static_cast<std::size_t>(n_boot));
  for (int r = 0; r < n_boot; ++r) {
    Rng rng = substream(seed, static_cast<std::uint64_t>(r));
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    double sa = 0.0, sb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t k = pick(rng);
      sa += a[k];
      sb += b[k];
    }
    ma[static_cast<std::size_t>(r)] = sa / static_cast<double>(n);
    mb[static_cast<std::size_t>(r)] = sb / static_cast<double>(n);
  }
  auto moments = [](const std::vector<double>& v) {
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::pair{m, s / static_cast<double>(v.size() - 1)};
  };
  const auto [mean_a, var_a] = moments(ma);
  const auto [mean_b, var_b] = moments(mb);
  BootstrapResult res;
  res.mean_a = mean_a;
  res.mean_b = mean_b;
  const double nb = static_cast<double>(n_boot);
  // Identical series give identical bootstrap means, so the test is exactly null.
  if (std::equal(a.begin(), a.end(), b.begin())) {
    res.p_value = 1.0;
    res.dof = 2.0 * nb - 2.0;
    return res;
  }
  res.p_value = welch_p_value(mean_a, var_a, nb, mean_b, var_b, nb, &res.t_stat, &res.dof);
  return res;
}

std::string metric_name(Metric m) {
  switch (m) {
    case Metric::acc: return "acc";
    case Metric::rmsess: return "rmsess";
    case Metric::crpss: return "crpss";
    case Metric::crps: return "crps";
    case Metric::rmse: return "rmse";
  }
  return "?";
}

Metric parse_metric(const std::string& name) {
  for (Metric m : {Metric::acc, Metric::rmsess, Metric::crpss, Metric::crps, Metric::rmse})
    if (metric_name(m) == name) return m;
  throw ConfigError("unknown metric '" + name + "'");
}

Eigen::VectorXd skill_by_lead(const LeadForecasts& f, Metric metric) {
  if (f.target.rows() != f.forecast.rows() || f.target.cols() != f.forecast.cols())
    throw DataError("target", "forecast and target shapes differ");
  Eigen::VectorXd out(f.horizon());
  std::vector<double> bf, bx;
  for (int tau = 0; tau < f.horizon(); ++tau)
    out(tau) = score(col_span(f.forecast, tau, bf), col_span(f.target, tau, bx), metric);
  return out;
}

Eigen::MatrixXd seasonal_skill_table(const LeadForecasts& f, Metric metric) {
  if (f.init_month.size() != f.size()) throw DataError("init_month", "one initial month per forecast required");
  if (f.target.rows() != f.forecast.rows() || f.target.cols() != f.forecast.cols())
    throw DataError("target", "forecast and target shapes differ");
  Eigen::MatrixXd table = Eigen::MatrixXd::Constant(f.horizon(), 12, kNaN);
  for (int tau = 1; tau <= f.horizon(); ++tau) {
    std::array<std::vector<double>, 12> fs, xs;
    for (std::size_t i = 0; i < f.size(); ++i) {
      const auto vm = static_cast<std::size_t>(month_of(f.init_month[i], static_cast<std::size_t>(tau)) - 1);
      fs[vm].push_back(f.forecast(static_cast<Eigen::Index>(i), tau - 1));
      xs[vm].push_back(f.target(static_cast<Eigen::Index>(i), tau - 1));
    }
    for (std::size_t m = 0; m < 12; ++m) {
      if (fs[m].size() < 3) continue;
      try {
        table(tau - 1, static_cast<Eigen::Index>(m)) = score(fs[m], xs[m], metric);
      } catch (const NumericalError&) {
      }
    }
  }
  return table;
}

Eigen::VectorXd skill_map(const Eigen::MatrixXd& forecast, const Eigen::MatrixXd& target, Metric metric) {
  if (forecast.rows() != target.rows() || forecast.cols() != target.cols())
    throw DataError("target", "forecast and target shapes differ");
  Eigen::VectorXd out(forecast.cols());
  std::vector<double> bf, bx;
  for (Eigen::Index c = 0; c < forecast.cols(); ++c) {
    const auto f = col_span(forecast, c, bf);
    const auto x = col_span(target, c, bx);
    const bool finite = std::all_of(f.begin(), f.end(), [](double v) { return std::isfinite(v); }) &&
                        std::all_of(x.begin(), x.end(), [](double v) { return std::isfinite(v); });
    out(c) = kNaN;
    if (!finite) continue;
    try {
      out(c) = score(f, x, metric);
    } catch (const NumericalError&) {
    }
  }
  return out;
}

std::vector<std::vector<std::size_t>> stratify_by_optimal_growth(std::span<const double> projections,
                                                                 const std::vector<std::pair<double, double>>& bands) {
  const std::size_t n = projections.size();
  if (n < 20) throw DataError("states", "optimal-growth stratification needs at least 20 states");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return std::abs(projections[i]) < std::abs(projections[j]); });
  std::vector<std::vector<std::size_t>> out;
  for (const auto& [lo, hi] : bands) {
    if (!(lo >= 0.0 && hi <= 100.0 && lo < hi)) throw ConfigError("percentile band must satisfy 0 <= lo < hi <= 100");
    const auto a = static_cast<std::size_t>(std::floor(lo * static_cast<double>(n) / 100.0));
    const auto b = static_cast<std::size_t>(std::floor(hi * static_cast<double>(n) / 100.0));
    std::vector<std::size_t> band(order.begin() + static_cast<long>(a), order.begin() + static_cast<long>(b));
    std::sort(band.begin(), band.end());
    out.push_back(std::move(band));
  }
  return out;
}

std::vector<std::vector<std::size_t>> stratify_by_optimal_growth(const Eigen::MatrixXd& states,
                                                                 const lim::OptimalStructure& structure,
                                                                 const std::vector<std::pair<double, double>>& bands) {
  if (states.cols() != structure.oic.size()) throw DataError("states", "state dimension does not match the OIC");
  std::vector<double> p(static_cast<std::size_t>(states.rows()));
  for (Eigen::Index i = 0; i < states.rows(); ++i)
    p[static_cast<std::size_t>(i)] = lim::optimal_growth_projection(states.row(i).transpose(), structure);
  return stratify_by_optimal_growth(p, bands);
}

CompositePair asymmetry_composites(const Eigen::MatrixXd& fields, std::span<const double> signs, double alpha) {
  if (static_cast<Eigen::Index>(signs.size()) != fields.rows())
    throw DataError("composite", "one sign per field sample required");
  std::vector<Eigen::Index> warm, cold;
  for (std::size_t i = 0; i < signs.size(); ++i) {
    if (signs[i] > 0) warm.push_back(static_cast<Eigen::Index>(i));
    if (signs[i] < 0) cold.push_back(static_cast<Eigen::Index>(i));
  }
  if (warm.size() < 2 || cold.size() < 2)
    throw DataError("composite", "both warm and cold groups need at least 2 samples (warm " + std::to_string(warm.size()) +
                                     ", cold " + std::to_string(cold.size()) + ")");
  const auto p = fields.cols();
  CompositePair out;
  out.alpha = alpha;
  out.n_warm = static_cast<int>(warm.size());
  out.n_cold = static_cast<int>(cold.size());
  out.wc_minus.resize(p);
  out.wc_plus.resize(p);
  out.mask_minus.assign(static_cast<std::size_t>(p), 0);
  out.mask_plus.assign(static_cast<std::size_t>(p), 0);
  auto moments = [&](const std::vector<Eigen::Index>& rows, Eigen::Index c) {
    double m = 0.0;
    for (auto r : rows) m += fields(r, c);
    m /= static_cast<double>(rows.size());
    double s = 0.0;
    for (auto r : rows) s += (fields(r, c) - m) * (fields(r, c) - m);
    return std::pair{m, s / static_cast<double>(rows.size() - 1)};
  };
  const double nw = static_cast<double>(warm.size()), nc = static_cast<double>(cold.size());
  for (Eigen::Index c = 0; c < p; ++c) {
    const auto [mw, vw] = moments(warm, c);
    const auto [mc, vc] = moments(cold, c);
    out.wc_minus(c) = mw - mc;
    out.wc_plus(c) = mw + mc;
    if (!std::isfinite(mw) || !std::isfinite(mc)) continue;
    const auto ci = static_cast<std::size_t>(c);
    out.mask_minus[ci] = welch_p_value(mw, vw, nw, mc, vc, nc) < alpha;
    // W+C != 0  <=>  mean(warm) != -mean(cold)
    out.mask_plus[ci] = welch_p_value(mw, vw, nw, -mc, vc, nc) < alpha;
  }
  return out;
}

std::string SkillReport::to_csv() const {
  std::ostringstream os;
  os.precision(17);
  const bool by_lead = axis == "lead";
  if (!leads.empty() && leads.size() != static_cast<std::size_t>(values.rows()))
    throw DataError("leads", "one lead per row required");
  os << "metric,reference,lead," << (by_lead ? "" : axis + ",") << "value";
  if (p_values) os << ",p_value";
  os << "\n";
  const char* ref = reference == Reference::climatology ? "climatology" : "persistence";
  for (Eigen::Index r = 0; r < values.rows(); ++r) {
    for (Eigen::Index c = 0; c < values.cols(); ++c) {
      os << metric_name(metric) << ',' << ref << ',' << lead(r) << ',';
      if (!by_lead) os << (axis == "month" ? c + 1 : c) << ',';
      os << values(r, c);
      if (p_values) os << ',' << (*p_values)(r, c);
      os << "\n";
    }
  }
  return os.str();
}

std::string SkillReport::to_json() const {
  nlohmann::json j;
  j["metric"] = metric_name(metric);
  j["reference"] = reference == Reference::climatology ? "climatology" : "persistence";
  j["axis"] = axis;
  j["n_samples"] = n_samples;
  nlohmann::json lj = nlohmann::json::array();
  for (Eigen::Index r = 0; r < values.rows(); ++r) lj.push_back(lead(r));
  j["leads"] = lj;
  auto rows = [](const Eigen::MatrixXd& m) {
    nlohmann::json out = nlohmann::json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      nlohmann::json row = nlohmann::json::array();
      for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(std::isfinite(m(r, c)) ? nlohmann::json(m(r, c)) : nlohmann::json());
      out.push_back(std::move(row));
    }
    return out;
  };
  j["values"] = rows(values);
  if (p_values) j["p_values"] = rows(*p_values);
  return j.dump(1);
}

GriddedSeries mask_grid(const GriddedSeries& like, const std::vector<std::vector<std::uint8_t>>& per_var_masks) {
  if (per_var_masks.size() != like.n_var()) throw DataError("mask", "one mask per variable required");
  GriddedSeries g = like.like(1);
  for (std::size_t v = 0; v < like.n_var(); ++v) {
    if (per_var_masks[v].size() != like.n_cells()) throw DataError("mask", "mask size differs from the grid");
    for (std::size_t c = 0; c < like.n_cells(); ++c)
      if (like.valid(c)) g.at(0, v, c) = per_var_masks[v][c] ? 1.0 : 0.0;
  }
  return g;
}

}  // namespace limcast::verify
