#include "limcast/lim.hpp"

#include "limcast/error.hpp"
#include "limcast/linalg.hpp"

#include <Eigen/Eigenvalues>

#include <array>
#include <cmath>

namespace limcast::lim {

namespace {

void check_square(const Eigen::MatrixXd& m, int d, const char* what) {
  if (m.rows() != d || m.cols() != d) throw DataError(what, "operator matrices must be d x d");
}

/// C(0)^{-1} with a conditioning guard.
Eigen::MatrixXd checked_inverse(const Eigen::MatrixXd& c0, const std::string& where) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (c0 + c0.transpose()));
  const double lo = es.eigenvalues().minCoeff();
  const double hi = es.eigenvalues().maxCoeff();
  if (!(hi > 0.0) || lo <= 1e-12 * hi)
    throw ConditioningError(where + ": zero-lag covariance is singular or ill-conditioned");
  return c0.inverse();
}

void check_stable(const Eigen::MatrixXd& g, const std::string& where) {
  const double rho = linalg::spectral_radius(g);
  if (!(rho < 1.0))
    throw InstabilityError(where + ": propagator has spectral radius " + std::to_string(rho) + " >= 1");
}

Eigen::MatrixXd log_with_context(const Eigen::MatrixXd& g, const std::string& where) {
  try {
    return linalg::logm(g);
  } catch (const BranchAmbiguityError& e) {
    throw BranchAmbiguityError(where + ": " + e.what());
  } catch (const ConditioningError& e) {
    throw ConditioningError(where + ": " + e.what());
  }
}

}  // namespace

LimOperator LimOperator::stationary(Eigen::MatrixXd l, Eigen::MatrixXd q, int tau0, std::vector<RepairRecord> repairs) {
  LimOperator op;
  op.kind_ = LimKind::stationary;
  op.d_ = static_cast<int>(l.rows());
  op.tau0_ = tau0;
  check_square(l, op.d_, "L");
  check_square(q, op.d_, "Q");
  op.l_ = {std::move(l)};
  op.q_ = {std::move(q)};
  op.repairs_ = std::move(repairs);
  op.derive();
  return op;
}

LimOperator LimOperator::cyclostationary(std::vector<Eigen::MatrixXd> l, std::vector<Eigen::MatrixXd> q,
                                         std::vector<RepairRecord> repairs) {
  if (l.size() != 12 || q.size() != 12) throw DataError("L/Q", "cyclostationary operators need 12 monthly matrices");
  LimOperator op;
  op.kind_ = LimKind::cyclostationary;
  op.d_ = static_cast<int>(l[0].rows());
  op.tau0_ = 1;
  for (std::size_t j = 0; j < 12; ++j) {
    check_square(l[j], op.d_, "L");
    check_square(q[j], op.d_, "Q");
  }
  op.l_ = std::move(l);
  op.q_ = std::move(q);
  op.repairs_ = std::move(repairs);
  op.derive();
  return op;
}

void LimOperator::derive() {
  chol_.clear();
  g_.clear();
  for (std::size_t j = 0; j < l_.size(); ++j) {
    chol_.push_back(linalg::psd_lower_factor(q_[j]));
    g_.push_back(linalg::expm(l_[j]));
  }
}

std::size_t LimOperator::regime(int month) const {
  if (month < 1 || month > 12) throw DataError("month", "calendar month must be in 1..12, got " + std::to_string(month));
  return kind_ == LimKind::stationary ? 0 : static_cast<std::size_t>(month - 1);
}

io::Section LimOperator::to_section() const {
  io::ByteWriter w;
  w.u32(static_cast<std::uint32_t>(kind_));
  w.u32(static_cast<std::uint32_t>(d_));
  w.u32(static_cast<std::uint32_t>(tau0_));
  w.u32(static_cast<std::uint32_t>(l_.size()));
  for (std::size_t j = 0; j < l_.size(); ++j) {
    w.matrix(l_[j]);
    w.matrix(q_[j]);
  }
  w.u32(static_cast<std::uint32_t>(repairs_.size()));
  for (const auto& r : repairs_) {
    w.u32(static_cast<std::uint32_t>(r.month));
    w.u32(static_cast<std::uint32_t>(r.n_negative));
    w.f64(r.negative_sum);
    w.f64(r.trace_scale);
  }
  return {"LIMO", 1, w.take()};
}

LimOperator LimOperator::from_section(const io::Section& section) {
  if (section.tag != "LIMO") throw DataError("tag", "expected LIMO section");
  io::ByteReader r(section.payload, "LIMO");
  const auto kind = static_cast<LimKind>(r.u32("kind"));
  const auto d = static_cast<int>(r.u32("d"));
  const auto tau0 = static_cast<int>(r.u32("tau0"));
  const auto n = r.u32("n_ops");
  std::vector<Eigen::MatrixXd> ls, qs;
  for (std::uint32_t j = 0; j < n; ++j) {
    ls.push_back(r.matrix("L"));
    qs.push_back(r.matrix("Q"));
  }
  std::vector<RepairRecord> repairs(r.u32("n_repairs"));
  for (auto& rep : repairs) {
    rep.month = static_cast<int>(r.u32("month"));
    rep.n_negative = static_cast<int>(r.u32("n_negative"));
    rep.negative_sum = r.f64("negative_sum");
    rep.trace_scale = r.f64("trace_scale");
  }
  LimOperator op = kind == LimKind::stationary ? stationary(std::move(ls.at(0)), std::move(qs.at(0)), tau0, std::move(repairs))
                                               : cyclostationary(std::move(ls), std::move(qs), std::move(repairs));
  if (op.dim() != d) throw DataError("d", "stored dimension does not match the matrices");
  return op;
}

LimOperator estimate_stationary_lim(const eof::PcSeries& series, int tau0) {
  const Eigen::MatrixXd& z = series.z;
  const auto n = z.rows();
  const auto d = z.cols();
  if (tau0 < 1) throw ConfigError("tau0 must be >= 1");
  if (n < 10 * d || n <= tau0) throw DataError("samples", "stationary LIM needs at least 10*d = " + std::to_string(10 * d) + " samples");

  const Eigen::MatrixXd c0 = z.transpose() * z / static_cast<double>(n);
  const auto pairs = n - tau0;
  const Eigen::MatrixXd ctau = z.bottomRows(pairs).transpose() * z.topRows(pairs) / static_cast<double>(pairs);
  const Eigen::MatrixXd g = ctau * checked_inverse(c0, "stationary LIM");
  check_stable(g, "stationary LIM");
  const Eigen::MatrixXd l = log_with_context(g, "stationary LIM") / static_cast<double>(tau0);
  const Eigen::MatrixXd q_raw = -(l * c0 + c0 * l.transpose());
  auto repaired = linalg::psd_repair(q_raw);
  std::vector<RepairRecord> log{{0, repaired.n_negative, repaired.negative_sum, repaired.trace_scale}};
  return LimOperator::stationary(l, std::move(repaired.matrix), tau0, std::move(log));
}

namespace {

bool has_negative_real(const Eigen::VectorXcd& lam) {
  for (Eigen::Index i = 0; i < lam.size(); ++i)
    if (lam(i).real() < 0.0 && std::abs(lam(i).imag()) <= 1e-12 * std::abs(lam(i))) return true;
  return false;
}

// Moduli above `radius` are scaled back to it and negative real eigenvalues
// are reflected to their modulus.
Eigen::MatrixXd clip_eigenvalues(const Eigen::MatrixXd& g, double radius) {
  Eigen::EigenSolver<Eigen::MatrixXd> es(g);
  Eigen::VectorXcd lam = es.eigenvalues();
  for (Eigen::Index i = 0; i < lam.size(); ++i) {
    if (lam(i).real() < 0.0 && std::abs(lam(i).imag()) <= 1e-12 * std::abs(lam(i))) lam(i) = std::abs(lam(i));
    if (std::abs(lam(i)) > radius) lam(i) *= radius / std::abs(lam(i));
  }
  const Eigen::MatrixXcd v = es.eigenvectors();
  return (v * lam.asDiagonal() * v.inverse()).real();
}

LimOperator fit_cyclostationary(const eof::PcSeries& series, bool include_tendency, double clip_radius,
                                ClipReport* report) {
  const Eigen::MatrixXd& z = series.z;
  const auto n = static_cast<std::size_t>(z.rows());
  const auto d = z.cols();
  series.validate();

  std::array<Eigen::MatrixXd, 12> c0, c1;
  std::array<std::size_t, 12> n0{}, n1{};
  for (auto& m : c0) m = Eigen::MatrixXd::Zero(d, d);
  for (auto& m : c1) m = Eigen::MatrixXd::Zero(d, d);
  for (std::size_t t = 0; t < n; ++t) {
    const auto j = static_cast<std::size_t>(series.month[t] - 1);
    const auto row = z.row(static_cast<Eigen::Index>(t));
    c0[j].noalias() += row.transpose() * row;
    ++n0[j];
    if (t + 1 < n) {
      c1[j].noalias() += z.row(static_cast<Eigen::Index>(t + 1)).transpose() * row;
      ++n1[j];
    }
  }
  for (std::size_t j = 0; j < 12; ++j) {
    if (n1[j] < 30)
      throw DataError("samples", "month " + std::to_string(j + 1) + " has " + std::to_string(n1[j]) +
                                     " lag pairs; the cyclostationary LIM needs at least 30 per month");
    c0[j] /= static_cast<double>(n0[j]);
    c1[j] /= static_cast<double>(n1[j]);
  }

  std::vector<Eigen::MatrixXd> ls(12), qs(12);
  std::vector<RepairRecord> log;
  for (std::size_t j = 0; j < 12; ++j) {
    const std::string where = "cyclostationary LIM month " + std::to_string(j + 1);
    Eigen::MatrixXd g = c1[j] * checked_inverse(c0[j], where);
    if (clip_radius > 0.0) {
      const double rho = linalg::spectral_radius(g);
      const bool negative = g.allFinite() && has_negative_real(Eigen::EigenSolver<Eigen::MatrixXd>(g, false).eigenvalues());
      if ((!(rho < 1.0) && std::isfinite(rho)) || negative) {
        g = clip_eigenvalues(g, rho < 1.0 ? 1.0 : clip_radius);
        if (report) {
          report->months.push_back(static_cast<int>(j + 1));
          report->radius_before.push_back(rho);
          report->reflected.push_back(negative);
        }
      }
    }
    check_stable(g, where);
    ls[j] = log_with_context(g, where);
  }
  for (std::size_t j = 0; j < 12; ++j) {
    Eigen::MatrixXd q_raw = -(ls[j] * c0[j] + c0[j] * ls[j].transpose());
    if (include_tendency) q_raw += 0.5 * (c0[(j + 1) % 12] - c0[(j + 11) % 12]);
    auto repaired = linalg::psd_repair(q_raw);
    log.push_back({static_cast<int>(j + 1), repaired.n_negative, repaired.negative_sum, repaired.trace_scale});
    qs[j] = std::move(repaired.matrix);
  }
  return LimOperator::cyclostationary(std::move(ls), std::move(qs), std::move(log));
}

}  // namespace

LimOperator estimate_cyclostationary_lim(const eof::PcSeries& series, bool include_tendency) {
  return fit_cyclostationary(series, include_tendency, 0.0, nullptr);
}

LimOperator estimate_cyclostationary_lim_clipped(const eof::PcSeries& series, double clip_radius, ClipReport* report,
                                                 bool include_tendency) {
  if (!(clip_radius > 0.0 && clip_radius < 1.0)) throw ConfigError("clip_radius must be in (0, 1)");
  return fit_cyclostationary(series, include_tendency, clip_radius, report);
}

Eigen::MatrixXd propagator(const LimOperator& op, int start_month, int tau) {
  if (tau < 0) throw ConfigError("propagator lead must be >= 0");
  const auto d = op.dim();
  if (op.kind() == LimKind::stationary) {
    (void)op.l(start_month);  // month validation
    return linalg::expm(op.l(1) * static_cast<double>(tau));
  }
  Eigen::MatrixXd g = Eigen::MatrixXd::Identity(d, d);
  for (int k = 0; k < tau; ++k) g = op.month_propagator(month_of(start_month, static_cast<std::size_t>(k))) * g;
  return g;
}

Eigen::MatrixXd deterministic_forecast(const LimOperator& op, const Eigen::VectorXd& z0, int init_month, int horizon) {
  if (z0.size() != op.dim()) throw DataError("z0", "state dimension does not match the operator");
  Eigen::MatrixXd out(horizon, op.dim());
  for (int tau = 1; tau <= horizon; ++tau) out.row(tau - 1) = (propagator(op, init_month, tau) * z0).transpose();
  return out;
}

Eigen::MatrixXd EnsembleForecast::at_lead(int tau) const {
  Eigen::MatrixXd out(n_members(), dim());
  for (int m = 0; m < n_members(); ++m) out.row(m) = members[static_cast<std::size_t>(m)].row(tau - 1);
  return out;
}

Eigen::MatrixXd EnsembleForecast::mean() const {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(horizon(), dim());
  for (const auto& m : members) out += m;
  return members.empty() ? out : Eigen::MatrixXd(out / static_cast<double>(members.size()));
}

int substeps_per_month(double delta) {
  if (!(delta > 0.0 && delta <= 1.0)) throw ConfigError("integration step must lie in (0, 1] months");
  const double inv = 1.0 / delta;
  const double rounded = std::round(inv);
  if (std::abs(inv - rounded) > 1e-9 * inv) throw ConfigError("integration step must divide one month evenly (1/delta integer)");
  return static_cast<int>(rounded);
}

std::vector<Eigen::MatrixXd> integrate_columns(const LimOperator& op, const Eigen::MatrixXd& states,
                                               std::span<const int> months, int horizon, double delta,
                                               std::span<Rng> rngs) {
  const int steps = substeps_per_month(delta);
  const auto d = states.rows();
  const auto k = states.cols();
  if (d != op.dim()) throw DataError("z0", "state dimension does not match the operator");
  if (static_cast<std::size_t>(k) != months.size() || months.size() != rngs.size())
    throw DataError("columns", "months and generators must match the number of trajectories");
  const double sqrt_delta = std::sqrt(delta);
  std::vector<Eigen::MatrixXd> out(static_cast<std::size_t>(horizon), Eigen::MatrixXd(d, k));

  // Columns sharing a start month step through the same operators and are
  // advanced together; each column still draws only from its own generator.
  std::array<std::vector<Eigen::Index>, 12> groups;
  for (Eigen::Index c = 0; c < k; ++c) {
    const int m = months[static_cast<std::size_t>(c)];
    if (m < 1 || m > 12) throw DataError("month", "calendar month must be in 1..12, got " + std::to_string(m));
    groups[static_cast<std::size_t>(m - 1)].push_back(c);
  }
  for (int m0 = 1; m0 <= 12; ++m0) {
    const auto& cols = groups[static_cast<std::size_t>(m0 - 1)];
    if (cols.empty()) continue;
    const auto n = static_cast<Eigen::Index>(cols.size());
    Eigen::MatrixXd z(d, n), eta(d, n), drift(d, n);
    for (Eigen::Index j = 0; j < n; ++j) z.col(j) = states.col(cols[static_cast<std::size_t>(j)]);
    std::vector<std::normal_distribution<double>> normal(cols.size());
    for (int tau = 0; tau < horizon; ++tau) {
      const int month = month_of(m0, static_cast<std::size_t>(tau));
      const Eigen::MatrixXd& l = op.l(month);
      const Eigen::MatrixXd& f = op.noise_factor(month);
      for (int s = 0; s < steps; ++s) {
        for (Eigen::Index j = 0; j < n; ++j) {
          Rng& rng = rngs[static_cast<std::size_t>(cols[static_cast<std::size_t>(j)])];
          auto& dist = normal[static_cast<std::size_t>(j)];
          for (Eigen::Index i = 0; i < d; ++i) eta(i, j) = dist(rng);
        }
        drift.noalias() = l * z;
        z += delta * drift;
        drift.noalias() = f * eta;
        z += sqrt_delta * drift;
      }
      auto& dst = out[static_cast<std::size_t>(tau)];
      for (Eigen::Index j = 0; j < n; ++j) dst.col(cols[static_cast<std::size_t>(j)]) = z.col(j);
    }
  }
  return out;
}

EnsembleForecast integrate_ensemble(const LimOperator& op, const Eigen::VectorXd& z0, int init_month, int horizon,
                                    int members, double delta, std::uint64_t seed) {
  if (members < 1) throw ConfigError("ensemble needs at least one member");
  if (z0.size() != op.dim()) throw DataError("z0", "state dimension does not match the operator");
  std::vector<Rng> rngs;
  rngs.reserve(static_cast<std::size_t>(members));
  for (int m = 0; m < members; ++m) rngs.push_back(substream(seed, static_cast<std::uint64_t>(m)));
  const std::vector<int> months(static_cast<std::size_t>(members), init_month);
  const Eigen::MatrixXd start = z0.replicate(1, members);
  const auto states = integrate_columns(op, start, months, horizon, delta, rngs);

  EnsembleForecast f;
  f.init_month = init_month;
  f.members.assign(static_cast<std::size_t>(members), Eigen::MatrixXd(horizon, op.dim()));
  for (int tau = 0; tau < horizon; ++tau)
    for (int m = 0; m < members; ++m) f.members[static_cast<std::size_t>(m)].row(tau) = states[static_cast<std::size_t>(tau)].col(m).transpose();
  return f;
}

Eigen::MatrixXd forecast_covariance(const LimOperator& op, int init_month, int tau, double delta) {
  if (tau < 1) throw ConfigError("forecast covariance needs tau >= 1 month");
  const int steps = substeps_per_month(delta);
  const auto d = op.dim();
  Eigen::MatrixXd sigma = Eigen::MatrixXd::Zero(d, d);
  std::array<std::optional<Eigen::MatrixXd>, 12> g_step;
  for (int k = 0; k < tau; ++k) {
    const int month = month_of(init_month, static_cast<std::size_t>(k));
    auto& g = g_step[static_cast<std::size_t>(month - 1)];
    if (!g) g = linalg::expm(op.l(month) * delta);
    const Eigen::MatrixXd qd = op.q(month) * delta;
    for (int s = 0; s < steps; ++s) sigma = (*g) * sigma * g->transpose() + qd;
  }
  return 0.5 * (sigma + sigma.transpose());
}

OptimalStructure optimal_initial_condition(const LimOperator& op, int init_month, int tau) {
  const Eigen::MatrixXd g = propagator(op, init_month, tau);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(g, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::VectorXd& s = svd.singularValues();
  const auto d = g.cols();

  OptimalStructure out;
  out.lead = tau;
  if (op.kind() == LimKind::cyclostationary) out.start_month = init_month;
  out.sigma1 = s(0);
  out.oic = svd.matrixV().col(0);
  const double tol = 1e-12 * std::max(s(0), 1e-300);
  if (d > 1 && s(0) - s(1) < tol) {
    out.degenerate = true;
    Eigen::Index width = 1;
    while (width < d && s(0) - s(width) < tol) ++width;
    const Eigen::MatrixXd basis = svd.matrixV().leftCols(width);
    // Deterministic tie-break: first canonical axis with a component in the
    // leading singular subspace, projected and normalised.
    for (Eigen::Index i = 0; i < d; ++i) {
      const Eigen::VectorXd proj = basis * basis.row(i).transpose();
      if (proj.norm() > 1e-8) {
        out.oic = proj.normalized();
        break;
      }
    }
  }
  out.evolved = g * out.oic;
  Eigen::Index imax = 0;
  out.evolved.cwiseAbs().maxCoeff(&imax);
  if (out.evolved(imax) < 0.0) {
    out.oic = -out.oic;
    out.evolved = -out.evolved;
  }
  out.sigma1 = out.evolved.norm();
  return out;
}

double optimal_growth_projection(const Eigen::VectorXd& z0, const OptimalStructure& structure) {
  if (z0.size() != structure.oic.size()) throw DataError("z0", "state dimension does not match the optimal structure");
  return z0.dot(structure.oic);
}

}  // namespace limcast::lim
