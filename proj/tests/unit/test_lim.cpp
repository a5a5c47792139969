#include "doctest.h"
#include "fixtures.hpp"

#include "limcast/error.hpp"
#include "limcast/lim.hpp"
#include "limcast/linalg.hpp"
#include "limcast/synth.hpp"

#include <cmath>

using namespace limcast;
using testing::exp_series;
using testing::rel_frob;
using testing::random_spd;
using testing::stable_operator;

namespace {

Eigen::MatrixXd mat2(double a, double b, double c, double d) {
  Eigen::MatrixXd m(2, 2);
  m << a, b, c, d;
  return m;
}

Eigen::MatrixXd scalar(double x) { return Eigen::MatrixXd::Constant(1, 1, x); }

/// One-month noise factor of the exact discrete sampling of (L, Q).
Eigen::MatrixXd month_noise_factor(const lim::LimOperator& op, int month) {
  lim::LimOperator one = lim::LimOperator::stationary(op.l(month), op.q(month));
  return linalg::psd_lower_factor(lim::forecast_covariance(one, 1, 1, 1.0 / 64.0));
}

}  // namespace

TEST_SUITE("linalg") {

TEST_CASE("expm matches the Taylor series") {
  const Eigen::MatrixXd l = mat2(-0.1, -0.5, 0.5, -0.1);
  CHECK((linalg::expm(6.0 * l) - exp_series(6.0 * l)).cwiseAbs().maxCoeff() < 1e-10);
  // Defective input takes the scaling-and-squaring path.
  const Eigen::MatrixXd j = mat2(-0.2, 1.0, 0.0, -0.2);
  CHECK((linalg::expm(3.0 * j) - exp_series(3.0 * j)).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("logm inverts expm and rejects the negative axis") {
  Rng rng(1);
  const Eigen::MatrixXd l = stable_operator(rng, 5);
  CHECK((linalg::logm(linalg::expm(l)) - l).cwiseAbs().maxCoeff() < 1e-9);
  CHECK_THROWS_AS(linalg::logm(mat2(-0.5, 0.0, 0.0, 0.3)), BranchAmbiguityError);
  CHECK_THROWS_AS(linalg::logm(mat2(0.0, 0.0, 0.0, 0.3)), ConditioningError);
}

TEST_CASE("psd repair") {
  Rng rng(2);
  const Eigen::MatrixXd spd = random_spd(rng, 4);
  const auto same = linalg::psd_repair(spd);
  CHECK(same.n_negative == 0);
  CHECK((same.matrix - spd).cwiseAbs().maxCoeff() < 1e-15);

  Eigen::MatrixXd rot = testing::random_matrix(rng, 4, 4).householderQr().householderQ();
  const Eigen::MatrixXd indef = rot * Eigen::Vector4d(2.0, 1.0, 0.5, -0.4).asDiagonal() * rot.transpose();
  const auto fixed = linalg::psd_repair(indef);
  CHECK(fixed.n_negative >= 1);
  CHECK(fixed.negative_sum < 0.0);
  CHECK(fixed.matrix.trace() == doctest::Approx(indef.trace()).epsilon(1e-12));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(fixed.matrix);
  CHECK(es.eigenvalues().minCoeff() > -1e-12);
}

TEST_CASE("psd lower factor handles singular input") {
  Rng rng(3);
  const Eigen::MatrixXd a = testing::random_matrix(rng, 4, 2);
  const Eigen::MatrixXd q = a * a.transpose();
  const Eigen::MatrixXd f = linalg::psd_lower_factor(q);
  CHECK((f * f.transpose() - q).cwiseAbs().maxCoeff() < 1e-10);
  CHECK(f.triangularView<Eigen::StrictlyUpper>().toDenseMatrix().cwiseAbs().maxCoeff() == 0.0);
}

}

TEST_SUITE("lim") {

TEST_CASE("propagator closed forms") {
  const auto zero = lim::LimOperator::stationary(Eigen::MatrixXd::Zero(3, 3), Eigen::MatrixXd::Zero(3, 3));
  for (int tau : {0, 1, 7, 24}) CHECK((lim::propagator(zero, 1, tau) - Eigen::MatrixXd::Identity(3, 3)).norm() == 0.0);

  const auto sc = lim::LimOperator::stationary(scalar(-0.1), scalar(1.0));
  CHECK(lim::propagator(sc, 5, 12)(0, 0) == doctest::Approx(std::exp(-1.2)).epsilon(1e-14));
  CHECK(std::exp(-1.2) == doctest::Approx(0.30119).epsilon(1e-5));

  const Eigen::MatrixXd l = mat2(-0.1, -0.5, 0.5, -0.1);
  const auto rot = lim::LimOperator::stationary(l, Eigen::MatrixXd::Identity(2, 2));
  CHECK((lim::propagator(rot, 1, 6) - exp_series(6.0 * l)).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("stationary semigroup") {
  Rng rng(4);
  const auto op = lim::LimOperator::stationary(stable_operator(rng, 6), random_spd(rng, 6));
  for (auto [a, b] : {std::pair{1, 2}, std::pair{5, 7}, std::pair{12, 12}})
    CHECK((lim::propagator(op, 1, a + b) - lim::propagator(op, 1, b) * lim::propagator(op, 1, a)).cwiseAbs().maxCoeff() <
          1e-8);
}

TEST_CASE("cyclostationary propagator is the ordered monthly product") {
  Rng rng(5);
  std::vector<Eigen::MatrixXd> ls, qs;
  for (int j = 0; j < 12; ++j) {
    ls.push_back(stable_operator(rng, 3));
    qs.push_back(random_spd(rng, 3));
  }
  const auto op = lim::LimOperator::cyclostationary(ls, qs);
  for (int m : {1, 4, 12}) {
    Eigen::MatrixXd prod = Eigen::MatrixXd::Identity(3, 3);
    for (int k = 0; k < 12; ++k) prod = linalg::expm(ls[static_cast<std::size_t>((m - 1 + k) % 12)]) * prod;
    CHECK((lim::propagator(op, m, 12) - prod).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("AR(1) estimation") {
  const double phi = 0.8;
  const auto z = testing::simulate_discrete({scalar(phi)}, {scalar(1.0)}, 100000, 42);
  const auto op = lim::estimate_stationary_lim(eof::make_pc_series(z, 1));
  CHECK(op.l(1)(0, 0) == doctest::Approx(std::log(phi)).epsilon(0.01 / 0.2231));
  const double c0 = z.squaredNorm() / static_cast<double>(z.rows());
  CHECK(op.q(1)(0, 0) == doctest::Approx(-2.0 * op.l(1)(0, 0) * c0).epsilon(1e-10));
}

TEST_CASE("white noise input fails on the numerical path") {
  Rng rng(6);
  const Eigen::MatrixXd z = testing::random_matrix(rng, 5000, 6);
  CHECK_THROWS_AS(lim::estimate_stationary_lim(eof::make_pc_series(z, 1)), NumericalError);
}

TEST_CASE("stationary estimation recovers a known operator") {
  Rng rng(7);
  const auto truth = lim::LimOperator::stationary(stable_operator(rng, 6), random_spd(rng, 6));
  const Eigen::MatrixXd g = truth.month_propagator(1);
  const Eigen::MatrixXd s = month_noise_factor(truth, 1);
  const auto z = testing::simulate_discrete({g}, {s}, 100000, 8);
  const auto op = lim::estimate_stationary_lim(eof::make_pc_series(z, 1));
  CHECK(rel_frob(op.l(1), truth.l(1)) < 0.05);

  // Consistency: the propagator error shrinks with more samples.
  const auto small = lim::estimate_stationary_lim(eof::make_pc_series(z.topRows(5000), 1));
  CHECK(rel_frob(op.month_propagator(1), g) < rel_frob(small.month_propagator(1), g));
}

TEST_CASE("estimation preconditions") {
  Rng rng(9);
  CHECK_THROWS_AS(lim::estimate_stationary_lim(eof::make_pc_series(testing::random_matrix(rng, 50, 6), 1)), DataError);
  // 10 years, d = 30: ten samples per month.
  CHECK_THROWS_AS(lim::estimate_cyclostationary_lim(eof::make_pc_series(testing::random_matrix(rng, 120, 30), 1)),
                  DataError);
}

TEST_CASE("cyclostationary fit of stationary data gives consistent months") {
  Rng rng(10);
  const auto truth = lim::LimOperator::stationary(stable_operator(rng, 6), random_spd(rng, 6));
  const auto z = testing::simulate_discrete({truth.month_propagator(1)}, {month_noise_factor(truth, 1)}, 2000 * 12, 11);
  const auto cs = lim::estimate_cyclostationary_lim(eof::make_pc_series(z, 1));
  // Pair bootstrap of the stationary estimate at the per-month sample size.
  const Eigen::Index pairs = z.rows() - 1;
  const Eigen::Index per_month = pairs / 12;
  std::uniform_int_distribution<Eigen::Index> pick(0, pairs - 1);
  std::vector<Eigen::MatrixXd> est;
  Eigen::MatrixXd mean = Eigen::MatrixXd::Zero(6, 6);
  const int reps = 60;
  for (int b = 0; b < reps; ++b) {
    Eigen::MatrixXd c0 = Eigen::MatrixXd::Zero(6, 6), c1 = c0;
    for (Eigen::Index k = 0; k < per_month; ++k) {
      const Eigen::Index t = pick(rng);
      c0 += z.row(t).transpose() * z.row(t);
      c1 += z.row(t + 1).transpose() * z.row(t);
    }
    est.push_back(linalg::logm(c1 * c0.inverse()));
    mean += est.back() / reps;
  }
  double var = 0.0;
  for (const auto& e : est) var += (e - mean).squaredNorm() / (reps - 1);
  const double spread = std::sqrt(var);
  double worst = 0.0;
  for (int i = 1; i <= 12; ++i)
    for (int j = i + 1; j <= 12; ++j) worst = std::max(worst, (cs.l(i) - cs.l(j)).norm());
  CHECK(worst < 3.0 * spread);
}

TEST_CASE("eigenvalue clipping on short records") {
  // 150 years of the nonlinear d = 10 system give an unstable month.
  auto sys = synth::make_synth_system(10, true, 0.0, 101);
  sys = synth::with_nonlinearity(sys, 0.3 * sys.stability_bound);
  const auto z = synth::generate(sys, 150, 1);
  CHECK_THROWS_AS(lim::estimate_cyclostationary_lim(z), InstabilityError);
  lim::ClipReport report;
  const auto op = lim::estimate_cyclostationary_lim_clipped(z, 0.99, &report);
  REQUIRE_FALSE(report.months.empty());
  for (int m = 1; m <= 12; ++m) CHECK(linalg::spectral_radius(op.month_propagator(m)) < 1.0);
  for (std::size_t i = 0; i < report.months.size(); ++i) {
    if (report.reflected[i]) continue;
    CHECK(report.radius_before[i] >= 1.0);
    CHECK(linalg::spectral_radius(op.month_propagator(report.months[i])) == doctest::Approx(0.99).epsilon(1e-8));
  }
  CHECK_THROWS_AS(lim::estimate_cyclostationary_lim_clipped(z, 1.0), ConfigError);

  SUBCASE("negative real eigenvalues are reflected") {
    // z_{t+1} = diag(-0.5, 0.6) z_t + e_t: every month has eigenvalue -0.5.
    Rng rng(5);
    std::normal_distribution<double> e;
    Eigen::MatrixXd x(1200, 2);
    Eigen::Vector2d s(0.0, 0.0);
    for (Eigen::Index t = 0; t < x.rows(); ++t) {
      s = Eigen::Vector2d(-0.5 * s(0) + e(rng), 0.6 * s(1) + e(rng));
      x.row(t) = s.transpose();
    }
    const auto flip = eof::make_pc_series(x, 1);
    CHECK_THROWS_AS(lim::estimate_cyclostationary_lim(flip), BranchAmbiguityError);
    lim::ClipReport rep;
    const auto fixed = lim::estimate_cyclostationary_lim_clipped(flip, 0.99, &rep);
    CHECK(rep.months.size() == 12);
    for (int m = 1; m <= 12; ++m) {
      Eigen::EigenSolver<Eigen::MatrixXd> es(fixed.month_propagator(m));
      std::vector<double> re{es.eigenvalues()(0).real(), es.eigenvalues()(1).real()};
      std::sort(re.begin(), re.end());
      CHECK(es.eigenvalues().imag().cwiseAbs().maxCoeff() < 1e-12);
      CHECK(re[0] == doctest::Approx(0.5).epsilon(0.3));
      CHECK(re[1] == doctest::Approx(0.6).epsilon(0.3));
    }
  }

  SUBCASE("no-op on a stable fit") {
    const auto lin = synth::generate(synth::make_synth_system(4, true, 0.0, 3), 300, 2);
    lim::ClipReport none;
    const auto a = lim::estimate_cyclostationary_lim(lin);
    const auto b = lim::estimate_cyclostationary_lim_clipped(lin, 0.99, &none);
    CHECK(none.months.empty());
    for (int m = 1; m <= 12; ++m) CHECK((a.l(m).array() == b.l(m).array()).all());
  }
}

TEST_CASE("deterministic forecast") {
  Rng rng(12);
  const auto op = lim::LimOperator::stationary(stable_operator(rng, 4), random_spd(rng, 4));
  CHECK(lim::deterministic_forecast(op, Eigen::VectorXd::Zero(4), 3, 10).cwiseAbs().maxCoeff() == 0.0);
  const auto sc = lim::LimOperator::stationary(scalar(-0.3), scalar(0.5));
  const auto f = lim::deterministic_forecast(sc, Eigen::VectorXd::Constant(1, 2.0), 1, 5);
  for (int tau = 1; tau <= 5; ++tau) CHECK(f(tau - 1, 0) == doctest::Approx(2.0 * std::exp(-0.3 * tau)).epsilon(1e-13));
}

TEST_CASE("ensemble mean converges to the deterministic forecast") {
  Rng rng(13);
  const auto op = lim::LimOperator::stationary(stable_operator(rng, 4), random_spd(rng, 4));
  const Eigen::VectorXd z0 = Eigen::VectorXd::LinSpaced(4, 1.0, -1.0);
  const auto ens = lim::integrate_ensemble(op, z0, 1, 6, 4096, 1.0 / 64.0, 14);
  const auto det = lim::deterministic_forecast(op, z0, 1, 6);
  const Eigen::MatrixXd mean = ens.mean();
  for (int tau = 1; tau <= 6; ++tau) {
    const Eigen::MatrixXd members = ens.at_lead(tau);
    for (int k = 0; k < 4; ++k) {
      const Eigen::VectorXd col = members.col(k);
      const double sd = std::sqrt((col.array() - col.mean()).square().sum() / 4095.0);
      CHECK(std::abs(mean(tau - 1, k) - det(tau - 1, k)) < 3.0 * sd / 64.0 + 1e-3 * std::abs(det(tau - 1, k)));
    }
  }
}

TEST_CASE("noise-free Euler integration approaches the propagator") {
  Rng rng(15);
  const auto op = lim::LimOperator::stationary(stable_operator(rng, 5), Eigen::MatrixXd::Zero(5, 5));
  const Eigen::VectorXd z0 = Eigen::VectorXd::Ones(5);
  const auto ens = lim::integrate_ensemble(op, z0, 1, 12, 3, 1.0 / 64.0, 1);
  const auto det = lim::deterministic_forecast(op, z0, 1, 12);
  for (int m = 0; m < 3; ++m) {
    CHECK(ens.members[static_cast<std::size_t>(m)] == ens.members[0]);
    CHECK((ens.members[0] - det).norm() / det.norm() < 0.005);
  }
}

TEST_CASE("integration is seed-deterministic and validates the step") {
  Rng rng(16);
  const auto op = lim::LimOperator::stationary(stable_operator(rng, 3), random_spd(rng, 3));
  const auto a = lim::integrate_ensemble(op, Eigen::VectorXd::Ones(3), 2, 8, 5, 1.0 / 16.0, 77);
  const auto b = lim::integrate_ensemble(op, Eigen::VectorXd::Ones(3), 2, 8, 5, 1.0 / 16.0, 77);
  for (std::size_t m = 0; m < 5; ++m) CHECK(a.members[m] == b.members[m]);
  CHECK(a.lead_month(1) == 3);
  CHECK_THROWS_AS(lim::integrate_ensemble(op, Eigen::VectorXd::Ones(3), 1, 2, 1, 0.3, 1), ConfigError);
  CHECK_THROWS_AS(lim::integrate_ensemble(op, Eigen::VectorXd::Ones(3), 1, 2, 0, 0.25, 1), ConfigError);
}

TEST_CASE("ensemble covariance and Gaussian marginals") {
  Rng rng(17);
  const auto op = lim::LimOperator::stationary(stable_operator(rng, 4), random_spd(rng, 4));
  const auto ens = lim::integrate_ensemble(op, Eigen::VectorXd::Zero(4), 1, 6, 4096, 1.0 / 16.0, 18);
  const Eigen::MatrixXd x = ens.at_lead(6);
  const Eigen::MatrixXd c = x.rowwise() - x.colwise().mean();
  const Eigen::MatrixXd cov = c.transpose() * c / 4095.0;
  const Eigen::MatrixXd sigma = lim::forecast_covariance(op, 1, 6, 1.0 / 16.0);
  CHECK(rel_frob(cov, sigma) < 0.10);
  for (int k = 0; k < 4; ++k) CHECK(std::abs(testing::sample_skewness(x.col(k))) < 0.1);
}

TEST_CASE("forecast covariance closed forms") {
  Rng rng(19);
  const auto noiseless = lim::LimOperator::stationary(stable_operator(rng, 3), Eigen::MatrixXd::Zero(3, 3));
  CHECK(lim::forecast_covariance(noiseless, 1, 9).norm() == 0.0);

  const double a = 0.3, q = 0.7;
  const auto sc = lim::LimOperator::stationary(scalar(-a), scalar(q));
  for (int tau : {1, 6, 24})
    CHECK(lim::forecast_covariance(sc, 1, tau, 1.0 / 64.0)(0, 0) ==
          doctest::Approx(q * (1.0 - std::exp(-2.0 * a * tau)) / (2.0 * a)).epsilon(0.01));

  const auto op = lim::LimOperator::stationary(stable_operator(rng, 4), random_spd(rng, 4));
  const Eigen::MatrixXd s = lim::forecast_covariance(op, 1, 600, 1.0 / 64.0);
  const Eigen::MatrixXd resid = op.l(1) * s + s * op.l(1).transpose() + op.q(1);
  CHECK(resid.norm() / op.q(1).norm() < 0.01);
}

TEST_CASE("optimal initial conditions") {
  const auto id = lim::LimOperator::stationary(Eigen::MatrixXd::Zero(3, 3), Eigen::MatrixXd::Zero(3, 3));
  const auto s0 = lim::optimal_initial_condition(id, 1, 5);
  CHECK(s0.degenerate);
  CHECK(s0.sigma1 == doctest::Approx(1.0));
  CHECK((s0.oic - Eigen::Vector3d(1, 0, 0)).norm() < 1e-12);

  const auto diag = lim::LimOperator::stationary(mat2(-0.1, 0, 0, -0.3), Eigen::MatrixXd::Identity(2, 2));
  const auto s1 = lim::optimal_initial_condition(diag, 1, 12);
  CHECK(std::abs(s1.oic(0)) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(s1.sigma1 == doctest::Approx(std::exp(-1.2)).epsilon(1e-12));
  CHECK_FALSE(s1.start_month.has_value());

  const Eigen::MatrixXd l = mat2(-0.2, 0.8, 0.0, -0.2);
  const auto nn = lim::LimOperator::stationary(l, Eigen::MatrixXd::Identity(2, 2));
  const auto s2 = lim::optimal_initial_condition(nn, 1, 6);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(exp_series(6.0 * l, 40));
  CHECK(s2.sigma1 > std::exp(-1.2));
  CHECK(s2.sigma1 == doctest::Approx(svd.singularValues()(0)).epsilon(1e-10));
  CHECK(s2.oic.norm() == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(s2.evolved.norm() == doctest::Approx(s2.sigma1).epsilon(1e-12));
  CHECK((lim::propagator(nn, 1, 6) * s2.oic - s2.evolved).cwiseAbs().maxCoeff() < 1e-8);
  Eigen::Index imax = 0;
  s2.evolved.cwiseAbs().maxCoeff(&imax);
  CHECK(s2.evolved(imax) > 0.0);

  Rng rng(20);
  const auto st = lim::LimOperator::stationary(stable_operator(rng, 5), random_spd(rng, 5));
  CHECK(lim::optimal_initial_condition(st, 1, 60).sigma1 < lim::optimal_initial_condition(st, 1, 12).sigma1);
}

TEST_CASE("optimal growth projection") {
  lim::OptimalStructure s;
  s.oic = Eigen::Vector3d(0, 1, 0);
  CHECK(lim::optimal_growth_projection(s.oic, s) == 1.0);
  CHECK(lim::optimal_growth_projection(Eigen::Vector3d(1, 0, 3), s) == 0.0);
  CHECK(lim::optimal_growth_projection(-2.0 * s.oic, s) == -2.0);
  CHECK_THROWS_AS(lim::optimal_growth_projection(Eigen::Vector2d(1, 0), s), DataError);
}

TEST_CASE("operator serialisation is exact") {
  Rng rng(21);
  std::vector<Eigen::MatrixXd> ls, qs;
  for (int j = 0; j < 12; ++j) {
    ls.push_back(stable_operator(rng, 3));
    qs.push_back(random_spd(rng, 3));
  }
  const auto op = lim::LimOperator::cyclostationary(ls, qs, {{4, 1, -0.01, 1.02}});
  const auto sec = op.to_section();
  const auto back = lim::LimOperator::from_section(sec);
  CHECK(back.to_section().payload == sec.payload);
  CHECK(back.kind() == lim::LimKind::cyclostationary);
  CHECK(back.repairs().size() == 1);
  for (int m = 1; m <= 12; ++m) {
    CHECK(back.month_propagator(m) == op.month_propagator(m));
    const Eigen::MatrixXd f = back.noise_factor(m);
    CHECK((f * f.transpose() - back.q(m)).cwiseAbs().maxCoeff() < 1e-10);
  }
  CHECK_THROWS_AS(op.l(13), DataError);
}

}
