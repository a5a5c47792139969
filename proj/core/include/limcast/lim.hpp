#pragma once

#include "limcast/binary_io.hpp"
#include "limcast/eof.hpp"
#include "limcast/random.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace limcast::lim {

enum class LimKind : std::uint32_t { stationary = 0, cyclostationary = 1 };

struct RepairRecord {
  int month = 0;  // 1..12 for cyclostationary operators, 0 otherwise
  int n_negative = 0;
  double negative_sum = 0.0;
  double trace_scale = 1.0;
};

/// Linear stochastic dynamics dz/dt = L z + noise(Q): one (L, Q) pair, or twelve
/// monthly pairs for the cyclostationary variant. Propagators and noise factors
/// are derived from L and Q at construction.
class LimOperator {
 public:
  LimOperator() = default;

  static LimOperator stationary(Eigen::MatrixXd l, Eigen::MatrixXd q, int tau0 = 1,
                                std::vector<RepairRecord> repairs = {});
  static LimOperator cyclostationary(std::vector<Eigen::MatrixXd> l, std::vector<Eigen::MatrixXd> q,
                                     std::vector<RepairRecord> repairs = {});

  LimKind kind() const noexcept { return kind_; }
  int dim() const noexcept { return d_; }
  int tau0() const noexcept { return tau0_; }
  std::size_t n_regimes() const noexcept { return l_.size(); }

  /// Operators in force during calendar month `month` (1..12).
  const Eigen::MatrixXd& l(int month) const { return l_[regime(month)]; }
  const Eigen::MatrixXd& q(int month) const { return q_[regime(month)]; }
  const Eigen::MatrixXd& noise_factor(int month) const { return chol_[regime(month)]; }
  /// One-month propagator exp(L_month).
  const Eigen::MatrixXd& month_propagator(int month) const { return g_[regime(month)]; }

  const std::vector<Eigen::MatrixXd>& l_all() const noexcept { return l_; }
  const std::vector<Eigen::MatrixXd>& q_all() const noexcept { return q_; }
  const std::vector<RepairRecord>& repairs() const noexcept { return repairs_; }

  io::Section to_section() const;
  static LimOperator from_section(const io::Section& section);

 private:
  std::size_t regime(int month) const;
  void derive();

  LimKind kind_ = LimKind::stationary;
  int d_ = 0;
  int tau0_ = 1;
  std::vector<Eigen::MatrixXd> l_, q_, chol_, g_;
  std::vector<RepairRecord> repairs_;
};

LimOperator estimate_stationary_lim(const eof::PcSeries& z, int tau0 = 1);

/// Monthly operators from month-stratified lag covariances. When
/// `include_tendency` is false the dC/dt term is dropped from the noise estimate.
LimOperator estimate_cyclostationary_lim(const eof::PcSeries& z, bool include_tendency = true);

/// Months whose estimated propagator was repaired.
struct ClipReport {
  std::vector<int> months;
  std::vector<double> radius_before;
  std::vector<bool> reflected;  // a negative real eigenvalue was flipped
};

/// Same estimate, but a monthly propagator with spectral radius >= 1 has every
/// eigenvalue of modulus above `clip_radius` (in (0, 1)) scaled back to that
/// modulus instead of raising InstabilityError, and negative real eigenvalues
/// (no real logarithm) are replaced by their modulus instead of raising
/// BranchAmbiguityError. Meant for short records.
LimOperator estimate_cyclostationary_lim_clipped(const eof::PcSeries& z, double clip_radius, ClipReport* report = nullptr,
                                                 bool include_tendency = true);

/// Mean propagator over `tau` months starting in `start_month`:
/// exp(L tau) (stationary) or G_{m+tau-1} ... G_m (cyclostationary).
Eigen::MatrixXd propagator(const LimOperator& op, int start_month, int tau);

/// Rows are leads 1..T.
Eigen::MatrixXd deterministic_forecast(const LimOperator& op, const Eigen::VectorXd& z0, int init_month, int horizon);

struct EnsembleForecast {
  std::vector<Eigen::MatrixXd> members;  // M entries, each T x d (row tau-1 = lead tau)
  std::size_t init_time = 0;
  int init_month = 1;
  std::uint64_t basis_id = 0;

  int n_members() const noexcept { return static_cast<int>(members.size()); }
  int horizon() const noexcept { return members.empty() ? 0 : static_cast<int>(members[0].rows()); }
  int dim() const noexcept { return members.empty() ? 0 : static_cast<int>(members[0].cols()); }
  /// Month verified at lead `tau` (1-based).
  int lead_month(int tau) const noexcept { return month_of(init_month, static_cast<std::size_t>(tau)); }
  /// M x d states at lead `tau` (1-based).
  Eigen::MatrixXd at_lead(int tau) const;
  Eigen::MatrixXd mean() const;  // T x d
};

/// Substeps per month for a step `delta` (a month fraction); throws
/// ConfigError unless 1/delta is a positive integer.
int substeps_per_month(double delta);

/// Euler-Maruyama ensemble; member m draws from substream(seed, m).
EnsembleForecast integrate_ensemble(const LimOperator& op, const Eigen::VectorXd& z0, int init_month, int horizon,
                                    int members, double delta, std::uint64_t seed);

/// Integrates independent trajectories in place. `states` is d x K; column k
/// starts in `months[k]` and uses `rngs[k]`. Returns the states at every
/// month boundary (T entries, each d x K).
std::vector<Eigen::MatrixXd> integrate_columns(const LimOperator& op, const Eigen::MatrixXd& states,
                                               std::span<const int> months, int horizon, double delta,
                                               std::span<Rng> rngs);

/// Forecast error covariance after `tau` months via
/// Sigma <- G_d Sigma G_d^T + Q_m delta, Sigma_0 = 0.
Eigen::MatrixXd forecast_covariance(const LimOperator& op, int init_month, int tau, double delta = 1.0 / 16.0);

struct OptimalStructure {
  Eigen::VectorXd oic;
  Eigen::VectorXd evolved;
  double sigma1 = 0.0;
  int lead = 0;
  std::optional<int> start_month;
  bool degenerate = false;  // leading singular pair not separated; tie-break applied
};

OptimalStructure optimal_initial_condition(const LimOperator& op, int init_month, int tau);

double optimal_growth_projection(const Eigen::VectorXd& z0, const OptimalStructure& structure);

}  // namespace limcast::lim
