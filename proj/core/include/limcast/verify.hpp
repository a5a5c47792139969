#pragma once

#include "limcast/grid.hpp"
#include "limcast/lim.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace limcast::verify {

/// Empirical CRPS  (1/M) sum_i |x_i - y| - 1/(2 M^2) sum_ij |x_i - x_j|.
/// `fair` replaces M^2 by M (M - 1) in the spread term (M >= 2).
double crps_empirical(std::span<const double> members, double target, bool fair = false);

/// Mean CRPS over samples: `ensemble` is n x M, `target` has n entries.
double mean_crps(const Eigen::MatrixXd& ensemble, const Eigen::VectorXd& target, bool fair = false);

/// Pearson correlation. Throws DataError for unequal lengths or n < 3 and
/// NumericalError when either series has zero variance.
double acc(std::span<const double> forecast, std::span<const double> target);
double rmse(std::span<const double> forecast, std::span<const double> target);

/// 1 - RMSE / sigma_x, with sigma_x = sqrt(mean(x^2)) the RMSE of the
/// zero-anomaly forecast. Throws NumericalError when sigma_x == 0.
double rmsess(std::span<const double> forecast, std::span<const double> target);

/// 1 - mean CRPS(model) / mean CRPS(reference). Throws NumericalError when the
/// reference CRPS is zero.
double crpss(const Eigen::MatrixXd& model, const Eigen::MatrixXd& reference, const Eigen::VectorXd& target,
             bool fair = false);

enum class ClimatologyReference { sampled, zero };

/// Reference ensemble (n x M) for verification months `months`: M seeded draws
/// with replacement from the training values of the same calendar month, or
/// all zeros.
Eigen::MatrixXd climatology_ensemble(std::span<const double> train_values, std::span<const int> train_months,
                                     std::span<const int> months, int members, std::uint64_t seed,
                                     ClimatologyReference kind = ClimatologyReference::sampled);

/// z0 repeated for leads 1..T (T x d).
Eigen::MatrixXd persistence_forecast(const Eigen::VectorXd& z0, int horizon);

struct BootstrapResult {
  double p_value = 1.0;
  double mean_a = 0.0;  // mean of the bootstrap means
  double mean_b = 0.0;
  double t_stat = 0.0;
  double dof = 0.0;
};

/// Paired bootstrap: resample r draws one index set (substream(seed, r)) and
/// records the mean of `a` and of `b` over it; a two-sided Welch t-test then
/// compares the two populations of n_boot means.
BootstrapResult bootstrap_significance(std::span<const double> a, std::span<const double> b, int n_boot = 1000,
                                       std::uint64_t seed = 0);

/// Two-sided Welch test p-value for mean(a) != mean(b).
double welch_p_value(double mean_a, double var_a, double n_a, double mean_b, double var_b, double n_b,
                     double* t_out = nullptr, double* dof_out = nullptr);

enum class Metric { acc, rmsess, crpss, crps, rmse };
enum class Reference { climatology, persistence };

std::string metric_name(Metric m);
Metric parse_metric(const std::string& name);

/// Deterministic forecasts of one scalar quantity: row i is the forecast
/// started at record i, column tau-1 the lead-tau value.
struct LeadForecasts {
  Eigen::MatrixXd forecast;   // n x T (ensemble means)
  Eigen::MatrixXd target;     // n x T
  std::vector<int> init_month;

  std::size_t size() const noexcept { return static_cast<std::size_t>(forecast.rows()); }
  int horizon() const noexcept { return static_cast<int>(forecast.cols()); }
};

/// ACC, RMSESS or RMSE per lead.
Eigen::VectorXd skill_by_lead(const LeadForecasts& f, Metric metric);

/// T x 12 table of `metric` stratified by the calendar month of the verified
/// state; cells with fewer than 3 samples are NaN.
Eigen::MatrixXd seasonal_skill_table(const LeadForecasts& f, Metric metric);

/// Metric per column of [n x P] forecast and target matrices (cellwise maps).
Eigen::VectorXd skill_map(const Eigen::MatrixXd& forecast, const Eigen::MatrixXd& target, Metric metric);

/// Index sets of the |projection| percentile bands [lo, hi) (percent). Ranks
/// are by ascending |projection| with index order breaking ties; band
/// [lo, hi) holds ranks floor(lo n / 100) .. floor(hi n / 100) - 1.
std::vector<std::vector<std::size_t>> stratify_by_optimal_growth(
    std::span<const double> projections, const std::vector<std::pair<double, double>>& bands);

/// Projections of every row of `states` (n x d) onto the OIC, then banded.
std::vector<std::vector<std::size_t>> stratify_by_optimal_growth(
    const Eigen::MatrixXd& states, const lim::OptimalStructure& structure,
    const std::vector<std::pair<double, double>>& bands);

struct CompositePair {
  Eigen::VectorXd wc_minus;              // mean(warm) - mean(cold)
  Eigen::VectorXd wc_plus;               // mean(warm) + mean(cold)
  std::vector<std::uint8_t> mask_minus;  // two-sided 95% Welch test of W-C != 0
  std::vector<std::uint8_t> mask_plus;   // same for W+C != 0
  int n_warm = 0;
  int n_cold = 0;
  double alpha = 0.05;
};

/// Composites of `fields` (n x P) split by the sign of `signs` (positive =
/// warm, negative = cold, zero ignored). NaN columns stay NaN and unmasked.
/// Throws DataError("composite", ...) when a group has fewer than 2 samples.
CompositePair asymmetry_composites(const Eigen::MatrixXd& fields, std::span<const double> signs, double alpha = 0.05);

struct SkillReport {
  Metric metric = Metric::acc;
  Reference reference = Reference::climatology;
  std::string axis = "lead";            // "lead", "cell" or "month"
  Eigen::MatrixXd values;                // rows: lead; columns: 1, cells or 12 months
  std::size_t n_samples = 0;
  std::optional<Eigen::MatrixXd> p_values;
  /// Lead of each row; empty means 1, 2, ...
  std::vector<int> leads;

  int lead(Eigen::Index row) const { return leads.empty() ? static_cast<int>(row) + 1 : leads[static_cast<std::size_t>(row)]; }
  /// One row per (lead, column): lead,<axis>,value[,p_value]. The axis column
  /// is dropped when axis is "lead".
  std::string to_csv() const;
  std::string to_json() const;
};

/// Boolean mask as a one-record LIMG grid (1.0 = significant, 0.0 otherwise,
/// NaN on masked cells) on the grid of `like`.
GriddedSeries mask_grid(const GriddedSeries& like, const std::vector<std::vector<std::uint8_t>>& per_var_masks);

}  // namespace limcast::verify
