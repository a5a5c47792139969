#pragma once

#include "limcast/dataprep.hpp"
#include "limcast/eof.hpp"
#include "limcast/grid.hpp"
#include "limcast/hybrid.hpp"
#include "limcast/lim.hpp"
#include "limcast/synth.hpp"
#include "limcast/verify.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace limcast::experiment {

/// Synthetic record: truth, observed (noisy) grid, and the system.
struct SynthRecord {
  synth::SynthSystem system;
  eof::PcSeries truth;
  GriddedSeries observed;
};

struct RecordConfig {
  int d = 10;
  bool seasonal = true;
  /// Nonlinearity as a fraction of the system's stability bound.
  double c_frac = 0.0;
  std::uint64_t system_seed = 101;
  std::uint64_t data_seed = 1;
  int years = 2300;
};

SynthRecord make_record(const RecordConfig& cfg);

/// Anomalies, EOF basis and PCs for a train/val/test partition of a record:
/// whole-record linear detrend, then climatology, z-score scale and EOFs
/// fitted on the training range only.
struct Prepared {
  dataprep::Climatology climatology;
  eof::EofBasis basis;
  TimeRange train, val, test;
  eof::PcSeries z_train, z_val, z_test;
  /// Stacked anomaly fields (time x n_var * n_valid) per range.
  Eigen::MatrixXd fields_train, fields_val, fields_test;
  /// Niño-region weights over the stacked columns (zero outside the ssta block).
  Eigen::VectorXd nino_fields;
  /// Same functional on PCs: nino = z . nino_pc.
  Eigen::VectorXd nino_pc;
  Eigen::VectorXd pc_scale;
};

/// `n_keep` holds one truncation per variable.
Prepared prepare(const GriddedSeries& observed, TimeRange train, TimeRange val, TimeRange test,
                 const std::vector<int>& n_keep, int n_total = 20);

/// CS-LIM on the training PCs; months with an unstable estimate are clipped
/// to radius 0.99 and listed in `clip`.
lim::LimOperator fit_lim(const eof::PcSeries& z_train, lim::ClipReport* clip = nullptr);

/// Initial times i in [0, n) with i + horizon < n, every `stride` records,
/// starting at `first`.
std::vector<std::size_t> init_times(std::size_t n, int horizon, std::size_t first = 0, std::size_t stride = 1);

/// Forecast i uses noise seed mix_seed(seed + init[i]).
std::vector<lim::EnsembleForecast> lim_forecasts(const lim::LimOperator& op, const eof::PcSeries& z,
                                                 std::span<const std::size_t> init, int members, int horizon,
                                                 std::uint64_t seed, double delta = 1.0 / 16.0);
std::vector<lim::EnsembleForecast> hybrid_forecasts(const hybrid::HybridModel& model, const eof::PcSeries& z,
                                                    std::span<const std::size_t> init, std::uint64_t seed);

/// Scores per initial time (rows) and requested lead (columns).
struct Scores {
  std::vector<int> leads;
  Eigen::MatrixXd grid_crps;    // mean CRPS over all stacked grid columns
  Eigen::MatrixXd nino_mean;    // ensemble-mean Niño index
  Eigen::MatrixXd nino_target;  // observed Niño index
  Eigen::MatrixXd nino_crps;
};

Scores score(const std::vector<lim::EnsembleForecast>& forecasts, std::span<const std::size_t> init,
             const Eigen::MatrixXd& fields, const Prepared& prep, const std::vector<int>& leads);

/// Ensemble-mean grid field (n x K) at `lead`.
Eigen::MatrixXd mean_fields(const std::vector<lim::EnsembleForecast>& forecasts, const eof::EofBasis& basis, int lead);

/// Initial states and their optimal-growth projections for `lead` months,
/// each against the OIC of its own start month. With `month`, only states
/// starting in that month are kept. States need t + lead < n and t >= first.
struct GrowthStates {
  std::vector<std::size_t> init;
  std::vector<double> projection;
  std::map<int, lim::OptimalStructure> structures;  // by start month
};
GrowthStates growth_states(const lim::LimOperator& op, const eof::PcSeries& z, int lead, std::optional<int> month = {},
                           std::size_t first = 0);

/// Warm/cold composites at `lead` of states whose |projection| lies in the
/// top band (percentile `lower_pct` and above), split by projection sign.
/// Model forecasts start from each state and, when `sign_paired`, also from
/// its negative (with the sign flipped), so linear means cancel exactly.
struct AsymmetryResult {
  std::size_t n_states = 0;
  verify::CompositePair target;
  verify::CompositePair lim;
  std::optional<verify::CompositePair> hybrid;
};
AsymmetryResult asymmetry_experiment(const lim::LimOperator& op, const hybrid::HybridModel* model,
                                     const eof::PcSeries& z, const Eigen::MatrixXd& fields, const eof::EofBasis& basis,
                                     int lead, double lower_pct, std::optional<int> month, int members,
                                     std::uint64_t seed, double alpha = 0.05, bool sign_paired = true);

/// Training that reuses a checkpoint at `cache` when present and writes it
/// otherwise. An empty path disables caching.
hybrid::TrainHistory train_hybrid_cached(hybrid::HybridModel& model, const Prepared& prep,
                                         const hybrid::TrainConfig& cfg, const std::filesystem::path& cache);
hybrid::TrainHistory train_pc_lstm_cached(hybrid::PcLstmModel& model, const Prepared& prep,
                                          const hybrid::TrainConfig& cfg, const std::filesystem::path& cache);

struct SweepConfig {
  std::vector<int> lengths{50, 100, 300, 500, 1000, 1500};
  int n_seeds = 5;
  RecordConfig record;  // `years` is ignored; the pool holds max(lengths) + val + test years
  int val_years = 100;
  int test_years = 200;
  hybrid::TrainConfig train;
  int lead = 12;
  std::uint64_t subset_seed = 0;
  std::filesystem::path cache_dir;
};

struct SweepRow {
  int years = 0;
  int seed = 0;
  std::size_t start_year = 0;  // offset of the training window in the pool
  double acc_lim = 0.0;
  double acc_hybrid = 0.0;
  double acc_pc_lstm = 0.0;
  int clipped_months = 0;
};

/// Skill against training length. Each (length, seed) trains on a random
/// contiguous window of the training pool; val and test ranges are shared.
std::vector<SweepRow> run_datasweep(const SweepConfig& cfg,
                                    const std::function<void(const std::string&)>& log = {});
std::string sweep_to_csv(const std::vector<SweepRow>& rows, int lead);

}  // namespace limcast::experiment
