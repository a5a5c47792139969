#pragma once

#include "limcast/eof.hpp"
#include "limcast/lim.hpp"
#include "limcast/net.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace limcast::hybrid {

enum class LossSpace { grid, pc };

struct TrainConfig {
  int epochs = 60;
  int batch = 32;
  double lr_max = 2e-3;
  double lr_min = 1e-5;
  double weight_decay = 1e-4;
  double gamma = 0.65;
  int horizon = 24;
  int members = 16;
  int t_hist = 12;
  std::uint64_t seed = 0;
  LossSpace loss_space = LossSpace::grid;
  int hidden = 64;
  int layers = 2;
  int patience = 10;
  /// Initial states drawn per epoch (all of them when the record is shorter).
  int samples_per_epoch = 1024;
  /// Cap on validation initial states (evenly spaced).
  int val_samples = 256;
  double delta = 1.0 / 16.0;
  bool fair_crps = false;

  /// Throws ConfigError naming the first invalid field.
  void validate() const;
  std::string to_json() const;
  /// Rejects unknown keys; missing keys keep their defaults.
  static TrainConfig from_json(const std::string& text);
};

/// Weights gamma^tau for tau = 1..T.
Eigen::VectorXd lead_weights(double gamma, int horizon);

/// LIM ensemble plus a learned per-member residual. Each member's LIM
/// trajectory is fed through in_proj, a stack of LSTM layers (FiLM on the
/// forecast month after every layer) and out_proj; the LSTM state starts at
/// zero for every member.
class HybridModel {
 public:
  HybridModel() = default;
  /// `scale` holds per-component PC stds used to normalise network inputs and
  /// outputs. out_proj starts at zero.
  HybridModel(lim::LimOperator lim, Eigen::VectorXd scale, int hidden = 64, int layers = 2, int members = 16,
              int horizon = 24, std::uint64_t init_seed = 0, double delta = 1.0 / 16.0);

  const lim::LimOperator& lim() const noexcept { return lim_; }
  int dim() const noexcept { return lim_.dim(); }
  int hidden() const noexcept { return hidden_; }
  int layers() const noexcept { return static_cast<int>(lstm_.size()); }
  int members() const noexcept { return members_; }
  int horizon() const noexcept { return horizon_; }
  double delta() const noexcept { return delta_; }
  const Eigen::VectorXd& scale() const noexcept { return scale_; }

  std::vector<nn::NamedParam> parameters() const;

  /// Forecasts (LIM + residual) per lead for a batch of LIM member
  /// trajectories: `lim_traj[tau-1]` is rows x d, `months[tau-1]` the month
  /// verified by each row.
  std::vector<nn::Tensor> apply(const std::vector<nn::Mat>& lim_traj, const std::vector<std::vector<int>>& months) const;
  /// Residuals only, same layout.
  std::vector<nn::Tensor> residual(const std::vector<nn::Mat>& lim_traj, const std::vector<std::vector<int>>& months) const;

 private:
  lim::LimOperator lim_;
  Eigen::VectorXd scale_;
  int hidden_ = 0;
  int members_ = 16;
  int horizon_ = 24;
  double delta_ = 1.0 / 16.0;
  nn::Linear in_proj_, out_proj_;
  std::vector<nn::LstmLayer> lstm_;
  std::vector<nn::MonthEmbedding> film_;
};

/// Encoder-decoder baseline: the encoder reads `t_hist` past states, its
/// final LSTM states seed a decoder that runs T steps on zero input, and one
/// head per member maps the decoder output to the state.
class PcLstmModel {
 public:
  PcLstmModel() = default;
  PcLstmModel(int dim, Eigen::VectorXd scale, int hidden = 64, int layers = 2, int members = 16, int horizon = 24,
              int t_hist = 12, std::uint64_t init_seed = 0);

  int dim() const noexcept { return dim_; }
  int hidden() const noexcept { return hidden_; }
  int layers() const noexcept { return static_cast<int>(enc_.size()); }
  int members() const noexcept { return members_; }
  int horizon() const noexcept { return horizon_; }
  int t_hist() const noexcept { return t_hist_; }
  const Eigen::VectorXd& scale() const noexcept { return scale_; }

  std::vector<nn::NamedParam> parameters() const;
  void zero_heads();

  /// `history[k]` is B x d (oldest first), `history_months[k]` its months;
  /// `months[tau-1]` are the B forecast months. Returns per lead a (B*M) x d
  /// tensor with rows b*M + m.
  std::vector<nn::Tensor> apply(const std::vector<nn::Mat>& history, const std::vector<std::vector<int>>& history_months,
                                const std::vector<std::vector<int>>& months) const;

 private:
  int dim_ = 0;
  int hidden_ = 0;
  int members_ = 16;
  int horizon_ = 24;
  int t_hist_ = 12;
  Eigen::VectorXd scale_;
  nn::Linear down_, heads_;
  std::vector<nn::LstmLayer> enc_, dec_;
  std::vector<nn::MonthEmbedding> enc_film_, dec_film_;
};

/// Ensemble of the hybrid model. Member m draws its LIM noise from
/// substream(seed, m), as integrate_ensemble does.
lim::EnsembleForecast hybrid_forecast(const HybridModel& model, const Eigen::VectorXd& z0, int init_month,
                                      std::uint64_t seed);

/// Batched version: forecast i starts from states.row(i) in init_months[i]
/// with seed seeds[i]; identical to calling hybrid_forecast one by one.
std::vector<lim::EnsembleForecast> hybrid_forecast_batch(const HybridModel& model, const Eigen::MatrixXd& states,
                                                         std::span<const int> init_months,
                                                         std::span<const std::uint64_t> seeds);

/// `history` is t_hist x d (oldest first) with record months; the forecast
/// starts from the last record. Throws DataError("history", ...) on a wrong
/// length. The model is deterministic, so `seed` is only recorded.
lim::EnsembleForecast pc_lstm_forecast(const PcLstmModel& model, const Eigen::MatrixXd& history,
                                       std::span<const int> history_months, std::uint64_t seed = 0);

/// Batched: forecast i uses records init[i] - t_hist + 1 .. init[i] of `series`.
std::vector<lim::EnsembleForecast> pc_lstm_forecast_batch(const PcLstmModel& model, const eof::PcSeries& series,
                                                          std::span<const std::size_t> init);

/// Training record with optional grid-space targets (time x K stacked
/// fields, var-major as in eof::stacked_fields). Without fields, grid targets
/// are reconstructed from the PCs.
struct TrainingData {
  eof::PcSeries z;
  std::optional<Eigen::MatrixXd> fields;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_reference = 0.0;  // zero-anomaly forecast under the same loss
  double lr = 0.0;
  double seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = -1;
  double best_val = 0.0;
  bool early_stopped = false;
  /// Set when the validation loss never beat the zero-anomaly reference.
  bool worse_than_climatology = false;

  std::string to_csv() const;
};

/// Minimises sum_tau gamma^tau sum_k CRPS over mini-batches of initial states
/// (loss averaged over samples and columns). The LIM is not modified. The
/// best-validation parameters are restored before returning.
TrainHistory train_hybrid(HybridModel& model, const TrainingData& train, const TrainingData& val,
                          const eof::EofBasis& basis, const TrainConfig& cfg);

TrainHistory train_pc_lstm(PcLstmModel& model, const TrainingData& train, const TrainingData& val,
                           const eof::EofBasis& basis, const TrainConfig& cfg);

/// Mean over forecasts, members and leads of ||residual|| / ||LIM member||.
double residual_ratio(const HybridModel& model, const eof::PcSeries& series, std::span<const std::size_t> init,
                      std::uint64_t seed);

/// Loss of one batch as used in training (exposed for tests): predictions
/// per lead ((B*M) x d), targets per lead (B x K), PC-to-grid map d x K (or
/// empty for PC space).
nn::Tensor crps_loss(const std::vector<nn::Tensor>& pred, const std::vector<nn::Mat>& target, const nn::Mat& grid_map,
                     const Eigen::VectorXd& weights, int members, bool fair);

/// Checkpoint: model header, NETP parameters, LIMO (hybrid only) and the
/// TrainConfig echo.
void save_hybrid(const std::filesystem::path& path, const HybridModel& model, const TrainConfig& cfg);
void save_pc_lstm(const std::filesystem::path& path, const PcLstmModel& model, const TrainConfig& cfg);
std::pair<HybridModel, TrainConfig> load_hybrid(const std::filesystem::path& path);
std::pair<PcLstmModel, TrainConfig> load_pc_lstm(const std::filesystem::path& path);
/// "hybrid" or "pc-lstm".
std::string checkpoint_kind(const std::filesystem::path& path);

/// CSV with columns init_time,member,lead,pc_index,value.
std::string forecasts_to_csv(const std::vector<lim::EnsembleForecast>& forecasts);

}  // namespace limcast::hybrid
