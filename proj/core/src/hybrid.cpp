#include "limcast/hybrid.hpp"

#include "limcast/binary_io.hpp"
#include "limcast/error.hpp"
#include "limcast/random.hpp"

#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

namespace limcast::hybrid {

namespace {

using nn::Mat;
using nn::Tensor;
using json = nlohmann::json;

constexpr int kChunk = 64;  // initial states per forward pass outside training

Mat row_of(const Eigen::VectorXd& v) { return Mat(v.transpose()); }

Mat zeros(Eigen::Index r, Eigen::Index c) { return Mat::Zero(r, c); }

void check_scale(const Eigen::VectorXd& scale, int d) {
  if (scale.size() != d) throw ConfigError("scale must have one entry per state component");
  if (!(scale.array() > 0.0).all() || !scale.allFinite()) throw ConfigError("scale entries must be positive");
}

/// LIM member trajectories for a set of initial states: column i*M + m uses
/// substream(seeds[i], m). Returns rows x d matrices per lead and the months
/// verified by each row.
struct LimBatch {
  std::vector<Mat> traj;
  std::vector<std::vector<int>> months;
};

LimBatch lim_batch(const lim::LimOperator& op, const Eigen::MatrixXd& states, std::span<const int> init_months,
                   std::span<const std::uint64_t> seeds, int members, int horizon, double delta) {
  const auto n = static_cast<std::size_t>(states.rows());
  const auto d = op.dim();
  const std::size_t cols = n * static_cast<std::size_t>(members);
  std::vector<Rng> rngs;
  rngs.reserve(cols);
  std::vector<int> months(cols);
  Eigen::MatrixXd start(d, static_cast<Eigen::Index>(cols));
  for (std::size_t i = 0; i < n; ++i)
    for (int m = 0; m < members; ++m) {
      const std::size_t c = i * static_cast<std::size_t>(members) + static_cast<std::size_t>(m);
      rngs.push_back(substream(seeds[i], static_cast<std::uint64_t>(m)));
      months[c] = init_months[i];
      start.col(static_cast<Eigen::Index>(c)) = states.row(static_cast<Eigen::Index>(i)).transpose();
    }
  const auto out = lim::integrate_columns(op, start, months, horizon, delta, rngs);
  LimBatch b;
  b.traj.reserve(static_cast<std::size_t>(horizon));
  for (int tau = 0; tau < horizon; ++tau) {
    b.traj.emplace_back(out[static_cast<std::size_t>(tau)].transpose());
    std::vector<int> vm(cols);
    for (std::size_t c = 0; c < cols; ++c) vm[c] = month_of(months[c], static_cast<std::size_t>(tau + 1));
    b.months.push_back(std::move(vm));
  }
  return b;
}

/// Verified months per lead for B initial states.
std::vector<std::vector<int>> lead_months(std::span<const int> init_months, int horizon) {
  std::vector<std::vector<int>> out(static_cast<std::size_t>(horizon));
  for (int tau = 0; tau < horizon; ++tau)
    for (int m : init_months) out[static_cast<std::size_t>(tau)].push_back(month_of(m, static_cast<std::size_t>(tau + 1)));
  return out;
}

std::vector<lim::EnsembleForecast> unpack(const std::vector<Tensor>& pred, std::span<const int> init_months, int members) {
  const std::size_t n = init_months.size();
  const auto horizon = static_cast<Eigen::Index>(pred.size());
  const auto d = pred.front().cols();
  std::vector<lim::EnsembleForecast> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].init_month = init_months[i];
    out[i].members.assign(static_cast<std::size_t>(members), Eigen::MatrixXd(horizon, d));
    for (Eigen::Index tau = 0; tau < horizon; ++tau)
      for (int m = 0; m < members; ++m)
        out[i].members[static_cast<std::size_t>(m)].row(tau) =
            pred[static_cast<std::size_t>(tau)].value().row(static_cast<Eigen::Index>(i) * members + m);
  }
  return out;
}

std::string loss_space_name(LossSpace s) { return s == LossSpace::grid ? "grid" : "pc"; }

}  // namespace

// ---------------------------------------------------------------------------
// TrainConfig

void TrainConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("train config: " + what);
  };
  need(epochs >= 1, "epochs must be >= 1");
  need(batch >= 1, "batch must be >= 1");
  need(lr_max > 0.0 && lr_min >= 0.0 && lr_min <= lr_max, "need 0 <= lr_min <= lr_max, lr_max > 0");
  need(weight_decay >= 0.0, "weight_decay must be >= 0");
  need(gamma > 0.0 && gamma <= 1.0, "gamma must be in (0, 1]");
  need(horizon >= 1, "horizon must be >= 1");
  need(members >= 1, "members must be >= 1");
  need(t_hist >= 1, "t_hist must be >= 1");
  need(hidden >= 1, "hidden must be >= 1");
  need(layers >= 1, "layers must be >= 1");
  need(patience >= 1, "patience must be >= 1");
  need(samples_per_epoch >= 1, "samples_per_epoch must be >= 1");
  need(val_samples >= 1, "val_samples must be >= 1");
  need(!fair_crps || members >= 2, "fair_crps needs members >= 2");
  (void)lim::substeps_per_month(delta);
}

std::string TrainConfig::to_json() const {
  json j;
  j["epochs"] = epochs;
  j["batch"] = batch;
  j["lr_max"] = lr_max;
  j["lr_min"] = lr_min;
  j["weight_decay"] = weight_decay;
  j["gamma"] = gamma;
  j["horizon"] = horizon;
  j["members"] = members;
  j["t_hist"] = t_hist;
  j["seed"] = seed;
  j["loss_space"] = loss_space_name(loss_space);
  j["hidden"] = hidden;
  j["layers"] = layers;
  j["patience"] = patience;
  j["samples_per_epoch"] = samples_per_epoch;
  j["val_samples"] = val_samples;
  j["delta"] = delta;
  j["fair_crps"] = fair_crps;
  return j.dump(1);
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  TrainConfig c;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "epochs") c.epochs = v.get<int>();
      else if (key == "batch") c.batch = v.get<int>();
      else if (key == "lr_max") c.lr_max = v.get<double>();
      else if (key == "lr_min") c.lr_min = v.get<double>();
      else if (key == "weight_decay") c.weight_decay = v.get<double>();
      else if (key == "gamma") c.gamma = v.get<double>();
      else if (key == "horizon") c.horizon = v.get<int>();
      else if (key == "members") c.members = v.get<int>();
      else if (key == "t_hist") c.t_hist = v.get<int>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "loss_space") {
        const auto s = v.get<std::string>();
        if (s == "grid") c.loss_space = LossSpace::grid;
        else if (s == "pc") c.loss_space = LossSpace::pc;
        else throw ConfigError("train config: loss_space must be 'grid' or 'pc'");
      } else if (key == "hidden") c.hidden = v.get<int>();
      else if (key == "layers") c.layers = v.get<int>();
      else if (key == "patience") c.patience = v.get<int>();
      else if (key == "samples_per_epoch") c.samples_per_epoch = v.get<int>();
      else if (key == "val_samples") c.val_samples = v.get<int>();
      else if (key == "delta") c.delta = v.get<double>();
      else if (key == "fair_crps") c.fair_crps = v.get<bool>();
      else throw ConfigError("train config: unknown key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

Eigen::VectorXd lead_weights(double gamma, int horizon) {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("gamma must be in (0, 1]");
  if (horizon < 1) throw ConfigError("horizon must be >= 1");
  Eigen::VectorXd w(horizon);
  for (int tau = 1; tau <= horizon; ++tau) w(tau - 1) = std::pow(gamma, tau);
  return w;
}

// ---------------------------------------------------------------------------
// Models

HybridModel::HybridModel(lim::LimOperator lim, Eigen::VectorXd scale, int hidden, int layers, int members, int horizon,
                         std::uint64_t init_seed, double delta)
    : lim_(std::move(lim)), scale_(std::move(scale)), hidden_(hidden), members_(members), horizon_(horizon), delta_(delta) {
  const int d = lim_.dim();
  if (d < 1) throw ConfigError("hybrid model needs a fitted LIM");
  check_scale(scale_, d);
  if (hidden < 1 || layers < 1 || members < 1 || horizon < 1)
    throw ConfigError("hidden, layers, members and horizon must be >= 1");
  (void)lim::substeps_per_month(delta);
  Rng rng = substream(init_seed, 11);
  in_proj_ = nn::Linear(d, hidden, rng);
  for (int l = 0; l < layers; ++l) {
    lstm_.emplace_back(hidden, hidden, rng);
    film_.emplace_back(hidden);
  }
  out_proj_ = nn::Linear::zeros(hidden, d);
}

std::vector<nn::NamedParam> HybridModel::parameters() const {
  std::vector<nn::NamedParam> p;
  in_proj_.collect("in_proj", p);
  for (std::size_t l = 0; l < lstm_.size(); ++l) {
    lstm_[l].collect("lstm" + std::to_string(l), p);
    film_[l].collect("film" + std::to_string(l), p);
  }
  out_proj_.collect("out_proj", p);
  return p;
}

std::vector<Tensor> HybridModel::residual(const std::vector<Mat>& lim_traj, const std::vector<std::vector<int>>& months) const {
  if (lim_traj.size() != months.size() || lim_traj.empty()) throw ConfigError("one month list per lead required");
  const auto rows = lim_traj.front().rows();
  const Eigen::RowVectorXd inv = scale_.cwiseInverse().transpose();
  const Tensor out_scale = Tensor::constant(row_of(scale_));
  std::vector<Tensor> h(lstm_.size(), Tensor::constant(zeros(rows, hidden_)));
  std::vector<Tensor> c = h;
  std::vector<Tensor> res;
  res.reserve(lim_traj.size());
  for (std::size_t tau = 0; tau < lim_traj.size(); ++tau) {
    if (lim_traj[tau].rows() != rows || lim_traj[tau].cols() != dim()) throw ConfigError("LIM trajectory shape mismatch");
    Mat x = lim_traj[tau];
    x.array().rowwise() *= inv.array();
    Tensor a = in_proj_(Tensor::constant(std::move(x)));
    for (std::size_t l = 0; l < lstm_.size(); ++l) {
      auto [hn, cn] = lstm_[l](a, h[l], c[l]);
      h[l] = film_[l](hn, months[tau]);
      c[l] = cn;
      a = h[l];
    }
    res.push_back(nn::mul(out_proj_(a), out_scale));
  }
  return res;
}

std::vector<Tensor> HybridModel::apply(const std::vector<Mat>& lim_traj, const std::vector<std::vector<int>>& months) const {
  auto res = residual(lim_traj, months);
  for (std::size_t tau = 0; tau < res.size(); ++tau) res[tau] = nn::add(Tensor::constant(lim_traj[tau]), res[tau]);
  return res;
}

PcLstmModel::PcLstmModel(int dim, Eigen::VectorXd scale, int hidden, int layers, int members, int horizon, int t_hist,
                         std::uint64_t init_seed)
    : dim_(dim), hidden_(hidden), members_(members), horizon_(horizon), t_hist_(t_hist), scale_(std::move(scale)) {
  if (dim < 1) throw ConfigError("pc-lstm needs dim >= 1");
  check_scale(scale_, dim);
  if (hidden < 1 || layers < 1 || members < 1 || horizon < 1 || t_hist < 1)
    throw ConfigError("hidden, layers, members, horizon and t_hist must be >= 1");
  Rng rng = substream(init_seed, 12);
  down_ = nn::Linear(dim, hidden, rng);
  for (int l = 0; l < layers; ++l) {
    enc_.emplace_back(hidden, hidden, rng);
    enc_film_.emplace_back(hidden);
  }
  for (int l = 0; l < layers; ++l) {
    dec_.emplace_back(l == 0 ? 1 : hidden, hidden, rng);
    dec_film_.emplace_back(hidden);
  }
  heads_ = nn::Linear(hidden, members * dim, rng);
}

std::vector<nn::NamedParam> PcLstmModel::parameters() const {
  std::vector<nn::NamedParam> p;
  down_.collect("down", p);
  for (std::size_t l = 0; l < enc_.size(); ++l) {
    enc_[l].collect("enc" + std::to_string(l), p);
    enc_film_[l].collect("enc_film" + std::to_string(l), p);
  }
  for (std::size_t l = 0; l < dec_.size(); ++l) {
    dec_[l].collect("dec" + std::to_string(l), p);
    dec_film_[l].collect("dec_film" + std::to_string(l), p);
  }
  heads_.collect("heads", p);
  return p;
}

void PcLstmModel::zero_heads() {
  heads_.w.value().setZero();
  heads_.b.value().setZero();
}

std::vector<Tensor> PcLstmModel::apply(const std::vector<Mat>& history, const std::vector<std::vector<int>>& history_months,
                                       const std::vector<std::vector<int>>& months) const {
  if (static_cast<int>(history.size()) != t_hist_ || history_months.size() != history.size())
    throw DataError("history", "expected " + std::to_string(t_hist_) + " history records");
  const auto rows = history.front().rows();
  const Eigen::RowVectorXd inv = scale_.cwiseInverse().transpose();
  std::vector<Tensor> h(enc_.size(), Tensor::constant(zeros(rows, hidden_)));
  std::vector<Tensor> c = h;
  for (std::size_t k = 0; k < history.size(); ++k) {
    if (history[k].rows() != rows || history[k].cols() != dim_) throw DataError("history", "record shape mismatch");
    Mat x = history[k];
    x.array().rowwise() *= inv.array();
    Tensor a = down_(Tensor::constant(std::move(x)));
    for (std::size_t l = 0; l < enc_.size(); ++l) {
      auto [hn, cn] = enc_[l](a, h[l], c[l]);
      h[l] = enc_film_[l](hn, history_months[k]);
      c[l] = cn;
      a = h[l];
    }
  }
  const Tensor zero_in = Tensor::constant(zeros(rows, 1));
  const Tensor out_scale = Tensor::constant(row_of(scale_));
  std::vector<Tensor> out;
  for (std::size_t tau = 0; tau < months.size(); ++tau) {
    Tensor a = zero_in;
    for (std::size_t l = 0; l < dec_.size(); ++l) {
      auto [hn, cn] = dec_[l](a, h[l], c[l]);
      h[l] = dec_film_[l](hn, months[tau]);
      c[l] = cn;
      a = h[l];
    }
    out.push_back(nn::mul(nn::reshape(heads_(a), rows * members_, dim_), out_scale));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forecasts

std::vector<lim::EnsembleForecast> hybrid_forecast_batch(const HybridModel& model, const Eigen::MatrixXd& states,
                                                         std::span<const int> init_months,
                                                         std::span<const std::uint64_t> seeds) {
  const auto n = static_cast<std::size_t>(states.rows());
  if (init_months.size() != n || seeds.size() != n) throw ConfigError("one month and seed per initial state required");
  if (states.cols() != model.dim()) throw DataError("z0", "state dimension does not match the model");
  for (int m : init_months)
    if (m < 1 || m > 12) throw DataError("month", "calendar month must be in 1..12, got " + std::to_string(m));
  nn::NoGrad guard;
  std::vector<lim::EnsembleForecast> out;
  out.reserve(n);
  for (std::size_t s = 0; s < n; s += kChunk) {
    const std::size_t e = std::min(n, s + kChunk);
    const auto rows = static_cast<Eigen::Index>(e - s);
    const auto batch = lim_batch(model.lim(), states.middleRows(static_cast<Eigen::Index>(s), rows),
                                 init_months.subspan(s, e - s), seeds.subspan(s, e - s), model.members(),
                                 model.horizon(), model.delta());
    const auto pred = model.apply(batch.traj, batch.months);
    auto part = unpack(pred, init_months.subspan(s, e - s), model.members());
    for (auto& f : part) out.push_back(std::move(f));
  }
  return out;
}

lim::EnsembleForecast hybrid_forecast(const HybridModel& model, const Eigen::VectorXd& z0, int init_month,
                                      std::uint64_t seed) {
  const std::vector<int> months{init_month};
  const std::vector<std::uint64_t> seeds{seed};
  return hybrid_forecast_batch(model, z0.transpose(), months, seeds).front();
}

std::vector<lim::EnsembleForecast> pc_lstm_forecast_batch(const PcLstmModel& model, const eof::PcSeries& series,
                                                          std::span<const std::size_t> init) {
  if (series.dim() != model.dim()) throw DataError("history", "state dimension does not match the model");
  const auto th = static_cast<std::size_t>(model.t_hist());
  for (auto t : init)
    if (t + 1 < th || t >= series.size())
      throw DataError("history", "initial time " + std::to_string(t) + " lacks " + std::to_string(th) + " history records");
  nn::NoGrad guard;
  std::vector<lim::EnsembleForecast> out;
  for (std::size_t s = 0; s < init.size(); s += kChunk) {
    const std::size_t e = std::min(init.size(), s + kChunk);
    const auto rows = static_cast<Eigen::Index>(e - s);
    std::vector<Mat> hist(th, Mat(rows, model.dim()));
    std::vector<std::vector<int>> hist_months(th, std::vector<int>(e - s));
    std::vector<int> init_months;
    for (std::size_t i = s; i < e; ++i) {
      const std::size_t t0 = init[i] + 1 - th;
      for (std::size_t k = 0; k < th; ++k) {
        hist[k].row(static_cast<Eigen::Index>(i - s)) = series.z.row(static_cast<Eigen::Index>(t0 + k));
        hist_months[k][i - s] = series.month[t0 + k];
      }
      init_months.push_back(series.month[init[i]]);
    }
    const auto pred = model.apply(hist, hist_months, lead_months(init_months, model.horizon()));
    auto part = unpack(pred, init_months, model.members());
    for (std::size_t i = 0; i < part.size(); ++i) {
      part[i].init_time = init[s + i];
      part[i].basis_id = series.basis_id;
      out.push_back(std::move(part[i]));
    }
  }
  return out;
}

lim::EnsembleForecast pc_lstm_forecast(const PcLstmModel& model, const Eigen::MatrixXd& history,
                                       std::span<const int> history_months, std::uint64_t) {
  if (history.rows() != model.t_hist() || static_cast<Eigen::Index>(history_months.size()) != history.rows())
    throw DataError("history", "expected " + std::to_string(model.t_hist()) + " history records with months");
  if (history.cols() != model.dim()) throw DataError("history", "state dimension does not match the model");
  for (std::size_t k = 1; k < history_months.size(); ++k)
    if (history_months[k] != history_months[k - 1] % 12 + 1) throw DataError("history", "months must be consecutive");
  eof::PcSeries s;
  s.z = history;
  s.month.assign(history_months.begin(), history_months.end());
  const std::vector<std::size_t> init{history_months.size() - 1};
  return pc_lstm_forecast_batch(model, s, init).front();
}

// ---------------------------------------------------------------------------
// Training

Tensor crps_loss(const std::vector<Tensor>& pred, const std::vector<Mat>& target, const Mat& grid_map,
                 const Eigen::VectorXd& weights, int members, bool fair) {
  if (pred.size() != target.size() || static_cast<Eigen::Index>(pred.size()) > weights.size())
    throw ConfigError("crps_loss: one target and weight per lead required");
  Tensor total;
  const Tensor map = Tensor::constant(grid_map);
  for (std::size_t tau = 0; tau < pred.size(); ++tau) {
    const Tensor p = grid_map.size() == 0 ? pred[tau] : nn::matmul(pred[tau], map);
    const Tensor term =
        nn::scale(nn::ensemble_crps(p, Tensor::constant(target[tau]), members, fair), weights(static_cast<Eigen::Index>(tau)));
    total = total ? nn::add(total, term) : term;
  }
  const double n = static_cast<double>(target.front().rows() * target.front().cols());
  return nn::scale(total, 1.0 / n);
}

namespace {

struct LossSetup {
  Mat grid_map;          // d x K, empty in PC space
  Eigen::MatrixXd y_train, y_val;
};

LossSetup make_loss_setup(const TrainingData& train, const TrainingData& val, const eof::EofBasis& basis,
                          const TrainConfig& cfg, int d) {
  LossSetup s;
  if (train.z.dim() != d || val.z.dim() != d) throw DataError("dim", "training data dimension does not match the model");
  if (cfg.loss_space == LossSpace::pc) {
    s.y_train = train.z.z;
    s.y_val = val.z.z;
    return s;
  }
  if (basis.dim() != d) throw DataError("basis", "EOF basis dimension does not match the model");
  const Eigen::MatrixXd e = basis.kept_map();
  s.grid_map = e;
  auto targets = [&](const TrainingData& td, const char* what) -> Eigen::MatrixXd {
    if (!td.fields) return td.z.z * e;
    if (td.fields->rows() != static_cast<Eigen::Index>(td.z.size()) || td.fields->cols() != e.cols())
      throw DataError(what, "grid targets must be time x (n_var * n_valid)");
    return *td.fields;
  };
  s.y_train = targets(train, "train.fields");
  s.y_val = targets(val, "val.fields");
  return s;
}

std::vector<Mat> gather_targets(const Eigen::MatrixXd& y, std::span<const std::size_t> init, int horizon) {
  std::vector<Mat> out(static_cast<std::size_t>(horizon), Mat(static_cast<Eigen::Index>(init.size()), y.cols()));
  for (std::size_t i = 0; i < init.size(); ++i)
    for (int tau = 1; tau <= horizon; ++tau)
      out[static_cast<std::size_t>(tau - 1)].row(static_cast<Eigen::Index>(i)) = y.row(static_cast<Eigen::Index>(init[i]) + tau);
  return out;
}

std::vector<std::size_t> init_times(std::size_t n, std::size_t first, int horizon) {
  std::vector<std::size_t> out;
  for (std::size_t t = first; t + static_cast<std::size_t>(horizon) < n; ++t) out.push_back(t);
  return out;
}

std::vector<std::size_t> evenly_spaced(const std::vector<std::size_t>& all, int cap) {
  if (static_cast<int>(all.size()) <= cap) return all;
  std::vector<std::size_t> out;
  for (int i = 0; i < cap; ++i) out.push_back(all[static_cast<std::size_t>(i) * all.size() / static_cast<std::size_t>(cap)]);
  return out;
}

using Forward = std::function<std::vector<Tensor>(std::span<const std::size_t> init, bool train_split, std::uint64_t seed)>;

TrainHistory run_training(const std::vector<nn::NamedParam>& params, const Forward& forward, const LossSetup& setup,
                          const std::vector<std::size_t>& train_init, const std::vector<std::size_t>& val_init,
                          const TrainConfig& cfg) {
  if (train_init.empty()) throw DataError("train", "training series is too short for the forecast horizon");
  if (val_init.empty()) throw DataError("val", "validation series is too short for the forecast horizon");
  const Eigen::VectorXd w = lead_weights(cfg.gamma, cfg.horizon);
  const std::uint64_t val_seed = mix_seed(cfg.seed ^ 0x76616cULL);

  auto evaluate = [&]() {
    nn::NoGrad guard;
    double total = 0.0;
    for (std::size_t s = 0; s < val_init.size(); s += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t e = std::min(val_init.size(), s + static_cast<std::size_t>(cfg.batch));
      const std::span<const std::size_t> chunk(val_init.data() + s, e - s);
      const auto pred = forward(chunk, false, substream(val_seed, s)());
      const auto loss = crps_loss(pred, gather_targets(setup.y_val, chunk, cfg.horizon), setup.grid_map, w, cfg.members,
                                  cfg.fair_crps);
      total += loss.item() * static_cast<double>(e - s);
    }
    return total / static_cast<double>(val_init.size());
  };
  double reference = 0.0;
  {
    const auto y = gather_targets(setup.y_val, val_init, cfg.horizon);
    for (int tau = 0; tau < cfg.horizon; ++tau) reference += w(tau) * y[static_cast<std::size_t>(tau)].cwiseAbs().mean();
  }

  nn::AdamW opt({0.9, 0.999, 1e-8, cfg.weight_decay});
  const std::size_t per_epoch = std::min(train_init.size(), static_cast<std::size_t>(cfg.samples_per_epoch));
  const std::size_t steps_per_epoch = (per_epoch + static_cast<std::size_t>(cfg.batch) - 1) / static_cast<std::size_t>(cfg.batch);
  const auto total_steps = static_cast<std::int64_t>(steps_per_epoch) * cfg.epochs;
  TrainHistory hist;
  nn::NetCheckpoint best = nn::snapshot(params);
  int since_best = 0;
  std::int64_t step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> order = train_init;
    Rng shuffle_rng = substream(cfg.seed, 1000000ULL + static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    order.resize(per_epoch);
    double epoch_loss = 0.0;
    double lr = cfg.lr_max;
    for (std::size_t s = 0; s < per_epoch; s += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t e = std::min(per_epoch, s + static_cast<std::size_t>(cfg.batch));
      const std::span<const std::size_t> chunk(order.data() + s, e - s);
      lr = nn::cosine_lr(step, total_steps, cfg.lr_max, cfg.lr_min);
      const auto pred = forward(chunk, true, substream(cfg.seed, 2000000ULL + static_cast<std::uint64_t>(step))());
      const auto loss = crps_loss(pred, gather_targets(setup.y_train, chunk, cfg.horizon), setup.grid_map, w,
                                  cfg.members, cfg.fair_crps);
      if (!std::isfinite(loss.item()))
        throw DivergenceError("training loss is not finite at epoch " + std::to_string(epoch) + ", step " +
                              std::to_string(step));
      nn::backward(loss);
      opt.step(params, lr);
      nn::zero_grad(params);
      epoch_loss += loss.item() * static_cast<double>(e - s);
      ++step;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = epoch_loss / static_cast<double>(per_epoch);
    rec.val_loss = evaluate();
    rec.val_reference = reference;
    rec.lr = lr;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    hist.epochs.push_back(rec);
    if (hist.best_epoch < 0 || rec.val_loss < hist.best_val) {
      hist.best_epoch = epoch;
      hist.best_val = rec.val_loss;
      best = nn::snapshot(params);
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      hist.early_stopped = true;
      break;
    }
  }
  nn::restore(best, params);
  hist.worse_than_climatology =
      std::all_of(hist.epochs.begin(), hist.epochs.end(), [](const EpochRecord& r) { return r.val_loss >= r.val_reference; });
  return hist;
}

}  // namespace

std::string TrainHistory::to_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,train_loss,val_loss,val_reference,lr,seconds,best\n";
  for (const auto& r : epochs)
    os << r.epoch << ',' << r.train_loss << ',' << r.val_loss << ',' << r.val_reference << ',' << r.lr << ','
       << r.seconds << ',' << (r.epoch == best_epoch ? 1 : 0) << '\n';
  return os.str();
}

TrainHistory train_hybrid(HybridModel& model, const TrainingData& train, const TrainingData& val,
                          const eof::EofBasis& basis, const TrainConfig& cfg) {
  cfg.validate();
  if (cfg.members != model.members() || cfg.horizon != model.horizon())
    throw ConfigError("train config members/horizon differ from the model");
  train.z.validate();
  val.z.validate();
  const auto setup = make_loss_setup(train, val, basis, cfg, model.dim());
  const auto train_init = init_times(train.z.size(), 0, cfg.horizon);
  const auto val_init = evenly_spaced(init_times(val.z.size(), 0, cfg.horizon), cfg.val_samples);
  Forward forward = [&](std::span<const std::size_t> init, bool train_split, std::uint64_t seed) {
    const eof::PcSeries& src = train_split ? train.z : val.z;
    Eigen::MatrixXd states(static_cast<Eigen::Index>(init.size()), model.dim());
    std::vector<int> months;
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = 0; i < init.size(); ++i) {
      states.row(static_cast<Eigen::Index>(i)) = src.z.row(static_cast<Eigen::Index>(init[i]));
      months.push_back(src.month[init[i]]);
      seeds.push_back(mix_seed(seed + i));
    }
    const auto batch = lim_batch(model.lim(), states, months, seeds, model.members(), model.horizon(), model.delta());
    return model.apply(batch.traj, batch.months);
  };
  return run_training(model.parameters(), forward, setup, train_init, val_init, cfg);
}

TrainHistory train_pc_lstm(PcLstmModel& model, const TrainingData& train, const TrainingData& val,
                           const eof::EofBasis& basis, const TrainConfig& cfg) {
  cfg.validate();
  if (cfg.members != model.members() || cfg.horizon != model.horizon() || cfg.t_hist != model.t_hist())
    throw ConfigError("train config members/horizon/t_hist differ from the model");
  train.z.validate();
  val.z.validate();
  const auto setup = make_loss_setup(train, val, basis, cfg, model.dim());
  const auto first = static_cast<std::size_t>(model.t_hist() - 1);
  const auto train_init = init_times(train.z.size(), first, cfg.horizon);
  const auto val_init = evenly_spaced(init_times(val.z.size(), first, cfg.horizon), cfg.val_samples);
  const auto th = static_cast<std::size_t>(model.t_hist());
  Forward forward = [&](std::span<const std::size_t> init, bool train_split, std::uint64_t) {
    const eof::PcSeries& src = train_split ? train.z : val.z;
    const auto rows = static_cast<Eigen::Index>(init.size());
    std::vector<Mat> hist(th, Mat(rows, model.dim()));
    std::vector<std::vector<int>> hist_months(th, std::vector<int>(init.size()));
    std::vector<int> init_months;
    for (std::size_t i = 0; i < init.size(); ++i) {
      const std::size_t t0 = init[i] + 1 - th;
      for (std::size_t k = 0; k < th; ++k) {
        hist[k].row(static_cast<Eigen::Index>(i)) = src.z.row(static_cast<Eigen::Index>(t0 + k));
        hist_months[k][i] = src.month[t0 + k];
      }
      init_months.push_back(src.month[init[i]]);
    }
    return model.apply(hist, hist_months, lead_months(init_months, model.horizon()));
  };
  return run_training(model.parameters(), forward, setup, train_init, val_init, cfg);
}

double residual_ratio(const HybridModel& model, const eof::PcSeries& series, std::span<const std::size_t> init,
                      std::uint64_t seed) {
  if (init.empty()) throw ConfigError("residual_ratio needs at least one initial time");
  nn::NoGrad guard;
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t s = 0; s < init.size(); s += kChunk) {
    const std::size_t e = std::min(init.size(), s + kChunk);
    Eigen::MatrixXd states(static_cast<Eigen::Index>(e - s), model.dim());
    std::vector<int> months;
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = s; i < e; ++i) {
      states.row(static_cast<Eigen::Index>(i - s)) = series.z.row(static_cast<Eigen::Index>(init[i]));
      months.push_back(series.month[init[i]]);
      seeds.push_back(mix_seed(seed + i));
    }
    const auto batch = lim_batch(model.lim(), states, months, seeds, model.members(), model.horizon(), model.delta());
    const auto res = model.residual(batch.traj, batch.months);
    for (std::size_t tau = 0; tau < res.size(); ++tau)
      for (Eigen::Index r = 0; r < res[tau].rows(); ++r) {
        const double lim_norm = batch.traj[tau].row(r).norm();
        if (lim_norm <= 0.0) continue;
        total += res[tau].value().row(r).norm() / lim_norm;
        ++count;
      }
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

// ---------------------------------------------------------------------------
// Checkpoints and exports

namespace {

struct Header {
  std::string kind;
  int dim = 0, hidden = 0, layers = 0, members = 0, horizon = 0, t_hist = 0;
  double delta = 1.0 / 16.0;
  Eigen::VectorXd scale;
};

io::Section header_section(const Header& h) {
  io::ByteWriter w;
  w.str(h.kind);
  for (int v : {h.dim, h.hidden, h.layers, h.members, h.horizon, h.t_hist}) w.u32(static_cast<std::uint32_t>(v));
  w.f64(h.delta);
  w.matrix(h.scale);
  return {"MODL", 1, w.take()};
}

Header read_header(const std::vector<io::Section>& sections) {
  const auto& s = io::find_section(sections, "MODL");
  io::ByteReader r(s.payload, "MODL");
  Header h;
  h.kind = r.str("kind");
  h.dim = static_cast<int>(r.u32("dim"));
  h.hidden = static_cast<int>(r.u32("hidden"));
  h.layers = static_cast<int>(r.u32("layers"));
  h.members = static_cast<int>(r.u32("members"));
  h.horizon = static_cast<int>(r.u32("horizon"));
  h.t_hist = static_cast<int>(r.u32("t_hist"));
  h.delta = r.f64("delta");
  h.scale = r.matrix("scale");
  return h;
}

io::Section config_section(const TrainConfig& cfg) {
  io::ByteWriter w;
  w.str(cfg.to_json());
  return {"TCFG", 1, w.take()};
}

TrainConfig read_config(const std::vector<io::Section>& sections) {
  io::ByteReader r(io::find_section(sections, "TCFG").payload, "TCFG");
  return TrainConfig::from_json(r.str("config"));
}

}  // namespace

void save_hybrid(const std::filesystem::path& path, const HybridModel& model, const TrainConfig& cfg) {
  Header h{"hybrid", model.dim(), model.hidden(), model.layers(), model.members(), model.horizon(), cfg.t_hist,
           model.delta(), model.scale()};
  auto net = nn::snapshot(model.parameters());
  net.seed = cfg.seed;
  io::write_sections(path, {header_section(h), net.to_section(), model.lim().to_section(), config_section(cfg)});
}

void save_pc_lstm(const std::filesystem::path& path, const PcLstmModel& model, const TrainConfig& cfg) {
  Header h{"pc-lstm", model.dim(), model.hidden(), model.layers(), model.members(), model.horizon(), model.t_hist(),
           cfg.delta, model.scale()};
  auto net = nn::snapshot(model.parameters());
  net.seed = cfg.seed;
  io::write_sections(path, {header_section(h), net.to_section(), config_section(cfg)});
}

std::string checkpoint_kind(const std::filesystem::path& path) { return read_header(io::read_sections(path)).kind; }

std::pair<HybridModel, TrainConfig> load_hybrid(const std::filesystem::path& path) {
  const auto sections = io::read_sections(path);
  const Header h = read_header(sections);
  if (h.kind != "hybrid") throw DataError("kind", "checkpoint holds a '" + h.kind + "' model, expected 'hybrid'");
  auto lim = lim::LimOperator::from_section(io::find_section(sections, "LIMO"));
  HybridModel model(std::move(lim), h.scale, h.hidden, h.layers, h.members, h.horizon, 0, h.delta);
  nn::restore(nn::NetCheckpoint::from_section(io::find_section(sections, "NETP")), model.parameters());
  return {std::move(model), read_config(sections)};
}

std::pair<PcLstmModel, TrainConfig> load_pc_lstm(const std::filesystem::path& path) {
  const auto sections = io::read_sections(path);
  const Header h = read_header(sections);
  if (h.kind != "pc-lstm") throw DataError("kind", "checkpoint holds a '" + h.kind + "' model, expected 'pc-lstm'");
  PcLstmModel model(h.dim, h.scale, h.hidden, h.layers, h.members, h.horizon, h.t_hist, 0);
  nn::restore(nn::NetCheckpoint::from_section(io::find_section(sections, "NETP")), model.parameters());
  return {std::move(model), read_config(sections)};
}

std::string forecasts_to_csv(const std::vector<lim::EnsembleForecast>& forecasts) {
  std::ostringstream os;
  os.precision(17);
  os << "init_time,member,lead,pc_index,value\n";
  for (const auto& f : forecasts)
    for (int m = 0; m < f.n_members(); ++m)
      for (int tau = 0; tau < f.horizon(); ++tau)
        for (int k = 0; k < f.dim(); ++k)
          os << f.init_time << ',' << m << ',' << tau + 1 << ',' << k << ','
             << f.members[static_cast<std::size_t>(m)](tau, k) << '\n';
  return os.str();
}

}  // namespace limcast::hybrid
