#pragma once

#include "limcast/binary_io.hpp"
#include "limcast/random.hpp"

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace limcast::nn {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Node {
  Mat value;
  Mat grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void accumulate(const Mat& g);
};

/// Handle to a node of the reverse-mode tape. Tensors are 2-D; a scalar is 1x1.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Mat value, bool requires_grad = false);
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor constant(Mat value) { return Tensor(std::move(value), false); }
  static Tensor parameter(Mat value) { return Tensor(std::move(value), true); }

  const Mat& value() const { return node_->value; }
  Mat& value() { return node_->value; }
  /// Gradient, zero-shaped like the value when nothing was accumulated.
  Mat grad() const;
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double item() const;
  void zero_grad();
  const std::shared_ptr<Node>& node() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

/// While alive, new operations record no backward information.
class NoGrad {
 public:
  NoGrad();
  ~NoGrad();
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Reverse pass from a 1x1 tensor; gradients accumulate into every
/// requires_grad ancestor. Throws ConfigError for a non-scalar root.
void backward(const Tensor& loss);

// Elementwise ops accept a 1 x n right operand, broadcast over rows.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor matmul(const Tensor& a, const Tensor& b);
/// a * b^T
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
/// Subgradient 0 at 0.
Tensor abs(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor slice_cols(const Tensor& a, Eigen::Index start, Eigen::Index n);
Tensor slice_rows(const Tensor& a, Eigen::Index start, Eigen::Index n);
Tensor concat_cols(const std::vector<Tensor>& parts);
/// out.row(i) = table.row(index[i])
Tensor gather_rows(const Tensor& table, const std::vector<int>& index);
/// Row-major reshape.
Tensor reshape(const Tensor& a, Eigen::Index rows, Eigen::Index cols);

/// One LSTM step for a batch. Returns [h' | c'] (B x 2h). Gate blocks of the
/// 4h pre-activation are ordered input, forget, cell, output.
Tensor lstm_cell(const Tensor& x, const Tensor& h, const Tensor& c, const Tensor& w, const Tensor& u, const Tensor& b);

/// Month-conditioned affine map h' = (1 + alpha_m) * h + beta_m, where row i of
/// `h` uses month[i] (1..12) and alpha, beta are 12 x H.
Tensor film(const Tensor& h, const std::vector<int>& month, const Tensor& alpha, const Tensor& beta);

/// Sum over samples b and columns k of the ensemble CRPS
///   (1/M) sum_i |x_i - y| - 1/(2 M^2) sum_ij |x_i - x_j|
/// with pred rows b*M + i and target rows b. `fair` uses M(M-1) in the
/// second term.
Tensor ensemble_crps(const Tensor& pred, const Tensor& target, int members, bool fair = false);

// ---------------------------------------------------------------------------

struct NamedParam {
  std::string name;
  Tensor tensor;
};

struct Linear {
  Tensor w;  // out x in
  Tensor b;  // 1 x out

  Linear() = default;
  Linear(int in, int out, Rng& rng);
  static Linear zeros(int in, int out);
  Tensor operator()(const Tensor& x) const { return add(matmul_nt(x, w), b); }
  void collect(const std::string& prefix, std::vector<NamedParam>& out) const;
};

struct LstmLayer {
  Tensor w;  // 4h x in
  Tensor u;  // 4h x h
  Tensor b;  // 1 x 4h
  int hidden = 0;

  LstmLayer() = default;
  /// Weights uniform in +-1/sqrt(h); forget-gate bias +1, other biases 0.
  LstmLayer(int in, int hidden, Rng& rng);
  /// Returns {h', c'}.
  std::pair<Tensor, Tensor> operator()(const Tensor& x, const Tensor& h, const Tensor& c) const;
  void collect(const std::string& prefix, std::vector<NamedParam>& out) const;
};

struct MonthEmbedding {
  Tensor alpha;  // 12 x h, zero at construction
  Tensor beta;

  MonthEmbedding() = default;
  explicit MonthEmbedding(int hidden);
  Tensor operator()(const Tensor& h, const std::vector<int>& month) const { return film(h, month, alpha, beta); }
  void collect(const std::string& prefix, std::vector<NamedParam>& out) const;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct OptimizerState {
  std::vector<Mat> m, v;
  std::int64_t step = 0;
};

class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  /// theta <- theta - lr*wd*theta, then the bias-corrected Adam step. Throws
  /// DivergenceError naming the step when any gradient is non-finite.
  void step(const std::vector<NamedParam>& params, double lr);

  const AdamWConfig& config() const noexcept { return cfg_; }
  const OptimizerState& state() const noexcept { return state_; }
  void set_state(OptimizerState s) { state_ = std::move(s); }

 private:
  AdamWConfig cfg_;
  OptimizerState state_;
};

double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr_max, double lr_min);

void zero_grad(const std::vector<NamedParam>& params);

/// Parameter table checkpoint ("NETP" section).
struct NetCheckpoint {
  std::vector<std::pair<std::string, Mat>> params;
  std::optional<OptimizerState> optimizer;
  std::uint64_t seed = 0;
  std::int64_t step = 0;

  io::Section to_section() const;
  static NetCheckpoint from_section(const io::Section& section);
};

NetCheckpoint snapshot(const std::vector<NamedParam>& params);
/// Copies stored values into matching parameters; throws DataError on a
/// missing name or shape mismatch.
void restore(const NetCheckpoint& ckpt, const std::vector<NamedParam>& params);

}  // namespace limcast::nn
