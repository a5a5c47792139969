#include "limcast/net.hpp"

#include "limcast/error.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <unordered_set>

namespace limcast::nn {

namespace {

thread_local bool g_grad_enabled = true;

Tensor make_result(Mat value, std::vector<Tensor> inputs, std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    for (const auto& t : inputs)
      if (t.requires_grad()) node->requires_grad = true;
    if (node->requires_grad) {
      for (auto& t : inputs) node->parents.push_back(t.node());
      node->backward = std::move(fn);
    }
  }
  return Tensor(std::move(node));
}

Node& parent(Node& n, std::size_t i) { return *n.parents[i]; }

bool is_row_broadcast(const Tensor& a, const Tensor& b) {
  return b.rows() == 1 && a.rows() != 1 && b.cols() == a.cols();
}

void check_binary(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return;
  if (is_row_broadcast(a, b)) return;
  throw ConfigError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                    " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
}

/// Gradient for the right operand, reduced over rows when it was broadcast.
Mat reduce_like(const Mat& g, const Node& target) {
  if (target.value.rows() == g.rows()) return g;
  return g.colwise().sum();
}

Mat sigmoid_of(const Mat& x) { return (1.0 / (1.0 + (-x.array()).exp())).matrix(); }
// Eigen's double tanh is scalar; this goes through the vectorised exp.
Mat tanh_of(const Mat& x) { return (1.0 - 2.0 / ((2.0 * x.array()).exp() + 1.0)).matrix(); }

}  // namespace

void Node::accumulate(const Mat& g) {
  if (!requires_grad) return;
  if (grad.size() == 0) grad = g;
  else grad += g;
}

Tensor::Tensor(Mat value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Mat Tensor::grad() const {
  if (node_->grad.size() == 0) return Mat::Zero(rows(), cols());
  return node_->grad;
}

double Tensor::item() const {
  if (rows() != 1 || cols() != 1) throw ConfigError("item() needs a 1x1 tensor");
  return node_->value(0, 0);
}

void Tensor::zero_grad() { node_->grad.resize(0, 0); }

NoGrad::NoGrad() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGrad::~NoGrad() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

void backward(const Tensor& loss) {
  if (loss.rows() != 1 || loss.cols() != 1) throw ConfigError("backward needs a scalar (1x1) loss");
  if (!loss.requires_grad()) return;
  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  loss.node()->accumulate(Mat::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() != 0) n->backward(*n);
  }
  // Interior grads are not needed after the pass.
  for (Node* n : order)
    if (!n->parents.empty()) n->grad.resize(0, 0);
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_binary(a, b, "add");
  Mat v = is_row_broadcast(a, b) ? Mat(a.value().rowwise() + b.value().row(0)) : Mat(a.value() + b.value());
  return make_result(std::move(v), {a, b}, [](Node& n) {
    parent(n, 0).accumulate(n.grad);
    parent(n, 1).accumulate(reduce_like(n.grad, parent(n, 1)));
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_binary(a, b, "sub");
  Mat v = is_row_broadcast(a, b) ? Mat(a.value().rowwise() - b.value().row(0)) : Mat(a.value() - b.value());
  return make_result(std::move(v), {a, b}, [](Node& n) {
    parent(n, 0).accumulate(n.grad);
    parent(n, 1).accumulate(-reduce_like(n.grad, parent(n, 1)));
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_binary(a, b, "mul");
  const bool bc = is_row_broadcast(a, b);
  Mat v = bc ? Mat(a.value().array().rowwise() * b.value().row(0).array()) : Mat(a.value().cwiseProduct(b.value()));
  return make_result(std::move(v), {a, b}, [bc](Node& n) {
    Node& pa = parent(n, 0);
    Node& pb = parent(n, 1);
    if (bc) {
      if (pa.requires_grad) pa.accumulate(n.grad.array().rowwise() * pb.value.row(0).array());
      if (pb.requires_grad) pb.accumulate((n.grad.cwiseProduct(pa.value)).colwise().sum());
    } else {
      if (pa.requires_grad) pa.accumulate(n.grad.cwiseProduct(pb.value));
      if (pb.requires_grad) pb.accumulate(n.grad.cwiseProduct(pa.value));
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  return make_result(a.value() * s, {a}, [s](Node& n) { parent(n, 0).accumulate(n.grad * s); });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) throw ConfigError("matmul: inner dimensions differ");
  return make_result(a.value() * b.value(), {a, b}, [](Node& n) {
    Node& pa = parent(n, 0);
    Node& pb = parent(n, 1);
    if (pa.requires_grad) pa.accumulate(n.grad * pb.value.transpose());
    if (pb.requires_grad) pb.accumulate(pa.value.transpose() * n.grad);
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) throw ConfigError("matmul_nt: inner dimensions differ");
  return make_result(a.value() * b.value().transpose(), {a, b}, [](Node& n) {
    Node& pa = parent(n, 0);
    Node& pb = parent(n, 1);
    if (pa.requires_grad) pa.accumulate(n.grad * pb.value);
    if (pb.requires_grad) pb.accumulate(n.grad.transpose() * pa.value);
  });
}

Tensor sigmoid(const Tensor& a) {
  Mat s = sigmoid_of(a.value());
  return make_result(s, {a}, [s](Node& n) {
    parent(n, 0).accumulate((n.grad.array() * s.array() * (1.0 - s.array())).matrix());
  });
}

Tensor tanh(const Tensor& a) {
  Mat t = tanh_of(a.value());
  return make_result(t, {a}, [t](Node& n) {
    parent(n, 0).accumulate((n.grad.array() * (1.0 - t.array().square())).matrix());
  });
}

Tensor abs(const Tensor& a) {
  return make_result(a.value().cwiseAbs(), {a}, [](Node& n) {
    Node& p = parent(n, 0);
    const Mat sgn = p.value.unaryExpr([](double x) { return static_cast<double>((x > 0.0) - (x < 0.0)); });
    p.accumulate(n.grad.cwiseProduct(sgn));
  });
}

Tensor sum(const Tensor& a) {
  return make_result(Mat::Constant(1, 1, a.value().sum()), {a}, [](Node& n) {
    Node& p = parent(n, 0);
    p.accumulate(Mat::Constant(p.value.rows(), p.value.cols(), n.grad(0, 0)));
  });
}

Tensor mean(const Tensor& a) {
  const double count = static_cast<double>(a.value().size());
  return make_result(Mat::Constant(1, 1, a.value().sum() / count), {a}, [count](Node& n) {
    Node& p = parent(n, 0);
    p.accumulate(Mat::Constant(p.value.rows(), p.value.cols(), n.grad(0, 0) / count));
  });
}

Tensor slice_cols(const Tensor& a, Eigen::Index start, Eigen::Index n_cols) {
  if (start < 0 || n_cols < 0 || start + n_cols > a.cols()) throw ConfigError("slice_cols out of range");
  return make_result(a.value().middleCols(start, n_cols), {a}, [start, n_cols](Node& n) {
    Node& p = parent(n, 0);
    Mat g = Mat::Zero(p.value.rows(), p.value.cols());
    g.middleCols(start, n_cols) = n.grad;
    p.accumulate(g);
  });
}

Tensor slice_rows(const Tensor& a, Eigen::Index start, Eigen::Index n_rows) {
  if (start < 0 || n_rows < 0 || start + n_rows > a.rows()) throw ConfigError("slice_rows out of range");
  return make_result(a.value().middleRows(start, n_rows), {a}, [start, n_rows](Node& n) {
    Node& p = parent(n, 0);
    Mat g = Mat::Zero(p.value.rows(), p.value.cols());
    g.middleRows(start, n_rows) = n.grad;
    p.accumulate(g);
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ConfigError("concat_cols of nothing");
  Eigen::Index total = 0;
  for (const auto& p : parts) {
    if (p.rows() != parts[0].rows()) throw ConfigError("concat_cols: row counts differ");
    total += p.cols();
  }
  Mat v(parts[0].rows(), total);
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    v.middleCols(off, p.cols()) = p.value();
    offsets.push_back(off);
    off += p.cols();
  }
  return make_result(std::move(v), parts, [offsets](Node& n) {
    for (std::size_t i = 0; i < n.parents.size(); ++i) {
      Node& p = parent(n, i);
      if (p.requires_grad) p.accumulate(n.grad.middleCols(offsets[i], p.value.cols()));
    }
  });
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& index) {
  Mat v(static_cast<Eigen::Index>(index.size()), table.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= table.rows()) throw ConfigError("gather_rows index out of range");
    v.row(static_cast<Eigen::Index>(i)) = table.value().row(index[i]);
  }
  return make_result(std::move(v), {table}, [index](Node& n) {
    Node& p = parent(n, 0);
    Mat g = Mat::Zero(p.value.rows(), p.value.cols());
    for (std::size_t i = 0; i < index.size(); ++i) g.row(index[i]) += n.grad.row(static_cast<Eigen::Index>(i));
    p.accumulate(g);
  });
}

Tensor reshape(const Tensor& a, Eigen::Index rows, Eigen::Index cols) {
  if (rows * cols != a.value().size()) throw ConfigError("reshape changes the element count");
  Mat v = Eigen::Map<const Mat>(a.value().data(), rows, cols);
  return make_result(std::move(v), {a}, [](Node& n) {
    Node& p = parent(n, 0);
    p.accumulate(Eigen::Map<const Mat>(n.grad.data(), p.value.rows(), p.value.cols()));
  });
}

Tensor lstm_cell(const Tensor& x, const Tensor& h, const Tensor& c, const Tensor& w, const Tensor& u, const Tensor& b) {
  const Eigen::Index hd = h.cols();
  if (w.rows() != 4 * hd || u.rows() != 4 * hd || u.cols() != hd || b.cols() != 4 * hd || w.cols() != x.cols() ||
      c.cols() != hd || x.rows() != h.rows() || c.rows() != h.rows())
    throw ConfigError("lstm_cell: inconsistent shapes");
  Mat gates = x.value() * w.value().transpose();
  gates.noalias() += h.value() * u.value().transpose();
  gates.rowwise() += b.value().row(0);
  const Eigen::Index bsz = x.rows();
  auto act = std::make_shared<Mat>(bsz, 4 * hd);  // i, f, g, o after activation
  act->leftCols(2 * hd) = sigmoid_of(gates.leftCols(2 * hd));
  act->middleCols(2 * hd, hd) = tanh_of(gates.middleCols(2 * hd, hd));
  act->rightCols(hd) = sigmoid_of(gates.rightCols(hd));
  Mat out(bsz, 2 * hd);
  const auto i = act->leftCols(hd).array();
  const auto f = act->middleCols(hd, hd).array();
  const auto g = act->middleCols(2 * hd, hd).array();
  const auto o = act->rightCols(hd).array();
  out.rightCols(hd) = (f * c.value().array() + i * g).matrix();
  auto tanh_c = std::make_shared<Mat>(tanh_of(out.rightCols(hd)));
  out.leftCols(hd) = (o * tanh_c->array()).matrix();

  return make_result(std::move(out), {x, h, c, w, u, b}, [act, tanh_c, hd](Node& n) {
    Node& px = parent(n, 0);
    Node& ph = parent(n, 1);
    Node& pc = parent(n, 2);
    Node& pw = parent(n, 3);
    Node& pu = parent(n, 4);
    Node& pb = parent(n, 5);
    const auto i = act->leftCols(hd).array();
    const auto f = act->middleCols(hd, hd).array();
    const auto g = act->middleCols(2 * hd, hd).array();
    const auto o = act->rightCols(hd).array();
    const auto dh = n.grad.leftCols(hd).array();
    const auto tc = tanh_c->array();
    const Eigen::ArrayXXd dc = n.grad.rightCols(hd).array() + dh * o * (1.0 - tc.square());
    Mat dgates(n.grad.rows(), 4 * hd);
    dgates.leftCols(hd) = (dc * g * i * (1.0 - i)).matrix();
    dgates.middleCols(hd, hd) = (dc * pc.value.array() * f * (1.0 - f)).matrix();
    dgates.middleCols(2 * hd, hd) = (dc * i * (1.0 - g.square())).matrix();
    dgates.rightCols(hd) = (dh * tc * o * (1.0 - o)).matrix();
    if (px.requires_grad) px.accumulate(dgates * pw.value);
    if (ph.requires_grad) ph.accumulate(dgates * pu.value);
    if (pc.requires_grad) pc.accumulate((dc * f).matrix());
    if (pw.requires_grad) pw.accumulate(dgates.transpose() * px.value);
    if (pu.requires_grad) pu.accumulate(dgates.transpose() * ph.value);
    if (pb.requires_grad) pb.accumulate(dgates.colwise().sum());
  });
}

Tensor film(const Tensor& h, const std::vector<int>& month, const Tensor& alpha, const Tensor& beta) {
  if (static_cast<Eigen::Index>(month.size()) != h.rows()) throw ConfigError("film: one month per row required");
  if (alpha.rows() != 12 || beta.rows() != 12 || alpha.cols() != h.cols() || beta.cols() != h.cols())
    throw ConfigError("film: embeddings must be 12 x hidden");
  for (int m : month)
    if (m < 1 || m > 12) throw DataError("month", "calendar month must be in 1..12, got " + std::to_string(m));
  Mat out = h.value();
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const int m = month[static_cast<std::size_t>(r)] - 1;
    out.row(r).array() += alpha.value().row(m).array() * h.value().row(r).array() + beta.value().row(m).array();
  }
  return make_result(std::move(out), {h, alpha, beta}, [month](Node& n) {
    Node& ph = parent(n, 0);
    Node& pa = parent(n, 1);
    Node& pb = parent(n, 2);
    Mat dh, da, db;
    if (ph.requires_grad) dh = n.grad;
    if (pa.requires_grad) da = Mat::Zero(12, n.grad.cols());
    if (pb.requires_grad) db = Mat::Zero(12, n.grad.cols());
    for (Eigen::Index r = 0; r < n.grad.rows(); ++r) {
      const int m = month[static_cast<std::size_t>(r)] - 1;
      if (ph.requires_grad) dh.row(r).array() += n.grad.row(r).array() * pa.value.row(m).array();
      if (pa.requires_grad) da.row(m).array() += n.grad.row(r).array() * ph.value.row(r).array();
      if (pb.requires_grad) db.row(m) += n.grad.row(r);
    }
    if (ph.requires_grad) ph.accumulate(dh);
    if (pa.requires_grad) pa.accumulate(da);
    if (pb.requires_grad) pb.accumulate(db);
  });
}

Tensor ensemble_crps(const Tensor& pred, const Tensor& target, int members, bool fair) {
  if (members < 1 || pred.rows() != target.rows() * members || pred.cols() != target.cols())
    throw ConfigError("ensemble_crps: prediction must be (B*M) x K against a B x K target");
  if (fair && members < 2) throw ConfigError("the fair CRPS estimator needs at least two members");
  const Eigen::Index bsz = target.rows(), k = target.cols();
  const double m = members;
  const double spread_norm = fair ? m * (m - 1.0) : m * m;
  const Mat& x = pred.value();
  const Mat& y = target.value();

  // Per (sample, column): sort members; the pair sum is sum_r (2r - M - 1) x_(r).
  auto dpred = std::make_shared<Mat>(pred.rows(), k);
  auto dtarget = std::make_shared<Mat>(bsz, k);
  double total = 0.0;
  std::vector<std::pair<double, int>> buf(static_cast<std::size_t>(members));
  for (Eigen::Index b = 0; b < bsz; ++b)
    for (Eigen::Index j = 0; j < k; ++j) {
      double skill = 0.0, dy = 0.0;
      for (int i = 0; i < members; ++i) {
        const double xi = x(b * members + i, j);
        buf[static_cast<std::size_t>(i)] = {xi, i};
        const double diff = xi - y(b, j);
        skill += std::abs(diff);
        const double sgn = static_cast<double>((diff > 0.0) - (diff < 0.0));
        (*dpred)(b * members + i, j) = sgn / m;
        dy -= sgn / m;
      }
      std::sort(buf.begin(), buf.end());
      double pair = 0.0;
      for (int r = 0; r < members; ++r) {
        const double coef = 2.0 * (r + 1) - m - 1.0;
        pair += coef * buf[static_cast<std::size_t>(r)].first;
        // d/dx of 0.5 * (2 * pair) / norm
        (*dpred)(b * members + buf[static_cast<std::size_t>(r)].second, j) -= coef / spread_norm;
      }
      total += skill / m - pair / spread_norm;
      (*dtarget)(b, j) = dy;
    }
  return make_result(Mat::Constant(1, 1, total), {pred, target}, [dpred, dtarget](Node& n) {
    const double g = n.grad(0, 0);
    Node& pp = parent(n, 0);
    Node& pt = parent(n, 1);
    if (pp.requires_grad) pp.accumulate(*dpred * g);
    if (pt.requires_grad) pt.accumulate(*dtarget * g);
  });
}

// ---------------------------------------------------------------------------

namespace {

Mat uniform(Rng& rng, Eigen::Index r, Eigen::Index c, double bound) {
  std::uniform_real_distribution<double> u(-bound, bound);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = u(rng);
  return m;
}

}  // namespace

Linear::Linear(int in, int out, Rng& rng)
    : w(Tensor::parameter(uniform(rng, out, in, 1.0 / std::sqrt(static_cast<double>(in))))),
      b(Tensor::parameter(Mat::Zero(1, out))) {}

Linear Linear::zeros(int in, int out) {
  Linear l;
  l.w = Tensor::parameter(Mat::Zero(out, in));
  l.b = Tensor::parameter(Mat::Zero(1, out));
  return l;
}

void Linear::collect(const std::string& prefix, std::vector<NamedParam>& out) const {
  out.push_back({prefix + ".w", w});
  out.push_back({prefix + ".b", b});
}

LstmLayer::LstmLayer(int in, int h, Rng& rng) : hidden(h) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(h));
  w = Tensor::parameter(uniform(rng, 4 * h, in, bound));
  u = Tensor::parameter(uniform(rng, 4 * h, h, bound));
  Mat bias = Mat::Zero(1, 4 * h);
  bias.middleCols(h, h).setOnes();
  b = Tensor::parameter(bias);
}

std::pair<Tensor, Tensor> LstmLayer::operator()(const Tensor& x, const Tensor& h, const Tensor& c) const {
  const Tensor hc = lstm_cell(x, h, c, w, u, b);
  return {slice_cols(hc, 0, hidden), slice_cols(hc, hidden, hidden)};
}

void LstmLayer::collect(const std::string& prefix, std::vector<NamedParam>& out) const {
  out.push_back({prefix + ".W", w});
  out.push_back({prefix + ".U", u});
  out.push_back({prefix + ".b", b});
}

MonthEmbedding::MonthEmbedding(int hidden)
    : alpha(Tensor::parameter(Mat::Zero(12, hidden))), beta(Tensor::parameter(Mat::Zero(12, hidden))) {}

void MonthEmbedding::collect(const std::string& prefix, std::vector<NamedParam>& out) const {
  out.push_back({prefix + ".alpha", alpha});
  out.push_back({prefix + ".beta", beta});
}

void AdamW::step(const std::vector<NamedParam>& params, double lr) {
  if (state_.m.size() != params.size()) {
    state_.m.clear();
    state_.v.clear();
    for (const auto& p : params) {
      state_.m.push_back(Mat::Zero(p.tensor.rows(), p.tensor.cols()));
      state_.v.push_back(Mat::Zero(p.tensor.rows(), p.tensor.cols()));
    }
  }
  const std::int64_t t = state_.step + 1;
  for (const auto& p : params) {
    const Mat& g = p.tensor.node()->grad;
    if (g.size() != 0 && !g.allFinite())
      throw DivergenceError("non-finite gradient for '" + p.name + "' at optimizer step " + std::to_string(t));
  }
  state_.step = t;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor tensor = params[k].tensor;
    Mat& theta = tensor.value();
    const Mat g = tensor.grad();
    theta *= 1.0 - lr * cfg_.weight_decay;
    state_.m[k] = cfg_.beta1 * state_.m[k] + (1.0 - cfg_.beta1) * g;
    state_.v[k] = cfg_.beta2 * state_.v[k] + (1.0 - cfg_.beta2) * g.cwiseAbs2();
    theta.array() -= lr * (state_.m[k].array() / bc1) / ((state_.v[k].array() / bc2).sqrt() + cfg_.eps);
  }
}

double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr_max, double lr_min) {
  if (total_steps <= 0) return lr_max;
  const double frac = std::clamp(static_cast<double>(step) / static_cast<double>(total_steps), 0.0, 1.0);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

void zero_grad(const std::vector<NamedParam>& params) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

io::Section NetCheckpoint::to_section() const {
  io::ByteWriter w;
  w.u64(seed);
  w.u64(static_cast<std::uint64_t>(step));
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, value] : params) {
    w.str(name);
    w.matrix(value);
  }
  w.u8(optimizer ? 1 : 0);
  if (optimizer) {
    w.u64(static_cast<std::uint64_t>(optimizer->step));
    w.u32(static_cast<std::uint32_t>(optimizer->m.size()));
    for (std::size_t i = 0; i < optimizer->m.size(); ++i) {
      w.matrix(optimizer->m[i]);
      w.matrix(optimizer->v[i]);
    }
  }
  return {"NETP", 1, w.take()};
}

NetCheckpoint NetCheckpoint::from_section(const io::Section& section) {
  if (section.tag != "NETP") throw DataError("tag", "expected NETP section");
  io::ByteReader r(section.payload, "NETP");
  NetCheckpoint c;
  c.seed = r.u64("seed");
  c.step = static_cast<std::int64_t>(r.u64("step"));
  const auto n = r.u32("n_params");
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = r.str("name");
    c.params.emplace_back(std::move(name), r.matrix("value"));
  }
  if (r.u8("has_optimizer")) {
    OptimizerState s;
    s.step = static_cast<std::int64_t>(r.u64("optimizer_step"));
    const auto k = r.u32("n_moments");
    for (std::uint32_t i = 0; i < k; ++i) {
      s.m.push_back(r.matrix("m"));
      s.v.push_back(r.matrix("v"));
    }
    c.optimizer = std::move(s);
  }
  return c;
}

NetCheckpoint snapshot(const std::vector<NamedParam>& params) {
  NetCheckpoint c;
  for (const auto& p : params) c.params.emplace_back(p.name, p.tensor.value());
  return c;
}

void restore(const NetCheckpoint& ckpt, const std::vector<NamedParam>& params) {
  for (const auto& p : params) {
    auto it = std::find_if(ckpt.params.begin(), ckpt.params.end(), [&](const auto& e) { return e.first == p.name; });
    if (it == ckpt.params.end()) throw DataError(p.name, "parameter missing from checkpoint");
    if (it->second.rows() != p.tensor.rows() || it->second.cols() != p.tensor.cols())
      throw DataError(p.name, "checkpoint shape does not match the model");
    Tensor t = p.tensor;
    t.value() = it->second;
  }
}

}  // namespace limcast::nn
