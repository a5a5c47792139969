#include "doctest.h"
#include "fixtures.hpp"

#include "limcast/binary_io.hpp"
#include "limcast/error.hpp"
#include "limcast/hybrid.hpp"
#include "limcast/lim.hpp"
#include "limcast/synth.hpp"
#include "limcast/verify.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

using namespace limcast;
using namespace limcast::hybrid;

namespace {

struct Setup {
  synth::SynthSystem sys;
  eof::PcSeries train, val;
  lim::LimOperator op;
  eof::EofBasis basis;
  Eigen::VectorXd scale;
};

Setup make_setup(double c_frac = 0.3, int years = 200, int d = 4) {
  Setup s;
  s.sys = synth::make_synth_system(d, true, 0.0, 42);
  s.sys = synth::with_nonlinearity(s.sys, c_frac * s.sys.stability_bound);
  const auto z = synth::generate(s.sys, years, 7);
  const std::size_t n_train = z.size() * 3 / 4;
  s.train = z.slice({0, n_train});
  s.val = z.slice({n_train, z.size()});
  s.op = lim::estimate_cyclostationary_lim_clipped(s.train, 0.99);
  s.basis = synth::embedding_basis(s.sys);
  s.scale = (s.train.z.colwise().squaredNorm() / static_cast<double>(s.train.size())).cwiseSqrt().transpose();
  return s;
}

TrainConfig small_config() {
  TrainConfig c;
  c.epochs = 6;
  c.batch = 16;
  c.horizon = 6;
  c.members = 4;
  c.t_hist = 4;
  c.hidden = 8;
  c.layers = 1;
  c.samples_per_epoch = 128;
  c.val_samples = 32;
  c.patience = 50;
  c.lr_max = 1e-2;
  return c;
}

HybridModel small_hybrid(const Setup& s, const TrainConfig& c, std::uint64_t seed = 1) {
  return HybridModel(s.op, s.scale, c.hidden, c.layers, c.members, c.horizon, seed, c.delta);
}

std::vector<std::uint8_t> lim_bytes(const lim::LimOperator& op) { return op.to_section().payload; }

/// Independent evaluation of the training loss with the scalar CRPS.
double loss_oracle(const std::vector<nn::Mat>& pred, const std::vector<nn::Mat>& target, const Eigen::MatrixXd& map,
                   const Eigen::VectorXd& w, int members) {
  double total = 0.0;
  const auto b = target.front().rows();
  const auto k = target.front().cols();
  for (std::size_t tau = 0; tau < pred.size(); ++tau) {
    const Eigen::MatrixXd p = map.size() ? Eigen::MatrixXd(pred[tau] * map) : Eigen::MatrixXd(pred[tau]);
    for (Eigen::Index i = 0; i < b; ++i)
      for (Eigen::Index j = 0; j < k; ++j) {
        std::vector<double> ens(static_cast<std::size_t>(members));
        for (int m = 0; m < members; ++m) ens[static_cast<std::size_t>(m)] = p(i * members + m, j);
        total += w(static_cast<Eigen::Index>(tau)) * verify::crps_empirical(ens, target[tau](i, j));
      }
  }
  return total / static_cast<double>(b * k);
}

}  // namespace

TEST_SUITE("hybrid") {

TEST_CASE("zero residual reproduces the LIM ensemble bit for bit") {
  const auto s = make_setup();
  const auto c = small_config();
  const auto model = small_hybrid(s, c);
  const Eigen::VectorXd z0 = s.val.z.row(5).transpose();
  const auto h = hybrid_forecast(model, z0, s.val.month[5], 99);
  const auto l = lim::integrate_ensemble(s.op, z0, s.val.month[5], c.horizon, c.members, c.delta, 99);
  REQUIRE(h.members.size() == l.members.size());
  for (std::size_t m = 0; m < h.members.size(); ++m) CHECK((h.members[m].array() == l.members[m].array()).all());
}

TEST_CASE("batched forecasts equal single forecasts") {
  const auto s = make_setup();
  const auto c = small_config();
  auto model = small_hybrid(s, c);
  // Give the residual a nonzero output so the network path is exercised.
  for (auto& p : model.parameters())
    if (p.name.rfind("out_proj", 0) == 0) p.tensor.value().setConstant(0.05);
  Eigen::MatrixXd states(3, s.op.dim());
  std::vector<int> months;
  std::vector<std::uint64_t> seeds{3, 4, 5};
  for (int i = 0; i < 3; ++i) {
    states.row(i) = s.val.z.row(10 * i);
    months.push_back(s.val.month[static_cast<std::size_t>(10 * i)]);
  }
  const auto batch = hybrid_forecast_batch(model, states, months, seeds);
  for (int i = 0; i < 3; ++i) {
    const auto one = hybrid_forecast(model, states.row(i).transpose(), months[static_cast<std::size_t>(i)],
                                     seeds[static_cast<std::size_t>(i)]);
    for (std::size_t m = 0; m < one.members.size(); ++m)
      CHECK((batch[static_cast<std::size_t>(i)].members[m] - one.members[m]).cwiseAbs().maxCoeff() < 1e-12);
  }
  const auto again = hybrid_forecast_batch(model, states, months, seeds);
  CHECK((again[1].members[2].array() == batch[1].members[2].array()).all());
}

TEST_CASE("lead weights decay geometrically") {
  const auto w = lead_weights(0.65, 24);
  CHECK(w(11) == doctest::Approx(std::pow(0.65, 12)).epsilon(1e-14));
  CHECK(w(11) / w(0) == doctest::Approx(std::pow(0.65, 11)).epsilon(1e-12));
  CHECK_THROWS_AS(lead_weights(0.0, 3), ConfigError);
}

TEST_CASE("crps loss matches the scalar oracle in grid and PC space") {
  const auto s = make_setup();
  Rng rng(5);
  const int b = 3, m = 4, t = 12, d = s.op.dim();
  const Eigen::MatrixXd map = s.basis.kept_map();
  std::vector<nn::Mat> pred, tgt_pc, tgt_grid;
  std::vector<nn::Tensor> pred_t;
  for (int tau = 0; tau < t; ++tau) {
    pred.push_back(testing::random_matrix(rng, b * m, d));
    pred_t.push_back(nn::Tensor::constant(pred.back()));
    tgt_pc.push_back(testing::random_matrix(rng, b, d));
    tgt_grid.push_back(tgt_pc.back() * map);
  }
  const auto w = lead_weights(0.65, t);
  const double grid = crps_loss(pred_t, tgt_grid, map, w, m, false).item();
  const double pc = crps_loss(pred_t, tgt_pc, nn::Mat(), w, m, false).item();
  CHECK(grid == doctest::Approx(loss_oracle(pred, tgt_grid, map, w, m)).epsilon(1e-10));
  CHECK(pc == doctest::Approx(loss_oracle(pred, tgt_pc, Eigen::MatrixXd(), w, m)).epsilon(1e-10));
  CHECK(std::abs(grid - pc) > 1e-6);

  SUBCASE("a single-lead error contributes gamma^tau") {
    std::vector<nn::Mat> zero_t(static_cast<std::size_t>(t), nn::Mat::Zero(b, d));
    std::vector<nn::Tensor> zero_p(static_cast<std::size_t>(t), nn::Tensor::constant(nn::Mat::Zero(b * m, d)));
    auto at_lead = [&](int tau) {
      auto tg = zero_t;
      tg[static_cast<std::size_t>(tau - 1)].setConstant(1.0);
      return crps_loss(zero_p, tg, nn::Mat(), w, m, false).item();
    };
    CHECK(at_lead(12) / at_lead(1) == doctest::Approx(std::pow(0.65, 11)).epsilon(1e-12));
  }

  SUBCASE("member order does not matter") {
    auto perm = pred_t;
    for (int tau = 0; tau < t; ++tau) {
      nn::Mat p = pred[static_cast<std::size_t>(tau)];
      for (int i = 0; i < b; ++i) p.middleRows(i * m, m) = p.middleRows(i * m, m).colwise().reverse().eval();
      perm[static_cast<std::size_t>(tau)] = nn::Tensor::constant(p);
    }
    CHECK(crps_loss(perm, tgt_grid, map, w, m, false).item() == doctest::Approx(grid).epsilon(1e-13));
  }
}

TEST_CASE("training leaves the LIM untouched and lowers the loss") {
  const auto s = make_setup(0.3);
  // An over-damped LIM leaves a large residual for the network to learn.
  auto ls = s.op.l_all();
  for (auto& l : ls) l *= 4.0;
  const auto damped = lim::LimOperator::cyclostationary(ls, s.op.q_all());
  auto c = small_config();
  c.epochs = 12;
  c.samples_per_epoch = 4096;
  HybridModel model(damped, s.scale, c.hidden, c.layers, c.members, c.horizon, 1, c.delta);
  const auto before = lim_bytes(model.lim());
  const auto hist = train_hybrid(model, {s.train, std::nullopt}, {s.val, std::nullopt}, s.basis, c);
  CHECK(lim_bytes(model.lim()) == before);
  REQUIRE(hist.epochs.size() == 12);
  int down = 0;
  for (std::size_t e = 1; e < 6; ++e) down += hist.epochs[e].train_loss <= hist.epochs[e - 1].train_loss;
  CHECK(down >= 4);
  CHECK(hist.best_epoch >= 1);
  CHECK(hist.best_val == doctest::Approx(hist.epochs[static_cast<std::size_t>(hist.best_epoch - 1)].val_loss));
  CHECK(hist.to_csv().rfind("epoch,train_loss,val_loss", 0) == 0);
  std::vector<std::size_t> init(20);
  std::iota(init.begin(), init.end(), 0);
  CHECK(residual_ratio(model, s.val, init, 3) > 0.0);
}

TEST_CASE("on linear data the learned residual stays small") {
  const auto s = make_setup(0.0);
  auto c = small_config();
  c.epochs = 4;
  c.lr_max = 3e-3;
  auto model = small_hybrid(s, c);
  const auto hist = train_hybrid(model, {s.train, std::nullopt}, {s.val, std::nullopt}, s.basis, c);
  CHECK_FALSE(hist.worse_than_climatology);
  std::vector<std::size_t> init(40);
  std::iota(init.begin(), init.end(), 0);
  CHECK(residual_ratio(model, s.val, init, 3) < 0.25);
}

TEST_CASE("pc-lstm forecasts") {
  const auto s = make_setup();
  const auto c = small_config();
  PcLstmModel model(s.op.dim(), s.scale, c.hidden, c.layers, c.members, c.horizon, c.t_hist, 3);
  const Eigen::MatrixXd hist = s.val.z.topRows(c.t_hist);
  const std::vector<int> months(s.val.month.begin(), s.val.month.begin() + c.t_hist);

  SUBCASE("the history order matters") {
    const auto f = pc_lstm_forecast(model, hist, months);
    const Eigen::MatrixXd rev = hist.colwise().reverse();
    const auto g = pc_lstm_forecast(model, rev, months);
    CHECK((f.members[0] - g.members[0]).cwiseAbs().maxCoeff() > 1e-8);
    CHECK(f.horizon() == c.horizon);
    CHECK(f.n_members() == c.members);
  }
  SUBCASE("zero heads give a zero forecast") {
    model.zero_heads();
    const auto f = pc_lstm_forecast(model, hist, months);
    for (const auto& m : f.members) CHECK(m.cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("wrong history length names the field") {
    try {
      pc_lstm_forecast(model, hist.topRows(c.t_hist - 1), std::span(months).first(c.t_hist - 1));
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(e.field() == "history");
    }
    const std::vector<std::size_t> early{1};
    CHECK_THROWS_AS(pc_lstm_forecast_batch(model, s.val, early), DataError);
  }
  SUBCASE("batch agrees with single forecasts") {
    const std::vector<std::size_t> init{static_cast<std::size_t>(c.t_hist - 1), 20};
    const auto batch = pc_lstm_forecast_batch(model, s.val, init);
    const auto one = pc_lstm_forecast(model, s.val.z.middleRows(20 - c.t_hist + 1, c.t_hist),
                                      std::span(s.val.month).subspan(20 - c.t_hist + 1, c.t_hist));
    CHECK((batch[1].members[3] - one.members[3]).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("pc-lstm trains in PC space") {
  const auto s = make_setup(0.3);
  auto c = small_config();
  c.loss_space = LossSpace::pc;
  c.epochs = 3;
  PcLstmModel model(s.op.dim(), s.scale, c.hidden, c.layers, c.members, c.horizon, c.t_hist, 3);
  const auto hist = train_pc_lstm(model, {s.train, std::nullopt}, {s.val, std::nullopt}, s.basis, c);
  CHECK(hist.epochs.size() == 3);
  CHECK(hist.epochs.back().train_loss < hist.epochs.front().train_loss);
}

TEST_CASE("checkpoints round trip") {
  const auto s = make_setup();
  const auto c = small_config();
  const auto dir = std::filesystem::temp_directory_path() / "limcast_hybrid_ckpt";
  std::filesystem::create_directories(dir);
  auto model = small_hybrid(s, c);
  for (auto& p : model.parameters()) p.tensor.value().array() += 0.01;
  save_hybrid(dir / "h.bin", model, c);
  CHECK(checkpoint_kind(dir / "h.bin") == "hybrid");
  const auto [loaded, cfg] = load_hybrid(dir / "h.bin");
  CHECK(cfg.to_json() == c.to_json());
  const Eigen::VectorXd z0 = s.val.z.row(3).transpose();
  const auto a = hybrid_forecast(model, z0, s.val.month[3], 8);
  const auto b = hybrid_forecast(loaded, z0, s.val.month[3], 8);
  for (std::size_t m = 0; m < a.members.size(); ++m) CHECK((a.members[m].array() == b.members[m].array()).all());
  CHECK_THROWS_AS(load_pc_lstm(dir / "h.bin"), DataError);

  PcLstmModel pc(s.op.dim(), s.scale, c.hidden, c.layers, c.members, c.horizon, c.t_hist, 4);
  save_pc_lstm(dir / "p.bin", pc, c);
  CHECK(checkpoint_kind(dir / "p.bin") == "pc-lstm");
  const auto [pc2, cfg2] = load_pc_lstm(dir / "p.bin");
  const std::vector<std::size_t> init{10};
  CHECK((pc_lstm_forecast_batch(pc, s.val, init)[0].members[1].array() ==
         pc_lstm_forecast_batch(pc2, s.val, init)[0].members[1].array())
            .all());
  std::filesystem::remove_all(dir);
}

TEST_CASE("train config JSON") {
  TrainConfig c;
  c.gamma = 0.5;
  c.loss_space = LossSpace::pc;
  const auto back = TrainConfig::from_json(c.to_json());
  CHECK(back.gamma == 0.5);
  CHECK(back.loss_space == LossSpace::pc);
  CHECK_THROWS_AS(TrainConfig::from_json(R"({"epochz": 3})"), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json(R"({"gamma": 1.5})"), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json(R"({"loss_space": "cells"})"), ConfigError);
  CHECK(TrainConfig::from_json("{}").epochs == TrainConfig{}.epochs);
}

TEST_CASE("forecast CSV layout") {
  lim::EnsembleForecast f;
  f.init_time = 7;
  f.members = {Eigen::MatrixXd::Constant(2, 2, 1.5)};
  const auto csv = forecasts_to_csv({f});
  CHECK(csv.rfind("init_time,member,lead,pc_index,value\n", 0) == 0);
  CHECK(csv.find("7,0,2,1,1.5\n") != std::string::npos);
}

}  // TEST_SUITE
