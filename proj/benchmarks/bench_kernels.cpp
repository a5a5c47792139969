#include "limcast/hybrid.hpp"
#include "limcast/lim.hpp"
#include "limcast/linalg.hpp"
#include "limcast/net.hpp"
#include "limcast/synth.hpp"
#include "limcast/verify.hpp"

#include <benchmark/benchmark.h>

#include <random>

using namespace limcast;

namespace {

Eigen::MatrixXd gaussian(Rng& rng, Eigen::Index r, Eigen::Index c, double s = 1.0) {
  std::normal_distribution<double> n(0.0, s);
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

void BM_LstmStep(benchmark::State& state) {
  const int batch = static_cast<int>(state.range(0)), h = 64, in = 64;
  Rng rng(1);
  nn::LstmLayer layer(in, h, rng);
  const nn::Tensor x = nn::Tensor::constant(gaussian(rng, batch, in));
  const nn::Tensor h0 = nn::Tensor::constant(nn::Mat::Zero(batch, h));
  for (auto _ : state) {
    layer.w.zero_grad();
    auto [hn, cn] = layer(x, h0, h0);
    nn::backward(nn::sum(hn));
    benchmark::DoNotOptimize(layer.w.grad().data());
  }
  state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_LstmStep)->Arg(32)->Arg(512);

void BM_LimEnsemble(benchmark::State& state) {
  const auto sys = synth::make_synth_system(10, true, 0.0, 101);
  const auto op = synth::linear_operator(sys);
  const Eigen::VectorXd z0 = Eigen::VectorXd::Ones(10);
  const int members = static_cast<int>(state.range(0));
  std::uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(lim::integrate_ensemble(op, z0, 1, 24, members, 1.0 / 16.0, ++seed));
  state.SetItemsProcessed(state.iterations() * members * 24);
}
BENCHMARK(BM_LimEnsemble)->Arg(16)->Arg(256);

void BM_CrpsEmpirical(benchmark::State& state) {
  Rng rng(2);
  const Eigen::MatrixXd m = gaussian(rng, state.range(0), 1);
  const std::span<const double> members(m.data(), static_cast<std::size_t>(m.size()));
  for (auto _ : state) benchmark::DoNotOptimize(verify::crps_empirical(members, 0.3));
}
BENCHMARK(BM_CrpsEmpirical)->Arg(16)->Arg(4096);

void BM_EnsembleCrpsLoss(benchmark::State& state) {
  Rng rng(3);
  const int members = 16, batch = 32, cols = 10;
  nn::Tensor pred = nn::Tensor::parameter(gaussian(rng, batch * members, cols));
  const nn::Tensor target = nn::Tensor::constant(gaussian(rng, batch, cols));
  for (auto _ : state) {
    pred.zero_grad();
    nn::backward(nn::ensemble_crps(pred, target, members));
    benchmark::DoNotOptimize(pred.grad().data());
  }
}
BENCHMARK(BM_EnsembleCrpsLoss);

void BM_Expm(benchmark::State& state) {
  Rng rng(4);
  const auto d = state.range(0);
  const Eigen::MatrixXd a = gaussian(rng, d, d, 0.2) - 0.5 * Eigen::MatrixXd::Identity(d, d);
  for (auto _ : state) benchmark::DoNotOptimize(linalg::expm(a));
}
BENCHMARK(BM_Expm)->Arg(10)->Arg(20);

void BM_Logm(benchmark::State& state) {
  Rng rng(5);
  const auto d = state.range(0);
  const Eigen::MatrixXd g = linalg::expm(gaussian(rng, d, d, 0.2) - 0.5 * Eigen::MatrixXd::Identity(d, d));
  for (auto _ : state) benchmark::DoNotOptimize(linalg::logm(g));
}
BENCHMARK(BM_Logm)->Arg(10)->Arg(20);

void BM_CyclostationaryFit(benchmark::State& state) {
  const auto sys = synth::make_synth_system(10, true, 0.0, 101);
  const auto z = synth::generate(sys, static_cast<int>(state.range(0)), 1);
  for (auto _ : state) benchmark::DoNotOptimize(lim::estimate_cyclostationary_lim(z));
}
BENCHMARK(BM_CyclostationaryFit)->Arg(500)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
