#pragma once

#include "limcast/eof.hpp"
#include "limcast/grid.hpp"
#include "limcast/lim.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace limcast::synth {

/// Ground-truth system dz = (L_m z + c b (u.z)^2) dt + F_m dW.
///
/// L_m = V (Lambda + S_m) V^-1 with a block-diagonal modal matrix. For d >= 5:
/// mode pair (0, 1) is a slow oscillation (48 month period), pair (2, 3) an
/// 18 month one, mode 4 a slow real mode that receives the quadratic forcing and
/// the rest faster real modes (smaller d drops slots from the end). The
/// quadratic term feeds the square of modal coordinate 0 into the forced mode
/// only, so the modal dynamics stay triangular.
struct SynthSystem {
  int d = 0;
  bool seasonal = false;
  double nonlin_coeff = 0.0;
  std::uint64_t seed = 0;

  std::vector<Eigen::MatrixXd> l;  // 12 (or 1 when not seasonal)
  std::vector<Eigen::MatrixXd> q;
  Eigen::MatrixXd v;               // modal basis
  Eigen::MatrixXd v_inv;
  Eigen::VectorXd u;               // row 0 of V^-1
  Eigen::VectorXd b;               // column of V for the forced mode, b[0] > 0
  int forced_mode = 0;
  /// r_k / sigma_0: the c at which the mean quadratic forcing c sigma_0^2
  /// shifts the forced mode (damping r_k) by sigma_0, the linear stationary
  /// std of modal coordinate 0. Generation is checked empirically and throws
  /// DivergenceError well above this scale.
  double stability_bound = 0.0;

  // Synthetic grid: the first n_ssta state components load on "ssta"
  // patterns, the rest on "ssha" patterns.
  int n_ssta = 0;
  std::vector<double> lat, lon;
  std::vector<std::uint8_t> mask;
  Eigen::MatrixXd patterns_ssta;   // n_ssta x n_valid, orthonormal rows
  Eigen::MatrixXd patterns_ssha;   // (d - n_ssta) x n_valid
  double obs_noise = 0.05;         // white cell noise added by `embed`

  const Eigen::MatrixXd& l_month(int month) const { return l.size() == 1 ? l[0] : l[static_cast<std::size_t>(month - 1)]; }
  const Eigen::MatrixXd& q_month(int month) const { return q.size() == 1 ? q[0] : q[static_cast<std::size_t>(month - 1)]; }
  std::size_t n_valid() const;
};

/// Throws ConfigError for d < 2.
SynthSystem make_synth_system(int d, bool seasonal, double nonlin_coeff, std::uint64_t seed);

/// Copy with a different quadratic coefficient.
SynthSystem with_nonlinearity(const SynthSystem& system, double nonlin_coeff);

/// Linear part as a LIM operator (cyclostationary when seasonal).
lim::LimOperator linear_operator(const SynthSystem& system);

/// Exact mean map of one month of Euler steps, (I + L_m delta)^(1/delta).
Eigen::MatrixXd euler_month_map(const SynthSystem& system, int month, double delta = 1.0 / 16.0);

/// Zero-lag covariance at the start of each calendar month for the linear
/// (c = 0) Euler dynamics, from the periodic discrete Lyapunov recursion.
std::vector<Eigen::MatrixXd> linear_covariances(const SynthSystem& system, double delta = 1.0 / 16.0);

struct GenerateOptions {
  double delta = 1.0 / 16.0;
  int spinup_years = 50;
  /// Divergence threshold in units of the linear stationary std per component.
  double divergence_sigmas = 50.0;
};

/// Monthly states starting in January of year 1 after a discarded spin-up.
/// Throws DivergenceError (naming c and the seed) if the trajectory escapes.
eof::PcSeries generate(const SynthSystem& system, int years, std::uint64_t seed, const GenerateOptions& opt = {});

/// Gridded fields of a state series; with a seed, white noise of std
/// `obs_noise` is added to every valid cell.
GriddedSeries embed(const SynthSystem& system, const eof::PcSeries& z, std::optional<std::uint64_t> noise_seed = {});

/// EOF basis made of the embedding patterns, so project(embed(z)) == z.
eof::EofBasis embedding_basis(const SynthSystem& system);

/// Embedded field of the quadratic direction b (one value per cell, NaN on
/// masked cells), laid out [var][cell].
std::vector<double> quadratic_pattern(const SynthSystem& system);

std::string to_json(const SynthSystem& system);
SynthSystem from_json(const std::string& text);

}  // namespace limcast::synth
