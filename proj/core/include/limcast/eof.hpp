#pragma once

#include "limcast/binary_io.hpp"
#include "limcast/grid.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace limcast::eof {

/// EOF patterns of one variable over its unmasked cells.
struct VariableBasis {
  std::string name;
  Eigen::MatrixXd patterns;          // n_modes x n_valid, orthonormal rows
  Eigen::VectorXd singular_values;   // descending
  Eigen::VectorXd train_pc_std;      // per mode, from the training projections
  int n_keep = 0;

  int n_modes() const noexcept { return static_cast<int>(patterns.rows()); }
  /// sigma_k^2 / sum(sigma^2) over the stored modes.
  Eigen::VectorXd explained_variance() const;
};

struct EofBasis {
  std::vector<VariableBasis> vars;
  int n_noise_hi = 300;
  std::vector<std::size_t> cell_index;  // flat (lat-major) id of each unmasked cell
  // Grid the basis was fitted on.
  std::vector<double> lat, lon;
  std::vector<std::uint8_t> mask;
  std::uint64_t id = 0;

  /// Reduced state dimension: sum of n_keep over variables.
  int dim() const noexcept;
  std::size_t n_valid() const noexcept { return cell_index.size(); }
  /// Offset of variable v inside the concatenated PC state.
  int offset(std::size_t v) const noexcept;
  /// Kept patterns as one block-diagonal [dim x (n_var * n_valid)] map; columns
  /// follow the var-major stacking used by `stacked_fields`.
  Eigen::MatrixXd kept_map() const;
  bool matches(const GriddedSeries& grid) const;
  /// Empty, correctly shaped series (metadata only) on the basis grid.
  GriddedSeries grid_template(std::size_t n_time, int start_year, int start_month) const;

  /// FNV-1a hash of the serialised basis; stored in `id` by fit_eof.
  std::uint64_t content_id() const;

  io::Section to_section() const;
  static EofBasis from_section(const io::Section& section);
};

/// Reduced state trajectory with calendar-month labels.
struct PcSeries {
  Eigen::MatrixXd z;        // time x d
  std::vector<int> month;   // 1..12 per record
  int start_year = 1;
  std::uint64_t basis_id = 0;

  std::size_t size() const noexcept { return static_cast<std::size_t>(z.rows()); }
  int dim() const noexcept { return static_cast<int>(z.cols()); }
  PcSeries slice(TimeRange range) const;
  /// Throws DataError if months do not cycle consecutively.
  void validate() const;

  io::Section to_section() const;
  static PcSeries from_section(const io::Section& section);
};

/// Build a PcSeries from a plain matrix; month labels follow `start_month`.
PcSeries make_pc_series(Eigen::MatrixXd z, int start_month, int start_year = 1, std::uint64_t basis_id = 0);

/// Unmasked values stacked var-major: [time x (n_var * n_valid)].
Eigen::MatrixXd stacked_fields(const GriddedSeries& series);
GriddedSeries unstack_fields(const Eigen::MatrixXd& stacked, const EofBasis& basis, int start_year, int start_month);

EofBasis fit_eof(const GriddedSeries& train, const std::vector<int>& n_keep, int n_total, int n_noise_hi = 300);

PcSeries project(const GriddedSeries& field, const EofBasis& basis);

/// Field from PCs; with a seed, adds Gaussian loadings on modes n_keep..n_noise_hi
/// drawn independently for every record.
GriddedSeries reconstruct(const PcSeries& z, const EofBasis& basis, std::optional<std::uint64_t> noise_seed = {});

}  // namespace limcast::eof
