#pragma once

#include "limcast/binary_io.hpp"
#include "limcast/grid.hpp"

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace limcast::dataprep {

enum class GridFormat { flat_binary, csv };

GridFormat format_from_path(const std::filesystem::path& path);

/// Reads a LIMG flat-binary or long-format CSV grid and validates it.
GriddedSeries ingest_grid(const std::filesystem::path& path, GridFormat format);
void write_grid(const std::filesystem::path& path, const GriddedSeries& series, GridFormat format);

std::vector<std::uint8_t> encode_grid(const GriddedSeries& series);
GriddedSeries decode_grid(std::span<const std::uint8_t> bytes, const std::string& context = "grid");

/// Per-cell statistics removed during preprocessing. The climatology and scale
/// come from the training range, the trend from the whole record (empty when
/// not detrended). Arrays are laid out [var][cell] (monthly_mean: [12][var][cell]).
struct Climatology {
  std::vector<double> monthly_mean;
  std::vector<double> trend_slope;
  std::vector<double> trend_intercept;
  std::vector<double> scale;
  TimeRange train_range;

  io::Section to_section() const;
  static Climatology from_section(const io::Section& section);
};

struct DetrendResult {
  GriddedSeries series;
  std::vector<double> slopes;      // per [var][cell], per month
  std::vector<double> intercepts;  // value of the fitted line at t = 0
};

/// Removes a per-cell OLS line in the month index. The slope is estimated with
/// calendar-month offsets absorbed (within-month deviations), which makes
/// detrending commute with climatology removal. The line is fitted on
/// `fit_range` (whole record when absent) and subtracted everywhere.
DetrendResult detrend_linear(const GriddedSeries& series, std::optional<TimeRange> fit_range = {});

struct ClimatologyResult {
  GriddedSeries series;
  Climatology climatology;
};

ClimatologyResult remove_climatology(const GriddedSeries& series, TimeRange train_range);

/// Subtracts an existing climatology (trend is not touched).
GriddedSeries apply_climatology(const GriddedSeries& series, const Climatology& clim);

/// Divides each variable by one pooled scale. With fit=true the scale is the
/// population std over all unmasked cells and the `fit_range` records, and it
/// is stored in `clim`.
GriddedSeries zscore_normalize(const GriddedSeries& series, Climatology& clim, bool fit,
                               std::optional<TimeRange> fit_range = {});

struct Region {
  double lat_min = -5.0;
  double lat_max = 5.0;
  double lon_min = 160.0;
  double lon_max = 210.0;
};

/// Central-Pacific box used as the default index region (5S-5N, 160E-150W).
inline constexpr Region kNino4{-5.0, 5.0, 160.0, 210.0};

/// Cell weights (cos latitude) of unmasked cells inside `region`, zero elsewhere,
/// normalised to sum to one. Throws DataError on an empty intersection.
std::vector<double> region_weights(const GriddedSeries& grid, const Region& region);

std::vector<double> nino_index(const GriddedSeries& series, const std::string& var, const Region& region = kNino4);

struct SplitSpec {
  double train_fraction = 0.75;
  double val_fraction = 0.15;
  double test_fraction = 0.10;
};

struct Split {
  GriddedSeries train;
  GriddedSeries val;
  GriddedSeries test;
  std::array<std::size_t, 3> years{};
  std::array<TimeRange, 3> ranges{};
};

/// Year counts for a split of `n_years` whole years (cumulative floor of the
/// fractions). Throws DataError when a partition comes out empty.
std::array<std::size_t, 3> split_years(std::size_t n_years, const SplitSpec& spec);

Split split_series(const GriddedSeries& series, const SplitSpec& spec);

}  // namespace limcast::dataprep
