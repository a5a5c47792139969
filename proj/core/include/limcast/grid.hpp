#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace limcast {

/// Half-open range of monthly time indices [begin, end).
struct TimeRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const noexcept { return end - begin; }
  bool contains(std::size_t t) const noexcept { return t >= begin && t < end; }
};

/// Calendar month (1..12) of record `t` for a series starting in `start_month`.
constexpr int month_of(int start_month, std::size_t t) noexcept {
  return static_cast<int>((static_cast<std::size_t>(start_month - 1) + t) % 12) + 1;
}

/// Time-ordered stacked fields on a shared lat/lon grid.
///
/// Values are laid out [time][var][lat][lon]. Masked cells (mask == 0) hold
/// NaN and are ignored by every statistic. Longitudes use the 0..360 convention.
struct GriddedSeries {
  std::vector<double> values;
  std::vector<double> lat;
  std::vector<double> lon;
  int start_year = 1;
  int start_month = 1;
  std::vector<std::string> var_names;
  std::vector<std::uint8_t> mask;

  std::size_t n_var() const noexcept { return var_names.size(); }
  std::size_t n_lat() const noexcept { return lat.size(); }
  std::size_t n_lon() const noexcept { return lon.size(); }
  std::size_t n_cells() const noexcept { return lat.size() * lon.size(); }
  std::size_t frame_size() const noexcept { return n_var() * n_cells(); }
  std::size_t n_time() const noexcept { return frame_size() == 0 ? 0 : values.size() / frame_size(); }

  std::size_t index(std::size_t t, std::size_t v, std::size_t cell) const noexcept {
    return (t * n_var() + v) * n_cells() + cell;
  }
  double at(std::size_t t, std::size_t v, std::size_t cell) const noexcept { return values[index(t, v, cell)]; }
  double& at(std::size_t t, std::size_t v, std::size_t cell) noexcept { return values[index(t, v, cell)]; }

  bool valid(std::size_t cell) const noexcept { return mask[cell] != 0; }
  int month(std::size_t t) const noexcept { return month_of(start_month, t); }
  std::size_t var_index(const std::string& name) const;

  /// Unmasked flat cell ids (lat-major), ascending.
  std::vector<std::size_t> valid_cells() const;

  /// Throws DataError naming the first violated invariant.
  void validate() const;

  /// Copy of records [range.begin, range.end) with start year/month advanced.
  GriddedSeries slice(TimeRange range) const;

  /// Same grid and metadata, zero-filled (NaN on masked cells) with n_time records.
  GriddedSeries like(std::size_t n_time) const;

  bool same_grid(const GriddedSeries& other) const;
};

}  // namespace limcast
