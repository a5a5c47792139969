#include "doctest.h"
#include "fixtures.hpp"

#include "limcast/dataprep.hpp"
#include "limcast/error.hpp"

#include <array>
#include <cmath>
#include <filesystem>
#include <numbers>

using namespace limcast;
using limcast::testing::make_grid;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "limcast_unit";
  std::filesystem::create_directories(dir);
  return dir / name;
}

double pooled_std(const GriddedSeries& g, std::size_t v) {
  double s = 0.0, s2 = 0.0;
  std::size_t n = 0;
  for (std::size_t t = 0; t < g.n_time(); ++t)
    for (std::size_t c = 0; c < g.n_cells(); ++c) {
      if (!g.valid(c)) continue;
      s += g.at(t, v, c);
      s2 += g.at(t, v, c) * g.at(t, v, c);
      ++n;
    }
  const double mu = s / static_cast<double>(n);
  return std::sqrt(s2 / static_cast<double>(n) - mu * mu);
}

}  // namespace

TEST_SUITE("dataprep") {

TEST_CASE("flat binary round trip keeps shape and values") {
  Rng rng(7);
  std::normal_distribution<double> n;
  auto g = make_grid(24, 2, 4, 4, [&](auto, auto, auto) { return n(rng); }, 3);
  testing::mask_cell(g, 5);
  const auto path = temp_path("roundtrip.limg");
  dataprep::write_grid(path, g, dataprep::GridFormat::flat_binary);
  const auto back = dataprep::ingest_grid(path, dataprep::GridFormat::flat_binary);
  CHECK(back.n_time() == 24);
  CHECK(back.n_var() == 2);
  CHECK(back.n_lat() == 4);
  CHECK(back.n_lon() == 4);
  CHECK(back.start_month == 3);
  CHECK(back.var_names == g.var_names);
  CHECK(back.mask == g.mask);
  for (std::size_t i = 0; i < g.values.size(); ++i) {
    if (std::isnan(g.values[i])) CHECK(std::isnan(back.values[i]));
    else CHECK(back.values[i] == g.values[i]);
  }
}

TEST_CASE("csv round trip") {
  auto g = make_grid(14, 2, 3, 2, [](auto t, auto v, auto c) { return 0.25 * t - 1.5 * v + 0.125 * c; }, 11);
  testing::mask_cell(g, 1);
  const auto path = temp_path("roundtrip.csv");
  dataprep::write_grid(path, g, dataprep::GridFormat::csv);
  const auto back = dataprep::ingest_grid(path, dataprep::GridFormat::csv);
  CHECK(back.n_time() == 14);
  CHECK(back.start_month == 11);
  CHECK(back.mask == g.mask);
  CHECK(back.at(13, 1, 4) == doctest::Approx(g.at(13, 1, 4)).epsilon(1e-15));
}

TEST_CASE("decreasing longitude is rejected with the field name") {
  auto g = make_grid(24, 1, 2, 3, [](auto, auto, auto) { return 0.0; });
  std::swap(g.lon[0], g.lon[2]);
  const auto bytes = dataprep::encode_grid(g);
  try {
    dataprep::decode_grid(bytes);
    FAIL("expected a coordinate-order error");
  } catch (const DataError& e) {
    CHECK(e.field() == "lon");
  }
}

TEST_CASE("declared length mismatch is rejected") {
  auto g = make_grid(24, 1, 2, 2, [](auto, auto, auto) { return 1.0; });
  auto bytes = dataprep::encode_grid(g);
  bytes.resize(bytes.size() - 8 * 4);  // drop one frame
  try {
    dataprep::decode_grid(bytes);
    FAIL("expected a length error");
  } catch (const DataError& e) {
    CHECK(e.field() == "n_time");
  }
}

TEST_CASE("detrend removes an exact line") {
  auto g = make_grid(60, 1, 2, 2, [](auto t, auto, auto) { return 0.01 * static_cast<double>(t) + 5.0; });
  const auto r = dataprep::detrend_linear(g);
  for (double x : r.series.values) CHECK(std::abs(x) < 1e-10);
  for (double s : r.slopes) CHECK(s == doctest::Approx(0.01).epsilon(1e-10));
}

TEST_CASE("detrend of a constant series has zero slope") {
  auto g = make_grid(30, 1, 1, 2, [](auto, auto, auto) { return 3.0; });
  const auto r = dataprep::detrend_linear(g);
  for (double s : r.slopes) CHECK(std::abs(s) < 1e-12);
  for (double x : r.series.values) CHECK(std::abs(x) < 1e-10);
}

TEST_CASE("detrend matches closed-form OLS on a seasonal signal") {
  const std::size_t n = 120;
  auto f = [](double t) { return std::sin(2.0 * std::numbers::pi * t / 12.0) + 0.02 * t; };
  auto g = make_grid(n, 1, 1, 1, [&](auto t, auto, auto) { return f(static_cast<double>(t)); });
  // Oracle: OLS with one offset per calendar month, slope = sum dt*dy / sum dt^2
  // over within-month deviations.
  std::array<double, 12> tm{}, ym{};
  for (std::size_t t = 0; t < n; ++t) {
    tm[t % 12] += static_cast<double>(t) / 10.0;
    ym[t % 12] += f(static_cast<double>(t)) / 10.0;
  }
  double sxy = 0, sxx = 0;
  for (std::size_t t = 0; t < n; ++t) {
    sxy += (t - tm[t % 12]) * (f(static_cast<double>(t)) - ym[t % 12]);
    sxx += (t - tm[t % 12]) * (t - tm[t % 12]);
  }
  const double slope = sxy / sxx;
  CHECK(slope == doctest::Approx(0.02).epsilon(1e-12));
  const auto r = dataprep::detrend_linear(g);
  CHECK(r.slopes[0] == doctest::Approx(slope).epsilon(1e-12));
  double mean = 0.0;
  for (std::size_t t = 0; t < n; ++t) mean += r.series.at(t, 0, 0) / n;
  for (std::size_t t = 0; t < n; ++t)
    CHECK(std::abs(r.series.at(t, 0, 0) - mean - std::sin(2.0 * std::numbers::pi * t / 12.0)) < 1e-8);
  const auto again = dataprep::detrend_linear(r.series);
  CHECK(std::abs(again.slopes[0]) < 1e-10);
}

TEST_CASE("climatology of a pure seasonal cycle leaves nothing") {
  auto g = make_grid(48, 2, 2, 2, [](auto t, auto v, auto c) { return std::cos(0.5 * (t % 12)) * (1.0 + v) + 0.1 * c; });
  const auto r = dataprep::remove_climatology(g, {0, 48});
  for (double x : r.series.values) CHECK(std::abs(x) < 1e-10);
}

TEST_CASE("climatology equals stratified monthly means of white noise") {
  Rng rng(11);
  std::normal_distribution<double> n;
  auto g = make_grid(120, 1, 2, 2, [&](auto, auto, auto) { return n(rng); }, 4);
  const auto r = dataprep::remove_climatology(g, {0, 120});
  for (int m = 1; m <= 12; ++m) {
    for (std::size_t c = 0; c < 4; ++c) {
      double s = 0;
      int k = 0;
      for (std::size_t t = 0; t < 120; ++t)
        if (g.month(t) == m) {
          s += g.at(t, 0, c);
          ++k;
        }
      CHECK(r.climatology.monthly_mean[(static_cast<std::size_t>(m - 1)) * 4 + c] == doctest::Approx(s / k).epsilon(1e-12));
    }
  }
}

TEST_CASE("training climatology applied to long independent test data averages to zero") {
  Rng rng(12);
  std::normal_distribution<double> n;
  const std::size_t train = 50 * 12, test = 500 * 12;
  auto g = make_grid(train + test, 1, 1, 1, [&](auto t, auto, auto) { return 2.0 * std::sin(0.5 * (t % 12)) + n(rng); });
  const auto r = dataprep::remove_climatology(g, {0, train});
  for (int m = 1; m <= 12; ++m) {
    double s = 0;
    int k = 0;
    for (std::size_t t = train; t < train + test; ++t)
      if (g.month(t) == m) {
        s += r.series.at(t, 0, 0);
        ++k;
      }
    // sigma of (test mean - train mean) is sqrt(1/500 + 1/50).
    CHECK(std::abs(s / k) < 3.0 * std::sqrt(1.0 / 500.0 + 1.0 / 50.0));
  }
}

TEST_CASE("climatology needs two years") {
  auto g = make_grid(30, 1, 1, 1, [](auto, auto, auto) { return 0.0; });
  CHECK_THROWS_AS(dataprep::remove_climatology(g, {0, 20}), DataError);
}

TEST_CASE("z-score normalisation") {
  Rng rng(3);
  std::normal_distribution<double> n;
  auto g = make_grid(200, 2, 3, 3, [&](auto, auto v, auto) { return (v == 0 ? 1.0 : 10.0) * n(rng); });
  dataprep::Climatology clim;
  const auto z = dataprep::zscore_normalize(g, clim, true);
  for (std::size_t v = 0; v < 2; ++v) {
    CHECK(pooled_std(z, v) == doctest::Approx(1.0).epsilon(1e-10));
    CHECK(clim.scale[v] == doctest::Approx(pooled_std(g, v)).epsilon(1e-10));
  }
  // fit=false divides by the stored scale exactly.
  const auto z2 = dataprep::zscore_normalize(g, clim, false);
  for (std::size_t i = 0; i < g.values.size(); ++i) CHECK(z2.values[i] == g.values[i] / clim.scale[i / 9 % 2]);
}

TEST_CASE("z-score records scale 2.5") {
  auto g = make_grid(100, 1, 1, 2, [](auto t, auto, auto c) { return (t + c) % 2 == 0 ? 2.5 : -2.5; });
  dataprep::Climatology clim;
  const auto z = dataprep::zscore_normalize(g, clim, true);
  CHECK(clim.scale[0] == doctest::Approx(2.5).epsilon(1e-12));
  CHECK(pooled_std(z, 0) == doctest::Approx(1.0).epsilon(1e-10));
}

TEST_CASE("zero variance is a degenerate scale") {
  auto g = make_grid(30, 1, 1, 1, [](auto, auto, auto) { return 0.0; });
  dataprep::Climatology clim;
  CHECK_THROWS_AS(dataprep::zscore_normalize(g, clim, true), DataError);
}

TEST_CASE("preprocessing chain is idempotent") {
  Rng rng(21);
  std::normal_distribution<double> n;
  auto g = make_grid(96, 2, 2, 3, [&](auto t, auto v, auto) { return 0.03 * t + std::sin(t * 0.5236) + (1 + v) * n(rng); });
  auto run = [](const GriddedSeries& s) {
    auto d = dataprep::detrend_linear(s);
    auto c = dataprep::remove_climatology(d.series, {0, s.n_time()});
    return dataprep::zscore_normalize(c.series, c.climatology, true);
  };
  const auto once = run(g);
  const auto twice = run(once);
  for (std::size_t i = 0; i < once.values.size(); ++i) CHECK(std::abs(once.values[i] - twice.values[i]) < 1e-8);
}

TEST_CASE("nino index basics") {
  GriddedSeries g;
  g.lat = {-7.5, -2.5, 2.5, 7.5};
  g.lon = {150, 170, 190, 220};
  g.var_names = {"ssta"};
  g.mask.assign(16, 1);
  g.values.assign(3 * 16, 1.0);
  auto idx = dataprep::nino_index(g, "ssta");
  for (double x : idx) CHECK(x == doctest::Approx(1.0).epsilon(1e-14));

  // +1 inside 5S-5N 160E-150W, -1 outside.
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) {
        const bool in = std::abs(g.lat[i]) <= 5 && g.lon[j] >= 160 && g.lon[j] <= 210;
        g.at(t, 0, i * 4 + j) = in ? 1.0 : -1.0;
      }
  idx = dataprep::nino_index(g, "ssta");
  for (double x : idx) CHECK(x == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("nino index equals brute-force weighted mean and is linear") {
  Rng rng(5);
  std::normal_distribution<double> n;
  auto f = make_grid(10, 1, 7, 12, [&](auto, auto, auto) { return n(rng); });
  auto h = make_grid(10, 1, 7, 12, [&](auto, auto, auto) { return n(rng); });
  testing::mask_cell(f, 40);
  testing::mask_cell(h, 40);
  const auto idx = dataprep::nino_index(f, "ssta");
  for (std::size_t t = 0; t < 10; ++t) {
    double num = 0, den = 0;
    for (std::size_t i = 0; i < f.n_lat(); ++i)
      for (std::size_t j = 0; j < f.n_lon(); ++j) {
        const std::size_t c = i * f.n_lon() + j;
        if (!f.valid(c) || f.lat[i] < -5 || f.lat[i] > 5 || f.lon[j] < 160 || f.lon[j] > 210) continue;
        const double w = std::cos(f.lat[i] * std::numbers::pi / 180.0);
        num += w * f.at(t, 0, c);
        den += w;
      }
    CHECK(idx[t] == doctest::Approx(num / den).epsilon(1e-12));
  }
  auto comb = f;
  for (std::size_t i = 0; i < comb.values.size(); ++i) comb.values[i] = 2.0 * f.values[i] - 0.5 * h.values[i];
  const auto ic = dataprep::nino_index(comb, "ssta");
  const auto ih = dataprep::nino_index(h, "ssta");
  for (std::size_t t = 0; t < 10; ++t) CHECK(ic[t] == doctest::Approx(2.0 * idx[t] - 0.5 * ih[t]).epsilon(1e-12));
}

TEST_CASE("region outside the grid is an error") {
  auto g = make_grid(2, 1, 3, 3, [](auto, auto, auto) { return 0.0; });
  CHECK_THROWS_AS(dataprep::nino_index(g, "ssta", {40, 50, 10, 20}), DataError);
}

TEST_CASE("split by whole years") {
  const auto a = dataprep::split_years(2000, {0.75, 0.15, 0.10});
  CHECK(a == std::array<std::size_t, 3>{1500, 300, 200});
  const auto b = dataprep::split_years(4, {0.5, 0.25, 0.25});
  CHECK(b == std::array<std::size_t, 3>{2, 1, 1});
  CHECK_THROWS_AS(dataprep::split_years(100, {0.995, 0.004, 0.001}), DataError);
  CHECK_THROWS_AS(dataprep::split_years(10, {0.5, 0.3, 0.3}), DataError);

  auto g = make_grid(20 * 12, 1, 1, 1, [](auto t, auto, auto) { return static_cast<double>(t); }, 1);
  const auto s = dataprep::split_series(g, {0.75, 0.15, 0.10});
  CHECK(s.train.n_time() == 15 * 12);
  CHECK(s.val.n_time() == 3 * 12);
  CHECK(s.test.n_time() == 2 * 12);
  CHECK(s.val.at(0, 0, 0) == 180.0);
  CHECK(s.test.start_year == 19);
  CHECK(s.train.n_time() + s.val.n_time() + s.test.n_time() == g.n_time());
}

}
