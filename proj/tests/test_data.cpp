#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "spat/data.hpp"
#include "spat/errors.hpp"
#include "support.hpp"

using namespace spat;
using spat::test::TempDir;

namespace {

SeriesDataset ramp(std::size_t rows, std::size_t channels) {
  SeriesDataset d;
  d.rows = rows;
  d.channels = channels;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < channels; ++c) d.values.push_back(double(r) + 100.0 * double(c));
  for (std::size_t c = 0; c < channels; ++c) d.columns.push_back("c" + std::to_string(c));
  return d;
}

SplitSpec counts(std::size_t train, std::size_t val, std::size_t test) {
  SplitSpec s;
  s.kind = SplitSpec::Kind::counts;
  s.train_rows = train;
  s.val_rows = val;
  s.test_rows = test;
  return s;
}

}  // namespace

TEST(Csv, ParsesNumericTable) {
  std::istringstream in("a,b\n1,2\n3,4.5\n-1e3,0\n");
  const auto d = parse_csv(in);
  EXPECT_EQ(d.rows, 3u);
  EXPECT_EQ(d.channels, 2u);
  EXPECT_EQ(d.columns, (std::vector<std::string>{"a", "b"}));
  EXPECT_TRUE(d.timestamps.empty());
  EXPECT_EQ(d.values, (std::vector<double>{1, 2, 3, 4.5, -1000, 0}));
}

TEST(Csv, DetectsDateColumnInEttLayout) {
  TempDir dir("csv");
  spat::test::write_ett_like_csv(dir / "ETTh1.csv", 50, 1);
  const auto d = load_csv((dir / "ETTh1.csv").string());
  EXPECT_EQ(d.rows, 50u);
  EXPECT_EQ(d.channels, 7u);
  EXPECT_EQ(d.columns.back(), "OT");
  EXPECT_EQ(d.timestamps.size(), 50u);
  EXPECT_EQ(d.timestamps[0], "2016-01-01 00:00:00");
}

TEST(Csv, DateDetectedFromFirstCellWithoutDateHeader) {
  std::istringstream in("when,x\nmon,1\ntue,2\n");
  const auto d = parse_csv(in);
  EXPECT_EQ(d.channels, 1u);
  EXPECT_EQ(d.timestamps, (std::vector<std::string>{"mon", "tue"}));
}

TEST(Csv, NonNumericCellNamesRowAndColumn) {
  std::istringstream in("a,b\n1,2\n3,abc\n");
  try {
    parse_csv(in);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.row(), 3u);
    EXPECT_EQ(e.column(), 2u);
    EXPECT_NE(std::string(e.what()).find("row 3"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("abc"), std::string::npos);
  }
}

TEST(Csv, RejectsRaggedEmptyAndMissing) {
  std::istringstream ragged("a,b\n1,2\n3\n");
  EXPECT_THROW(parse_csv(ragged), ParseError);
  std::istringstream header_mismatch("a,b,c\n1,2\n");
  EXPECT_THROW(parse_csv(header_mismatch), ParseError);
  std::istringstream empty("");
  EXPECT_THROW(parse_csv(empty), ParseError);
  std::istringstream header_only("a,b\n");
  EXPECT_THROW(parse_csv(header_only), ParseError);
  EXPECT_THROW(load_csv("/nonexistent/definitely/missing.csv"), ParseError);
}

TEST(Csv, WriteThenLoadRoundTrips) {
  TempDir dir("csvrt");
  SeriesDataset d = ramp(5, 3);
  d.values[4] = 0.1 + 0.2;
  write_csv((dir / "x.csv").string(), d);
  const auto back = load_csv((dir / "x.csv").string());
  EXPECT_EQ(back.values, d.values);
  EXPECT_EQ(back.columns, d.columns);
}

TEST(Split, RatiosOverHundredRows) {
  SplitSpec s;
  s.overlap_lookback = false;
  const auto sp = split(ramp(100, 1), s, 4);
  EXPECT_EQ(sp.train_rows, 70u);
  EXPECT_EQ(sp.val_rows, 10u);
  EXPECT_EQ(sp.test_rows, 20u);
  EXPECT_EQ(sp.train.begin, 0u);
  EXPECT_EQ(sp.val.begin, 70u);
  EXPECT_EQ(sp.test.begin, 80u);
  EXPECT_EQ(sp.test.end, 100u);
}

TEST(Split, EttHourWindowCounts) {
  const SeriesDataset d = ramp(17420, 1);
  const WindowSpec w{336, 96, 1};
  const auto sp = split(d, counts(8640, 2880, 2880), w.lookback);
  EXPECT_EQ(w.count(sp.train.length()), 8209u);
  EXPECT_EQ(w.count(sp.val.length()), 2785u);
  EXPECT_EQ(w.count(sp.test.length()), 2785u);
}

TEST(Split, Errors) {
  SplitSpec no_val;
  no_val.train_ratio = 0.8;
  no_val.val_ratio = 0.0;
  EXPECT_THROW(split(ramp(100, 1), no_val, 4), ConfigError);
  EXPECT_NO_THROW(split(ramp(100, 1), no_val, 4, true));
  EXPECT_THROW(split(ramp(100, 1), counts(60, 30, 20), 4), ConfigError);
  EXPECT_THROW(split(ramp(100, 1), counts(3, 30, 20), 4), ConfigError);
  SplitSpec bad;
  bad.train_ratio = 0.9;
  bad.val_ratio = 0.2;
  EXPECT_THROW(split(ramp(100, 1), bad, 4), ConfigError);
}

TEST(Split, StatisticsUseTrainingRowsOnly) {
  SeriesDataset a = ramp(100, 2);
  SeriesDataset b = a;
  for (std::size_t r = 70; r < 100; ++r) b.values[r * 2] = 1e6;
  SplitSpec s;
  const auto sa = split(a, s, 8);
  const auto sb = split(b, s, 8);
  EXPECT_EQ(sa.mean, sb.mean);
  EXPECT_EQ(sa.stdev, sb.stdev);
  EXPECT_NEAR(sa.mean[0], 34.5, 1e-12);
  double var = 0.0;
  for (int r = 0; r < 70; ++r) var += (r - 34.5) * (r - 34.5);
  EXPECT_NEAR(sa.stdev[0], std::sqrt(var / 70.0), 1e-12);
}

TEST(Windows, TenRowRamp) {
  const SeriesDataset d = ramp(10, 1);
  auto series = std::make_shared<const std::vector<double>>(d.values);
  const WindowSet w(series, 1, {0, 10}, {4, 2, 1});
  ASSERT_EQ(w.size(), 5u);
  std::vector<double> x(4), y(2);
  w.copy_input(0, x);
  w.copy_target(0, y);
  EXPECT_EQ(x, (std::vector<double>{0, 1, 2, 3}));
  EXPECT_EQ(y, (std::vector<double>{4, 5}));
  w.copy_input(4, x);
  w.copy_target(4, y);
  EXPECT_EQ(x, (std::vector<double>{4, 5, 6, 7}));
  EXPECT_EQ(y, (std::vector<double>{8, 9}));
  EXPECT_THROW(w.copy_input(5, x), ShapeError);
}

TEST(Windows, CountMatchesEnumeration) {
  for (std::size_t len = 0; len < 40; ++len)
    for (std::size_t l = 1; l < 6; ++l)
      for (std::size_t t = 1; t < 5; ++t)
        for (std::size_t stride = 1; stride < 4; ++stride) {
          std::size_t n = 0;
          for (std::size_t start = 0; start + l + t <= len; start += stride) ++n;
          EXPECT_EQ((WindowSpec{l, t, stride}.count(len)), n);
        }
}

TEST(Windows, ShortRegionYieldsNone) {
  auto series = std::make_shared<const std::vector<double>>(ramp(5, 1).values);
  EXPECT_TRUE(make_windows(series, 1, {0, 5}, {4, 2, 1}).empty());
}

TEST(Windows, TargetsNeverCrossRegionBoundaries) {
  PreparedData p = prepare(ramp(300, 2), SplitSpec{}, {24, 8, 1});
  const auto& s = p.split;
  auto check = [&](const WindowSet& w, std::size_t target_begin, std::size_t target_end) {
    for (std::size_t i = 0; i < w.size(); ++i) {
      const std::size_t y0 = w.start_row(i) + w.spec().lookback;
      EXPECT_GE(y0, target_begin);
      EXPECT_LE(y0 + w.spec().horizon, target_end);
    }
  };
  check(p.train, 0, s.train_rows);
  check(p.val, s.train_rows, s.train_rows + s.val_rows);
  check(p.test, s.train_rows + s.val_rows, s.train_rows + s.val_rows + s.test_rows);
  // Training inputs and targets stay inside the training rows.
  EXPECT_LE(p.train.start_row(p.train.size() - 1) + 32, s.train_rows);
}

TEST(Standardize, RoundTrip) {
  SeriesDataset d;
  d.rows = 50;
  d.channels = 3;
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(4.0, 7.0);
  for (int i = 0; i < 150; ++i) d.values.push_back(n(rng));
  const auto sp = split(d, SplitSpec{}, 2);
  const auto z = standardize(d, sp.mean, sp.stdev);
  const auto back = destandardize(z, 3, sp.mean, sp.stdev);
  for (std::size_t i = 0; i < back.size(); ++i) EXPECT_NEAR(back[i], d.values[i], 1e-12);
  // Training rows end up with zero mean and unit variance.
  for (std::size_t c = 0; c < 3; ++c) {
    double mu = 0.0, var = 0.0;
    for (std::size_t r = 0; r < sp.train_rows; ++r) mu += z[r * 3 + c];
    mu /= sp.train_rows;
    for (std::size_t r = 0; r < sp.train_rows; ++r) var += (z[r * 3 + c] - mu) * (z[r * 3 + c] - mu);
    EXPECT_NEAR(mu, 0.0, 1e-12);
    EXPECT_NEAR(var / sp.train_rows, 1.0, 1e-12);
  }
}

TEST(Standardize, ConstantChannelIsFloored) {
  SeriesDataset d = ramp(20, 2);
  for (std::size_t r = 0; r < 20; ++r) d.values[r * 2 + 1] = 3.0;
  const auto sp = split(d, SplitSpec{}, 2);
  EXPECT_EQ(sp.stdev[1], kStdFloor);
  for (double v : standardize(d, sp.mean, sp.stdev)) EXPECT_TRUE(std::isfinite(v));
}

TEST(Batches, SizesAndOrder) {
  const auto b = batch_indices(10, 4, std::nullopt);
  ASSERT_EQ(b.size(), 3u);
  EXPECT_EQ(b[0].size(), 4u);
  EXPECT_EQ(b[1].size(), 4u);
  EXPECT_EQ(b[2].size(), 2u);
  std::vector<std::size_t> flat;
  for (const auto& x : b) flat.insert(flat.end(), x.begin(), x.end());
  std::vector<std::size_t> iota(10);
  std::iota(iota.begin(), iota.end(), 0);
  EXPECT_EQ(flat, iota);
  EXPECT_THROW(batch_indices(10, 0, std::nullopt), ConfigError);
}

TEST(Batches, ShuffleIsSeededPermutation) {
  const auto a = batch_indices(100, 8, 5);
  const auto b = batch_indices(100, 8, 5);
  const auto c = batch_indices(100, 8, 6);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  std::set<std::size_t> seen;
  for (const auto& x : a) seen.insert(x.begin(), x.end());
  EXPECT_EQ(seen.size(), 100u);
}

TEST(Batches, GatherMatchesWindows) {
  PreparedData p = prepare(ramp(200, 3), SplitSpec{}, {12, 4, 2});
  const std::vector<std::size_t> idx = {3, 0, 7};
  const auto batch = gather(p.train, idx);
  EXPECT_EQ(batch.inputs.shape(), (Shape{3, 12, 3}));
  EXPECT_EQ(batch.targets.shape(), (Shape{3, 4, 3}));
  std::vector<double> x(36), y(12);
  for (std::size_t i = 0; i < 3; ++i) {
    p.train.copy_input(idx[i], x);
    p.train.copy_target(idx[i], y);
    for (std::size_t k = 0; k < 36; ++k) EXPECT_EQ(batch.inputs.data()[i * 36 + k], x[k]);
    for (std::size_t k = 0; k < 12; ++k) EXPECT_EQ(batch.targets.data()[i * 12 + k], y[k]);
  }
  EXPECT_THROW(gather(p.train, std::vector<std::size_t>{}), ContractError);
}

TEST(Synthetic, DeterministicAndSeedSensitive) {
  SyntheticSpec s;
  s.channels = 3;
  s.length = 300;
  const auto a = make_synthetic(s);
  const auto b = make_synthetic(s);
  EXPECT_EQ(a.values, b.values);
  s.seed = 8;
  EXPECT_NE(make_synthetic(s).values, a.values);
  EXPECT_EQ(a.rows, 300u);
  EXPECT_EQ(a.channels, 3u);
  for (double v : a.values) EXPECT_TRUE(std::isfinite(v));
}

TEST(Synthetic, NoiselessSeriesIsPeriodic) {
  SyntheticSpec s;
  s.channels = 2;
  s.length = 200;
  s.periods = {10.0, 20.0};
  s.noise_std = 0.0;
  s.trend = 0.0;
  const auto d = make_synthetic(s);
  for (std::size_t t = 0; t + 20 < d.rows; ++t)
    for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(d.value(t, c), d.value(t + 20, c), 1e-9);
}

TEST(Synthetic, RejectsBadSpecs) {
  SyntheticSpec s;
  s.periods = {};
  EXPECT_THROW(make_synthetic(s), ConfigError);
  s.periods = {-1.0};
  EXPECT_THROW(make_synthetic(s), ConfigError);
  s.periods = {5.0};
  s.channels = 0;
  EXPECT_THROW(make_synthetic(s), ConfigError);
}
