#pragma once

// Time-series ingestion, chronological splits, per-channel standardization and
// sliding forecasting windows.

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spat/model.hpp"

namespace spat {

struct SeriesDataset {
  std::string name;
  std::vector<std::string> columns;     // channel names
  std::vector<std::string> timestamps;  // empty when the file has no date column
  std::size_t rows = 0;
  std::size_t channels = 0;
  std::vector<double> values;  // row-major [rows, channels]

  double value(std::size_t row, std::size_t channel) const {
    return values[row * channels + channel];
  }
};

enum class DateColumn { automatic, present, absent };

struct CsvSchema {
  bool header = true;
  // automatic: the first column is a date column when its header is "date"
  // (case-insensitive) or its first cell does not parse as a number.
  DateColumn date = DateColumn::automatic;
  char delimiter = ',';
};

SeriesDataset parse_csv(std::istream& in, const CsvSchema& schema = {},
                        const std::string& name = "");
// Throws ParseError (missing file, ragged rows, non-numeric cells, empty file).
SeriesDataset load_csv(const std::string& path, const CsvSchema& schema = {},
                       const std::string& name = "");
void write_csv(const std::string& path, const SeriesDataset& data);

// Half-open row range [begin, end).
struct Region {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t length() const { return end - begin; }
};

struct SplitSpec {
  enum class Kind { ratios, counts };
  Kind kind = Kind::ratios;
  double train_ratio = 0.7;
  double val_ratio = 0.1;
  double test_ratio = 0.2;
  std::size_t train_rows = 0;
  std::size_t val_rows = 0;
  std::size_t test_rows = 0;
  // Validation and test regions start `lookback` rows early so their first
  // window may look back into the preceding region (ETT border convention).
  bool overlap_lookback = true;

  bool operator==(const SplitSpec&) const = default;
};

struct DatasetSplit {
  Region train;
  Region val;
  Region test;
  std::size_t train_rows = 0;  // rows owned by each segment, before overlap
  std::size_t val_rows = 0;
  std::size_t test_rows = 0;
  std::vector<double> mean;  // per channel, training rows only
  std::vector<double> stdev;
};

inline constexpr double kStdFloor = 1e-8;

// Contiguous chronological segments. Empty validation is a ConfigError unless
// `allow_empty_val` (early stopping disabled).
DatasetSplit split(const SeriesDataset& data, const SplitSpec& spec, std::size_t lookback,
                   bool allow_empty_val = false);

struct WindowSpec {
  std::size_t lookback = 96;
  std::size_t horizon = 24;
  std::size_t stride = 1;

  void validate() const;
  // Number of windows in a region of `length` rows.
  std::size_t count(std::size_t length) const;

  bool operator==(const WindowSpec&) const = default;
};

// Z-scores every channel with the given statistics.
std::vector<double> standardize(const SeriesDataset& data, std::span<const double> mean,
                                std::span<const double> stdev);
std::vector<double> destandardize(std::span<const double> values, std::size_t channels,
                                  std::span<const double> mean, std::span<const double> stdev);

// Sliding windows over one region of a standardized series. Window i covers
// X = rows [begin + i*stride, +L) and Y = the following T rows.
class WindowSet {
 public:
  WindowSet() = default;
  WindowSet(std::shared_ptr<const std::vector<double>> standardized, std::size_t channels,
            Region region, WindowSpec spec);

  std::size_t size() const { return count_; }
  bool empty() const { return count_ == 0; }
  std::size_t channels() const { return channels_; }
  const WindowSpec& spec() const { return spec_; }
  Region region() const { return region_; }
  std::size_t start_row(std::size_t index) const {
    return region_.begin + index * spec_.stride;
  }

  void copy_input(std::size_t index, std::span<double> out) const;   // L*C values
  void copy_target(std::size_t index, std::span<double> out) const;  // T*C values

 private:
  std::shared_ptr<const std::vector<double>> series_;
  std::size_t channels_ = 0;
  Region region_;
  WindowSpec spec_;
  std::size_t count_ = 0;
};

// Windows for one region; warns on stderr and returns an empty set when the
// region is shorter than L + T.
WindowSet make_windows(std::shared_ptr<const std::vector<double>> standardized,
                       std::size_t channels, Region region, const WindowSpec& spec);

struct PreparedData {
  SeriesDataset dataset;
  DatasetSplit split;
  std::shared_ptr<const std::vector<double>> standardized;
  WindowSet train;
  WindowSet val;
  WindowSet test;
};

PreparedData prepare(SeriesDataset dataset, const SplitSpec& spec, const WindowSpec& windows,
                     bool allow_empty_val = false);

// Window index batches. With a seed the order is a deterministic shuffle;
// without one it is chronological. The last partial batch is kept.
std::vector<std::vector<std::size_t>> batch_indices(std::size_t count, std::size_t batch_size,
                                                    std::optional<std::uint64_t> shuffle_seed);

ForecastBatch gather(const WindowSet& windows, std::span<const std::size_t> indices);

std::vector<ForecastBatch> make_batches(const WindowSet& windows, std::size_t batch_size,
                                        std::optional<std::uint64_t> shuffle_seed = std::nullopt);

// Seeded mixture of sinusoids plus linear trend and Gaussian noise.
struct SyntheticSpec {
  std::size_t channels = 7;
  std::size_t length = 2000;
  std::vector<double> periods = {24.0, 168.0};
  double noise_std = 0.1;
  double trend = 0.5;  // total drift over the series, in amplitude units
  double phase_shift = 0.0;  // radians added to every component
  std::uint64_t seed = 7;

  bool operator==(const SyntheticSpec&) const = default;
};

SeriesDataset make_synthetic(const SyntheticSpec& spec, const std::string& name = "synthetic");

}  // namespace spat
