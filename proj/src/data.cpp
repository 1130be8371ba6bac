#include "spat/data.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

#include "spat/errors.hpp"

namespace spat {

namespace {

std::vector<std::string> split_line(const std::string& line, char delim) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, delim)) cells.push_back(cell);
  if (!line.empty() && line.back() == delim) cells.emplace_back();
  return cells;
}

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return "";
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::optional<double> parse_number(const std::string& raw) {
  const std::string s = trim(raw);
  if (s.empty()) return std::nullopt;
  double v = 0.0;
  const char* begin = s.data();
  const char* end = s.data() + s.size();
  if (*begin == '+') ++begin;
  auto [ptr, ec] = std::from_chars(begin, end, v);
  if (ec != std::errc() || ptr != end) return std::nullopt;
  return v;
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

double canonical(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

// Box-Muller; avoids implementation-defined std::normal_distribution output.
double gaussian(std::mt19937_64& rng) {
  constexpr double kTwoPi = 6.283185307179586476925;
  double u1 = canonical(rng);
  while (u1 <= 0.0) u1 = canonical(rng);
  const double u2 = canonical(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
}

}  // namespace

SeriesDataset parse_csv(std::istream& in, const CsvSchema& schema, const std::string& name) {
  SeriesDataset out;
  out.name = name;
  std::string line;
  std::size_t row = 0;  // 1-based physical line number
  std::vector<std::string> header;
  if (schema.header) {
    while (std::getline(in, line)) {
      ++row;
      if (!trim(line).empty()) break;
    }
    if (trim(line).empty()) throw ParseError("csv: empty file", row, 0);
    header = split_line(trim(line), schema.delimiter);
  }

  bool date_column = schema.date == DateColumn::present;
  bool decided = schema.date != DateColumn::automatic;
  if (!decided && !header.empty() && lower(trim(header[0])) == "date") {
    date_column = true;
    decided = true;
  }
  std::size_t width = 0;
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    const auto cells = split_line(trim(line), schema.delimiter);
    if (!decided) {
      date_column = !parse_number(cells[0]).has_value();
      decided = true;
    }
    const std::size_t first = date_column ? 1 : 0;
    if (width == 0) {
      if (!header.empty() && header.size() != cells.size()) {
        throw ParseError("csv: row " + std::to_string(row) + " has " +
                             std::to_string(cells.size()) + " cells, header has " +
                             std::to_string(header.size()),
                         row, 0);
      }
      width = cells.size();
      if (width <= first) throw ParseError("csv: no numeric columns", row, 0);
      out.channels = width - first;
    } else if (cells.size() != width) {
      throw ParseError("csv: ragged row " + std::to_string(row) + ": expected " +
                           std::to_string(width) + " cells, got " + std::to_string(cells.size()),
                       row, 0);
    }
    if (date_column) out.timestamps.push_back(trim(cells[0]));
    for (std::size_t c = first; c < cells.size(); ++c) {
      const auto v = parse_number(cells[c]);
      if (!v) {
        throw ParseError("csv: non-numeric cell '" + trim(cells[c]) + "' at row " +
                             std::to_string(row) + ", column " + std::to_string(c + 1),
                         row, c + 1);
      }
      out.values.push_back(*v);
    }
    ++out.rows;
  }
  if (out.rows == 0) throw ParseError("csv: no data rows", row, 0);
  const std::size_t first = date_column ? 1 : 0;
  if (!header.empty()) {
    for (std::size_t c = first; c < header.size(); ++c) out.columns.push_back(trim(header[c]));
  } else {
    for (std::size_t c = 0; c < out.channels; ++c) out.columns.push_back("c" + std::to_string(c));
  }
  return out;
}

SeriesDataset load_csv(const std::string& path, const CsvSchema& schema, const std::string& name) {
  std::ifstream in(path);
  if (!in) throw ParseError("csv: cannot open '" + path + "'", 0, 0);
  std::string label = name;
  if (label.empty()) {
    const auto slash = path.find_last_of('/');
    label = path.substr(slash == std::string::npos ? 0 : slash + 1);
    const auto dot = label.find_last_of('.');
    if (dot != std::string::npos && dot > 0) label = label.substr(0, dot);
  }
  return parse_csv(in, schema, label);
}

void write_csv(const std::string& path, const SeriesDataset& data) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  const bool dated = !data.timestamps.empty();
  if (dated) out << "date";
  for (std::size_t c = 0; c < data.channels; ++c) {
    if (dated || c) out << ',';
    out << (c < data.columns.size() ? data.columns[c] : "c" + std::to_string(c));
  }
  out << '\n' << std::setprecision(17);
  for (std::size_t r = 0; r < data.rows; ++r) {
    if (dated) out << data.timestamps[r];
    for (std::size_t c = 0; c < data.channels; ++c) {
      if (dated || c) out << ',';
      out << data.value(r, c);
    }
    out << '\n';
  }
}

DatasetSplit split(const SeriesDataset& data, const SplitSpec& spec, std::size_t lookback,
                   bool allow_empty_val) {
  DatasetSplit s;
  const std::size_t n = data.rows;
  if (spec.kind == SplitSpec::Kind::ratios) {
    for (double r : {spec.train_ratio, spec.val_ratio, spec.test_ratio}) {
      if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("split: ratios must lie in [0, 1]");
    }
    if (spec.train_ratio + spec.val_ratio + spec.test_ratio > 1.0 + 1e-9) {
      throw ConfigError("split: ratios sum above 1");
    }
    // The small epsilon keeps e.g. 0.7 * 100 from flooring to 69.
    auto rows_for = [n](double r) {
      return static_cast<std::size_t>(std::floor(static_cast<double>(n) * r + 1e-9));
    };
    s.train_rows = rows_for(spec.train_ratio);
    s.val_rows = rows_for(spec.val_ratio);
    s.test_rows = rows_for(spec.test_ratio);
  } else {
    s.train_rows = spec.train_rows;
    s.val_rows = spec.val_rows;
    s.test_rows = spec.test_rows;
    if (s.train_rows + s.val_rows + s.test_rows > n) {
      throw ConfigError("split: counts " + std::to_string(s.train_rows) + "+" +
                        std::to_string(s.val_rows) + "+" + std::to_string(s.test_rows) +
                        " exceed series length " + std::to_string(n));
    }
  }
  if (s.train_rows == 0) throw ConfigError("split: training segment is empty");
  if (s.val_rows == 0 && !allow_empty_val) {
    throw ConfigError("split: validation segment is empty while early stopping is enabled");
  }
  const std::size_t back = spec.overlap_lookback ? lookback : 0;
  const std::size_t val_begin = s.train_rows;
  const std::size_t test_begin = s.train_rows + s.val_rows;
  if (back > val_begin) {
    throw ConfigError("split: lookback " + std::to_string(lookback) +
                      " exceeds the training segment (" + std::to_string(val_begin) + " rows)");
  }
  s.train = {0, s.train_rows};
  s.val = {val_begin - back, test_begin};
  s.test = {test_begin - back, test_begin + s.test_rows};
  if (s.val_rows == 0) s.val = {val_begin, val_begin};

  const std::size_t c = data.channels;
  s.mean.assign(c, 0.0);
  s.stdev.assign(c, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mu = 0.0;
    for (std::size_t r = 0; r < s.train_rows; ++r) mu += data.value(r, ch);
    mu /= static_cast<double>(s.train_rows);
    double var = 0.0;
    for (std::size_t r = 0; r < s.train_rows; ++r) {
      const double d = data.value(r, ch) - mu;
      var += d * d;
    }
    var /= static_cast<double>(s.train_rows);
    s.mean[ch] = mu;
    s.stdev[ch] = std::max(std::sqrt(var), kStdFloor);
  }
  return s;
}

void WindowSpec::validate() const {
  if (lookback == 0) throw ConfigError("window.lookback must be >= 1");
  if (horizon == 0) throw ConfigError("window.horizon must be >= 1");
  if (stride == 0) throw ConfigError("window.stride must be >= 1");
}

std::size_t WindowSpec::count(std::size_t length) const {
  const std::size_t span = lookback + horizon;
  if (length < span) return 0;
  return (length - span) / stride + 1;
}

std::vector<double> standardize(const SeriesDataset& data, std::span<const double> mean,
                                std::span<const double> stdev) {
  if (mean.size() != data.channels || stdev.size() != data.channels) {
    throw ShapeError("standardize: statistics do not match channel count");
  }
  std::vector<double> out(data.values.size());
  for (std::size_t r = 0; r < data.rows; ++r)
    for (std::size_t c = 0; c < data.channels; ++c)
      out[r * data.channels + c] = (data.value(r, c) - mean[c]) / stdev[c];
  return out;
}

std::vector<double> destandardize(std::span<const double> values, std::size_t channels,
                                  std::span<const double> mean, std::span<const double> stdev) {
  if (channels == 0 || values.size() % channels != 0 || mean.size() != channels ||
      stdev.size() != channels) {
    throw ShapeError("destandardize: statistics do not match channel count");
  }
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::size_t c = i % channels;
    out[i] = values[i] * stdev[c] + mean[c];
  }
  return out;
}

WindowSet::WindowSet(std::shared_ptr<const std::vector<double>> standardized,
                     std::size_t channels, Region region, WindowSpec spec)
    : series_(std::move(standardized)), channels_(channels), region_(region), spec_(spec) {
  spec_.validate();
  if (region_.end < region_.begin || region_.end * channels_ > series_->size()) {
    throw ShapeError("WindowSet: region exceeds series");
  }
  count_ = spec_.count(region_.length());
}

void WindowSet::copy_input(std::size_t index, std::span<double> out) const {
  const std::size_t n = spec_.lookback * channels_;
  if (index >= count_ || out.size() != n) throw ShapeError("WindowSet: bad input request");
  std::copy_n(series_->data() + start_row(index) * channels_, n, out.data());
}

void WindowSet::copy_target(std::size_t index, std::span<double> out) const {
  const std::size_t n = spec_.horizon * channels_;
  if (index >= count_ || out.size() != n) throw ShapeError("WindowSet: bad target request");
  std::copy_n(series_->data() + (start_row(index) + spec_.lookback) * channels_, n, out.data());
}

WindowSet make_windows(std::shared_ptr<const std::vector<double>> standardized,
                       std::size_t channels, Region region, const WindowSpec& spec) {
  WindowSet set(std::move(standardized), channels, region, spec);
  if (set.empty()) {
    std::cerr << "warning: region of " << region.length() << " rows is shorter than lookback + "
              << "horizon (" << spec.lookback + spec.horizon << "); no windows produced\n";
  }
  return set;
}

PreparedData prepare(SeriesDataset dataset, const SplitSpec& spec, const WindowSpec& windows,
                     bool allow_empty_val) {
  windows.validate();
  PreparedData p;
  p.split = split(dataset, spec, windows.lookback, allow_empty_val);
  p.standardized = std::make_shared<const std::vector<double>>(
      standardize(dataset, p.split.mean, p.split.stdev));
  const std::size_t c = dataset.channels;
  p.train = make_windows(p.standardized, c, p.split.train, windows);
  if (p.split.val.length() > 0) p.val = make_windows(p.standardized, c, p.split.val, windows);
  p.test = make_windows(p.standardized, c, p.split.test, windows);
  p.dataset = std::move(dataset);
  return p;
}

std::vector<std::vector<std::size_t>> batch_indices(std::size_t count, std::size_t batch_size,
                                                    std::optional<std::uint64_t> shuffle_seed) {
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle_seed) {
    // Fisher-Yates with explicit draws so the order is identical across standard libraries.
    std::mt19937_64 rng(*shuffle_seed);
    for (std::size_t i = count; i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(rng() % i);
      std::swap(order[i - 1], order[j]);
    }
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < count; i += batch_size) {
    const std::size_t end = std::min(count, i + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

ForecastBatch gather(const WindowSet& windows, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ContractError("gather: empty batch");
  const std::size_t c = windows.channels();
  const std::size_t lx = windows.spec().lookback * c;
  const std::size_t ly = windows.spec().horizon * c;
  std::vector<double> x(indices.size() * lx);
  std::vector<double> y(indices.size() * ly);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    windows.copy_input(indices[i], std::span<double>(x).subspan(i * lx, lx));
    windows.copy_target(indices[i], std::span<double>(y).subspan(i * ly, ly));
  }
  return {Tensor::from({indices.size(), windows.spec().lookback, c}, std::move(x)),
          Tensor::from({indices.size(), windows.spec().horizon, c}, std::move(y))};
}

std::vector<ForecastBatch> make_batches(const WindowSet& windows, std::size_t batch_size,
                                        std::optional<std::uint64_t> shuffle_seed) {
  std::vector<ForecastBatch> out;
  for (const auto& idx : batch_indices(windows.size(), batch_size, shuffle_seed)) {
    out.push_back(gather(windows, idx));
  }
  return out;
}

SeriesDataset make_synthetic(const SyntheticSpec& spec, const std::string& name) {
  if (spec.channels == 0 || spec.length == 0) {
    throw ConfigError("synthetic: channels and length must be >= 1");
  }
  if (spec.periods.empty()) throw ConfigError("synthetic: at least one period is required");
  for (double p : spec.periods) {
    if (!(p > 0.0)) throw ConfigError("synthetic: periods must be positive");
  }
  if (!(spec.noise_std >= 0.0)) throw ConfigError("synthetic: noise_std must be >= 0");
  constexpr double kTwoPi = 6.283185307179586476925;
  std::mt19937_64 rng(spec.seed);
  const std::size_t k = spec.periods.size();
  std::vector<double> amp(spec.channels * k), phase(spec.channels * k), offset(spec.channels);
  for (std::size_t c = 0; c < spec.channels; ++c) {
    for (std::size_t j = 0; j < k; ++j) {
      amp[c * k + j] = 0.5 + canonical(rng);
      phase[c * k + j] = kTwoPi * canonical(rng);
    }
    offset[c] = 2.0 * canonical(rng) - 1.0;
  }
  SeriesDataset d;
  d.name = name;
  d.rows = spec.length;
  d.channels = spec.channels;
  d.values.resize(d.rows * d.channels);
  for (std::size_t c = 0; c < spec.channels; ++c) d.columns.push_back("c" + std::to_string(c));
  for (std::size_t t = 0; t < spec.length; ++t) {
    const double drift = spec.trend * static_cast<double>(t) / static_cast<double>(spec.length);
    for (std::size_t c = 0; c < spec.channels; ++c) {
      double v = offset[c] + drift;
      for (std::size_t j = 0; j < k; ++j) {
        v += amp[c * k + j] * std::sin(kTwoPi * static_cast<double>(t) / spec.periods[j] +
                                       phase[c * k + j] + spec.phase_shift);
      }
      v += spec.noise_std * gaussian(rng);
      d.values[t * d.channels + c] = v;
    }
  }
  return d;
}

}  // namespace spat
