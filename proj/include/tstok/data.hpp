#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tstok/tensor.hpp"

namespace tstok {

/// Floor applied to per-row standard deviations before dividing.
inline constexpr double kStdFloor = 1e-5;

/// Multivariate series: values[E x S x T].
struct TimeSeriesDataset {
  Tensor values;
  std::vector<std::string> sensor_names;
  std::vector<std::string> example_ids;

  std::size_t examples() const { return values.dim(0); }
  std::size_t sensors() const { return values.dim(1); }
  std::size_t steps() const { return values.dim(2); }

  /// Throws if dimensions are empty, names mismatch, or any value is non-finite.
  void validate() const;
};

/// Flattened univariate rows: series[N x T], origin[i] = (example, sensor).
struct UnivariateBatch {
  Tensor series;
  std::vector<std::pair<std::size_t, std::size_t>> origin;

  std::size_t rows() const { return series.dim(0); }
  std::size_t steps() const { return series.dim(1); }
};

/// Per-row affine normalization parameters.
struct RevInState {
  std::vector<double> mean;
  std::vector<double> std;
};

/// observed(i, t) == false marks a missing entry.
struct MaskSpec {
  std::size_t rows = 0;
  std::size_t steps = 0;
  double ratio = 0.0;
  std::vector<std::uint8_t> observed_flags;

  bool observed(std::size_t i, std::size_t t) const { return observed_flags[i * steps + t] != 0; }
  std::size_t missing_in_row(std::size_t i) const;
  static MaskSpec all_observed(std::size_t rows, std::size_t steps);
};

/// Half-open index range [begin, end) along the time axis.
struct TimeRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t length() const { return end - begin; }
  bool operator==(const TimeRange&) const = default;
};

struct SplitSpec {
  TimeRange train;
  TimeRange val;
  TimeRange test;
  std::size_t window_length = 1;
  std::size_t stride = 1;

  void validate() const;
  /// Contiguous train/val/test ranges covering [0, steps) in the given proportions.
  static SplitSpec proportional(std::size_t steps, double train_frac, double val_frac,
                                std::size_t window_length, std::size_t stride);
};

struct WindowedSplits {
  TimeSeriesDataset train;
  TimeSeriesDataset val;
  TimeSeriesDataset test;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line, std::size_t column);
  std::size_t line() const { return line_; }
  std::size_t column() const { return column_; }

 private:
  std::size_t line_;
  std::size_t column_;
};

TimeSeriesDataset load_csv(const std::filesystem::path& path);
TimeSeriesDataset parse_csv(std::istream& in);
void write_csv(const TimeSeriesDataset& ds, std::size_t example, const std::filesystem::path& path);

std::size_t window_count(std::size_t range_length, std::size_t window, std::size_t stride);
TimeSeriesDataset window_range(const TimeSeriesDataset& ds, TimeRange range, std::size_t window,
                               std::size_t stride);
WindowedSplits make_windows(const TimeSeriesDataset& ds, const SplitSpec& spec);

/// Row e * S + s holds values[e, s, :].
UnivariateBatch flatten_sensors(const TimeSeriesDataset& ds);
TimeSeriesDataset unflatten_sensors(const UnivariateBatch& batch, std::size_t examples,
                                    std::size_t sensors);

/// Per-row mean and population std (floored at kStdFloor).
RevInState row_statistics(const Tensor& series);
std::pair<UnivariateBatch, RevInState> revin_normalize(const UnivariateBatch& batch);
/// (x - mean) / std using a precomputed state.
UnivariateBatch revin_apply(const UnivariateBatch& batch, const RevInState& state);
UnivariateBatch revin_denormalize(const UnivariateBatch& batch, const RevInState& state);

UnivariateBatch apply_mask(const UnivariateBatch& batch, const MaskSpec& mask, double fill);
MaskSpec sample_mask(std::size_t rows, std::size_t steps, double ratio, std::uint64_t seed);

/// Per-sensor z-score fitted on a training split and applied to every split.
struct GlobalNormalizer {
  std::vector<double> mean;
  std::vector<double> std;

  static GlobalNormalizer fit(const TimeSeriesDataset& train);
  TimeSeriesDataset apply(const TimeSeriesDataset& ds) const;
  TimeSeriesDataset invert(const TimeSeriesDataset& ds) const;
  /// Row-wise state for a flattened batch, looked up through batch.origin.
  RevInState row_state(const UnivariateBatch& batch) const;
};

}  // namespace tstok
