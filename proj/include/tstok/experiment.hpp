#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "tstok/forecaster.hpp"
#include "tstok/io.hpp"
#include "tstok/metrics.hpp"
#include "tstok/synthetic.hpp"
#include "tstok/tasks.hpp"
#include "tstok/vqvae.hpp"

namespace tstok {

/// `reconstruct` trains and scores the tokenizer alone (train-tokenizer).
enum class Task { Reconstruct, Impute, Anomaly, Forecast, AblateCodebook, AblateRepresentation };

std::string to_string(Task t);
Task parse_task(const std::string& s);

struct ExperimentConfig {
  Task task = Task::Forecast;
  /// Used when data_paths is empty. Its seed is offset by each run seed.
  SyntheticSpec synthetic;
  /// CSV files, one example each, all with the same sensors and length.
  std::vector<std::string> data_paths;
  VqVaeConfig tokenizer;
  ForecasterConfig forecaster;
  double train_frac = 0.7;
  double val_frac = 0.1;
  /// Tokenizer training and evaluation window (forecasting uses the lookback).
  std::size_t window_length = 96;
  std::size_t stride = 16;
  std::vector<double> mask_ratios{0.125, 0.25, 0.375, 0.5};
  double anomaly_ratio = 0.02;
  ThresholdMode anomaly_mode = ThresholdMode::Global;
  std::size_t anomaly_window = 0;
  std::vector<std::size_t> horizons{96};
  std::vector<std::size_t> codebook_sizes{32, 256, 512};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::string output_dir = "runs";
  std::size_t threads = 1;
  /// Optional checkpoint evaluated instead of training a tokenizer (and forecaster).
  std::string checkpoint;

  void validate() const;
};

Json to_json(const ExperimentConfig& c);
/// Fields absent from `j` keep the values in `base`.
ExperimentConfig experiment_config_from_json(const Json& j, ExperimentConfig base = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

class OutputExists : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Writes `content` to `path`, refusing to replace an existing file unless `force`.
void write_output(const std::filesystem::path& path, const std::string& content, bool force);

struct ExperimentData {
  TimeSeriesDataset dataset;
  /// Uncorrupted series for anomaly training; equals dataset otherwise.
  TimeSeriesDataset clean;
  /// [E x T] anomaly labels, empty when unavailable.
  Tensor labels;
};

ExperimentData load_experiment_data(const ExperimentConfig& config, std::uint64_t seed);

struct SeedResult {
  std::uint64_t seed = 0;
  ResultTable table;
  Json extra = Json::object();
  /// File name -> content, written under seed-<n>/.
  std::vector<std::pair<std::string, std::string>> files;
};

/// Trains and evaluates one seed in memory.
SeedResult run_seed(const ExperimentConfig& config, std::uint64_t seed);

struct RunSummary {
  std::vector<SeedResult> seeds;
  Json merged;
  ResultTable means;
};

/// Runs every seed, writes per-seed artifacts under seed-<n>/ and the merged
/// results.json, results.csv and summary.txt in config.output_dir.
RunSummary run(const ExperimentConfig& config, bool force);

/// Merged results.json document: per cell the per-seed values, mean and sample std.
Json merge_results(const ExperimentConfig& config, const std::vector<SeedResult>& seeds);

struct CompareReport {
  ResultTable table;
  std::map<std::string, double> wins_with_ties;
  std::map<std::string, double> wins_strict;
  /// Per (setting, metric): one-sided p-value that A beats B.
  std::vector<std::tuple<std::string, std::string, double>> p_values;
  std::string text;
  std::string csv;
};

/// Compares the primary method (first listed, or `method_*`) of two merged results.
CompareReport compare(const Json& results_a, const Json& results_b, const std::string& method_a = "",
                      const std::string& method_b = "");
CompareReport compare_dirs(const std::filesystem::path& a, const std::filesystem::path& b,
                           const std::filesystem::path& out, bool force);

/// Scores a checkpoint on the test split of the configured data for `seed`:
/// reconstruction MSE, plus forecast metrics when it has a forecaster.
ResultTable evaluate_checkpoint(const Checkpoint& checkpoint, const ExperimentConfig& config,
                                std::uint64_t seed);

/// Loss history CSV: step,rec,vq,cmt,total.
std::string loss_history_csv(const std::vector<LossRecord>& history);
std::string loss_history_csv(const std::vector<ForecastLossRecord>& history);

}  // namespace tstok
