#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "tstok/data.hpp"
#include "tstok/experiment.hpp"
#include "tstok/io.hpp"
#include "tstok/synthetic.hpp"

namespace fs = std::filesystem;
using namespace tstok;

namespace {

struct Common {
  std::string config;
  std::vector<std::uint64_t> seeds;
  std::string out;
  std::size_t threads = 0;
  bool force = false;
  std::string checkpoint;
};

void add_common(CLI::App* app, Common& c, bool with_checkpoint) {
  app->add_option("--config", c.config, "Experiment config JSON")->check(CLI::ExistingFile);
  app->add_option("--seed", c.seeds, "Comma-separated seeds")->delimiter(',');
  app->add_option("--out", c.out, "Output directory");
  app->add_option("--threads", c.threads, "Seeds run in parallel")->check(CLI::PositiveNumber);
  app->add_flag("--force", c.force, "Overwrite existing outputs");
  if (with_checkpoint) app->add_option("--checkpoint", c.checkpoint, "Checkpoint JSON")->check(CLI::ExistingFile);
}

/// File values first, then flag overrides.
ExperimentConfig resolve(const Common& c, std::optional<Task> task) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_experiment_config(c.config);
  if (task) cfg.task = *task;
  if (!c.seeds.empty()) cfg.seeds = c.seeds;
  if (!c.out.empty()) cfg.output_dir = c.out;
  if (c.threads) cfg.threads = c.threads;
  if (!c.checkpoint.empty()) cfg.checkpoint = c.checkpoint;
  cfg.validate();
  return cfg;
}

void guard(const fs::path& p, bool force) {
  if (fs::exists(p) && !force) throw OutputExists("refusing to overwrite " + p.string() + " (use --force)");
}

void report(const RunSummary& s, const ExperimentConfig& cfg) {
  std::cout << s.means.render() << "wrote " << (fs::path(cfg.output_dir) / "results.json").string() << '\n';
}

void gen_data(const Common& c) {
  const ExperimentConfig cfg = resolve(c, std::nullopt);
  const fs::path out(cfg.output_dir);
  for (auto seed : cfg.seeds) {
    SyntheticSpec spec = cfg.synthetic;
    spec.seed += seed;
    const SyntheticData d = generate_synthetic(spec);
    const fs::path dir = out / ("seed-" + std::to_string(seed));
    fs::create_directories(dir);
    Json paths = Json::array();
    for (std::size_t e = 0; e < d.dataset.examples(); ++e) {
      const fs::path p = dir / ("example-" + std::to_string(e) + ".csv");
      guard(p, c.force);
      write_csv(d.dataset, e, p);
      paths.push_back(p.string());
    }
    if (!d.labels.empty()) {
      TimeSeriesDataset labels;
      labels.values = d.labels.reshaped({1, d.labels.dim(0), d.labels.dim(1)});
      for (std::size_t e = 0; e < d.labels.dim(0); ++e) labels.sensor_names.push_back("example-" + std::to_string(e));
      guard(dir / "labels.csv", c.force);
      write_csv(labels, 0, dir / "labels.csv");
    }
    write_output(dir / "spec.json", dump_json(Json{{"synthetic", to_json(spec)}, {"data_paths", paths}}), c.force);
    std::cout << "wrote " << d.dataset.examples() << " examples to " << dir.string() << '\n';
  }
}

void forecast_file(const Common& c, const std::string& input) {
  if (c.checkpoint.empty()) throw std::invalid_argument("forecast requires --checkpoint");
  const Checkpoint ck = load_checkpoint(c.checkpoint);
  if (!ck.forecaster) throw std::invalid_argument("checkpoint '" + c.checkpoint + "' has no forecaster section");
  const TimeSeriesDataset ds = load_csv(input);
  const std::size_t lookback = ck.forecaster->config().lookback, S = ds.sensors(), T = ds.steps();
  if (T < lookback) {
    throw std::invalid_argument("input has " + std::to_string(T) + " steps, forecaster needs " +
                                std::to_string(lookback));
  }
  Tensor x({S, lookback});
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t t = 0; t < lookback; ++t) x.at(s, t) = ds.values.at(0, s, T - lookback + t);
  const ForecastOutput y = forecast(*ck.forecaster, ck.tokenizer.get(), x);
  TimeSeriesDataset result;
  result.values = y.y.reshaped({1, S, y.y.dim(1)});
  result.sensor_names = ds.sensor_names;
  const fs::path out = fs::path(c.out.empty() ? "." : c.out) / "forecast.csv";
  guard(out, c.force);
  fs::create_directories(out.parent_path());
  write_csv(result, 0, out);
  std::cout << "wrote " << out.string() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Discrete time-series tokenizer: training, imputation, anomaly detection and forecasting"};
  app.require_subcommand(1);
  Common c;
  std::string input, kind = "codebook", results_a, results_b;

  auto* gen = app.add_subcommand("gen-data", "Write a synthetic dataset as per-example CSV files");
  auto* tok = app.add_subcommand("train-tokenizer", "Train the tokenizer and score held-out reconstruction");
  auto* imp = app.add_subcommand("impute", "Masked imputation against the mean-fill baseline");
  auto* det = app.add_subcommand("detect", "Reconstruction-error anomaly detection");
  auto* trf = app.add_subcommand("train-forecaster", "Train tokenizer and forecaster per horizon");
  auto* fct = app.add_subcommand("forecast", "Forecast the last lookback window of a CSV series");
  auto* abl = app.add_subcommand("ablate", "Codebook-size or tokens-vs-patches ablation");
  auto* cmp = app.add_subcommand("compare", "AvgWins and permutation tests between two result sets");
  auto* evl = app.add_subcommand("eval", "Evaluate a checkpoint on the configured data");
  for (auto* s : {gen, abl, cmp}) add_common(s, c, false);
  for (auto* s : {tok, imp, det, trf, fct, evl}) add_common(s, c, true);
  fct->add_option("--input", input, "CSV series (sensor columns)")->required()->check(CLI::ExistingFile);
  abl->add_option("--kind", kind, "codebook or representation")->check(CLI::IsMember({"codebook", "representation"}));
  cmp->add_option("a", results_a, "Results directory or results.json (A)")->required()->check(CLI::ExistingPath);
  cmp->add_option("b", results_b, "Results directory or results.json (B)")->required()->check(CLI::ExistingPath);

  CLI11_PARSE(app, argc, argv);

  try {
    auto run_task = [&](Task t) {
      const ExperimentConfig cfg = resolve(c, t);
      report(run(cfg, c.force), cfg);
    };
    if (gen->parsed()) gen_data(c);
    else if (tok->parsed()) run_task(Task::Reconstruct);
    else if (imp->parsed()) run_task(Task::Impute);
    else if (det->parsed()) run_task(Task::Anomaly);
    else if (trf->parsed()) run_task(Task::Forecast);
    else if (fct->parsed()) forecast_file(c, input);
    else if (abl->parsed()) run_task(kind == "codebook" ? Task::AblateCodebook : Task::AblateRepresentation);
    else if (cmp->parsed()) {
      const fs::path out(c.out.empty() ? "." : c.out);
      const CompareReport r = compare_dirs(results_a, results_b, out, c.force);
      std::cout << r.text;
    } else if (evl->parsed()) {
      if (c.checkpoint.empty()) throw std::invalid_argument("eval requires --checkpoint");
      const bool has_forecaster = load_checkpoint(c.checkpoint).forecaster != nullptr;
      run_task(has_forecaster ? Task::Forecast : Task::Reconstruct);
    }
  } catch (const std::exception& e) {
    std::cerr << "tstok: error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
