#include "tstok/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <mutex>
#include <thread>

namespace tstok {

std::string to_string(Task t) {
  switch (t) {
    case Task::Reconstruct: return "reconstruct";
    case Task::Impute: return "impute";
    case Task::Anomaly: return "anomaly";
    case Task::Forecast: return "forecast";
    case Task::AblateCodebook: return "ablate-codebook";
    case Task::AblateRepresentation: return "ablate-representation";
  }
  return "forecast";
}

Task parse_task(const std::string& s) {
  for (Task t : {Task::Reconstruct, Task::Impute, Task::Anomaly, Task::Forecast, Task::AblateCodebook,
                 Task::AblateRepresentation}) {
    if (to_string(t) == s) return t;
  }
  throw std::invalid_argument("unknown task '" + s +
                              "' (expected reconstruct, impute, anomaly, forecast, ablate-codebook "
                              "or ablate-representation)");
}

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("experiment config: " + m); };
  if (seeds.empty()) fail("seeds must not be empty");
  if (threads == 0) fail("threads must be >= 1");
  if (window_length == 0 || stride == 0) fail("window_length and stride must be positive");
  if (!(train_frac > 0.0 && val_frac >= 0.0 && train_frac + val_frac < 1.0)) {
    fail("need train_frac > 0, val_frac >= 0 and train_frac + val_frac < 1");
  }
  for (const auto& p : data_paths)
    if (!std::filesystem::exists(p)) fail("data file '" + p + "' does not exist");
  if (!checkpoint.empty() && !std::filesystem::exists(checkpoint)) {
    fail("checkpoint '" + checkpoint + "' does not exist");
  }
  if (data_paths.empty()) synthetic.validate();
  tokenizer.validate();
  forecaster.validate();
  if (task == Task::Impute && mask_ratios.empty()) fail("mask_ratios must not be empty");
  for (double r : mask_ratios)
    if (!(r >= 0.0 && r < 1.0)) fail("mask ratios must lie in [0, 1)");
  if (!(anomaly_ratio >= 0.0 && anomaly_ratio < 1.0)) fail("anomaly_ratio must lie in [0, 1)");
  if ((task == Task::Forecast || task == Task::AblateRepresentation) && horizons.empty()) {
    fail("horizons must not be empty");
  }
  if (task == Task::AblateCodebook && codebook_sizes.empty()) fail("codebook_sizes must not be empty");
  if (task == Task::Anomaly && anomaly_mode == ThresholdMode::PerWindow && anomaly_window == 0) {
    fail("per-window anomaly thresholding needs anomaly_window > 0");
  }
}

Json to_json(const ExperimentConfig& c) {
  Json data = Json::object();
  if (c.data_paths.empty()) data["synthetic"] = to_json(c.synthetic);
  else data["csv"] = c.data_paths;
  return Json{{"task", to_string(c.task)},
              {"data", std::move(data)},
              {"tokenizer", to_json(c.tokenizer)},
              {"forecaster", to_json(c.forecaster)},
              {"train_frac", c.train_frac},
              {"val_frac", c.val_frac},
              {"window_length", c.window_length},
              {"stride", c.stride},
              {"mask_ratios", c.mask_ratios},
              {"anomaly_ratio", c.anomaly_ratio},
              {"anomaly_mode", c.anomaly_mode == ThresholdMode::Global ? "global" : "per-window"},
              {"anomaly_window", c.anomaly_window},
              {"horizons", c.horizons},
              {"codebook_sizes", c.codebook_sizes},
              {"seeds", c.seeds},
              {"output_dir", c.output_dir},
              {"threads", c.threads},
              {"checkpoint", c.checkpoint}};
}

ExperimentConfig experiment_config_from_json(const Json& j, ExperimentConfig c) {
  auto get = [&](const char* key, auto& out) {
    if (j.contains(key)) out = j.at(key).get<std::decay_t<decltype(out)>>();
  };
  if (j.contains("task")) c.task = parse_task(j.at("task").get<std::string>());
  if (j.contains("data")) {
    const Json& d = j.at("data");
    if (d.contains("synthetic")) c.synthetic = synthetic_spec_from_json(d.at("synthetic"), c.synthetic);
    if (d.contains("csv")) c.data_paths = d.at("csv").get<std::vector<std::string>>();
  }
  if (j.contains("tokenizer")) c.tokenizer = vqvae_config_from_json(j.at("tokenizer"), c.tokenizer);
  if (j.contains("forecaster")) c.forecaster = forecaster_config_from_json(j.at("forecaster"), c.forecaster);
  get("train_frac", c.train_frac);
  get("val_frac", c.val_frac);
  get("window_length", c.window_length);
  get("stride", c.stride);
  get("mask_ratios", c.mask_ratios);
  get("anomaly_ratio", c.anomaly_ratio);
  if (j.contains("anomaly_mode")) {
    const auto m = j.at("anomaly_mode").get<std::string>();
    if (m == "global") c.anomaly_mode = ThresholdMode::Global;
    else if (m == "per-window") c.anomaly_mode = ThresholdMode::PerWindow;
    else throw std::invalid_argument("anomaly_mode must be global or per-window");
  }
  get("anomaly_window", c.anomaly_window);
  get("horizons", c.horizons);
  get("codebook_sizes", c.codebook_sizes);
  get("seeds", c.seeds);
  get("output_dir", c.output_dir);
  get("threads", c.threads);
  get("checkpoint", c.checkpoint);
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  return experiment_config_from_json(read_json_file(path));
}

void write_output(const std::filesystem::path& path, const std::string& content, bool force) {
  if (std::filesystem::exists(path) && !force) {
    throw OutputExists("refusing to overwrite " + path.string() + " (use --force)");
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << content;
}

ExperimentData load_experiment_data(const ExperimentConfig& config, std::uint64_t seed) {
  ExperimentData d;
  if (config.data_paths.empty()) {
    SyntheticSpec spec = config.synthetic;
    spec.seed += seed;
    SyntheticData s = generate_synthetic(spec);
    d.dataset = std::move(s.dataset);
    d.clean = s.clean.values.empty() ? d.dataset : std::move(s.clean);
    d.labels = std::move(s.labels);
    return d;
  }
  std::vector<TimeSeriesDataset> parts;
  for (const auto& p : config.data_paths) parts.push_back(load_csv(p));
  const auto& first = parts.front();
  d.dataset.values = Tensor({parts.size(), first.sensors(), first.steps()});
  d.dataset.sensor_names = first.sensor_names;
  for (std::size_t e = 0; e < parts.size(); ++e) {
    if (parts[e].sensor_names != first.sensor_names || parts[e].steps() != first.steps()) {
      throw std::invalid_argument("data file '" + config.data_paths[e] +
                                  "' does not match the sensors and length of the first file");
    }
    std::copy(parts[e].values.data().begin(), parts[e].values.data().end(),
              d.dataset.values.data().begin() + static_cast<std::ptrdiff_t>(e * first.values.size()));
    d.dataset.example_ids.push_back(std::filesystem::path(config.data_paths[e]).stem().string());
  }
  d.dataset.validate();
  d.clean = d.dataset;
  return d;
}

namespace {

struct Prepared {
  TimeSeriesDataset normed;
  TimeSeriesDataset clean_normed;
  SplitSpec split;
  Tensor labels;
};

Prepared prepare(const ExperimentConfig& config, std::uint64_t seed) {
  ExperimentData data = load_experiment_data(config, seed);
  Prepared p;
  p.split = SplitSpec::proportional(data.dataset.steps(), config.train_frac, config.val_frac,
                                    config.window_length, config.stride);
  const auto train = window_range(data.clean, p.split.train, p.split.train.length(), 1);
  const GlobalNormalizer norm = GlobalNormalizer::fit(train);
  p.normed = norm.apply(data.dataset);
  p.clean_normed = norm.apply(data.clean);
  p.labels = std::move(data.labels);
  return p;
}

Tensor window_rows(const TimeSeriesDataset& ds, TimeRange range, std::size_t window, std::size_t stride) {
  return flatten_sensors(window_range(ds, range, window, stride)).series;
}

/// Windows of lookback + horizon whose horizon lies inside `range`.
Tensor forecast_rows(const TimeSeriesDataset& ds, TimeRange range, std::size_t lookback,
                     std::size_t horizon, std::size_t stride) {
  const TimeRange extended{range.begin >= lookback ? range.begin - lookback : 0, range.end};
  return window_rows(ds, extended, lookback + horizon, stride);
}

double eval_reconstruction(const VqVae& model, const Prepared& p, const ExperimentConfig& config) {
  const std::size_t w = config.window_length - config.window_length % model.config().compression;
  return reconstruction_mse(model, window_rows(p.normed, p.split.test, w, config.stride),
                            model.config().instance_norm);
}

struct ForecastScores {
  double mse = 0.0, mae = 0.0, naive_mse = 0.0, naive_mae = 0.0;
};

ForecastScores eval_forecast(const Forecaster& fc, const VqVae& tok, const Prepared& p,
                             const ExperimentConfig& config) {
  const auto& c = fc.config();
  const Tensor rows = forecast_rows(p.normed, p.split.test, c.lookback, c.horizon, config.stride);
  const auto [x, y] = split_windows(rows, c.lookback);
  const ForecastOutput out = forecast(fc, &tok, x);
  const Tensor naive = last_value_forecast(x, c.horizon);
  return {mse(out.y.data(), y.data()), mae(out.y.data(), y.data()), mse(naive.data(), y.data()),
          mae(naive.data(), y.data())};
}

std::string hex(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

std::string percent(double r) {
  std::ostringstream os;
  os << r * 100.0 << '%';
  return os.str();
}

VqVae train_tokenizer(VqVaeConfig tc, const Tensor& rows,
                      SeedResult& r, const std::string& suffix, const std::vector<double>* mask_ratios = nullptr) {
  VqVae model(tc);
  const auto history = mask_ratios ? train_imputing(model, rows, *mask_ratios) : train(model, rows);
  r.files.emplace_back("loss_history" + suffix + ".csv", loss_history_csv(history));
  r.files.emplace_back("tokenizer" + suffix + ".json", dump_json_compact(checkpoint_json(model)));
  if (!history.empty()) r.extra["final_tokenizer_loss" + suffix] = history.back().total;
  return model;
}

std::unique_ptr<VqVae> tokenizer_for(const ExperimentConfig& config, const Prepared& p,
                                     std::uint64_t seed, SeedResult& r, std::size_t window,
                                     const std::vector<double>* mask_ratios = nullptr,
                                     bool clean = false) {
  if (!config.checkpoint.empty()) return std::move(load_checkpoint(config.checkpoint).tokenizer);
  VqVaeConfig tc = config.tokenizer;
  tc.seed = seed;
  const Tensor rows = window_rows(clean ? p.clean_normed : p.normed, p.split.train, window, config.stride);
  return std::make_unique<VqVae>(train_tokenizer(tc, rows, r, "", mask_ratios));
}

void add_forecast_rows(SeedResult& r, const std::string& method, std::size_t horizon,
                       const ForecastScores& s, bool with_baseline) {
  const std::string setting = "H=" + std::to_string(horizon);
  r.table.add({method, setting, "mse", s.mse, true});
  r.table.add({method, setting, "mae", s.mae, true});
  if (with_baseline) {
    r.table.add({"last-value", setting, "mse", s.naive_mse, true});
    r.table.add({"last-value", setting, "mae", s.naive_mae, true});
  }
}

ForecasterConfig forecaster_for(const ExperimentConfig& config, std::uint64_t seed, std::size_t horizon) {
  ForecasterConfig fc = config.forecaster;
  fc.seed = seed;
  fc.horizon = horizon;
  return fc;
}

void run_forecast(const ExperimentConfig& config, const Prepared& p, std::uint64_t seed, SeedResult& r) {
  if (!config.checkpoint.empty()) {
    Checkpoint ck = load_checkpoint(config.checkpoint);
    if (ck.forecaster) {
      add_forecast_rows(r, "tstok", ck.forecaster->config().horizon,
                        eval_forecast(*ck.forecaster, *ck.tokenizer, p, config), true);
      return;
    }
  }
  const auto tok = tokenizer_for(config, p, seed, r, config.forecaster.lookback);
  for (std::size_t h : config.horizons) {
    Forecaster fc(forecaster_for(config, seed, h), tok->code_dim(), tok->config().compression);
    const Tensor rows = forecast_rows(p.normed, p.split.train, fc.config().lookback, h, config.stride);
    const auto history = train_forecaster(fc, tok.get(), rows);
    const std::string tag = "_H" + std::to_string(h);
    r.files.emplace_back("forecaster_loss_history" + tag + ".csv", loss_history_csv(history));
    r.files.emplace_back("forecaster" + tag + ".json", dump_json_compact(checkpoint_json(*tok, &fc)));
    add_forecast_rows(r, "tstok", h, eval_forecast(fc, *tok, p, config), true);
  }
}

void run_representation_ablation(const ExperimentConfig& config, const Prepared& p, std::uint64_t seed,
                                 SeedResult& r) {
  const auto tok = tokenizer_for(config, p, seed, r, config.forecaster.lookback);
  Json parity = Json::object();
  for (std::size_t h : config.horizons) {
    Json hashes = Json::object();
    std::vector<std::uint64_t> seen;
    for (Representation rep : {Representation::Tokens, Representation::Patches}) {
      ForecasterConfig fcfg = forecaster_for(config, seed, h);
      fcfg.representation = rep;
      Forecaster fc(fcfg, tok->code_dim(), tok->config().compression);
      const std::uint64_t init = nn::hash_parameters(fc.downstream_parameters());
      hashes[to_string(rep)] = hex(init);
      seen.push_back(init);
      const Tensor rows = forecast_rows(p.normed, p.split.train, fcfg.lookback, h, config.stride);
      const auto history = train_forecaster(fc, tok.get(), rows);
      r.files.emplace_back("forecaster_loss_history_" + to_string(rep) + "_H" + std::to_string(h) + ".csv",
                           loss_history_csv(history));
      add_forecast_rows(r, to_string(rep), h, eval_forecast(fc, *tok, p, config), false);
    }
    hashes["identical"] = seen[0] == seen[1];
    parity["H=" + std::to_string(h)] = std::move(hashes);
  }
  r.extra["downstream_init_hash"] = std::move(parity);
}

void run_impute(const ExperimentConfig& config, const Prepared& p, std::uint64_t seed, SeedResult& r) {
  const auto tok = tokenizer_for(config, p, seed, r, config.window_length, &config.mask_ratios);
  const std::size_t w = config.window_length - config.window_length % tok->config().compression;
  UnivariateBatch test = flatten_sensors(window_range(p.normed, p.split.test, w, config.stride));
  for (std::size_t i = 0; i < config.mask_ratios.size(); ++i) {
    const double ratio = config.mask_ratios[i];
    const MaskSpec mask = sample_mask(test.rows(), test.steps(), ratio, seed * 1000003ULL + i);
    const auto model = score_imputation(test.series, impute(*tok, test, mask).filled, mask);
    const auto base = score_imputation(test.series, mean_fill(test, mask), mask);
    const std::string setting = "mask=" + percent(ratio);
    for (const auto& [method, s] : {std::pair{std::string("tstok"), model}, std::pair{std::string("mean-fill"), base}}) {
      r.table.add({method, setting, "mse", s.mse_masked, true});
      r.table.add({method, setting, "mae", s.mae_masked, true});
      r.table.add({method, setting, "mse_all", s.mse_all, true});
      r.table.add({method, setting, "mae_all", s.mae_all, true});
    }
  }
}

void run_anomaly(const ExperimentConfig& config, const Prepared& p, std::uint64_t seed, SeedResult& r) {
  if (p.labels.empty()) {
    throw std::invalid_argument("anomaly task needs labeled data (synthetic kind 'spiked')");
  }
  const auto tok = tokenizer_for(config, p, seed, r, config.window_length, nullptr, true);
  const std::size_t f = tok->config().compression;
  const TimeRange test = p.split.test;
  const std::size_t len = test.length() - test.length() % f;
  if (len == 0) throw std::invalid_argument("anomaly test range is shorter than the compression factor");
  AnomalyOptions opt;
  opt.ratio = config.anomaly_ratio;
  opt.mode = config.anomaly_mode;
  opt.window = config.anomaly_window;
  Labels pred, truth;
  std::vector<double> scores;
  const std::size_t S = p.normed.sensors();
  for (std::size_t e = 0; e < p.normed.examples(); ++e) {
    Tensor series({S, len});
    for (std::size_t s = 0; s < S; ++s)
      for (std::size_t t = 0; t < len; ++t) series.at(s, t) = p.normed.values.at(e, s, test.begin + t);
    const auto res = detect_anomalies(*tok, series, opt);
    pred.insert(pred.end(), res.flags.begin(), res.flags.end());
    scores.insert(scores.end(), res.scores.begin(), res.scores.end());
    for (std::size_t t = 0; t < len; ++t) truth.push_back(p.labels.at(e, test.begin + t) != 0.0);
  }
  // Global mode thresholds the pooled test set.
  if (opt.mode == ThresholdMode::Global) pred = top_fraction(scores, opt.ratio);
  const auto adj = precision_recall_f1(pred, truth, true);
  const auto raw = precision_recall_f1(pred, truth, false);
  const std::string setting = "A=" + percent(config.anomaly_ratio);
  r.table.add({"tstok", setting, "precision", adj.precision, false});
  r.table.add({"tstok", setting, "recall", adj.recall, false});
  r.table.add({"tstok", setting, "f1_adjusted", adj.f1, false});
  r.table.add({"tstok", setting, "f1", raw.f1, false});
}

void run_codebook_ablation(const ExperimentConfig& config, const Prepared& p, std::uint64_t seed, SeedResult& r) {
  const Tensor rows = window_rows(p.normed, p.split.train, config.window_length, config.stride);
  for (std::size_t k : config.codebook_sizes) {
    VqVaeConfig tc = config.tokenizer;
    tc.seed = seed;
    tc.codebook_size = k;
    const VqVae model = train_tokenizer(tc, rows, r, "_K" + std::to_string(k));
    r.table.add({"K=" + std::to_string(k), "reconstruction", "mse", eval_reconstruction(model, p, config), true});
  }
}

}  // namespace

SeedResult run_seed(const ExperimentConfig& config, std::uint64_t seed) {
  config.validate();
  SeedResult r;
  r.seed = seed;
  const Prepared p = prepare(config, seed);
  switch (config.task) {
    case Task::Reconstruct: {
      const auto tok = tokenizer_for(config, p, seed, r, config.window_length);
      r.table.add({"tstok", "reconstruction", "mse", eval_reconstruction(*tok, p, config), true});
      break;
    }
    case Task::Impute: run_impute(config, p, seed, r); break;
    case Task::Anomaly: run_anomaly(config, p, seed, r); break;
    case Task::Forecast: run_forecast(config, p, seed, r); break;
    case Task::AblateCodebook: run_codebook_ablation(config, p, seed, r); break;
    case Task::AblateRepresentation: run_representation_ablation(config, p, seed, r); break;
  }
  return r;
}

namespace {

Json rows_json(const ResultTable& t) {
  Json rows = Json::array();
  for (const auto& row : t.rows()) {
    rows.push_back(Json{{"method", row.method},
                        {"setting", row.setting},
                        {"metric", row.metric},
                        {"value", row.value},
                        {"direction", row.lower_is_better ? "lower" : "higher"}});
  }
  return rows;
}

std::string table_csv(const ResultTable& t) {
  std::ostringstream os;
  t.write_csv(os);
  return os.str();
}

}  // namespace

Json merge_results(const ExperimentConfig& config, const std::vector<SeedResult>& seeds) {
  Json cells = Json::array();
  const ResultTable& first = seeds.front().table;
  for (const auto& row : first.rows()) {
    std::vector<double> values;
    for (const auto& s : seeds) {
      const auto* hit = s.table.find(row.method, row.setting, row.metric);
      if (!hit) throw std::runtime_error("seed " + std::to_string(s.seed) + " lacks cell " + row.method);
      values.push_back(hit->value);
    }
    const double n = static_cast<double>(values.size());
    const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
    double var = 0.0;
    for (double v : values) var += (v - mean) * (v - mean);
    const double sd = values.size() > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
    cells.push_back(Json{{"method", row.method},
                         {"setting", row.setting},
                         {"metric", row.metric},
                         {"direction", row.lower_is_better ? "lower" : "higher"},
                         {"values", values},
                         {"mean", mean},
                         {"std", sd}});
  }
  std::vector<std::uint64_t> seed_list;
  for (const auto& s : seeds) seed_list.push_back(s.seed);
  return Json{{"task", to_string(config.task)}, {"seeds", seed_list}, {"cells", std::move(cells)}};
}

namespace {

ResultTable means_table(const Json& merged) {
  ResultTable t;
  for (const auto& c : merged.at("cells")) {
    t.add({c.at("method"), c.at("setting"), c.at("metric"), c.at("mean").get<double>(),
           c.at("direction") == "lower"});
  }
  return t;
}

std::string summary_text(const Json& merged, const ResultTable& means) {
  std::ostringstream os;
  os << "task: " << merged.at("task").get<std::string>() << "  seeds: " << merged.at("seeds").dump() << "\n\n";
  for (const auto& c : merged.at("cells")) {
    os << std::left << std::setw(14) << c.at("method").get<std::string>() << std::setw(16)
       << c.at("setting").get<std::string>() << std::setw(14) << c.at("metric").get<std::string>()
       << std::setprecision(6) << c.at("mean").get<double>() << " +- " << c.at("std").get<double>() << '\n';
  }
  os << '\n' << means.render();
  return os.str();
}

}  // namespace

RunSummary run(const ExperimentConfig& config, bool force) {
  config.validate();
  const std::filesystem::path out(config.output_dir);
  for (const char* name : {"results.json", "results.csv", "summary.txt"}) {
    if (std::filesystem::exists(out / name) && !force) {
      throw OutputExists("refusing to overwrite " + (out / name).string() + " (use --force)");
    }
  }
  for (auto s : config.seeds) {
    const auto dir = out / ("seed-" + std::to_string(s));
    if (std::filesystem::exists(dir) && !std::filesystem::is_empty(dir) && !force) {
      throw OutputExists("refusing to overwrite " + dir.string() + " (use --force)");
    }
  }

  RunSummary summary;
  summary.seeds.resize(config.seeds.size());
  std::vector<std::exception_ptr> errors(config.seeds.size());
  std::size_t next = 0;
  std::mutex lock;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard<std::mutex> g(lock);
        if (next >= config.seeds.size()) return;
        i = next++;
      }
      try {
        summary.seeds[i] = run_seed(config, config.seeds[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n_threads = std::min(config.threads, config.seeds.size());
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  const Json cfg = to_json(config);
  for (const auto& s : summary.seeds) {
    const auto dir = out / ("seed-" + std::to_string(s.seed));
    Json result{{"task", to_string(config.task)},
                {"seed", s.seed},
                {"config", cfg},
                {"rows", rows_json(s.table)},
                {"extra", s.extra}};
    write_output(dir / "results.json", dump_json(result), force);
    write_output(dir / "results.csv", table_csv(s.table), force);
    for (const auto& [name, content] : s.files) write_output(dir / name, content, force);
  }
  summary.merged = merge_results(config, summary.seeds);
  summary.means = means_table(summary.merged);
  write_output(out / "results.json", dump_json(summary.merged), force);
  write_output(out / "results.csv", table_csv(summary.means), force);
  write_output(out / "summary.txt", summary_text(summary.merged, summary.means), force);
  return summary;
}

CompareReport compare(const Json& a, const Json& b, const std::string& method_a, const std::string& method_b) {
  auto primary = [](const Json& r, const std::string& requested) {
    if (!requested.empty()) return requested;
    if (r.at("cells").empty()) throw std::invalid_argument("results contain no cells");
    return r.at("cells")[0].at("method").get<std::string>();
  };
  const std::string ma = primary(a, method_a), mb = primary(b, method_b);
  auto cells_of = [](const Json& r, const std::string& method) {
    std::vector<Json> out;
    for (const auto& c : r.at("cells"))
      if (c.at("method") == method) out.push_back(c);
    if (out.empty()) throw std::invalid_argument("no cells for method '" + method + "'");
    return out;
  };
  const auto ca = cells_of(a, ma), cb = cells_of(b, mb);
  auto find = [](const std::vector<Json>& cells, const Json& key) -> const Json* {
    for (const auto& c : cells)
      if (c.at("setting") == key.at("setting") && c.at("metric") == key.at("metric")) return &c;
    return nullptr;
  };
  std::vector<std::string> missing;
  for (const auto& c : ca)
    if (!find(cb, c)) missing.push_back("B lacks (" + c.at("setting").get<std::string>() + ", " + c.at("metric").get<std::string>() + ")");
  for (const auto& c : cb)
    if (!find(ca, c)) missing.push_back("A lacks (" + c.at("setting").get<std::string>() + ", " + c.at("metric").get<std::string>() + ")");
  if (!missing.empty()) {
    std::string msg = "misaligned results:";
    for (const auto& m : missing) msg += "\n  " + m;
    throw std::invalid_argument(msg);
  }
  const bool paired = a.at("seeds") == b.at("seeds");
  const std::string la = ma == mb ? "A" : ma, lb = ma == mb ? "B" : mb;

  CompareReport rep;
  std::ostringstream csv;
  csv << "setting,metric,direction,mean_a,mean_b,p_value\n" << std::setprecision(17);
  for (const auto& c : ca) {
    const Json& d = *find(cb, c);
    const bool lower = c.at("direction") == "lower";
    const std::string setting = c.at("setting"), metric = c.at("metric");
    rep.table.add({la, setting, metric, c.at("mean").get<double>(), lower});
    rep.table.add({lb, setting, metric, d.at("mean").get<double>(), lower});
    auto va = c.at("values").get<std::vector<double>>(), vb = d.at("values").get<std::vector<double>>();
    if (!lower) {
      for (auto& v : va) v = -v;
      for (auto& v : vb) v = -v;
    }
    PermutationTestOptions opt;
    opt.paired = paired;
    const double p = permutation_test(va, vb, opt);
    rep.p_values.emplace_back(setting, metric, p);
    csv << setting << ',' << metric << ',' << (lower ? "lower" : "higher") << ','
        << c.at("mean").get<double>() << ',' << d.at("mean").get<double>() << ',' << p << '\n';
  }
  rep.wins_with_ties = avg_wins(rep.table, true);
  rep.wins_strict = avg_wins(rep.table, false);
  std::ostringstream text;
  text << "A = " << ma << ", B = " << mb << (paired ? " (paired by seed)" : " (unpaired)") << "\n\n"
       << rep.table.render() << "\none-sided permutation p-values (A better than B):\n";
  for (const auto& [s, m, p] : rep.p_values) text << "  " << std::left << std::setw(16) << s << std::setw(12) << m << p << '\n';
  rep.text = text.str();
  rep.csv = csv.str();
  return rep;
}

CompareReport compare_dirs(const std::filesystem::path& a, const std::filesystem::path& b,
                           const std::filesystem::path& out, bool force) {
  auto load = [](const std::filesystem::path& p) {
    return read_json_file(std::filesystem::is_directory(p) ? p / "results.json" : p);
  };
  CompareReport rep = compare(load(a), load(b));
  write_output(out / "compare.txt", rep.text, force);
  write_output(out / "compare.csv", rep.csv, force);
  return rep;
}

ResultTable evaluate_checkpoint(const Checkpoint& ck, const ExperimentConfig& config, std::uint64_t seed) {
  if (!ck.tokenizer) throw std::invalid_argument("checkpoint has no tokenizer");
  const Prepared p = prepare(config, seed);
  ResultTable t;
  t.add({"tstok", "reconstruction", "mse", eval_reconstruction(*ck.tokenizer, p, config), true});
  if (ck.forecaster) {
    SeedResult r;
    add_forecast_rows(r, "tstok", ck.forecaster->config().horizon,
                      eval_forecast(*ck.forecaster, *ck.tokenizer, p, config), true);
    for (const auto& row : r.table.rows()) t.add(row);
  }
  return t;
}

std::string loss_history_csv(const std::vector<LossRecord>& history) {
  std::ostringstream os;
  os << "step,rec,vq,cmt,total\n" << std::setprecision(17);
  for (const auto& h : history) os << h.step << ',' << h.rec << ',' << h.vq << ',' << h.cmt << ',' << h.total << '\n';
  return os.str();
}

std::string loss_history_csv(const std::vector<ForecastLossRecord>& history) {
  std::ostringstream os;
  os << "step,lr,loss\n" << std::setprecision(17);
  for (const auto& h : history) os << h.step << ',' << h.lr << ',' << h.loss << '\n';
  return os.str();
}

}  // namespace tstok
