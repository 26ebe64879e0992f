#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "tstok/experiment.hpp"

using namespace tstok;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("tstok-test-" + name);
  fs::remove_all(d);
  return d;
}

ExperimentConfig small_config(Task task, const fs::path& out) {
  ExperimentConfig c;
  c.task = task;
  c.synthetic.sensors = 2;
  c.synthetic.steps = 256;
  c.synthetic.examples = 3;
  c.synthetic.seed = 7;
  c.tokenizer.codebook_size = 16;
  c.tokenizer.code_dim = 4;
  c.tokenizer.residual_hidden = 4;
  c.tokenizer.block_hidden = 8;
  c.tokenizer.num_residual_layers = 1;
  c.tokenizer.batch_size = 8;
  c.tokenizer.iterations = 20;
  c.forecaster.model_dim = 8;
  c.forecaster.hidden_dim = 16;
  c.forecaster.num_heads = 2;
  c.forecaster.num_layers = 1;
  c.forecaster.lookback = 32;
  c.forecaster.stats_hidden = 8;
  c.forecaster.mlp_hidden = 16;
  c.forecaster.iterations = 10;
  c.forecaster.batch_size = 8;
  c.horizons = {16};
  c.window_length = 32;
  c.stride = 8;
  c.train_frac = 0.6;
  c.val_frac = 0.1;
  c.seeds = {0, 1};
  c.codebook_sizes = {4, 16};
  c.output_dir = out.string();
  return c;
}

}  // namespace

TEST_CASE("synthetic generation") {
  SyntheticSpec s;
  s.sensors = 3;
  s.steps = 200;
  s.examples = 2;
  s.seed = 4;
  const auto a = generate_synthetic(s), b = generate_synthetic(s);
  CHECK(a.dataset.values == b.dataset.values);
  s.seed = 5;
  CHECK(!(generate_synthetic(s).dataset.values == a.dataset.values));

  // One noiseless sinusoid satisfies x[t+1] + x[t-1] = 2 cos(w) x[t].
  s.noise_std = 0.0;
  s.min_components = s.max_components = 1;
  const auto pure = generate_synthetic(s).dataset;
  for (std::size_t e = 0; e < 2; ++e)
    for (std::size_t k = 0; k < 3; ++k) {
      const double c = (pure.values.at(e, k, 2) + pure.values.at(e, k, 0)) / pure.values.at(e, k, 1);
      for (std::size_t t = 1; t + 1 < 200; t += 17)
        CHECK(pure.values.at(e, k, t + 1) + pure.values.at(e, k, t - 1) ==
              doctest::Approx(c * pure.values.at(e, k, t)).epsilon(1e-9).scale(1.0));
    }

  SyntheticSpec sp;
  sp.kind = SyntheticKind::Spiked;
  sp.steps = 1000;
  sp.examples = 3;
  sp.sensors = 2;
  sp.spike_ratio = 0.02;
  const auto spiked = generate_synthetic(sp);
  for (std::size_t e = 0; e < 3; ++e) {
    double n = 0;
    for (std::size_t t = 0; t < 1000; ++t) n += spiked.labels.at(e, t);
    CHECK(n == 20.0);
  }
  std::size_t changed = 0;
  for (std::size_t i = 0; i < spiked.dataset.values.size(); ++i)
    changed += spiked.dataset.values[i] != spiked.clean.values[i];
  CHECK(changed == 60);

  sp.spike_ratio = 0.2;
  CHECK_THROWS_AS(generate_synthetic(sp), std::invalid_argument);
  SyntheticSpec bad;
  bad.sensors = 0;
  CHECK_THROWS_AS(generate_synthetic(bad), std::invalid_argument);
  CHECK_THROWS_AS(parse_synthetic_kind("square"), std::invalid_argument);
}

TEST_CASE("checkpoint save, load, save is byte-identical") {
  VqVaeConfig c;
  c.codebook_size = 8;
  c.code_dim = 4;
  c.residual_hidden = 3;
  c.block_hidden = 6;
  c.num_residual_layers = 1;
  c.iterations = 5;
  c.batch_size = 4;
  VqVae m(c);
  SyntheticSpec s;
  s.sensors = 2;
  s.steps = 64;
  s.examples = 2;
  train(m, flatten_sensors(generate_synthetic(s).dataset).series);
  ForecasterConfig fcfg;
  fcfg.model_dim = 4;
  fcfg.hidden_dim = 6;
  fcfg.num_heads = 2;
  fcfg.num_layers = 1;
  fcfg.lookback = 16;
  fcfg.horizon = 8;
  fcfg.stats_hidden = 5;
  Forecaster fc(fcfg, 4, 4);

  const std::string first = dump_json(checkpoint_json(m, &fc));
  const Json parsed = Json::parse(first);
  for (const char* key : {"format_version", "config", "codebook", "encoder", "decoder", "rng_state", "forecaster"})
    CHECK(parsed.contains(key));
  const Checkpoint back = checkpoint_from_json(parsed);
  CHECK(dump_json(checkpoint_json(*back.tokenizer, back.forecaster.get())) == first);

  const Tensor x = flatten_sensors(generate_synthetic(s).dataset).series;
  CHECK(back.tokenizer->reconstruct(x) == m.reconstruct(x));
  CHECK(back.tokenizer->rng() == m.rng());
  Tensor xin({2, 16}, 0.3);
  xin.at(0, 3) = 1.0;
  CHECK(forecast(*back.forecaster, back.tokenizer.get(), xin).y == forecast(fc, &m, xin).y);

  Json broken = parsed;
  broken.erase("codebook");
  CHECK_THROWS(checkpoint_from_json(broken));
  broken = parsed;
  broken["encoder"].erase(broken["encoder"].begin());
  CHECK_THROWS(checkpoint_from_json(broken));
}

TEST_CASE("mask and split JSON round trip") {
  const MaskSpec m = sample_mask(3, 10, 0.3, 2);
  const Json j = to_json(m);
  CHECK(j.contains("mask"));
  CHECK(j.contains("ratio"));
  const MaskSpec back = mask_from_json(j);
  CHECK(back.observed_flags == m.observed_flags);
  CHECK(back.rows == 3);
  CHECK(back.steps == 10);
  CHECK(back.ratio == m.ratio);

  const SplitSpec s = SplitSpec::proportional(100, 0.7, 0.1, 24, 4);
  const Json sj = to_json(s);
  for (const char* key : {"train", "val", "test", "window_length", "stride"}) CHECK(sj.contains(key));
  const SplitSpec sb = split_from_json(sj);
  CHECK(sb.train == s.train);
  CHECK(sb.test == s.test);
  CHECK(sb.window_length == 24);
  CHECK(sb.stride == 4);
}

TEST_CASE("experiment config JSON round trip and overrides") {
  ExperimentConfig c = small_config(Task::Impute, "x");
  const Json j = to_json(c);
  const ExperimentConfig back = experiment_config_from_json(j);
  CHECK(to_json(back) == j);
  const ExperimentConfig partial = experiment_config_from_json(Json{{"seeds", {5}}, {"task", "anomaly"}});
  CHECK(partial.seeds == std::vector<std::uint64_t>{5});
  CHECK(partial.task == Task::Anomaly);
  CHECK(partial.tokenizer.codebook_size == 256);
  CHECK_THROWS(experiment_config_from_json(Json{{"task", "classify"}}));
  ExperimentConfig empty = c;
  empty.seeds.clear();
  CHECK_THROWS_AS(empty.validate(), std::invalid_argument);
}

TEST_CASE("write_output refuses to overwrite without force") {
  const fs::path d = fresh_dir("write");
  write_output(d / "a.txt", "one", false);
  CHECK_THROWS_AS(write_output(d / "a.txt", "two", false), OutputExists);
  CHECK(slurp(d / "a.txt") == "one");
  write_output(d / "a.txt", "two", true);
  CHECK(slurp(d / "a.txt") == "two");
}

TEST_CASE("run writes per-seed artifacts and is deterministic") {
  const fs::path d1 = fresh_dir("run1"), d2 = fresh_dir("run2");
  ExperimentConfig c = small_config(Task::Forecast, d1);
  const auto s1 = run(c, false);
  for (const char* f : {"results.json", "results.csv", "summary.txt"}) CHECK(fs::exists(d1 / f));
  for (const char* f : {"results.json", "results.csv", "loss_history.csv", "tokenizer.json",
                        "forecaster_H16.json", "forecaster_loss_history_H16.csv"}) {
    CHECK(fs::exists(d1 / "seed-0" / f));
    CHECK(fs::exists(d1 / "seed-1" / f));
  }
  CHECK(slurp(d1 / "results.csv").rfind("method,setting,metric,value,direction\n", 0) == 0);
  CHECK(slurp(d1 / "summary.txt").find("AvgWins") != std::string::npos);
  CHECK(slurp(d1 / "seed-0" / "loss_history.csv").rfind("step,rec,vq,cmt,total\n", 0) == 0);
  CHECK_THROWS_AS(run(c, false), OutputExists);

  c.output_dir = d2.string();
  c.threads = 2;
  run(c, false);
  CHECK(slurp(d1 / "results.json") == slurp(d2 / "results.json"));
  CHECK(slurp(d1 / "seed-1" / "forecaster_H16.json") == slurp(d2 / "seed-1" / "forecaster_H16.json"));

  // Reloaded checkpoint evaluates to the in-memory metrics.
  const Checkpoint ck = load_checkpoint(d1 / "seed-1" / "forecaster_H16.json");
  const ResultTable t = evaluate_checkpoint(ck, c, 1);
  CHECK(t.find("tstok", "H=16", "mse")->value == s1.seeds[1].table.find("tstok", "H=16", "mse")->value);

  const auto self = compare(s1.merged, s1.merged);
  CHECK(self.wins_with_ties.at("A") == 1.0);
  CHECK(self.wins_with_ties.at("B") == 1.0);
  for (const auto& [s, m, p] : self.p_values) CHECK(p == 1.0);
}

TEST_CASE("other tasks complete") {
  for (Task t : {Task::Reconstruct, Task::Impute, Task::AblateCodebook, Task::AblateRepresentation}) {
    const fs::path d = fresh_dir("task-" + to_string(t));
    ExperimentConfig c = small_config(t, d);
    c.seeds = {3};
    const auto s = run(c, false);
    CHECK(!s.means.empty());
    if (t == Task::AblateRepresentation) {
      CHECK(s.seeds[0].extra["downstream_init_hash"]["H=16"]["identical"] == true);
      CHECK(s.means.find("patches", "H=16", "mse") != nullptr);
    }
    if (t == Task::Impute) CHECK(s.means.find("mean-fill", "mask=25%", "mse") != nullptr);
  }
  const fs::path d = fresh_dir("task-anomaly");
  ExperimentConfig c = small_config(Task::Anomaly, d);
  c.synthetic.kind = SyntheticKind::Spiked;
  c.seeds = {0};
  const auto s = run(c, false);
  CHECK(s.means.find("tstok", "A=2%", "f1_adjusted") != nullptr);

  ExperimentConfig unlabeled = small_config(Task::Anomaly, fresh_dir("task-anomaly2"));
  CHECK_THROWS_AS(run(unlabeled, false), std::invalid_argument);
}

TEST_CASE("compare rejects misaligned tables") {
  Json a{{"seeds", {0}}, {"cells", Json::array({Json{{"method", "m"}, {"setting", "s"}, {"metric", "mse"},
                                                     {"direction", "lower"}, {"values", {1.0}}, {"mean", 1.0}, {"std", 0.0}}})}};
  Json b = a;
  b["cells"][0]["setting"] = "other";
  CHECK_THROWS_AS(compare(a, b), std::invalid_argument);
  Json worse = a;
  worse["cells"][0]["mean"] = 2.0;
  worse["cells"][0]["values"] = {2.0};
  const auto rep = compare(a, worse);
  CHECK(rep.wins_with_ties.at("A") == 1.0);
  CHECK(rep.wins_strict.at("B") == 0.0);
}
