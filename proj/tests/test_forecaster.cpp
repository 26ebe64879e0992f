#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numbers>
#include <random>

#include "gradcheck.hpp"
#include "tstok/forecaster.hpp"
#include "tstok/metrics.hpp"

using namespace tstok;
using tstok::testing::check_parameters;

namespace {

VqVaeConfig tiny_tokenizer() {
  VqVaeConfig c;
  c.codebook_size = 8;
  c.code_dim = 4;
  c.compression = 4;
  c.num_residual_layers = 1;
  c.residual_hidden = 3;
  c.block_hidden = 6;
  c.batch_size = 16;
  c.iterations = 20;
  c.seed = 2;
  return c;
}

ForecasterConfig tiny_forecaster(Architecture a, Representation r) {
  ForecasterConfig c;
  c.model_dim = 4;
  c.hidden_dim = 6;
  c.num_heads = 2;
  c.num_layers = 1;
  c.lookback = 8;
  c.horizon = 4;
  c.mlp_hidden = 6;
  c.stats_hidden = 5;
  c.batch_size = 8;
  c.iterations = 10;
  c.seed = 9;
  c.architecture = a;
  c.representation = r;
  return c;
}

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t.data()) v = d(rng);
  return t;
}

Tensor sine_windows(std::size_t rows, std::size_t steps, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> period(12.0, 40.0), phase(0.0, 2.0 * std::numbers::pi);
  Tensor x({rows, steps});
  for (std::size_t i = 0; i < rows; ++i) {
    const double p = period(rng), ph = phase(rng);
    for (std::size_t t = 0; t < steps; ++t)
      x.at(i, t) = std::sin(2.0 * std::numbers::pi * static_cast<double>(t) / p + ph);
  }
  return x;
}

void gradient_check(Architecture a, Representation r) {
  VqVae tok(tiny_tokenizer());
  Forecaster fc(tiny_forecaster(a, r), 4, 4);
  std::mt19937_64 rng(4);
  const Tensor x = random_tensor({3, 8}, rng), y = random_tensor({3, 4}, rng);
  const Tensor feats = fc.features(&tok, x);
  const ForecastTargets targets = forecast_targets(y);
  auto loss = [&] {
    ad::Tape tape;
    return forecaster_loss(tape, fc.graph(tape, feats, x, false), targets).value()[0];
  };
  {
    ad::Tape tape;
    tape.backward(forecaster_loss(tape, fc.graph(tape, feats, x, false), targets));
  }
  const auto report = check_parameters(fc.parameters(), loss,
                                       [](const Parameter& p, std::size_t j) { return p.grad[j]; });
  MESSAGE(to_string(a) << "/" << to_string(r) << " checked " << report.checked
                       << " max rel err " << report.max_rel_error << " " << report.worst);
  CHECK(report.checked > 100);
  CHECK(report.max_rel_error < 1e-4);
}

}  // namespace

TEST_CASE("forecaster gradients match central differences") {
  gradient_check(Architecture::Transformer, Representation::Tokens);
  gradient_check(Architecture::Transformer, Representation::Patches);
  gradient_check(Architecture::Mlp, Representation::Tokens);
  gradient_check(Architecture::Mlp, Representation::Patches);
}

TEST_CASE("full-size shapes: S=7, T_in=96, T_out=96, F=4") {
  VqVaeConfig tc;
  tc.codebook_size = 16;
  tc.code_dim = 8;
  tc.residual_hidden = 4;
  tc.block_hidden = 8;
  VqVae tok(tc);
  ForecasterConfig fcfg;
  fcfg.model_dim = 8;
  fcfg.hidden_dim = 16;
  fcfg.num_heads = 4;
  fcfg.num_layers = 1;
  fcfg.stats_hidden = 16;
  Forecaster fc(fcfg, 8, 4);
  CHECK(fc.token_length() == 24);
  std::mt19937_64 rng(1);
  const Tensor x = random_tensor({7, 96}, rng);
  CHECK(fc.features(&tok, x).shape() == Shape{7, 24, 8});
  const auto out = forecast(fc, &tok, x);
  CHECK(out.y_norm.shape() == Shape{7, 96});
  CHECK(out.y.shape() == Shape{7, 96});
  CHECK(out.mu.size() == 7);
  for (double s : out.sigma) CHECK(s > 0.0);
  CHECK_THROWS_AS(forecast(fc, &tok, random_tensor({7, 95}, rng)), std::invalid_argument);
  CHECK_THROWS_AS(Forecaster(fcfg, 8, 5), std::invalid_argument);
}

TEST_CASE("unnormalization identity and metric consistency") {
  VqVae tok(tiny_tokenizer());
  Forecaster fc(tiny_forecaster(Architecture::Transformer, Representation::Tokens), 4, 4);
  std::mt19937_64 rng(5);
  const Tensor x = random_tensor({5, 8}, rng), truth = random_tensor({5, 4}, rng);
  const auto out = forecast(fc, &tok, x);
  Tensor rebuilt = out.y_norm;
  double max_err = 0.0;
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t t = 0; t < 4; ++t) {
      rebuilt.at(i, t) = out.sigma[i] * out.y_norm.at(i, t) + out.mu[i];
      max_err = std::max(max_err, std::abs(rebuilt.at(i, t) - out.y.at(i, t)));
    }
  CHECK(max_err == 0.0);
  CHECK(mse(out.y.data(), truth.data()) == mse(rebuilt.data(), truth.data()));
}

TEST_CASE("forced mu = 0 and sigma = 1 give y = y_norm") {
  VqVae tok(tiny_tokenizer());
  Forecaster fc(tiny_forecaster(Architecture::Mlp, Representation::Tokens), 4, 4);
  for (auto* p : fc.parameters()) {
    if (p->name.rfind("stats_mu", 0) == 0) p->value.fill(0.0);
    if (p->name == "stats_sigma.weight") p->value.fill(0.0);
    // softplus(b) + floor = 1
    if (p->name == "stats_sigma.bias") p->value.fill(std::log(std::exp(1.0 - kSigmaFloor) - 1.0));
  }
  std::mt19937_64 rng(6);
  const auto out = forecast(fc, &tok, random_tensor({3, 8}, rng));
  for (std::size_t i = 0; i < out.y.size(); ++i) CHECK(out.y[i] == doctest::Approx(out.y_norm[i]).epsilon(1e-12));
}

TEST_CASE("sensor permutation permutes outputs") {
  VqVae tok(tiny_tokenizer());
  for (auto arch : {Architecture::Transformer, Architecture::Mlp}) {
    Forecaster fc(tiny_forecaster(arch, Representation::Tokens), 4, 4);
    std::mt19937_64 rng(7);
    const Tensor x = random_tensor({4, 8}, rng);
    const std::vector<std::size_t> perm{2, 0, 3, 1};
    Tensor xp({4, 8});
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t t = 0; t < 8; ++t) xp.at(i, t) = x.at(perm[i], t);
    const auto a = forecast(fc, &tok, x), b = forecast(fc, &tok, xp);
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(b.mu[i] == a.mu[perm[i]]);
      CHECK(b.sigma[i] == a.sigma[perm[i]]);
      for (std::size_t t = 0; t < 4; ++t) CHECK(b.y.at(i, t) == a.y.at(perm[i], t));
    }
  }
}

TEST_CASE("inference is deterministic with dropout disabled") {
  VqVae tok(tiny_tokenizer());
  Forecaster fc(tiny_forecaster(Architecture::Mlp, Representation::Tokens), 4, 4);
  std::mt19937_64 rng(8);
  const Tensor x = random_tensor({3, 8}, rng);
  CHECK(forecast(fc, &tok, x).y == forecast(fc, &tok, x).y);
}

TEST_CASE("loss values") {
  ForecastOutput out;
  const Tensor future({1, 2}, {1.0, 3.0});
  out.y_norm = Tensor({1, 2}, {-1.0, 1.0});
  out.mu = {2.0};
  out.sigma = {1.0};
  CHECK(forecaster_loss(out, future) == doctest::Approx(0.0));
  out.mu = {2.5};
  CHECK(forecaster_loss(out, future) == doctest::Approx(0.125));
  out.mu = {4.0};
  CHECK(forecaster_loss(out, future) == doctest::Approx(1.5));
}

TEST_CASE("patch_embed") {
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor({2, 96}, rng);
  const Tensor w = random_tensor({5, 4}, rng), b = random_tensor({5}, rng);
  CHECK(patch_embed(x, w, b, 4).shape() == Shape{2, 24, 5});
  const Tensor id = patch_embed(x, Tensor({1, 1}, {1.0}), Tensor({1}, {0.0}), 1);
  CHECK(id.shape() == Shape{2, 96, 1});
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(id[i] == x[i]);
  CHECK_THROWS_AS(patch_embed(random_tensor({2, 10}, rng), w, b, 4), std::invalid_argument);
}

TEST_CASE("tokens and patches share the downstream initialization") {
  for (auto arch : {Architecture::Transformer, Architecture::Mlp}) {
    Forecaster t(tiny_forecaster(arch, Representation::Tokens), 4, 4);
    Forecaster p(tiny_forecaster(arch, Representation::Patches), 4, 4);
    CHECK(nn::hash_parameters(t.downstream_parameters()) == nn::hash_parameters(p.downstream_parameters()));
    auto other = tiny_forecaster(arch, Representation::Tokens);
    other.seed = 10;
    Forecaster o(other, 4, 4);
    CHECK(nn::hash_parameters(t.downstream_parameters()) != nn::hash_parameters(o.downstream_parameters()));
  }
  Forecaster p(tiny_forecaster(Architecture::Transformer, Representation::Patches), 4, 4);
  CHECK(p.patch_parameters().size() == 2);
}

TEST_CASE("training keeps the tokenizer frozen; zero iterations is a no-op") {
  VqVae tok(tiny_tokenizer());
  train(tok, sine_windows(32, 12, 1));
  const auto before = nn::hash_parameters(tok.parameters());
  auto cfg = tiny_forecaster(Architecture::Transformer, Representation::Tokens);
  Forecaster fc(cfg, 4, 4);
  const auto fc_before = nn::hash_parameters(fc.parameters());
  const Tensor windows = sine_windows(64, 12, 2);
  train_forecaster(fc, &tok, windows);
  CHECK(nn::hash_parameters(tok.parameters()) == before);
  CHECK(nn::hash_parameters(fc.parameters()) != fc_before);

  cfg.iterations = 0;
  Forecaster idle(cfg, 4, 4);
  const auto idle_before = nn::hash_parameters(idle.parameters());
  CHECK(train_forecaster(idle, &tok, windows).empty());
  CHECK(nn::hash_parameters(idle.parameters()) == idle_before);
}

TEST_CASE("training is deterministic") {
  VqVae tok(tiny_tokenizer());
  const Tensor windows = sine_windows(64, 12, 3);
  auto cfg = tiny_forecaster(Architecture::Transformer, Representation::Patches);
  Forecaster a(cfg, 4, 4), b(cfg, 4, 4);
  const auto ha = train_forecaster(a, &tok, windows), hb = train_forecaster(b, &tok, windows);
  REQUIRE(ha.size() == hb.size());
  for (std::size_t i = 0; i < ha.size(); ++i) CHECK(ha[i].loss == hb[i].loss);
  CHECK(nn::hash_parameters(a.parameters()) == nn::hash_parameters(b.parameters()));
}

TEST_CASE("last value baseline") {
  const Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor y = last_value_forecast(x, 2);
  CHECK(y == Tensor({2, 2}, {3, 3, 6, 6}));
}

TEST_CASE("training lowers the held-out forecasting loss") {
  VqVae tok(tiny_tokenizer());
  train(tok, sine_windows(64, 12, 4));
  auto cfg = tiny_forecaster(Architecture::Transformer, Representation::Tokens);
  cfg.iterations = 300;
  cfg.learning_rate = 3e-3;
  cfg.dropout = 0.0;
  Forecaster fc(cfg, 4, 4);
  const Tensor held = sine_windows(32, 12, 5);
  const auto [x, y] = split_windows(held, cfg.lookback);
  const double before = forecaster_loss(forecast(fc, &tok, x), y);
  const auto history = train_forecaster(fc, &tok, sine_windows(256, 12, 6));
  const double after = forecaster_loss(forecast(fc, &tok, x), y);
  CHECK(after < 0.5 * before);
  CHECK(history.back().loss < history.front().loss);
}
