#include "tstok/forecaster.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "tstok/data.hpp"

namespace tstok {

std::string to_string(Architecture a) { return a == Architecture::Transformer ? "transformer" : "mlp"; }
std::string to_string(Representation r) { return r == Representation::Tokens ? "tokens" : "patches"; }

Architecture parse_architecture(const std::string& s) {
  if (s == "transformer") return Architecture::Transformer;
  if (s == "mlp") return Architecture::Mlp;
  throw std::invalid_argument("unknown architecture '" + s + "' (expected transformer or mlp)");
}

Representation parse_representation(const std::string& s) {
  if (s == "tokens") return Representation::Tokens;
  if (s == "patches") return Representation::Patches;
  throw std::invalid_argument("unknown representation '" + s + "' (expected tokens or patches)");
}

void ForecasterConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("forecaster config: " + m); };
  if (model_dim == 0 || hidden_dim == 0 || num_heads == 0 || lookback < 2 || horizon == 0 ||
      mlp_hidden == 0 || stats_hidden == 0 || batch_size == 0) {
    fail("dimensions must be positive (lookback >= 2)");
  }
  if (model_dim % num_heads != 0) fail("model_dim must be divisible by num_heads");
  if (!(dropout >= 0.0 && dropout < 1.0) || !(mlp_dropout >= 0.0 && mlp_dropout < 1.0)) {
    fail("dropout must lie in [0, 1)");
  }
  if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
  if (iterations < 0) fail("iterations must be non-negative");
}

Tensor positional_encoding(std::size_t length, std::size_t width) {
  Tensor pe({length, width});
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t i = 0; i < width; i += 2) {
      const double angle = static_cast<double>(pos) /
                           std::pow(10000.0, static_cast<double>(i) / static_cast<double>(width));
      pe.at(pos, i) = std::sin(angle);
      if (i + 1 < width) pe.at(pos, i + 1) = std::cos(angle);
    }
  }
  return pe;
}

ad::Var patch_embed(ad::Tape& tape, ad::Var x, ad::Var weight, ad::Var bias, std::size_t patch) {
  (void)tape;
  const Shape& s = x.shape();
  if (s.size() != 2) throw std::invalid_argument("patch_embed expects [N x T]");
  if (patch == 0 || s[1] % patch != 0) {
    throw std::invalid_argument("patch_embed: length " + std::to_string(s[1]) +
                                " is not divisible by patch length " + std::to_string(patch));
  }
  return ad::linear(ad::reshape(x, {s[0], s[1] / patch, patch}), weight, bias);
}

Tensor patch_embed(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t patch) {
  ad::Tape tape;
  return patch_embed(tape, tape.constant(x), tape.constant(weight), tape.constant(bias), patch).value();
}

std::mt19937_64 Forecaster::layer_rng(const std::string& name) const {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return std::mt19937_64(config_.seed ^ h);
}

Forecaster::Forecaster(ForecasterConfig config, std::size_t code_dim, std::size_t compression)
    : config_(config), code_dim_(code_dim), compression_(compression), rng_(config.seed) {
  config_.validate();
  if (code_dim_ == 0 || compression_ == 0) throw std::invalid_argument("forecaster: code_dim and compression must be positive");
  if (config_.lookback % compression_ != 0) {
    throw std::invalid_argument("forecaster: lookback " + std::to_string(config_.lookback) +
                                " is not divisible by compression " + std::to_string(compression_));
  }
  const std::size_t L = token_length(), M = config_.model_dim, H = config_.hidden_dim;
  auto make = [&](const std::string& name, std::size_t in, std::size_t out) {
    auto r = layer_rng(name);
    return nn::Linear(name, in, out, r);
  };
  const bool patches = config_.representation == Representation::Patches;
  if (config_.architecture == Architecture::Transformer) {
    if (patches) patch_ = make("patch", compression_, code_dim_);
    in_proj_ = make("in_proj", code_dim_, M);
    for (std::size_t i = 0; i < config_.num_layers; ++i) {
      const std::string p = "layer" + std::to_string(i);
      layers_.push_back({make(p + ".q", M, M), make(p + ".k", M, M), make(p + ".v", M, M),
                         make(p + ".o", M, M), nn::LayerNorm(p + ".ln1", M),
                         nn::LayerNorm(p + ".ln2", M), make(p + ".ff1", M, H),
                         make(p + ".ff2", H, M)});
    }
    head_ = make("head", L * M, config_.horizon);
    positions_ = positional_encoding(L, M);
  } else {
    const std::size_t in = patches ? config_.lookback : L * code_dim_;
    mlp1_ = make("mlp1", in, config_.mlp_hidden);
    mlp2_ = make("mlp2", config_.mlp_hidden, config_.mlp_hidden);
    mlp3_ = make("mlp3", config_.mlp_hidden, config_.horizon);
    mlp_norm_ = nn::LayerNorm("mlp_norm", config_.horizon);
  }
  stats1_ = make("stats1", config_.lookback, config_.stats_hidden);
  stats_mu_ = make("stats_mu", config_.stats_hidden, 1);
  stats_sigma_ = make("stats_sigma", config_.stats_hidden, 1);
}

Tensor Forecaster::features(const VqVae* tokenizer, const Tensor& x) const {
  if (x.rank() != 2 || x.dim(1) != config_.lookback) {
    throw std::invalid_argument("forecaster input must be [S x " + std::to_string(config_.lookback) +
                                "], got " + shape_string(x.shape()));
  }
  Tensor normed = revin_normalize(UnivariateBatch{x, {}}).first.series;
  if (config_.representation == Representation::Patches) return normed;
  if (tokenizer == nullptr) throw std::invalid_argument("token representation needs a tokenizer");
  if (tokenizer->config().compression != compression_ || tokenizer->code_dim() != code_dim_) {
    throw std::invalid_argument("tokenizer (F, D) does not match the forecaster");
  }
  return tokenizer->quantize(tokenizer->encode(normed)).quantized;
}

template <class Self>
ForecastGraph Forecaster::build(Self& self, ad::Tape& tape, const Tensor& features,
                                const Tensor& raw, bool training, std::mt19937_64& rng) {
  const auto& cfg = self.config_;
  const std::size_t n = raw.dim(0), L = self.token_length(), M = cfg.model_dim;
  if (raw.rank() != 2 || raw.dim(1) != cfg.lookback || features.dim(0) != n) {
    throw std::invalid_argument("forecaster graph: inconsistent input shapes " +
                                shape_string(features.shape()) + " and " + shape_string(raw.shape()));
  }
  const bool patches = cfg.representation == Representation::Patches;
  ad::Var f = tape.constant(features);
  ForecastGraph g;
  if (cfg.architecture == Architecture::Transformer) {
    ad::Var tokens = patches ? self.patch_(tape, ad::reshape(f, {n, L, self.compression_})) : f;
    if (tokens.shape() != Shape{n, L, self.code_dim_}) {
      throw std::invalid_argument("forecaster: token features must be " +
                                  shape_string({n, L, self.code_dim_}) + ", got " +
                                  shape_string(tokens.shape()));
    }
    ad::Var h = ad::add_trailing(self.in_proj_(tape, tokens), tape.constant(self.positions_));
    for (auto& layer : self.layers_) {
      ad::Var a = ad::attention(layer.q(tape, h), layer.k(tape, h), layer.v(tape, h), cfg.num_heads);
      a = ad::dropout(layer.o(tape, a), cfg.dropout, training, rng);
      h = layer.ln1(tape, ad::add(h, a));
      ad::Var ff = ad::dropout(ad::relu(layer.ff1(tape, h)), cfg.dropout, training, rng);
      ff = ad::dropout(layer.ff2(tape, ff), cfg.dropout, training, rng);
      h = layer.ln2(tape, ad::add(h, ff));
    }
    g.y_norm = self.head_(tape, ad::reshape(h, {n, L * M}));
  } else {
    const std::size_t width = patches ? cfg.lookback : L * self.code_dim_;
    if (features.size() != n * width) {
      throw std::invalid_argument("forecaster: MLP features must have " + std::to_string(width) +
                                  " values per row");
    }
    ad::Var h = ad::relu(self.mlp1_(tape, ad::reshape(f, {n, width})));
    h = ad::dropout(ad::relu(self.mlp2_(tape, h)), cfg.mlp_dropout, training, rng);
    g.y_norm = self.mlp_norm_(tape, self.mlp3_(tape, h));
  }
  ad::Var s = ad::relu(self.stats1_(tape, tape.constant(raw)));
  g.mu = self.stats_mu_(tape, s);
  g.sigma = ad::softplus(self.stats_sigma_(tape, s), kSigmaFloor);
  return g;
}

ForecastGraph Forecaster::graph(ad::Tape& tape, const Tensor& features, const Tensor& raw, bool training) {
  return build(*this, tape, features, raw, training, rng_);
}

ForecastGraph Forecaster::graph(ad::Tape& tape, const Tensor& features, const Tensor& raw) const {
  std::mt19937_64 unused(0);
  return build(*this, tape, features, raw, false, unused);
}

ParameterList Forecaster::patch_parameters() {
  ParameterList out;
  if (config_.architecture == Architecture::Transformer &&
      config_.representation == Representation::Patches) {
    patch_.collect(out);
  }
  return out;
}

ParameterList Forecaster::downstream_parameters() {
  ParameterList out;
  if (config_.architecture == Architecture::Transformer) {
    in_proj_.collect(out);
    for (auto& l : layers_) {
      l.q.collect(out);
      l.k.collect(out);
      l.v.collect(out);
      l.o.collect(out);
      l.ln1.collect(out);
      l.ln2.collect(out);
      l.ff1.collect(out);
      l.ff2.collect(out);
    }
    head_.collect(out);
  } else {
    mlp2_.collect(out);
    mlp3_.collect(out);
    mlp_norm_.collect(out);
  }
  stats1_.collect(out);
  stats_mu_.collect(out);
  stats_sigma_.collect(out);
  return out;
}

ParameterList Forecaster::parameters() {
  ParameterList out = patch_parameters();
  if (config_.architecture == Architecture::Mlp) mlp1_.collect(out);
  for (auto* p : downstream_parameters()) out.push_back(p);
  return out;
}

namespace {

Tensor column(const std::vector<double>& v) {
  Tensor t({v.size(), 1});
  std::copy(v.begin(), v.end(), t.data().begin());
  return t;
}

Tensor take_rows(const Tensor& t, std::size_t begin, std::size_t end) {
  Shape s = t.shape();
  const std::size_t stride = t.size() / s[0];
  s[0] = end - begin;
  Tensor out(s);
  std::copy_n(t.data().data() + begin * stride, (end - begin) * stride, out.data().data());
  return out;
}

Tensor gather(const Tensor& t, const std::vector<std::size_t>& rows) {
  Shape s = t.shape();
  const std::size_t stride = t.size() / s[0];
  s[0] = rows.size();
  Tensor out(s);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(t.data().data() + rows[i] * stride, stride, out.data().data() + i * stride);
  return out;
}

}  // namespace

ForecastOutput forecast(const Forecaster& fc, const VqVae* tokenizer, const Tensor& x) {
  const Tensor feats = fc.features(tokenizer, x);
  const std::size_t n = x.dim(0), horizon = fc.config().horizon;
  ForecastOutput out;
  out.y_norm = Tensor({n, horizon});
  out.mu.resize(n);
  out.sigma.resize(n);
  constexpr std::size_t chunk = 256;
  for (std::size_t b = 0; b < n; b += chunk) {
    const std::size_t e = std::min(n, b + chunk);
    ad::Tape tape;
    const ForecastGraph g = fc.graph(tape, take_rows(feats, b, e), take_rows(x, b, e));
    std::copy(g.y_norm.value().data().begin(), g.y_norm.value().data().end(),
              out.y_norm.data().begin() + static_cast<std::ptrdiff_t>(b * horizon));
    for (std::size_t i = b; i < e; ++i) {
      out.mu[i] = g.mu.value()[i - b];
      out.sigma[i] = g.sigma.value()[i - b];
    }
  }
  out.y = out.y_norm;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = 0; t < horizon; ++t) out.y.at(i, t) = out.sigma[i] * out.y_norm.at(i, t) + out.mu[i];
  return out;
}

ForecastTargets forecast_targets(const Tensor& future) {
  if (future.rank() != 2 || future.dim(1) < 2) throw std::invalid_argument("forecast target must be [N x T_out], T_out >= 2");
  auto [normed, state] = revin_normalize(UnivariateBatch{future, {}});
  return {normed.series, column(state.mean), column(state.std)};
}

ad::Var forecaster_loss(ad::Tape& tape, const ForecastGraph& out, const ForecastTargets& targets) {
  require_same_shape(out.y_norm.value(), targets.y_norm, "forecaster_loss y_norm");
  require_same_shape(out.mu.value(), targets.mu, "forecaster_loss mu");
  require_same_shape(out.sigma.value(), targets.sigma, "forecaster_loss sigma");
  return ad::add(ad::add(ad::smooth_l1(out.y_norm, tape.constant(targets.y_norm)),
                         ad::smooth_l1(out.mu, tape.constant(targets.mu))),
                 ad::smooth_l1(out.sigma, tape.constant(targets.sigma)));
}

double forecaster_loss(const ForecastOutput& out, const Tensor& future) {
  const ForecastTargets t = forecast_targets(future);
  ad::Tape tape;
  ForecastGraph g{tape.constant(out.y_norm), tape.constant(column(out.mu)), tape.constant(column(out.sigma))};
  return forecaster_loss(tape, g, t).value()[0];
}

std::pair<Tensor, Tensor> split_windows(const Tensor& windows, std::size_t lookback) {
  if (windows.rank() != 2 || windows.dim(1) <= lookback) {
    throw std::invalid_argument("windows must be [N x (T_in + T_out)] with T_out > 0");
  }
  const std::size_t n = windows.dim(0), total = windows.dim(1), horizon = total - lookback;
  Tensor x({n, lookback}), y({n, horizon});
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = windows.row(i);
    std::copy_n(r.begin(), lookback, x.row(i).begin());
    std::copy_n(r.begin() + static_cast<std::ptrdiff_t>(lookback), horizon, y.row(i).begin());
  }
  return {x, y};
}

std::vector<ForecastLossRecord> train_forecaster(Forecaster& fc, const VqVae* tokenizer,
                                                 const Tensor& windows) {
  const auto& cfg = fc.config();
  if (windows.rank() != 2 || windows.dim(1) != cfg.lookback + cfg.horizon) {
    throw std::invalid_argument("training windows must be [N x " +
                                std::to_string(cfg.lookback + cfg.horizon) + "], got " +
                                shape_string(windows.shape()));
  }
  std::vector<ForecastLossRecord> history;
  if (cfg.iterations == 0) return history;
  const auto [x, y] = split_windows(windows, cfg.lookback);
  const Tensor feats = fc.features(tokenizer, x);
  const ParameterList params = fc.parameters();
  nn::Adam optimizer(params);
  const nn::OneCycleSchedule schedule{cfg.learning_rate, cfg.iterations};
  std::uniform_int_distribution<std::size_t> pick(0, x.dim(0) - 1);
  std::vector<std::size_t> rows(cfg.batch_size);
  history.reserve(static_cast<std::size_t>(cfg.iterations));
  for (std::int64_t step = 0; step < cfg.iterations; ++step) {
    for (auto& r : rows) r = pick(fc.rng());
    ad::Tape tape;
    const ForecastGraph g = fc.graph(tape, gather(feats, rows), gather(x, rows), true);
    const ad::Var loss = forecaster_loss(tape, g, forecast_targets(gather(y, rows)));
    const double value = loss.value()[0];
    if (!std::isfinite(value)) throw NonFiniteLoss("forecaster", value);
    zero_grads(params);
    tape.backward(loss);
    const double lr = schedule.lr(step);
    optimizer.step(lr);
    history.push_back({step, lr, value});
  }
  return history;
}

Tensor last_value_forecast(const Tensor& x, std::size_t horizon) {
  if (x.rank() != 2 || x.dim(1) == 0) throw std::invalid_argument("last_value_forecast expects [S x T_in]");
  Tensor out({x.dim(0), horizon});
  for (std::size_t i = 0; i < x.dim(0); ++i) std::fill(out.row(i).begin(), out.row(i).end(), x.at(i, x.dim(1) - 1));
  return out;
}

}  // namespace tstok
