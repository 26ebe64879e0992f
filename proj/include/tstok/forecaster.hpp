#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "tstok/autodiff.hpp"
#include "tstok/nn.hpp"
#include "tstok/tensor.hpp"
#include "tstok/vqvae.hpp"

namespace tstok {

enum class Architecture { Transformer, Mlp };
/// Tokens: frozen tokenizer's quantized latents. Patches: learned linear patch
/// embedding (transformer) or the raw normalized series (MLP).
enum class Representation { Tokens, Patches };

std::string to_string(Architecture a);
std::string to_string(Representation r);
Architecture parse_architecture(const std::string& s);
Representation parse_representation(const std::string& s);

struct ForecasterConfig {
  std::size_t model_dim = 64;
  std::size_t hidden_dim = 256;
  std::size_t num_heads = 4;
  std::size_t num_layers = 4;
  double dropout = 0.1;
  std::size_t lookback = 96;
  std::size_t horizon = 96;
  double learning_rate = 1e-4;
  std::int64_t iterations = 1000;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  Architecture architecture = Architecture::Transformer;
  Representation representation = Representation::Tokens;
  std::size_t mlp_hidden = 256;
  double mlp_dropout = 0.1;
  /// Width of the mean/std head.
  std::size_t stats_hidden = 256;

  void validate() const;
};

inline constexpr double kSigmaFloor = 1e-5;

struct ForecastOutput {
  Tensor y_norm;              // [S x T_out]
  std::vector<double> mu;     // [S]
  std::vector<double> sigma;  // [S], > 0
  Tensor y;                   // sigma * y_norm + mu
};

struct ForecastGraph {
  ad::Var y_norm;  // [N, T_out]
  ad::Var mu;      // [N, 1]
  ad::Var sigma;   // [N, 1]
};

/// Sinusoidal position table [length x width].
Tensor positional_encoding(std::size_t length, std::size_t width);

class Forecaster {
 public:
  /// code_dim and compression describe the tokenizer (or the patch embedding).
  Forecaster(ForecasterConfig config, std::size_t code_dim, std::size_t compression);

  const ForecasterConfig& config() const { return config_; }
  std::size_t code_dim() const { return code_dim_; }
  std::size_t compression() const { return compression_; }
  std::size_t token_length() const { return config_.lookback / compression_; }

  /// Per-row representation input computed outside the graph: tokenizer latents
  /// [N x L x D] for Tokens, the instance-normalized series [N x T_in] otherwise.
  Tensor features(const VqVae* tokenizer, const Tensor& x) const;

  ForecastGraph graph(ad::Tape& tape, const Tensor& features, const Tensor& raw, bool training);
  ForecastGraph graph(ad::Tape& tape, const Tensor& features, const Tensor& raw) const;

  /// All trainable parameters.
  ParameterList parameters();
  /// Parameters whose shape and initialization do not depend on the representation.
  ParameterList downstream_parameters();
  /// Learned patch embedding weight [D x F] and bias [D]; empty for Tokens.
  ParameterList patch_parameters();

  std::mt19937_64& rng() { return rng_; }
  const std::mt19937_64& rng() const { return rng_; }

 private:
  struct EncoderLayer {
    nn::Linear q, k, v, o;
    nn::LayerNorm ln1, ln2;
    nn::Linear ff1, ff2;
  };

  template <class Self>
  static ForecastGraph build(Self& self, ad::Tape& tape, const Tensor& features, const Tensor& raw,
                             bool training, std::mt19937_64& rng);
  std::mt19937_64 layer_rng(const std::string& name) const;

  ForecasterConfig config_;
  std::size_t code_dim_;
  std::size_t compression_;
  nn::Linear patch_;
  nn::Linear in_proj_;
  std::vector<EncoderLayer> layers_;
  nn::Linear head_;
  nn::Linear mlp1_, mlp2_, mlp3_;
  nn::LayerNorm mlp_norm_;
  nn::Linear stats1_, stats_mu_, stats_sigma_;
  Tensor positions_;
  std::mt19937_64 rng_;
};

/// Non-overlapping length-F patches of x[N x T] linearly projected: [N x T/F x D].
/// weight is [D x F], bias [D].
ad::Var patch_embed(ad::Tape& tape, ad::Var x, ad::Var weight, ad::Var bias, std::size_t patch);
Tensor patch_embed(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t patch);

/// Inference with dropout disabled. x is [S x T_in].
ForecastOutput forecast(const Forecaster& fc, const VqVae* tokenizer, const Tensor& x);

/// Targets: RevIN-normalized future and its per-row mean and std.
struct ForecastTargets {
  Tensor y_norm;
  Tensor mu;     // [N x 1]
  Tensor sigma;  // [N x 1]
};
ForecastTargets forecast_targets(const Tensor& future);

/// Sum of three mean smooth-L1 terms (delta 1).
ad::Var forecaster_loss(ad::Tape& tape, const ForecastGraph& out, const ForecastTargets& targets);
double forecaster_loss(const ForecastOutput& out, const Tensor& future);

struct ForecastLossRecord {
  std::int64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

/// windows[N x (T_in + T_out)]. The tokenizer is read-only.
std::vector<ForecastLossRecord> train_forecaster(Forecaster& fc, const VqVae* tokenizer,
                                                 const Tensor& windows);

/// Repeats the last observed value over the horizon.
Tensor last_value_forecast(const Tensor& x, std::size_t horizon);

/// Splits rows of windows[N x (T_in + T_out)] into lookback and horizon parts.
std::pair<Tensor, Tensor> split_windows(const Tensor& windows, std::size_t lookback);

}  // namespace tstok
