#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tstok/autodiff.hpp"
#include "tstok/data.hpp"
#include "tstok/nn.hpp"

namespace tstok {

struct VqVaeConfig {
  std::size_t codebook_size = 256;
  std::size_t code_dim = 64;
  std::size_t compression = 4;
  std::size_t num_residual_layers = 2;
  std::size_t residual_hidden = 64;
  std::size_t block_hidden = 128;
  double commitment_weight = 0.25;
  double learning_rate = 1e-3;
  std::int64_t iterations = 15000;
  std::size_t batch_size = 4096;
  std::uint64_t seed = 0;
  /// Per-row instance normalization of every training batch.
  bool instance_norm = true;

  void validate() const;
  std::size_t downsampling_layers() const;
};

/// Latent vectors are laid out [N x L x D] with L = T / F.
struct QuantizeResult {
  Tensor quantized;
  std::vector<std::int64_t> indices;
};

/// Nearest codeword by squared Euclidean distance; ties go to the lowest index.
QuantizeResult quantize(const Tensor& codewords, const Tensor& latents);

struct LossComponents {
  double total = 0.0;
  double rec = 0.0;
  double vq = 0.0;
  double cmt = 0.0;
};

/// Value of the tokenizer objective for given tensors (no gradients).
/// rec, vq and cmt are sums of squares averaged over the N rows.
LossComponents vqvae_loss(const Tensor& x, const Tensor& x_hat, const Tensor& z,
                          const Tensor& z_q, double beta);

/// Pins the stop-gradient operands and code assignment of one forward pass.
/// Lets finite differences probe the surrogate the gradients are taken of.
struct FrozenQuantization {
  std::vector<std::int64_t> indices;
  Tensor z;
  Tensor quantized;
};

struct ForwardPass {
  ad::Var z;
  ad::Var quantized;
  ad::Var decoded;
  ad::Var rec;
  ad::Var vq;
  ad::Var cmt;
  ad::Var total;
  std::vector<std::int64_t> indices;

  LossComponents values() const;
};

class VqVae {
 public:
  explicit VqVae(VqVaeConfig config);

  const VqVaeConfig& config() const { return config_; }
  std::size_t codebook_size() const { return codebook_.value.dim(0); }
  std::size_t code_dim() const { return codebook_.value.dim(1); }

  /// x[N x T] -> z[N x T/F x D]
  Tensor encode(const Tensor& x) const;
  /// z_q[N x L x D] -> x_hat[N x L*F]
  Tensor decode(const Tensor& quantized) const;
  QuantizeResult quantize(const Tensor& z) const;
  /// encode -> quantize -> decode, in whatever space x is given.
  Tensor reconstruct(const Tensor& x) const;

  ad::Var encode(ad::Tape& tape, ad::Var x);
  ad::Var decode(ad::Tape& tape, ad::Var quantized);

  /// Records the full objective on `tape`. `input` feeds the encoder, `target`
  /// is what the reconstruction term compares against.
  ForwardPass forward(ad::Tape& tape, const Tensor& input, const Tensor& target,
                      const FrozenQuantization* frozen = nullptr);

  ParameterList parameters();
  ParameterList encoder_parameters();
  ParameterList decoder_parameters();
  Parameter& codebook() { return codebook_; }
  const Parameter& codebook() const { return codebook_; }

  std::mt19937_64& rng() { return rng_; }
  const std::mt19937_64& rng() const { return rng_; }

 private:
  struct ResidualBlock {
    nn::Conv1d conv3;
    nn::Conv1d conv1;
  };

  template <class Self>
  static ad::Var encode_graph(Self& self, ad::Tape& tape, ad::Var x);
  template <class Self>
  static ad::Var decode_graph(Self& self, ad::Tape& tape, ad::Var quantized);
  void check_length(std::size_t steps) const;

  VqVaeConfig config_;
  std::vector<nn::Conv1d> enc_down_;
  std::vector<ResidualBlock> enc_res_;
  nn::Conv1d enc_proj_;
  nn::Conv1d dec_proj_;
  std::vector<ResidualBlock> dec_res_;
  std::vector<nn::ConvTranspose1d> dec_up_;
  nn::Conv1d dec_out_;  // used only when F == 1
  Parameter codebook_;
  std::mt19937_64 rng_;
};

class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(std::string component, double value);
  const std::string& component() const { return component_; }

 private:
  std::string component_;
};

struct LossRecord {
  std::int64_t step = 0;
  double rec = 0.0;
  double vq = 0.0;
  double cmt = 0.0;
  double total = 0.0;
};

/// One Adam update on encoder, decoder and codebook. Loss values are those of
/// the forward pass that produced the gradients.
LossRecord train_step(VqVae& model, nn::Adam& optimizer, const Tensor& input,
                      const Tensor& target, double learning_rate);

/// Draws `batch_size` rows uniformly with replacement.
Tensor sample_rows(const Tensor& series, std::size_t batch_size, std::mt19937_64& rng);

/// Runs config.iterations steps over rows of `data` ([N x T], T divisible by F).
std::vector<LossRecord> train(VqVae& model, const Tensor& data);

/// Same as train(), except every batch is masked (fill 0) at a ratio drawn from
/// `mask_ratios` before encoding, while reconstruction targets stay unmasked.
/// Masks come from a separate seeded stream, so {0} reproduces train().
std::vector<LossRecord> train_imputing(VqVae& model, const Tensor& data,
                                       std::span<const double> mask_ratios);

struct TokenSequence {
  std::size_t rows = 0;
  std::size_t length = 0;
  std::vector<std::int64_t> indices;
  RevInState revin;
};

TokenSequence tokenize(const VqVae& model, const UnivariateBatch& batch);
UnivariateBatch detokenize(const VqVae& model, const TokenSequence& tokens);

/// Mean squared reconstruction error per element, optionally under instance norm.
double reconstruction_mse(const VqVae& model, const Tensor& series, bool instance_norm);

}  // namespace tstok
