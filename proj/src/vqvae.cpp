#include "tstok/vqvae.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>

namespace tstok {

namespace {

// Inference runs in row chunks to bound tape memory.
constexpr std::size_t kInferenceChunk = 128;

Tensor rows_slice(const Tensor& t, std::size_t begin, std::size_t end) {
  Shape s = t.shape();
  const std::size_t inner = t.size() / s[0];
  s[0] = end - begin;
  std::vector<double> data(t.data().begin() + static_cast<std::ptrdiff_t>(begin * inner),
                           t.data().begin() + static_cast<std::ptrdiff_t>(end * inner));
  return Tensor(std::move(s), std::move(data));
}

template <class F>
Tensor map_row_chunks(const Tensor& in, Shape out_row_shape, F&& fn) {
  const std::size_t n = in.dim(0);
  Shape out_shape = out_row_shape;
  out_shape.insert(out_shape.begin(), n);
  Tensor out(out_shape);
  const std::size_t inner = shape_size(out_row_shape);
  for (std::size_t b = 0; b < n; b += kInferenceChunk) {
    const std::size_t e = std::min(n, b + kInferenceChunk);
    Tensor part = fn(rows_slice(in, b, e));
    std::copy(part.data().begin(), part.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(b * inner));
  }
  return out;
}

double sum_sq_diff(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

}  // namespace

void VqVaeConfig::validate() const {
  if (codebook_size == 0) throw std::invalid_argument("codebook_size must be positive");
  if (code_dim == 0) throw std::invalid_argument("code_dim must be positive");
  if (compression == 0 || !std::has_single_bit(compression)) {
    throw std::invalid_argument("compression factor must be a positive power of 2, got " +
                                std::to_string(compression));
  }
  if (block_hidden < 2 || residual_hidden == 0) {
    throw std::invalid_argument("hidden sizes must be positive (block_hidden >= 2)");
  }
  if (commitment_weight < 0.0) throw std::invalid_argument("commitment_weight must be >= 0");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
  if (iterations < 0) throw std::invalid_argument("iterations must be >= 0");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
}

std::size_t VqVaeConfig::downsampling_layers() const {
  return static_cast<std::size_t>(std::countr_zero(compression));
}

QuantizeResult quantize(const Tensor& codewords, const Tensor& latents) {
  if (codewords.rank() != 2) throw std::invalid_argument("codebook must be [K x D]");
  const std::size_t k = codewords.dim(0), d = codewords.dim(1);
  if (latents.rank() == 0 || latents.shape().back() != d) {
    throw std::invalid_argument("latent width does not match codebook dimension " +
                                std::to_string(d) + ": " + shape_string(latents.shape()));
  }
  const std::size_t count = latents.size() / d;
  QuantizeResult r{Tensor(latents.shape()), std::vector<std::int64_t>(count)};
  const double* cw = codewords.data().data();
  for (std::size_t i = 0; i < count; ++i) {
    const double* z = latents.data().data() + i * d;
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_k = 0;
    for (std::size_t j = 0; j < k; ++j) {
      const double* c = cw + j * d;
      double dist = 0.0;
      for (std::size_t t = 0; t < d; ++t) {
        const double diff = z[t] - c[t];
        dist += diff * diff;
      }
      if (dist < best) {
        best = dist;
        best_k = j;
      }
    }
    r.indices[i] = static_cast<std::int64_t>(best_k);
    std::copy_n(cw + best_k * d, d, r.quantized.data().data() + i * d);
  }
  return r;
}

LossComponents vqvae_loss(const Tensor& x, const Tensor& x_hat, const Tensor& z,
                          const Tensor& z_q, double beta) {
  require_same_shape(x, x_hat, "vqvae_loss reconstruction");
  require_same_shape(z, z_q, "vqvae_loss latents");
  if (x.rank() == 0 || z.rank() == 0 || x.dim(0) != z.dim(0)) {
    throw std::invalid_argument("vqvae_loss: series and latents disagree on row count");
  }
  const double n = static_cast<double>(x.dim(0));
  LossComponents l;
  l.rec = sum_sq_diff(x, x_hat) / n;
  l.vq = sum_sq_diff(z, z_q) / n;
  l.cmt = l.vq;
  l.total = l.rec + l.vq + beta * l.cmt;
  return l;
}

LossComponents ForwardPass::values() const {
  return {total.value()[0], rec.value()[0], vq.value()[0], cmt.value()[0]};
}

VqVae::VqVae(VqVaeConfig config) : config_(config), rng_(config.seed) {
  config_.validate();
  const std::size_t hidden = config_.block_hidden;
  const std::size_t half = hidden / 2;
  const std::size_t n_down = config_.downsampling_layers();
  auto& rng = rng_;

  if (n_down == 0) {
    enc_down_.emplace_back("encoder.down0", 1, hidden, 3, 1, 1, rng);
  }
  for (std::size_t i = 0; i < n_down; ++i) {
    const std::size_t in = i == 0 ? 1 : half;
    const std::size_t out = i + 1 == n_down ? hidden : half;
    enc_down_.emplace_back("encoder.down" + std::to_string(i), in, out, 4, 2, 1, rng);
  }
  for (std::size_t i = 0; i < config_.num_residual_layers; ++i) {
    const std::string base = "encoder.res" + std::to_string(i);
    enc_res_.push_back({nn::Conv1d(base + ".conv3", hidden, config_.residual_hidden, 3, 1, 1, rng),
                        nn::Conv1d(base + ".conv1", config_.residual_hidden, hidden, 1, 1, 0, rng)});
  }
  enc_proj_ = nn::Conv1d("encoder.proj", hidden, config_.code_dim, 1, 1, 0, rng);

  dec_proj_ = nn::Conv1d("decoder.proj", config_.code_dim, hidden, 1, 1, 0, rng);
  for (std::size_t i = 0; i < config_.num_residual_layers; ++i) {
    const std::string base = "decoder.res" + std::to_string(i);
    dec_res_.push_back({nn::Conv1d(base + ".conv3", hidden, config_.residual_hidden, 3, 1, 1, rng),
                        nn::Conv1d(base + ".conv1", config_.residual_hidden, hidden, 1, 1, 0, rng)});
  }
  for (std::size_t i = 0; i < n_down; ++i) {
    const std::size_t in = i == 0 ? hidden : half;
    const std::size_t out = i + 1 == n_down ? 1 : half;
    dec_up_.emplace_back("decoder.up" + std::to_string(i), in, out, 4, 2, 1, rng);
  }
  if (n_down == 0) dec_out_ = nn::Conv1d("decoder.out", hidden, 1, 3, 1, 1, rng);

  const double bound = 1.0 / static_cast<double>(config_.codebook_size);
  std::uniform_real_distribution<double> init(-bound, bound);
  Tensor cw({config_.codebook_size, config_.code_dim});
  for (auto& v : cw.data()) v = init(rng);
  codebook_ = Parameter("codebook", std::move(cw));
}

template <class Self>
ad::Var VqVae::encode_graph(Self& self, ad::Tape& tape, ad::Var x) {
  const std::size_t n = x.shape()[0], steps = x.shape()[1];
  ad::Var h = ad::reshape(x, {n, 1, steps});
  for (auto& conv : self.enc_down_) h = ad::relu(conv(tape, h));
  for (auto& block : self.enc_res_) {
    ad::Var r = block.conv1(tape, ad::relu(block.conv3(tape, ad::relu(h))));
    h = ad::add(h, r);
  }
  h = ad::relu(h);
  h = self.enc_proj_(tape, h);
  return ad::swap_last2(h);
}

template <class Self>
ad::Var VqVae::decode_graph(Self& self, ad::Tape& tape, ad::Var quantized) {
  ad::Var h = self.dec_proj_(tape, ad::swap_last2(quantized));
  for (auto& block : self.dec_res_) {
    ad::Var r = block.conv1(tape, ad::relu(block.conv3(tape, ad::relu(h))));
    h = ad::add(h, r);
  }
  h = ad::relu(h);
  if (self.dec_up_.empty()) {
    h = self.dec_out_(tape, h);
  } else {
    for (std::size_t i = 0; i < self.dec_up_.size(); ++i) {
      h = self.dec_up_[i](tape, h);
      if (i + 1 < self.dec_up_.size()) h = ad::relu(h);
    }
  }
  return ad::reshape(h, {h.shape()[0], h.shape()[2]});
}

void VqVae::check_length(std::size_t steps) const {
  if (steps == 0 || steps % config_.compression != 0) {
    throw std::invalid_argument("series length " + std::to_string(steps) +
                                " is not divisible by compression factor " +
                                std::to_string(config_.compression));
  }
}

ad::Var VqVae::encode(ad::Tape& tape, ad::Var x) {
  if (x.shape().size() != 2) throw std::invalid_argument("encode expects [N x T]");
  check_length(x.shape()[1]);
  return encode_graph(*this, tape, x);
}

ad::Var VqVae::decode(ad::Tape& tape, ad::Var quantized) {
  if (quantized.shape().size() != 3 || quantized.shape()[2] != code_dim()) {
    throw std::invalid_argument("decode expects [N x L x D], got " + shape_string(quantized.shape()));
  }
  return decode_graph(*this, tape, quantized);
}

Tensor VqVae::encode(const Tensor& x) const {
  if (x.rank() != 2) throw std::invalid_argument("encode expects [N x T], got " + shape_string(x.shape()));
  check_length(x.dim(1));
  const std::size_t latent_len = x.dim(1) / config_.compression;
  return map_row_chunks(x, {latent_len, code_dim()}, [this](const Tensor& part) {
    ad::Tape tape;
    return encode_graph(*this, tape, tape.constant(part)).value();
  });
}

Tensor VqVae::decode(const Tensor& quantized) const {
  if (quantized.rank() != 3 || quantized.dim(2) != code_dim()) {
    throw std::invalid_argument("decode expects [N x L x D], got " + shape_string(quantized.shape()));
  }
  const std::size_t steps = quantized.dim(1) * config_.compression;
  return map_row_chunks(quantized, {steps}, [this](const Tensor& part) {
    ad::Tape tape;
    return decode_graph(*this, tape, tape.constant(part)).value();
  });
}

QuantizeResult VqVae::quantize(const Tensor& z) const { return tstok::quantize(codebook_.value, z); }

Tensor VqVae::reconstruct(const Tensor& x) const { return decode(quantize(encode(x)).quantized); }

ForwardPass VqVae::forward(ad::Tape& tape, const Tensor& input, const Tensor& target,
                           const FrozenQuantization* frozen) {
  require_same_shape(input, target, "forward input/target");
  ForwardPass fp;
  ad::Var x = tape.constant(input);
  ad::Var y = tape.constant(target);
  fp.z = encode(tape, x);
  fp.indices = frozen ? frozen->indices : tstok::quantize(codebook_.value, fp.z.value()).indices;
  ad::Var cb = tape.param(codebook_);
  fp.quantized = ad::gather_rows(cb, fp.indices, fp.z.shape());

  ad::Var z_sg;
  ad::Var q_sg;
  ad::Var decoder_in;
  if (frozen) {
    require_same_shape(frozen->z, fp.z.value(), "frozen latent");
    z_sg = tape.constant(frozen->z);
    q_sg = tape.constant(frozen->quantized);
    Tensor offset = frozen->quantized;
    for (std::size_t i = 0; i < offset.size(); ++i) offset[i] -= frozen->z[i];
    decoder_in = ad::add(fp.z, tape.constant(std::move(offset)));
  } else {
    z_sg = ad::stop_gradient(fp.z);
    q_sg = ad::stop_gradient(fp.quantized);
    decoder_in = ad::straight_through(fp.z, fp.quantized);
  }
  fp.decoded = decode(tape, decoder_in);

  const double inv_n = 1.0 / static_cast<double>(input.dim(0));
  fp.rec = ad::scale(ad::sum(ad::square(ad::sub(fp.decoded, y))), inv_n);
  fp.vq = ad::scale(ad::sum(ad::square(ad::sub(z_sg, fp.quantized))), inv_n);
  fp.cmt = ad::scale(ad::sum(ad::square(ad::sub(fp.z, q_sg))), inv_n);
  fp.total = ad::add(ad::add(fp.rec, fp.vq), ad::scale(fp.cmt, config_.commitment_weight));
  return fp;
}

ParameterList VqVae::encoder_parameters() {
  ParameterList out;
  for (auto& c : enc_down_) c.collect(out);
  for (auto& b : enc_res_) {
    b.conv3.collect(out);
    b.conv1.collect(out);
  }
  enc_proj_.collect(out);
  return out;
}

ParameterList VqVae::decoder_parameters() {
  ParameterList out;
  dec_proj_.collect(out);
  for (auto& b : dec_res_) {
    b.conv3.collect(out);
    b.conv1.collect(out);
  }
  for (auto& c : dec_up_) c.collect(out);
  if (dec_up_.empty()) dec_out_.collect(out);
  return out;
}

ParameterList VqVae::parameters() {
  ParameterList out = encoder_parameters();
  for (auto* p : decoder_parameters()) out.push_back(p);
  out.push_back(&codebook_);
  return out;
}

NonFiniteLoss::NonFiniteLoss(std::string component, double value)
    : std::runtime_error("non-finite " + component + " loss: " + std::to_string(value)),
      component_(std::move(component)) {}

LossRecord train_step(VqVae& model, nn::Adam& optimizer, const Tensor& input,
                      const Tensor& target, double learning_rate) {
  ad::Tape tape;
  auto params = model.parameters();
  zero_grads(params);
  ForwardPass fp = model.forward(tape, input, target);
  const LossComponents l = fp.values();
  for (auto [name, v] : {std::pair{"rec", l.rec}, {"vq", l.vq}, {"cmt", l.cmt}, {"total", l.total}}) {
    if (!std::isfinite(v)) throw NonFiniteLoss(name, v);
  }
  tape.backward(fp.total);
  optimizer.step(learning_rate);
  return {optimizer.steps(), l.rec, l.vq, l.cmt, l.total};
}

Tensor sample_rows(const Tensor& series, std::size_t batch_size, std::mt19937_64& rng) {
  const std::size_t n = series.dim(0), steps = series.dim(1);
  if (n == 0) throw std::invalid_argument("cannot sample from an empty batch");
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  Tensor out({batch_size, steps});
  for (std::size_t b = 0; b < batch_size; ++b) {
    const auto r = series.row(pick(rng));
    std::copy(r.begin(), r.end(), out.row(b).begin());
  }
  return out;
}

namespace {

Tensor maybe_instance_norm(const Tensor& batch, bool enabled) {
  if (!enabled) return batch;
  UnivariateBatch b{batch, {}};
  return revin_normalize(b).first.series;
}

std::vector<LossRecord> run_training(VqVae& model, const Tensor& data,
                                     std::span<const double> mask_ratios) {
  const auto& cfg = model.config();
  if (data.rank() != 2) throw std::invalid_argument("training data must be [N x T]");
  if (data.dim(1) % cfg.compression != 0) {
    throw std::invalid_argument("training series length " + std::to_string(data.dim(1)) +
                                " is not divisible by compression factor " +
                                std::to_string(cfg.compression));
  }
  std::vector<LossRecord> history;
  if (cfg.iterations == 0) return history;
  nn::Adam optimizer(model.parameters());
  std::mt19937_64 mask_rng(cfg.seed ^ 0x6d61736b5f726e67ULL);
  history.reserve(static_cast<std::size_t>(cfg.iterations));
  for (std::int64_t step = 0; step < cfg.iterations; ++step) {
    Tensor target = maybe_instance_norm(sample_rows(data, cfg.batch_size, model.rng()), cfg.instance_norm);
    Tensor input = target;
    if (!mask_ratios.empty()) {
      std::uniform_int_distribution<std::size_t> pick(0, mask_ratios.size() - 1);
      const double ratio = mask_ratios[pick(mask_rng)];
      const MaskSpec mask = sample_mask(target.dim(0), target.dim(1), ratio, mask_rng());
      input = apply_mask(UnivariateBatch{target, {}}, mask, 0.0).series;
    }
    LossRecord rec = train_step(model, optimizer, input, target, cfg.learning_rate);
    rec.step = step;
    history.push_back(rec);
  }
  return history;
}

}  // namespace

std::vector<LossRecord> train(VqVae& model, const Tensor& data) {
  return run_training(model, data, {});
}

std::vector<LossRecord> train_imputing(VqVae& model, const Tensor& data,
                                       std::span<const double> mask_ratios) {
  if (mask_ratios.empty()) throw std::invalid_argument("mask_ratios must not be empty");
  for (double r : mask_ratios) {
    if (!(r >= 0.0 && r < 1.0)) throw std::invalid_argument("mask ratios must lie in [0, 1)");
  }
  return run_training(model, data, mask_ratios);
}

TokenSequence tokenize(const VqVae& model, const UnivariateBatch& batch) {
  auto [normed, state] = revin_normalize(batch);
  const Tensor z = model.encode(normed.series);
  TokenSequence tokens;
  tokens.rows = z.dim(0);
  tokens.length = z.dim(1);
  tokens.indices = model.quantize(z).indices;
  tokens.revin = std::move(state);
  return tokens;
}

UnivariateBatch detokenize(const VqVae& model, const TokenSequence& tokens) {
  if (tokens.indices.size() != tokens.rows * tokens.length) {
    throw std::invalid_argument("token sequence size does not match rows x length");
  }
  const std::size_t k = model.codebook_size(), d = model.code_dim();
  Tensor q({tokens.rows, tokens.length, d});
  const auto& cw = model.codebook().value;
  for (std::size_t i = 0; i < tokens.indices.size(); ++i) {
    const auto idx = tokens.indices[i];
    if (idx < 0 || static_cast<std::size_t>(idx) >= k) {
      throw std::out_of_range("token index " + std::to_string(idx) + " outside codebook of size " +
                              std::to_string(k));
    }
    std::copy_n(cw.data().data() + idx * d, d, q.data().data() + i * d);
  }
  UnivariateBatch out{model.decode(q), {}};
  return revin_denormalize(out, tokens.revin);
}

double reconstruction_mse(const VqVae& model, const Tensor& series, bool instance_norm) {
  const Tensor x = maybe_instance_norm(series, instance_norm);
  const Tensor r = model.reconstruct(x);
  return sum_sq_diff(x, r) / static_cast<double>(x.size());
}

}  // namespace tstok
