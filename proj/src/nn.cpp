#include "tstok/nn.hpp"

#include <cmath>
#include <cstring>
#include <numbers>

namespace tstok::nn {

Tensor uniform_fan_in(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

Linear::Linear(std::string name, std::size_t in, std::size_t out, std::mt19937_64& rng)
    : weight(name + ".weight", uniform_fan_in({out, in}, in, rng)),
      bias(name + ".bias", uniform_fan_in({out}, in, rng)) {}

ad::Var Linear::operator()(ad::Tape& tape, ad::Var x) {
  return ad::linear(x, tape.param(weight), tape.param(bias));
}

ad::Var Linear::operator()(ad::Tape& tape, ad::Var x) const {
  return ad::linear(x, tape.constant(weight.value), tape.constant(bias.value));
}

void Linear::collect(ParameterList& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

Conv1d::Conv1d(std::string name, std::size_t in, std::size_t out, std::size_t kernel,
               std::size_t stride_, std::size_t pad_, std::mt19937_64& rng)
    : weight(name + ".weight", uniform_fan_in({out, in, kernel}, in * kernel, rng)),
      bias(name + ".bias", uniform_fan_in({out}, in * kernel, rng)),
      stride(stride_),
      pad(pad_) {}

ad::Var Conv1d::operator()(ad::Tape& tape, ad::Var x) {
  return ad::conv1d(x, tape.param(weight), tape.param(bias), stride, pad);
}

ad::Var Conv1d::operator()(ad::Tape& tape, ad::Var x) const {
  return ad::conv1d(x, tape.constant(weight.value), tape.constant(bias.value), stride, pad);
}

void Conv1d::collect(ParameterList& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

ConvTranspose1d::ConvTranspose1d(std::string name, std::size_t in, std::size_t out,
                                 std::size_t kernel, std::size_t stride_, std::size_t pad_,
                                 std::mt19937_64& rng)
    : weight(name + ".weight", uniform_fan_in({in, out, kernel}, out * kernel, rng)),
      bias(name + ".bias", uniform_fan_in({out}, out * kernel, rng)),
      stride(stride_),
      pad(pad_) {}

ad::Var ConvTranspose1d::operator()(ad::Tape& tape, ad::Var x) {
  return ad::conv_transpose1d(x, tape.param(weight), tape.param(bias), stride, pad);
}

ad::Var ConvTranspose1d::operator()(ad::Tape& tape, ad::Var x) const {
  return ad::conv_transpose1d(x, tape.constant(weight.value), tape.constant(bias.value), stride,
                              pad);
}

void ConvTranspose1d::collect(ParameterList& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

LayerNorm::LayerNorm(std::string name, std::size_t width)
    : gain(name + ".gain", Tensor({width}, 1.0)), bias(name + ".bias", Tensor({width}, 0.0)) {}

ad::Var LayerNorm::operator()(ad::Tape& tape, ad::Var x) {
  return ad::layer_norm(x, tape.param(gain), tape.param(bias));
}

ad::Var LayerNorm::operator()(ad::Tape& tape, ad::Var x) const {
  return ad::layer_norm(x, tape.constant(gain.value), tape.constant(bias.value));
}

void LayerNorm::collect(ParameterList& out) {
  out.push_back(&gain);
  out.push_back(&bias);
}

Adam::Adam(ParameterList params, AdamOptions opts) : params_(std::move(params)), opts_(opts) {
  for (auto* p : params_) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
}

void Adam::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = *params_[i];
    if (p.grad.empty()) continue;
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double g = p.grad[j];
      m[j] = opts_.beta1 * m[j] + (1.0 - opts_.beta1) * g;
      v[j] = opts_.beta2 * v[j] + (1.0 - opts_.beta2) * g * g;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p.value[j] -= lr * mhat / (std::sqrt(vhat) + opts_.eps);
    }
  }
}

double OneCycleSchedule::lr(std::int64_t step) const {
  const double total = static_cast<double>(std::max<std::int64_t>(total_steps, 1));
  const double warm = std::max(1.0, std::floor(warmup_frac * total));
  const double s = static_cast<double>(step);
  const double start = peak_lr / start_div;
  const double final_lr = peak_lr / final_div;
  if (s < warm) return start + (peak_lr - start) * (s / warm);
  const double span = std::max(1.0, total - warm);
  const double progress = std::min(1.0, (s - warm) / span);
  return final_lr + 0.5 * (peak_lr - final_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

std::uint64_t hash_parameters(const ParameterList& params) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto* p : params) {
    for (double v : p->value.data()) {
      unsigned char bytes[sizeof(double)];
      std::memcpy(bytes, &v, sizeof(double));
      for (unsigned char b : bytes) {
        h ^= b;
        h *= 1099511628211ULL;
      }
    }
  }
  return h;
}

}  // namespace tstok::nn
