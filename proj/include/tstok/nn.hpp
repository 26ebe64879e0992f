#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "tstok/autodiff.hpp"

namespace tstok::nn {

/// Uniform(-bound, bound) initialization with bound = 1 / sqrt(fan_in).
Tensor uniform_fan_in(Shape shape, std::size_t fan_in, std::mt19937_64& rng);

class Linear {
 public:
  Linear() = default;
  Linear(std::string name, std::size_t in, std::size_t out, std::mt19937_64& rng);

  ad::Var operator()(ad::Tape& tape, ad::Var x);
  /// Inference: parameters enter the tape as constants.
  ad::Var operator()(ad::Tape& tape, ad::Var x) const;
  void collect(ParameterList& out);

  Parameter weight;  // [out, in]
  Parameter bias;    // [out]
};

class Conv1d {
 public:
  Conv1d() = default;
  Conv1d(std::string name, std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
         std::size_t pad, std::mt19937_64& rng);

  ad::Var operator()(ad::Tape& tape, ad::Var x);
  ad::Var operator()(ad::Tape& tape, ad::Var x) const;
  void collect(ParameterList& out);

  Parameter weight;  // [out, in, kernel]
  Parameter bias;
  std::size_t stride = 1;
  std::size_t pad = 0;
};

class ConvTranspose1d {
 public:
  ConvTranspose1d() = default;
  ConvTranspose1d(std::string name, std::size_t in, std::size_t out, std::size_t kernel,
                  std::size_t stride, std::size_t pad, std::mt19937_64& rng);

  ad::Var operator()(ad::Tape& tape, ad::Var x);
  ad::Var operator()(ad::Tape& tape, ad::Var x) const;
  void collect(ParameterList& out);

  Parameter weight;  // [in, out, kernel]
  Parameter bias;
  std::size_t stride = 1;
  std::size_t pad = 0;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(std::string name, std::size_t width);

  ad::Var operator()(ad::Tape& tape, ad::Var x);
  ad::Var operator()(ad::Tape& tape, ad::Var x) const;
  void collect(ParameterList& out);

  Parameter gain;
  Parameter bias;
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam without weight decay. Moment buffers are keyed by parameter position.
class Adam {
 public:
  explicit Adam(ParameterList params, AdamOptions opts = {});

  void step(double lr);
  std::int64_t steps() const { return t_; }

 private:
  ParameterList params_;
  AdamOptions opts_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::int64_t t_ = 0;
};

/// Linear warmup from peak/start_div to peak over the first warmup_frac of the
/// steps, then cosine annealing down to peak/final_div.
struct OneCycleSchedule {
  double peak_lr = 1e-4;
  std::int64_t total_steps = 1;
  double warmup_frac = 0.3;
  double start_div = 10.0;
  double final_div = 25.0;

  double lr(std::int64_t step) const;
};

/// FNV-1a over the raw bytes of every parameter value, in order.
std::uint64_t hash_parameters(const ParameterList& params);

}  // namespace tstok::nn
