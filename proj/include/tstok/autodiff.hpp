#pragma once

// Minimal reverse-mode differentiation over Tensor values.
//
// A Tape records every op of one forward pass. Parameters enter the tape as
// leaves bound to a Parameter; Tape::backward accumulates into Parameter::grad.
// Ops with fused kernels (conv, linear, attention) use Eigen for the matrix
// products. Everything runs in 64-bit floating point.

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tstok/tensor.hpp"

namespace tstok {

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {}
  void zero_grad();
};

using ParameterList = std::vector<Parameter*>;

void zero_grads(const ParameterList& params);

namespace ad {

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& out_grad)>;

  Var constant(Tensor value);
  /// Leaf whose gradient can be read back with grad() after backward().
  Var input(Tensor value);
  Var param(Parameter& p);

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  /// Gradient of the last backward() target w.r.t. `v` (zeros when unreached).
  Tensor grad(Var v) const;

  /// Reverse sweep from a scalar. Parameter gradients are accumulated (+=).
  void backward(Var scalar);

  std::size_t size() const { return nodes_.size(); }

  // Op construction.
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward fn);
  Tensor& grad_buffer(Var v);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
/// a[..., trailing] + b[trailing]; b broadcast over the leading axes of a.
Var add_trailing(Var a, Var b);
Var square(Var a);
Var relu(Var a);
/// log(1 + exp(a)) + floor
Var softplus(Var a, double floor = 0.0);
Var sum(Var a);
Var mean(Var a);
/// Mean over all elements of smooth-L1(a - b) with transition point delta.
Var smooth_l1(Var a, Var b, double delta = 1.0);

Var reshape(Var a, Shape shape);
/// [N, A, B] -> [N, B, A]
Var swap_last2(Var a);

/// x[..., in] W[out, in]^T + b[out]. Pass an empty Var (tape == nullptr) for no bias.
Var linear(Var x, Var weight, Var bias);

/// x[N, C, L], w[O, C, K], b[O] -> [N, O, (L + 2 pad - K) / stride + 1]
Var conv1d(Var x, Var weight, Var bias, std::size_t stride, std::size_t pad);
/// x[N, C, L], w[C, O, K], b[O] -> [N, O, (L - 1) stride - 2 pad + K]
Var conv_transpose1d(Var x, Var weight, Var bias, std::size_t stride, std::size_t pad);

/// Normalizes over the last axis, then applies gain and bias of that length.
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);

/// Scaled dot-product attention over q, k, v of shape [N, L, M] split into `heads`.
Var attention(Var q, Var k, Var v, std::size_t heads);

/// Inverted dropout. Identity when `training` is false or p == 0.
Var dropout(Var x, double p, bool training, std::mt19937_64& rng);

/// rows[i] = table[indices[i]]; result shape is `shape` (last axis = table width).
Var gather_rows(Var table, std::span<const std::int64_t> indices, Shape shape);

/// Same value, no gradient.
Var stop_gradient(Var a);
/// Value of `quantized`, gradient routed to `continuous` unchanged.
Var straight_through(Var continuous, Var quantized);

}  // namespace ad
}  // namespace tstok
