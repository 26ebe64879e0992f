#include "tstok/autodiff.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace tstok {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

void Parameter::zero_grad() {
  if (grad.shape() != value.shape()) {
    grad = Tensor(value.shape());
  } else {
    grad.fill(0.0);
  }
}

void zero_grads(const ParameterList& params) {
  for (auto* p : params) p->zero_grad();
}

namespace ad {

const Tensor& Var::value() const { return tape->value(*this); }

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::input(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::param(Parameter& p) {
  Node n;
  n.value = p.value;
  n.requires_grad = true;
  n.param = &p;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Tensor Tape::grad(Var v) const {
  const auto& n = nodes_[v.id];
  if (n.grad.empty() && !n.value.empty()) return Tensor(n.value.shape());
  return n.grad;
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, Backward fn) {
  Node n;
  n.value = std::move(value);
  for (auto in : inputs) {
    if (in.tape != nullptr && nodes_[in.id].requires_grad) n.requires_grad = true;
  }
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Tensor& Tape::grad_buffer(Var v) {
  auto& n = nodes_[v.id];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Tape::backward(Var scalar) {
  if (nodes_[scalar.id].value.size() != 1) {
    throw std::invalid_argument("backward target must be a scalar, got " +
                                shape_string(nodes_[scalar.id].value.shape()));
  }
  for (auto& n : nodes_) n.grad = Tensor();
  nodes_[scalar.id].grad = Tensor(nodes_[scalar.id].value.shape(), 1.0);
  for (std::size_t i = scalar.id + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (n.grad.empty() || !n.requires_grad) continue;
    if (n.backward) n.backward(*this, n.grad);
    if (n.param != nullptr) {
      auto& pg = n.param->grad;
      if (pg.shape() != n.value.shape()) pg = Tensor(n.value.shape());
      for (std::size_t j = 0; j < pg.size(); ++j) pg[j] += n.grad[j];
    }
  }
}

namespace {

void accumulate(Tape& t, Var v, const Tensor& g) {
  if (!t.requires_grad(v)) return;
  auto& buf = t.grad_buffer(v);
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

template <class F>
Var unary(Var a, F&& forward_fn, std::function<double(double x, double g)> deriv) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = forward_fn(x[i]);
  return a.tape->record(std::move(y), {a}, [a, deriv](Tape& t, const Tensor& g) {
    if (!t.requires_grad(a)) return;
    const Tensor& xv = t.value(a);
    auto& buf = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) buf[i] += deriv(xv[i], g[i]);
  });
}

// cols[(c * K + k), n * cols_len + o] = src[n, c, o * stride + k - pad]
void im2col(const double* src, std::size_t n_batch, std::size_t channels, std::size_t len,
            std::size_t kernel, std::size_t stride, std::size_t pad, std::size_t cols_len,
            double* cols) {
  const std::size_t width = n_batch * cols_len;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t k = 0; k < kernel; ++k) {
      double* out = cols + (c * kernel + k) * width;
      for (std::size_t n = 0; n < n_batch; ++n) {
        const double* s = src + (n * channels + c) * len;
        for (std::size_t o = 0; o < cols_len; ++o) {
          const auto pos = static_cast<std::ptrdiff_t>(o * stride + k) -
                           static_cast<std::ptrdiff_t>(pad);
          out[n * cols_len + o] =
              (pos >= 0 && pos < static_cast<std::ptrdiff_t>(len)) ? s[pos] : 0.0;
        }
      }
    }
  }
}

// Adjoint of im2col: dst[n, c, o * stride + k - pad] += cols[...]
void col2im(const double* cols, std::size_t n_batch, std::size_t channels, std::size_t len,
            std::size_t kernel, std::size_t stride, std::size_t pad, std::size_t cols_len,
            double* dst) {
  const std::size_t width = n_batch * cols_len;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t k = 0; k < kernel; ++k) {
      const double* in = cols + (c * kernel + k) * width;
      for (std::size_t n = 0; n < n_batch; ++n) {
        double* d = dst + (n * channels + c) * len;
        for (std::size_t o = 0; o < cols_len; ++o) {
          const auto pos = static_cast<std::ptrdiff_t>(o * stride + k) -
                           static_cast<std::ptrdiff_t>(pad);
          if (pos >= 0 && pos < static_cast<std::ptrdiff_t>(len)) d[pos] += in[n * cols_len + o];
        }
      }
    }
  }
}

// [N, C, L] -> [C, N * L]
RowMat channels_first(const Tensor& x) {
  const std::size_t n_batch = x.dim(0), channels = x.dim(1), len = x.dim(2);
  RowMat m(channels, n_batch * len);
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t l = 0; l < len; ++l) m(c, n * len + l) = x.at(n, c, l);
  return m;
}

void check_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw std::invalid_argument(std::string(what) + ": expected rank " + std::to_string(rank) +
                                ", got " + shape_string(t.shape()));
  }
}

}  // namespace

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  return a.tape->record(std::move(y), {a, b}, [a, b](Tape& t, const Tensor& g) {
    accumulate(t, a, g);
    accumulate(t, b, g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
  return a.tape->record(std::move(y), {a, b}, [a, b](Tape& t, const Tensor& g) {
    accumulate(t, a, g);
    if (t.requires_grad(b)) {
      auto& buf = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) buf[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  return a.tape->record(std::move(y), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const Tensor& av = t.value(a);
    const Tensor& bv2 = t.value(b);
    if (t.requires_grad(a)) {
      auto& buf = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i] * bv2[i];
    }
    if (t.requires_grad(b)) {
      auto& buf = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double c) {
  Tensor y = a.value();
  for (auto& v : y.data()) v *= c;
  return a.tape->record(std::move(y), {a}, [a, c](Tape& t, const Tensor& g) {
    auto& buf = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) buf[i] += c * g[i];
  });
}

Var add_trailing(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t inner = bv.size();
  if (inner == 0 || av.size() % inner != 0 || av.rank() < bv.rank() ||
      !std::equal(bv.shape().rbegin(), bv.shape().rend(), av.shape().rbegin())) {
    throw std::invalid_argument("add_trailing: " + shape_string(bv.shape()) +
                                " is not a trailing shape of " + shape_string(av.shape()));
  }
  Tensor y = av;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i % inner];
  return a.tape->record(std::move(y), {a, b}, [a, b, inner](Tape& t, const Tensor& g) {
    accumulate(t, a, g);
    if (t.requires_grad(b)) {
      auto& buf = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) buf[i % inner] += g[i];
    }
  });
}

Var square(Var a) {
  return unary(
      a, [](double x) { return x * x; },
      [](double x, double g) { return 2.0 * x * g; });
}

Var relu(Var a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double g) { return x > 0.0 ? g : 0.0; });
}

Var softplus(Var a, double floor) {
  return unary(
      a,
      [floor](double x) { return (x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x))) + floor; },
      [](double x, double g) {
        const double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        return s * g;
      });
}

Var sum(Var a) {
  const Tensor& av = a.value();
  double s = 0.0;
  for (double v : av.data()) s += v;
  return a.tape->record(Tensor({1}, {s}), {a}, [a](Tape& t, const Tensor& g) {
    auto& buf = t.grad_buffer(a);
    for (auto& v : buf.data()) v += g[0];
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

Var smooth_l1(Var a, Var b, double delta) {
  require_same_shape(a.value(), b.value(), "smooth_l1");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const double n = static_cast<double>(av.size());
  double total = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double u = std::abs(av[i] - bv[i]);
    total += u < delta ? 0.5 * u * u / delta : u - 0.5 * delta;
  }
  return a.tape->record(Tensor({1}, {total / n}), {a, b}, [a, b, delta, n](Tape& t, const Tensor& g) {
    const Tensor& av2 = t.value(a);
    const Tensor& bv2 = t.value(b);
    Tensor d(av2.shape());
    for (std::size_t i = 0; i < av2.size(); ++i) {
      const double u = av2[i] - bv2[i];
      d[i] = (std::abs(u) < delta ? u / delta : (u > 0.0 ? 1.0 : -1.0)) * g[0] / n;
    }
    accumulate(t, a, d);
    if (t.requires_grad(b)) {
      auto& buf = t.grad_buffer(b);
      for (std::size_t i = 0; i < d.size(); ++i) buf[i] -= d[i];
    }
  });
}

Var reshape(Var a, Shape shape) {
  Tensor y = a.value().reshaped(std::move(shape));
  return a.tape->record(std::move(y), {a}, [a](Tape& t, const Tensor& g) {
    auto& buf = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
  });
}

Var swap_last2(Var a) {
  const Tensor& x = a.value();
  check_rank(x, 3, "swap_last2");
  const std::size_t n_batch = x.dim(0), rows = x.dim(1), cols = x.dim(2);
  Tensor y({n_batch, cols, rows});
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) y.at(n, j, i) = x.at(n, i, j);
  return a.tape->record(std::move(y), {a}, [a, n_batch, rows, cols](Tape& t, const Tensor& g) {
    auto& buf = t.grad_buffer(a);
    for (std::size_t n = 0; n < n_batch; ++n)
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) buf.at(n, i, j) += g.at(n, j, i);
  });
}

Var linear(Var x, Var weight, Var bias) {
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  check_rank(wv, 2, "linear weight");
  const std::size_t in = wv.dim(1), out = wv.dim(0);
  if (xv.rank() == 0 || xv.shape().back() != in) {
    throw std::invalid_argument("linear: input " + shape_string(xv.shape()) +
                                " incompatible with weight " + shape_string(wv.shape()));
  }
  const bool has_bias = bias.tape != nullptr;
  if (has_bias && bias.value().size() != out) {
    throw std::invalid_argument("linear: bias length mismatch");
  }
  const std::size_t rows = xv.size() / in;
  Shape out_shape = xv.shape();
  out_shape.back() = out;
  Tensor y(out_shape);
  MatMap ym(y.data().data(), rows, out);
  ym.noalias() = ConstMatMap(xv.data().data(), rows, in) *
                 ConstMatMap(wv.data().data(), out, in).transpose();
  if (has_bias) {
    const auto& bv = bias.value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t o = 0; o < out; ++o) ym(r, o) += bv[o];
  }
  auto fn = [x, weight, bias, has_bias, rows, in, out](Tape& t, const Tensor& g) {
    ConstMatMap gm(g.data().data(), rows, out);
    if (t.requires_grad(x)) {
      auto& buf = t.grad_buffer(x);
      MatMap(buf.data().data(), rows, in).noalias() +=
          gm * ConstMatMap(t.value(weight).data().data(), out, in);
    }
    if (t.requires_grad(weight)) {
      auto& buf = t.grad_buffer(weight);
      MatMap(buf.data().data(), out, in).noalias() +=
          gm.transpose() * ConstMatMap(t.value(x).data().data(), rows, in);
    }
    if (has_bias && t.requires_grad(bias)) {
      auto& buf = t.grad_buffer(bias);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t o = 0; o < out; ++o) buf[o] += gm(r, o);
    }
  };
  if (has_bias) return x.tape->record(std::move(y), {x, weight, bias}, fn);
  return x.tape->record(std::move(y), {x, weight}, fn);
}

Var conv1d(Var x, Var weight, Var bias, std::size_t stride, std::size_t pad) {
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  check_rank(xv, 3, "conv1d input");
  check_rank(wv, 3, "conv1d weight");
  const std::size_t n_batch = xv.dim(0), channels = xv.dim(1), len = xv.dim(2);
  const std::size_t out_ch = wv.dim(0), kernel = wv.dim(2);
  if (wv.dim(1) != channels) {
    throw std::invalid_argument("conv1d: input channels " + std::to_string(channels) +
                                " vs weight " + shape_string(wv.shape()));
  }
  if (len + 2 * pad < kernel) throw std::invalid_argument("conv1d: input shorter than kernel");
  const std::size_t out_len = (len + 2 * pad - kernel) / stride + 1;
  const std::size_t ck = channels * kernel, width = n_batch * out_len;

  RowMat cols(ck, width);
  im2col(xv.data().data(), n_batch, channels, len, kernel, stride, pad, out_len, cols.data());
  RowMat ym = ConstMatMap(wv.data().data(), out_ch, ck) * cols;
  Tensor y({n_batch, out_ch, out_len});
  const auto& bv = bias.value();
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t o = 0; o < out_ch; ++o)
      for (std::size_t l = 0; l < out_len; ++l) y.at(n, o, l) = ym(o, n * out_len + l) + bv[o];

  return x.tape->record(
      std::move(y), {x, weight, bias},
      [=](Tape& t, const Tensor& g) {
        RowMat gm(out_ch, width);
        for (std::size_t n = 0; n < n_batch; ++n)
          for (std::size_t o = 0; o < out_ch; ++o)
            for (std::size_t l = 0; l < out_len; ++l) gm(o, n * out_len + l) = g.at(n, o, l);
        if (t.requires_grad(bias)) {
          auto& buf = t.grad_buffer(bias);
          for (std::size_t o = 0; o < out_ch; ++o) buf[o] += gm.row(o).sum();
        }
        const bool need_w = t.requires_grad(weight);
        const bool need_x = t.requires_grad(x);
        if (need_w) {
          RowMat c(ck, width);
          im2col(t.value(x).data().data(), n_batch, channels, len, kernel, stride, pad, out_len,
                 c.data());
          auto& buf = t.grad_buffer(weight);
          MatMap(buf.data().data(), out_ch, ck).noalias() += gm * c.transpose();
        }
        if (need_x) {
          RowMat dcols = ConstMatMap(t.value(weight).data().data(), out_ch, ck).transpose() * gm;
          auto& buf = t.grad_buffer(x);
          col2im(dcols.data(), n_batch, channels, len, kernel, stride, pad, out_len,
                 buf.data().data());
        }
      });
}

Var conv_transpose1d(Var x, Var weight, Var bias, std::size_t stride, std::size_t pad) {
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  check_rank(xv, 3, "conv_transpose1d input");
  check_rank(wv, 3, "conv_transpose1d weight");
  const std::size_t n_batch = xv.dim(0), channels = xv.dim(1), len = xv.dim(2);
  const std::size_t out_ch = wv.dim(1), kernel = wv.dim(2);
  if (wv.dim(0) != channels) {
    throw std::invalid_argument("conv_transpose1d: input channels " + std::to_string(channels) +
                                " vs weight " + shape_string(wv.shape()));
  }
  if ((len - 1) * stride + kernel < 2 * pad) {
    throw std::invalid_argument("conv_transpose1d: padding exceeds output");
  }
  const std::size_t out_len = (len - 1) * stride + kernel - 2 * pad;
  const std::size_t ok = out_ch * kernel, width = n_batch * len;

  RowMat xm = channels_first(xv);
  RowMat cols = ConstMatMap(wv.data().data(), channels, ok).transpose() * xm;
  Tensor y({n_batch, out_ch, out_len});
  col2im(cols.data(), n_batch, out_ch, out_len, kernel, stride, pad, len, y.data().data());
  const auto& bv = bias.value();
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t o = 0; o < out_ch; ++o)
      for (std::size_t l = 0; l < out_len; ++l) y.at(n, o, l) += bv[o];

  return x.tape->record(
      std::move(y), {x, weight, bias},
      [=](Tape& t, const Tensor& g) {
        if (t.requires_grad(bias)) {
          auto& buf = t.grad_buffer(bias);
          for (std::size_t n = 0; n < n_batch; ++n)
            for (std::size_t o = 0; o < out_ch; ++o)
              for (std::size_t l = 0; l < out_len; ++l) buf[o] += g.at(n, o, l);
        }
        RowMat dcols(ok, width);
        im2col(g.data().data(), n_batch, out_ch, out_len, kernel, stride, pad, len, dcols.data());
        if (t.requires_grad(weight)) {
          auto& buf = t.grad_buffer(weight);
          MatMap(buf.data().data(), channels, ok).noalias() +=
              channels_first(t.value(x)) * dcols.transpose();
        }
        if (t.requires_grad(x)) {
          RowMat dx = ConstMatMap(t.value(weight).data().data(), channels, ok) * dcols;
          auto& buf = t.grad_buffer(x);
          for (std::size_t n = 0; n < n_batch; ++n)
            for (std::size_t c = 0; c < channels; ++c)
              for (std::size_t l = 0; l < len; ++l) buf.at(n, c, l) += dx(c, n * len + l);
        }
      });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Tensor& xv = x.value();
  const std::size_t width = xv.shape().back();
  if (gain.value().size() != width || bias.value().size() != width) {
    throw std::invalid_argument("layer_norm: gain/bias length must equal last axis");
  }
  const std::size_t rows = xv.size() / width;
  Tensor normed(xv.shape());
  std::vector<double> inv_std(rows);
  Tensor y(xv.shape());
  const auto& gv = gain.value();
  const auto& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data().data() + r * width;
    double mu = 0.0;
    for (std::size_t j = 0; j < width; ++j) mu += in[j];
    mu /= static_cast<double>(width);
    double var = 0.0;
    for (std::size_t j = 0; j < width; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(width);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < width; ++j) {
      const double h = (in[j] - mu) * inv_std[r];
      normed[r * width + j] = h;
      y[r * width + j] = h * gv[j] + bv[j];
    }
  }
  return x.tape->record(
      std::move(y), {x, gain, bias},
      [x, gain, bias, rows, width, normed = std::move(normed),
       inv_std = std::move(inv_std)](Tape& t, const Tensor& g) {
        const auto& gv2 = t.value(gain);
        if (t.requires_grad(gain)) {
          auto& buf = t.grad_buffer(gain);
          for (std::size_t i = 0; i < g.size(); ++i) buf[i % width] += g[i] * normed[i];
        }
        if (t.requires_grad(bias)) {
          auto& buf = t.grad_buffer(bias);
          for (std::size_t i = 0; i < g.size(); ++i) buf[i % width] += g[i];
        }
        if (!t.requires_grad(x)) return;
        auto& buf = t.grad_buffer(x);
        const double w = static_cast<double>(width);
        std::vector<double> dh(width);
        for (std::size_t r = 0; r < rows; ++r) {
          double s1 = 0.0, s2 = 0.0;
          for (std::size_t j = 0; j < width; ++j) {
            dh[j] = g[r * width + j] * gv2[j];
            s1 += dh[j];
            s2 += dh[j] * normed[r * width + j];
          }
          for (std::size_t j = 0; j < width; ++j) {
            buf[r * width + j] +=
                inv_std[r] / w * (w * dh[j] - s1 - normed[r * width + j] * s2);
          }
        }
      });
}

Var attention(Var q, Var k, Var v, std::size_t heads) {
  const Tensor& qv = q.value();
  check_rank(qv, 3, "attention");
  require_same_shape(qv, k.value(), "attention q/k");
  require_same_shape(qv, v.value(), "attention q/v");
  const std::size_t n_batch = qv.dim(0), len = qv.dim(1), model = qv.dim(2);
  if (heads == 0 || model % heads != 0) {
    throw std::invalid_argument("attention: model width " + std::to_string(model) +
                                " not divisible by heads " + std::to_string(heads));
  }
  const std::size_t head_dim = model / heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  AlignedBuffer probs(n_batch * heads * len * len);
  Tensor y(qv.shape());
  const auto& kv = k.value();
  const auto& vv = v.value();
  const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(model));
  for (std::size_t n = 0; n < n_batch; ++n) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = n * len * model + h * head_dim;
      ConstStridedMap qh(qv.data().data() + off, len, head_dim, stride);
      ConstStridedMap kh(kv.data().data() + off, len, head_dim, stride);
      ConstStridedMap vh(vv.data().data() + off, len, head_dim, stride);
      MatMap p(probs.data() + (n * heads + h) * len * len, len, len);
      p.noalias() = (qh * kh.transpose()) * inv_scale;
      for (std::size_t i = 0; i < len; ++i) {
        const double m = p.row(i).maxCoeff();
        p.row(i) = (p.row(i).array() - m).exp();
        p.row(i) /= p.row(i).sum();
      }
      StridedMap(y.data().data() + off, len, head_dim, stride).noalias() = p * vh;
    }
  }
  return q.tape->record(
      std::move(y), {q, k, v},
      [=, probs = std::move(probs)](Tape& t, const Tensor& g) {
        const auto& qv2 = t.value(q);
        const auto& kv2 = t.value(k);
        const auto& vv2 = t.value(v);
        Tensor* dq = t.requires_grad(q) ? &t.grad_buffer(q) : nullptr;
        Tensor* dk = t.requires_grad(k) ? &t.grad_buffer(k) : nullptr;
        Tensor* dv = t.requires_grad(v) ? &t.grad_buffer(v) : nullptr;
        RowMat dp(len, len);
        for (std::size_t n = 0; n < n_batch; ++n) {
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = n * len * model + h * head_dim;
            ConstStridedMap qh(qv2.data().data() + off, len, head_dim, stride);
            ConstStridedMap kh(kv2.data().data() + off, len, head_dim, stride);
            ConstStridedMap vh(vv2.data().data() + off, len, head_dim, stride);
            ConstStridedMap gh(g.data().data() + off, len, head_dim, stride);
            ConstMatMap p(probs.data() + (n * heads + h) * len * len, len, len);
            if (dv) StridedMap(dv->data().data() + off, len, head_dim, stride).noalias() += p.transpose() * gh;
            dp.noalias() = gh * vh.transpose();
            for (std::size_t i = 0; i < len; ++i) {
              const double dot = dp.row(i).dot(p.row(i));
              dp.row(i) = p.row(i).array() * (dp.row(i).array() - dot);
            }
            dp *= inv_scale;
            if (dq) StridedMap(dq->data().data() + off, len, head_dim, stride).noalias() += dp * kh;
            if (dk) StridedMap(dk->data().data() + off, len, head_dim, stride).noalias() += dp.transpose() * qh;
          }
        }
      });
}

Var dropout(Var x, double p, bool training, std::mt19937_64& rng) {
  if (!training || p <= 0.0) return x;
  if (p >= 1.0) throw std::invalid_argument("dropout: p must be < 1");
  const Tensor& xv = x.value();
  std::vector<double> keep(xv.size());
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double s = 1.0 / (1.0 - p);
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    keep[i] = unif(rng) >= p ? s : 0.0;
    y[i] = xv[i] * keep[i];
  }
  return x.tape->record(std::move(y), {x}, [x, keep = std::move(keep)](Tape& t, const Tensor& g) {
    auto& buf = t.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i] * keep[i];
  });
}

Var gather_rows(Var table, std::span<const std::int64_t> indices, Shape shape) {
  const Tensor& tv = table.value();
  check_rank(tv, 2, "gather_rows table");
  const std::size_t rows = tv.dim(0), width = tv.dim(1);
  if (shape.empty() || shape.back() != width || shape_size(shape) != indices.size() * width) {
    throw std::invalid_argument("gather_rows: shape " + shape_string(shape) +
                                " inconsistent with indices/table");
  }
  Tensor y(std::move(shape));
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || static_cast<std::size_t>(indices[i]) >= rows) {
      throw std::out_of_range("gather_rows: index " + std::to_string(indices[i]) +
                              " outside table of " + std::to_string(rows) + " rows");
    }
    std::copy_n(tv.data().data() + indices[i] * width, width, y.data().data() + i * width);
  }
  std::vector<std::int64_t> idx(indices.begin(), indices.end());
  return table.tape->record(std::move(y), {table}, [table, width, idx = std::move(idx)](Tape& t, const Tensor& g) {
    auto& buf = t.grad_buffer(table);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < width; ++j) buf[idx[i] * width + j] += g[i * width + j];
  });
}

Var stop_gradient(Var a) { return a.tape->constant(a.value()); }

Var straight_through(Var continuous, Var quantized) {
  require_same_shape(continuous.value(), quantized.value(), "straight_through");
  Tensor y = quantized.value();
  return continuous.tape->record(std::move(y), {continuous}, [continuous](Tape& t, const Tensor& g) {
    accumulate(t, continuous, g);
  });
}

}  // namespace ad
}  // namespace tstok
