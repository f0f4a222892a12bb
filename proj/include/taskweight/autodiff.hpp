// Reverse-mode differentiation over dense tensors.
//
// The graph is define-by-run: every op evaluates eagerly when recorded, so
// insertion order is already a topological order. recompute() re-runs the
// recorded forward closures (used after perturbing leaf values, e.g. by
// grad_check), backward() runs one reverse sweep from a scalar output.
// Graphs are rebuilt per training step, which keeps variable-length inputs
// honest.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "taskweight/common.hpp"
#include "taskweight/tensor.hpp"

namespace taskweight {

// log/pow clamp their arguments here so cross-entropy stays finite at
// saturated posteriors. This perturbs gradients below the clamp (they
// become exactly zero there).
inline constexpr double kPosteriorClamp = 1e-12;

class Graph;

struct Value {
  Graph* graph = nullptr;
  std::size_t id = 0;
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Value leaf(Tensor t) {
    nodes_.push_back(Node{std::move(t), Tensor{}, true, nullptr, nullptr, {}});
    return Value{this, nodes_.size() - 1};
  }
  // A constant is a leaf whose gradient nobody asks for.
  Value constant(Tensor t) { return leaf(std::move(t)); }

  const Tensor& value(Value v) const { return nodes_[v.id].value; }
  Tensor& leaf_value(Value v) {
    if (!nodes_[v.id].is_leaf) throw ValidationError("graph: only leaf values are mutable");
    return nodes_[v.id].value;
  }
  const Tensor& grad(Value v) const { return nodes_[v.id].grad; }

  std::size_t node_count() const { return nodes_.size(); }

  // Re-evaluates every non-leaf node in insertion (= topological) order.
  void recompute() {
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      if (nodes_[i].forward) nodes_[i].forward(*this, i);
  }

  // Reverse accumulation from a scalar output. Gradients of untouched
  // leaves come out zero.
  void backward(Value out) {
    if (out.graph != this) throw ValidationError("backward: value belongs to another graph");
    if (nodes_[out.id].value.size() != 1)
      throw ValidationError("backward: output must be scalar, got shape " +
                            nodes_[out.id].value.shape_string());
    for (Node& n : nodes_) {
      n.grad = Tensor(n.value.shape);
    }
    nodes_[out.id].grad.data[0] = 1.0;
    for (std::size_t i = nodes_.size(); i-- > 0;)
      if (nodes_[i].backward) nodes_[i].backward(*this, i);
  }

  // ---- primitive ops -----------------------------------------------------

  Value add(Value a, Value b) { return binary_elementwise("add", a, b, [](double x, double y) { return x + y; }, [](double, double, double g) { return std::pair<double, double>{g, g}; }); }
  Value sub(Value a, Value b) { return binary_elementwise("sub", a, b, [](double x, double y) { return x - y; }, [](double, double, double g) { return std::pair<double, double>{g, -g}; }); }
  Value mul(Value a, Value b) { return binary_elementwise("mul", a, b, [](double x, double y) { return x * y; }, [](double x, double y, double g) { return std::pair<double, double>{g * y, g * x}; }); }
  Value div(Value a, Value b) { return binary_elementwise("div", a, b, [](double x, double y) { return x / y; }, [](double x, double y, double g) { return std::pair<double, double>{g / y, -g * x / (y * y)}; }); }

  // a*x + b with scalar coefficients.
  Value affine(Value x, double a, double b) {
    check_same_graph("affine", x);
    std::size_t xi = x.id;
    auto fw = [xi, a, b](Graph& g, std::size_t self) {
      const Tensor& in = g.nodes_[xi].value;
      Tensor& out = g.nodes_[self].value;
      out.shape = in.shape;
      out.data.resize(in.size());
      for (std::size_t i = 0; i < in.size(); ++i) out.data[i] = a * in.data[i] + b;
    };
    auto bw = [xi, a](Graph& g, std::size_t self) {
      const Tensor& go = g.nodes_[self].grad;
      Tensor& gi = g.nodes_[xi].grad;
      for (std::size_t i = 0; i < go.size(); ++i) gi.data[i] += a * go.data[i];
    };
    return emplace(fw, bw, {xi});
  }

  Value exp(Value x) {
    return unary("exp", x, [](double v) { return std::exp(v); },
                 [](double, double y, double g) { return g * y; });
  }

  // Natural log of max(x, kPosteriorClamp).
  Value log(Value x) {
    return unary("log", x,
                 [](double v) { return std::log(std::max(v, kPosteriorClamp)); },
                 [](double v, double, double g) {
                   return v >= kPosteriorClamp ? g / v : 0.0;
                 });
  }

  // max(x, kPosteriorClamp)^p with constant exponent.
  Value pow(Value x, double p) {
    return unary("pow", x,
                 [p](double v) { return std::pow(std::max(v, kPosteriorClamp), p); },
                 [p](double v, double, double g) {
                   if (v < kPosteriorClamp || p == 0.0) return 0.0;
                   return g * p * std::pow(v, p - 1.0);
                 });
  }

  Value sigmoid(Value x) {
    return unary("sigmoid", x,
                 [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
                 [](double, double y, double g) { return g * y * (1.0 - y); });
  }

  Value tanh(Value x) {
    return unary("tanh", x, [](double v) { return std::tanh(v); },
                 [](double, double y, double g) { return g * (1.0 - y * y); });
  }

  Value leaky_relu(Value x, double slope) {
    return unary("leaky_relu", x,
                 [slope](double v) { return v >= 0.0 ? v : slope * v; },
                 [slope](double v, double, double g) { return v >= 0.0 ? g : slope * g; });
  }

  // Softmax along the last axis, stabilized by max subtraction.
  Value softmax(Value x) {
    check_same_graph("softmax", x);
    std::size_t xi = x.id;
    if (nodes_[xi].value.rank() < 1) throw ValidationError("softmax: rank-0 input");
    auto fw = [xi](Graph& g, std::size_t self) {
      const Tensor& in = g.nodes_[xi].value;
      Tensor& out = g.nodes_[self].value;
      out.shape = in.shape;
      out.data.resize(in.size());
      std::size_t n = in.shape.back();
      std::size_t rows = in.size() / n;
      for (std::size_t r = 0; r < rows; ++r) {
        const double* src = in.data.data() + r * n;
        double* dst = out.data.data() + r * n;
        double m = src[0];
        for (std::size_t i = 1; i < n; ++i) m = std::max(m, src[i]);
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += (dst[i] = std::exp(src[i] - m));
        for (std::size_t i = 0; i < n; ++i) dst[i] /= s;
      }
    };
    auto bw = [xi](Graph& g, std::size_t self) {
      const Tensor& y = g.nodes_[self].value;
      const Tensor& go = g.nodes_[self].grad;
      Tensor& gi = g.nodes_[xi].grad;
      std::size_t n = y.shape.back();
      std::size_t rows = y.size() / n;
      for (std::size_t r = 0; r < rows; ++r) {
        const double* yr = y.data.data() + r * n;
        const double* gr = go.data.data() + r * n;
        double* gx = gi.data.data() + r * n;
        double dot = 0.0;
        for (std::size_t i = 0; i < n; ++i) dot += gr[i] * yr[i];
        for (std::size_t i = 0; i < n; ++i) gx[i] += yr[i] * (gr[i] - dot);
      }
    };
    return emplace(fw, bw, {xi});
  }

  // Sum of all entries -> scalar.
  Value reduce_sum(Value x) {
    check_same_graph("reduce_sum", x);
    std::size_t xi = x.id;
    auto fw = [xi](Graph& g, std::size_t self) {
      const Tensor& in = g.nodes_[xi].value;
      Tensor& out = g.nodes_[self].value;
      out.shape = {1};
      out.data.assign(1, 0.0);
      for (double v : in.data) out.data[0] += v;
    };
    auto bw = [xi](Graph& g, std::size_t self) {
      double go = g.nodes_[self].grad.data[0];
      for (double& v : g.nodes_[xi].grad.data) v += go;
    };
    return emplace(fw, bw, {xi});
  }

  // Max over all entries -> scalar; ties resolve to the first index.
  Value reduce_max(Value x) {
    check_same_graph("reduce_max", x);
    std::size_t xi = x.id;
    auto argmax = std::make_shared<std::size_t>(0);
    auto fw = [xi, argmax](Graph& g, std::size_t self) {
      const Tensor& in = g.nodes_[xi].value;
      Tensor& out = g.nodes_[self].value;
      out.shape = {1};
      out.data.resize(1);
      std::size_t best = 0;
      for (std::size_t i = 1; i < in.size(); ++i)
        if (in.data[i] > in.data[best]) best = i;
      *argmax = best;
      out.data[0] = in.data[best];
    };
    auto bw = [xi, argmax](Graph& g, std::size_t self) {
      g.nodes_[xi].grad.data[*argmax] += g.nodes_[self].grad.data[0];
    };
    return emplace(fw, bw, {xi});
  }

  // Sum over the axes marked true, keeping them as extent-1 dims.
  Value reduce_sum_axes(Value x, const std::vector<bool>& axes) {
    check_same_graph("reduce_sum_axes", x);
    std::size_t xi = x.id;
    const Tensor& in = nodes_[xi].value;
    if (axes.size() != in.rank())
      throw ValidationError("reduce_sum_axes: axes mask rank mismatch for " + in.shape_string());
    std::vector<std::size_t> out_shape = in.shape;
    for (std::size_t d = 0; d < axes.size(); ++d)
      if (axes[d]) out_shape[d] = 1;
    auto fw = [xi, out_shape](Graph& g, std::size_t self) {
      const Tensor& src = g.nodes_[xi].value;
      Tensor& out = g.nodes_[self].value;
      out.shape = out_shape;
      out.data.assign(Tensor::numel(out_shape), 0.0);
      g.for_each_mapped(src.shape, out_shape, [&](std::size_t si, std::size_t oi) {
        out.data[oi] += src.data[si];
      });
    };
    auto bw = [xi, out_shape](Graph& g, std::size_t self) {
      const Tensor& go = g.nodes_[self].grad;
      Tensor& gi = g.nodes_[xi].grad;
      g.for_each_mapped(gi.shape, out_shape, [&](std::size_t si, std::size_t oi) {
        gi.data[si] += go.data[oi];
      });
    };
    return emplace(fw, bw, {xi});
  }

  // Numpy-style broadcast: same rank, extent-1 axes expand to the target.
  Value broadcast(Value x, std::vector<std::size_t> target) {
    check_same_graph("broadcast", x);
    std::size_t xi = x.id;
    const Tensor& in = nodes_[xi].value;
    if (in.rank() != target.size())
      throw ValidationError("broadcast: rank mismatch " + in.shape_string());
    for (std::size_t d = 0; d < target.size(); ++d)
      if (in.shape[d] != target[d] && in.shape[d] != 1)
        throw ValidationError("broadcast: cannot expand " + in.shape_string());
    auto fw = [xi, target](Graph& g, std::size_t self) {
      const Tensor& src = g.nodes_[xi].value;
      Tensor& out = g.nodes_[self].value;
      out.shape = target;
      out.data.resize(Tensor::numel(target));
      g.for_each_mapped(target, src.shape, [&](std::size_t oi, std::size_t si) {
        out.data[oi] = src.data[si];
      });
    };
    auto bw = [xi, target](Graph& g, std::size_t self) {
      const Tensor& go = g.nodes_[self].grad;
      Tensor& gi = g.nodes_[xi].grad;
      g.for_each_mapped(target, gi.shape, [&](std::size_t oi, std::size_t si) {
        gi.data[si] += go.data[oi];
      });
    };
    return emplace(fw, bw, {xi});
  }

  Value reshape(Value x, std::vector<std::size_t> shape) {
    check_same_graph("reshape", x);
    std::size_t xi = x.id;
    if (Tensor::numel(shape) != nodes_[xi].value.size())
      throw ValidationError("reshape: element count mismatch, " +
                            nodes_[xi].value.shape_string());
    auto fw = [xi, shape](Graph& g, std::size_t self) {
      g.nodes_[self].value.shape = shape;
      g.nodes_[self].value.data = g.nodes_[xi].value.data;
    };
    auto bw = [xi](Graph& g, std::size_t self) {
      const Tensor& go = g.nodes_[self].grad;
      Tensor& gi = g.nodes_[xi].grad;
      for (std::size_t i = 0; i < go.size(); ++i) gi.data[i] += go.data[i];
    };
    return emplace(fw, bw, {xi});
  }

  Value permute(Value x, std::vector<std::size_t> perm) {
    check_same_graph("permute", x);
    std::size_t xi = x.id;
    const Tensor& in = nodes_[xi].value;
    if (perm.size() != in.rank()) throw ValidationError("permute: rank mismatch");
    auto fw = [xi, perm](Graph& g, std::size_t self) {
      Tensor& src = g.nodes_[xi].value;
      Tensor& out = g.nodes_[self].value;
      out.shape.resize(perm.size());
      for (std::size_t d = 0; d < perm.size(); ++d) out.shape[d] = src.shape[perm[d]];
      out.data.resize(src.size());
      g.permute_copy(src, perm, out.data.data(), /*scatter=*/false);
    };
    auto bw = [xi, perm](Graph& g, std::size_t self) {
      g.permute_copy(g.nodes_[xi].grad, perm, g.nodes_[self].grad.data.data(),
                     /*scatter=*/true);
    };
    return emplace(fw, bw, {xi});
  }

  // Contiguous slice along one axis.
  Value slice(Value x, std::size_t axis, std::size_t start, std::size_t len) {
    check_same_graph("slice", x);
    std::size_t xi = x.id;
    const Tensor& in = nodes_[xi].value;
    if (axis >= in.rank() || start + len > in.shape[axis])
      throw ValidationError("slice: range out of bounds for " + in.shape_string());
    auto fw = [xi, axis, start, len](Graph& g, std::size_t self) {
      Tensor& src = g.nodes_[xi].value;
      Tensor& out = g.nodes_[self].value;
      out.shape = src.shape;
      out.shape[axis] = len;
      out.data.resize(Tensor::numel(out.shape));
      g.slice_copy(src, axis, start, len, out.data.data(), false);
    };
    auto bw = [xi, axis, start, len](Graph& g, std::size_t self) {
      g.slice_copy(g.nodes_[xi].grad, axis, start, len,
                   g.nodes_[self].grad.data.data(), true);
    };
    return emplace(fw, bw, {xi});
  }

  // Index along one axis, dropping it: select((B,L,F), 1, l) -> (B,F).
  Value select(Value x, std::size_t axis, std::size_t index) {
    const Tensor& in = nodes_[x.id].value;
    std::vector<std::size_t> squeezed = in.shape;
    squeezed.erase(squeezed.begin() + static_cast<std::ptrdiff_t>(axis));
    return reshape(slice(x, axis, index, 1), squeezed);
  }

  Value concat(Value a, Value b, std::size_t axis) {
    check_same_graph("concat", a);
    check_same_graph("concat", b);
    const Tensor& ta = nodes_[a.id].value;
    const Tensor& tb = nodes_[b.id].value;
    if (ta.rank() != tb.rank() || axis >= ta.rank())
      throw ValidationError("concat: rank mismatch " + ta.shape_string() + " vs " +
                            tb.shape_string());
    for (std::size_t d = 0; d < ta.rank(); ++d)
      if (d != axis && ta.shape[d] != tb.shape[d])
        throw ValidationError("concat: shape mismatch " + ta.shape_string() + " vs " +
                              tb.shape_string());
    std::size_t ai = a.id, bi = b.id;
    auto fw = [ai, bi, axis](Graph& g, std::size_t self) {
      Tensor& x = g.nodes_[ai].value;
      Tensor& y = g.nodes_[bi].value;
      Tensor& out = g.nodes_[self].value;
      out.shape = x.shape;
      out.shape[axis] = x.shape[axis] + y.shape[axis];
      out.data.resize(Tensor::numel(out.shape));
      g.concat_copy(x, y, axis, out, false);
    };
    auto bw = [ai, bi, axis](Graph& g, std::size_t self) {
      g.concat_copy(g.nodes_[ai].grad, g.nodes_[bi].grad, axis, g.nodes_[self].grad, true);
    };
    return emplace(fw, bw, {ai, bi});
  }

  // Stacks equally-shaped values along a new leading-position axis.
  Value stack(const std::vector<Value>& xs, std::size_t axis) {
    if (xs.empty()) throw ValidationError("stack: no inputs");
    std::vector<std::size_t> ids;
    const Tensor& first = nodes_[xs[0].id].value;
    for (Value v : xs) {
      check_same_graph("stack", v);
      if (!(nodes_[v.id].value.shape == first.shape))
        throw ValidationError("stack: shape mismatch");
      ids.push_back(v.id);
    }
    if (axis > first.rank()) throw ValidationError("stack: axis out of range");
    std::vector<std::size_t> out_shape = first.shape;
    out_shape.insert(out_shape.begin() + static_cast<std::ptrdiff_t>(axis), ids.size());
    auto fw = [ids, axis, out_shape](Graph& g, std::size_t self) {
      Tensor& out = g.nodes_[self].value;
      out.shape = out_shape;
      out.data.resize(Tensor::numel(out_shape));
      std::size_t outer = 1, inner = 1;
      for (std::size_t d = 0; d < axis; ++d) outer *= out_shape[d];
      for (std::size_t d = axis + 1; d < out_shape.size(); ++d) inner *= out_shape[d];
      for (std::size_t k = 0; k < ids.size(); ++k) {
        const Tensor& src = g.nodes_[ids[k]].value;
        for (std::size_t o = 0; o < outer; ++o)
          std::copy_n(src.data.data() + o * inner, inner,
                      out.data.data() + (o * ids.size() + k) * inner);
      }
    };
    auto bw = [ids, axis, out_shape](Graph& g, std::size_t self) {
      const Tensor& go = g.nodes_[self].grad;
      std::size_t outer = 1, inner = 1;
      for (std::size_t d = 0; d < axis; ++d) outer *= out_shape[d];
      for (std::size_t d = axis + 1; d < out_shape.size(); ++d) inner *= out_shape[d];
      for (std::size_t k = 0; k < ids.size(); ++k) {
        Tensor& gi = g.nodes_[ids[k]].grad;
        for (std::size_t o = 0; o < outer; ++o) {
          const double* src = go.data.data() + (o * ids.size() + k) * inner;
          double* dst = gi.data.data() + o * inner;
          for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
      }
    };
    return emplace(fw, bw, ids);
  }

  // Plain 2D matrix product (M,K)x(K,N) -> (M,N).
  Value matmul(Value a, Value b) {
    check_same_graph("matmul", a);
    check_same_graph("matmul", b);
    const Tensor& ta = nodes_[a.id].value;
    const Tensor& tb = nodes_[b.id].value;
    if (ta.rank() != 2 || tb.rank() != 2 || ta.shape[1] != tb.shape[0])
      throw ValidationError("matmul: incompatible shapes " + ta.shape_string() + " x " +
                            tb.shape_string());
    std::size_t ai = a.id, bi = b.id;
    auto fw = [ai, bi](Graph& g, std::size_t self) {
      const Tensor& x = g.nodes_[ai].value;
      const Tensor& y = g.nodes_[bi].value;
      Tensor& out = g.nodes_[self].value;
      std::size_t m = x.shape[0], k = x.shape[1], n = y.shape[1];
      out.shape = {m, n};
      out.data.assign(m * n, 0.0);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double xv = x.data[i * k + p];
          const double* yr = y.data.data() + p * n;
          double* orow = out.data.data() + i * n;
          for (std::size_t j = 0; j < n; ++j) orow[j] += xv * yr[j];
        }
    };
    auto bw = [ai, bi](Graph& g, std::size_t self) {
      const Tensor& x = g.nodes_[ai].value;
      const Tensor& y = g.nodes_[bi].value;
      const Tensor& go = g.nodes_[self].grad;
      Tensor& gx = g.nodes_[ai].grad;
      Tensor& gy = g.nodes_[bi].grad;
      std::size_t m = x.shape[0], k = x.shape[1], n = y.shape[1];
      // dX = dY * Y^T
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double* grow = go.data.data() + i * n;
          const double* yr = y.data.data() + p * n;
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * yr[j];
          gx.data[i * k + p] += acc;
        }
      // dY = X^T * dY
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double xv = x.data[i * k + p];
          const double* grow = go.data.data() + i * n;
          double* gyr = gy.data.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) gyr[j] += xv * grow[j];
        }
    };
    return emplace(fw, bw, {ai, bi});
  }

  // Cross-correlation with odd kernels and same-size zero padding.
  // x: (B,Cin,T,F), k: (Cout,Cin,kh,kw), bias: (Cout) -> (B,Cout,T,F).
  Value conv2d(Value x, Value kernels, Value bias) {
    check_same_graph("conv2d", x);
    check_same_graph("conv2d", kernels);
    check_same_graph("conv2d", bias);
    const Tensor& tx = nodes_[x.id].value;
    const Tensor& tk = nodes_[kernels.id].value;
    const Tensor& tb = nodes_[bias.id].value;
    if (tx.rank() != 4 || tk.rank() != 4)
      throw ValidationError("conv2d: expected 4D input/kernels, got " + tx.shape_string() +
                            " and " + tk.shape_string());
    if (tx.shape[1] != tk.shape[1])
      throw ValidationError("conv2d: channel mismatch, input " + tx.shape_string() +
                            " kernels " + tk.shape_string());
    if (tk.shape[2] % 2 == 0 || tk.shape[3] % 2 == 0)
      throw ValidationError("conv2d: kernel extents must be odd");
    if (tb.size() != tk.shape[0])
      throw ValidationError("conv2d: bias size mismatch");
    std::size_t xi = x.id, ki = kernels.id, bi = bias.id;
    auto fw = [xi, ki, bi](Graph& g, std::size_t self) {
      const Tensor& in = g.nodes_[xi].value;
      const Tensor& k = g.nodes_[ki].value;
      const Tensor& b = g.nodes_[bi].value;
      Tensor& out = g.nodes_[self].value;
      std::size_t B = in.shape[0], Ci = in.shape[1], T = in.shape[2], F = in.shape[3];
      std::size_t Co = k.shape[0], kh = k.shape[2], kw = k.shape[3];
      std::size_t ph = kh / 2, pw = kw / 2;
      out.shape = {B, Co, T, F};
      out.data.assign(B * Co * T * F, 0.0);
      for (std::size_t n = 0; n < B; ++n)
        for (std::size_t co = 0; co < Co; ++co) {
          double* oplane = out.data.data() + (n * Co + co) * T * F;
          double bv = b.data[co];
          for (std::size_t i = 0; i < T * F; ++i) oplane[i] = bv;
          for (std::size_t ci = 0; ci < Ci; ++ci) {
            const double* iplane = in.data.data() + (n * Ci + ci) * T * F;
            const double* kplane = k.data.data() + (co * Ci + ci) * kh * kw;
            for (std::size_t dt = 0; dt < kh; ++dt)
              for (std::size_t df = 0; df < kw; ++df) {
                double w = kplane[dt * kw + df];
                if (w == 0.0) continue;
                std::ptrdiff_t ot = static_cast<std::ptrdiff_t>(dt) - static_cast<std::ptrdiff_t>(ph);
                std::ptrdiff_t of = static_cast<std::ptrdiff_t>(df) - static_cast<std::ptrdiff_t>(pw);
                std::size_t t0 = ot < 0 ? static_cast<std::size_t>(-ot) : 0;
                std::size_t t1 = ot > 0 ? T - static_cast<std::size_t>(ot) : T;
                std::size_t f0 = of < 0 ? static_cast<std::size_t>(-of) : 0;
                std::size_t f1 = of > 0 ? F - static_cast<std::size_t>(of) : F;
                for (std::size_t t = t0; t < t1; ++t) {
                  const double* irow =
                      iplane + (static_cast<std::ptrdiff_t>(t) + ot) * static_cast<std::ptrdiff_t>(F) + of;
                  double* orow = oplane + t * F;
                  for (std::size_t f = f0; f < f1; ++f) orow[f] += w * irow[f];
                }
              }
          }
        }
    };
    auto bw = [xi, ki, bi](Graph& g, std::size_t self) {
      const Tensor& in = g.nodes_[xi].value;
      const Tensor& k = g.nodes_[ki].value;
      const Tensor& go = g.nodes_[self].grad;
      Tensor& gin = g.nodes_[xi].grad;
      Tensor& gk = g.nodes_[ki].grad;
      Tensor& gb = g.nodes_[bi].grad;
      std::size_t B = in.shape[0], Ci = in.shape[1], T = in.shape[2], F = in.shape[3];
      std::size_t Co = k.shape[0], kh = k.shape[2], kw = k.shape[3];
      std::size_t ph = kh / 2, pw = kw / 2;
      for (std::size_t n = 0; n < B; ++n)
        for (std::size_t co = 0; co < Co; ++co) {
          const double* gplane = go.data.data() + (n * Co + co) * T * F;
          double gbacc = 0.0;
          for (std::size_t i = 0; i < T * F; ++i) gbacc += gplane[i];
          gb.data[co] += gbacc;
          for (std::size_t ci = 0; ci < Ci; ++ci) {
            const double* iplane = in.data.data() + (n * Ci + ci) * T * F;
            double* giplane = gin.data.data() + (n * Ci + ci) * T * F;
            const double* kplane = k.data.data() + (co * Ci + ci) * kh * kw;
            double* gkplane = gk.data.data() + (co * Ci + ci) * kh * kw;
            for (std::size_t dt = 0; dt < kh; ++dt)
              for (std::size_t df = 0; df < kw; ++df) {
                double w = kplane[dt * kw + df];
                double gw = 0.0;
                std::ptrdiff_t ot = static_cast<std::ptrdiff_t>(dt) - static_cast<std::ptrdiff_t>(ph);
                std::ptrdiff_t of = static_cast<std::ptrdiff_t>(df) - static_cast<std::ptrdiff_t>(pw);
                std::size_t t0 = ot < 0 ? static_cast<std::size_t>(-ot) : 0;
                std::size_t t1 = ot > 0 ? T - static_cast<std::size_t>(ot) : T;
                std::size_t f0 = of < 0 ? static_cast<std::size_t>(-of) : 0;
                std::size_t f1 = of > 0 ? F - static_cast<std::size_t>(of) : F;
                for (std::size_t t = t0; t < t1; ++t) {
                  const double* irow =
                      iplane + (static_cast<std::ptrdiff_t>(t) + ot) * static_cast<std::ptrdiff_t>(F) + of;
                  double* girow =
                      giplane + (static_cast<std::ptrdiff_t>(t) + ot) * static_cast<std::ptrdiff_t>(F) + of;
                  const double* grow = gplane + t * F;
                  for (std::size_t f = f0; f < f1; ++f) {
                    gw += grow[f] * irow[f];
                    girow[f] += grow[f] * w;
                  }
                }
                gkplane[dt * kw + df] += gw;
              }
          }
        }
    };
    return emplace(fw, bw, {xi, ki, bi});
  }

  // Disjoint-window max pooling over (B,C,T,F); trailing remainders that do
  // not fill a window are truncated.
  Value max_pool2d(Value x, std::size_t pool_t, std::size_t pool_f) {
    check_same_graph("max_pool2d", x);
    if (pool_t < 1 || pool_f < 1) throw ValidationError("max_pool2d: pool factor < 1");
    const Tensor& tx = nodes_[x.id].value;
    if (tx.rank() != 4) throw ValidationError("max_pool2d: expected 4D input");
    if (tx.shape[2] / pool_t == 0 || tx.shape[3] / pool_f == 0)
      throw ValidationError("max_pool2d: pool factors exceed extents of " + tx.shape_string());
    std::size_t xi = x.id;
    auto argmax = std::make_shared<std::vector<std::size_t>>();
    auto fw = [xi, pool_t, pool_f, argmax](Graph& g, std::size_t self) {
      const Tensor& in = g.nodes_[xi].value;
      Tensor& out = g.nodes_[self].value;
      std::size_t B = in.shape[0], C = in.shape[1], T = in.shape[2], F = in.shape[3];
      std::size_t To = T / pool_t, Fo = F / pool_f;
      out.shape = {B, C, To, Fo};
      out.data.resize(B * C * To * Fo);
      argmax->assign(out.data.size(), 0);
      std::size_t oi = 0;
      for (std::size_t n = 0; n < B; ++n)
        for (std::size_t c = 0; c < C; ++c) {
          const double* plane = in.data.data() + (n * C + c) * T * F;
          for (std::size_t to = 0; to < To; ++to)
            for (std::size_t fo = 0; fo < Fo; ++fo, ++oi) {
              std::size_t best = (to * pool_t) * F + fo * pool_f;
              double bv = plane[best];
              for (std::size_t dt = 0; dt < pool_t; ++dt)
                for (std::size_t df = 0; df < pool_f; ++df) {
                  std::size_t idx = (to * pool_t + dt) * F + fo * pool_f + df;
                  if (plane[idx] > bv) {
                    bv = plane[idx];
                    best = idx;
                  }
                }
              out.data[oi] = bv;
              (*argmax)[oi] = (n * C + c) * T * F + best;
            }
        }
    };
    auto bw = [xi, argmax](Graph& g, std::size_t self) {
      const Tensor& go = g.nodes_[self].grad;
      Tensor& gi = g.nodes_[xi].grad;
      for (std::size_t i = 0; i < go.size(); ++i) gi.data[(*argmax)[i]] += go.data[i];
    };
    return emplace(fw, bw, {xi});
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool is_leaf = false;
    std::function<void(Graph&, std::size_t)> forward;
    std::function<void(Graph&, std::size_t)> backward;
    std::vector<std::size_t> inputs;
  };

  std::deque<Node> nodes_;

  void check_same_graph(const char* op, Value v) const {
    if (v.graph != this)
      throw ValidationError(std::string(op) + ": value belongs to another graph");
  }

  Value emplace(std::function<void(Graph&, std::size_t)> fw,
                std::function<void(Graph&, std::size_t)> bw,
                std::vector<std::size_t> inputs) {
    nodes_.push_back(Node{Tensor{}, Tensor{}, false, std::move(fw), std::move(bw),
                          std::move(inputs)});
    std::size_t id = nodes_.size() - 1;
    nodes_[id].forward(*this, id);
    return Value{this, id};
  }

  template <typename F, typename B>
  Value unary(const char* name, Value x, F f, B dfdx) {
    check_same_graph(name, x);
    std::size_t xi = x.id;
    auto fw = [xi, f](Graph& g, std::size_t self) {
      const Tensor& in = g.nodes_[xi].value;
      Tensor& out = g.nodes_[self].value;
      out.shape = in.shape;
      out.data.resize(in.size());
      for (std::size_t i = 0; i < in.size(); ++i) out.data[i] = f(in.data[i]);
    };
    auto bw = [xi, dfdx](Graph& g, std::size_t self) {
      const Tensor& in = g.nodes_[xi].value;
      const Tensor& y = g.nodes_[self].value;
      const Tensor& go = g.nodes_[self].grad;
      Tensor& gi = g.nodes_[xi].grad;
      for (std::size_t i = 0; i < go.size(); ++i)
        gi.data[i] += dfdx(in.data[i], y.data[i], go.data[i]);
    };
    return emplace(fw, bw, {xi});
  }

  template <typename F, typename B>
  Value binary_elementwise(const char* name, Value a, Value b, F f, B dfdxy) {
    check_same_graph(name, a);
    check_same_graph(name, b);
    const Tensor& ta = nodes_[a.id].value;
    const Tensor& tb = nodes_[b.id].value;
    if (!(ta.shape == tb.shape))
      throw ValidationError(std::string(name) + ": shape mismatch " + ta.shape_string() +
                            " vs " + tb.shape_string());
    std::size_t ai = a.id, bi = b.id;
    auto fw = [ai, bi, f](Graph& g, std::size_t self) {
      const Tensor& x = g.nodes_[ai].value;
      const Tensor& y = g.nodes_[bi].value;
      Tensor& out = g.nodes_[self].value;
      out.shape = x.shape;
      out.data.resize(x.size());
      for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = f(x.data[i], y.data[i]);
    };
    auto bw = [ai, bi, dfdxy](Graph& g, std::size_t self) {
      const Tensor& x = g.nodes_[ai].value;
      const Tensor& y = g.nodes_[bi].value;
      const Tensor& go = g.nodes_[self].grad;
      Tensor& gx = g.nodes_[ai].grad;
      Tensor& gy = g.nodes_[bi].grad;
      for (std::size_t i = 0; i < go.size(); ++i) {
        auto [da, db] = dfdxy(x.data[i], y.data[i], go.data[i]);
        gx.data[i] += da;
        gy.data[i] += db;
      }
    };
    return emplace(fw, bw, {ai, bi});
  }

  // Iterates every index of `full` and maps it to the index in `reduced`
  // (extent-1 axes pinned at 0). Drives broadcast and axis reductions.
  template <typename Fn>
  void for_each_mapped(const std::vector<std::size_t>& full,
                       const std::vector<std::size_t>& reduced, Fn fn) const {
    std::size_t rank = full.size();
    std::vector<std::size_t> idx(rank, 0);
    std::vector<std::size_t> rstride(rank);
    std::size_t s = 1;
    for (std::size_t d = rank; d-- > 0;) {
      rstride[d] = (reduced[d] == 1) ? 0 : s;
      s *= reduced[d];
    }
    std::size_t total = Tensor::numel(full);
    std::size_t fi = 0, ri = 0;
    for (std::size_t count = 0; count < total; ++count, ++fi) {
      fn(fi, ri);
      for (std::size_t d = rank; d-- > 0;) {
        ++idx[d];
        ri += rstride[d];
        if (idx[d] < full[d]) break;
        ri -= idx[d] * rstride[d];
        idx[d] = 0;
        if (d == 0) break;
      }
    }
  }

  // scatter=false: out[permuted] = src[orig]; scatter=true: src.grad[orig] += buf[permuted].
  void permute_copy(Tensor& src, const std::vector<std::size_t>& perm, double* buf,
                    bool scatter) const {
    std::size_t rank = src.rank();
    std::vector<std::size_t> sstride(rank), ostride(rank);
    std::size_t s = 1;
    for (std::size_t d = rank; d-- > 0;) {
      sstride[d] = s;
      s *= src.shape[d];
    }
    std::vector<std::size_t> out_shape(rank);
    for (std::size_t d = 0; d < rank; ++d) out_shape[d] = src.shape[perm[d]];
    s = 1;
    for (std::size_t d = rank; d-- > 0;) {
      ostride[d] = s;
      s *= out_shape[d];
    }
    std::vector<std::size_t> idx(rank, 0);
    std::size_t total = src.size();
    for (std::size_t oi = 0; oi < total; ++oi) {
      std::size_t si = 0;
      for (std::size_t d = 0; d < rank; ++d) si += idx[d] * sstride[perm[d]];
      if (scatter)
        src.data[si] += buf[oi];
      else
        buf[oi] = src.data[si];
      for (std::size_t d = rank; d-- > 0;) {
        if (++idx[d] < out_shape[d]) break;
        idx[d] = 0;
        if (d == 0) break;
      }
    }
  }

  void slice_copy(Tensor& src, std::size_t axis, std::size_t start, std::size_t len,
                  double* buf, bool scatter) const {
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= src.shape[d];
    for (std::size_t d = axis + 1; d < src.rank(); ++d) inner *= src.shape[d];
    std::size_t extent = src.shape[axis];
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t a = 0; a < len; ++a) {
        double* s = src.data.data() + (o * extent + start + a) * inner;
        double* b = buf + (o * len + a) * inner;
        if (scatter)
          for (std::size_t i = 0; i < inner; ++i) s[i] += b[i];
        else
          std::copy_n(s, inner, b);
      }
  }

  void concat_copy(Tensor& a, Tensor& b, std::size_t axis, Tensor& out, bool scatter) const {
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= a.shape[d];
    for (std::size_t d = axis + 1; d < a.rank(); ++d) inner *= a.shape[d];
    std::size_t ea = a.shape[axis], eb = b.shape[axis];
    for (std::size_t o = 0; o < outer; ++o) {
      double* oa = out.data.data() + o * (ea + eb) * inner;
      double* pa = a.data.data() + o * ea * inner;
      double* pb = b.data.data() + o * eb * inner;
      if (scatter) {
        for (std::size_t i = 0; i < ea * inner; ++i) pa[i] += oa[i];
        for (std::size_t i = 0; i < eb * inner; ++i) pb[i] += oa[ea * inner + i];
      } else {
        std::copy_n(pa, ea * inner, oa);
        std::copy_n(pb, eb * inner, oa + ea * inner);
      }
    }
  }
};

inline Value operator+(Value a, Value b) { return a.graph->add(a, b); }
inline Value operator-(Value a, Value b) { return a.graph->sub(a, b); }
inline Value operator*(Value a, Value b) { return a.graph->mul(a, b); }
inline Value operator/(Value a, Value b) { return a.graph->div(a, b); }

// Max over coordinates of |analytic - central difference| /
// max(1e-8, |analytic| + |central|), probing every entry of every leaf.
inline double grad_check(Graph& g, Value out, const std::vector<Value>& leaves,
                         double step) {
  if (step <= 0.0) throw ValidationError("grad_check: step must be positive");
  g.backward(out);
  std::vector<Tensor> analytic;
  analytic.reserve(leaves.size());
  for (Value v : leaves) analytic.push_back(g.grad(v));
  double worst = 0.0;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor& x = g.leaf_value(leaves[li]);
    for (std::size_t i = 0; i < x.size(); ++i) {
      double saved = x.data[i];
      x.data[i] = saved + step;
      g.recompute();
      double fp = g.value(out).data[0];
      x.data[i] = saved - step;
      g.recompute();
      double fm = g.value(out).data[0];
      x.data[i] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw NumericError("grad_check: non-finite value during finite differences");
      double central = (fp - fm) / (2.0 * step);
      double a = analytic[li].data[i];
      if (!std::isfinite(a)) throw NumericError("grad_check: non-finite analytic gradient");
      double err = std::abs(a - central) / std::max(1e-8, std::abs(a) + std::abs(central));
      worst = std::max(worst, err);
    }
  }
  g.recompute();
  return worst;
}

// Convenience wrapper for a single-input scalar function.
inline double grad_check(const std::function<Value(Graph&, Value)>& build, const Tensor& x,
                         double step) {
  Graph g;
  Value in = g.leaf(x);
  Value out = build(g, in);
  return grad_check(g, out, {in}, step);
}

}  // namespace taskweight
