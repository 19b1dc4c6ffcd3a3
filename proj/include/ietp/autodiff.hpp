#pragma once

// Define-by-run reverse-mode differentiation over Tensor values.
//
// A Graph records nodes in creation order, which is already a topological
// order, so backward() is a single reverse sweep. Graphs are single-owner and
// rebuilt for every forward pass; parameters live outside the graph and may be
// shared read-only by many graphs at once.

#include <cassert>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "ietp/tensor.hpp"

namespace ietp {

/// A trainable tensor together with its gradient accumulator.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() {
    if (grad.shape() != value.shape()) grad = Tensor(value.shape());
    grad.fill(0.0);
  }
};

class Graph;

/// Handle to a node of a Graph.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

class Graph {
 public:
  Graph() { nodes_.reserve(256); }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var param(Parameter& p) {
    Node n;
    n.external = &p.value;
    n.param = &p;
    n.requires_grad = true;
    return push(std::move(n));
  }

  /// Read-only parameter use (inference); no gradient is tracked.
  Var frozen(const Parameter& p) {
    Node n;
    n.external = &p.value;
    return push(std::move(n));
  }

  Var constant(Tensor t) {
    Node n;
    n.own = std::move(t);
    return push(std::move(n));
  }

  /// Variable leaf whose gradient can be read back with grad().
  Var variable(Tensor t) {
    Node n;
    n.own = std::move(t);
    n.requires_grad = true;
    return push(std::move(n));
  }

  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.own;
  }

  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient accumulator of a node, allocated on first use.
  Tensor& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.shape() != value(id).shape()) n.grad = Tensor(value(id).shape());
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  using Backward = std::function<void(Graph&, std::size_t self)>;

  /// Adds a computed node. backward receives this node's id; it reads
  /// grad(self) and accumulates into its inputs.
  Var record(Tensor value, bool requires_grad, Backward backward) {
    if (!value.all_finite()) {
      throw std::domain_error("non-finite value produced in forward pass");
    }
    Node n;
    n.own = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(backward);
    return push(std::move(n));
  }

  /// Reverse sweep from a single-element output. Parameter leaves add their
  /// gradient into Parameter::grad.
  void backward(Var output) {
    if (value(output.id).size() != 1) {
      throw DimensionError("backward() needs a scalar output, got " +
                           shape_string(value(output.id).shape()));
    }
    grad(output.id)[0] += 1.0;
    for (std::size_t i = output.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param) {
        Parameter& p = *n.param;
        if (p.grad.shape() != p.value.shape()) p.grad = Tensor(p.value.shape());
        p.grad += n.grad;
      }
    }
  }

 private:
  struct Node {
    Tensor own;
    const Tensor* external = nullptr;
    Tensor grad;
    Parameter* param = nullptr;
    bool requires_grad = false;
    Backward backward;
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return graph->value(id); }

namespace ad {

namespace detail {

inline Graph& same_graph(const Var& a, const Var& b) {
  if (a.graph != b.graph) throw std::logic_error("operands from different graphs");
  return *a.graph;
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got " + shape_string(t.shape()));
  }
}

template <class Fn, class DFn>
Var unary(const Var& x, Fn f, DFn df_from_xy) {
  Graph& g = *x.graph;
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  const std::size_t xid = x.id;
  return g.record(std::move(out), g.requires_grad(xid),
                  [xid, df_from_xy](Graph& gr, std::size_t self) {
                    const Tensor& xv2 = gr.value(xid);
                    const Tensor& yv = gr.value(self);
                    const Tensor& gy = gr.grad(self);
                    Tensor& gx = gr.grad(xid);
                    for (std::size_t i = 0; i < gy.size(); ++i) {
                      gx[i] += gy[i] * df_from_xy(xv2[i], yv[i]);
                    }
                  });
}

}  // namespace detail

/// a[m x k] * b[k x n]
inline Var matmul(const Var& a, const Var& b) {
  Graph& g = detail::same_graph(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_rank(av, 2, "matmul");
  detail::require_rank(bv, 2, "matmul");
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  if (bv.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ " + shape_string(av.shape()) +
                         " * " + shape_string(bv.shape()));
  }
  Tensor out({m, n});
  gemm_accumulate(av.data().data(), bv.data().data(), out.data().data(), m, k, n);
  const std::size_t aid = a.id, bid = b.id;
  const bool rg = g.requires_grad(aid) || g.requires_grad(bid);
  return g.record(std::move(out), rg, [aid, bid, m, k, n](Graph& gr, std::size_t self) {
    const Tensor& gy = gr.grad(self);
    if (gr.requires_grad(aid)) {
      gemm_accumulate_bt(gy.data().data(), gr.value(bid).data().data(),
                         gr.grad(aid).data().data(), m, n, k);
    }
    if (gr.requires_grad(bid)) {
      gemm_accumulate_at(gr.value(aid).data().data(), gy.data().data(),
                         gr.grad(bid).data().data(), m, k, n);
    }
  });
}

/// Elementwise sum of equal shapes.
inline Var add(const Var& a, const Var& b) {
  Graph& g = detail::same_graph(a, b);
  a.value().require_same_shape(b.value(), "add");
  Tensor out = a.value();
  out += b.value();
  const std::size_t aid = a.id, bid = b.id;
  const bool rg = g.requires_grad(aid) || g.requires_grad(bid);
  return g.record(std::move(out), rg, [aid, bid](Graph& gr, std::size_t self) {
    const Tensor& gy = gr.grad(self);
    if (gr.requires_grad(aid)) gr.grad(aid) += gy;
    if (gr.requires_grad(bid)) gr.grad(bid) += gy;
  });
}

/// Elementwise product of equal shapes.
inline Var mul(const Var& a, const Var& b) {
  Graph& g = detail::same_graph(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  av.require_same_shape(bv, "mul");
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const std::size_t aid = a.id, bid = b.id;
  const bool rg = g.requires_grad(aid) || g.requires_grad(bid);
  return g.record(std::move(out), rg, [aid, bid](Graph& gr, std::size_t self) {
    const Tensor& gy = gr.grad(self);
    if (gr.requires_grad(aid)) {
      const Tensor& bv2 = gr.value(bid);
      Tensor& ga = gr.grad(aid);
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * bv2[i];
    }
    if (gr.requires_grad(bid)) {
      const Tensor& av2 = gr.value(aid);
      Tensor& gb = gr.grad(bid);
      for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * av2[i];
    }
  });
}

inline Var scale(const Var& x, double s) {
  return detail::unary(
      x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

/// x[m x n] + bias[n] broadcast over rows.
inline Var add_row_bias(const Var& x, const Var& bias) {
  Graph& g = detail::same_graph(x, bias);
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  detail::require_rank(xv, 2, "add_row_bias");
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  if (bv.size() != n) {
    throw DimensionError("add_row_bias: bias " + shape_string(bv.shape()) +
                         " vs input " + shape_string(xv.shape()));
  }
  Tensor out = xv;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) += bv[j];
  const std::size_t xid = x.id, bid = bias.id;
  const bool rg = g.requires_grad(xid) || g.requires_grad(bid);
  return g.record(std::move(out), rg, [xid, bid, m, n](Graph& gr, std::size_t self) {
    const Tensor& gy = gr.grad(self);
    if (gr.requires_grad(xid)) gr.grad(xid) += gy;
    if (gr.requires_grad(bid)) {
      Tensor& gb = gr.grad(bid);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += gy(i, j);
    }
  });
}

inline Var sigmoid(const Var& x) {
  return detail::unary(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Var tanh(const Var& x) {
  return detail::unary(
      x, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

inline Var exp(const Var& x) {
  return detail::unary(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

/// max(x, alpha * x) for alpha in [0, 1].
inline Var leaky_relu(const Var& x, double alpha) {
  if (alpha < 0.0) throw std::invalid_argument("leaky_relu: alpha must be >= 0");
  return detail::unary(
      x, [alpha](double v) { return v > 0.0 ? v : alpha * v; },
      [alpha](double v, double) { return v > 0.0 ? 1.0 : alpha; });
}

/// Softmax along the last axis of a vector or a matrix (row-wise).
inline Var softmax(const Var& x) {
  Graph& g = *x.graph;
  const Tensor& xv = x.value();
  if (xv.empty()) throw DimensionError("softmax of empty tensor");
  const std::size_t n = xv.rank() == 1 ? xv.size() : xv.shape().back();
  const std::size_t rows = xv.size() / n;
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data().data() + r * n;
    double* o = out.data().data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < n; ++j) o[j] /= s;
  }
  const std::size_t xid = x.id;
  return g.record(std::move(out), g.requires_grad(xid),
                  [xid, rows, n](Graph& gr, std::size_t self) {
                    const Tensor& y = gr.value(self);
                    const Tensor& gy = gr.grad(self);
                    Tensor& gx = gr.grad(xid);
                    for (std::size_t r = 0; r < rows; ++r) {
                      double dot = 0.0;
                      for (std::size_t j = 0; j < n; ++j) dot += gy[r * n + j] * y[r * n + j];
                      for (std::size_t j = 0; j < n; ++j)
                        gx[r * n + j] += y[r * n + j] * (gy[r * n + j] - dot);
                    }
                  });
}

inline Var reshape(const Var& x, Shape shape) {
  Graph& g = *x.graph;
  Tensor out = x.value().reshaped(std::move(shape));
  const std::size_t xid = x.id;
  return g.record(std::move(out), g.requires_grad(xid), [xid](Graph& gr, std::size_t self) {
    const Tensor& gy = gr.grad(self);
    Tensor& gx = gr.grad(xid);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
  });
}

/// Columns [begin, end) of a matrix.
inline Var slice_cols(const Var& x, std::size_t begin, std::size_t end) {
  Graph& g = *x.graph;
  const Tensor& xv = x.value();
  detail::require_rank(xv, 2, "slice_cols");
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  if (begin > end || end > n) throw DimensionError("slice_cols: range out of bounds");
  const std::size_t w = end - begin;
  Tensor out({m, w});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) out(i, j) = xv(i, begin + j);
  const std::size_t xid = x.id;
  return g.record(std::move(out), g.requires_grad(xid),
                  [xid, m, w, begin](Graph& gr, std::size_t self) {
                    const Tensor& gy = gr.grad(self);
                    Tensor& gx = gr.grad(xid);
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < w; ++j) gx(i, begin + j) += gy(i, j);
                  });
}

/// Rows [begin, end) of a matrix.
inline Var slice_rows(const Var& x, std::size_t begin, std::size_t end) {
  Graph& g = *x.graph;
  const Tensor& xv = x.value();
  detail::require_rank(xv, 2, "slice_rows");
  const std::size_t n = xv.dim(1);
  if (begin > end || end > xv.dim(0)) throw DimensionError("slice_rows: range out of bounds");
  std::vector<double> data(xv.data().begin() + begin * n, xv.data().begin() + end * n);
  Tensor out({end - begin, n}, std::move(data));
  const std::size_t xid = x.id;
  return g.record(std::move(out), g.requires_grad(xid), [xid, begin, n](Graph& gr, std::size_t self) {
    const Tensor& gy = gr.grad(self);
    Tensor& gx = gr.grad(xid);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[begin * n + i] += gy[i];
  });
}

/// Horizontal concatenation of matrices with equal row counts.
inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  Graph& g = *parts.front().graph;
  const std::size_t m = parts.front().value().dim(0);
  std::vector<std::size_t> ids, widths;
  std::size_t total = 0;
  bool rg = false;
  for (const Var& p : parts) {
    if (p.graph != &g) throw std::logic_error("concat_cols: operands from different graphs");
    const Tensor& v = p.value();
    detail::require_rank(v, 2, "concat_cols");
    if (v.dim(0) != m) throw DimensionError("concat_cols: row counts differ");
    ids.push_back(p.id);
    widths.push_back(v.dim(1));
    total += v.dim(1);
    rg = rg || g.requires_grad(p.id);
  }
  Tensor out({m, total});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& v = parts[k].value();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) out(i, off + j) = v(i, j);
    off += widths[k];
  }
  return g.record(std::move(out), rg, [ids, widths, m](Graph& gr, std::size_t self) {
    const Tensor& gy = gr.grad(self);
    std::size_t off2 = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (gr.requires_grad(ids[k])) {
        Tensor& gx = gr.grad(ids[k]);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) gx(i, j) += gy(i, off2 + j);
      }
      off2 += widths[k];
    }
  });
}

inline Var sum(const Var& x) {
  Graph& g = *x.graph;
  Tensor out({1}, x.value().sum());
  const std::size_t xid = x.id;
  return g.record(std::move(out), g.requires_grad(xid), [xid](Graph& gr, std::size_t self) {
    const double gy = gr.grad(self)[0];
    Tensor& gx = gr.grad(xid);
    for (double& v : gx.values()) v += gy;
  });
}

namespace detail {

struct ConvDims {
  std::size_t batch, in_ch, h, w, out_ch, kh, kw, oh, ow;
};

inline ConvDims conv_dims(const Tensor& input, const Tensor& kernels) {
  if (input.rank() != 3 && input.rank() != 4) {
    throw DimensionError("conv2d: input must be CxHxW or BxCxHxW, got " +
                         shape_string(input.shape()));
  }
  require_rank(kernels, 4, "conv2d kernels");
  const bool batched = input.rank() == 4;
  ConvDims d{};
  d.batch = batched ? input.dim(0) : 1;
  d.in_ch = input.dim(batched ? 1 : 0);
  d.h = input.dim(batched ? 2 : 1);
  d.w = input.dim(batched ? 3 : 2);
  d.out_ch = kernels.dim(0);
  d.kh = kernels.dim(2);
  d.kw = kernels.dim(3);
  if (kernels.dim(1) != d.in_ch) {
    throw DimensionError("conv2d: kernel channels " + std::to_string(kernels.dim(1)) +
                         " vs input channels " + std::to_string(d.in_ch));
  }
  if (d.kh > d.h || d.kw > d.w) {
    throw DimensionError("conv2d: kernel " + shape_string(kernels.shape()) +
                         " larger than input " + shape_string(input.shape()));
  }
  d.oh = d.h - d.kh + 1;
  d.ow = d.w - d.kw + 1;
  return d;
}

}  // namespace detail

/// Valid cross-correlation, stride 1. Input CxHxW or BxCxHxW, kernels
/// OxCxKhxKw, optional bias of length O.
inline Var conv2d(const Var& input, const Var& kernels, const Var* bias = nullptr) {
  Graph& g = detail::same_graph(input, kernels);
  const Tensor& x = input.value();
  const Tensor& k = kernels.value();
  const detail::ConvDims d = detail::conv_dims(x, k);
  if (bias && bias->value().size() != d.out_ch) {
    throw DimensionError("conv2d: bias length differs from output channels");
  }
  Shape out_shape = x.rank() == 4 ? Shape{d.batch, d.out_ch, d.oh, d.ow}
                                  : Shape{d.out_ch, d.oh, d.ow};
  Tensor out(out_shape);
  const double* xp = x.data().data();
  const double* kp = k.data().data();
  double* op = out.data().data();
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t o = 0; o < d.out_ch; ++o) {
      const double b0 = bias ? bias->value()[o] : 0.0;
      for (std::size_t i = 0; i < d.oh; ++i) {
        for (std::size_t j = 0; j < d.ow; ++j) {
          double s = b0;
          for (std::size_t c = 0; c < d.in_ch; ++c) {
            const double* xc = xp + ((b * d.in_ch + c) * d.h) * d.w;
            const double* kc = kp + ((o * d.in_ch + c) * d.kh) * d.kw;
            for (std::size_t u = 0; u < d.kh; ++u)
              for (std::size_t v = 0; v < d.kw; ++v)
                s += xc[(i + u) * d.w + (j + v)] * kc[u * d.kw + v];
          }
          op[((b * d.out_ch + o) * d.oh + i) * d.ow + j] = s;
        }
      }
    }
  }
  const std::size_t xid = input.id, kid = kernels.id;
  const std::size_t bid = bias ? bias->id : std::numeric_limits<std::size_t>::max();
  bool rg = g.requires_grad(xid) || g.requires_grad(kid);
  if (bias) rg = rg || g.requires_grad(bid);
  return g.record(std::move(out), rg, [xid, kid, bid, d](Graph& gr, std::size_t self) {
    const Tensor& gy = gr.grad(self);
    const double* gyp = gy.data().data();
    const bool gx_on = gr.requires_grad(xid);
    const bool gk_on = gr.requires_grad(kid);
    const bool gb_on = bid != std::numeric_limits<std::size_t>::max() && gr.requires_grad(bid);
    const double* xp2 = gr.value(xid).data().data();
    const double* kp2 = gr.value(kid).data().data();
    double* gxp = gx_on ? gr.grad(xid).data().data() : nullptr;
    double* gkp = gk_on ? gr.grad(kid).data().data() : nullptr;
    double* gbp = gb_on ? gr.grad(bid).data().data() : nullptr;
    for (std::size_t b = 0; b < d.batch; ++b) {
      for (std::size_t o = 0; o < d.out_ch; ++o) {
        for (std::size_t i = 0; i < d.oh; ++i) {
          for (std::size_t j = 0; j < d.ow; ++j) {
            const double go = gyp[((b * d.out_ch + o) * d.oh + i) * d.ow + j];
            if (go == 0.0) continue;
            if (gbp) gbp[o] += go;
            for (std::size_t c = 0; c < d.in_ch; ++c) {
              const std::size_t xbase = ((b * d.in_ch + c) * d.h) * d.w;
              const std::size_t kbase = ((o * d.in_ch + c) * d.kh) * d.kw;
              for (std::size_t u = 0; u < d.kh; ++u) {
                for (std::size_t v = 0; v < d.kw; ++v) {
                  const std::size_t xi = xbase + (i + u) * d.w + (j + v);
                  const std::size_t ki = kbase + u * d.kw + v;
                  if (gxp) gxp[xi] += go * kp2[ki];
                  if (gkp) gkp[ki] += go * xp2[xi];
                }
              }
            }
          }
        }
      }
    }
  });
}

/// Non-overlapping max pooling over the last two axes (stride = window).
/// Trailing rows/columns that do not fill a window are dropped. Ties route the
/// gradient to the first element in row-major window order.
inline Var maxpool2d(const Var& input, std::size_t ph, std::size_t pw) {
  Graph& g = *input.graph;
  const Tensor& x = input.value();
  if (x.rank() < 2) throw DimensionError("maxpool2d: input rank must be >= 2");
  const std::size_t h = x.shape()[x.rank() - 2];
  const std::size_t w = x.shape()[x.rank() - 1];
  if (ph == 0 || pw == 0 || ph > h || pw > w) {
    throw DimensionError("maxpool2d: window " + std::to_string(ph) + "x" + std::to_string(pw) +
                         " exceeds input " + shape_string(x.shape()));
  }
  const std::size_t oh = h / ph, ow = w / pw;
  const std::size_t planes = x.size() / (h * w);
  Shape out_shape = x.shape();
  out_shape[x.rank() - 2] = oh;
  out_shape[x.rank() - 1] = ow;
  Tensor out(out_shape);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        std::size_t best = p * h * w + (i * ph) * w + j * pw;
        for (std::size_t u = 0; u < ph; ++u) {
          for (std::size_t v = 0; v < pw; ++v) {
            const std::size_t idx = p * h * w + (i * ph + u) * w + (j * pw + v);
            if (x[idx] > x[best]) best = idx;
          }
        }
        const std::size_t o = (p * oh + i) * ow + j;
        out[o] = x[best];
        argmax[o] = best;
      }
    }
  }
  const std::size_t xid = input.id;
  return g.record(std::move(out), g.requires_grad(xid),
                  [xid, argmax = std::move(argmax)](Graph& gr, std::size_t self) {
                    const Tensor& gy = gr.grad(self);
                    Tensor& gx = gr.grad(xid);
                    for (std::size_t o = 0; o < gy.size(); ++o) gx[argmax[o]] += gy[o];
                  });
}

/// Destination of one source row in a grid scatter.
struct GridSlot {
  std::size_t batch = 0;
  std::size_t row = 0;
  std::size_t col = 0;
};

/// Places row v of src[V x C] at out[b, :, r, c] for each (v, slot) pair;
/// all other cells are zero. Output is B x C x rows x cols.
inline Var scatter_to_grid(const Var& src, const std::vector<std::pair<std::size_t, GridSlot>>& slots,
                           std::size_t batch, std::size_t rows, std::size_t cols) {
  Graph& g = *src.graph;
  const Tensor& sv = src.value();
  detail::require_rank(sv, 2, "scatter_to_grid");
  const std::size_t ch = sv.dim(1);
  Tensor out({batch, ch, rows, cols});
  std::vector<std::pair<std::size_t, std::size_t>> moves;  // (src offset row, dest base)
  moves.reserve(slots.size());
  for (const auto& [v, s] : slots) {
    if (v >= sv.dim(0) || s.batch >= batch || s.row >= rows || s.col >= cols) {
      throw DimensionError("scatter_to_grid: slot out of range");
    }
    const std::size_t base = s.batch * ch * rows * cols + s.row * cols + s.col;
    for (std::size_t c = 0; c < ch; ++c) out[base + c * rows * cols] = sv(v, c);
    moves.emplace_back(v, base);
  }
  const std::size_t sid = src.id;
  const std::size_t plane = rows * cols;
  return g.record(std::move(out), g.requires_grad(sid),
                  [sid, ch, plane, moves = std::move(moves)](Graph& gr, std::size_t self) {
                    const Tensor& gy = gr.grad(self);
                    Tensor& gs = gr.grad(sid);
                    for (const auto& [v, base] : moves)
                      for (std::size_t c = 0; c < ch; ++c) gs(v, c) += gy[base + c * plane];
                  });
}

/// Per-row -log(max(softmax(logits)[label], floor)). Rows whose probability
/// falls below the floor contribute no gradient.
inline Var neg_log_prob(const Var& logits, const std::vector<std::size_t>& labels,
                        double floor = 1e-12) {
  Graph& g = *logits.graph;
  const Tensor& lv = logits.value();
  detail::require_rank(lv, 2, "neg_log_prob");
  const std::size_t m = lv.dim(0), n = lv.dim(1);
  if (labels.size() != m) throw DimensionError("neg_log_prob: label count differs from rows");
  Tensor out({m, 1});
  Tensor probs({m, n});
  const double log_floor = std::log(floor);
  std::vector<char> clamped(m, 0);
  for (std::size_t i = 0; i < m; ++i) {
    if (labels[i] >= n) throw DimensionError("neg_log_prob: label out of range");
    double mx = lv(i, 0);
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, lv(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += (probs(i, j) = std::exp(lv(i, j) - mx));
    for (std::size_t j = 0; j < n; ++j) probs(i, j) /= s;
    const double logp = lv(i, labels[i]) - mx - std::log(s);
    if (logp < log_floor) {
      out(i, 0) = -log_floor;
      clamped[i] = 1;
    } else {
      out(i, 0) = -logp;
    }
  }
  const std::size_t lid = logits.id;
  return g.record(std::move(out), g.requires_grad(lid),
                  [lid, labels, m, n, probs = std::move(probs),
                   clamped = std::move(clamped)](Graph& gr, std::size_t self) {
                    const Tensor& gy = gr.grad(self);
                    Tensor& gl = gr.grad(lid);
                    for (std::size_t i = 0; i < m; ++i) {
                      if (clamped[i]) continue;
                      for (std::size_t j = 0; j < n; ++j) {
                        const double onehot = j == labels[i] ? 1.0 : 0.0;
                        gl(i, j) += gy(i, 0) * (probs(i, j) - onehot);
                      }
                    }
                  });
}

/// Per-row bivariate normal negative log-density of truth[B x 2] under head
/// outputs raw[B x 5] = (mx, my, log sx, log sy, atanh r) in units of
/// `unit` meters: m = unit * raw[0..1], s = unit * exp(raw[2..3]),
/// r = tanh(raw[4]). Returns B x 1 in nats.
inline Var gaussian_nll(const Var& raw, const Tensor& truth, double unit = 1.0) {
  Graph& g = *raw.graph;
  const Tensor& rv = raw.value();
  detail::require_rank(rv, 2, "gaussian_nll");
  const std::size_t m = rv.dim(0);
  if (rv.dim(1) != 5) throw DimensionError("gaussian_nll: expected 5 head outputs");
  if (truth.size() != 2 * m) throw DimensionError("gaussian_nll: truth must be B x 2");
  Tensor out({m, 1});
  Tensor cache({m, 6});  // zx, zy, r, 1 - r^2, q, unused
  const double log_two_pi = std::log(2.0 * std::numbers::pi);
  const double log_unit = std::log(unit);
  for (std::size_t i = 0; i < m; ++i) {
    const double sx = unit * std::exp(rv(i, 2));
    const double sy = unit * std::exp(rv(i, 3));
    const double r = std::tanh(rv(i, 4));
    const double zx = (truth[2 * i] - unit * rv(i, 0)) / sx;
    const double zy = (truth[2 * i + 1] - unit * rv(i, 1)) / sy;
    const double om = 1.0 - r * r;
    const double q = zx * zx + zy * zy - 2.0 * r * zx * zy;
    out(i, 0) = log_two_pi + 2.0 * log_unit + rv(i, 2) + rv(i, 3) + 0.5 * std::log(om) +
                q / (2.0 * om);
    cache(i, 0) = zx;
    cache(i, 1) = zy;
    cache(i, 2) = r;
    cache(i, 3) = om;
    cache(i, 4) = q;
  }
  const std::size_t rid = raw.id;
  return g.record(std::move(out), g.requires_grad(rid),
                  [rid, m, cache = std::move(cache)](Graph& gr, std::size_t self) {
                    const Tensor& gy = gr.grad(self);
                    Tensor& grw = gr.grad(rid);
                    const Tensor& rv2 = gr.value(rid);
                    for (std::size_t i = 0; i < m; ++i) {
                      const double zx = cache(i, 0), zy = cache(i, 1), r = cache(i, 2);
                      const double om = cache(i, 3), q = cache(i, 4);
                      // d/dzx and d/dzy of q / (2 om)
                      const double dzx = (zx - r * zy) / om;
                      const double dzy = (zy - r * zx) / om;
                      // zx = (t - u*raw0) / (u*exp(raw2)); u cancels against sx for raw0
                      const double sxu = std::exp(rv2(i, 2));
                      const double syu = std::exp(rv2(i, 3));
                      const double g0 = dzx * (-1.0 / sxu);
                      const double g1 = dzy * (-1.0 / syu);
                      const double g2 = 1.0 + dzx * (-zx);
                      const double g3 = 1.0 + dzy * (-zy);
                      // dr: 0.5 log(om) -> -r/om; q/(2om) -> (-2 zx zy)/(2 om) + q r / om^2
                      const double dr = -r / om - zx * zy / om + q * r / (om * om);
                      const double g4 = dr * om;  // dr/draw4 = 1 - r^2
                      const double s = gy(i, 0);
                      grw(i, 0) += s * g0;
                      grw(i, 1) += s * g1;
                      grw(i, 2) += s * g2;
                      grw(i, 3) += s * g3;
                      grw(i, 4) += s * g4;
                    }
                  });
}

}  // namespace ad
}  // namespace ietp
