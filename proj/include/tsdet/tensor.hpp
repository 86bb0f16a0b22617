// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors and a reverse-mode tape.
//
// A BasicTape records every op applied to its variables in execution order,
// so the node list is topologically sorted by construction. backward() walks
// the list once in reverse. Parameters enter a tape through parameter(), which
// keeps a pointer to the owning tensor so that backward() can deposit the
// accumulated adjoint into its grad buffer. A tape can be differentiated once;
// rebuild it for each forward pass.
//
// Everything is templated on the scalar type. Training uses float; gradient
// probing instantiates the same code with double so central differences are
// not swamped by single-precision rounding.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tsdet/error.hpp"

namespace tsdet {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename Real>
struct BasicTensor {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // empty when absent
  bool requires_grad = false;

  BasicTensor() = default;
  explicit BasicTensor(Shape s, Real fill = Real(0)) : shape(std::move(s)), data(shape_numel(shape), fill) {
    for (int d : shape)
      if (d < 0) throw ShapeError("negative dimension in " + shape_str(shape));
  }
  BasicTensor(Shape s, std::vector<Real> values) : shape(std::move(s)), data(std::move(values)) {
    if (shape_numel(shape) != data.size())
      throw ShapeError("tensor " + shape_str(shape) + " given " + std::to_string(data.size()) + " values");
  }

  static BasicTensor scalar(Real v) { return BasicTensor(Shape{}, std::vector<Real>{v}); }

  std::size_t numel() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape.at(static_cast<std::size_t>(i < 0 ? rank() + i : i)); }
  bool has_grad() const { return !grad.empty(); }
  void zero_grad() { grad.assign(data.size(), Real(0)); }
  Real item() const {
    if (data.size() != 1) throw ShapeError("item() on tensor " + shape_str(shape));
    return data[0];
  }

  template <typename Other>
  BasicTensor<Other> cast() const {
    BasicTensor<Other> out(shape);
    std::transform(data.begin(), data.end(), out.data.begin(), [](Real v) { return static_cast<Other>(v); });
    out.requires_grad = requires_grad;
    return out;
  }
};

using Tensor = BasicTensor<float>;

template <typename Real>
class BasicTape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
template <typename Real>
struct BasicVar {
  BasicTape<Real>* tape = nullptr;
  std::size_t id = 0;

  const BasicTensor<Real>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape; }
  std::size_t numel() const { return value().numel(); }
  Real item() const { return value().item(); }
};

template <typename Real>
class BasicTape {
 public:
  using TensorT = BasicTensor<Real>;
  using Var = BasicVar<Real>;
  // Reads the node's adjoint and accumulates into the adjoints of its inputs.
  using BackwardFn = std::function<void(BasicTape&, std::size_t self)>;

  BasicTape() = default;
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  Var constant(TensorT t) {
    t.requires_grad = false;
    t.grad.clear();
    return push(Node{std::move(t), {}, {}, nullptr, false, {}});
  }

  // Leaf bound to an external tensor; backward() adds d(loss)/d(param) to
  // param.grad. The tensor must outlive the tape and stay unmodified.
  Var parameter(TensorT& param) {
    TensorT copy(param.shape, param.data);
    copy.requires_grad = param.requires_grad;
    const bool track = param.requires_grad;
    return push(Node{std::move(copy), {}, {}, track ? &param : nullptr, track, {}});
  }

  Var record(TensorT value, std::vector<std::size_t> inputs, BackwardFn fn) {
    bool track = false;
    for (std::size_t in : inputs) track = track || nodes_.at(in).needs_grad;
    value.requires_grad = track;
    if (!track) {
      inputs.clear();
      fn = nullptr;
    }
    return push(Node{std::move(value), std::move(inputs), std::move(fn), nullptr, track, {}});
  }

  const TensorT& value(std::size_t id) const { return nodes_.at(id).value; }
  bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }
  std::vector<Real>& adjoint(std::size_t id) { return nodes_[id].adj; }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  void backward(Var loss) {
    if (loss.tape != this) throw Error("backward: variable belongs to a different tape");
    if (consumed_) throw Error("backward: tape already differentiated; record a new forward pass");
    if (value(loss.id).numel() != 1)
      throw ShapeError("backward: loss must be scalar, got " + shape_str(value(loss.id).shape));
    consumed_ = true;
    for (auto& n : nodes_)
      if (n.needs_grad) n.adj.assign(n.value.numel(), Real(0));
    if (!nodes_[loss.id].needs_grad) return;
    nodes_[loss.id].adj[0] = Real(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad) continue;
      if (n.fn) n.fn(*this, i);
      if (n.param) {
        if (n.param->grad.size() != n.adj.size()) n.param->grad.assign(n.adj.size(), Real(0));
        for (std::size_t k = 0; k < n.adj.size(); ++k) n.param->grad[k] += n.adj[k];
      }
    }
  }

 private:
  struct Node {
    TensorT value;
    std::vector<std::size_t> inputs;
    BackwardFn fn;
    TensorT* param;
    bool needs_grad;
    std::vector<Real> adj;
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

using Tape = BasicTape<float>;
using Var = BasicVar<float>;

namespace ops {

namespace detail {

template <typename Real>
BasicTape<Real>& same_tape(const char* op, std::initializer_list<BasicVar<Real>> vars) {
  BasicTape<Real>* t = nullptr;
  for (const auto& v : vars) {
    if (!v.tape) throw Error(std::string(op) + ": uninitialized variable");
    if (t && t != v.tape) throw Error(std::string(op) + ": operands live on different tapes");
    t = v.tape;
  }
  return *t;
}

[[noreturn]] inline void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

// Elementwise map with derivative expressed through input x and output y.
template <typename Real, typename F, typename D>
BasicVar<Real> unary(BasicVar<Real> x, F f, D dfdx) {
  auto& tape = same_tape("unary", {x});
  const auto& xv = x.value();
  BasicTensor<Real> out(xv.shape);
  for (std::size_t i = 0; i < xv.numel(); ++i) out.data[i] = f(xv.data[i]);
  const std::size_t xi = x.id;
  return tape.record(std::move(out), {xi}, [xi, dfdx](BasicTape<Real>& t, std::size_t self) {
    const auto& g = t.adjoint(self);
    const auto& xd = t.value(xi).data;
    const auto& yd = t.value(self).data;
    auto& gx = t.adjoint(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dfdx(xd[i], yd[i]);
  });
}

// Broadcast kinds supported by add/mul: identical shapes, scalar rhs, or a
// rank-1 rhs matching the trailing dimension of lhs.
enum class Broadcast { kSame, kScalar, kRow };

inline Broadcast broadcast_kind(const char* op, const Shape& a, const Shape& b) {
  if (a == b) return Broadcast::kSame;
  if (shape_numel(b) == 1) return Broadcast::kScalar;
  if (b.size() == 1 && !a.empty() && a.back() == b[0]) return Broadcast::kRow;
  shape_mismatch(op, a, b);
}

inline std::size_t rhs_index(Broadcast k, std::size_t i, std::size_t row) {
  switch (k) {
    case Broadcast::kSame: return i;
    case Broadcast::kScalar: return 0;
    case Broadcast::kRow: return i % row;
  }
  return i;
}

}  // namespace detail

template <typename Real>
BasicVar<Real> add(BasicVar<Real> a, BasicVar<Real> b) {
  auto& tape = detail::same_tape("add", {a, b});
  const auto& av = a.value();
  const auto& bv = b.value();
  const auto kind = detail::broadcast_kind("add", av.shape, bv.shape);
  const std::size_t row = bv.numel();
  BasicTensor<Real> out(av.shape);
  for (std::size_t i = 0; i < av.numel(); ++i) out.data[i] = av.data[i] + bv.data[detail::rhs_index(kind, i, row)];
  const std::size_t ai = a.id, bi = b.id;
  return tape.record(std::move(out), {ai, bi}, [ai, bi, kind, row](BasicTape<Real>& t, std::size_t self) {
    const auto& g = t.adjoint(self);
    if (t.needs_grad(ai)) {
      auto& ga = t.adjoint(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.needs_grad(bi)) {
      auto& gb = t.adjoint(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb[detail::rhs_index(kind, i, row)] += g[i];
    }
  });
}

template <typename Real>
BasicVar<Real> mul(BasicVar<Real> a, BasicVar<Real> b) {
  auto& tape = detail::same_tape("mul", {a, b});
  const auto& av = a.value();
  const auto& bv = b.value();
  const auto kind = detail::broadcast_kind("mul", av.shape, bv.shape);
  const std::size_t row = bv.numel();
  BasicTensor<Real> out(av.shape);
  for (std::size_t i = 0; i < av.numel(); ++i) out.data[i] = av.data[i] * bv.data[detail::rhs_index(kind, i, row)];
  const std::size_t ai = a.id, bi = b.id;
  return tape.record(std::move(out), {ai, bi}, [ai, bi, kind, row](BasicTape<Real>& t, std::size_t self) {
    const auto& g = t.adjoint(self);
    const auto& ad = t.value(ai).data;
    const auto& bd = t.value(bi).data;
    if (t.needs_grad(ai)) {
      auto& ga = t.adjoint(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bd[detail::rhs_index(kind, i, row)];
    }
    if (t.needs_grad(bi)) {
      auto& gb = t.adjoint(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb[detail::rhs_index(kind, i, row)] += g[i] * ad[i];
    }
  });
}

template <typename Real>
BasicVar<Real> scale(BasicVar<Real> x, Real c) {
  return detail::unary(x, [c](Real v) { return c * v; }, [c](Real, Real) { return c; });
}

template <typename Real>
BasicVar<Real> add_scalar(BasicVar<Real> x, Real c) {
  return detail::unary(x, [c](Real v) { return v + c; }, [](Real, Real) { return Real(1); });
}

template <typename Real>
BasicVar<Real> sub(BasicVar<Real> a, BasicVar<Real> b) {
  return add(a, scale(b, Real(-1)));
}

template <typename Real>
BasicVar<Real> relu(BasicVar<Real> x) {
  return detail::unary(
      x, [](Real v) { return v > Real(0) ? v : Real(0); }, [](Real v, Real) { return v > Real(0) ? Real(1) : Real(0); });
}

template <typename Real>
BasicVar<Real> sigmoid(BasicVar<Real> x) {
  return detail::unary(
      x,
      [](Real v) {
        if (v >= Real(0)) return Real(1) / (Real(1) + std::exp(-v));
        const Real e = std::exp(v);
        return e / (Real(1) + e);
      },
      [](Real, Real y) { return y * (Real(1) - y); });
}

template <typename Real>
BasicVar<Real> exp(BasicVar<Real> x) {
  return detail::unary(x, [](Real v) { return std::exp(v); }, [](Real, Real y) { return y; });
}

template <typename Real>
BasicVar<Real> log(BasicVar<Real> x) {
  for (std::size_t i = 0; i < x.numel(); ++i) {
    if (!(x.value().data[i] > Real(0)))
      throw DomainError("log: non-positive input " + std::to_string(double(x.value().data[i])) + " at index " +
                        std::to_string(i));
  }
  return detail::unary(x, [](Real v) { return std::log(v); }, [](Real v, Real) { return Real(1) / v; });
}

// log(1 + e^x), evaluated without overflow.
template <typename Real>
BasicVar<Real> softplus(BasicVar<Real> x) {
  return detail::unary(
      x, [](Real v) { return std::max(v, Real(0)) + std::log1p(std::exp(-std::abs(v))); },
      [](Real v, Real) {
        if (v >= Real(0)) return Real(1) / (Real(1) + std::exp(-v));
        const Real e = std::exp(v);
        return e / (Real(1) + e);
      });
}

// x^p for x >= 0.
template <typename Real>
BasicVar<Real> pow_scalar(BasicVar<Real> x, Real p) {
  for (std::size_t i = 0; i < x.numel(); ++i)
    if (x.value().data[i] < Real(0)) throw DomainError("pow_scalar: negative base at index " + std::to_string(i));
  return detail::unary(
      x, [p](Real v) { return p == Real(0) ? Real(1) : std::pow(v, p); },
      [p](Real v, Real) {
        if (p == Real(0)) return Real(0);
        if (v == Real(0)) return p == Real(1) ? Real(1) : Real(0);
        return p * std::pow(v, p - Real(1));
      });
}

// Elementwise op with caller-supplied value and derivative. Used by tests to
// build deliberately wrong gradients.
template <typename Real>
BasicVar<Real> map(BasicVar<Real> x, std::function<Real(Real)> f, std::function<Real(Real)> dfdx) {
  return detail::unary(x, f, [dfdx](Real v, Real) { return dfdx(v); });
}

template <typename Real>
BasicVar<Real> matmul(BasicVar<Real> a, BasicVar<Real> b) {
  auto& tape = detail::same_tape("matmul", {a, b});
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.shape[1] != bv.shape[0]) detail::shape_mismatch("matmul", av.shape, bv.shape);
  const int m = av.shape[0], k = av.shape[1], n = bv.shape[1];
  BasicTensor<Real> out(Shape{m, n});
  for (int i = 0; i < m; ++i) {
    Real* row = &out.data[static_cast<std::size_t>(i) * n];
    for (int p = 0; p < k; ++p) {
      const Real aip = av.data[static_cast<std::size_t>(i) * k + p];
      if (aip == Real(0)) continue;
      const Real* brow = &bv.data[static_cast<std::size_t>(p) * n];
      for (int j = 0; j < n; ++j) row[j] += aip * brow[j];
    }
  }
  const std::size_t ai = a.id, bi = b.id;
  return tape.record(std::move(out), {ai, bi}, [ai, bi, m, k, n](BasicTape<Real>& t, std::size_t self) {
    const auto& g = t.adjoint(self);
    const auto& ad = t.value(ai).data;
    const auto& bd = t.value(bi).data;
    if (t.needs_grad(ai)) {
      auto& ga = t.adjoint(ai);
      for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
          Real s = 0;
          for (int j = 0; j < n; ++j) s += g[static_cast<std::size_t>(i) * n + j] * bd[static_cast<std::size_t>(p) * n + j];
          ga[static_cast<std::size_t>(i) * k + p] += s;
        }
    }
    if (t.needs_grad(bi)) {
      auto& gb = t.adjoint(bi);
      for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
          const Real aip = ad[static_cast<std::size_t>(i) * k + p];
          if (aip == Real(0)) continue;
          for (int j = 0; j < n; ++j) gb[static_cast<std::size_t>(p) * n + j] += aip * g[static_cast<std::size_t>(i) * n + j];
        }
    }
  });
}

struct Conv2dAttrs {
  int stride = 1;
  int pad = 0;
};

namespace detail {

// Output columns ox in [lo, hi) read input column ox*stride - pad + k inside [0, in).
inline void valid_range(int out, int in, int stride, int pad, int k, int& lo, int& hi) {
  lo = 0;
  while (lo < out && lo * stride - pad + k < 0) ++lo;
  hi = out;
  while (hi > lo && (hi - 1) * stride - pad + k >= in) --hi;
}

}  // namespace detail

// x: [N,C,H,W], w: [O,C,KH,KW], optional bias [O] (pass has_bias=false to skip).
template <typename Real>
BasicVar<Real> conv2d(BasicVar<Real> x, BasicVar<Real> w, const BasicVar<Real>* bias, Conv2dAttrs attrs) {
  auto& tape = bias ? detail::same_tape("conv2d", {x, w, *bias}) : detail::same_tape("conv2d", {x, w});
  const auto& xv = x.value();
  const auto& wv = w.value();
  if (xv.rank() != 4 || wv.rank() != 4 || xv.shape[1] != wv.shape[1]) detail::shape_mismatch("conv2d", xv.shape, wv.shape);
  if (attrs.stride < 1 || attrs.pad < 0) throw ShapeError("conv2d: stride must be >= 1 and pad >= 0");
  const int N = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
  const int O = wv.shape[0], KH = wv.shape[2], KW = wv.shape[3];
  const int s = attrs.stride, pad = attrs.pad;
  const int Ho = (H + 2 * pad - KH) / s + 1;
  const int Wo = (W + 2 * pad - KW) / s + 1;
  if (Ho <= 0 || Wo <= 0) detail::shape_mismatch("conv2d", xv.shape, wv.shape);
  if (bias && (bias->value().rank() != 1 || bias->value().shape[0] != O))
    detail::shape_mismatch("conv2d(bias)", wv.shape, bias->value().shape);

  // Lowered to matrix products over the im2col buffer cols[R, P] with
  // R = C*KH*KW and P = Ho*Wo. Every inner loop is a unit-stride axpy.
  const int R = C * KH * KW, P = Ho * Wo;
  auto im2col = [=](const Real* img, Real* cols) {
    std::fill(cols, cols + static_cast<std::size_t>(R) * P, Real(0));
    for (int c = 0; c < C; ++c)
      for (int ky = 0; ky < KH; ++ky)
        for (int kx = 0; kx < KW; ++kx) {
          Real* crow = cols + static_cast<std::size_t>((c * KH + ky) * KW + kx) * P;
          int ylo, yhi, xlo, xhi;
          detail::valid_range(Ho, H, s, pad, ky, ylo, yhi);
          detail::valid_range(Wo, W, s, pad, kx, xlo, xhi);
          for (int oy = ylo; oy < yhi; ++oy) {
            const Real* ip = img + (static_cast<std::size_t>(c) * H + (oy * s - pad + ky)) * W;
            Real* dst = crow + static_cast<std::size_t>(oy) * Wo;
            for (int ox = xlo; ox < xhi; ++ox) dst[ox] = ip[ox * s - pad + kx];
          }
        }
  };
  const std::size_t img_in = static_cast<std::size_t>(C) * H * W, img_out = static_cast<std::size_t>(O) * P;

  BasicTensor<Real> out(Shape{N, O, Ho, Wo});
  std::vector<Real> cols(static_cast<std::size_t>(R) * P);
  for (int n = 0; n < N; ++n) {
    im2col(&xv.data[n * img_in], cols.data());
    for (int o = 0; o < O; ++o) {
      Real* orow = &out.data[n * img_out + static_cast<std::size_t>(o) * P];
      if (bias) std::fill(orow, orow + P, bias->value().data[o]);
      const Real* wrow = &wv.data[static_cast<std::size_t>(o) * R];
      for (int r = 0; r < R; ++r) {
        const Real wk = wrow[r];
        const Real* crow = &cols[static_cast<std::size_t>(r) * P];
        for (int p = 0; p < P; ++p) orow[p] += wk * crow[p];
      }
    }
  }

  std::vector<std::size_t> inputs{x.id, w.id};
  if (bias) inputs.push_back(bias->id);
  const std::size_t xi = x.id, wi = w.id;
  const std::size_t bi = bias ? bias->id : 0;
  const bool has_bias = bias != nullptr;
  return tape.record(std::move(out), inputs, [=](BasicTape<Real>& t, std::size_t self) {
    const auto& g = t.adjoint(self);
    const auto& xd = t.value(xi).data;
    const auto& wd = t.value(wi).data;
    std::vector<Real>* gx = t.needs_grad(xi) ? &t.adjoint(xi) : nullptr;
    std::vector<Real>* gw = t.needs_grad(wi) ? &t.adjoint(wi) : nullptr;
    std::vector<Real> buf(static_cast<std::size_t>(R) * P), colsT(gw ? static_cast<std::size_t>(P) * R : 0),
        gT(gw ? static_cast<std::size_t>(P) * O : 0);
    for (int n = 0; n < N; ++n) {
      const Real* gn = &g[n * img_out];
      if (gw) {
        // dW[o, :] += sum_p g[o, p] * cols[:, p], accumulated over p as axpys.
        im2col(&xd[n * img_in], buf.data());
        for (int r = 0; r < R; ++r)
          for (int p = 0; p < P; ++p) colsT[static_cast<std::size_t>(p) * R + r] = buf[static_cast<std::size_t>(r) * P + p];
        for (int o = 0; o < O; ++o)
          for (int p = 0; p < P; ++p) gT[static_cast<std::size_t>(p) * O + o] = gn[static_cast<std::size_t>(o) * P + p];
        for (int p = 0; p < P; ++p) {
          const Real* crow = &colsT[static_cast<std::size_t>(p) * R];
          for (int o = 0; o < O; ++o) {
            const Real go = gT[static_cast<std::size_t>(p) * O + o];
            if (go == Real(0)) continue;
            Real* dw = &(*gw)[static_cast<std::size_t>(o) * R];
            for (int r = 0; r < R; ++r) dw[r] += go * crow[r];
          }
        }
      }
      if (gx) {
        // dcols = W^T g, then scatter back (col2im).
        std::fill(buf.begin(), buf.end(), Real(0));
        for (int o = 0; o < O; ++o) {
          const Real* grow = gn + static_cast<std::size_t>(o) * P;
          const Real* wrow = &wd[static_cast<std::size_t>(o) * R];
          for (int r = 0; r < R; ++r) {
            const Real wk = wrow[r];
            Real* drow = &buf[static_cast<std::size_t>(r) * P];
            for (int p = 0; p < P; ++p) drow[p] += wk * grow[p];
          }
        }
        Real* gimg = &(*gx)[n * img_in];
        for (int c = 0; c < C; ++c)
          for (int ky = 0; ky < KH; ++ky)
            for (int kx = 0; kx < KW; ++kx) {
              const Real* drow = &buf[static_cast<std::size_t>((c * KH + ky) * KW + kx) * P];
              int ylo, yhi, xlo, xhi;
              detail::valid_range(Ho, H, s, pad, ky, ylo, yhi);
              detail::valid_range(Wo, W, s, pad, kx, xlo, xhi);
              for (int oy = ylo; oy < yhi; ++oy) {
                Real* gp = gimg + (static_cast<std::size_t>(c) * H + (oy * s - pad + ky)) * W;
                const Real* src = drow + static_cast<std::size_t>(oy) * Wo;
                for (int ox = xlo; ox < xhi; ++ox) gp[ox * s - pad + kx] += src[ox];
              }
            }
      }
    }
    if (has_bias && t.needs_grad(bi)) {
      auto& gb = t.adjoint(bi);
      for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o) {
          const Real* gp = &g[n * img_out + static_cast<std::size_t>(o) * P];
          Real acc = 0;
          for (int i = 0; i < P; ++i) acc += gp[i];
          gb[o] += acc;
        }
    }
  });
}

template <typename Real>
BasicVar<Real> conv2d(BasicVar<Real> x, BasicVar<Real> w, Conv2dAttrs attrs) {
  return conv2d<Real>(x, w, nullptr, attrs);
}

template <typename Real>
BasicVar<Real> conv2d(BasicVar<Real> x, BasicVar<Real> w, BasicVar<Real> bias, Conv2dAttrs attrs) {
  return conv2d<Real>(x, w, &bias, attrs);
}

template <typename Real>
BasicVar<Real> sum(BasicVar<Real> x) {
  auto& tape = detail::same_tape("sum", {x});
  Real s = 0;
  for (Real v : x.value().data) s += v;
  const std::size_t xi = x.id;
  return tape.record(BasicTensor<Real>::scalar(s), {xi}, [xi](BasicTape<Real>& t, std::size_t self) {
    const Real g = t.adjoint(self)[0];
    for (auto& v : t.adjoint(xi)) v += g;
  });
}

template <typename Real>
BasicVar<Real> mean(BasicVar<Real> x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), Real(1) / static_cast<Real>(x.numel()));
}

namespace detail {

inline void require_lastdim(const char* op, const Shape& s) {
  if (s.empty() || s.back() == 0) throw ShapeError(std::string(op) + ": needs a non-empty last dimension, got " + shape_str(s));
}

}  // namespace detail

template <typename Real>
BasicVar<Real> softmax_lastdim(BasicVar<Real> x) {
  auto& tape = detail::same_tape("softmax_lastdim", {x});
  const auto& xv = x.value();
  detail::require_lastdim("softmax_lastdim", xv.shape);
  const std::size_t d = static_cast<std::size_t>(xv.shape.back());
  const std::size_t rows = xv.numel() / d;
  BasicTensor<Real> out(xv.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* in = &xv.data[r * d];
    Real* o = &out.data[r * d];
    const Real mx = *std::max_element(in, in + d);
    Real z = 0;
    for (std::size_t j = 0; j < d; ++j) z += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < d; ++j) o[j] /= z;
  }
  const std::size_t xi = x.id;
  return tape.record(std::move(out), {xi}, [xi, d, rows](BasicTape<Real>& t, std::size_t self) {
    const auto& g = t.adjoint(self);
    const auto& y = t.value(self).data;
    auto& gx = t.adjoint(xi);
    for (std::size_t r = 0; r < rows; ++r) {
      Real dot = 0;
      for (std::size_t j = 0; j < d; ++j) dot += g[r * d + j] * y[r * d + j];
      for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += y[r * d + j] * (g[r * d + j] - dot);
    }
  });
}

template <typename Real>
BasicVar<Real> log_softmax_lastdim(BasicVar<Real> x) {
  auto& tape = detail::same_tape("log_softmax_lastdim", {x});
  const auto& xv = x.value();
  detail::require_lastdim("log_softmax_lastdim", xv.shape);
  const std::size_t d = static_cast<std::size_t>(xv.shape.back());
  const std::size_t rows = xv.numel() / d;
  BasicTensor<Real> out(xv.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* in = &xv.data[r * d];
    const Real mx = *std::max_element(in, in + d);
    Real z = 0;
    for (std::size_t j = 0; j < d; ++j) z += std::exp(in[j] - mx);
    const Real lz = mx + std::log(z);
    for (std::size_t j = 0; j < d; ++j) out.data[r * d + j] = in[j] - lz;
  }
  const std::size_t xi = x.id;
  return tape.record(std::move(out), {xi}, [xi, d, rows](BasicTape<Real>& t, std::size_t self) {
    const auto& g = t.adjoint(self);
    const auto& y = t.value(self).data;
    auto& gx = t.adjoint(xi);
    for (std::size_t r = 0; r < rows; ++r) {
      Real gs = 0;
      for (std::size_t j = 0; j < d; ++j) gs += g[r * d + j];
      for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += g[r * d + j] - std::exp(y[r * d + j]) * gs;
    }
  });
}

// Maximum along the last dimension; the output drops that dimension. The
// gradient flows to the first maximal entry.
template <typename Real>
BasicVar<Real> max_lastdim(BasicVar<Real> x) {
  auto& tape = detail::same_tape("max_lastdim", {x});
  const auto& xv = x.value();
  detail::require_lastdim("max_lastdim", xv.shape);
  const std::size_t d = static_cast<std::size_t>(xv.shape.back());
  const std::size_t rows = xv.numel() / d;
  Shape out_shape(xv.shape.begin(), xv.shape.end() - 1);
  BasicTensor<Real> out(out_shape);
  std::vector<std::size_t> arg(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* in = &xv.data[r * d];
    arg[r] = r * d + static_cast<std::size_t>(std::max_element(in, in + d) - in);
    out.data[r] = xv.data[arg[r]];
  }
  const std::size_t xi = x.id;
  return tape.record(std::move(out), {xi}, [xi, arg = std::move(arg)](BasicTape<Real>& t, std::size_t self) {
    const auto& g = t.adjoint(self);
    auto& gx = t.adjoint(xi);
    for (std::size_t r = 0; r < arg.size(); ++r) gx[arg[r]] += g[r];
  });
}

// Rows [begin, end) along the first dimension.
template <typename Real>
BasicVar<Real> slice(BasicVar<Real> x, int begin, int end) {
  auto& tape = detail::same_tape("slice", {x});
  const auto& xv = x.value();
  if (xv.rank() < 1 || begin < 0 || end > xv.shape[0] || begin > end)
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                     shape_str(xv.shape));
  const std::size_t inner = xv.shape[0] ? xv.numel() / static_cast<std::size_t>(xv.shape[0]) : 0;
  Shape s = xv.shape;
  s[0] = end - begin;
  const std::size_t off = static_cast<std::size_t>(begin) * inner;
  BasicTensor<Real> out(s, std::vector<Real>(xv.data.begin() + off, xv.data.begin() + off + shape_numel(s)));
  const std::size_t xi = x.id;
  return tape.record(std::move(out), {xi}, [xi, off](BasicTape<Real>& t, std::size_t self) {
    const auto& g = t.adjoint(self);
    auto& gx = t.adjoint(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[off + i] += g[i];
  });
}

template <typename Real>
BasicVar<Real> reshape(BasicVar<Real> x, Shape shape) {
  auto& tape = detail::same_tape("reshape", {x});
  if (shape_numel(shape) != x.numel()) detail::shape_mismatch("reshape", x.shape(), shape);
  BasicTensor<Real> out(std::move(shape), x.value().data);
  const std::size_t xi = x.id;
  return tape.record(std::move(out), {xi}, [xi](BasicTape<Real>& t, std::size_t self) {
    const auto& g = t.adjoint(self);
    auto& gx = t.adjoint(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

// out.flat[i] = x.flat[index[i]], reshaped to `shape`. Backward scatters.
template <typename Real>
BasicVar<Real> gather(BasicVar<Real> x, std::vector<std::size_t> index, Shape shape) {
  auto& tape = detail::same_tape("gather", {x});
  if (shape_numel(shape) != index.size())
    throw ShapeError("gather: " + std::to_string(index.size()) + " indices for shape " + shape_str(shape));
  const auto& xd = x.value().data;
  BasicTensor<Real> out(std::move(shape));
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= xd.size()) throw ShapeError("gather: index " + std::to_string(index[i]) + " out of range");
    out.data[i] = xd[index[i]];
  }
  const std::size_t xi = x.id;
  return tape.record(std::move(out), {xi}, [xi, index = std::move(index)](BasicTape<Real>& t, std::size_t self) {
    const auto& g = t.adjoint(self);
    auto& gx = t.adjoint(xi);
    for (std::size_t i = 0; i < index.size(); ++i) gx[index[i]] += g[i];
  });
}

// Concatenate along the first dimension; trailing dimensions must agree.
template <typename Real>
BasicVar<Real> concat0(const std::vector<BasicVar<Real>>& parts) {
  if (parts.empty()) throw ShapeError("concat0: no inputs");
  auto& tape = detail::same_tape("concat0", {parts.front()});
  Shape s = parts.front().shape();
  if (s.empty()) throw ShapeError("concat0: scalar input");
  s[0] = 0;
  std::vector<std::size_t> ids;
  std::vector<Real> data;
  for (const auto& p : parts) {
    detail::same_tape("concat0", {parts.front(), p});
    const Shape& ps = p.shape();
    if (ps.size() != s.size() || !std::equal(ps.begin() + 1, ps.end(), s.begin() + 1))
      detail::shape_mismatch("concat0", parts.front().shape(), ps);
    s[0] += ps[0];
    data.insert(data.end(), p.value().data.begin(), p.value().data.end());
    ids.push_back(p.id);
  }
  BasicTensor<Real> out(s, std::move(data));
  return tape.record(std::move(out), ids, [ids](BasicTape<Real>& t, std::size_t self) {
    const auto& g = t.adjoint(self);
    std::size_t off = 0;
    for (std::size_t id : ids) {
      const std::size_t n = t.value(id).numel();
      if (t.needs_grad(id)) {
        auto& gi = t.adjoint(id);
        for (std::size_t i = 0; i < n; ++i) gi[i] += g[off + i];
      }
      off += n;
    }
  });
}

// Elementwise smooth-L1 of (a - b) with transition at |d| = 1:
// 0.5 d^2 when |d| < 1, |d| - 0.5 otherwise.
template <typename Real>
BasicVar<Real> smooth_l1(BasicVar<Real> a, BasicVar<Real> b) {
  auto& tape = detail::same_tape("smooth_l1", {a, b});
  if (a.shape() != b.shape()) detail::shape_mismatch("smooth_l1", a.shape(), b.shape());
  const auto& ad = a.value().data;
  const auto& bd = b.value().data;
  BasicTensor<Real> out(a.shape());
  for (std::size_t i = 0; i < ad.size(); ++i) {
    const Real d = ad[i] - bd[i];
    out.data[i] = std::abs(d) < Real(1) ? Real(0.5) * d * d : std::abs(d) - Real(0.5);
  }
  const std::size_t ai = a.id, bi = b.id;
  return tape.record(std::move(out), {ai, bi}, [ai, bi](BasicTape<Real>& t, std::size_t self) {
    const auto& g = t.adjoint(self);
    const auto& ad = t.value(ai).data;
    const auto& bd = t.value(bi).data;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const Real d = ad[i] - bd[i];
      const Real dd = std::abs(d) < Real(1) ? d : (d > 0 ? Real(1) : Real(-1));
      if (t.needs_grad(ai)) t.adjoint(ai)[i] += g[i] * dd;
      if (t.needs_grad(bi)) t.adjoint(bi)[i] -= g[i] * dd;
    }
  });
}

}  // namespace ops

}  // namespace tsdet
