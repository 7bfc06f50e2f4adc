#pragma once

// Differentiable primitives over Tape-recorded arrays.
//
// Broadcasting is never implicit: operands of elementwise ops must share a
// shape; scalars go through scale()/shift(), last-axis vectors through
// add_bias(), anything else through an explicit broadcast_to().

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include "gravityflow/array.hpp"
#include "gravityflow/errors.hpp"
#include "gravityflow/gemm.hpp"
#include "gravityflow/tape.hpp"

namespace gravityflow {

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kPowFloor = 1e-6;

enum class Activation { relu, tanh, gelu, softplus, sigmoid };

inline Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::relu;
  if (name == "tanh") return Activation::tanh;
  if (name == "gelu") return Activation::gelu;
  if (name == "softplus") return Activation::softplus;
  if (name == "sigmoid") return Activation::sigmoid;
  throw ConfigError("unknown activation '" + std::string(name) + "'");
}

namespace detail {

template <class T>
void require_same_shape(const char* op, const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <class T>
void require_scalar(const char* op, const Var<T>& s) {
  if (s.size() != 1) throw DimensionError(std::string(op) + ": expected a scalar, got " + shape_str(s.shape()));
}

template <class T>
T sigmoid(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

template <class T>
T softplus(T x) {
  if (x > T{30}) return x;
  return std::log1p(std::exp(x));
}

template <class T>
T activate(Activation kind, T x) {
  switch (kind) {
    case Activation::relu: return x > T{0} ? x : T{0};
    case Activation::tanh: return std::tanh(x);
    case Activation::gelu: return T{0.5} * x * (T{1} + std::erf(x / std::numbers::sqrt2_v<T>));
    case Activation::softplus: return softplus(x);
    case Activation::sigmoid: return sigmoid(x);
  }
  return x;
}

// d activate / dx, given input x and output y.
template <class T>
T activate_slope(Activation kind, T x, T y) {
  switch (kind) {
    case Activation::relu: return x > T{0} ? T{1} : T{0};
    case Activation::tanh: return T{1} - y * y;
    case Activation::gelu: {
      const T cdf = T{0.5} * (T{1} + std::erf(x / std::numbers::sqrt2_v<T>));
      const T pdf = std::exp(T{-0.5} * x * x) / std::sqrt(T{2} * std::numbers::pi_v<T>);
      return cdf + x * pdf;
    }
    case Activation::softplus: return sigmoid(x);
    case Activation::sigmoid: return y * (T{1} - y);
  }
  return T{0};
}

inline std::vector<std::size_t> normalize_axes(std::vector<std::size_t> axes, std::size_t rank) {
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  for (auto a : axes)
    if (a >= rank) throw DimensionError("axis " + std::to_string(a) + " out of range for rank " + std::to_string(rank));
  return axes;
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape("add", a, b);
  Array<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  Tape<T>& t = a.tape();
  Var<T> r = t.record(std::move(out), {a, b});
  if (r.requires_grad()) {
    t.set_backward(r, [ia = a.id(), ib = b.id()](Tape<T>& tp, std::size_t self) {
      const auto& g = tp.upstream(self);
      for (auto id : {ia, ib}) {
        if (!tp.requires_grad(id)) continue;
        auto& gi = tp.grad_buffer(id);
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
      }
    });
  }
  return r;
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape("sub", a, b);
  Array<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  Tape<T>& t = a.tape();
  Var<T> r = t.record(std::move(out), {a, b});
  if (r.requires_grad()) {
    t.set_backward(r, [ia = a.id(), ib = b.id()](Tape<T>& tp, std::size_t self) {
      const auto& g = tp.upstream(self);
      if (tp.requires_grad(ia)) {
        auto& ga = tp.grad_buffer(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (tp.requires_grad(ib)) {
        auto& gb = tp.grad_buffer(ib);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return r;
}

// Hadamard (entrywise) product of equal-shaped arrays.
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape("mul", a, b);
  Array<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  Tape<T>& t = a.tape();
  Var<T> r = t.record(std::move(out), {a, b});
  if (r.requires_grad()) {
    t.set_backward(r, [ia = a.id(), ib = b.id()](Tape<T>& tp, std::size_t self) {
      const auto& g = tp.upstream(self);
      const auto& av = tp.value(ia);
      const auto& bv = tp.value(ib);
      if (tp.requires_grad(ia)) {
        auto& ga = tp.grad_buffer(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
      }
      if (tp.requires_grad(ib)) {
        auto& gb = tp.grad_buffer(ib);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
      }
    });
  }
  return r;
}

template <class T>
Var<T> hadamard(const Var<T>& a, const Var<T>& b) {
  return mul(a, b);
}

template <class T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <class T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <class T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) { return mul(a, b); }

// x * c for a compile-time-known constant c.
template <class T>
Var<T> mul_const(const Var<T>& x, T c) {
  Array<T> out = x.value();
  for (auto& v : out.storage()) v *= c;
  Tape<T>& t = x.tape();
  Var<T> r = t.record(std::move(out), {x});
  if (r.requires_grad()) {
    t.set_backward(r, [ix = x.id(), c](Tape<T>& tp, std::size_t self) {
      const auto& g = tp.upstream(self);
      auto& gx = tp.grad_buffer(ix);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += c * g[i];
    });
  }
  return r;
}

template <class T>
Var<T> add_const(const Var<T>& x, T c) {
  Array<T> out = x.value();
  for (auto& v : out.storage()) v += c;
  Tape<T>& t = x.tape();
  Var<T> r = t.record(std::move(out), {x});
  if (r.requires_grad()) {
    t.set_backward(r, [ix = x.id()](Tape<T>& tp, std::size_t self) {
      const auto& g = tp.upstream(self);
      auto& gx = tp.grad_buffer(ix);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return r;
}

// x * s where s is a differentiable scalar broadcast over x.
template <class T>
Var<T> scale(const Var<T>& x, const Var<T>& s) {
  detail::require_scalar("scale", s);
  const T sv = s.value()[0];
  Array<T> out = x.value();
  for (auto& v : out.storage()) v *= sv;
  Tape<T>& t = x.tape();
  Var<T> r = t.record(std::move(out), {x, s});
  if (r.requires_grad()) {
    t.set_backward(r, [ix = x.id(), is = s.id()](Tape<T>& tp, std::size_t self) {
      const auto& g = tp.upstream(self);
      const auto& xv = tp.value(ix);
      const T sv = tp.value(is)[0];
      if (tp.requires_grad(ix)) {
        auto& gx = tp.grad_buffer(ix);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += sv * g[i];
      }
      if (tp.requires_grad(is)) {
        T acc{0};
        for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xv[i];
        tp.grad_buffer(is)[0] += acc;
      }
    });
  }
  return r;
}

// x + s where s is a differentiable scalar broadcast over x.
template <class T>
Var<T> shift(const Var<T>& x, const Var<T>& s) {
  detail::require_scalar("shift", s);
  const T sv = s.value()[0];
  Array<T> out = x.value();
  for (auto& v : out.storage()) v += sv;
  Tape<T>& t = x.tape();
  Var<T> r = t.record(std::move(out), {x, s});
  if (r.requires_grad()) {
    t.set_backward(r, [ix = x.id(), is = s.id()](Tape<T>& tp, std::size_t self) {
      const auto& g = tp.upstream(self);
      if (tp.requires_grad(ix)) {
        auto& gx = tp.grad_buffer(ix);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (tp.requires_grad(is)) {
        T acc{0};
        for (std::size_t i = 0; i < g.size(); ++i) acc += g[i];
        tp.grad_buffer(is)[0] += acc;
      }
    });
  }
  return r;
}

// x + b with b broadcast along every axis but the last.
template <class T>
Var<T> add_bias(const Var<T>& x, const Var<T>& b) {
  const auto& xs = x.shape();
  if (xs.empty() || b.shape() != Shape{xs.back()})
    throw DimensionError("add_bias: bias " + shape_str(b.shape()) + " does not match last axis of " + shape_str(xs));
  const std::size_t c = xs.back();
  Array<T> out = x.value();
  const T* bv = b.value().storage().data();
  T* o = out.storage().data();
  for (std::size_t r = 0; r < out.size(); r += c)
    for (std::size_t k = 0; k < c; ++k) o[r + k] += bv[k];
  Tape<T>& t = x.tape();
  Var<T> r = t.record(std::move(out), {x, b});
  if (r.requires_grad()) {
    t.set_backward(r, [ix = x.id(), ib = b.id(), c](Tape<T>& tp, std::size_t self) {
      const auto& g = tp.upstream(self);
      if (tp.requires_grad(ix)) {
        auto& gx = tp.grad_buffer(ix);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (tp.requires_grad(ib)) {
        T* gb = tp.grad_buffer(ib).storage().data();
        const T* gv = g.storage().data();
        for (std::size_t r = 0; r < g.size(); r += c)
          for (std::size_t k = 0; k < c; ++k) gb[k] += gv[r + k];
      }
    });
  }
  return r;
}

template <class T>
Var<T> activation(const Var<T>& x, Activation kind) {
  Array<T> out = x.value();
  for (auto& v : out.storage()) v = detail::activate(kind, v);
  Tape<T>& t = x.tape();
  Var<T> r = t.record(std::move(out), {x});
  if (r.requires_grad()) {
    t.set_backward(r, [ix = x.id(), kind](Tape<T>& tp, std::size_t self) {
      const auto& g = tp.upstream(self);
      const auto& xv = tp.value(ix);
      const auto& yv = tp.value(self);
      auto& gx = tp.grad_buffer(ix);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * detail::activate_slope(kind, xv[i], yv[i]);
    });
  }
  return r;
}

template <class T>
Var<T> activation(const Var<T>& x, std::string_view kind) {
  return activation(x, parse_activation(kind));
}

template <class T> Var<T> relu(const Var<T>& x) { return activation(x, Activation::relu); }
template <class T> Var<T> tanh(const Var<T>& x) { return activation(x, Activation::tanh); }
template <class T> Var<T> gelu(const Var<T>& x) { return activation(x, Activation::gelu); }
template <class T> Var<T> softplus(const Var<T>& x) { return activation(x, Activation::softplus); }
template <class T> Var<T> sigmoid(const Var<T>& x) { return activation(x, Activation::sigmoid); }

// |x| with subgradient 0 at the origin.
template <class T>
Var<T> abs(const Var<T>& x) {
  Array<T> out = x.value();
  for (auto& v : out.storage()) v = std::abs(v);
  Tape<T>& t = x.tape();
  Var<T> r = t.record(std::move(out), {x});
  if (r.requires_grad()) {
    t.set_backward(r, [ix = x.id()](Tape<T>& tp, std::size_t self) {
      const auto& g = tp.upstream(self);
      const auto& xv = tp.value(ix);
      auto& gx = tp.grad_buffer(ix);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * static_cast<T>((xv[i] > T{0}) - (xv[i] < T{0}));
    });
  }
  return r;
}

// max(base, floor)^exponent with a differentiable scalar exponent. Entries
// below `floor` are clamped (zero gradient to the base there); negative
// entries are rejected.
template <class T>
Var<T> elementwise_pow(const Var<T>& base, const Var<T>& exponent, T floor = static_cast<T>(kPowFloor)) {
  detail::require_scalar("elementwise_pow", exponent);
  const T e = exponent.value()[0];
  Array<T> out = base.value();
  for (auto& v : out.storage()) {
    if (v < T{0}) throw DomainError("elementwise_pow: negative base " + std::to_string(static_cast<double>(v)));
    v = std::pow(std::max(v, floor), e);
  }
  Tape<T>& t = base.tape();
  Var<T> r = t.record(std::move(out), {base, exponent});
  if (r.requires_grad()) {
    t.set_backward(r, [ib = base.id(), ie = exponent.id(), floor](Tape<T>& tp, std::size_t self) {
      const auto& g = tp.upstream(self);
      const auto& bv = tp.value(ib);
      const auto& yv = tp.value(self);
      const T e = tp.value(ie)[0];
      if (tp.requires_grad(ib)) {
        auto& gb = tp.grad_buffer(ib);
        for (std::size_t i = 0; i < g.size(); ++i)
          if (bv[i] > floor) gb[i] += g[i] * e * yv[i] / bv[i];
      }
      if (tp.requires_grad(ie)) {
        T acc{0};
        for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * yv[i] * std::log(std::max(bv[i], floor));
        tp.grad_buffer(ie)[0] += acc;
      }
    });
  }
  return r;
}

// ------------------------------------------------------------------ structure

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Array<T> out = x.value().reshaped(std::move(shape));
  Tape<T>& t = x.tape();
  Var<T> r = t.record(std::move(out), {x});
  if (r.requires_grad()) {
    t.set_backward(r, [ix = x.id()](Tape<T>& tp, std::size_t self) {
      const auto& g = tp.upstream(self);
      auto& gx = tp.grad_buffer(ix);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return r;
}

// Axis permutation: out.shape[k] = x.shape[perm[k]].
template <class T>
Var<T> permute(const Var<T>& x, const std::vector<std::size_t>& perm) {
  const auto& xs = x.shape();
  if (perm.size() != xs.size()) throw DimensionError("permute: rank mismatch for " + shape_str(xs));
  std::vector<bool> seen(perm.size(), false);
  for (auto p : perm) {
    if (p >= perm.size() || seen[p]) throw DimensionError("permute: invalid permutation for " + shape_str(xs));
    seen[p] = true;
  }
  Shape os(xs.size());
  const auto xstr = strides_of(xs);
  std::vector<std::size_t> mapped(xs.size());
  for (std::size_t k = 0; k < xs.size(); ++k) {
    os[k] = xs[perm[k]];
    mapped[k] = xstr[perm[k]];
  }
  Array<T> out(os);
  const auto& xv = x.value();
  for_each_mapped(os, mapped, [&](std::size_t flat, std::size_t off) { out[flat] = xv[off]; });
  Tape<T>& t = x.tape();
  Var<T> r = t.record(std::move(out), {x});
  if (r.requires_grad()) {
    t.set_backward(r, [ix = x.id(), os, mapped](Tape<T>& tp, std::size_t self) {
      const auto& g = tp.upstream(self);
      auto& gx = tp.grad_buffer(ix);
      for_each_mapped(os, mapped, [&](std::size_t flat, std::size_t off) { gx[off] += g[flat]; });
    });
  }
  return r;
}

// Swaps the trailing two axes.
template <class T>
Var<T> transpose(const Var<T>& x) {
  const std::size_t r = x.shape().size();
  if (r < 2) throw DimensionError("transpose: rank < 2 for " + shape_str(x.shape()));
  std::vector<std::size_t> perm(r);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[r - 1], perm[r - 2]);
  return permute(x, perm);
}

// Explicit numpy-style broadcast; gradient sums over stretched axes.
template <class T>
Var<T> broadcast_to(const Var<T>& x, const Shape& shape) {
  const auto mapped = broadcast_strides(x.shape(), shape);
  Array<T> out(shape);
  const auto& xv = x.value();
  for_each_mapped(shape, mapped, [&](std::size_t flat, std::size_t off) { out[flat] = xv[off]; });
  Tape<T>& t = x.tape();
  Var<T> r = t.record(std::move(out), {x});
  if (r.requires_grad()) {
    t.set_backward(r, [ix = x.id(), shape, mapped](Tape<T>& tp, std::size_t self) {
      const auto& g = tp.upstream(self);
      auto& gx = tp.grad_buffer(ix);
      for_each_mapped(shape, mapped, [&](std::size_t flat, std::size_t off) { gx[off] += g[flat]; });
    });
  }
  return r;
}

template <class T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw DimensionError("concat: axis out of range for " + shape_str(s0));
  Shape os = s0;
  os[axis] = 0;
  for (const auto& p : parts) {
    const Shape& ps = p.shape();
    bool ok = ps.size() == s0.size();
    for (std::size_t k = 0; ok && k < ps.size(); ++k) ok = k == axis || ps[k] == s0[k];
    if (!ok) throw DimensionError("concat: " + shape_str(ps) + " incompatible with " + shape_str(s0));
    os[axis] += ps[axis];
  }
  const std::size_t outer = numel(Shape(s0.begin(), s0.begin() + static_cast<std::ptrdiff_t>(axis)));
  const std::size_t inner = numel(Shape(s0.begin() + static_cast<std::ptrdiff_t>(axis) + 1, s0.end()));
  const std::size_t out_row = os[axis] * inner;
  Array<T> out(os);
  std::vector<std::size_t> widths, offsets;
  std::size_t col = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[axis] * inner;
    const auto& pv = p.value();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pv.data() + o * w, w, out.data() + o * out_row + col);
    widths.push_back(w);
    offsets.push_back(col);
    col += w;
  }
  Tape<T>& t = parts[0].tape();
  Var<T> r = t.record(std::move(out), parts);
  if (r.requires_grad()) {
    std::vector<std::size_t> ids;
    for (const auto& p : parts) ids.push_back(p.id());
    t.set_backward(r, [ids, widths, offsets, outer, out_row](Tape<T>& tp, std::size_t self) {
      const auto& g = tp.upstream(self);
      for (std::size_t k = 0; k < ids.size(); ++k) {
        if (!tp.requires_grad(ids[k])) continue;
        auto& gp = tp.grad_buffer(ids[k]);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t j = 0; j < widths[k]; ++j) gp[o * widths[k] + j] += g[o * out_row + offsets[k] + j];
      }
    });
  }
  return r;
}

// Half-open range [begin, end) along `axis`.
template <class T>
Var<T> slice(const Var<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& xs = x.shape();
  if (axis >= xs.size() || begin > end || end > xs[axis])
    throw DimensionError("slice: [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                         std::to_string(axis) + " of " + shape_str(xs));
  Shape os = xs;
  os[axis] = end - begin;
  const std::size_t outer = numel(Shape(xs.begin(), xs.begin() + static_cast<std::ptrdiff_t>(axis)));
  const std::size_t inner = numel(Shape(xs.begin() + static_cast<std::ptrdiff_t>(axis) + 1, xs.end()));
  const std::size_t in_row = xs[axis] * inner;
  const std::size_t w = os[axis] * inner;
  const std::size_t start = begin * inner;
  Array<T> out(os);
  const auto& xv = x.value();
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(xv.data() + o * in_row + start, w, out.data() + o * w);
  Tape<T>& t = x.tape();
  Var<T> r = t.record(std::move(out), {x});
  if (r.requires_grad()) {
    t.set_backward(r, [ix = x.id(), outer, in_row, w, start](Tape<T>& tp, std::size_t self) {
      const auto& g = tp.upstream(self);
      auto& gx = tp.grad_buffer(ix);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < w; ++j) gx[o * in_row + start + j] += g[o * w + j];
    });
  }
  return r;
}

template <class T>
std::vector<Var<T>> split(const Var<T>& x, std::size_t axis, const std::vector<std::size_t>& sizes) {
  std::vector<Var<T>> out;
  std::size_t at = 0;
  for (auto s : sizes) {
    out.push_back(slice(x, axis, at, at + s));
    at += s;
  }
  if (at != x.shape().at(axis)) throw DimensionError("split: sizes do not cover axis of " + shape_str(x.shape()));
  return out;
}

// Rows of a [V, C] table selected by integer indices; result shape is
// index_shape + [C]. Gradient scatters back into the selected rows.
template <class T>
Var<T> gather_rows(const Var<T>& table, const std::vector<std::int64_t>& indices, const Shape& index_shape) {
  const Shape& ts = table.shape();
  if (ts.size() != 2) throw DimensionError("gather_rows: table must be rank 2, got " + shape_str(ts));
  if (numel(index_shape) != indices.size()) throw DimensionError("gather_rows: index count does not match index shape");
  const std::size_t v = ts[0], c = ts[1];
  for (auto i : indices)
    if (i < 0 || static_cast<std::size_t>(i) >= v)
      throw RangeError("gather_rows: index " + std::to_string(i) + " outside table of " + std::to_string(v) + " rows");
  Shape os = index_shape;
  os.push_back(c);
  Array<T> out(os);
  const auto& tv = table.value();
  for (std::size_t k = 0; k < indices.size(); ++k)
    std::copy_n(tv.data() + static_cast<std::size_t>(indices[k]) * c, c, out.data() + k * c);
  Tape<T>& t = table.tape();
  Var<T> r = t.record(std::move(out), {table});
  if (r.requires_grad()) {
    t.set_backward(r, [it = table.id(), indices, c](Tape<T>& tp, std::size_t self) {
      const auto& g = tp.upstream(self);
      auto& gt = tp.grad_buffer(it);
      for (std::size_t k = 0; k < indices.size(); ++k)
        for (std::size_t j = 0; j < c; ++j) gt[static_cast<std::size_t>(indices[k]) * c + j] += g[k * c + j];
    });
  }
  return r;
}

// ----------------------------------------------------------------- reductions

template <class T>
Var<T> reduce_sum(const Var<T>& x, std::vector<std::size_t> axes) {
  const Shape& xs = x.shape();
  axes = detail::normalize_axes(std::move(axes), xs.size());
  if (axes.empty()) return x;
  Shape keep = xs, os;
  for (auto a : axes) keep[a] = 1;
  for (std::size_t k = 0; k < xs.size(); ++k)
    if (!std::binary_search(axes.begin(), axes.end(), k)) os.push_back(xs[k]);
  const auto mapped = broadcast_strides(keep, xs);
  Array<T> out(os);
  const auto& xv = x.value();
  for_each_mapped(xs, mapped, [&](std::size_t flat, std::size_t off) { out[off] += xv[flat]; });
  Tape<T>& t = x.tape();
  Var<T> r = t.record(std::move(out), {x});
  if (r.requires_grad()) {
    t.set_backward(r, [ix = x.id(), xs, mapped](Tape<T>& tp, std::size_t self) {
      const auto& g = tp.upstream(self);
      auto& gx = tp.grad_buffer(ix);
      for_each_mapped(xs, mapped, [&](std::size_t flat, std::size_t off) { gx[flat] += g[off]; });
    });
  }
  return r;
}

template <class T>
Var<T> reduce_mean(const Var<T>& x, std::vector<std::size_t> axes) {
  const Shape& xs = x.shape();
  axes = detail::normalize_axes(std::move(axes), xs.size());
  if (axes.empty()) return x;
  std::size_t count = 1;
  for (auto a : axes) count *= xs[a];
  if (count == 0) throw DomainError("reduce_mean: empty reduction extent in " + shape_str(xs));
  return mul_const(reduce_sum(x, axes), T{1} / static_cast<T>(count));
}

template <class T>
Var<T> sum(const Var<T>& x) {
  std::vector<std::size_t> axes(x.shape().size());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  if (axes.empty()) return x;
  return reduce_sum(x, axes);
}

template <class T>
Var<T> mean(const Var<T>& x) {
  if (x.size() == 0) throw DomainError("mean of an empty array");
  return mul_const(sum(x), T{1} / static_cast<T>(x.size()));
}

// ------------------------------------------------------------ linear algebra

// Batched matrix product [..., m, k] x [..., k, n] -> [..., m, n]. Leading
// batch extents broadcast numpy-style.
template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2 || as[as.size() - 1] != bs[bs.size() - 2])
    throw DimensionError("matmul: shapes " + shape_str(as) + " and " + shape_str(bs) + " are not aligned");
  const std::size_t m = as[as.size() - 2], k = as.back(), n = bs.back();
  const Shape ab(as.begin(), as.end() - 2), bb(bs.begin(), bs.end() - 2);
  Shape batch;
  try {
    batch = broadcast_shapes(ab, bb);
  } catch (const DimensionError&) {
    throw DimensionError("matmul: batch extents of " + shape_str(as) + " and " + shape_str(bs) + " do not broadcast");
  }
  Shape os = batch;
  os.push_back(m);
  os.push_back(n);
  Array<T> out(os);
  const auto& av = a.value();
  const auto& bv = b.value();
  Tape<T>& t = a.tape();

  if (bb.empty()) {
    // [..., m, k] x [k, n]: one flat product.
    const std::size_t rows = numel(ab) * m;
    detail::gemm_accumulate(av.data(), bv.data(), out.data(), rows, k, n, false, false);
    Var<T> r = t.record(std::move(out), {a, b});
    if (r.requires_grad()) {
      t.set_backward(r, [ia = a.id(), ib = b.id(), rows, k, n](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.upstream(self);
        if (tp.requires_grad(ia))
          detail::gemm_accumulate(g.data(), tp.value(ib).data(), tp.grad_buffer(ia).data(), rows, n, k, false, true);
        if (tp.requires_grad(ib))
          detail::gemm_accumulate(tp.value(ia).data(), g.data(), tp.grad_buffer(ib).data(), k, rows, n, true, false);
      });
    }
    return r;
  }

  std::vector<std::size_t> aoff, boff;
  const auto amap = broadcast_strides(ab, batch);
  const auto bmap = broadcast_strides(bb, batch);
  for_each_mapped(batch, amap, [&](std::size_t, std::size_t off) { aoff.push_back(off * m * k); });
  for_each_mapped(batch, bmap, [&](std::size_t, std::size_t off) { boff.push_back(off * k * n); });
  for (std::size_t s = 0; s < aoff.size(); ++s)
    detail::gemm_accumulate(av.data() + aoff[s], bv.data() + boff[s], out.data() + s * m * n, m, k, n, false, false);
  Var<T> r = t.record(std::move(out), {a, b});
  if (r.requires_grad()) {
    t.set_backward(r, [ia = a.id(), ib = b.id(), aoff, boff, m, k, n](Tape<T>& tp, std::size_t self) {
      const auto& g = tp.upstream(self);
      if (tp.requires_grad(ia)) {
        auto& ga = tp.grad_buffer(ia);
        const auto& bv = tp.value(ib);
        for (std::size_t s = 0; s < aoff.size(); ++s)
          detail::gemm_accumulate(g.data() + s * m * n, bv.data() + boff[s], ga.data() + aoff[s], m, n, k, false, true);
      }
      if (tp.requires_grad(ib)) {
        auto& gb = tp.grad_buffer(ib);
        const auto& av = tp.value(ia);
        for (std::size_t s = 0; s < aoff.size(); ++s)
          detail::gemm_accumulate(av.data() + aoff[s], g.data() + s * m * n, gb.data() + boff[s], k, m, n, true, false);
      }
    });
  }
  return r;
}

// Normalizes over the last axis, then applies gain and bias (both [C]).
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps = static_cast<T>(kLayerNormEps)) {
  const Shape& xs = x.shape();
  if (xs.empty() || xs.back() == 0) throw DomainError("layer_norm: channel extent is 0 in " + shape_str(xs));
  const std::size_t c = xs.back();
  if (gain.shape() != Shape{c} || bias.shape() != Shape{c})
    throw DimensionError("layer_norm: gain/bias must be [" + std::to_string(c) + "]");
  const std::size_t rows = x.size() / c;
  const auto& xv = x.value();
  const auto& gv = gain.value();
  const auto& bv = bias.value();
  std::vector<T> xhat(x.size()), inv(rows);
  Array<T> out(xs);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * c;
    T mu{0};
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<T>(c);
    T var{0};
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(c);
    inv[r] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[r * c + j] = (row[j] - mu) * inv[r];
      out[r * c + j] = xhat[r * c + j] * gv[j] + bv[j];
    }
  }
  Tape<T>& t = x.tape();
  Var<T> res = t.record(std::move(out), {x, gain, bias});
  if (res.requires_grad()) {
    t.set_backward(res, [ix = x.id(), ig = gain.id(), ib = bias.id(), xhat = std::move(xhat), inv = std::move(inv), rows,
                         c](Tape<T>& tp, std::size_t self) {
      const auto& g = tp.upstream(self);
      const auto& gv = tp.value(ig);
      if (tp.requires_grad(ig)) {
        auto& gg = tp.grad_buffer(ig);
        for (std::size_t i = 0; i < g.size(); ++i) gg[i % c] += g[i] * xhat[i];
      }
      if (tp.requires_grad(ib)) {
        T* gb = tp.grad_buffer(ib).storage().data();
        const T* gv = g.storage().data();
        for (std::size_t r = 0; r < g.size(); r += c)
          for (std::size_t k = 0; k < c; ++k) gb[k] += gv[r + k];
      }
      if (tp.requires_grad(ix)) {
        auto& gx = tp.grad_buffer(ix);
        const T cn = static_cast<T>(c);
        for (std::size_t r = 0; r < rows; ++r) {
          T s1{0}, s2{0};
          for (std::size_t j = 0; j < c; ++j) {
            const T d = g[r * c + j] * gv[j];
            s1 += d;
            s2 += d * xhat[r * c + j];
          }
          for (std::size_t j = 0; j < c; ++j) {
            const T d = g[r * c + j] * gv[j];
            gx[r * c + j] += inv[r] / cn * (cn * d - s1 - xhat[r * c + j] * s2);
          }
        }
      }
    });
  }
  return res;
}

}  // namespace gravityflow
