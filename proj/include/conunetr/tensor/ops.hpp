#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "conunetr/tensor/tape.hpp"
#include "conunetr/tensor/tensor.hpp"

namespace conunetr {

template <typename S>
using MatMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename S>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// ---------------------------------------------------------------------------
// broadcasting
//
// Shapes are right-aligned; a singleton extent stretches to match the other
// operand. This is the only broadcast rule the model needs.
// ---------------------------------------------------------------------------

struct BroadcastPlan {
  Shape out;
  int rank = 0;                              // padded rank
  std::array<std::int64_t, 4> dims{};        // padded output extents
  std::array<std::int64_t, 4> a_stride{};    // 0 on stretched axes
  std::array<std::int64_t, 4> b_stride{};
};

inline BroadcastPlan broadcast_plan(const Shape& a, const Shape& b, const char* op) {
  BroadcastPlan plan;
  plan.rank = std::max(1, std::max(a.rank(), b.rank()));
  std::array<std::int64_t, 4> a_dims{}, b_dims{};
  a_dims.fill(1);
  b_dims.fill(1);
  plan.dims.fill(1);
  for (int i = 0; i < a.rank(); ++i) a_dims[static_cast<std::size_t>(plan.rank - a.rank() + i)] = a.extent(i);
  for (int i = 0; i < b.rank(); ++i) b_dims[static_cast<std::size_t>(plan.rank - b.rank() + i)] = b.extent(i);

  std::vector<std::int64_t> out_dims;
  for (int i = 0; i < plan.rank; ++i) {
    const std::int64_t ad = a_dims[static_cast<std::size_t>(i)];
    const std::int64_t bd = b_dims[static_cast<std::size_t>(i)];
    if (ad != bd && ad != 1 && bd != 1) {
      throw std::invalid_argument(std::string(op) + ": incompatible shapes " + a.str() +
                                  " and " + b.str());
    }
    plan.dims[static_cast<std::size_t>(i)] = std::max(ad, bd);
    out_dims.push_back(plan.dims[static_cast<std::size_t>(i)]);
  }
  // Preserve the higher-rank operand's rank; a scalar-vs-scalar op stays rank 0.
  if (std::max(a.rank(), b.rank()) == 0) {
    plan.out = Shape{};
  } else {
    plan.out = Shape(out_dims);
  }

  std::array<std::int64_t, 4> a_rm{}, b_rm{};
  std::int64_t as = 1, bs = 1;
  for (int i = plan.rank - 1; i >= 0; --i) {
    a_rm[static_cast<std::size_t>(i)] = as;
    b_rm[static_cast<std::size_t>(i)] = bs;
    as *= a_dims[static_cast<std::size_t>(i)];
    bs *= b_dims[static_cast<std::size_t>(i)];
  }
  for (int i = 0; i < plan.rank; ++i) {
    plan.a_stride[static_cast<std::size_t>(i)] =
        a_dims[static_cast<std::size_t>(i)] == 1 ? 0 : a_rm[static_cast<std::size_t>(i)];
    plan.b_stride[static_cast<std::size_t>(i)] =
        b_dims[static_cast<std::size_t>(i)] == 1 ? 0 : b_rm[static_cast<std::size_t>(i)];
  }
  return plan;
}

// Visits every output element of a broadcast op as (out_flat, a_flat, b_flat).
template <typename Fn>
inline void for_each_broadcast(const BroadcastPlan& plan, Fn&& fn) {
  const auto& d = plan.dims;
  const auto& sa = plan.a_stride;
  const auto& sb = plan.b_stride;
  std::int64_t out = 0;
  for (std::int64_t i0 = 0; i0 < d[0]; ++i0)
    for (std::int64_t i1 = 0; i1 < d[1]; ++i1)
      for (std::int64_t i2 = 0; i2 < d[2]; ++i2) {
        std::int64_t a_off = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
        std::int64_t b_off = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
        for (std::int64_t i3 = 0; i3 < d[3]; ++i3) {
          fn(out++, a_off, b_off);
          a_off += sa[3];
          b_off += sb[3];
        }
      }
}

namespace detail {

// Shared skeleton of the broadcasting binary ops. The derivative lambdas
// receive (a_value, b_value) and return the local partial.
template <typename S, typename FwdFn, typename DaFn, typename DbFn>
Tensor<S> binary_op(const char* name, const Tensor<S>& a, const Tensor<S>& b, FwdFn fwd,
                    DaFn da, DbFn db) {
  const BroadcastPlan plan = broadcast_plan(a.shape(), b.shape(), name);
  Tensor<S> out = Tensor<S>::allocate(plan.out);
  const S* av = a.values().data();
  const S* bv = b.values().data();
  S* ov = out.mutable_values().data();
  for_each_broadcast(plan, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
    ov[o] = fwd(av[ia], bv[ib]);
  });
  throw_if_not_finite(out, name);

  if (Tape<S>* tape = recording_tape<S>({&a, &b})) {
    mark_output(out, tape);
    auto an = a.node();
    auto bn = b.node();
    auto on = out.node();
    tape->record(name, on, [plan, an, bn, on, da, db]() {
      const S* g = on->grad.data();
      const S* avd = an->values.data();
      const S* bvd = bn->values.data();
      S* ga = nullptr;
      S* gb = nullptr;
      if (an->requires_grad) {
        if (an->grad.empty()) an->grad.assign(an->values.size(), S(0));
        ga = an->grad.data();
      }
      if (bn->requires_grad) {
        if (bn->grad.empty()) bn->grad.assign(bn->values.size(), S(0));
        gb = bn->grad.data();
      }
      for_each_broadcast(plan, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
        const S up = g[o];
        if (ga) ga[ia] += da(avd[ia], bvd[ib]) * up;
        if (gb) gb[ib] += db(avd[ia], bvd[ib]) * up;
      });
    });
  }
  return out;
}

// Unary elementwise skeleton; derivative receives the input value.
template <typename S, typename FwdFn, typename DFn>
Tensor<S> unary_op(const char* name, const Tensor<S>& x, FwdFn fwd, DFn dfn) {
  Tensor<S> out = Tensor<S>::allocate(x.shape());
  const S* xv = x.values().data();
  S* ov = out.mutable_values().data();
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) ov[i] = fwd(xv[i]);
  throw_if_not_finite(out, name);

  if (Tape<S>* tape = recording_tape<S>({&x})) {
    mark_output(out, tape);
    auto xn = x.node();
    auto on = out.node();
    tape->record(name, on, [xn, on, dfn, n]() {
      if (xn->grad.empty()) xn->grad.assign(xn->values.size(), S(0));
      const S* g = on->grad.data();
      const S* xv2 = xn->values.data();
      S* gx = xn->grad.data();
      for (std::int64_t i = 0; i < n; ++i) gx[i] += dfn(xv2[i]) * g[i];
    });
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op<S>(
      "add", a, b, [](S x, S y) { return x + y; }, [](S, S) { return S(1); },
      [](S, S) { return S(1); });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op<S>(
      "sub", a, b, [](S x, S y) { return x - y; }, [](S, S) { return S(1); },
      [](S, S) { return S(-1); });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op<S>(
      "mul", a, b, [](S x, S y) { return x * y; }, [](S, S y) { return y; },
      [](S x, S) { return x; });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& x, S factor) {
  return detail::unary_op<S>(
      "scale", x, [factor](S v) { return v * factor; }, [factor](S) { return factor; });
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& x, S c) {
  return detail::unary_op<S>(
      "add_scalar", x, [c](S v) { return v + c; }, [](S) { return S(1); });
}

template <typename S>
Tensor<S> neg(const Tensor<S>& x) {
  return scale(x, S(-1));
}

template <typename S>
Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <typename S>
Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <typename S>
Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) { return mul(a, b); }
template <typename S>
Tensor<S> operator*(const Tensor<S>& a, S factor) { return scale(a, factor); }
template <typename S>
Tensor<S> operator*(S factor, const Tensor<S>& a) { return scale(a, factor); }

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  return detail::unary_op<S>(
      "relu", x, [](S v) { return v > S(0) ? v : S(0); },
      [](S v) { return v > S(0) ? S(1) : S(0); });
}

namespace detail {
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;
}  // namespace detail

// tanh approximation of GELU.
template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
  return detail::unary_op<S>(
      "gelu", x,
      [](S v) {
        const double z = static_cast<double>(v);
        const double t = std::tanh(detail::kGeluC * (z + detail::kGeluA * z * z * z));
        return static_cast<S>(0.5 * z * (1.0 + t));
      },
      [](S v) {
        const double z = static_cast<double>(v);
        const double u = detail::kGeluC * (z + detail::kGeluA * z * z * z);
        const double t = std::tanh(u);
        const double du = detail::kGeluC * (1.0 + 3.0 * detail::kGeluA * z * z);
        return static_cast<S>(0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * du);
      });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  S total = S(0);
  for (const S v : x.values()) total += v;
  Tensor<S> out = Tensor<S>::from_values(Shape{}, {total});
  throw_if_not_finite(out, "sum");
  if (Tape<S>* tape = recording_tape<S>({&x})) {
    mark_output(out, tape);
    auto xn = x.node();
    auto on = out.node();
    tape->record("sum", on, [xn, on]() {
      if (xn->grad.empty()) xn->grad.assign(xn->values.size(), S(0));
      const S g = on->grad[0];
      for (S& v : xn->grad) v += g;
    });
  }
  return out;
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
  return scale(sum(x), S(1) / static_cast<S>(x.numel()));
}

// ---------------------------------------------------------------------------
// matmul
//
// Rank 2: [m,k] x [k,n] -> [m,n]. Higher ranks are batched over identical
// leading extents, e.g. [B,H,m,k] x [B,H,k,n]. Eigen does the arithmetic.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() < 2 || b.rank() < 2 || a.rank() != b.rank()) {
    throw std::invalid_argument("matmul: operands must have equal rank >= 2, got " +
                                a.shape().str() + " and " + b.shape().str());
  }
  const int r = a.rank();
  const std::int64_t m = a.shape().extent(r - 2);
  const std::int64_t k = a.shape().extent(r - 1);
  const std::int64_t k2 = b.shape().extent(r - 2);
  const std::int64_t n = b.shape().extent(r - 1);
  if (k != k2) {
    throw std::invalid_argument("matmul: inner extents differ, " + a.shape().str() +
                                " vs " + b.shape().str());
  }
  std::int64_t batch = 1;
  std::vector<std::int64_t> out_dims;
  for (int i = 0; i < r - 2; ++i) {
    if (a.shape().extent(i) != b.shape().extent(i)) {
      throw std::invalid_argument("matmul: batch extents differ, " + a.shape().str() +
                                  " vs " + b.shape().str());
    }
    batch *= a.shape().extent(i);
    out_dims.push_back(a.shape().extent(i));
  }
  out_dims.push_back(m);
  out_dims.push_back(n);

  Tensor<S> out = Tensor<S>::allocate(Shape(out_dims));
  const S* av = a.values().data();
  const S* bv = b.values().data();
  S* ov = out.mutable_values().data();
  for (std::int64_t i = 0; i < batch; ++i) {
    ConstMatMap<S> ma(av + i * m * k, m, k);
    ConstMatMap<S> mb(bv + i * k * n, k, n);
    MatMap<S> mo(ov + i * m * n, m, n);
    mo.noalias() = ma * mb;
  }
  throw_if_not_finite(out, "matmul");

  if (Tape<S>* tape = recording_tape<S>({&a, &b})) {
    mark_output(out, tape);
    auto an = a.node();
    auto bn = b.node();
    auto on = out.node();
    tape->record("matmul", on, [an, bn, on, batch, m, k, n]() {
      const S* g = on->grad.data();
      const S* avd = an->values.data();
      const S* bvd = bn->values.data();
      if (an->requires_grad) {
        if (an->grad.empty()) an->grad.assign(an->values.size(), S(0));
        for (std::int64_t i = 0; i < batch; ++i) {
          ConstMatMap<S> mg(g + i * m * n, m, n);
          ConstMatMap<S> mb(bvd + i * k * n, k, n);
          MatMap<S> mda(an->grad.data() + i * m * k, m, k);
          mda.noalias() += mg * mb.transpose();
        }
      }
      if (bn->requires_grad) {
        if (bn->grad.empty()) bn->grad.assign(bn->values.size(), S(0));
        for (std::int64_t i = 0; i < batch; ++i) {
          ConstMatMap<S> mg(g + i * m * n, m, n);
          ConstMatMap<S> ma(avd + i * m * k, m, k);
          MatMap<S> mdb(bn->grad.data() + i * k * n, k, n);
          mdb.noalias() += ma.transpose() * mg;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax family
// ---------------------------------------------------------------------------

namespace detail {

inline int normalize_axis(int axis, int rank, const char* op) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw std::invalid_argument(std::string(op) + ": axis " + std::to_string(axis) +
                                " out of range for rank " + std::to_string(rank));
  }
  return a;
}

struct AxisSpan {
  std::int64_t outer, len, inner;
};

inline AxisSpan axis_span(const Shape& shape, int axis) {
  AxisSpan s{1, shape.extent(axis), 1};
  for (int i = 0; i < axis; ++i) s.outer *= shape.extent(i);
  for (int i = axis + 1; i < shape.rank(); ++i) s.inner *= shape.extent(i);
  return s;
}

// Visits each 1-D lane along `axis` as a (base offset, stride) pair.
template <typename Fn>
inline void for_each_lane(const AxisSpan& s, Fn&& fn) {
  for (std::int64_t o = 0; o < s.outer; ++o) {
    const std::int64_t block = o * s.len * s.inner;
    for (std::int64_t i = 0; i < s.inner; ++i) fn(block + i, s.inner);
  }
}

}  // namespace detail

// Max-subtracted softmax along `axis`; lanes sum to 1.
template <typename S>
Tensor<S> softmax(const Tensor<S>& x, int axis) {
  const int ax = detail::normalize_axis(axis, x.rank(), "softmax");
  const detail::AxisSpan span = detail::axis_span(x.shape(), ax);
  Tensor<S> out = Tensor<S>::allocate(x.shape());
  const S* xv = x.values().data();
  S* ov = out.mutable_values().data();
  detail::for_each_lane(span, [&](std::int64_t base, std::int64_t stride) {
    S mx = xv[base];
    for (std::int64_t j = 1; j < span.len; ++j) mx = std::max(mx, xv[base + j * stride]);
    S total = S(0);
    for (std::int64_t j = 0; j < span.len; ++j) {
      const S e = std::exp(xv[base + j * stride] - mx);
      ov[base + j * stride] = e;
      total += e;
    }
    const S inv = S(1) / total;
    for (std::int64_t j = 0; j < span.len; ++j) ov[base + j * stride] *= inv;
  });
  throw_if_not_finite(out, "softmax");

  if (Tape<S>* tape = recording_tape<S>({&x})) {
    mark_output(out, tape);
    auto xn = x.node();
    auto on = out.node();
    tape->record("softmax", on, [xn, on, span]() {
      if (xn->grad.empty()) xn->grad.assign(xn->values.size(), S(0));
      const S* g = on->grad.data();
      const S* y = on->values.data();
      S* gx = xn->grad.data();
      detail::for_each_lane(span, [&](std::int64_t base, std::int64_t stride) {
        S dot = S(0);
        for (std::int64_t j = 0; j < span.len; ++j) {
          const std::int64_t p = base + j * stride;
          dot += g[p] * y[p];
        }
        for (std::int64_t j = 0; j < span.len; ++j) {
          const std::int64_t p = base + j * stride;
          gx[p] += y[p] * (g[p] - dot);
        }
      });
    });
  }
  return out;
}

// log(softmax(x)) in one numerically stable op.
template <typename S>
Tensor<S> log_softmax(const Tensor<S>& x, int axis) {
  const int ax = detail::normalize_axis(axis, x.rank(), "log_softmax");
  const detail::AxisSpan span = detail::axis_span(x.shape(), ax);
  Tensor<S> out = Tensor<S>::allocate(x.shape());
  const S* xv = x.values().data();
  S* ov = out.mutable_values().data();
  detail::for_each_lane(span, [&](std::int64_t base, std::int64_t stride) {
    S mx = xv[base];
    for (std::int64_t j = 1; j < span.len; ++j) mx = std::max(mx, xv[base + j * stride]);
    S total = S(0);
    for (std::int64_t j = 0; j < span.len; ++j) total += std::exp(xv[base + j * stride] - mx);
    const S lse = mx + std::log(total);
    for (std::int64_t j = 0; j < span.len; ++j) {
      const std::int64_t p = base + j * stride;
      ov[p] = xv[p] - lse;
    }
  });
  throw_if_not_finite(out, "log_softmax");

  if (Tape<S>* tape = recording_tape<S>({&x})) {
    mark_output(out, tape);
    auto xn = x.node();
    auto on = out.node();
    tape->record("log_softmax", on, [xn, on, span]() {
      if (xn->grad.empty()) xn->grad.assign(xn->values.size(), S(0));
      const S* g = on->grad.data();
      const S* ls = on->values.data();
      S* gx = xn->grad.data();
      detail::for_each_lane(span, [&](std::int64_t base, std::int64_t stride) {
        S gsum = S(0);
        for (std::int64_t j = 0; j < span.len; ++j) gsum += g[base + j * stride];
        for (std::int64_t j = 0; j < span.len; ++j) {
          const std::int64_t p = base + j * stride;
          gx[p] += g[p] - std::exp(ls[p]) * gsum;
        }
      });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

// Normalizes each last-axis vector to mean 0 / variance 1, then applies the
// per-feature affine gain and shift.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& shift,
                     S eps = S(1e-5)) {
  if (x.rank() < 1) throw std::invalid_argument("layer_norm: input must have rank >= 1");
  const std::int64_t feat = x.shape().extent(x.rank() - 1);
  if (gain.numel() != feat || shift.numel() != feat) {
    throw std::invalid_argument("layer_norm: gain/shift extent must equal last axis " +
                                std::to_string(feat));
  }
  const std::int64_t rows = x.numel() / feat;
  Tensor<S> out = Tensor<S>::allocate(x.shape());
  const S* xv = x.values().data();
  const S* gv = gain.values().data();
  const S* sv = shift.values().data();
  S* ov = out.mutable_values().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const S* row = xv + r * feat;
    S m = S(0);
    for (std::int64_t j = 0; j < feat; ++j) m += row[j];
    m /= static_cast<S>(feat);
    S var = S(0);
    for (std::int64_t j = 0; j < feat; ++j) {
      const S d = row[j] - m;
      var += d * d;
    }
    var /= static_cast<S>(feat);
    const S inv = S(1) / std::sqrt(var + eps);
    S* orow = ov + r * feat;
    for (std::int64_t j = 0; j < feat; ++j) orow[j] = (row[j] - m) * inv * gv[j] + sv[j];
  }
  throw_if_not_finite(out, "layer_norm");

  if (Tape<S>* tape = recording_tape<S>({&x, &gain, &shift})) {
    mark_output(out, tape);
    auto xn = x.node();
    auto gn = gain.node();
    auto sn = shift.node();
    auto on = out.node();
    tape->record("layer_norm", on, [xn, gn, sn, on, rows, feat, eps]() {
      const S* g = on->grad.data();
      const S* xv2 = xn->values.data();
      const S* gv2 = gn->values.data();
      S* gx = nullptr;
      S* gg = nullptr;
      S* gs = nullptr;
      if (xn->requires_grad) {
        if (xn->grad.empty()) xn->grad.assign(xn->values.size(), S(0));
        gx = xn->grad.data();
      }
      if (gn->requires_grad) {
        if (gn->grad.empty()) gn->grad.assign(gn->values.size(), S(0));
        gg = gn->grad.data();
      }
      if (sn->requires_grad) {
        if (sn->grad.empty()) sn->grad.assign(sn->values.size(), S(0));
        gs = sn->grad.data();
      }
      std::vector<S> xhat(static_cast<std::size_t>(feat));
      for (std::int64_t r = 0; r < rows; ++r) {
        const S* row = xv2 + r * feat;
        const S* grow = g + r * feat;
        S m = S(0);
        for (std::int64_t j = 0; j < feat; ++j) m += row[j];
        m /= static_cast<S>(feat);
        S var = S(0);
        for (std::int64_t j = 0; j < feat; ++j) {
          const S d = row[j] - m;
          var += d * d;
        }
        var /= static_cast<S>(feat);
        const S inv = S(1) / std::sqrt(var + eps);
        for (std::int64_t j = 0; j < feat; ++j) xhat[static_cast<std::size_t>(j)] = (row[j] - m) * inv;

        if (gg || gs) {
          for (std::int64_t j = 0; j < feat; ++j) {
            if (gg) gg[j] += grow[j] * xhat[static_cast<std::size_t>(j)];
            if (gs) gs[j] += grow[j];
          }
        }
        if (gx) {
          S mean_dxhat = S(0), mean_dxhat_xhat = S(0);
          for (std::int64_t j = 0; j < feat; ++j) {
            const S dxh = grow[j] * gv2[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat[static_cast<std::size_t>(j)];
          }
          mean_dxhat /= static_cast<S>(feat);
          mean_dxhat_xhat /= static_cast<S>(feat);
          S* gxrow = gx + r * feat;
          for (std::int64_t j = 0; j < feat; ++j) {
            const S dxh = grow[j] * gv2[j];
            gxrow[j] += inv * (dxh - mean_dxhat -
                               xhat[static_cast<std::size_t>(j)] * mean_dxhat_xhat);
          }
        }
      }
    });
  }
  return out;
}

// Per-image normalization over channel groups and spatial extent; the affine
// parameters stay per-channel. Batch statistics are never used, so batch
// size 1 behaves identically to any other.
template <typename S>
Tensor<S> group_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& shift,
                     std::int64_t group_size, S eps = S(1e-5)) {
  if (x.rank() != 4) throw std::invalid_argument("group_norm: expected [B,C,H,W] input");
  const std::int64_t b = x.shape().extent(0), c = x.shape().extent(1),
                     hw = x.shape().extent(2) * x.shape().extent(3);
  if (c % group_size != 0) {
    throw std::invalid_argument("group_norm: channel count " + std::to_string(c) +
                                " not divisible by group size " + std::to_string(group_size));
  }
  if (gain.numel() != c || shift.numel() != c) {
    throw std::invalid_argument("group_norm: gain/shift must have one entry per channel");
  }
  const std::int64_t groups = c / group_size;
  const std::int64_t glen = group_size * hw;
  Tensor<S> out = Tensor<S>::allocate(x.shape());
  const S* xv = x.values().data();
  const S* gv = gain.values().data();
  const S* sv = shift.values().data();
  S* ov = out.mutable_values().data();
  for (std::int64_t bi = 0; bi < b; ++bi) {
    for (std::int64_t gi = 0; gi < groups; ++gi) {
      const std::int64_t base = bi * c * hw + gi * glen;
      S m = S(0);
      for (std::int64_t j = 0; j < glen; ++j) m += xv[base + j];
      m /= static_cast<S>(glen);
      S var = S(0);
      for (std::int64_t j = 0; j < glen; ++j) {
        const S d = xv[base + j] - m;
        var += d * d;
      }
      var /= static_cast<S>(glen);
      const S inv = S(1) / std::sqrt(var + eps);
      for (std::int64_t ch = 0; ch < group_size; ++ch) {
        const std::int64_t cidx = gi * group_size + ch;
        const S w = gv[cidx], s0 = sv[cidx];
        const std::int64_t off = base + ch * hw;
        for (std::int64_t j = 0; j < hw; ++j) ov[off + j] = (xv[off + j] - m) * inv * w + s0;
      }
    }
  }
  throw_if_not_finite(out, "group_norm");

  if (Tape<S>* tape = recording_tape<S>({&x, &gain, &shift})) {
    mark_output(out, tape);
    auto xn = x.node();
    auto gn = gain.node();
    auto sn = shift.node();
    auto on = out.node();
    tape->record("group_norm", on, [xn, gn, sn, on, b, c, hw, groups, group_size, glen, eps]() {
      const S* g = on->grad.data();
      const S* xv2 = xn->values.data();
      const S* gv2 = gn->values.data();
      S* gx = nullptr;
      S* gg = nullptr;
      S* gs = nullptr;
      if (xn->requires_grad) {
        if (xn->grad.empty()) xn->grad.assign(xn->values.size(), S(0));
        gx = xn->grad.data();
      }
      if (gn->requires_grad) {
        if (gn->grad.empty()) gn->grad.assign(gn->values.size(), S(0));
        gg = gn->grad.data();
      }
      if (sn->requires_grad) {
        if (sn->grad.empty()) sn->grad.assign(sn->values.size(), S(0));
        gs = sn->grad.data();
      }
      for (std::int64_t bi = 0; bi < b; ++bi) {
        for (std::int64_t gi = 0; gi < groups; ++gi) {
          const std::int64_t base = bi * c * hw + gi * glen;
          S m = S(0);
          for (std::int64_t j = 0; j < glen; ++j) m += xv2[base + j];
          m /= static_cast<S>(glen);
          S var = S(0);
          for (std::int64_t j = 0; j < glen; ++j) {
            const S d = xv2[base + j] - m;
            var += d * d;
          }
          var /= static_cast<S>(glen);
          const S inv = S(1) / std::sqrt(var + eps);

          if (gg || gs) {
            for (std::int64_t ch = 0; ch < group_size; ++ch) {
              const std::int64_t cidx = gi * group_size + ch;
              const std::int64_t off = base + ch * hw;
              S acc_g = S(0), acc_gx = S(0);
              for (std::int64_t j = 0; j < hw; ++j) {
                acc_g += g[off + j];
                acc_gx += g[off + j] * (xv2[off + j] - m) * inv;
              }
              if (gg) gg[cidx] += acc_gx;
              if (gs) gs[cidx] += acc_g;
            }
          }
          if (gx) {
            S mean_dxhat = S(0), mean_dxhat_xhat = S(0);
            for (std::int64_t ch = 0; ch < group_size; ++ch) {
              const std::int64_t cidx = gi * group_size + ch;
              const std::int64_t off = base + ch * hw;
              for (std::int64_t j = 0; j < hw; ++j) {
                const S dxh = g[off + j] * gv2[cidx];
                mean_dxhat += dxh;
                mean_dxhat_xhat += dxh * (xv2[off + j] - m) * inv;
              }
            }
            mean_dxhat /= static_cast<S>(glen);
            mean_dxhat_xhat /= static_cast<S>(glen);
            for (std::int64_t ch = 0; ch < group_size; ++ch) {
              const std::int64_t cidx = gi * group_size + ch;
              const std::int64_t off = base + ch * hw;
              for (std::int64_t j = 0; j < hw; ++j) {
                const S xhat = (xv2[off + j] - m) * inv;
                const S dxh = g[off + j] * gv2[cidx];
                gx[off + j] += inv * (dxh - mean_dxhat - xhat * mean_dxhat_xhat);
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// data movement
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape target) {
  if (target.numel() != x.numel()) {
    throw std::invalid_argument("reshape: element count mismatch, " + x.shape().str() +
                                " -> " + target.str());
  }
  Tensor<S> out = Tensor<S>::from_values(
      std::move(target), std::vector<S>(x.values().begin(), x.values().end()));
  if (Tape<S>* tape = recording_tape<S>({&x})) {
    mark_output(out, tape);
    auto xn = x.node();
    auto on = out.node();
    tape->record("reshape", on, [xn, on]() {
      if (xn->grad.empty()) xn->grad.assign(xn->values.size(), S(0));
      const S* g = on->grad.data();
      S* gx = xn->grad.data();
      for (std::size_t i = 0; i < xn->grad.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

// Axis permutation covering transpose as the rank-2 case.
template <typename S>
Tensor<S> permute(const Tensor<S>& x, const std::vector<int>& axes) {
  const int r = x.rank();
  if (static_cast<int>(axes.size()) != r) {
    throw std::invalid_argument("permute: axis list must cover every axis");
  }
  std::vector<bool> seen(static_cast<std::size_t>(r), false);
  std::vector<std::int64_t> out_dims(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    const int a = axes[static_cast<std::size_t>(i)];
    if (a < 0 || a >= r || seen[static_cast<std::size_t>(a)]) {
      throw std::invalid_argument("permute: invalid axis permutation");
    }
    seen[static_cast<std::size_t>(a)] = true;
    out_dims[static_cast<std::size_t>(i)] = x.shape().extent(a);
  }
  Tensor<S> out = Tensor<S>::allocate(Shape(out_dims));

  const auto in_strides = row_major_strides(x.shape());
  // Stride of the source, expressed per output axis.
  std::array<std::int64_t, 4> src{};
  std::array<std::int64_t, 4> dims{};
  dims.fill(1);
  for (int i = 0; i < r; ++i) {
    src[static_cast<std::size_t>(i)] =
        in_strides[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])];
    dims[static_cast<std::size_t>(i)] = out_dims[static_cast<std::size_t>(i)];
  }
  const S* xv = x.values().data();
  S* ov = out.mutable_values().data();
  std::int64_t o = 0;
  for (std::int64_t i0 = 0; i0 < dims[0]; ++i0)
    for (std::int64_t i1 = 0; i1 < dims[1]; ++i1)
      for (std::int64_t i2 = 0; i2 < dims[2]; ++i2) {
        std::int64_t in_off = i0 * src[0] + i1 * src[1] + i2 * src[2];
        for (std::int64_t i3 = 0; i3 < dims[3]; ++i3) {
          ov[o++] = xv[in_off];
          in_off += src[3];
        }
      }

  if (Tape<S>* tape = recording_tape<S>({&x})) {
    mark_output(out, tape);
    auto xn = x.node();
    auto on = out.node();
    tape->record("permute", on, [xn, on, src, dims]() {
      if (xn->grad.empty()) xn->grad.assign(xn->values.size(), S(0));
      const S* g = on->grad.data();
      S* gx = xn->grad.data();
      std::int64_t o2 = 0;
      for (std::int64_t i0 = 0; i0 < dims[0]; ++i0)
        for (std::int64_t i1 = 0; i1 < dims[1]; ++i1)
          for (std::int64_t i2 = 0; i2 < dims[2]; ++i2) {
            std::int64_t in_off = i0 * src[0] + i1 * src[1] + i2 * src[2];
            for (std::int64_t i3 = 0; i3 < dims[3]; ++i3) {
              gx[in_off] += g[o2++];
              in_off += src[3];
            }
          }
    });
  }
  return out;
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& x) {
  if (x.rank() != 2) throw std::invalid_argument("transpose: expected rank-2 input");
  return permute(x, {1, 0});
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: empty operand list");
  const int r = parts[0].rank();
  const int ax = detail::normalize_axis(axis, r, "concat");
  std::vector<std::int64_t> out_dims = parts[0].shape().dims();
  for (std::size_t p = 1; p < parts.size(); ++p) {
    if (parts[p].rank() != r) throw std::invalid_argument("concat: rank mismatch");
    for (int i = 0; i < r; ++i) {
      if (i == ax) continue;
      if (parts[p].shape().extent(i) != parts[0].shape().extent(i)) {
        throw std::invalid_argument("concat: operands disagree on non-concat axis " +
                                    std::to_string(i));
      }
    }
    out_dims[static_cast<std::size_t>(ax)] += parts[p].shape().extent(ax);
  }
  Tensor<S> out = Tensor<S>::allocate(Shape(out_dims));

  // Each operand contributes a contiguous [len_p * inner] chunk per outer slot.
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= out_dims[static_cast<std::size_t>(i)];
  for (int i = ax + 1; i < r; ++i) inner *= out_dims[static_cast<std::size_t>(i)];
  const std::int64_t out_axis = out_dims[static_cast<std::size_t>(ax)];

  S* ov = out.mutable_values().data();
  std::int64_t offset = 0;
  std::vector<std::int64_t> part_offsets;
  for (const Tensor<S>& part : parts) {
    part_offsets.push_back(offset);
    const std::int64_t len = part.shape().extent(ax);
    const S* pv = part.values().data();
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy(pv + o * len * inner, pv + (o + 1) * len * inner,
                ov + (o * out_axis + offset) * inner);
    }
    offset += len;
  }

  std::vector<const Tensor<S>*> input_ptrs;
  for (const Tensor<S>& p : parts) input_ptrs.push_back(&p);
  Tape<S>* tape = Tape<S>::active();
  bool any_grad = false;
  for (const Tensor<S>& p : parts) any_grad = any_grad || p.requires_grad();
  if (tape != nullptr && any_grad) {
    mark_output(out, tape);
    std::vector<std::shared_ptr<TensorNode<S>>> nodes;
    std::vector<std::int64_t> lens;
    for (const Tensor<S>& p : parts) {
      nodes.push_back(p.node());
      lens.push_back(p.shape().extent(ax));
    }
    auto on = out.node();
    tape->record("concat", on, [nodes, lens, part_offsets, on, outer, inner, out_axis]() {
      const S* g = on->grad.data();
      for (std::size_t p = 0; p < nodes.size(); ++p) {
        auto& node = nodes[p];
        if (!node->requires_grad) continue;
        if (node->grad.empty()) node->grad.assign(node->values.size(), S(0));
        S* gp = node->grad.data();
        const std::int64_t len = lens[p];
        for (std::int64_t o = 0; o < outer; ++o) {
          const S* src = g + (o * out_axis + part_offsets[p]) * inner;
          S* dst = gp + o * len * inner;
          for (std::int64_t j = 0; j < len * inner; ++j) dst[j] += src[j];
        }
      }
    });
  }
  return out;
}

// Half-open range [start, end) along `axis`.
template <typename S>
Tensor<S> slice(const Tensor<S>& x, int axis, std::int64_t start, std::int64_t end) {
  const int ax = detail::normalize_axis(axis, x.rank(), "slice");
  const std::int64_t extent = x.shape().extent(ax);
  if (start < 0 || end > extent || start >= end) {
    throw std::invalid_argument("slice: range [" + std::to_string(start) + ", " +
                                std::to_string(end) + ") invalid for extent " +
                                std::to_string(extent));
  }
  std::vector<std::int64_t> out_dims = x.shape().dims();
  out_dims[static_cast<std::size_t>(ax)] = end - start;
  Tensor<S> out = Tensor<S>::allocate(Shape(out_dims));

  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= x.shape().extent(i);
  for (int i = ax + 1; i < x.rank(); ++i) inner *= x.shape().extent(i);
  const std::int64_t len = end - start;

  const S* xv = x.values().data();
  S* ov = out.mutable_values().data();
  for (std::int64_t o = 0; o < outer; ++o) {
    std::copy(xv + (o * extent + start) * inner, xv + (o * extent + start + len) * inner,
              ov + o * len * inner);
  }

  if (Tape<S>* tape = recording_tape<S>({&x})) {
    mark_output(out, tape);
    auto xn = x.node();
    auto on = out.node();
    tape->record("slice", on, [xn, on, outer, inner, extent, start, len]() {
      if (xn->grad.empty()) xn->grad.assign(xn->values.size(), S(0));
      const S* g = on->grad.data();
      S* gx = xn->grad.data();
      for (std::int64_t o = 0; o < outer; ++o) {
        const S* src = g + o * len * inner;
        S* dst = gx + (o * extent + start) * inner;
        for (std::int64_t j = 0; j < len * inner; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

// [B,C,H,W] -> [B, N, C*P*P] with patches ordered row-major over the grid and
// each patch flattened channel-major, then row, then column.
template <typename S>
Tensor<S> extract_patches(const Tensor<S>& x, std::int64_t patch) {
  if (x.rank() != 4) throw std::invalid_argument("extract_patches: expected [B,C,H,W]");
  const std::int64_t b = x.shape().extent(0), c = x.shape().extent(1),
                     h = x.shape().extent(2), w = x.shape().extent(3);
  if (h % patch != 0 || w % patch != 0) {
    throw std::invalid_argument("extract_patches: extents " + std::to_string(h) + "x" +
                                std::to_string(w) + " not divisible by patch size " +
                                std::to_string(patch));
  }
  const std::int64_t gh = h / patch, gw = w / patch, n = gh * gw, d = c * patch * patch;
  Tensor<S> out = Tensor<S>::allocate(Shape{b, n, d});
  const S* xv = x.values().data();
  S* ov = out.mutable_values().data();

  auto run = [=](const S* in, S* res, bool forward) {
    for (std::int64_t bi = 0; bi < b; ++bi)
      for (std::int64_t gy = 0; gy < gh; ++gy)
        for (std::int64_t gx = 0; gx < gw; ++gx) {
          const std::int64_t tok = gy * gw + gx;
          for (std::int64_t ci = 0; ci < c; ++ci)
            for (std::int64_t py = 0; py < patch; ++py)
              for (std::int64_t px = 0; px < patch; ++px) {
                const std::int64_t src =
                    ((bi * c + ci) * h + gy * patch + py) * w + gx * patch + px;
                const std::int64_t dst =
                    (bi * n + tok) * d + (ci * patch + py) * patch + px;
                if (forward) {
                  res[dst] = in[src];
                } else {
                  res[src] += in[dst];
                }
              }
        }
  };
  run(xv, ov, true);

  if (Tape<S>* tape = recording_tape<S>({&x})) {
    mark_output(out, tape);
    auto xn = x.node();
    auto on = out.node();
    tape->record("extract_patches", on, [xn, on, run]() {
      if (xn->grad.empty()) xn->grad.assign(xn->values.size(), S(0));
      run(on->grad.data(), xn->grad.data(), false);
    });
  }
  return out;
}

// 2x2 stride-2 max pooling.
template <typename S>
Tensor<S> max_pool2d(const Tensor<S>& x) {
  if (x.rank() != 4) throw std::invalid_argument("max_pool2d: expected [B,C,H,W]");
  const std::int64_t b = x.shape().extent(0), c = x.shape().extent(1),
                     h = x.shape().extent(2), w = x.shape().extent(3);
  if (h % 2 != 0 || w % 2 != 0) {
    throw std::invalid_argument("max_pool2d: spatial extents must be even");
  }
  const std::int64_t oh = h / 2, ow = w / 2;
  Tensor<S> out = Tensor<S>::allocate(Shape{b, c, oh, ow});
  auto argmax = std::make_shared<std::vector<std::int64_t>>(
      static_cast<std::size_t>(out.numel()));
  const S* xv = x.values().data();
  S* ov = out.mutable_values().data();
  std::int64_t o = 0;
  for (std::int64_t bc = 0; bc < b * c; ++bc) {
    const S* plane = xv + bc * h * w;
    for (std::int64_t i = 0; i < oh; ++i)
      for (std::int64_t j = 0; j < ow; ++j) {
        std::int64_t best = (2 * i) * w + 2 * j;
        S bv = plane[best];
        const std::int64_t cands[3] = {(2 * i) * w + 2 * j + 1, (2 * i + 1) * w + 2 * j,
                                       (2 * i + 1) * w + 2 * j + 1};
        for (const std::int64_t cand : cands) {
          if (plane[cand] > bv) {
            bv = plane[cand];
            best = cand;
          }
        }
        (*argmax)[static_cast<std::size_t>(o)] = bc * h * w + best;
        ov[o++] = bv;
      }
  }

  if (Tape<S>* tape = recording_tape<S>({&x})) {
    mark_output(out, tape);
    auto xn = x.node();
    auto on = out.node();
    tape->record("max_pool2d", on, [xn, on, argmax]() {
      if (xn->grad.empty()) xn->grad.assign(xn->values.size(), S(0));
      const S* g = on->grad.data();
      S* gx = xn->grad.data();
      for (std::size_t i = 0; i < argmax->size(); ++i) {
        gx[(*argmax)[i]] += g[i];
      }
    });
  }
  return out;
}

}  // namespace conunetr
