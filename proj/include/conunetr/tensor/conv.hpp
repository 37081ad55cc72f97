#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "conunetr/tensor/ops.hpp"
#include "conunetr/tensor/tape.hpp"
#include "conunetr/tensor/tensor.hpp"

namespace conunetr {

namespace detail {

// Gathers conv windows into a [Cin*kh*kw, OH*OW] matrix (one batch image).
template <typename S>
void im2col(const S* x, std::int64_t c, std::int64_t h, std::int64_t w, std::int64_t kh,
            std::int64_t kw, std::int64_t stride, std::int64_t pad, std::int64_t oh,
            std::int64_t ow, S* col) {
  std::int64_t r = 0;
  for (std::int64_t ci = 0; ci < c; ++ci)
    for (std::int64_t dy = 0; dy < kh; ++dy)
      for (std::int64_t dx = 0; dx < kw; ++dx, ++r) {
        S* dst = col + r * oh * ow;
        for (std::int64_t i = 0; i < oh; ++i) {
          const std::int64_t sy = i * stride + dy - pad;
          for (std::int64_t j = 0; j < ow; ++j) {
            const std::int64_t sx = j * stride + dx - pad;
            dst[i * ow + j] = (sy >= 0 && sy < h && sx >= 0 && sx < w)
                                  ? x[(ci * h + sy) * w + sx]
                                  : S(0);
          }
        }
      }
}

// Adjoint of im2col: scatters the column matrix back, summing overlaps.
template <typename S>
void col2im(const S* col, std::int64_t c, std::int64_t h, std::int64_t w, std::int64_t kh,
            std::int64_t kw, std::int64_t stride, std::int64_t pad, std::int64_t oh,
            std::int64_t ow, S* x) {
  std::int64_t r = 0;
  for (std::int64_t ci = 0; ci < c; ++ci)
    for (std::int64_t dy = 0; dy < kh; ++dy)
      for (std::int64_t dx = 0; dx < kw; ++dx, ++r) {
        const S* src = col + r * oh * ow;
        for (std::int64_t i = 0; i < oh; ++i) {
          const std::int64_t sy = i * stride + dy - pad;
          if (sy < 0 || sy >= h) continue;
          for (std::int64_t j = 0; j < ow; ++j) {
            const std::int64_t sx = j * stride + dx - pad;
            if (sx < 0 || sx >= w) continue;
            x[(ci * h + sy) * w + sx] += src[i * ow + j];
          }
        }
      }
}

}  // namespace detail

// 2-D convolution: x [B,Cin,H,W], weight [Cout,Cin,kh,kw], bias [Cout] or
// undefined. im2col turns each image into a matrix so Eigen does the work.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias,
                 std::int64_t stride = 1, std::int64_t pad = 0) {
  if (x.rank() != 4 || weight.rank() != 4) {
    throw std::invalid_argument("conv2d: expected [B,Cin,H,W] input and [Cout,Cin,kh,kw] weight");
  }
  const std::int64_t b = x.shape().extent(0), cin = x.shape().extent(1),
                     h = x.shape().extent(2), w = x.shape().extent(3);
  const std::int64_t cout = weight.shape().extent(0), kh = weight.shape().extent(2),
                     kw = weight.shape().extent(3);
  if (weight.shape().extent(1) != cin) {
    throw std::invalid_argument("conv2d: weight expects " +
                                std::to_string(weight.shape().extent(1)) +
                                " input channels, got " + std::to_string(cin));
  }
  if (bias.defined() && bias.numel() != cout) {
    throw std::invalid_argument("conv2d: bias must have one entry per output channel");
  }
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be positive");
  const std::int64_t oh = (h + 2 * pad - kh) / stride + 1;
  const std::int64_t ow = (w + 2 * pad - kw) / stride + 1;
  if (oh < 1 || ow < 1 || (h + 2 * pad - kh) % stride != 0 || (w + 2 * pad - kw) % stride != 0) {
    throw std::invalid_argument("conv2d: geometry " + x.shape().str() + " / kernel " +
                                weight.shape().str() + " does not tile with stride " +
                                std::to_string(stride) + " pad " + std::to_string(pad));
  }

  const std::int64_t krows = cin * kh * kw;
  Tensor<S> out = Tensor<S>::allocate(Shape{b, cout, oh, ow});
  std::vector<S> col(static_cast<std::size_t>(krows * oh * ow));
  const S* xv = x.values().data();
  const S* wv = weight.values().data();
  S* ov = out.mutable_values().data();
  ConstMatMap<S> wmat(wv, cout, krows);
  for (std::int64_t bi = 0; bi < b; ++bi) {
    detail::im2col(xv + bi * cin * h * w, cin, h, w, kh, kw, stride, pad, oh, ow, col.data());
    ConstMatMap<S> cmat(col.data(), krows, oh * ow);
    MatMap<S> omat(ov + bi * cout * oh * ow, cout, oh * ow);
    omat.noalias() = wmat * cmat;
  }
  if (bias.defined()) {
    const S* bv = bias.values().data();
    for (std::int64_t bi = 0; bi < b; ++bi)
      for (std::int64_t co = 0; co < cout; ++co) {
        S* plane = ov + (bi * cout + co) * oh * ow;
        const S add = bv[co];
        for (std::int64_t j = 0; j < oh * ow; ++j) plane[j] += add;
      }
  }
  throw_if_not_finite(out, "conv2d");

  Tape<S>* tape = bias.defined() ? recording_tape<S>({&x, &weight, &bias})
                                 : recording_tape<S>({&x, &weight});
  if (tape != nullptr) {
    mark_output(out, tape);
    auto xn = x.node();
    auto wn = weight.node();
    auto bn = bias.defined() ? bias.node() : nullptr;
    auto on = out.node();
    tape->record("conv2d", on, [xn, wn, bn, on, b, cin, h, w, cout, kh, kw, stride, pad, oh,
                                ow, krows]() {
      const S* g = on->grad.data();
      std::vector<S> col(static_cast<std::size_t>(krows * oh * ow));
      if (wn->requires_grad && wn->grad.empty()) wn->grad.assign(wn->values.size(), S(0));
      if (xn->requires_grad && xn->grad.empty()) xn->grad.assign(xn->values.size(), S(0));
      ConstMatMap<S> wmat(wn->values.data(), cout, krows);
      for (std::int64_t bi = 0; bi < b; ++bi) {
        ConstMatMap<S> gmat(g + bi * cout * oh * ow, cout, oh * ow);
        if (wn->requires_grad) {
          detail::im2col(xn->values.data() + bi * cin * h * w, cin, h, w, kh, kw, stride,
                         pad, oh, ow, col.data());
          ConstMatMap<S> cmat(col.data(), krows, oh * ow);
          MatMap<S> dw(wn->grad.data(), cout, krows);
          dw.noalias() += gmat * cmat.transpose();
        }
        if (xn->requires_grad) {
          MatMap<S> dcol(col.data(), krows, oh * ow);
          dcol.noalias() = wmat.transpose() * gmat;
          detail::col2im(col.data(), cin, h, w, kh, kw, stride, pad, oh, ow,
                         xn->grad.data() + bi * cin * h * w);
        }
      }
      if (bn && bn->requires_grad) {
        if (bn->grad.empty()) bn->grad.assign(bn->values.size(), S(0));
        for (std::int64_t bi = 0; bi < b; ++bi)
          for (std::int64_t co = 0; co < cout; ++co) {
            const S* plane = g + (bi * cout + co) * oh * ow;
            S acc = S(0);
            for (std::int64_t j = 0; j < oh * ow; ++j) acc += plane[j];
            bn->grad[static_cast<std::size_t>(co)] += acc;
          }
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& weight, std::int64_t stride = 1,
                 std::int64_t pad = 0) {
  return conv2d(x, weight, Tensor<S>(), stride, pad);
}

// Transposed convolution specialised to kernel == stride (exact x`k`
// upsampling, the only flavour the decoder needs). Output windows are
// disjoint, so the scatter never overlaps. x [B,Cin,H,W], weight
// [Cin,Cout,k,k], out [B,Cout,H*k,W*k].
template <typename S>
Tensor<S> conv_transpose2d(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias,
                           std::int64_t stride) {
  if (x.rank() != 4 || weight.rank() != 4) {
    throw std::invalid_argument(
        "conv_transpose2d: expected [B,Cin,H,W] input and [Cin,Cout,k,k] weight");
  }
  const std::int64_t b = x.shape().extent(0), cin = x.shape().extent(1),
                     h = x.shape().extent(2), w = x.shape().extent(3);
  const std::int64_t cout = weight.shape().extent(1), kh = weight.shape().extent(2),
                     kw = weight.shape().extent(3);
  if (weight.shape().extent(0) != cin) {
    throw std::invalid_argument("conv_transpose2d: weight expects " +
                                std::to_string(weight.shape().extent(0)) +
                                " input channels, got " + std::to_string(cin));
  }
  if (kh != stride || kw != stride) {
    throw std::invalid_argument("conv_transpose2d: only kernel == stride supported, got kernel " +
                                std::to_string(kh) + "x" + std::to_string(kw) + " stride " +
                                std::to_string(stride));
  }
  if (bias.defined() && bias.numel() != cout) {
    throw std::invalid_argument("conv_transpose2d: bias must have one entry per output channel");
  }
  const std::int64_t k = stride;
  const std::int64_t oh = h * k, ow = w * k;
  const std::int64_t kcols = cout * k * k;

  Tensor<S> out = Tensor<S>::allocate(Shape{b, cout, oh, ow});
  const S* xv = x.values().data();
  const S* wv = weight.values().data();
  S* ov = out.mutable_values().data();

  // patches[p, :] = input pixel p's contribution to its k x k output window.
  std::vector<S> patches(static_cast<std::size_t>(h * w * kcols));
  ConstMatMap<S> wmat(wv, cin, kcols);

  auto scatter = [=](const S* pat, S* dst) {
    for (std::int64_t i = 0; i < h; ++i)
      for (std::int64_t j = 0; j < w; ++j) {
        const S* row = pat + (i * w + j) * kcols;
        for (std::int64_t co = 0; co < cout; ++co)
          for (std::int64_t dy = 0; dy < k; ++dy)
            for (std::int64_t dx = 0; dx < k; ++dx) {
              dst[(co * oh + i * k + dy) * ow + j * k + dx] =
                  row[(co * k + dy) * k + dx];
            }
      }
  };
  auto gather = [=](const S* src, S* pat) {
    for (std::int64_t i = 0; i < h; ++i)
      for (std::int64_t j = 0; j < w; ++j) {
        S* row = pat + (i * w + j) * kcols;
        for (std::int64_t co = 0; co < cout; ++co)
          for (std::int64_t dy = 0; dy < k; ++dy)
            for (std::int64_t dx = 0; dx < k; ++dx) {
              row[(co * k + dy) * k + dx] =
                  src[(co * oh + i * k + dy) * ow + j * k + dx];
            }
      }
  };

  for (std::int64_t bi = 0; bi < b; ++bi) {
    // Per-pixel channels as rows: xmat [H*W, Cin] needs a transposed view of
    // the [Cin, H*W] plane layout.
    ConstMatMap<S> xplane(xv + bi * cin * h * w, cin, h * w);
    MatMap<S> pmat(patches.data(), h * w, kcols);
    pmat.noalias() = xplane.transpose() * wmat;
    scatter(patches.data(), ov + bi * cout * oh * ow);
  }
  if (bias.defined()) {
    const S* bv = bias.values().data();
    for (std::int64_t bi = 0; bi < b; ++bi)
      for (std::int64_t co = 0; co < cout; ++co) {
        S* plane = ov + (bi * cout + co) * oh * ow;
        const S add = bv[co];
        for (std::int64_t j = 0; j < oh * ow; ++j) plane[j] += add;
      }
  }
  throw_if_not_finite(out, "conv_transpose2d");

  Tape<S>* tape = bias.defined() ? recording_tape<S>({&x, &weight, &bias})
                                 : recording_tape<S>({&x, &weight});
  if (tape != nullptr) {
    mark_output(out, tape);
    auto xn = x.node();
    auto wn = weight.node();
    auto bn = bias.defined() ? bias.node() : nullptr;
    auto on = out.node();
    tape->record("conv_transpose2d", on,
                 [xn, wn, bn, on, b, cin, h, w, cout, k, oh, ow, kcols, gather]() {
                   const S* g = on->grad.data();
                   std::vector<S> patches(static_cast<std::size_t>(h * w * kcols));
                   if (xn->requires_grad && xn->grad.empty())
                     xn->grad.assign(xn->values.size(), S(0));
                   if (wn->requires_grad && wn->grad.empty())
                     wn->grad.assign(wn->values.size(), S(0));
                   ConstMatMap<S> wmat(wn->values.data(), cin, kcols);
                   for (std::int64_t bi = 0; bi < b; ++bi) {
                     gather(g + bi * cout * oh * ow, patches.data());
                     ConstMatMap<S> pmat(patches.data(), h * w, kcols);
                     if (xn->requires_grad) {
                       MatMap<S> dx(xn->grad.data() + bi * cin * h * w, cin, h * w);
                       dx.noalias() += wmat * pmat.transpose();
                     }
                     if (wn->requires_grad) {
                       ConstMatMap<S> xplane(xn->values.data() + bi * cin * h * w, cin, h * w);
                       MatMap<S> dw(wn->grad.data(), cin, kcols);
                       dw.noalias() += xplane * pmat;
                     }
                   }
                   if (bn && bn->requires_grad) {
                     if (bn->grad.empty()) bn->grad.assign(bn->values.size(), S(0));
                     for (std::int64_t bi = 0; bi < b; ++bi)
                       for (std::int64_t co = 0; co < cout; ++co) {
                         const S* plane = g + (bi * cout + co) * oh * ow;
                         S acc = S(0);
                         for (std::int64_t j = 0; j < oh * ow; ++j) acc += plane[j];
                         bn->grad[static_cast<std::size_t>(co)] += acc;
                       }
                   }
                 });
  }
  return out;
}

template <typename S>
Tensor<S> conv_transpose2d(const Tensor<S>& x, const Tensor<S>& weight, std::int64_t stride) {
  return conv_transpose2d(x, weight, Tensor<S>(), stride);
}

}  // namespace conunetr
