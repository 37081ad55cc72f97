#pragma once

#include <stdexcept>
#include <string>

#include "conunetr/tensor/ops.hpp"
#include "conunetr/tensor/tensor.hpp"

namespace conunetr {

// Mean per-pixel cross entropy for two-class logits [B,2,H,W] against a
// binary mask [B,H,W]. Uses the log-sum-exp form via log_softmax; the mask
// acts as a constant selector, so gradients flow only through the logits.
template <typename S>
Tensor<S> cross_entropy_loss(const Tensor<S>& logits, const Tensor<S>& mask) {
  if (logits.rank() != 4 || logits.shape().extent(1) != 2) {
    throw std::invalid_argument("cross_entropy_loss: expected [B,2,H,W] logits, got " +
                                logits.shape().str());
  }
  if (mask.rank() != 3 || mask.shape().extent(0) != logits.shape().extent(0) ||
      mask.shape().extent(1) != logits.shape().extent(2) ||
      mask.shape().extent(2) != logits.shape().extent(3)) {
    throw std::invalid_argument("cross_entropy_loss: mask " + mask.shape().str() +
                                " does not match logits " + logits.shape().str());
  }
  for (const S v : mask.values()) {
    if (v != S(0) && v != S(1)) {
      throw std::invalid_argument("cross_entropy_loss: mask labels must be 0 or 1");
    }
  }

  const std::int64_t b = logits.shape().extent(0), h = logits.shape().extent(2),
                     w = logits.shape().extent(3);
  Tensor<S> lsm = log_softmax(logits, 1);
  Tensor<S> lsm_bg = reshape(slice(lsm, 1, 0, 1), Shape{b, h, w});
  Tensor<S> lsm_fg = reshape(slice(lsm, 1, 1, 2), Shape{b, h, w});
  // picked = (1-m)*log p0 + m*log p1, with m constant.
  Tensor<S> inv_mask = add_scalar(scale(mask, S(-1)), S(1));
  Tensor<S> picked = add(mul(inv_mask, lsm_bg), mul(mask, lsm_fg));
  return scale(mean(picked), S(-1));
}

}  // namespace conunetr
