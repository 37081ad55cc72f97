#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "conunetr/tensor/tensor.hpp"

namespace conunetr {

// Collapses [B,2,H,W] class scores to a {0,1} mask by argmax over the class
// axis. Ties go to background, so thresholded probabilities and raw logits
// binarize identically.
template <typename Scalar>
Tensor<Scalar> binarize_prediction(const Tensor<Scalar>& scores) {
  if (scores.rank() != 4 || scores.shape().extent(1) != 2) {
    throw std::invalid_argument("binarize_prediction: expected [B,2,H,W] scores, got " +
                                scores.shape().str());
  }
  const std::int64_t b = scores.shape().extent(0);
  const std::int64_t hw = scores.shape().extent(2) * scores.shape().extent(3);
  Tensor<Scalar> out =
      Tensor<Scalar>::zeros(Shape{b, scores.shape().extent(2), scores.shape().extent(3)});
  const Scalar* src = scores.values().data();
  Scalar* dst = out.mutable_values().data();
  for (std::int64_t i = 0; i < b; ++i) {
    const Scalar* bg = src + i * 2 * hw;
    const Scalar* fg = bg + hw;
    for (std::int64_t p = 0; p < hw; ++p) {
      dst[i * hw + p] = fg[p] > bg[p] ? Scalar(1) : Scalar(0);
    }
  }
  return out;
}

namespace detail {

template <typename Scalar>
void check_binary(const Tensor<Scalar>& t, const char* label) {
  for (const Scalar v : t.values()) {
    if (v != Scalar(0) && v != Scalar(1)) {
      throw std::invalid_argument(std::string("dice_score: ") + label +
                                  " must contain only 0 and 1");
    }
  }
}

}  // namespace detail

// Dice overlap 2|A∩B| / (|A|+|B|) between binary masks of equal shape.
// Two empty masks agree perfectly and score 1.
template <typename Scalar>
double dice_score(const Tensor<Scalar>& pred, const Tensor<Scalar>& truth) {
  if (pred.shape() != truth.shape()) {
    throw std::invalid_argument("dice_score: shape mismatch " + pred.shape().str() + " vs " +
                                truth.shape().str());
  }
  detail::check_binary(pred, "prediction");
  detail::check_binary(truth, "truth");
  std::int64_t inter = 0, total = 0;
  const Scalar* a = pred.values().data();
  const Scalar* b = truth.values().data();
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    const bool pa = a[i] != Scalar(0), pb = b[i] != Scalar(0);
    inter += (pa && pb) ? 1 : 0;
    total += (pa ? 1 : 0) + (pb ? 1 : 0);
  }
  if (total == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(total);
}

// Dice accumulator for pooling several slices (e.g. a volume's annotated
// slices) into one score: sums intersections and mask sizes across calls.
class DicePool {
 public:
  template <typename Scalar>
  void add(const Tensor<Scalar>& pred, const Tensor<Scalar>& truth) {
    if (pred.shape() != truth.shape()) {
      throw std::invalid_argument("DicePool: shape mismatch " + pred.shape().str() + " vs " +
                                  truth.shape().str());
    }
    detail::check_binary(pred, "prediction");
    detail::check_binary(truth, "truth");
    const Scalar* a = pred.values().data();
    const Scalar* b = truth.values().data();
    for (std::int64_t i = 0; i < pred.numel(); ++i) {
      const bool pa = a[i] != Scalar(0), pb = b[i] != Scalar(0);
      inter_ += (pa && pb) ? 1 : 0;
      total_ += (pa ? 1 : 0) + (pb ? 1 : 0);
    }
  }

  double score() const {
    if (total_ == 0) return 1.0;
    return 2.0 * static_cast<double>(inter_) / static_cast<double>(total_);
  }

 private:
  std::int64_t inter_ = 0;
  std::int64_t total_ = 0;
};

}  // namespace conunetr
