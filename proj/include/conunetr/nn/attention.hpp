#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "conunetr/nn/linear.hpp"
#include "conunetr/nn/parameters.hpp"
#include "conunetr/tensor/ops.hpp"
#include "conunetr/tensor/rng.hpp"

namespace conunetr {

// Multi-head self-attention over a [T, d_model] token sequence. Scores are
// scaled by 1/sqrt(head_dim) before the softmax.
template <typename S>
class MultiHeadSelfAttention {
 public:
  MultiHeadSelfAttention() = default;

  MultiHeadSelfAttention(std::int64_t d_model, std::int64_t n_heads, Rng& rng)
      : d_model_(d_model), n_heads_(n_heads) {
    if (d_model % n_heads != 0) {
      throw std::invalid_argument("attention: d_model " + std::to_string(d_model) +
                                  " not divisible by " + std::to_string(n_heads) + " heads");
    }
    head_dim_ = d_model / n_heads;
    qkv_ = Linear<S>(d_model, 3 * d_model, rng);
    proj_ = Linear<S>(d_model, d_model, rng);
  }

  // `attn_out`, when non-null, receives the post-softmax attention weights
  // [heads, T, T] (handy for tests; pass nullptr in the hot path).
  Tensor<S> forward(const Tensor<S>& x, Tensor<S>* attn_out = nullptr) const {
    if (x.rank() != 2 || x.shape().extent(1) != d_model_) {
      throw std::invalid_argument("attention: expected [T, " + std::to_string(d_model_) +
                                  "] input, got " + x.shape().str());
    }
    const std::int64_t t = x.shape().extent(0);

    Tensor<S> qkv = qkv_.forward(x);                       // [T, 3d]
    Tensor<S> q = slice(qkv, 1, 0, d_model_);
    Tensor<S> k = slice(qkv, 1, d_model_, 2 * d_model_);
    Tensor<S> v = slice(qkv, 1, 2 * d_model_, 3 * d_model_);

    auto to_heads = [&](const Tensor<S>& m) {            // [T, d] -> [H, T, hd]
      return permute(reshape(m, Shape{t, n_heads_, head_dim_}), {1, 0, 2});
    };
    q = to_heads(q);
    k = to_heads(k);
    v = to_heads(v);

    const S scl = S(1) / static_cast<S>(std::sqrt(static_cast<double>(head_dim_)));
    Tensor<S> scores = scale(matmul(q, permute(k, {0, 2, 1})), scl);   // [H, T, T]
    Tensor<S> attn = softmax(scores, -1);
    if (attn_out != nullptr) *attn_out = attn;

    Tensor<S> ctx = matmul(attn, v);                                   // [H, T, hd]
    ctx = reshape(permute(ctx, {1, 0, 2}), Shape{t, d_model_});
    return proj_.forward(ctx);
  }

  void collect_params(ParamList<S>& out, const std::string& prefix) const {
    qkv_.collect_params(out, join_name(prefix, "qkv"));
    proj_.collect_params(out, join_name(prefix, "proj"));
  }

  std::int64_t d_model() const { return d_model_; }
  std::int64_t n_heads() const { return n_heads_; }
  std::int64_t head_dim() const { return head_dim_; }

 private:
  std::int64_t d_model_ = 0, n_heads_ = 0, head_dim_ = 0;
  Linear<S> qkv_, proj_;
};

}  // namespace conunetr
