#pragma once

#include <cstdint>
#include <string>

#include "conunetr/nn/attention.hpp"
#include "conunetr/nn/linear.hpp"
#include "conunetr/nn/parameters.hpp"
#include "conunetr/tensor/ops.hpp"
#include "conunetr/tensor/rng.hpp"

namespace conunetr {

// Pre-norm transformer stage: x += attn(norm(x)); x += mlp(norm(x)).
// The MLP widens by `mlp_ratio` and uses GELU. No dropout anywhere.
template <typename S>
class TransformerBlock {
 public:
  TransformerBlock() = default;

  TransformerBlock(std::int64_t d_model, std::int64_t n_heads, std::int64_t mlp_ratio, Rng& rng)
      : norm1_(d_model),
        attn_(d_model, n_heads, rng),
        norm2_(d_model),
        fc1_(d_model, mlp_ratio * d_model, rng),
        fc2_(mlp_ratio * d_model, d_model, rng) {}

  Tensor<S> forward(const Tensor<S>& x) const {
    Tensor<S> h = add(x, attn_.forward(norm1_.forward(x)));
    Tensor<S> m = fc2_.forward(gelu(fc1_.forward(norm2_.forward(h))));
    return add(h, m);
  }

  void collect_params(ParamList<S>& out, const std::string& prefix) const {
    norm1_.collect_params(out, join_name(prefix, "norm1"));
    attn_.collect_params(out, join_name(prefix, "attn"));
    norm2_.collect_params(out, join_name(prefix, "norm2"));
    fc1_.collect_params(out, join_name(prefix, "mlp_fc1"));
    fc2_.collect_params(out, join_name(prefix, "mlp_fc2"));
  }

 private:
  LayerNorm<S> norm1_;
  MultiHeadSelfAttention<S> attn_;
  LayerNorm<S> norm2_;
  Linear<S> fc1_, fc2_;
};

}  // namespace conunetr
