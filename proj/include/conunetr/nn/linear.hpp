#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "conunetr/nn/parameters.hpp"
#include "conunetr/tensor/ops.hpp"
#include "conunetr/tensor/rng.hpp"
#include "conunetr/tensor/tensor.hpp"

namespace conunetr {

// Affine map over the last axis: [..., in] -> [..., out].
template <typename S>
class Linear {
 public:
  Linear() = default;

  Linear(std::int64_t in, std::int64_t out, Rng& rng, bool with_bias = true)
      : in_(in), out_(out) {
    const S bound = S(1) / static_cast<S>(std::sqrt(static_cast<double>(in)));
    weight_ = Tensor<S>::uniform(Shape{in, out}, -bound, bound, rng, true);
    if (with_bias) bias_ = Tensor<S>::uniform(Shape{out}, -bound, bound, rng, true);
  }

  Tensor<S> forward(const Tensor<S>& x) const {
    if (x.rank() < 1 || x.shape().extent(x.rank() - 1) != in_) {
      throw std::invalid_argument("Linear: input " + x.shape().str() + " does not end in " +
                                  std::to_string(in_));
    }
    const std::int64_t rows = x.numel() / in_;
    Tensor<S> flat = x.rank() == 2 ? x : reshape(x, Shape{rows, in_});
    Tensor<S> y = matmul(flat, weight_);
    if (bias_.defined()) y = add(y, bias_);
    if (x.rank() != 2) {
      std::vector<std::int64_t> dims = x.shape().dims();
      dims.back() = out_;
      y = reshape(y, Shape(dims));
    }
    return y;
  }

  void collect_params(ParamList<S>& out, const std::string& prefix) const {
    out.add(join_name(prefix, "weight"), weight_);
    if (bias_.defined()) out.add(join_name(prefix, "bias"), bias_, /*decay=*/false);
  }

  const Tensor<S>& weight() const { return weight_; }
  const Tensor<S>& bias() const { return bias_; }
  std::int64_t in_features() const { return in_; }
  std::int64_t out_features() const { return out_; }

 private:
  std::int64_t in_ = 0, out_ = 0;
  Tensor<S> weight_;   // [in, out]
  Tensor<S> bias_;     // [out]
};

// Last-axis layer normalization with learnable gain and shift.
template <typename S>
class LayerNorm {
 public:
  LayerNorm() = default;

  explicit LayerNorm(std::int64_t dim) : dim_(dim) {
    gain_ = Tensor<S>::filled(Shape{dim}, S(1));
    gain_.set_requires_grad(true);
    shift_ = Tensor<S>::zeros(Shape{dim});
    shift_.set_requires_grad(true);
  }

  Tensor<S> forward(const Tensor<S>& x) const { return layer_norm(x, gain_, shift_); }

  void collect_params(ParamList<S>& out, const std::string& prefix) const {
    out.add(join_name(prefix, "gain"), gain_, /*decay=*/false);
    out.add(join_name(prefix, "shift"), shift_, /*decay=*/false);
  }

  std::int64_t dim() const { return dim_; }

 private:
  std::int64_t dim_ = 0;
  Tensor<S> gain_, shift_;
};

}  // namespace conunetr
