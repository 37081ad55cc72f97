#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "conunetr/nn/parameters.hpp"
#include "conunetr/tensor/conv.hpp"
#include "conunetr/tensor/ops.hpp"
#include "conunetr/tensor/rng.hpp"

namespace conunetr {

inline constexpr std::int64_t kNormGroupSize = 8;  // channels per norm group

// Plain conv layer owning its weight [Cout,Cin,k,k] and bias [Cout].
template <typename S>
class Conv2dLayer {
 public:
  Conv2dLayer() = default;

  Conv2dLayer(std::int64_t cin, std::int64_t cout, std::int64_t kernel, std::int64_t stride,
              std::int64_t pad, Rng& rng)
      : stride_(stride), pad_(pad) {
    const S bound =
        S(1) / static_cast<S>(std::sqrt(static_cast<double>(cin * kernel * kernel)));
    weight_ = Tensor<S>::uniform(Shape{cout, cin, kernel, kernel}, -bound, bound, rng, true);
    bias_ = Tensor<S>::uniform(Shape{cout}, -bound, bound, rng, true);
  }

  Tensor<S> forward(const Tensor<S>& x) const { return conv2d(x, weight_, bias_, stride_, pad_); }

  void collect_params(ParamList<S>& out, const std::string& prefix) const {
    out.add(join_name(prefix, "weight"), weight_);
    out.add(join_name(prefix, "bias"), bias_, /*decay=*/false);
  }

  const Tensor<S>& weight() const { return weight_; }

 private:
  std::int64_t stride_ = 1, pad_ = 0;
  Tensor<S> weight_, bias_;
};

// Channel group normalization with learnable per-channel affine.
template <typename S>
class GroupNormLayer {
 public:
  GroupNormLayer() = default;

  explicit GroupNormLayer(std::int64_t channels) : channels_(channels) {
    if (channels % kNormGroupSize != 0) {
      throw std::invalid_argument("GroupNormLayer: channel count " + std::to_string(channels) +
                                  " must be a multiple of " + std::to_string(kNormGroupSize));
    }
    gain_ = Tensor<S>::filled(Shape{channels}, S(1));
    gain_.set_requires_grad(true);
    shift_ = Tensor<S>::zeros(Shape{channels});
    shift_.set_requires_grad(true);
  }

  Tensor<S> forward(const Tensor<S>& x) const {
    return group_norm(x, gain_, shift_, kNormGroupSize);
  }

  void collect_params(ParamList<S>& out, const std::string& prefix) const {
    out.add(join_name(prefix, "gain"), gain_, /*decay=*/false);
    out.add(join_name(prefix, "shift"), shift_, /*decay=*/false);
  }

 private:
  std::int64_t channels_ = 0;
  Tensor<S> gain_, shift_;
};

// Two rounds of 3x3 conv -> group norm -> ReLU, keeping spatial size.
template <typename S>
class ConvBlock {
 public:
  ConvBlock() = default;

  ConvBlock(std::int64_t cin, std::int64_t cout, Rng& rng)
      : conv1_(cin, cout, 3, 1, 1, rng),
        norm1_(cout),
        conv2_(cout, cout, 3, 1, 1, rng),
        norm2_(cout) {}

  Tensor<S> forward(const Tensor<S>& x) const {
    Tensor<S> h = relu(norm1_.forward(conv1_.forward(x)));
    return relu(norm2_.forward(conv2_.forward(h)));
  }

  void collect_params(ParamList<S>& out, const std::string& prefix) const {
    conv1_.collect_params(out, join_name(prefix, "conv1"));
    norm1_.collect_params(out, join_name(prefix, "norm1"));
    conv2_.collect_params(out, join_name(prefix, "conv2"));
    norm2_.collect_params(out, join_name(prefix, "norm2"));
  }

 private:
  Conv2dLayer<S> conv1_;
  GroupNormLayer<S> norm1_;
  Conv2dLayer<S> conv2_;
  GroupNormLayer<S> norm2_;
};

// Learned x2 upsampling: transposed conv with 2x2 kernel, stride 2.
template <typename S>
class Upsample2x {
 public:
  Upsample2x() = default;

  Upsample2x(std::int64_t cin, std::int64_t cout, Rng& rng) {
    const S bound = S(1) / static_cast<S>(std::sqrt(static_cast<double>(cin * 4)));
    weight_ = Tensor<S>::uniform(Shape{cin, cout, 2, 2}, -bound, bound, rng, true);
    bias_ = Tensor<S>::uniform(Shape{cout}, -bound, bound, rng, true);
  }

  Tensor<S> forward(const Tensor<S>& x) const { return conv_transpose2d(x, weight_, bias_, 2); }

  void collect_params(ParamList<S>& out, const std::string& prefix) const {
    out.add(join_name(prefix, "weight"), weight_);
    out.add(join_name(prefix, "bias"), bias_, /*decay=*/false);
  }

 private:
  Tensor<S> weight_, bias_;
};

}  // namespace conunetr
