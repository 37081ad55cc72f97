#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "conunetr/nn/conv_blocks.hpp"
#include "conunetr/nn/parameters.hpp"
#include "conunetr/tensor/ops.hpp"
#include "conunetr/tensor/rng.hpp"

namespace conunetr {

// Small 4-down/4-up U-Net used as the purely convolutional comparison model.
// Base width 32 puts the full-scale parameter count in the expected band.
template <typename S>
class UNet {
 public:
  static constexpr int kDepth = 4;

  UNet() = default;

  UNet(std::int64_t in_channels, std::int64_t num_classes, std::int64_t base_width,
       std::uint64_t seed)
      : in_channels_(in_channels) {
    if (base_width < 8 || base_width % 8 != 0) {
      throw std::invalid_argument("UNet: base width must be a positive multiple of 8");
    }
    Rng rng(derive_seed(seed, 0x756e65));  // unet stream
    std::int64_t w = base_width;
    std::int64_t cin = in_channels;
    for (int i = 0; i < kDepth; ++i) {
      enc_.emplace_back(cin, w, rng);
      cin = w;
      w *= 2;
    }
    mid_ = ConvBlock<S>(cin, w, rng);
    for (int i = kDepth - 1; i >= 0; --i) {
      const std::int64_t skip_w = base_width << i;
      ups_.emplace_back(2 * skip_w, skip_w, rng);
      dec_.emplace_back(2 * skip_w, skip_w, rng);
    }
    head_ = Conv2dLayer<S>(base_width, num_classes, 1, 1, 0, rng);
  }

  Tensor<S> forward_logits(const Tensor<S>& image) const {
    if (image.rank() != 4 || image.shape().extent(1) != in_channels_) {
      throw std::invalid_argument("UNet: expected [B," + std::to_string(in_channels_) +
                                  ",H,W] image, got " + image.shape().str());
    }
    const std::int64_t h = image.shape().extent(2), w = image.shape().extent(3);
    if (h % (1 << kDepth) != 0 || w % (1 << kDepth) != 0) {
      throw std::invalid_argument("UNet: spatial extents must be divisible by " +
                                  std::to_string(1 << kDepth));
    }
    std::vector<Tensor<S>> skips;
    Tensor<S> x = image;
    for (const ConvBlock<S>& block : enc_) {
      x = block.forward(x);
      skips.push_back(x);
      x = max_pool2d(x);
    }
    x = mid_.forward(x);
    for (std::size_t i = 0; i < ups_.size(); ++i) {
      x = ups_[i].forward(x);
      x = dec_[i].forward(concat<S>({x, skips[skips.size() - 1 - i]}, 1));
    }
    return head_.forward(x);
  }

  Tensor<S> forward(const Tensor<S>& image) const { return softmax(forward_logits(image), 1); }

  ParamList<S> params() const {
    ParamList<S> list;
    for (std::size_t i = 0; i < enc_.size(); ++i) {
      enc_[i].collect_params(list, "enc" + std::to_string(i + 1));
    }
    mid_.collect_params(list, "mid");
    for (std::size_t i = 0; i < ups_.size(); ++i) {
      ups_[i].collect_params(list, "up" + std::to_string(i + 1));
      dec_[i].collect_params(list, "dec" + std::to_string(i + 1));
    }
    head_.collect_params(list, "head");
    return list;
  }

 private:
  std::int64_t in_channels_ = 1;
  std::vector<ConvBlock<S>> enc_;
  ConvBlock<S> mid_;
  std::vector<Upsample2x<S>> ups_;
  std::vector<ConvBlock<S>> dec_;
  Conv2dLayer<S> head_;
};

}  // namespace conunetr
