#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "conunetr/model/config.hpp"
#include "conunetr/model/embeddings.hpp"
#include "conunetr/nn/conv_blocks.hpp"
#include "conunetr/nn/linear.hpp"
#include "conunetr/nn/parameters.hpp"
#include "conunetr/nn/transformer.hpp"
#include "conunetr/tensor/ops.hpp"
#include "conunetr/tensor/rng.hpp"

namespace conunetr {

namespace detail {

// Chain of (x2 deconv -> conv block) units lifting a token-grid feature map
// to a decoder stage's resolution and width.
template <typename S>
struct SkipProjector {
  std::vector<Upsample2x<S>> ups;
  std::vector<ConvBlock<S>> blocks;

  SkipProjector() = default;

  SkipProjector(std::int64_t d_model, const std::vector<std::int64_t>& widths, Rng& rng) {
    std::int64_t cin = d_model;
    for (const std::int64_t cout : widths) {
      ups.emplace_back(cin, cout, rng);
      blocks.emplace_back(cout, cout, rng);
      cin = cout;
    }
  }

  Tensor<S> forward(Tensor<S> x) const {
    for (std::size_t i = 0; i < ups.size(); ++i) {
      x = blocks[i].forward(ups[i].forward(x));
    }
    return x;
  }

  void collect_params(ParamList<S>& out, const std::string& prefix) const {
    for (std::size_t i = 0; i < ups.size(); ++i) {
      ups[i].collect_params(out, join_name(prefix, "up" + std::to_string(i)));
      blocks[i].collect_params(out, join_name(prefix, "block" + std::to_string(i)));
    }
  }
};

}  // namespace detail

// Conditional transformer segmentation network: patch tokens plus position,
// slice-location and age information feed a 6-stage transformer encoder;
// taps z2/z3/z5 and the final z6 drive a U-shaped convolutional decoder.
template <typename S>
class ConUNETR {
 public:
  ConUNETR() = default;

  ConUNETR(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(derive_seed(seed, 0x6d6f64));  // model stream
    const std::int64_t d = cfg_.d_model;
    const std::int64_t flat = cfg_.in_channels * cfg_.patch_size * cfg_.patch_size;

    // Construction order is fixed: it defines both the RNG consumption and
    // the parameter registration order (a checkpoint compatibility contract).
    patch_proj_ = Linear<S>(flat, d, rng);
    pos_ = PositionTable<S>(cfg_.n_patches(), d, rng);
    if (cfg_.conditioning_mode != ConditioningMode::none) {
      age_ = AgeTokenTable<S>(cfg_.k_ages, d, rng);
    }
    spatial_ = SpatialEncoder<S>(cfg_.spatial_mode, d, rng);
    for (std::int64_t i = 0; i < cfg_.stages; ++i) {
      blocks_.emplace_back(d, cfg_.heads, cfg_.mlp_ratio, rng);
    }

    const auto& dec = cfg_.decoder_channels;
    skip2_ = detail::SkipProjector<S>(d, {dec[0], dec[1], dec[2]}, rng);
    skip3_ = detail::SkipProjector<S>(d, {dec[0], dec[1]}, rng);
    skip5_ = detail::SkipProjector<S>(d, {dec[0]}, rng);

    bottleneck_ = Upsample2x<S>(d, dec[0], rng);
    stage1_ = ConvBlock<S>(2 * dec[0], dec[0], rng);
    stage2_ = ConvBlock<S>(2 * dec[1], dec[1], rng);
    stage3_ = ConvBlock<S>(2 * dec[2], dec[2], rng);
    const std::int64_t levels = cfg_.upsample_levels();
    // levels-1 deconvs sit between the four decoder stages; at levels == 3
    // stages 3 and 4 share full resolution.
    up1_ = Upsample2x<S>(dec[0], dec[1], rng);
    up2_ = Upsample2x<S>(dec[1], dec[2], rng);
    if (levels >= 4) up3_ = Upsample2x<S>(dec[2], dec[3], rng);
    stage4_ = ConvBlock<S>(levels >= 4 ? dec[3] : dec[2], dec[3], rng);
    head_ = Conv2dLayer<S>(dec[3], cfg_.num_classes, 1, 1, 0, rng);
  }

  const ModelConfig& config() const { return cfg_; }

  // [1,C,H,W] -> [N, d_model], patches row-major over the grid, each patch
  // flattened channel-major, then row, then column, then projected.
  Tensor<S> patch_embed(const Tensor<S>& image) const {
    check_image(image, 1);
    Tensor<S> toks = extract_patches(image, cfg_.patch_size);          // [1,N,flat]
    toks = reshape(toks, Shape{cfg_.n_patches(), toks.shape().extent(2)});
    return patch_proj_.forward(toks);                                  // [N,d]
  }

  // Adds position and slice-location information and applies conditioning;
  // output is [N+1, d] in age_token mode and [N, d] otherwise.
  Tensor<S> compose(const Tensor<S>& patches, std::int64_t age_id, int loc) const {
    Tensor<S> e_sp = spatial_.encode(loc);
    Tensor<S> age_row;
    if (cfg_.conditioning_mode != ConditioningMode::none) age_row = age_.row(age_id);
    return compose_embeddings(patches, pos_.pos(), e_sp, age_row, cfg_.conditioning_mode);
  }

  // Runs all stages, returning z1..z6 (index 0 = z1).
  std::vector<Tensor<S>> encoder_forward(const Tensor<S>& z0) const {
    std::vector<Tensor<S>> zs;
    Tensor<S> z = z0;
    for (const TransformerBlock<S>& block : blocks_) {
      z = block.forward(z);
      zs.push_back(z);
    }
    return zs;
  }

  // Drops the age-token row; only image tokens continue to the decoder.
  Tensor<S> strip_condition_token(const Tensor<S>& z) const {
    if (cfg_.conditioning_mode != ConditioningMode::age_token) {
      throw std::invalid_argument("strip_condition_token: not in age_token mode");
    }
    return slice(z, 0, 1, z.shape().extent(0));
  }

  // [N, d] tokens -> [1, d, g, g] feature grid (inverse of the patch order).
  Tensor<S> tokens_to_grid(const Tensor<S>& z) const {
    const std::int64_t g = cfg_.grid();
    if (z.rank() != 2 || z.shape().extent(0) != g * g) {
      throw std::invalid_argument("tokens_to_grid: expected [" + std::to_string(g * g) +
                                  ", d] tokens, got " + z.shape().str());
    }
    return reshape(permute(z, {1, 0}), Shape{1, cfg_.d_model, g, g});
  }

  // Projects an encoder tap (2, 3 or 5) to its decoder fusion resolution.
  Tensor<S> project_skip(const Tensor<S>& z, int stage) const {
    Tensor<S> grid = tokens_to_grid(z);
    switch (stage) {
      case 2: return skip2_.forward(grid);
      case 3: return skip3_.forward(grid);
      case 5: return skip5_.forward(grid);
      default:
        throw std::invalid_argument("project_skip: stage must be 2, 3 or 5, got " +
                                    std::to_string(stage));
    }
  }

  Tensor<S> decoder_forward(const Tensor<S>& z6_grid, const Tensor<S>& skip5,
                            const Tensor<S>& skip3, const Tensor<S>& skip2) const {
    auto fuse = [](const char* where, const Tensor<S>& x, const Tensor<S>& skip) {
      if (x.shape() != skip.shape()) {
        throw std::invalid_argument(std::string(where) + ": feature map " + x.shape().str() +
                                    " does not match skip " + skip.shape().str());
      }
      return concat<S>({x, skip}, 1);
    };
    Tensor<S> x = bottleneck_.forward(z6_grid);
    x = stage1_.forward(fuse("decoder stage 1", x, skip5));
    x = up1_.forward(x);
    x = stage2_.forward(fuse("decoder stage 2", x, skip3));
    x = up2_.forward(x);
    x = stage3_.forward(fuse("decoder stage 3", x, skip2));
    if (cfg_.upsample_levels() >= 4) x = up3_.forward(x);
    x = stage4_.forward(x);
    return head_.forward(x);
  }

  // Full pipeline to logits [B, num_classes, H, W].
  Tensor<S> forward_logits(const Tensor<S>& image, std::int64_t age_id, int loc) const {
    check_image(image, -1);
    const std::int64_t batch = image.shape().extent(0);
    if (batch > 1) {
      std::vector<Tensor<S>> outs;
      for (std::int64_t b = 0; b < batch; ++b) {
        outs.push_back(forward_logits(slice(image, 0, b, b + 1), age_id, loc));
      }
      return concat(outs, 0);
    }

    Tensor<S> z0 = compose(patch_embed(image), age_id, loc);
    std::vector<Tensor<S>> zs = encoder_forward(z0);
    Tensor<S> z2 = zs[1], z3 = zs[2], z5 = zs[4], z6 = zs[5];
    if (cfg_.conditioning_mode == ConditioningMode::age_token) {
      z2 = strip_condition_token(z2);
      z3 = strip_condition_token(z3);
      z5 = strip_condition_token(z5);
      z6 = strip_condition_token(z6);
    }
    return decoder_forward(tokens_to_grid(z6), project_skip(z5, 5), project_skip(z3, 3),
                           project_skip(z2, 2));
  }

  // Per-pixel class probabilities [B, num_classes, H, W].
  Tensor<S> forward(const Tensor<S>& image, std::int64_t age_id, int loc) const {
    return softmax(forward_logits(image, age_id, loc), 1);
  }

  ParamList<S> params() const {
    ParamList<S> list;
    patch_proj_.collect_params(list, "patch_proj");
    pos_.collect_params(list, "pos");
    if (cfg_.conditioning_mode != ConditioningMode::none) age_.collect_params(list, "age");
    spatial_.collect_params(list, "spatial");
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      blocks_[i].collect_params(list, "encoder.stage" + std::to_string(i + 1));
    }
    skip2_.collect_params(list, "skip2");
    skip3_.collect_params(list, "skip3");
    skip5_.collect_params(list, "skip5");
    bottleneck_.collect_params(list, "decoder.bottleneck");
    stage1_.collect_params(list, "decoder.stage1");
    up1_.collect_params(list, "decoder.up1");
    stage2_.collect_params(list, "decoder.stage2");
    up2_.collect_params(list, "decoder.up2");
    stage3_.collect_params(list, "decoder.stage3");
    if (cfg_.upsample_levels() >= 4) up3_.collect_params(list, "decoder.up3");
    stage4_.collect_params(list, "decoder.stage4");
    head_.collect_params(list, "decoder.head");
    return list;
  }

  const AgeTokenTable<S>& age_table() const {
    if (cfg_.conditioning_mode == ConditioningMode::none) {
      throw std::logic_error("age_table: model has no conditioning");
    }
    return age_;
  }

 private:
  void check_image(const Tensor<S>& image, std::int64_t expect_batch) const {
    if (image.rank() != 4 || image.shape().extent(1) != cfg_.in_channels ||
        image.shape().extent(2) != cfg_.img_size || image.shape().extent(3) != cfg_.img_size) {
      throw std::invalid_argument("ConUNETR: expected [B," + std::to_string(cfg_.in_channels) +
                                  "," + std::to_string(cfg_.img_size) + "," +
                                  std::to_string(cfg_.img_size) + "] image, got " +
                                  image.shape().str());
    }
    if (expect_batch > 0 && image.shape().extent(0) != expect_batch) {
      throw std::invalid_argument("ConUNETR: expected batch " + std::to_string(expect_batch) +
                                  ", got " + image.shape().str());
    }
  }

  ModelConfig cfg_;
  Linear<S> patch_proj_;
  PositionTable<S> pos_;
  AgeTokenTable<S> age_;
  SpatialEncoder<S> spatial_;
  std::vector<TransformerBlock<S>> blocks_;
  detail::SkipProjector<S> skip2_, skip3_, skip5_;
  Upsample2x<S> bottleneck_;
  ConvBlock<S> stage1_, stage2_, stage3_, stage4_;
  Upsample2x<S> up1_, up2_, up3_;
  Conv2dLayer<S> head_;
};

// Per-component and total learnable element counts, grouped by the first
// name segment.
template <typename S>
std::vector<std::pair<std::string, std::int64_t>> count_parameters(const ParamList<S>& params) {
  std::vector<std::pair<std::string, std::int64_t>> groups;
  std::int64_t total = 0;
  for (const auto& item : params.items) {
    const std::size_t dot = item.name.find('.');
    std::string group = dot == std::string::npos ? item.name : item.name.substr(0, dot);
    // Encoder/decoder sub-stages roll up one more level.
    if (group == "encoder" || group == "decoder") {
      const std::size_t dot2 = item.name.find('.', dot + 1);
      group = dot2 == std::string::npos ? item.name : item.name.substr(0, dot2);
    }
    bool found = false;
    for (auto& [name, count] : groups) {
      if (name == group) {
        count += item.tensor.numel();
        found = true;
      }
    }
    if (!found) groups.emplace_back(group, item.tensor.numel());
    total += item.tensor.numel();
  }
  groups.emplace_back("total", total);
  return groups;
}

}  // namespace conunetr
