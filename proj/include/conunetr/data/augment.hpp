#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "conunetr/data/sample.hpp"
#include "conunetr/tensor/rng.hpp"
#include "conunetr/tensor/tensor.hpp"

namespace conunetr {

// Monotone-onto intensity remap through a cubic curve with endpoints pinned
// at (0,0) and (1,1) and free controls p1, p2 in the unit square. The curve
// is sampled densely and inverted on its x component (first crossing, linear
// interpolation between samples); collinear controls on the diagonal give
// the exact identity.
inline constexpr int kBezierSamples = 1024;

inline float bezier_intensity_value(
    float x, const std::array<std::pair<double, double>, kBezierSamples>& curve) {
  const double q = static_cast<double>(x);
  if (q <= 0.0) return 0.0f;
  if (q >= 1.0) return 1.0f;
  for (int i = 1; i < kBezierSamples; ++i) {
    if (curve[static_cast<std::size_t>(i)].first >= q) {
      const auto& [x0, y0] = curve[static_cast<std::size_t>(i - 1)];
      const auto& [x1, y1] = curve[static_cast<std::size_t>(i)];
      if (x1 <= x0) return static_cast<float>(std::clamp(y1, 0.0, 1.0));
      const double f = (q - x0) / (x1 - x0);
      return static_cast<float>(std::clamp(y0 + f * (y1 - y0), 0.0, 1.0));
    }
  }
  return 1.0f;
}

inline Tensor<float> bezier_intensity(const Tensor<float>& image, double p1x, double p1y,
                                      double p2x, double p2y) {
  for (const double c : {p1x, p1y, p2x, p2y}) {
    if (c < 0.0 || c > 1.0) {
      throw std::invalid_argument("bezier_intensity: control points must lie in [0,1]^2");
    }
  }
  for (const float v : image.values()) {
    if (v < 0.0f || v > 1.0f) {
      throw std::invalid_argument("bezier_intensity: image values must lie in [0,1]");
    }
  }

  std::array<std::pair<double, double>, kBezierSamples> curve;
  for (int i = 0; i < kBezierSamples; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(kBezierSamples - 1);
    const double omt = 1.0 - t;
    const double b1 = 3.0 * omt * omt * t;
    const double b2 = 3.0 * omt * t * t;
    const double b3 = t * t * t;
    curve[static_cast<std::size_t>(i)] = {b1 * p1x + b2 * p2x + b3, b1 * p1y + b2 * p2y + b3};
  }

  Tensor<float> out = Tensor<float>::allocate(image.shape());
  const float* src = image.values().data();
  float* dst = out.mutable_values().data();
  for (std::int64_t i = 0; i < image.numel(); ++i) {
    dst[i] = bezier_intensity_value(src[i], curve);
  }
  return out;
}

struct AugmentConfig {
  bool random_crop = true;
  std::int64_t crop_size = 64;
  bool hflip = true;
  bool vflip = true;
  bool rot90 = true;
  bool bezier = true;
  double bezier_prob = 0.5;
};

inline void to_json(nlohmann::json& j, const AugmentConfig& c) {
  j = nlohmann::json{{"random_crop", c.random_crop}, {"crop_size", c.crop_size},
                     {"hflip", c.hflip},             {"vflip", c.vflip},
                     {"rot90", c.rot90},             {"bezier", c.bezier},
                     {"bezier_prob", c.bezier_prob}};
}

inline void from_json(const nlohmann::json& j, AugmentConfig& c) {
  if (j.contains("random_crop")) j.at("random_crop").get_to(c.random_crop);
  if (j.contains("crop_size")) j.at("crop_size").get_to(c.crop_size);
  if (j.contains("hflip")) j.at("hflip").get_to(c.hflip);
  if (j.contains("vflip")) j.at("vflip").get_to(c.vflip);
  if (j.contains("rot90")) j.at("rot90").get_to(c.rot90);
  if (j.contains("bezier")) j.at("bezier").get_to(c.bezier);
  if (j.contains("bezier_prob")) j.at("bezier_prob").get_to(c.bezier_prob);
}

// The exact choices one augment() call made, for logs and replay.
struct AugmentTrace {
  std::int64_t crop_row = 0, crop_col = 0;
  bool hflipped = false, vflipped = false;
  int rot_quarters = 0;
  bool bezier_applied = false;
  double p1x = 0, p1y = 0, p2x = 0, p2y = 0;
};

namespace detail {

inline std::vector<float> crop_plane(const std::vector<float>& src, std::int64_t /*h*/,
                                     std::int64_t w, std::int64_t r, std::int64_t c,
                                     std::int64_t size) {
  std::vector<float> out(static_cast<std::size_t>(size * size));
  for (std::int64_t y = 0; y < size; ++y) {
    std::copy_n(src.begin() + (r + y) * w + c, size, out.begin() + y * size);
  }
  return out;
}

inline void hflip_plane(std::vector<float>& v, std::int64_t h, std::int64_t w) {
  for (std::int64_t y = 0; y < h; ++y) {
    std::reverse(v.begin() + y * w, v.begin() + (y + 1) * w);
  }
}

inline void vflip_plane(std::vector<float>& v, std::int64_t h, std::int64_t w) {
  for (std::int64_t y = 0; y < h / 2; ++y) {
    std::swap_ranges(v.begin() + y * w, v.begin() + (y + 1) * w, v.begin() + (h - 1 - y) * w);
  }
}

// Counter-clockwise quarter turn of a square plane.
inline void rot90_plane(std::vector<float>& v, std::int64_t n) {
  std::vector<float> out(v.size());
  for (std::int64_t y = 0; y < n; ++y) {
    for (std::int64_t x = 0; x < n; ++x) {
      out[static_cast<std::size_t>((n - 1 - x) * n + y)] = v[static_cast<std::size_t>(y * n + x)];
    }
  }
  v = std::move(out);
}

}  // namespace detail

// Applies the configured augmentations; geometric ops hit image and mask
// identically, the intensity remap only the image. Rotations require the
// (post-crop) plane to be square. Deterministic given the seed.
inline SliceSample augment(const SliceSample& sample, const AugmentConfig& cfg,
                           std::uint64_t seed, AugmentTrace* trace = nullptr) {
  sample.validate();
  std::int64_t h = sample.image.shape().extent(1);
  std::int64_t w = sample.image.shape().extent(2);
  Rng rng(derive_seed(seed, 0x617567));  // augmentation stream

  std::vector<float> img(sample.image.values().begin(), sample.image.values().end());
  std::vector<float> msk(sample.mask.values().begin(), sample.mask.values().end());
  AugmentTrace tr;

  if (cfg.random_crop) {
    if (cfg.crop_size > h || cfg.crop_size > w) {
      throw std::invalid_argument("augment: crop " + std::to_string(cfg.crop_size) +
                                  " larger than image " + std::to_string(h) + "x" +
                                  std::to_string(w));
    }
    tr.crop_row = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(h - cfg.crop_size + 1)));
    tr.crop_col = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(w - cfg.crop_size + 1)));
    img = detail::crop_plane(img, h, w, tr.crop_row, tr.crop_col, cfg.crop_size);
    msk = detail::crop_plane(msk, h, w, tr.crop_row, tr.crop_col, cfg.crop_size);
    h = w = cfg.crop_size;
  }
  if (cfg.hflip) {
    tr.hflipped = rng.uniform() < 0.5;
    if (tr.hflipped) {
      detail::hflip_plane(img, h, w);
      detail::hflip_plane(msk, h, w);
    }
  }
  if (cfg.vflip) {
    tr.vflipped = rng.uniform() < 0.5;
    if (tr.vflipped) {
      detail::vflip_plane(img, h, w);
      detail::vflip_plane(msk, h, w);
    }
  }
  if (cfg.rot90) {
    tr.rot_quarters = static_cast<int>(rng.below(4));
    if (tr.rot_quarters != 0 && h != w) {
      throw std::invalid_argument("augment: rot90 needs a square plane, got " +
                                  std::to_string(h) + "x" + std::to_string(w));
    }
    for (int k = 0; k < tr.rot_quarters; ++k) {
      detail::rot90_plane(img, h);
      detail::rot90_plane(msk, h);
    }
  }

  SliceSample out = sample;
  out.image = Tensor<float>::from_values(Shape{1, h, w}, std::move(img));
  out.mask = Tensor<float>::from_values(Shape{h, w}, std::move(msk));

  if (cfg.bezier) {
    // Control points are drawn whether or not the remap fires, keeping the
    // stream layout independent of the probability threshold.
    tr.p1x = rng.uniform();
    tr.p1y = rng.uniform();
    tr.p2x = rng.uniform();
    tr.p2y = rng.uniform();
    tr.bezier_applied = rng.uniform() < cfg.bezier_prob;
    if (tr.bezier_applied) {
      out.image = bezier_intensity(out.image, tr.p1x, tr.p1y, tr.p2x, tr.p2y);
    }
  }

  if (trace != nullptr) *trace = tr;
  return out;
}

}  // namespace conunetr
