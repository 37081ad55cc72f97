#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "conunetr/data/profiles.hpp"
#include "conunetr/tensor/rng.hpp"
#include "conunetr/tensor/tensor.hpp"

namespace conunetr {

namespace detail {

// Separable Gaussian blur with zero padding; sigma below the threshold is an
// identity (crisp old-age boundaries skip the smoothing entirely).
inline void gaussian_blur(std::vector<float>& img, std::int64_t h, std::int64_t w,
                          double sigma) {
  if (sigma < 0.05) return;
  const std::int64_t radius = static_cast<std::int64_t>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (std::int64_t i = -radius; i <= radius; ++i) {
    const double v = std::exp(-static_cast<double>(i * i) / (2.0 * sigma * sigma));
    kernel[static_cast<std::size_t>(i + radius)] = v;
    total += v;
  }
  for (double& v : kernel) v /= total;

  std::vector<float> tmp(img.size(), 0.0f);
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (std::int64_t i = -radius; i <= radius; ++i) {
        const std::int64_t sx = x + i;
        if (sx < 0 || sx >= w) continue;
        acc += kernel[static_cast<std::size_t>(i + radius)] *
               static_cast<double>(img[static_cast<std::size_t>(y * w + sx)]);
      }
      tmp[static_cast<std::size_t>(y * w + x)] = static_cast<float>(acc);
    }
  }
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (std::int64_t i = -radius; i <= radius; ++i) {
        const std::int64_t sy = y + i;
        if (sy < 0 || sy >= h) continue;
        acc += kernel[static_cast<std::size_t>(i + radius)] *
               static_cast<double>(tmp[static_cast<std::size_t>(sy * w + x)]);
      }
      img[static_cast<std::size_t>(y * w + x)] = static_cast<float>(acc);
    }
  }
}

inline constexpr int kGapSegments = 8;

// Geometry of one ribbon structure, fixed for the whole volume. Every field
// is drawn from profile-independent streams so that two volumes generated
// from the same seed share structure layout exactly; the age profile then
// only modulates thickness, gap activation, blur and contrast. Lower
// gap_rate activates a superset of segments, which (with thicker ribbons)
// makes mask area monotone in age at fixed seed.
struct Ribbon {
  double cx0, cy0, dx, dy;     // center path, relative coordinates
  double r0, dr;               // arc radius relative to min extent, plus drift
  double phi0, dphi;           // arc start angle and rotation drift
  double span;                 // angular span of the arc
  double wave_amp01;           // waviness strength in [0.5,1], scaled by mutation
  double wave_phase;
  std::array<double, kGapSegments> gap_u;  // segment-survival uniforms
};

inline Ribbon draw_ribbon(Rng& structure_rng, Rng& gap_rng) {
  Ribbon r;
  r.cx0 = structure_rng.uniform(0.32, 0.68);
  r.cy0 = structure_rng.uniform(0.32, 0.68);
  r.dx = structure_rng.uniform(-0.08, 0.08);
  r.dy = structure_rng.uniform(-0.08, 0.08);
  r.r0 = structure_rng.uniform(0.16, 0.30);
  r.dr = structure_rng.uniform(-0.04, 0.04);
  r.phi0 = structure_rng.uniform(0.0, 2.0 * std::numbers::pi);
  r.dphi = structure_rng.uniform(-0.5, 0.5);
  r.span = structure_rng.uniform(0.6 * std::numbers::pi, 1.5 * std::numbers::pi);
  r.wave_amp01 = structure_rng.uniform(0.5, 1.0);
  r.wave_phase = structure_rng.uniform(0.0, 2.0 * std::numbers::pi);
  for (double& u : r.gap_u) u = gap_rng.uniform();
  return r;
}

inline void stamp_disc(std::vector<float>& mask, std::int64_t h, std::int64_t w, double px,
                       double py, double rad) {
  const std::int64_t x0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(px - rad)));
  const std::int64_t x1 = std::min<std::int64_t>(w - 1, static_cast<std::int64_t>(std::ceil(px + rad)));
  const std::int64_t y0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(py - rad)));
  const std::int64_t y1 = std::min<std::int64_t>(h - 1, static_cast<std::int64_t>(std::ceil(py + rad)));
  const double r2 = rad * rad;
  for (std::int64_t y = y0; y <= y1; ++y) {
    for (std::int64_t x = x0; x <= x1; ++x) {
      const double ddx = static_cast<double>(x) - px;
      const double ddy = static_cast<double>(y) - py;
      if (ddx * ddx + ddy * ddy <= r2) mask[static_cast<std::size_t>(y * w + x)] = 1.0f;
    }
  }
}

}  // namespace detail

// Renders one phantom volume: 2-4 ribbon structures drifting smoothly across
// slices, cross-section set by the age/mutation pair, masked crisply and
// imaged with blur, contrast, a slowly varying background field and pixel
// noise. Deterministic given (profiles, extents, seed).
inline std::vector<std::pair<Tensor<float>, Tensor<float>>> generate_volume(
    const AgeProfile& age, const MutationProfile& mut, std::int64_t h, std::int64_t w,
    std::int64_t total_slices, std::uint64_t seed) {
  age.validate();
  mut.validate();
  if (h < 64 || w < 64) {
    throw std::invalid_argument("generate_volume: extents must be >= 64, got " +
                                std::to_string(h) + "x" + std::to_string(w));
  }
  if (total_slices < 20) {
    throw std::invalid_argument("generate_volume: need >= 20 slices, got " +
                                std::to_string(total_slices));
  }

  // Independent streams; none of their draw sequences depends on profile
  // values, so a fixed seed pins the geometry across all profiles.
  Rng structure_rng(derive_seed(seed, 1));
  Rng gap_rng(derive_seed(seed, 2));
  Rng texture_rng(derive_seed(seed, 3));
  Rng noise_rng(derive_seed(seed, 4));

  const int n_structures = 2 + static_cast<int>(structure_rng.below(3));
  std::vector<detail::Ribbon> ribbons;
  for (int i = 0; i < n_structures; ++i) {
    ribbons.push_back(detail::draw_ribbon(structure_rng, gap_rng));
  }

  // Background field: three low-frequency cosine components with a slow
  // per-slice phase drift.
  struct FieldComponent {
    double amp, fx, fy, phase, drift;
  };
  std::array<FieldComponent, 3> field;
  for (FieldComponent& c : field) {
    c.amp = texture_rng.uniform(0.02, 0.05);
    c.fx = texture_rng.uniform(0.5, 2.5);
    c.fy = texture_rng.uniform(0.5, 2.5);
    c.phase = texture_rng.uniform(0.0, 2.0 * std::numbers::pi);
    c.drift = texture_rng.uniform(-0.8, 0.8);
  }

  const double thickness = age.mean_thickness * mut.thickness_scale;
  const double disc_radius = thickness / 2.0;
  const double min_extent = static_cast<double>(std::min(h, w));
  const double noise_std = 0.035 * mut.texture_noise_level;

  std::vector<std::pair<Tensor<float>, Tensor<float>>> out;
  out.reserve(static_cast<std::size_t>(total_slices));
  for (std::int64_t z = 0; z < total_slices; ++z) {
    const double t = total_slices == 1
                         ? 0.0
                         : static_cast<double>(z) / static_cast<double>(total_slices - 1);

    std::vector<float> mask(static_cast<std::size_t>(h * w), 0.0f);
    for (const detail::Ribbon& rb : ribbons) {
      const double cx = (rb.cx0 + rb.dx * t) * static_cast<double>(w);
      const double cy = (rb.cy0 + rb.dy * t) * static_cast<double>(h);
      const double radius = (rb.r0 + rb.dr * t) * min_extent;
      const double phi = rb.phi0 + rb.dphi * t;
      const double wave_amp = mut.curvature_bias * rb.wave_amp01 * 0.35 * radius;
      const std::int64_t steps = std::max<std::int64_t>(
          16, static_cast<std::int64_t>(std::ceil(2.0 * rb.span * (radius + wave_amp))));
      for (std::int64_t i = 0; i <= steps; ++i) {
        const double u = static_cast<double>(i) / static_cast<double>(steps);
        const int seg = std::min(detail::kGapSegments - 1,
                                 static_cast<int>(u * detail::kGapSegments));
        if (rb.gap_u[static_cast<std::size_t>(seg)] < age.gap_rate) continue;
        const double angle = phi + rb.span * u;
        const double rho =
            radius + wave_amp * std::sin(6.0 * std::numbers::pi * u + rb.wave_phase);
        detail::stamp_disc(mask, h, w, cx + rho * std::cos(angle), cy + rho * std::sin(angle),
                           disc_radius);
      }
    }

    std::vector<float> fg = mask;
    detail::gaussian_blur(fg, h, w, age.boundary_blur_sigma);

    std::vector<float> img(static_cast<std::size_t>(h * w));
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t x = 0; x < w; ++x) {
        double bg = 0.30;
        for (const FieldComponent& c : field) {
          bg += c.amp * std::cos(2.0 * std::numbers::pi *
                                     (c.fx * static_cast<double>(x) / static_cast<double>(w) +
                                      c.fy * static_cast<double>(y) / static_cast<double>(h)) +
                                 c.phase + c.drift * t);
        }
        const std::size_t p = static_cast<std::size_t>(y * w + x);
        double v = bg + age.contrast * static_cast<double>(fg[p]) +
                   noise_rng.normal(0.0, noise_std);
        img[p] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }

    out.emplace_back(Tensor<float>::from_values(Shape{1, h, w}, std::move(img)),
                     Tensor<float>::from_values(Shape{h, w}, std::move(mask)));
  }
  return out;
}

}  // namespace conunetr
