#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace conunetr {

// Age-dependent geometry and appearance of the phantom structures. The
// schedule is monotone: older cohorts grow thicker, better-connected, sharper
// and higher-contrast structures, younger ones thin, gappy, blurry and faint.
struct AgeProfile {
  int age_id = 0;
  double mean_thickness = 7.5;      // ribbon cross-section, pixels
  double gap_rate = 0.18;           // probability a ribbon segment is dropped
  double boundary_blur_sigma = 1.4; // pixels
  double contrast = 0.28;           // foreground lift over background, [0,1]

  void validate() const {
    if (mean_thickness <= 0) throw std::invalid_argument("AgeProfile: thickness must be > 0");
    if (gap_rate < 0 || gap_rate >= 1) {
      throw std::invalid_argument("AgeProfile: gap_rate must be in [0,1)");
    }
    if (boundary_blur_sigma < 0) throw std::invalid_argument("AgeProfile: blur sigma < 0");
    if (contrast < 0 || contrast > 1) {
      throw std::invalid_argument("AgeProfile: contrast must be in [0,1]");
    }
  }
};

// Multiplicative/additive modifiers a mutation applies on top of any age.
struct MutationProfile {
  int mutation_id = 0;
  double curvature_bias = 0.0;      // waviness added to structure outlines
  double thickness_scale = 1.0;
  double texture_noise_level = 1.0;

  void validate() const {
    if (thickness_scale <= 0) {
      throw std::invalid_argument("MutationProfile: thickness_scale must be > 0");
    }
    if (curvature_bias < 0) {
      throw std::invalid_argument("MutationProfile: curvature_bias must be >= 0");
    }
    if (texture_noise_level <= 0) {
      throw std::invalid_argument("MutationProfile: texture_noise_level must be > 0");
    }
  }
};

// Three cohorts, young to old. Appearance differences (contrast, blur) are
// what makes one-cohort models transfer poorly to the others.
inline std::vector<AgeProfile> default_age_profiles() {
  return {
      AgeProfile{0, 4.5, 0.35, 2.2, 0.16},
      AgeProfile{1, 7.5, 0.18, 1.4, 0.28},
      AgeProfile{2, 11.0, 0.06, 0.7, 0.42},
  };
}

inline MutationProfile identity_mutation() { return MutationProfile{0, 0.0, 1.0, 1.0}; }

// Held-out mutation: wavier, thinner, noisier structures at every age.
inline MutationProfile variant_mutation() { return MutationProfile{1, 0.35, 0.8, 1.6}; }

inline void validate_age_schedule(const std::vector<AgeProfile>& ages) {
  if (ages.empty()) throw std::invalid_argument("age schedule: empty");
  for (const AgeProfile& a : ages) a.validate();
  for (std::size_t i = 1; i < ages.size(); ++i) {
    if (ages[i].age_id <= ages[i - 1].age_id) {
      throw std::invalid_argument("age schedule: age ids must increase");
    }
    if (ages[i].mean_thickness <= ages[i - 1].mean_thickness) {
      throw std::invalid_argument("age schedule: thickness must increase with age");
    }
    if (ages[i].gap_rate >= ages[i - 1].gap_rate) {
      throw std::invalid_argument("age schedule: gap_rate must decrease with age");
    }
  }
}

inline void to_json(nlohmann::json& j, const AgeProfile& a) {
  j = nlohmann::json{{"age_id", a.age_id},
                     {"mean_thickness", a.mean_thickness},
                     {"gap_rate", a.gap_rate},
                     {"boundary_blur_sigma", a.boundary_blur_sigma},
                     {"contrast", a.contrast}};
}

inline void from_json(const nlohmann::json& j, AgeProfile& a) {
  j.at("age_id").get_to(a.age_id);
  j.at("mean_thickness").get_to(a.mean_thickness);
  j.at("gap_rate").get_to(a.gap_rate);
  j.at("boundary_blur_sigma").get_to(a.boundary_blur_sigma);
  j.at("contrast").get_to(a.contrast);
}

inline void to_json(nlohmann::json& j, const MutationProfile& m) {
  j = nlohmann::json{{"mutation_id", m.mutation_id},
                     {"curvature_bias", m.curvature_bias},
                     {"thickness_scale", m.thickness_scale},
                     {"texture_noise_level", m.texture_noise_level}};
}

inline void from_json(const nlohmann::json& j, MutationProfile& m) {
  j.at("mutation_id").get_to(m.mutation_id);
  j.at("curvature_bias").get_to(m.curvature_bias);
  j.at("thickness_scale").get_to(m.thickness_scale);
  j.at("texture_noise_level").get_to(m.texture_noise_level);
}

}  // namespace conunetr
