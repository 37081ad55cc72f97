#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace conunetr {

enum class ConditioningMode { none, age_embedding, age_token };
enum class SpatialMode { none, sinusoid, learnable };

inline std::string to_string(ConditioningMode m) {
  switch (m) {
    case ConditioningMode::none: return "none";
    case ConditioningMode::age_embedding: return "age_embedding";
    case ConditioningMode::age_token: return "age_token";
  }
  throw std::logic_error("unreachable conditioning mode");
}

inline std::string to_string(SpatialMode m) {
  switch (m) {
    case SpatialMode::none: return "none";
    case SpatialMode::sinusoid: return "sinusoid";
    case SpatialMode::learnable: return "learnable";
  }
  throw std::logic_error("unreachable spatial mode");
}

inline ConditioningMode conditioning_mode_from(const std::string& s) {
  if (s == "none") return ConditioningMode::none;
  if (s == "age_embedding") return ConditioningMode::age_embedding;
  if (s == "age_token") return ConditioningMode::age_token;
  throw std::invalid_argument("conditioning_mode: unknown value '" + s + "'");
}

inline SpatialMode spatial_mode_from(const std::string& s) {
  if (s == "none") return SpatialMode::none;
  if (s == "sinusoid") return SpatialMode::sinusoid;
  if (s == "learnable") return SpatialMode::learnable;
  throw std::invalid_argument("spatial_mode: unknown value '" + s + "'");
}

// Static description of the segmentation network. Square inputs only.
struct ModelConfig {
  std::int64_t img_size = 128;
  std::int64_t in_channels = 1;
  std::int64_t patch_size = 16;
  std::int64_t d_model = 64;
  std::int64_t stages = 6;
  std::int64_t heads = 4;
  std::int64_t num_classes = 2;
  std::int64_t k_ages = 3;
  ConditioningMode conditioning_mode = ConditioningMode::age_token;
  SpatialMode spatial_mode = SpatialMode::sinusoid;
  std::vector<std::int64_t> decoder_channels = {64, 32, 16, 8};
  std::int64_t mlp_ratio = 4;

  std::int64_t grid() const { return img_size / patch_size; }
  std::int64_t n_patches() const { return grid() * grid(); }

  // Number of x2 upsampling units between the token grid and full resolution.
  std::int64_t upsample_levels() const {
    std::int64_t p = patch_size, levels = 0;
    while (p > 1) {
      p /= 2;
      ++levels;
    }
    return levels;
  }

  void validate() const {
    auto fail = [](const std::string& msg) { throw std::invalid_argument("ModelConfig: " + msg); };
    if (img_size < 16) fail("img_size too small");
    if (patch_size != 8 && patch_size != 16) {
      // 3 skip fusions + a final stage bound the upsampling chain to 3 or 4
      // doublings, i.e. patch sizes 8 and 16.
      fail("patch_size must be 8 or 16");
    }
    if (img_size % patch_size != 0) fail("img_size not divisible by patch_size");
    if (d_model < 2 || d_model % 2 != 0) fail("d_model must be even (sin/cos pairing)");
    if (d_model % heads != 0) fail("d_model not divisible by heads");
    if (stages < 1) fail("stages must be >= 1");
    if (stages < 6) {
      // Skip taps come from stages 2, 3 and 5.
      fail("stages must be >= 6 so skip taps z2, z3, z5 exist");
    }
    if (num_classes != 2) fail("only 2-class segmentation supported");
    if (in_channels < 1) fail("in_channels must be >= 1");
    if (mlp_ratio < 1) fail("mlp_ratio must be >= 1");
    if (decoder_channels.size() != 4) fail("decoder_channels needs exactly 4 entries");
    for (const std::int64_t c : decoder_channels) {
      if (c < 8 || c % 8 != 0) fail("decoder channels must be positive multiples of 8");
    }
    if (conditioning_mode != ConditioningMode::none && k_ages < 1) {
      fail("k_ages must be >= 1 when conditioning is active");
    }
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"img_size", c.img_size},
                     {"in_channels", c.in_channels},
                     {"patch_size", c.patch_size},
                     {"d_model", c.d_model},
                     {"stages", c.stages},
                     {"heads", c.heads},
                     {"num_classes", c.num_classes},
                     {"k_ages", c.k_ages},
                     {"conditioning_mode", to_string(c.conditioning_mode)},
                     {"spatial_mode", to_string(c.spatial_mode)},
                     {"decoder_channels", c.decoder_channels},
                     {"mlp_ratio", c.mlp_ratio}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  for (const auto& [key, value] : j.items()) {
    (void)value;
    static const char* known[] = {"img_size",    "in_channels",       "patch_size",
                                  "d_model",     "stages",            "heads",
                                  "num_classes", "k_ages",            "conditioning_mode",
                                  "spatial_mode", "decoder_channels", "mlp_ratio"};
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw std::invalid_argument("ModelConfig: unknown key '" + key + "'");
  }
  if (j.contains("img_size")) j.at("img_size").get_to(c.img_size);
  if (j.contains("in_channels")) j.at("in_channels").get_to(c.in_channels);
  if (j.contains("patch_size")) j.at("patch_size").get_to(c.patch_size);
  if (j.contains("d_model")) j.at("d_model").get_to(c.d_model);
  if (j.contains("stages")) j.at("stages").get_to(c.stages);
  if (j.contains("heads")) j.at("heads").get_to(c.heads);
  if (j.contains("num_classes")) j.at("num_classes").get_to(c.num_classes);
  if (j.contains("k_ages")) j.at("k_ages").get_to(c.k_ages);
  if (j.contains("conditioning_mode")) {
    c.conditioning_mode = conditioning_mode_from(j.at("conditioning_mode").get<std::string>());
  }
  if (j.contains("spatial_mode")) {
    c.spatial_mode = spatial_mode_from(j.at("spatial_mode").get<std::string>());
  }
  if (j.contains("decoder_channels")) {
    j.at("decoder_channels").get_to(c.decoder_channels);
  }
  if (j.contains("mlp_ratio")) j.at("mlp_ratio").get_to(c.mlp_ratio);
}

// Named size bundles. `tiny` and `desk` are what the test and study suites
// run; `paper_full` exists for parameter-count checks, not for CPU training.
inline ModelConfig model_preset(const std::string& name) {
  ModelConfig c;
  if (name == "tiny") {
    c.img_size = 64;
    c.d_model = 32;
    c.decoder_channels = {32, 16, 8, 8};
  } else if (name == "desk") {
    c.img_size = 128;
    c.d_model = 64;
    c.decoder_channels = {64, 32, 16, 8};
  } else if (name == "paper-full") {
    c.img_size = 512;
    c.d_model = 256;
    c.decoder_channels = {256, 128, 64, 32};
  } else {
    throw std::invalid_argument("unknown preset '" + name + "' (expected tiny, desk, paper-full)");
  }
  c.validate();
  return c;
}

}  // namespace conunetr
