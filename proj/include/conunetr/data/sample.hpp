#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include "conunetr/tensor/tensor.hpp"

namespace conunetr {

// One annotated 2-D slice plus the metadata the model conditions on.
struct SliceSample {
  Tensor<float> image;  // [1,H,W], values in [0,1]
  Tensor<float> mask;   // [H,W], values in {0,1}
  int age_id = 0;
  int mutation_id = 0;
  std::string volume_id;
  std::int64_t slice_index = 0;
  std::int64_t total_slices = 1;

  void validate() const {
    if (!image.defined() || image.rank() != 3 || image.shape().extent(0) != 1) {
      throw std::invalid_argument("SliceSample: image must be [1,H,W]");
    }
    if (!mask.defined() || mask.rank() != 2 ||
        mask.shape().extent(0) != image.shape().extent(1) ||
        mask.shape().extent(1) != image.shape().extent(2)) {
      throw std::invalid_argument("SliceSample: mask extents must match the image");
    }
    for (const float v : mask.values()) {
      if (v != 0.0f && v != 1.0f) throw std::invalid_argument("SliceSample: mask not binary");
    }
    for (const float v : image.values()) {
      if (!std::isfinite(v)) throw std::invalid_argument("SliceSample: image not finite");
    }
    if (slice_index < 0 || slice_index >= total_slices) {
      throw std::invalid_argument("SliceSample: slice_index outside volume");
    }
  }
};

}  // namespace conunetr
