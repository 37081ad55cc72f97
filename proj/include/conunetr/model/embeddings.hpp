#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "conunetr/model/config.hpp"
#include "conunetr/nn/parameters.hpp"
#include "conunetr/tensor/ops.hpp"
#include "conunetr/tensor/rng.hpp"
#include "conunetr/tensor/tensor.hpp"

namespace conunetr {

// Sinusoidal slice-position code: entry 2i = sin(loc / 10000^(2i/d)),
// entry 2i+1 = cos of the same argument. Wavelengths run a geometric
// progression from 2*pi to 10000*2*pi. Always evaluated in double.
inline std::vector<double> spatial_encoding(int loc, std::int64_t d_model) {
  if (loc < 1 || loc > 100) {
    throw std::invalid_argument("spatial_encoding: loc " + std::to_string(loc) +
                                " outside [1,100]");
  }
  if (d_model < 2 || d_model % 2 != 0) {
    throw std::invalid_argument("spatial_encoding: d_model must be positive and even");
  }
  std::vector<double> enc(static_cast<std::size_t>(d_model));
  for (std::int64_t i = 0; 2 * i < d_model; ++i) {
    const double arg =
        static_cast<double>(loc) /
        std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d_model));
    enc[static_cast<std::size_t>(2 * i)] = std::sin(arg);
    enc[static_cast<std::size_t>(2 * i + 1)] = std::cos(arg);
  }
  return enc;
}

// Volume-relative slice index mapped onto the shared [1,100] location scale.
inline int map_slice_location(std::int64_t slice_index, std::int64_t total_slices) {
  if (total_slices < 1) throw std::invalid_argument("map_slice_location: total_slices < 1");
  if (slice_index < 0 || slice_index >= total_slices) {
    throw std::invalid_argument("map_slice_location: index " + std::to_string(slice_index) +
                                " outside [0," + std::to_string(total_slices) + ")");
  }
  if (total_slices == 1) return 1;
  const double frac = static_cast<double>(slice_index) / static_cast<double>(total_slices - 1);
  return 1 + static_cast<int>(std::lround(99.0 * frac));
}

// One learnable token per age cohort, rows initialized normal(0, 0.02).
template <typename S>
class AgeTokenTable {
 public:
  AgeTokenTable() = default;

  AgeTokenTable(std::int64_t k_ages, std::int64_t d_model, Rng& rng)
      : k_ages_(k_ages), d_model_(d_model) {
    tokens_ = Tensor<S>::normal(Shape{k_ages, d_model}, S(0), S(0.02), rng, true);
  }

  // Row for one age id as a [1, d_model] tensor (stays on the tape).
  Tensor<S> row(std::int64_t age_id) const {
    if (age_id < 0 || age_id >= k_ages_) {
      throw std::invalid_argument("AgeTokenTable: age id " + std::to_string(age_id) +
                                  " outside [0," + std::to_string(k_ages_) + ")");
    }
    return slice(tokens_, 0, age_id, age_id + 1);
  }

  void collect_params(ParamList<S>& out, const std::string& prefix) const {
    out.add(join_name(prefix, "tokens"), tokens_, /*decay=*/false);
  }

  const Tensor<S>& tokens() const { return tokens_; }
  std::int64_t k_ages() const { return k_ages_; }

 private:
  std::int64_t k_ages_ = 0, d_model_ = 0;
  Tensor<S> tokens_;
};

// Learnable per-patch position rows, added to the patch tokens.
template <typename S>
class PositionTable {
 public:
  PositionTable() = default;

  PositionTable(std::int64_t n_patches, std::int64_t d_model, Rng& rng) {
    pos_ = Tensor<S>::normal(Shape{n_patches, d_model}, S(0), S(0.02), rng, true);
  }

  const Tensor<S>& pos() const { return pos_; }

  void collect_params(ParamList<S>& out, const std::string& prefix) const {
    out.add(join_name(prefix, "pos"), pos_, /*decay=*/false);
  }

 private:
  Tensor<S> pos_;
};

// Slice-location encoder: parameter-free sinusoid, a learnable [100, d] table,
// or disabled.
template <typename S>
class SpatialEncoder {
 public:
  SpatialEncoder() = default;

  SpatialEncoder(SpatialMode mode, std::int64_t d_model, Rng& rng)
      : mode_(mode), d_model_(d_model) {
    if (mode_ == SpatialMode::learnable) {
      table_ = Tensor<S>::normal(Shape{100, d_model}, S(0), S(0.02), rng, true);
    }
  }

  SpatialMode mode() const { return mode_; }

  // [1, d_model] encoding for `loc`, or an undefined tensor in mode none.
  Tensor<S> encode(int loc) const {
    switch (mode_) {
      case SpatialMode::none:
        return Tensor<S>();
      case SpatialMode::sinusoid: {
        const std::vector<double> enc = spatial_encoding(loc, d_model_);
        std::vector<S> vals(enc.size());
        for (std::size_t i = 0; i < enc.size(); ++i) vals[i] = static_cast<S>(enc[i]);
        return Tensor<S>::from_values(Shape{1, d_model_}, std::move(vals));
      }
      case SpatialMode::learnable:
        if (loc < 1 || loc > 100) {
          throw std::invalid_argument("SpatialEncoder: loc outside [1,100]");
        }
        return slice(table_, 0, loc - 1, loc);
    }
    throw std::logic_error("unreachable spatial mode");
  }

  void collect_params(ParamList<S>& out, const std::string& prefix) const {
    if (mode_ == SpatialMode::learnable) {
      out.add(join_name(prefix, "table"), table_, /*decay=*/false);
    }
  }

 private:
  SpatialMode mode_ = SpatialMode::none;
  std::int64_t d_model_ = 0;
  Tensor<S> table_;
};

// Assembles the encoder input from patch tokens [N, d]:
//   e = patches + pos + e_sp        (e_sp broadcast onto every row)
// then, depending on the conditioning mode, prepends the age token as row 0
// (age_token), adds the age vector element-wise to every patch token
// (age_embedding), or passes e through unchanged (none).
template <typename S>
Tensor<S> compose_embeddings(const Tensor<S>& patches, const Tensor<S>& pos,
                             const Tensor<S>& e_sp, const Tensor<S>& age_row,
                             ConditioningMode mode) {
  if (patches.rank() != 2) {
    throw std::invalid_argument("compose_embeddings: patches must be [N, d_model]");
  }
  if (pos.shape() != patches.shape()) {
    throw std::invalid_argument("compose_embeddings: position table " + pos.shape().str() +
                                " does not match patches " + patches.shape().str());
  }
  Tensor<S> e = add(patches, pos);
  if (e_sp.defined()) e = add(e, e_sp);

  switch (mode) {
    case ConditioningMode::none:
      return e;
    case ConditioningMode::age_embedding:
      if (!age_row.defined()) {
        throw std::invalid_argument("compose_embeddings: age row required in age_embedding mode");
      }
      return add(e, age_row);
    case ConditioningMode::age_token: {
      if (!age_row.defined()) {
        throw std::invalid_argument("compose_embeddings: age row required in age_token mode");
      }
      return concat<S>({age_row, e}, 0);
    }
  }
  throw std::logic_error("unreachable conditioning mode");
}

}  // namespace conunetr
