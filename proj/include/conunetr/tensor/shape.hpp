#pragma once

#include <cstdint>
#include <initializer_list>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace conunetr {

// Dense row-major extents, rank 0 (scalar) through 4 (batch, channel, height, width).
class Shape {
 public:
  static constexpr int kMaxRank = 4;

  Shape() = default;
  Shape(std::initializer_list<std::int64_t> dims) : dims_(dims) { validate(); }
  explicit Shape(std::vector<std::int64_t> dims) : dims_(std::move(dims)) { validate(); }

  int rank() const { return static_cast<int>(dims_.size()); }

  std::int64_t extent(int axis) const {
    if (axis < 0 || axis >= rank()) {
      throw std::invalid_argument("Shape: axis " + std::to_string(axis) +
                                  " out of range for " + str());
    }
    return dims_[static_cast<std::size_t>(axis)];
  }

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (const std::int64_t d : dims_) n *= d;
    return n;
  }

  const std::vector<std::int64_t>& dims() const { return dims_; }

  bool operator==(const Shape& other) const { return dims_ == other.dims_; }
  bool operator!=(const Shape& other) const { return !(*this == other); }

  std::string str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < dims_.size(); ++i) {
      if (i > 0) os << ", ";
      os << dims_[i];
    }
    os << ']';
    return os.str();
  }

 private:
  void validate() const {
    if (rank() > kMaxRank) {
      throw std::invalid_argument("Shape: rank " + std::to_string(rank()) +
                                  " exceeds maximum of " + std::to_string(kMaxRank));
    }
    for (const std::int64_t d : dims_) {
      if (d < 1) {
        throw std::invalid_argument("Shape: every extent must be >= 1, got " + str());
      }
    }
  }

  std::vector<std::int64_t> dims_;
};

inline std::vector<std::int64_t> row_major_strides(const Shape& shape) {
  std::vector<std::int64_t> strides(static_cast<std::size_t>(shape.rank()), 1);
  for (int axis = shape.rank() - 2; axis >= 0; --axis) {
    strides[static_cast<std::size_t>(axis)] =
        strides[static_cast<std::size_t>(axis + 1)] * shape.extent(axis + 1);
  }
  return strides;
}

}  // namespace conunetr
