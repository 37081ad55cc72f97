#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "conunetr/tensor/rng.hpp"
#include "conunetr/tensor/shape.hpp"

namespace conunetr {

namespace debug {
// Opt-in fail-fast scan for NaN/Inf after every forward op.
inline bool& check_finite_flag() {
  static bool flag = false;
  return flag;
}
inline void set_check_finite(bool on) { check_finite_flag() = on; }
}  // namespace debug

template <typename Scalar>
struct TensorNode {
  Shape shape;
  std::vector<Scalar> values;
  std::vector<Scalar> grad;  // empty until the first accumulation
  bool requires_grad = false;
  const void* producer = nullptr;  // tape that recorded the op producing this node
};

// Value-semantic handle onto shared dense storage. Copies alias the same
// buffer; forward results are never mutated in place, only grad fields are.
template <typename Scalar>
class Tensor {
 public:
  using Node = TensorNode<Scalar>;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), Scalar(0), requires_grad);
  }

  static Tensor filled(Shape shape, Scalar value, bool requires_grad = false) {
    Tensor t = allocate(std::move(shape));
    std::fill(t.node_->values.begin(), t.node_->values.end(), value);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor from_values(Shape shape, std::vector<Scalar> values,
                            bool requires_grad = false) {
    if (static_cast<std::int64_t>(values.size()) != shape.numel()) {
      throw std::invalid_argument(
          "Tensor: explicit init of " + std::to_string(values.size()) +
          " values does not match shape " + shape.str());
    }
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->values = std::move(values);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(Scalar value) { return from_values(Shape{}, {value}); }

  static Tensor uniform(Shape shape, double lo, double hi, Rng& rng,
                        bool requires_grad = false) {
    Tensor t = allocate(std::move(shape));
    for (Scalar& v : t.node_->values) v = static_cast<Scalar>(rng.uniform(lo, hi));
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor normal(Shape shape, double mu, double sigma, Rng& rng,
                       bool requires_grad = false) {
    Tensor t = allocate(std::move(shape));
    for (Scalar& v : t.node_->values) v = static_cast<Scalar>(rng.normal(mu, sigma));
    t.node_->requires_grad = requires_grad;
    return t;
  }

  // Uninitialized storage; for op kernels that overwrite every element.
  static Tensor allocate(Shape shape) {
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->values.resize(static_cast<std::size_t>(shape.numel()));
    t.node_->shape = std::move(shape);
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return node_->shape.rank(); }
  std::int64_t numel() const { return node_->shape.numel(); }

  // The handle is value-semantic but the node is shared, so storage access
  // and grad bookkeeping are const members: a const Tensor still aliases
  // mutable shared state, exactly like a copied handle would.
  std::span<const Scalar> values() const { return node_->values; }
  std::span<Scalar> mutable_values() const { return node_->values; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) const { node_->requires_grad = on; }

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  std::span<const Scalar> grad() const { return node_->grad; }

  // Allocates a zero gradient buffer on first use.
  std::span<Scalar> grad_buffer() const {
    if (node_->grad.empty()) {
      node_->grad.assign(node_->values.size(), Scalar(0));
    }
    return node_->grad;
  }

  void zero_grad() const {
    if (node_) node_->grad.clear();
  }

  Scalar at(std::initializer_list<std::int64_t> idx) const {
    const auto strides = row_major_strides(node_->shape);
    std::int64_t flat = 0;
    int axis = 0;
    for (const std::int64_t i : idx) flat += i * strides[static_cast<std::size_t>(axis++)];
    return node_->values[static_cast<std::size_t>(flat)];
  }

  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

template <typename Scalar>
inline void throw_if_not_finite(const Tensor<Scalar>& t, const char* op) {
  if (!debug::check_finite_flag()) return;
  for (const Scalar v : t.values()) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw std::runtime_error(std::string("non-finite value produced by op '") + op + "'");
    }
  }
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace conunetr
