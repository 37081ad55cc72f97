#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "conunetr/tensor/tensor.hpp"

namespace conunetr {

// Flat registry of trainable tensors. Modules append their parameters under a
// dotted prefix; the optimizer and checkpoint code consume the list in
// registration order, which is therefore part of the reproducibility contract.
template <typename S>
struct ParamList {
  struct Item {
    std::string name;
    Tensor<S> tensor;
    bool decay = true;    // false exempts the tensor from weight decay
  };

  std::vector<Item> items;

  void add(std::string name, Tensor<S> tensor, bool decay = true) {
    if (!tensor.defined()) {
      throw std::invalid_argument("ParamList: parameter " + name + " is undefined");
    }
    for (const Item& it : items) {
      if (it.name == name) {
        throw std::invalid_argument("ParamList: duplicate parameter name " + name);
      }
    }
    tensor.set_requires_grad(true);
    items.push_back(Item{std::move(name), std::move(tensor), decay});
  }

  const Item* find(const std::string& name) const {
    for (const Item& it : items) {
      if (it.name == name) return &it;
    }
    return nullptr;
  }

  std::int64_t total_count() const {
    std::int64_t n = 0;
    for (const Item& it : items) n += it.tensor.numel();
    return n;
  }

  void zero_grad() const {
    for (const Item& it : items) it.tensor.zero_grad();
  }

  std::size_t size() const { return items.size(); }
};

inline std::string join_name(const std::string& prefix, const std::string& leaf) {
  return prefix.empty() ? leaf : prefix + "." + leaf;
}

}  // namespace conunetr
