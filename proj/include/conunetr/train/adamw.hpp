#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "conunetr/model/checkpoint.hpp"
#include "conunetr/nn/parameters.hpp"
#include "conunetr/tensor/tensor.hpp"

namespace conunetr {

template <typename S>
struct AdamWConfig {
  S beta1 = S(0.9);
  S beta2 = S(0.999);
  S eps = S(1e-8);
  S weight_decay = S(0.001);
};

template <typename S>
void to_json(nlohmann::json& j, const AdamWConfig<S>& c) {
  j = nlohmann::json{{"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"eps", c.eps},
                     {"weight_decay", c.weight_decay}};
}

template <typename S>
void from_json(const nlohmann::json& j, AdamWConfig<S>& c) {
  if (j.contains("beta1")) j.at("beta1").get_to(c.beta1);
  if (j.contains("beta2")) j.at("beta2").get_to(c.beta2);
  if (j.contains("eps")) j.at("eps").get_to(c.eps);
  if (j.contains("weight_decay")) j.at("weight_decay").get_to(c.weight_decay);
}

// AdamW with decoupled weight decay: parameters marked decay=false (norm
// affines, bias vectors, embedding tables) shrink by neither path. A missing
// gradient counts as zero, so every parameter is touched exactly once per
// step and the zero-gradient trajectory stays in closed form.
template <typename S>
class AdamW {
 public:
  AdamW(const ParamList<S>& params, AdamWConfig<S> cfg) : params_(params), cfg_(cfg) {
    for (const auto& item : params_.items) {
      m_.emplace_back(item.tensor.values().size(), S(0));
      v_.emplace_back(item.tensor.values().size(), S(0));
    }
  }

  void step(S lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(t_));
    for (std::size_t p = 0; p < params_.items.size(); ++p) {
      const auto& item = params_.items[p];
      std::span<S> theta = item.tensor.mutable_values();
      const bool has_grad = item.tensor.has_grad();
      const std::span<const S> grad = has_grad ? item.tensor.grad() : std::span<const S>{};
      std::vector<S>& m = m_[p];
      std::vector<S>& v = v_[p];
      const S decay_mult = item.decay ? S(1) - lr * cfg_.weight_decay : S(1);
      for (std::size_t i = 0; i < theta.size(); ++i) {
        const S g = has_grad ? grad[i] : S(0);
        m[i] = cfg_.beta1 * m[i] + (S(1) - cfg_.beta1) * g;
        v[i] = cfg_.beta2 * v[i] + (S(1) - cfg_.beta2) * g * g;
        const S mhat = static_cast<S>(static_cast<double>(m[i]) / bc1);
        const S vhat = static_cast<S>(static_cast<double>(v[i]) / bc2);
        theta[i] = theta[i] * decay_mult - lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

  std::int64_t t() const { return t_; }
  const AdamWConfig<S>& config() const { return cfg_; }

  OptimizerSnapshot<S> snapshot() const {
    OptimizerSnapshot<S> snap;
    snap.t = t_;
    snap.m = m_;
    snap.v = v_;
    return snap;
  }

  void restore(const OptimizerSnapshot<S>& snap) {
    if (snap.m.size() != m_.size() || snap.v.size() != v_.size()) {
      throw std::invalid_argument("AdamW: snapshot parameter count mismatch");
    }
    for (std::size_t p = 0; p < m_.size(); ++p) {
      if (snap.m[p].size() != m_[p].size() || snap.v[p].size() != v_[p].size()) {
        throw std::invalid_argument("AdamW: snapshot shape mismatch at " +
                                    params_.items[p].name);
      }
    }
    t_ = snap.t;
    m_ = snap.m;
    v_ = snap.v;
  }

 private:
  ParamList<S> params_;
  AdamWConfig<S> cfg_;
  std::int64_t t_ = 0;
  std::vector<std::vector<S>> m_, v_;
};

}  // namespace conunetr
