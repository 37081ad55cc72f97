#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

namespace conunetr {

struct ScheduleConfig {
  double lr_init = 1e-4;
  double lr_min = 0.0;
  std::int64_t total_epochs = 1;

  void validate() const {
    if (total_epochs < 1) throw std::invalid_argument("ScheduleConfig: total_epochs must be >= 1");
    if (lr_min > lr_init) throw std::invalid_argument("ScheduleConfig: lr_min exceeds lr_init");
  }
};

inline void to_json(nlohmann::json& j, const ScheduleConfig& c) {
  j = nlohmann::json{
      {"lr_init", c.lr_init}, {"lr_min", c.lr_min}, {"total_epochs", c.total_epochs}};
}

inline void from_json(const nlohmann::json& j, ScheduleConfig& c) {
  if (j.contains("lr_init")) j.at("lr_init").get_to(c.lr_init);
  if (j.contains("lr_min")) j.at("lr_min").get_to(c.lr_min);
  if (j.contains("total_epochs")) j.at("total_epochs").get_to(c.total_epochs);
}

// Cosine annealing, stepped per epoch; endpoints are exact.
inline double cosine_lr(std::int64_t epoch, const ScheduleConfig& cfg) {
  cfg.validate();
  if (epoch < 0 || epoch > cfg.total_epochs) {
    throw std::invalid_argument("cosine_lr: epoch " + std::to_string(epoch) + " outside [0," +
                                std::to_string(cfg.total_epochs) + "]");
  }
  if (epoch == 0) return cfg.lr_init;
  if (epoch == cfg.total_epochs) return cfg.lr_min;
  const double phase = std::numbers::pi * static_cast<double>(epoch) /
                       static_cast<double>(cfg.total_epochs);
  return cfg.lr_min + 0.5 * (cfg.lr_init - cfg.lr_min) * (1.0 + std::cos(phase));
}

}  // namespace conunetr
