#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "conunetr/data/augment.hpp"
#include "conunetr/data/sample.hpp"
#include "conunetr/model/checkpoint.hpp"
#include "conunetr/model/embeddings.hpp"
#include "conunetr/nn/parameters.hpp"
#include "conunetr/tensor/ops.hpp"
#include "conunetr/tensor/rng.hpp"
#include "conunetr/tensor/tape.hpp"
#include "conunetr/train/adamw.hpp"
#include "conunetr/train/loss.hpp"
#include "conunetr/train/schedule.hpp"

namespace conunetr {

struct TrainRunConfig {
  std::int64_t epochs = 30;
  std::int64_t batch_size = 2;    // gradient-accumulation count; forwards stay single-slice
  std::uint64_t seed = 1;
  AugmentConfig augment;
  std::int64_t checkpoint_every = 0;  // epochs between checkpoints; 0 = final only
  bool deterministic = true;          // zeroes wall_seconds in logs

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("TrainRunConfig: epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("TrainRunConfig: batch_size must be >= 1");
    if (checkpoint_every < 0) {
      throw std::invalid_argument("TrainRunConfig: checkpoint cadence must be >= 0");
    }
  }
};

inline void to_json(nlohmann::json& j, const TrainRunConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"seed", c.seed},
                     {"augment", c.augment},
                     {"checkpoint_every", c.checkpoint_every},
                     {"deterministic", c.deterministic}};
}

inline void from_json(const nlohmann::json& j, TrainRunConfig& c) {
  if (j.contains("epochs")) j.at("epochs").get_to(c.epochs);
  if (j.contains("batch_size")) j.at("batch_size").get_to(c.batch_size);
  if (j.contains("seed")) j.at("seed").get_to(c.seed);
  if (j.contains("augment")) j.at("augment").get_to(c.augment);
  if (j.contains("checkpoint_every")) j.at("checkpoint_every").get_to(c.checkpoint_every);
  if (j.contains("deterministic")) j.at("deterministic").get_to(c.deterministic);
}

struct EpochLog {
  std::int64_t epoch = 0;
  double mean_loss = 0.0;
  double lr = 0.0;
  double wall_seconds = 0.0;
};

struct TrainResult {
  std::vector<EpochLog> log;
  std::filesystem::path final_checkpoint;
};

// Seed-stream tags so every stochastic choice is a pure function of
// (run seed, epoch, position).
inline constexpr std::uint64_t kShuffleStream = 11;
inline constexpr std::uint64_t kAugmentStream = 12;

// Generic single-slice training loop: the model is exposed as a logits
// callback plus its parameter list, so the transformer and the plain U-Net
// train through the same code. Batches are gradient accumulations over
// single-slice forwards; the optimizer steps once per batch with the
// epoch's cosine learning rate.
class Trainer {
 public:
  using ForwardFn =
      std::function<Tensor<float>(const Tensor<float>& image, int age_id, int loc)>;

  Trainer(ForwardFn forward, ParamList<float> params, AdamW<float>& opt,
          ScheduleConfig schedule, TrainRunConfig cfg, nlohmann::json model_config,
          std::filesystem::path out_dir)
      : forward_(std::move(forward)),
        params_(std::move(params)),
        opt_(opt),
        schedule_(schedule),
        cfg_(cfg),
        model_config_(std::move(model_config)),
        out_dir_(std::move(out_dir)) {
    cfg_.validate();
    schedule_.validate();
    if (schedule_.total_epochs != cfg_.epochs) {
      throw std::invalid_argument("Trainer: schedule total_epochs must equal run epochs");
    }
    std::filesystem::create_directories(out_dir_);
  }

  // Runs epochs [start_epoch, cfg.epochs). Pass the epoch stored in a
  // checkpoint to resume; the per-epoch seed streams make the continuation
  // identical to an uninterrupted run.
  TrainResult run(const std::vector<SliceSample>& samples, std::int64_t start_epoch = 0) {
    if (samples.empty()) throw std::invalid_argument("Trainer: no training samples");
    if (start_epoch < 0 || start_epoch > cfg_.epochs) {
      throw std::invalid_argument("Trainer: start epoch outside schedule");
    }
    TrainResult result;
    const std::filesystem::path log_path = out_dir_ / "train_log.csv";
    const bool fresh_log =
        !std::filesystem::exists(log_path) || std::filesystem::file_size(log_path) == 0;
    std::ofstream log_out(log_path, std::ios::app);
    if (!log_out) throw std::runtime_error("Trainer: cannot open training log");
    if (fresh_log) log_out << "epoch,mean_loss,lr,wall_seconds\n";

    for (std::int64_t epoch = start_epoch; epoch < cfg_.epochs; ++epoch) {
      const auto t0 = std::chrono::steady_clock::now();
      const double lr = cosine_lr(epoch, schedule_);

      std::vector<std::size_t> order(samples.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      Rng shuffle_rng(derive_seed(cfg_.seed, kShuffleStream, static_cast<std::uint64_t>(epoch)));
      shuffle_rng.shuffle(order);

      double loss_sum = 0.0;
      std::size_t pos = 0;
      while (pos < order.size()) {
        const std::size_t batch_n =
            std::min<std::size_t>(static_cast<std::size_t>(cfg_.batch_size),
                                  order.size() - pos);
        params_.zero_grad();
        for (std::size_t j = 0; j < batch_n; ++j, ++pos) {
          const SliceSample& raw = samples[order[pos]];
          const SliceSample s =
              augment(raw, cfg_.augment,
                      derive_seed(cfg_.seed, kAugmentStream, static_cast<std::uint64_t>(epoch),
                                  static_cast<std::uint64_t>(pos)));
          const std::int64_t h = s.image.shape().extent(1), w = s.image.shape().extent(2);
          const Tensor<float> image = reshape(s.image, Shape{1, 1, h, w});
          const Tensor<float> mask = reshape(s.mask, Shape{1, h, w});
          const int loc = map_slice_location(s.slice_index, s.total_slices);

          Tape<float> tape;
          RecordScope<float> scope(tape);
          const Tensor<float> logits = forward_(image, s.age_id, loc);
          const Tensor<float> loss = cross_entropy_loss(logits, mask);
          const double loss_value = static_cast<double>(loss.values()[0]);
          if (!std::isfinite(loss_value)) {
            float max_logit = 0.0f;
            for (const float v : logits.values()) max_logit = std::max(max_logit, std::abs(v));
            throw std::runtime_error(
                "Trainer: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                std::to_string(pos / static_cast<std::size_t>(cfg_.batch_size)) +
                ", max |logit| " + std::to_string(max_logit));
          }
          loss_sum += loss_value;
          tape.backward(scale(loss, 1.0f / static_cast<float>(batch_n)));
        }
        opt_.step(static_cast<float>(lr));
      }

      EpochLog entry;
      entry.epoch = epoch;
      entry.mean_loss = loss_sum / static_cast<double>(samples.size());
      entry.lr = lr;
      entry.wall_seconds =
          cfg_.deterministic
              ? 0.0
              : std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      result.log.push_back(entry);
      log_out << format_row(entry);
      log_out.flush();

      if (cfg_.checkpoint_every > 0 && (epoch + 1) % cfg_.checkpoint_every == 0 &&
          epoch + 1 < cfg_.epochs) {
        write_checkpoint(out_dir_ / ("ckpt_epoch" + std::to_string(epoch + 1) + ".bin"),
                         epoch + 1);
      }
    }

    result.final_checkpoint = out_dir_ / "ckpt_final.bin";
    write_checkpoint(result.final_checkpoint, cfg_.epochs);
    return result;
  }

 private:
  static std::string format_row(const EpochLog& e) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%lld,%.10g,%.10g,%.10g\n",
                  static_cast<long long>(e.epoch), e.mean_loss, e.lr, e.wall_seconds);
    return buf;
  }

  void write_checkpoint(const std::filesystem::path& path, std::int64_t next_epoch) const {
    const OptimizerSnapshot<float> snap = opt_.snapshot();
    save_checkpoint(path.string(), model_config_, params_, &snap, &next_epoch);
  }

  ForwardFn forward_;
  ParamList<float> params_;
  AdamW<float>& opt_;
  ScheduleConfig schedule_;
  TrainRunConfig cfg_;
  nlohmann::json model_config_;
  std::filesystem::path out_dir_;
};

}  // namespace conunetr
