#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "conunetr/data/dataset_io.hpp"
#include "conunetr/data/sample.hpp"
#include "conunetr/eval/dice.hpp"
#include "conunetr/model/embeddings.hpp"
#include "conunetr/tensor/ops.hpp"

namespace conunetr {

struct DiceResult {
  std::string volume_id;
  int age_id = 0;
  int mutation_id = 0;
  double dice = 0.0;
};

struct EvalSummary {
  std::vector<DiceResult> volumes;
  std::map<int, double> age_group_mean;  // age id -> mean of its volumes' dice
};

// Maps an age id to the conditioning token of the nearest age the model was
// trained on (ties break toward the lower id). Trained ages map to their own
// token, so this is the identity when the test age was in the training set.
inline int nearest_age_token(const std::vector<int>& trained_age_ids, int age_id) {
  if (trained_age_ids.empty()) {
    throw std::invalid_argument("nearest_age_token: empty trained-age list");
  }
  int best_token = 0;
  int best_dist = std::abs(trained_age_ids[0] - age_id);
  int best_age = trained_age_ids[0];
  for (std::size_t i = 1; i < trained_age_ids.size(); ++i) {
    const int dist = std::abs(trained_age_ids[i] - age_id);
    if (dist < best_dist || (dist == best_dist && trained_age_ids[i] < best_age)) {
      best_dist = dist;
      best_age = trained_age_ids[i];
      best_token = static_cast<int>(i);
    }
  }
  return best_token;
}

// Scores a model on test volumes: every annotated slice of a volume is
// predicted, binarized, and pooled into one dice per volume; volumes are then
// averaged within each age group. The model is a logits callback
// (image [1,1,H,W], conditioning token, mapped slice location) so evaluation
// is architecture-agnostic.
class Evaluator {
 public:
  using ForwardFn =
      std::function<Tensor<float>(const Tensor<float>& image, int token_id, int loc)>;

  Evaluator(ForwardFn forward, std::vector<int> trained_age_ids)
      : forward_(std::move(forward)), trained_age_ids_(std::move(trained_age_ids)) {}

  DiceResult evaluate_volume(const std::filesystem::path& root, const DatasetManifest& manifest,
                             const VolumeRecord& rec) const {
    const std::vector<SliceSample> slices = load_annotated_slices(root, manifest, rec);
    DicePool pool;
    for (const SliceSample& s : slices) {
      const std::int64_t h = s.image.shape().extent(1), w = s.image.shape().extent(2);
      const Tensor<float> image = reshape(s.image, Shape{1, 1, h, w});
      const int token = nearest_age_token(trained_age_ids_, s.age_id);
      const int loc = map_slice_location(s.slice_index, s.total_slices);
      const Tensor<float> logits = forward_(image, token, loc);
      const Tensor<float> pred = reshape(binarize_prediction(logits), s.mask.shape());
      pool.add(pred, s.mask);
    }
    DiceResult r;
    r.volume_id = rec.volume_id;
    r.age_id = rec.age_id;
    r.mutation_id = rec.mutation_id;
    r.dice = pool.score();
    return r;
  }

  // Evaluates every test-split volume matching the age/mutation filters
  // (empty filter = accept all).
  EvalSummary evaluate(const std::filesystem::path& root, const DatasetManifest& manifest,
                       const std::vector<int>& age_ids,
                       const std::vector<int>& mutation_ids) const {
    EvalSummary summary;
    std::map<int, std::pair<double, int>> by_age;
    for (const VolumeRecord& rec : manifest.volumes) {
      if (rec.split != "test") continue;
      if (!age_ids.empty() &&
          std::find(age_ids.begin(), age_ids.end(), rec.age_id) == age_ids.end()) {
        continue;
      }
      if (!mutation_ids.empty() && std::find(mutation_ids.begin(), mutation_ids.end(),
                                             rec.mutation_id) == mutation_ids.end()) {
        continue;
      }
      const DiceResult r = evaluate_volume(root, manifest, rec);
      by_age[r.age_id].first += r.dice;
      by_age[r.age_id].second += 1;
      summary.volumes.push_back(r);
    }
    if (summary.volumes.empty()) {
      throw std::runtime_error("Evaluator: no test volumes match the requested cohorts");
    }
    for (const auto& [age, acc] : by_age) {
      summary.age_group_mean[age] = acc.first / static_cast<double>(acc.second);
    }
    return summary;
  }

 private:
  ForwardFn forward_;
  std::vector<int> trained_age_ids_;
};

}  // namespace conunetr
