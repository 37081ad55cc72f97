#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "conunetr/data/dataset_io.hpp"
#include "conunetr/eval/evaluate.hpp"
#include "conunetr/model/conunetr.hpp"
#include "conunetr/tensor/rng.hpp"
#include "conunetr/train/adamw.hpp"
#include "conunetr/train/schedule.hpp"
#include "conunetr/train/trainer.hpp"

namespace conunetr {

enum class StudyKind { individual, joint, cross_mutation, data_scaling, ablation };

inline std::string to_string(StudyKind k) {
  switch (k) {
    case StudyKind::individual: return "individual";
    case StudyKind::joint: return "joint";
    case StudyKind::cross_mutation: return "cross_mutation";
    case StudyKind::data_scaling: return "data_scaling";
    case StudyKind::ablation: return "ablation";
  }
  throw std::logic_error("unknown StudyKind");
}

inline StudyKind study_kind_from(const std::string& s) {
  if (s == "individual") return StudyKind::individual;
  if (s == "joint") return StudyKind::joint;
  if (s == "cross_mutation") return StudyKind::cross_mutation;
  if (s == "data_scaling") return StudyKind::data_scaling;
  if (s == "ablation") return StudyKind::ablation;
  throw std::invalid_argument("unknown study kind: " + s);
}

struct StudyVariant {
  ConditioningMode conditioning = ConditioningMode::age_token;
  SpatialMode spatial = SpatialMode::sinusoid;

  std::string name() const {
    return "cond=" + to_string(conditioning) + "+spatial=" + to_string(spatial);
  }
};

inline void to_json(nlohmann::json& j, const StudyVariant& v) {
  j = nlohmann::json{{"conditioning", to_string(v.conditioning)},
                     {"spatial", to_string(v.spatial)}};
}

inline void from_json(const nlohmann::json& j, StudyVariant& v) {
  if (j.contains("conditioning")) {
    v.conditioning = conditioning_mode_from(j.at("conditioning").get<std::string>());
  }
  if (j.contains("spatial")) v.spatial = spatial_mode_from(j.at("spatial").get<std::string>());
}

struct StudyCohort {
  std::vector<int> age_ids;
  std::vector<int> mutation_ids = {0};
  std::int64_t volumes_per_age = -1;  // -1 = every train volume of the age

  void validate() const {
    if (age_ids.empty()) throw std::invalid_argument("StudyCohort: empty age list");
    if (mutation_ids.empty()) throw std::invalid_argument("StudyCohort: empty mutation list");
    if (volumes_per_age == 0 || volumes_per_age < -1) {
      throw std::invalid_argument("StudyCohort: volumes_per_age must be -1 or positive");
    }
  }

  std::string name() const {
    std::string s = "ages=";
    for (std::size_t i = 0; i < age_ids.size(); ++i) {
      if (i) s += '+';
      s += std::to_string(age_ids[i]);
    }
    s += "|mut=";
    for (std::size_t i = 0; i < mutation_ids.size(); ++i) {
      if (i) s += '+';
      s += std::to_string(mutation_ids[i]);
    }
    s += "|vols=" + (volumes_per_age < 0 ? std::string("all") : std::to_string(volumes_per_age));
    return s;
  }
};

inline void to_json(nlohmann::json& j, const StudyCohort& c) {
  j = nlohmann::json{{"age_ids", c.age_ids},
                     {"mutation_ids", c.mutation_ids},
                     {"volumes_per_age", c.volumes_per_age}};
}

inline void from_json(const nlohmann::json& j, StudyCohort& c) {
  if (j.contains("age_ids")) j.at("age_ids").get_to(c.age_ids);
  if (j.contains("mutation_ids")) j.at("mutation_ids").get_to(c.mutation_ids);
  if (j.contains("volumes_per_age")) j.at("volumes_per_age").get_to(c.volumes_per_age);
}

struct StudyConfig {
  StudyKind kind = StudyKind::individual;
  std::vector<StudyCohort> train_cohorts;  // empty: derived from kind and test ages
  std::vector<int> test_age_ids;           // empty: every age in the manifest
  std::vector<int> test_mutation_ids = {0};
  std::vector<StudyVariant> variants = {StudyVariant{}};
  int repetitions = 3;
  std::uint64_t seed = 1;
  std::vector<std::int64_t> volume_counts;  // data_scaling sweep
  ModelConfig model;
  TrainRunConfig train;
  ScheduleConfig schedule;
  AdamWConfig<float> optimizer;

  void validate() const {
    if (repetitions < 1) throw std::invalid_argument("StudyConfig: repetitions must be >= 1");
    if (variants.empty()) throw std::invalid_argument("StudyConfig: no model variants");
    for (const auto& c : train_cohorts) c.validate();
    if (kind == StudyKind::data_scaling && volume_counts.empty()) {
      throw std::invalid_argument("StudyConfig: data_scaling study needs volume_counts");
    }
    train.validate();
  }
};

inline void to_json(nlohmann::json& j, const StudyConfig& c) {
  j = nlohmann::json{{"kind", to_string(c.kind)},
                     {"train_cohorts", c.train_cohorts},
                     {"test_age_ids", c.test_age_ids},
                     {"test_mutation_ids", c.test_mutation_ids},
                     {"variants", c.variants},
                     {"repetitions", c.repetitions},
                     {"seed", c.seed},
                     {"volume_counts", c.volume_counts},
                     {"model", c.model},
                     {"train", c.train},
                     {"schedule", c.schedule},
                     {"optimizer", c.optimizer}};
}

inline void from_json(const nlohmann::json& j, StudyConfig& c) {
  if (j.contains("kind")) c.kind = study_kind_from(j.at("kind").get<std::string>());
  if (j.contains("train_cohorts")) j.at("train_cohorts").get_to(c.train_cohorts);
  if (j.contains("test_age_ids")) j.at("test_age_ids").get_to(c.test_age_ids);
  if (j.contains("test_mutation_ids")) j.at("test_mutation_ids").get_to(c.test_mutation_ids);
  if (j.contains("variants")) j.at("variants").get_to(c.variants);
  if (j.contains("repetitions")) j.at("repetitions").get_to(c.repetitions);
  if (j.contains("seed")) j.at("seed").get_to(c.seed);
  if (j.contains("volume_counts")) j.at("volume_counts").get_to(c.volume_counts);
  if (j.contains("model")) j.at("model").get_to(c.model);
  if (j.contains("train")) j.at("train").get_to(c.train);
  if (j.contains("schedule")) j.at("schedule").get_to(c.schedule);
  if (j.contains("optimizer")) j.at("optimizer").get_to(c.optimizer);
}

// One (variant, train cohort, test age) cell of a study table, holding the
// per-repetition age-group dice means.
struct StudyCell {
  std::string variant;
  std::string train_cohort;
  int test_age_id = 0;
  std::int64_t train_volumes = 0;
  std::vector<double> run_dice;
  int failed_runs = 0;

  bool failed() const { return run_dice.empty(); }

  double mean() const {
    if (run_dice.empty()) throw std::logic_error("StudyCell: mean of failed cell");
    double s = 0.0;
    for (const double d : run_dice) s += d;
    return s / static_cast<double>(run_dice.size());
  }

  // Sample standard deviation across runs; 0 for a single run.
  double sd() const {
    if (run_dice.empty()) throw std::logic_error("StudyCell: sd of failed cell");
    if (run_dice.size() < 2) return 0.0;
    const double m = mean();
    double s = 0.0;
    for (const double d : run_dice) s += (d - m) * (d - m);
    return std::sqrt(s / static_cast<double>(run_dice.size() - 1));
  }
};

struct StudyReport {
  StudyKind kind = StudyKind::individual;
  std::vector<StudyCell> cells;

  const StudyCell* find(const std::string& variant, const std::string& cohort,
                        int test_age_id) const {
    for (const StudyCell& c : cells) {
      if (c.variant == variant && c.train_cohort == cohort && c.test_age_id == test_age_id) {
        return &c;
      }
    }
    return nullptr;
  }
};

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

}  // namespace detail

// Executes a study's train/evaluate matrix over the repetition seeds and
// assembles the report. Each repetition trains a fresh model on the cohort's
// volumes and scores it on every test age group; a training failure marks the
// run's cells and the study continues.
class StudyRunner {
 public:
  StudyRunner(std::filesystem::path dataset_root, StudyConfig cfg,
              std::filesystem::path out_dir)
      : root_(std::move(dataset_root)), cfg_(std::move(cfg)), out_dir_(std::move(out_dir)) {
    cfg_.validate();
    manifest_ = read_manifest(root_);
    std::filesystem::create_directories(out_dir_);
  }

  StudyReport run() {
    check_extents();
    const std::vector<int> test_ages = resolve_test_ages();
    const std::vector<int> test_muts = resolve_test_mutations();
    const std::vector<StudyCohort> cohorts = resolve_cohorts(test_ages);

    StudyReport report;
    report.kind = cfg_.kind;
    // Pre-create every cell so failed runs still appear in the report.
    for (std::size_t vi = 0; vi < cfg_.variants.size(); ++vi) {
      for (std::size_t ci = 0; ci < cohorts.size(); ++ci) {
        for (const int age : test_ages) {
          StudyCell cell;
          cell.variant = cfg_.variants[vi].name();
          cell.train_cohort = cohorts[ci].name();
          cell.test_age_id = age;
          report.cells.push_back(cell);
        }
      }
    }

    for (std::size_t vi = 0; vi < cfg_.variants.size(); ++vi) {
      for (std::size_t ci = 0; ci < cohorts.size(); ++ci) {
        const StudyCohort& cohort = cohorts[ci];
        const std::vector<const VolumeRecord*> train_vols = select_train_volumes(cohort);
        std::int64_t n_train = static_cast<std::int64_t>(train_vols.size());
        for (StudyCell& cell : report.cells) {
          if (cell.variant == cfg_.variants[vi].name() &&
              cell.train_cohort == cohort.name()) {
            cell.train_volumes = n_train;
          }
        }
        for (int rep = 0; rep < cfg_.repetitions; ++rep) {
          const std::uint64_t run_seed =
              derive_seed(cfg_.seed, 1000 * (vi + 1) + ci + 1, static_cast<std::uint64_t>(rep + 1));
          const std::filesystem::path run_dir =
              out_dir_ / ("run_v" + std::to_string(vi) + "_c" + std::to_string(ci) + "_r" +
                          std::to_string(rep));
          std::filesystem::create_directories(run_dir);
          try {
            const EvalSummary summary = train_and_evaluate(
                cfg_.variants[vi], cohort, train_vols, test_ages, test_muts, run_seed, run_dir);
            for (const auto& [age, dice] : summary.age_group_mean) {
              StudyCell* cell = find_mutable(report, cfg_.variants[vi].name(), cohort.name(), age);
              if (cell) cell->run_dice.push_back(dice);
            }
          } catch (const std::exception& e) {
            std::ofstream(run_dir / "failed.txt") << e.what() << '\n';
            for (StudyCell& cell : report.cells) {
              if (cell.variant == cfg_.variants[vi].name() &&
                  cell.train_cohort == cohort.name()) {
                ++cell.failed_runs;
              }
            }
          }
        }
      }
    }
    return report;
  }

  const DatasetManifest& manifest() const { return manifest_; }

 private:
  static StudyCell* find_mutable(StudyReport& r, const std::string& variant,
                                 const std::string& cohort, int age) {
    for (StudyCell& c : r.cells) {
      if (c.variant == variant && c.train_cohort == cohort && c.test_age_id == age) return &c;
    }
    return nullptr;
  }

  void check_extents() const {
    const std::int64_t train_extent =
        cfg_.train.augment.random_crop ? cfg_.train.augment.crop_size : manifest_.height;
    if (train_extent != cfg_.model.img_size || manifest_.height != manifest_.width) {
      throw std::invalid_argument(
          "study: model img_size " + std::to_string(cfg_.model.img_size) +
          " incompatible with training extent " + std::to_string(train_extent) + " (dataset " +
          std::to_string(manifest_.height) + "x" + std::to_string(manifest_.width) + ")");
    }
    if (manifest_.height != cfg_.model.img_size) {
      throw std::invalid_argument(
          "study: evaluation slices are " + std::to_string(manifest_.height) +
          "px but the model expects " + std::to_string(cfg_.model.img_size) +
          "px; train without cropping below the slice size");
    }
  }

  std::vector<int> resolve_test_ages() const {
    if (!cfg_.test_age_ids.empty()) return cfg_.test_age_ids;
    std::set<int> ages;
    for (const auto& p : manifest_.age_profiles) ages.insert(p.age_id);
    return {ages.begin(), ages.end()};
  }

  std::vector<int> resolve_test_mutations() const {
    if (cfg_.kind != StudyKind::cross_mutation) return cfg_.test_mutation_ids;
    if (cfg_.test_mutation_ids.size() != 1 || cfg_.test_mutation_ids[0] != 0) {
      return cfg_.test_mutation_ids;
    }
    // Cross-mutation default: every held-out (non-training) mutation profile.
    std::set<int> muts;
    for (const auto& m : manifest_.mutation_profiles) {
      if (m.mutation_id != 0) muts.insert(m.mutation_id);
    }
    if (muts.empty()) {
      throw std::invalid_argument("study: cross_mutation needs a held-out mutation profile");
    }
    return {muts.begin(), muts.end()};
  }

  std::vector<StudyCohort> resolve_cohorts(const std::vector<int>& test_ages) const {
    if (!cfg_.train_cohorts.empty() && cfg_.kind != StudyKind::data_scaling) {
      return cfg_.train_cohorts;
    }
    std::vector<StudyCohort> cohorts;
    if (cfg_.kind == StudyKind::individual) {
      for (const int age : test_ages) {
        StudyCohort c;
        c.age_ids = {age};
        cohorts.push_back(c);
      }
      return cohorts;
    }
    StudyCohort base;
    if (!cfg_.train_cohorts.empty()) base = cfg_.train_cohorts.front();
    if (base.age_ids.empty()) base.age_ids = test_ages;
    if (cfg_.kind == StudyKind::data_scaling) {
      for (const std::int64_t n : cfg_.volume_counts) {
        StudyCohort c = base;
        c.volumes_per_age = n;
        cohorts.push_back(c);
      }
      return cohorts;
    }
    cohorts.push_back(base);  // joint, ablation, cross_mutation
    return cohorts;
  }

  std::vector<const VolumeRecord*> select_train_volumes(const StudyCohort& cohort) const {
    std::vector<const VolumeRecord*> picked;
    for (const int age : cohort.age_ids) {
      std::int64_t taken = 0;
      for (const VolumeRecord& rec : manifest_.volumes) {
        if (rec.split != "train" || rec.age_id != age) continue;
        if (std::find(cohort.mutation_ids.begin(), cohort.mutation_ids.end(),
                      rec.mutation_id) == cohort.mutation_ids.end()) {
          continue;
        }
        if (cohort.volumes_per_age >= 0 && taken >= cohort.volumes_per_age) break;
        picked.push_back(&rec);
        ++taken;
      }
      if (taken == 0) {
        throw std::runtime_error("study: no train volumes for age " + std::to_string(age) +
                                 " in cohort " + cohort.name());
      }
    }
    return picked;
  }

  EvalSummary train_and_evaluate(const StudyVariant& variant, const StudyCohort& cohort,
                                 const std::vector<const VolumeRecord*>& train_vols,
                                 const std::vector<int>& test_ages,
                                 const std::vector<int>& test_muts, std::uint64_t run_seed,
                                 const std::filesystem::path& run_dir) const {
    std::vector<int> trained_ages = cohort.age_ids;
    std::sort(trained_ages.begin(), trained_ages.end());
    trained_ages.erase(std::unique(trained_ages.begin(), trained_ages.end()),
                       trained_ages.end());

    ModelConfig mc = cfg_.model;
    mc.conditioning_mode = variant.conditioning;
    mc.spatial_mode = variant.spatial;
    mc.k_ages = static_cast<std::int64_t>(trained_ages.size());
    mc.validate();

    std::vector<SliceSample> samples;
    for (const VolumeRecord* rec : train_vols) {
      std::vector<SliceSample> vol = load_annotated_slices(root_, manifest_, *rec);
      samples.insert(samples.end(), vol.begin(), vol.end());
    }

    ConUNETR<float> model(mc, run_seed);
    AdamW<float> opt(model.params(), cfg_.optimizer);
    TrainRunConfig tc = cfg_.train;
    tc.seed = run_seed;
    ScheduleConfig sc = cfg_.schedule;
    sc.total_epochs = tc.epochs;

    const nlohmann::json ckpt_config{{"model", mc}, {"trained_age_ids", trained_ages}};
    Trainer trainer(
        [&model, &trained_ages](const Tensor<float>& image, int age_id, int loc) {
          return model.forward_logits(image, nearest_age_token(trained_ages, age_id), loc);
        },
        model.params(), opt, sc, tc, ckpt_config, run_dir);
    trainer.run(samples);

    Evaluator ev(
        [&model](const Tensor<float>& image, int token, int loc) {
          return model.forward_logits(image, token, loc);
        },
        trained_ages);
    return ev.evaluate(root_, manifest_, test_ages, test_muts);
  }

  std::filesystem::path root_;
  StudyConfig cfg_;
  std::filesystem::path out_dir_;
  DatasetManifest manifest_;
};

// Writes the study table as CSV (one row per cell, failed cells flagged);
// a data-scaling study additionally emits per-variant
// (train_volumes, mean_dice) series for plotting.
inline void emit_report(const StudyReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::filesystem::path table_path = dir / ("study_" + to_string(report.kind) + ".csv");
  std::ofstream out(table_path);
  if (!out) throw std::runtime_error("emit_report: cannot write " + table_path.string());
  out << "variant,train_cohort,test_age,mean_dice,sd,n_runs,status\n";
  for (const StudyCell& c : report.cells) {
    out << c.variant << ',' << c.train_cohort << ',' << c.test_age_id << ',';
    if (c.failed()) {
      out << ",,0,failed\n";
    } else {
      out << detail::format_double(c.mean()) << ',' << detail::format_double(c.sd()) << ','
          << c.run_dice.size() << ",ok\n";
    }
  }
  out.close();

  if (report.kind != StudyKind::data_scaling) return;
  // Collect (train_volumes -> mean over ages) per variant, in cell order.
  std::vector<std::string> variant_order;
  for (const StudyCell& c : report.cells) {
    if (std::find(variant_order.begin(), variant_order.end(), c.variant) ==
        variant_order.end()) {
      variant_order.push_back(c.variant);
    }
  }
  for (std::size_t vi = 0; vi < variant_order.size(); ++vi) {
    const std::string& variant = variant_order[vi];
    std::vector<std::pair<std::int64_t, std::pair<double, int>>> series;
    for (const StudyCell& c : report.cells) {
      if (c.variant != variant || c.failed()) continue;
      auto it = std::find_if(series.begin(), series.end(),
                             [&](const auto& s) { return s.first == c.train_volumes; });
      if (it == series.end()) {
        series.push_back({c.train_volumes, {c.mean(), 1}});
      } else {
        it->second.first += c.mean();
        it->second.second += 1;
      }
    }
    const std::filesystem::path series_path =
        dir / ("scaling_variant" + std::to_string(vi) + ".csv");
    std::ofstream sout(series_path);
    if (!sout) throw std::runtime_error("emit_report: cannot write " + series_path.string());
    sout << "train_volumes,mean_dice\n";
    for (const auto& [vols, acc] : series) {
      sout << vols << ',' << detail::format_double(acc.first / acc.second) << '\n';
    }
  }
}

}  // namespace conunetr
