#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "conunetr/data/dataset_io.hpp"
#include "conunetr/eval/evaluate.hpp"
#include "conunetr/eval/study.hpp"
#include "conunetr/model/checkpoint.hpp"
#include "conunetr/model/conunetr.hpp"
#include "conunetr/model/gradcheck_suite.hpp"
#include "conunetr/model/unet.hpp"
#include "conunetr/train/adamw.hpp"
#include "conunetr/train/trainer.hpp"

namespace conunetr::cli {

// A preset bundles model, training, schedule, and optimizer defaults plus the
// width of the plain U-Net used for parameter-count comparisons. `tiny` and
// `desk` are sized for CPU runs; `full` exists for parameter counting.
struct Preset {
  std::string name;
  ModelConfig model;
  TrainRunConfig train;
  ScheduleConfig schedule;
  AdamWConfig<float> optimizer;
  std::int64_t unet_base_width = 8;
};

inline Preset preset_from(const std::string& name) {
  Preset p;
  p.name = name;
  p.model = model_preset(name);
  if (name == "tiny") {
    p.train.epochs = 60;
    p.train.batch_size = 4;
    p.train.augment.crop_size = 64;
    p.schedule.lr_init = 1e-3;
    p.unet_base_width = 8;
  } else if (name == "desk") {
    p.train.epochs = 60;
    p.train.batch_size = 2;
    p.train.augment.crop_size = 128;
    p.schedule.lr_init = 1e-3;
    p.unet_base_width = 16;
  } else {  // "paper-full" (model_preset rejects anything else)
    p.train.epochs = 700;
    p.train.batch_size = 45;
    p.train.augment.crop_size = 512;
    p.schedule.lr_init = 1e-4;
    p.unet_base_width = 32;
  }
  p.schedule.total_epochs = p.train.epochs;
  return p;
}

namespace detail {

inline nlohmann::json load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot read config file: " + path);
  nlohmann::json j = nlohmann::json::parse(in, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded()) throw std::invalid_argument("config file is not valid JSON: " + path);
  if (!j.is_object()) throw std::invalid_argument("config file must hold a JSON object: " + path);
  return j;
}

// Applies one `--set dotted.key=value` override onto the effective config.
// The value is parsed as JSON when possible, else taken as a string.
inline void apply_override(nlohmann::json& root, const std::string& spec) {
  const std::size_t eq = spec.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw std::invalid_argument("--set expects dotted.key=value, got: " + spec);
  }
  const std::string key = spec.substr(0, eq);
  const std::string value = spec.substr(eq + 1);
  nlohmann::json* node = &root;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? dot : dot - start);
    if (part.empty()) throw std::invalid_argument("--set key has an empty segment: " + key);
    if (dot == std::string::npos) {
      nlohmann::json parsed = nlohmann::json::parse(value, nullptr, /*allow_exceptions=*/false);
      (*node)[part] = parsed.is_discarded() ? nlohmann::json(value) : parsed;
      return;
    }
    node = &((*node)[part]);
    start = dot + 1;
  }
}

inline void echo_config(const nlohmann::json& cfg, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  std::ofstream out(out_dir / "effective_config.json");
  if (!out) {
    throw std::runtime_error("cannot write effective config under " + out_dir.string());
  }
  out << cfg.dump(2) << '\n';
}

inline std::string format_g(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

// Shared flag set; every subcommand gets the same provenance controls.
struct CommonOpts {
  std::string preset = "desk";
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out;
  std::uint64_t seed = 0;
  bool seed_given = false;
  bool deterministic = false;
  bool verbose = false;
};

inline void add_common(CLI::App* cmd, CommonOpts& o, bool out_required = true) {
  cmd->add_option("--preset", o.preset, "configuration preset: tiny | desk | paper-full");
  cmd->add_option("--config", o.config_path, "JSON config file layered over the preset");
  cmd->add_option("--set", o.overrides, "dotted.key=value override (repeatable)");
  auto* out_opt = cmd->add_option("--out", o.out, "output directory");
  if (out_required) out_opt->required();
  cmd->add_option("--seed", o.seed, "master seed")->each([&o](const std::string&) {
    o.seed_given = true;
  });
  cmd->add_flag("--deterministic", o.deterministic,
                "deterministic mode: timing fields zeroed, bitwise-stable outputs");
  cmd->add_flag("--verbose", o.verbose, "print the effective config and progress");
}

// Layered effective config: preset defaults -> config file -> --set overrides.
inline nlohmann::json effective_config(const nlohmann::json& defaults, const CommonOpts& o) {
  nlohmann::json cfg = defaults;
  if (!o.config_path.empty()) cfg.merge_patch(load_config_file(o.config_path));
  for (const std::string& spec : o.overrides) apply_override(cfg, spec);
  return cfg;
}

struct LoadedModel {
  ModelConfig config;
  std::vector<int> trained_age_ids;
  std::unique_ptr<ConUNETR<float>> model;
};

inline LoadedModel load_model_checkpoint(const std::string& path) {
  const nlohmann::json cfg_json = read_checkpoint_config(path);
  if (!cfg_json.contains("model")) {
    throw std::runtime_error("checkpoint: config in " + path + " has no model section");
  }
  LoadedModel lm;
  lm.config = cfg_json.at("model").get<ModelConfig>();
  if (cfg_json.contains("trained_age_ids")) {
    cfg_json.at("trained_age_ids").get_to(lm.trained_age_ids);
  } else {
    for (int a = 0; a < lm.config.k_ages; ++a) lm.trained_age_ids.push_back(a);
  }
  lm.model = std::make_unique<ConUNETR<float>>(lm.config, 0);
  load_checkpoint<float>(path, lm.model->params());
  return lm;
}

struct TrainCohortOpts {
  std::vector<int> age_ids;        // empty: every age in the manifest
  std::vector<int> mutation_ids = {0};
  std::int64_t volumes_per_age = -1;
};

inline void to_json(nlohmann::json& j, const TrainCohortOpts& c) {
  j = nlohmann::json{{"age_ids", c.age_ids},
                     {"mutation_ids", c.mutation_ids},
                     {"volumes_per_age", c.volumes_per_age}};
}

inline void from_json(const nlohmann::json& j, TrainCohortOpts& c) {
  if (j.contains("age_ids")) j.at("age_ids").get_to(c.age_ids);
  if (j.contains("mutation_ids")) j.at("mutation_ids").get_to(c.mutation_ids);
  if (j.contains("volumes_per_age")) j.at("volumes_per_age").get_to(c.volumes_per_age);
}

inline int run_gen_data(const CommonOpts& o) {
  const nlohmann::json defaults{{"gen", GenConfig{}}};
  nlohmann::json cfg = effective_config(defaults, o);
  GenConfig gen = cfg.at("gen").get<GenConfig>();
  if (o.seed_given) gen.seed = o.seed;
  cfg["gen"] = gen;
  echo_config(cfg, o.out);
  if (o.verbose) std::cout << cfg.dump(2) << '\n';
  const DatasetManifest manifest = build_dataset(o.out, gen);
  std::cout << "dataset: " << manifest.volumes.size() << " volumes under " << o.out << '\n';
  return 0;
}

inline int run_train(const CommonOpts& o, const std::string& data_root,
                     const std::string& resume_path) {
  const Preset preset = preset_from(o.preset);
  nlohmann::json defaults{{"model", preset.model},
                          {"train", preset.train},
                          {"schedule", preset.schedule},
                          {"optimizer", preset.optimizer},
                          {"cohort", TrainCohortOpts{}}};
  nlohmann::json cfg = effective_config(defaults, o);

  ModelConfig mc = cfg.at("model").get<ModelConfig>();
  TrainRunConfig tc = cfg.at("train").get<TrainRunConfig>();
  ScheduleConfig sc = cfg.at("schedule").get<ScheduleConfig>();
  AdamWConfig<float> oc = cfg.at("optimizer").get<AdamWConfig<float>>();
  TrainCohortOpts cohort = cfg.at("cohort").get<TrainCohortOpts>();
  if (o.seed_given) tc.seed = o.seed;
  if (o.deterministic) tc.deterministic = true;
  sc.total_epochs = tc.epochs;

  const DatasetManifest manifest = read_manifest(data_root);
  if (cohort.age_ids.empty()) {
    std::set<int> ages;
    for (const auto& p : manifest.age_profiles) ages.insert(p.age_id);
    cohort.age_ids.assign(ages.begin(), ages.end());
  }
  std::vector<int> trained_ages = cohort.age_ids;
  std::sort(trained_ages.begin(), trained_ages.end());
  trained_ages.erase(std::unique(trained_ages.begin(), trained_ages.end()), trained_ages.end());
  mc.k_ages = static_cast<std::int64_t>(trained_ages.size());
  mc.validate();
  cfg["model"] = mc;
  cfg["train"] = tc;
  cfg["schedule"] = sc;
  cfg["cohort"] = cohort;
  echo_config(cfg, o.out);
  if (o.verbose) std::cout << cfg.dump(2) << '\n';

  std::vector<SliceSample> samples;
  std::int64_t used_volumes = 0;
  for (const int age : cohort.age_ids) {
    std::int64_t taken = 0;
    for (const VolumeRecord& rec : manifest.volumes) {
      if (rec.split != "train" || rec.age_id != age) continue;
      if (std::find(cohort.mutation_ids.begin(), cohort.mutation_ids.end(), rec.mutation_id) ==
          cohort.mutation_ids.end()) {
        continue;
      }
      if (cohort.volumes_per_age >= 0 && taken >= cohort.volumes_per_age) break;
      std::vector<SliceSample> vol = load_annotated_slices(data_root, manifest, rec);
      samples.insert(samples.end(), vol.begin(), vol.end());
      ++taken;
      ++used_volumes;
    }
    if (taken == 0) {
      throw std::invalid_argument("train: no train volumes for age " + std::to_string(age) +
                                  " in " + data_root);
    }
  }

  ConUNETR<float> model(mc, tc.seed);
  AdamW<float> opt(model.params(), oc);
  std::int64_t start_epoch = 0;
  if (!resume_path.empty()) {
    OptimizerSnapshot<float> snap;
    load_checkpoint<float>(resume_path, model.params(), &snap, &start_epoch);
    opt.restore(snap);
  }

  const nlohmann::json ckpt_config{{"model", mc}, {"trained_age_ids", trained_ages}};
  Trainer trainer(
      [&model, &trained_ages](const Tensor<float>& image, int age_id, int loc) {
        return model.forward_logits(image, nearest_age_token(trained_ages, age_id), loc);
      },
      model.params(), opt, sc, tc, ckpt_config, o.out);
  const TrainResult result = trainer.run(samples, start_epoch);
  std::cout << "trained " << (tc.epochs - start_epoch) << " epochs on " << samples.size()
            << " slices from " << used_volumes << " volumes; final checkpoint "
            << result.final_checkpoint.string() << '\n';
  return 0;
}

inline int run_eval(const CommonOpts& o, const std::string& data_root, const std::string& ckpt,
                    std::vector<int> age_ids, std::vector<int> mutation_ids) {
  LoadedModel lm = load_model_checkpoint(ckpt);
  const DatasetManifest manifest = read_manifest(data_root);
  nlohmann::json cfg{{"checkpoint", ckpt},
                     {"data", data_root},
                     {"model", lm.config},
                     {"trained_age_ids", lm.trained_age_ids},
                     {"age_ids", age_ids},
                     {"mutation_ids", mutation_ids}};
  echo_config(cfg, o.out);
  if (o.verbose) std::cout << cfg.dump(2) << '\n';

  ConUNETR<float>& model = *lm.model;
  Evaluator ev(
      [&model](const Tensor<float>& image, int token, int loc) {
        return model.forward_logits(image, token, loc);
      },
      lm.trained_age_ids);
  const EvalSummary summary = ev.evaluate(data_root, manifest, age_ids, mutation_ids);

  std::ofstream vol_out(std::filesystem::path(o.out) / "dice_volumes.csv");
  vol_out << "volume_id,age_id,mutation_id,dice\n";
  for (const DiceResult& r : summary.volumes) {
    vol_out << r.volume_id << ',' << r.age_id << ',' << r.mutation_id << ','
            << format_g(r.dice) << '\n';
  }
  std::ofstream age_out(std::filesystem::path(o.out) / "dice_age_means.csv");
  age_out << "age_id,mean_dice\n";
  for (const auto& [age, dice] : summary.age_group_mean) {
    age_out << age << ',' << format_g(dice) << '\n';
    std::cout << "age " << age << ": mean dice " << format_g(dice) << '\n';
  }
  return 0;
}

inline int run_infer(const CommonOpts& o, const std::string& data_root, const std::string& ckpt,
                     const std::string& volume_id, std::vector<std::int64_t> slices,
                     int age_override, int loc_override) {
  LoadedModel lm = load_model_checkpoint(ckpt);
  const DatasetManifest manifest = read_manifest(data_root);
  const VolumeRecord* rec = nullptr;
  for (const VolumeRecord& r : manifest.volumes) {
    if (r.volume_id == volume_id) {
      rec = &r;
      break;
    }
  }
  if (rec == nullptr) {
    throw std::invalid_argument("infer: volume " + volume_id + " not in manifest");
  }
  if (slices.empty()) slices = rec->annotated;

  nlohmann::json cfg{{"checkpoint", ckpt},   {"data", data_root},
                     {"volume_id", volume_id}, {"slices", slices},
                     {"age_id", age_override}, {"loc", loc_override}};
  echo_config(cfg, o.out);
  if (o.verbose) std::cout << cfg.dump(2) << '\n';

  for (const std::int64_t z : slices) {
    const SliceSample s = load_slice(data_root, manifest, *rec, z);
    const std::int64_t h = s.image.shape().extent(1), w = s.image.shape().extent(2);
    const int age_id = age_override >= 0 ? age_override : s.age_id;
    const int token = nearest_age_token(lm.trained_age_ids, age_id);
    const int loc =
        loc_override >= 1 ? loc_override : map_slice_location(s.slice_index, s.total_slices);
    const Tensor<float> logits =
        lm.model->forward_logits(reshape(s.image, Shape{1, 1, h, w}), token, loc);
    const Tensor<float> pred = binarize_prediction(logits);
    const std::filesystem::path path =
        std::filesystem::path(o.out) / ("pred_" + volume_id + "_" + std::to_string(z) + ".u8");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("infer: cannot write " + path.string());
    std::vector<std::uint8_t> bytes(static_cast<std::size_t>(pred.numel()));
    for (std::size_t i = 0; i < bytes.size(); ++i) {
      bytes[i] = pred.values()[i] != 0.0f ? 1 : 0;
    }
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    std::cout << "wrote " << path.string() << " (" << h << "x" << w << ")\n";
  }
  return 0;
}

inline int run_study(const CommonOpts& o, const std::string& data_root,
                     const std::string& kind_flag) {
  const Preset preset = preset_from(o.preset);
  StudyConfig base;
  base.model = preset.model;
  base.train = preset.train;
  base.schedule = preset.schedule;
  base.optimizer = preset.optimizer;
  nlohmann::json cfg = effective_config(nlohmann::json(base), o);
  if (!kind_flag.empty()) cfg["kind"] = kind_flag;
  StudyConfig sc = cfg.get<StudyConfig>();
  if (o.seed_given) sc.seed = o.seed;
  if (o.deterministic) sc.train.deterministic = true;
  cfg = nlohmann::json(sc);
  echo_config(cfg, o.out);
  if (o.verbose) std::cout << cfg.dump(2) << '\n';

  StudyRunner runner(data_root, sc, std::filesystem::path(o.out) / "runs");
  const StudyReport report = runner.run();
  emit_report(report, o.out);
  std::size_t failed = 0;
  for (const StudyCell& c : report.cells) failed += c.failed() ? 1 : 0;
  std::cout << "study " << to_string(report.kind) << ": " << report.cells.size() << " cells, "
            << failed << " failed; report under " << o.out << '\n';
  return failed == 0 ? 0 : 2;
}

inline int run_gradcheck(const CommonOpts& o) {
  const Preset preset = preset_from(o.preset);
  std::vector<GradCheckRow> rows = op_gradcheck_suite<float>(1e-3, o.seed);
  for (GradCheckRow& r : rows) r.op += " (f32)";
  std::vector<GradCheckRow> rows64 = op_gradcheck_suite<double>(1e-6, o.seed);
  for (GradCheckRow& r : rows64) r.op += " (f64)";
  rows.insert(rows.end(), rows64.begin(), rows64.end());
  ModelConfig mc = preset.model;
  rows.push_back(conunetr_gradcheck(mc, 1e-3, o.seed));

  bool all_ok = true;
  std::printf("%-36s %12s %9s %7s %s\n", "op", "max_rel_err", "tol", "coords", "status");
  for (const GradCheckRow& r : rows) {
    std::printf("%-36s %12.3e %9.0e %7lld %s\n", r.op.c_str(), r.max_rel_err, r.tol,
                static_cast<long long>(r.coords), r.ok ? "ok" : "FAIL");
    all_ok = all_ok && r.ok;
  }
  if (!o.out.empty()) {
    echo_config(nlohmann::json{{"preset", o.preset}, {"seed", o.seed}}, o.out);
    std::ofstream csv(std::filesystem::path(o.out) / "gradcheck.csv");
    csv << "op,max_rel_err,tol,coords,status\n";
    for (const GradCheckRow& r : rows) {
      csv << r.op << ',' << format_g(r.max_rel_err) << ',' << format_g(r.tol) << ',' << r.coords
          << ',' << (r.ok ? "ok" : "fail") << '\n';
    }
  }
  return all_ok ? 0 : 2;
}

inline int run_params(const CommonOpts& o) {
  const Preset preset = preset_from(o.preset);
  ConUNETR<float> model(preset.model, 0);
  const auto groups = count_parameters(model.params());
  std::printf("%-24s %12s\n", "component", "parameters");
  for (const auto& [name, count] : groups) {
    std::printf("%-24s %12lld\n", name.c_str(), static_cast<long long>(count));
  }
  UNet<float> unet(preset.model.in_channels, preset.model.num_classes, preset.unet_base_width, 0);
  const std::int64_t unet_total = unet.params().total_count();
  std::printf("%-24s %12lld\n", "unet_baseline", static_cast<long long>(unet_total));
  if (!o.out.empty()) {
    echo_config(nlohmann::json{{"preset", o.preset}}, o.out);
    std::ofstream csv(std::filesystem::path(o.out) / "params.csv");
    csv << "component,parameters\n";
    for (const auto& [name, count] : groups) csv << name << ',' << count << '\n';
    csv << "unet_baseline," << unet_total << '\n';
  }
  return 0;
}

}  // namespace detail

// Parses argv (without the program name) and runs the chosen subcommand.
// Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.
inline int dispatch(std::vector<std::string> args) {
  CLI::App app{"conditional transformer segmentation workbench"};
  app.require_subcommand(1);

  detail::CommonOpts gen_o, train_o, eval_o, infer_o, study_o, grad_o, params_o;
  std::string train_data, train_resume;
  std::string eval_data, eval_ckpt;
  std::vector<int> eval_ages, eval_muts;
  std::string infer_data, infer_ckpt, infer_volume;
  std::vector<std::int64_t> infer_slices;
  int infer_age = -1, infer_loc = 0;
  std::string study_data, study_kind;

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic phantom dataset");
  detail::add_common(gen, gen_o);

  CLI::App* train = app.add_subcommand("train", "train the conditional model");
  detail::add_common(train, train_o);
  train->add_option("--data", train_data, "dataset root directory")->required();
  train->add_option("--resume", train_resume, "checkpoint to resume from");

  CLI::App* evalc = app.add_subcommand("eval", "score a checkpoint on test volumes");
  detail::add_common(evalc, eval_o);
  evalc->add_option("--data", eval_data, "dataset root directory")->required();
  evalc->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
  evalc->add_option("--ages", eval_ages, "age ids to evaluate (default: all)");
  evalc->add_option("--mutations", eval_muts, "mutation ids to evaluate (default: all)");

  CLI::App* infer = app.add_subcommand("infer", "predict masks for dataset slices");
  detail::add_common(infer, infer_o);
  infer->add_option("--data", infer_data, "dataset root directory")->required();
  infer->add_option("--ckpt", infer_ckpt, "checkpoint file")->required();
  infer->add_option("--volume-id", infer_volume, "volume to predict")->required();
  infer->add_option("--slice", infer_slices, "slice indices (default: annotated slices)");
  infer->add_option("--age-id", infer_age, "override the conditioning age id");
  infer->add_option("--loc", infer_loc, "override the mapped slice location (1..100)");

  CLI::App* study = app.add_subcommand("study", "run a train/evaluate study matrix");
  detail::add_common(study, study_o);
  study->add_option("--data", study_data, "dataset root directory")->required();
  study->add_option("--kind", study_kind,
                    "individual | joint | cross_mutation | data_scaling | ablation");

  CLI::App* grad = app.add_subcommand("gradcheck", "finite-difference gradient battery");
  detail::add_common(grad, grad_o, /*out_required=*/false);

  CLI::App* params = app.add_subcommand("params", "per-component parameter counts");
  detail::add_common(params, params_o, /*out_required=*/false);

  try {
    std::vector<const char*> argv;
    argv.push_back("conunetr");
    for (const std::string& a : args) argv.push_back(a.c_str());
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) return detail::run_gen_data(gen_o);
    if (train->parsed()) return detail::run_train(train_o, train_data, train_resume);
    if (evalc->parsed()) return detail::run_eval(eval_o, eval_data, eval_ckpt, eval_ages, eval_muts);
    if (infer->parsed()) {
      return detail::run_infer(infer_o, infer_data, infer_ckpt, infer_volume, infer_slices,
                               infer_age, infer_loc);
    }
    if (study->parsed()) return detail::run_study(study_o, study_data, study_kind);
    if (grad->parsed()) return detail::run_gradcheck(grad_o);
    if (params->parsed()) return detail::run_params(params_o);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}

}  // namespace conunetr::cli
