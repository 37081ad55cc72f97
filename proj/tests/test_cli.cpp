// Command-line surface: subcommand dispatch and exit codes, config layering
// (preset -> file -> --set), dataset generation, the train/eval/infer round
// trip, study runs, and parameter-count reporting.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "conunetr/cli/cli.hpp"

namespace fs = std::filesystem;
using namespace conunetr;

namespace {

int run(std::vector<std::string> args) { return cli::dispatch(std::move(args)); }

fs::path fresh_dir(const std::string& leaf) {
  const fs::path dir = fs::temp_directory_path() / "conunetr_cli_tests" / leaf;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(static_cast<bool>(in));
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::vector<std::string> lines_of(const fs::path& p) {
  std::vector<std::string> lines;
  std::ifstream in(p);
  REQUIRE(static_cast<bool>(in));
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

fs::path write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  out << j.dump(2) << '\n';
  return path;
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  REQUIRE(static_cast<bool>(in));
  return nlohmann::json::parse(in);
}

// A two-volume (one train, one test) single-age phantom set for pipeline tests.
GenConfig micro_gen() {
  GenConfig g;
  g.height = g.width = 64;
  g.total_slices = 20;
  g.train_volumes_per_age = 1;
  g.test_volumes_per_age = 1;
  g.ages = {default_age_profiles()[0]};
  g.mutations = {identity_mutation()};
  g.seed = 5;
  return g;
}

// Shrinks the tiny preset's transformer to a few-thousand-parameter model.
const std::vector<std::string> kMicroSets = {
    "--set", "model.d_model=8",           "--set", "model.heads=2",
    "--set", "model.decoder_channels=[8,8,8,8]", "--set", "model.mlp_ratio=2",
    "--set", "train.epochs=2",            "--set", "train.batch_size=2"};

std::vector<std::string> with_micro(std::vector<std::string> args) {
  args.insert(args.end(), kMicroSets.begin(), kMicroSets.end());
  return args;
}

}  // namespace

TEST_CASE("dispatch: usage errors exit 1, help exits 0") {
  const std::string out = fresh_dir("usage").string();
  CHECK(run({}) == 1);                      // a subcommand is required
  CHECK(run({"frobnicate"}) == 1);          // unknown subcommand
  CHECK(run({"--help"}) == 0);
  CHECK(run({"gen-data"}) == 1);            // --out is required
  CHECK(run({"train", "--out", out}) == 1); // --data is required
  CHECK(run({"params", "--preset", "bogus"}) == 1);
  CHECK(run({"gen-data", "--out", out, "--config", out + "/absent.json"}) == 1);

  const fs::path bad = fs::path(out) / "bad.json";
  std::ofstream(bad) << "not json";
  CHECK(run({"gen-data", "--out", out, "--config", bad.string()}) == 1);
  const fs::path arr = fs::path(out) / "arr.json";
  std::ofstream(arr) << "[1,2]";
  CHECK(run({"gen-data", "--out", out, "--config", arr.string()}) == 1);
  CHECK(run({"gen-data", "--out", out, "--set", "noequals"}) == 1);
}

TEST_CASE("--set grammar: JSON values, dotted paths, layering order") {
  nlohmann::json j = nlohmann::json::object();
  cli::detail::apply_override(j, "a=3");
  cli::detail::apply_override(j, "b=2.5");
  cli::detail::apply_override(j, "c=true");
  cli::detail::apply_override(j, "d=hello");
  cli::detail::apply_override(j, "e=[1,2]");
  cli::detail::apply_override(j, "f.g.h=7");
  CHECK(j["a"] == 3);
  CHECK(j["b"] == 2.5);
  CHECK(j["c"] == true);
  CHECK(j["d"] == "hello");       // unparseable values stay strings
  CHECK(j["e"] == nlohmann::json::array({1, 2}));
  CHECK(j["f"]["g"]["h"] == 7);   // dotted keys create nested objects

  CHECK_THROWS_WITH_AS(cli::detail::apply_override(j, "novalue"),
                       doctest::Contains("dotted.key=value"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(cli::detail::apply_override(j, "=5"),
                       doctest::Contains("dotted.key=value"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(cli::detail::apply_override(j, "a..b=5"),
                       doctest::Contains("empty segment"), std::invalid_argument);

  // File overrides preset defaults; --set overrides both.
  const fs::path dir = fresh_dir("layering");
  const nlohmann::json defaults{{"a", 1}, {"b", {{"c", 2}, {"keep", 9}}}};
  const nlohmann::json file_patch{{"b", {{"c", 3}}}};
  cli::detail::CommonOpts o;
  o.config_path = write_json(dir / "cfg.json", file_patch).string();
  o.overrides = {"b.c=4"};
  const nlohmann::json merged = cli::detail::effective_config(defaults, o);
  CHECK(merged["a"] == 1);
  CHECK(merged["b"]["keep"] == 9);
  CHECK(merged["b"]["c"] == 4);

  cli::detail::CommonOpts file_only;
  file_only.config_path = o.config_path;
  CHECK(cli::detail::effective_config(defaults, file_only)["b"]["c"] == 3);
}

TEST_CASE("presets bundle model and run defaults consistently") {
  const cli::Preset tiny = cli::preset_from("tiny");
  CHECK(tiny.model.img_size == 64);
  CHECK(tiny.train.epochs == 60);
  CHECK(tiny.train.batch_size == 4);
  CHECK(tiny.train.augment.crop_size == 64);
  CHECK(tiny.schedule.lr_init == 1e-3);
  CHECK(tiny.unet_base_width == 8);

  const cli::Preset desk = cli::preset_from("desk");
  CHECK(desk.model.img_size == 128);
  CHECK(desk.train.epochs == 60);
  CHECK(desk.unet_base_width == 16);

  const cli::Preset full = cli::preset_from("paper-full");
  CHECK(full.model.img_size == 512);
  CHECK(full.model.d_model == 256);
  CHECK(full.train.epochs == 700);
  CHECK(full.train.batch_size == 45);
  CHECK(full.unet_base_width == 32);

  for (const auto& p : {tiny, desk, full}) {
    CHECK(p.schedule.total_epochs == p.train.epochs);
    CHECK_NOTHROW(p.model.validate());
    CHECK_NOTHROW(p.train.validate());
  }
  CHECK_THROWS_AS(cli::preset_from("bogus"), std::invalid_argument);
}

TEST_CASE("params: full-size transformer and U-Net land in their size bands") {
  const fs::path out = fresh_dir("params");
  CHECK(run({"params", "--preset", "paper-full", "--out", out.string()}) == 0);

  std::int64_t component_sum = 0, model_total = 0, unet_total = 0;
  const std::vector<std::string> lines = lines_of(out / "params.csv");
  REQUIRE(lines.size() > 2);
  CHECK(lines[0] == "component,parameters");
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::size_t comma = lines[i].rfind(',');
    REQUIRE(comma != std::string::npos);
    const std::string name = lines[i].substr(0, comma);
    const std::int64_t count = std::stoll(lines[i].substr(comma + 1));
    CHECK(count > 0);
    if (name == "unet_baseline") {
      unet_total = count;
    } else if (name == "total") {
      model_total = count;
    } else {
      component_sum += count;
    }
  }
  CHECK(model_total == component_sum);  // the total row is the component sum
  CHECK(model_total > static_cast<std::int64_t>(12.3e6 * 0.8));
  CHECK(model_total < static_cast<std::int64_t>(12.3e6 * 1.2));
  CHECK(unet_total > static_cast<std::int64_t>(7.9e6 * 0.8));
  CHECK(unet_total < static_cast<std::int64_t>(7.9e6 * 1.2));
}

TEST_CASE("gen-data: config file plus --seed yields a reproducible dataset") {
  const fs::path dir = fresh_dir("gen");
  const fs::path cfg_path = write_json(dir / "gen.json", nlohmann::json{{"gen", micro_gen()}});

  const fs::path out1 = dir / "d1";
  REQUIRE(run({"gen-data", "--out", out1.string(), "--config", cfg_path.string(), "--seed",
               "123"}) == 0);
  const nlohmann::json echoed = read_json(out1 / "effective_config.json");
  CHECK(echoed["gen"]["height"] == 64);
  CHECK(echoed["gen"]["total_slices"] == 20);
  CHECK(echoed["gen"]["seed"] == 123);  // --seed wins over the config file

  const DatasetManifest m = read_manifest(out1);
  CHECK(m.master_seed == 123);
  CHECK(m.volumes.size() == 2);
  CHECK(m.height == 64);

  // Same seed, fresh directory: bitwise identical manifest and slice files.
  const fs::path out2 = dir / "d2";
  REQUIRE(run({"gen-data", "--out", out2.string(), "--config", cfg_path.string(), "--seed",
               "123"}) == 0);
  CHECK(file_bytes(out1 / "manifest.json") == file_bytes(out2 / "manifest.json"));
  CHECK(file_bytes(out1 / m.volumes[0].image_paths[10]) ==
        file_bytes(out2 / m.volumes[0].image_paths[10]));

  const fs::path out3 = dir / "d3";
  REQUIRE(run({"gen-data", "--out", out3.string(), "--config", cfg_path.string(), "--seed",
               "124"}) == 0);
  CHECK(file_bytes(out1 / "manifest.json") != file_bytes(out3 / "manifest.json"));
}

TEST_CASE("train, eval, and infer round trip on a micro model") {
  const fs::path dir = fresh_dir("pipeline");
  const fs::path data = dir / "data";
  const fs::path cfg_path = write_json(dir / "gen.json", nlohmann::json{{"gen", micro_gen()}});
  REQUIRE(run({"gen-data", "--out", data.string(), "--config", cfg_path.string()}) == 0);

  // Train two epochs on the single train volume.
  const fs::path tr = dir / "train";
  REQUIRE(run(with_micro({"train", "--preset", "tiny", "--data", data.string(), "--out",
                          tr.string(), "--seed", "9"})) == 0);
  const nlohmann::json echoed = read_json(tr / "effective_config.json");
  CHECK(echoed["model"]["d_model"] == 8);
  CHECK(echoed["model"]["k_ages"] == 1);  // derived from the training cohort
  CHECK(echoed["train"]["seed"] == 9);
  CHECK(echoed["schedule"]["total_epochs"] == 2);

  const fs::path ckpt = tr / "ckpt_final.bin";
  REQUIRE(fs::exists(ckpt));
  const nlohmann::json stored = read_checkpoint_config(ckpt.string());
  CHECK(stored["model"]["d_model"] == 8);
  CHECK(stored["trained_age_ids"] == nlohmann::json::array({0}));
  const std::vector<std::string> log = lines_of(tr / "train_log.csv");
  REQUIRE(log.size() == 3);  // header + one row per epoch
  CHECK(log[0] == "epoch,mean_loss,lr,wall_seconds");
  CHECK(log[1].rfind("0,", 0) == 0);
  CHECK(log[2].rfind("1,", 0) == 0);

  // Resuming from the final checkpoint continues at epoch 2.
  const fs::path tr2 = dir / "resume";
  auto resume_args = with_micro({"train", "--preset", "tiny", "--data", data.string(), "--out",
                                 tr2.string(), "--seed", "9", "--resume", ckpt.string()});
  resume_args.push_back("--set");
  resume_args.push_back("train.epochs=4");
  REQUIRE(run(resume_args) == 0);
  const std::vector<std::string> log2 = lines_of(tr2 / "train_log.csv");
  REQUIRE(log2.size() == 3);
  CHECK(log2[1].rfind("2,", 0) == 0);
  CHECK(log2[2].rfind("3,", 0) == 0);

  // Evaluate the checkpoint on the test volume.
  const fs::path ev = dir / "eval";
  REQUIRE(run({"eval", "--data", data.string(), "--ckpt", ckpt.string(), "--out",
               ev.string()}) == 0);
  const std::vector<std::string> vols = lines_of(ev / "dice_volumes.csv");
  REQUIRE(vols.size() == 2);  // header + the single test volume
  CHECK(vols[0] == "volume_id,age_id,mutation_id,dice");
  CHECK(vols[1].rfind("m0_a0_v1,0,0,", 0) == 0);
  const double dice = std::stod(vols[1].substr(vols[1].rfind(',') + 1));
  CHECK(dice >= 0.0);
  CHECK(dice <= 1.0);
  const std::vector<std::string> ages = lines_of(ev / "dice_age_means.csv");
  REQUIRE(ages.size() == 2);
  CHECK(ages[0] == "age_id,mean_dice");
  CHECK(ages[1].rfind("0,", 0) == 0);

  // No test volume carries age 5: a runtime failure, not a usage error.
  CHECK(run({"eval", "--data", data.string(), "--ckpt", ckpt.string(), "--out",
             (dir / "eval_bad").string(), "--ages", "5"}) == 2);

  // Predict the annotated slice of the test volume.
  const fs::path inf = dir / "infer";
  REQUIRE(run({"infer", "--data", data.string(), "--ckpt", ckpt.string(), "--out", inf.string(),
               "--volume-id", "m0_a0_v1"}) == 0);
  const std::string mask = file_bytes(inf / "pred_m0_a0_v1_10.u8");
  REQUIRE(mask.size() == 64 * 64);
  std::size_t bad = 0;
  for (const char c : mask) bad += (c == 0 || c == 1) ? 0 : 1;
  CHECK(bad == 0);

  // Conditioning overrides are accepted; unknown volumes are usage errors.
  REQUIRE(run({"infer", "--data", data.string(), "--ckpt", ckpt.string(), "--out",
               (dir / "infer2").string(), "--volume-id", "m0_a0_v1", "--slice", "4", "--age-id",
               "7", "--loc", "50"}) == 0);
  CHECK(fs::exists(dir / "infer2" / "pred_m0_a0_v1_4.u8"));
  CHECK(run({"infer", "--data", data.string(), "--ckpt", ckpt.string(), "--out",
             (dir / "infer3").string(), "--volume-id", "nope"}) == 1);
}

TEST_CASE("study: a micro individual study reports per-cell results") {
  const fs::path dir = fresh_dir("study");
  const fs::path data = dir / "data";
  const fs::path gen_path = write_json(dir / "gen.json", nlohmann::json{{"gen", micro_gen()}});
  REQUIRE(run({"gen-data", "--out", data.string(), "--config", gen_path.string()}) == 0);

  StudyConfig sc;
  sc.repetitions = 1;
  sc.model.img_size = 64;
  sc.model.d_model = 8;
  sc.model.heads = 2;
  sc.model.decoder_channels = {8, 8, 8, 8};
  sc.model.mlp_ratio = 2;
  sc.train.epochs = 1;
  sc.train.batch_size = 2;
  sc.train.augment.random_crop = false;
  const fs::path cfg_path = write_json(dir / "study.json", nlohmann::json(sc));

  const fs::path out = dir / "out";
  REQUIRE(run({"study", "--data", data.string(), "--config", cfg_path.string(), "--kind",
               "individual", "--out", out.string()}) == 0);
  CHECK(read_json(out / "effective_config.json")["model"]["d_model"] == 8);
  CHECK(fs::exists(out / "runs" / "run_v0_c0_r0" / "ckpt_final.bin"));
  const std::vector<std::string> rows = lines_of(out / "study_individual.csv");
  REQUIRE(rows.size() == 2);
  CHECK(rows[0] == "variant,train_cohort,test_age,mean_dice,sd,n_runs,status");
  CHECK(rows[1].find("cond=age_token+spatial=sinusoid,ages=0|mut=0|vols=all,0,") == 0);
  CHECK(rows[1].find(",1,ok") != std::string::npos);

  // A study whose every run fails exits 2 and flags the cell.
  const fs::path out2 = dir / "out_failed";
  CHECK(run({"study", "--data", data.string(), "--config", cfg_path.string(), "--kind",
             "individual", "--out", out2.string(), "--set", "schedule.lr_min=1.0"}) == 2);
  const std::vector<std::string> rows2 = lines_of(out2 / "study_individual.csv");
  REQUIRE(rows2.size() == 2);
  CHECK(rows2[1].find(",,0,failed") != std::string::npos);
  CHECK(fs::exists(out2 / "runs" / "run_v0_c0_r0" / "failed.txt"));
}
