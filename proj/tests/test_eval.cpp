// Dice against a per-pixel counting oracle, argmax binarization, pooled
// volume scoring, nearest-age token lookup, the evaluator's per-age means on
// a real generated dataset, study cell statistics, and report emission.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "conunetr/data/dataset_io.hpp"
#include "conunetr/data/profiles.hpp"
#include "conunetr/eval/dice.hpp"
#include "conunetr/eval/evaluate.hpp"
#include "conunetr/eval/study.hpp"
#include "conunetr/model/config.hpp"
#include "conunetr/model/embeddings.hpp"
#include "conunetr/tensor/rng.hpp"
#include "conunetr/tensor/tensor.hpp"

namespace fs = std::filesystem;
using namespace conunetr;

namespace {

fs::path fresh_dir(const std::string& leaf) {
  const fs::path dir = fs::temp_directory_path() / "conunetr_eval_tests" / leaf;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(static_cast<bool>(in));
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

Tensor<float> random_mask(const Shape& shape, double density, Rng& rng) {
  Tensor<float> t = Tensor<float>::allocate(shape);
  for (auto& v : t.mutable_values()) v = rng.uniform() < density ? 1.0f : 0.0f;
  return t;
}

// Class scores that binarize exactly to the given mask.
Tensor<float> logits_for(const Tensor<float>& mask) {
  const std::int64_t h = mask.shape().extent(0), w = mask.shape().extent(1);
  Tensor<float> logits = Tensor<float>::allocate(Shape{1, 2, h, w});
  float* bg = logits.mutable_values().data();
  float* fg = bg + h * w;
  for (std::int64_t p = 0; p < h * w; ++p) {
    const bool on = mask.values()[static_cast<std::size_t>(p)] != 0.0f;
    bg[p] = on ? -1.0f : 1.0f;
    fg[p] = on ? 1.0f : -1.0f;
  }
  return logits;
}

std::uint64_t image_key(const Tensor<float>& image) {
  return fnv1a64(image.values().data(), image.values().size() * sizeof(float));
}

ModelConfig micro_model() {
  ModelConfig cfg;
  cfg.img_size = 64;
  cfg.patch_size = 8;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.decoder_channels = {8, 8, 8, 8};
  cfg.mlp_ratio = 2;
  cfg.validate();
  return cfg;
}

// A two-age phantom dataset with one train and two test volumes per age.
DatasetManifest build_eval_dataset(const fs::path& root) {
  GenConfig cfg;
  cfg.height = cfg.width = 64;
  cfg.total_slices = 20;
  cfg.train_volumes_per_age = 1;
  cfg.test_volumes_per_age = 2;
  cfg.ages = {default_age_profiles()[0], default_age_profiles()[1]};
  cfg.mutations = {identity_mutation()};
  cfg.seed = 31;
  return build_dataset(root, cfg);
}

}  // namespace

TEST_CASE("dice matches the per-pixel counting oracle on 100 random pairs") {
  Rng rng(41);
  for (int k = 0; k < 100; ++k) {
    const Shape shape = k % 2 == 0 ? Shape{16, 16} : Shape{3, 7, 5};
    const double da = 0.05 + 0.9 * rng.uniform();
    const double db = 0.05 + 0.9 * rng.uniform();
    const Tensor<float> a = random_mask(shape, da, rng);
    const Tensor<float> b = random_mask(shape, db, rng);

    std::int64_t inter = 0, size_a = 0, size_b = 0;
    for (std::size_t i = 0; i < a.values().size(); ++i) {
      const bool pa = a.values()[i] != 0.0f, pb = b.values()[i] != 0.0f;
      size_a += pa ? 1 : 0;
      size_b += pb ? 1 : 0;
      inter += (pa && pb) ? 1 : 0;
    }
    const double want = size_a + size_b == 0
                            ? 1.0
                            : 2.0 * static_cast<double>(inter) /
                                  static_cast<double>(size_a + size_b);
    CHECK(dice_score(a, b) == want);
  }
}

TEST_CASE("dice properties: symmetry, range, closed forms, monotone overlap") {
  Rng rng(7);
  for (int k = 0; k < 20; ++k) {
    const Tensor<float> a = random_mask(Shape{12, 12}, 0.3, rng);
    const Tensor<float> b = random_mask(Shape{12, 12}, 0.3, rng);
    const double d = dice_score(a, b);
    CHECK(d == dice_score(b, a));
    CHECK(d >= 0.0);
    CHECK(d <= 1.0);
  }

  Tensor<float> ones = Tensor<float>::allocate(Shape{4, 4});
  for (auto& v : ones.mutable_values()) v = 1.0f;
  const Tensor<float> zeros = Tensor<float>::zeros(Shape{4, 4});
  CHECK(dice_score(ones, ones) == 1.0);   // identical non-empty
  CHECK(dice_score(zeros, zeros) == 1.0); // both empty agree perfectly
  CHECK(dice_score(ones, zeros) == 0.0);  // nothing predicted, everything true

  // Disjoint non-empty masks.
  Tensor<float> left = Tensor<float>::zeros(Shape{4, 4});
  Tensor<float> right = Tensor<float>::zeros(Shape{4, 4});
  left.mutable_values()[0] = 1.0f;
  right.mutable_values()[15] = 1.0f;
  CHECK(dice_score(left, right) == 0.0);

  // Fixed |A| = |B| = 5 on a line; sliding B over A makes dice exactly
  // overlap/5, strictly increasing in the overlap.
  double prev = -1.0;
  for (std::int64_t shift = 5; shift >= 0; --shift) {
    Tensor<float> a = Tensor<float>::zeros(Shape{1, 16});
    Tensor<float> b = Tensor<float>::zeros(Shape{1, 16});
    for (std::int64_t i = 0; i < 5; ++i) {
      a.mutable_values()[static_cast<std::size_t>(i)] = 1.0f;
      b.mutable_values()[static_cast<std::size_t>(i + shift)] = 1.0f;
    }
    const double d = dice_score(a, b);
    CHECK(d == static_cast<double>(5 - shift) / 5.0);
    CHECK(d > prev);
    prev = d;
  }

  const Tensor<float> other = Tensor<float>::zeros(Shape{4, 5});
  CHECK_THROWS_WITH_AS(dice_score(ones, other), doctest::Contains("shape mismatch"),
                       std::invalid_argument);
  Tensor<float> soft = Tensor<float>::zeros(Shape{4, 4});
  soft.mutable_values()[3] = 0.5f;
  CHECK_THROWS_WITH_AS(dice_score(soft, ones), doctest::Contains("only 0 and 1"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(dice_score(ones, soft), doctest::Contains("only 0 and 1"),
                       std::invalid_argument);

  // The metric is precision-agnostic.
  Tensor<double> da = Tensor<double>::zeros(Shape{2, 2});
  Tensor<double> db = Tensor<double>::zeros(Shape{2, 2});
  da.mutable_values()[0] = 1.0;
  db.mutable_values()[0] = 1.0;
  db.mutable_values()[1] = 1.0;
  CHECK(dice_score(da, db) == 2.0 / 3.0);
}

TEST_CASE("binarization: argmax over classes with ties to background") {
  const Tensor<float> scores = Tensor<float>::from_values(
      Shape{1, 2, 2, 2}, {1.0f, 0.0f, -1.0f, 2.0f,    // background channel
                          1.0f, 0.5f, -2.0f, 3.0f});  // foreground channel
  const Tensor<float> out = binarize_prediction(scores);
  REQUIRE(out.shape() == Shape{1, 2, 2});
  CHECK(out.values()[0] == 0.0f);  // exact tie goes to background
  CHECK(out.values()[1] == 1.0f);
  CHECK(out.values()[2] == 0.0f);
  CHECK(out.values()[3] == 1.0f);

  // Each batch item binarizes independently.
  Rng rng(3);
  Tensor<float> batch = Tensor<float>::normal(Shape{2, 2, 6, 6}, 0, 1, rng);
  // Keep class margins away from float rounding so probabilities separate too.
  {
    float* bg = batch.mutable_values().data();
    for (std::int64_t i = 0; i < 2; ++i) {
      float* base = bg + i * 2 * 36;
      for (std::int64_t p = 0; p < 36; ++p) {
        if (std::abs(base[p] - base[36 + p]) < 1e-3f) base[36 + p] = base[p] + 0.1f;
      }
    }
  }
  const Tensor<float> hard = binarize_prediction(batch);
  for (std::int64_t i = 0; i < 2; ++i) {
    for (std::int64_t p = 0; p < 36; ++p) {
      const float bg = batch.values()[static_cast<std::size_t>(i * 72 + p)];
      const float fg = batch.values()[static_cast<std::size_t>(i * 72 + 36 + p)];
      CHECK(hard.values()[static_cast<std::size_t>(i * 36 + p)] ==
            (fg > bg ? 1.0f : 0.0f));
    }
  }

  // Softmax probabilities and raw logits give the same mask.
  Tensor<float> probs = Tensor<float>::allocate(Shape{2, 2, 6, 6});
  for (std::int64_t i = 0; i < 2; ++i) {
    for (std::int64_t p = 0; p < 36; ++p) {
      const double bg = batch.values()[static_cast<std::size_t>(i * 72 + p)];
      const double fg = batch.values()[static_cast<std::size_t>(i * 72 + 36 + p)];
      const double pf = 1.0 / (1.0 + std::exp(bg - fg));
      probs.mutable_values()[static_cast<std::size_t>(i * 72 + p)] =
          static_cast<float>(1.0 - pf);
      probs.mutable_values()[static_cast<std::size_t>(i * 72 + 36 + p)] =
          static_cast<float>(pf);
    }
  }
  const Tensor<float> from_probs = binarize_prediction(probs);
  std::int64_t diffs = 0;
  for (std::size_t i = 0; i < hard.values().size(); ++i) {
    if (hard.values()[i] != from_probs.values()[i]) ++diffs;
  }
  CHECK(diffs == 0);

  CHECK_THROWS_WITH_AS(binarize_prediction(Tensor<float>::zeros(Shape{2, 6, 6})),
                       doctest::Contains("expected [B,2,H,W]"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(binarize_prediction(Tensor<float>::zeros(Shape{1, 3, 6, 6})),
                       doctest::Contains("expected [B,2,H,W]"), std::invalid_argument);
}

TEST_CASE("dice pool merges slices into one pixel set, not a mean of scores") {
  // Slice 1: perfect two-pixel agreement. Slice 2: disjoint single pixels.
  Tensor<float> a1 = Tensor<float>::zeros(Shape{2, 2});
  a1.mutable_values()[0] = 1.0f;
  a1.mutable_values()[1] = 1.0f;
  Tensor<float> a2 = Tensor<float>::zeros(Shape{2, 2});
  a2.mutable_values()[0] = 1.0f;
  Tensor<float> b2 = Tensor<float>::zeros(Shape{2, 2});
  b2.mutable_values()[1] = 1.0f;

  DicePool pool;
  pool.add(a1, a1);
  pool.add(a2, b2);
  CHECK(pool.score() == 2.0 * 2.0 / 6.0);  // pooled counts: inter 2, sizes 4+2
  CHECK(pool.score() != 0.5);              // the mean of 1.0 and 0.0 would be 0.5

  // Pooling random slices equals counting over their concatenation.
  Rng rng(23);
  DicePool big;
  std::int64_t inter = 0, total = 0;
  for (int k = 0; k < 5; ++k) {
    const Tensor<float> p = random_mask(Shape{9, 9}, 0.4, rng);
    const Tensor<float> t = random_mask(Shape{9, 9}, 0.2, rng);
    big.add(p, t);
    for (std::size_t i = 0; i < p.values().size(); ++i) {
      const bool pa = p.values()[i] != 0.0f, pb = t.values()[i] != 0.0f;
      inter += (pa && pb) ? 1 : 0;
      total += (pa ? 1 : 0) + (pb ? 1 : 0);
    }
  }
  CHECK(big.score() == 2.0 * static_cast<double>(inter) / static_cast<double>(total));

  DicePool empty;
  CHECK(empty.score() == 1.0);
  DicePool blanks;
  blanks.add(Tensor<float>::zeros(Shape{3, 3}), Tensor<float>::zeros(Shape{3, 3}));
  CHECK(blanks.score() == 1.0);

  DicePool bad;
  CHECK_THROWS_WITH_AS(bad.add(a1, Tensor<float>::zeros(Shape{2, 3})),
                       doctest::Contains("shape mismatch"), std::invalid_argument);
  Tensor<float> soft = Tensor<float>::zeros(Shape{2, 2});
  soft.mutable_values()[0] = 0.25f;
  CHECK_THROWS_WITH_AS(bad.add(soft, a1), doctest::Contains("only 0 and 1"),
                       std::invalid_argument);
}

TEST_CASE("nearest age token: identity for trained ages, ties to the lower id") {
  CHECK(nearest_age_token({0, 1, 2}, 0) == 0);
  CHECK(nearest_age_token({0, 1, 2}, 1) == 1);
  CHECK(nearest_age_token({0, 1, 2}, 2) == 2);

  CHECK(nearest_age_token({0}, 7) == 0);
  CHECK(nearest_age_token({0}, -3) == 0);

  // Age 1 sits exactly between 0 and 2: the lower age id wins the tie.
  CHECK(nearest_age_token({0, 2}, 1) == 0);
  CHECK(nearest_age_token({0, 2}, 3) == 1);
  CHECK(nearest_age_token({0, 2}, -5) == 0);

  // Tokens index the trained list as given, even unsorted.
  CHECK(nearest_age_token({2, 0}, 1) == 1);
  CHECK(nearest_age_token({2, 0}, 3) == 0);

  CHECK_THROWS_WITH_AS(nearest_age_token({}, 1), doctest::Contains("empty trained-age list"),
                       std::invalid_argument);
}

TEST_CASE("evaluator pools annotated slices per volume and averages per age") {
  const fs::path root = fresh_dir("evaluator");
  const DatasetManifest m = build_eval_dataset(root);
  REQUIRE(m.volumes.size() == 6);

  // Stage per-volume predictions, keyed by the annotated slice's image bytes:
  // perfect masks everywhere except one age-0 volume that predicts nothing.
  std::map<std::uint64_t, Tensor<float>> staged;
  std::vector<const VolumeRecord*> test_recs;
  for (const VolumeRecord& rec : m.volumes) {
    if (rec.split != "test") continue;
    test_recs.push_back(&rec);
    REQUIRE(rec.annotated == std::vector<std::int64_t>{10});
    const SliceSample s = load_slice(root, m, rec, 10);
    double on = 0.0;
    for (const float v : s.mask.values()) on += v;
    REQUIRE(on > 0.0);  // a blank truth would make the 0-dice checks vacuous
    staged[image_key(s.image)] = logits_for(s.mask);
  }
  REQUIRE(test_recs.size() == 4);
  // Blind the first age-0 test volume: all-background scores.
  {
    const VolumeRecord& rec = *test_recs[0];
    REQUIRE(rec.age_id == 0);
    const SliceSample s = load_slice(root, m, rec, 10);
    staged[image_key(s.image)] = logits_for(Tensor<float>::zeros(s.mask.shape()));
  }

  std::vector<std::pair<int, int>> seen;  // (token, loc) per forward call
  Evaluator ev(
      [&](const Tensor<float>& image, int token, int loc) {
        seen.push_back({token, loc});
        const auto it = staged.find(image_key(image));
        REQUIRE(it != staged.end());
        return it->second;
      },
      {0, 1});

  const EvalSummary summary = ev.evaluate(root, m, {}, {});
  REQUIRE(summary.volumes.size() == 4);  // test split only
  for (const DiceResult& r : summary.volumes) {
    CHECK(r.mutation_id == 0);
    if (r.volume_id == test_recs[0]->volume_id) {
      CHECK(r.dice == 0.0);
    } else {
      CHECK(r.dice == 1.0);
    }
  }
  REQUIRE(summary.age_group_mean.size() == 2);
  CHECK(summary.age_group_mean.at(0) == 0.5);  // (0 + 1) / 2
  CHECK(summary.age_group_mean.at(1) == 1.0);

  // Trained ages pass through the nearest-token lookup; the location is the
  // mapped slice index.
  const int want_loc = map_slice_location(10, 20);
  REQUIRE(seen.size() == 4);
  std::set<int> tokens;
  for (const auto& [token, loc] : seen) {
    tokens.insert(token);
    CHECK(loc == want_loc);
  }
  CHECK(tokens == std::set<int>{0, 1});

  // Age filter narrows the summary; an empty match set is an error.
  const EvalSummary age1 = ev.evaluate(root, m, {1}, {});
  CHECK(age1.volumes.size() == 2);
  CHECK(age1.age_group_mean.size() == 1);
  CHECK(age1.age_group_mean.at(1) == 1.0);
  CHECK_THROWS_WITH_AS(ev.evaluate(root, m, {5}, {}),
                       doctest::Contains("no test volumes match"), std::runtime_error);

  // A half-window prediction scores exactly its counted overlap.
  const VolumeRecord& rec = *test_recs[1];
  const SliceSample s = load_slice(root, m, rec, 10);
  Tensor<float> half = Tensor<float>::zeros(s.mask.shape());
  for (std::int64_t y = 0; y < 32; ++y) {
    for (std::int64_t x = 0; x < 64; ++x) {
      half.mutable_values()[static_cast<std::size_t>(y * 64 + x)] =
          s.mask.values()[static_cast<std::size_t>(y * 64 + x)];
    }
  }
  std::int64_t inter = 0, size_pred = 0, size_true = 0;
  for (std::size_t i = 0; i < half.values().size(); ++i) {
    size_pred += half.values()[i] != 0.0f ? 1 : 0;
    size_true += s.mask.values()[i] != 0.0f ? 1 : 0;
    inter += (half.values()[i] != 0.0f && s.mask.values()[i] != 0.0f) ? 1 : 0;
  }
  REQUIRE(size_pred > 0);
  staged[image_key(s.image)] = logits_for(half);
  const DiceResult r = ev.evaluate_volume(root, m, rec);
  CHECK(r.dice ==
        2.0 * static_cast<double>(inter) / static_cast<double>(size_pred + size_true));
  CHECK(r.volume_id == rec.volume_id);
  CHECK(r.age_id == rec.age_id);
}

TEST_CASE("study cells: mean, sample sd, and failure flags") {
  StudyCell cell;
  cell.run_dice = {0.5};
  CHECK(cell.mean() == 0.5);
  CHECK(cell.sd() == 0.0);  // a single repetition has no spread
  CHECK_FALSE(cell.failed());

  cell.run_dice = {0.4, 0.6, 0.8};
  CHECK(cell.mean() == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(cell.sd() == doctest::Approx(0.2).epsilon(1e-12));

  StudyCell failed;
  failed.failed_runs = 3;
  CHECK(failed.failed());
  CHECK_THROWS_AS(failed.mean(), std::logic_error);
  CHECK_THROWS_AS(failed.sd(), std::logic_error);

  StudyReport report;
  StudyCell a;
  a.variant = "v";
  a.train_cohort = "c";
  a.test_age_id = 2;
  report.cells.push_back(a);
  CHECK(report.find("v", "c", 2) == &report.cells[0]);
  CHECK(report.find("v", "c", 3) == nullptr);
  CHECK(report.find("w", "c", 2) == nullptr);
}

TEST_CASE("study naming, kind parsing, and config validation") {
  CHECK(StudyVariant{ConditioningMode::age_token, SpatialMode::sinusoid}.name() ==
        "cond=age_token+spatial=sinusoid");
  CHECK(StudyVariant{ConditioningMode::none, SpatialMode::none}.name() ==
        "cond=none+spatial=none");

  StudyCohort cohort;
  cohort.age_ids = {0, 2};
  CHECK(cohort.name() == "ages=0+2|mut=0|vols=all");
  cohort.volumes_per_age = 2;
  cohort.mutation_ids = {0, 1};
  CHECK(cohort.name() == "ages=0+2|mut=0+1|vols=2");

  for (const StudyKind k : {StudyKind::individual, StudyKind::joint, StudyKind::cross_mutation,
                            StudyKind::data_scaling, StudyKind::ablation}) {
    CHECK(study_kind_from(to_string(k)) == k);
  }
  CHECK_THROWS_WITH_AS(study_kind_from("sideways"), doctest::Contains("unknown study kind"),
                       std::invalid_argument);

  StudyConfig bad_reps;
  bad_reps.repetitions = 0;
  CHECK_THROWS_WITH_AS(bad_reps.validate(), doctest::Contains("repetitions"),
                       std::invalid_argument);
  StudyConfig no_variants;
  no_variants.variants.clear();
  CHECK_THROWS_WITH_AS(no_variants.validate(), doctest::Contains("no model variants"),
                       std::invalid_argument);
  StudyConfig scaling;
  scaling.kind = StudyKind::data_scaling;
  CHECK_THROWS_WITH_AS(scaling.validate(), doctest::Contains("needs volume_counts"),
                       std::invalid_argument);
  StudyConfig bad_cohort;
  bad_cohort.train_cohorts.push_back(StudyCohort{});
  CHECK_THROWS_WITH_AS(bad_cohort.validate(), doctest::Contains("empty age list"),
                       std::invalid_argument);
  StudyCohort zero_vols;
  zero_vols.age_ids = {0};
  zero_vols.volumes_per_age = 0;
  CHECK_THROWS_WITH_AS(zero_vols.validate(), doctest::Contains("volumes_per_age"),
                       std::invalid_argument);

  // JSON round trip keeps the full study description.
  StudyConfig cfg;
  cfg.kind = StudyKind::ablation;
  cfg.test_age_ids = {0, 2};
  cfg.variants = {StudyVariant{ConditioningMode::none, SpatialMode::none},
                  StudyVariant{ConditioningMode::age_token, SpatialMode::sinusoid}};
  cfg.repetitions = 2;
  cfg.seed = 42;
  cfg.volume_counts = {1, 2};
  cfg.model.d_model = 32;
  cfg.train.epochs = 3;
  cfg.schedule.lr_init = 5e-4;
  const nlohmann::json j = cfg;
  const StudyConfig back = j.get<StudyConfig>();
  CHECK(back.kind == StudyKind::ablation);
  CHECK(back.test_age_ids == std::vector<int>{0, 2});
  REQUIRE(back.variants.size() == 2);
  CHECK(back.variants[0].conditioning == ConditioningMode::none);
  CHECK(back.variants[1].spatial == SpatialMode::sinusoid);
  CHECK(back.repetitions == 2);
  CHECK(back.seed == 42);
  CHECK(back.volume_counts == std::vector<std::int64_t>{1, 2});
  CHECK(back.model.d_model == 32);
  CHECK(back.train.epochs == 3);
  CHECK(back.schedule.lr_init == 5e-4);
}

TEST_CASE("study report CSV: one row per cell, failures flagged, stable bytes") {
  StudyReport report;
  report.kind = StudyKind::individual;
  StudyCell ok;
  ok.variant = "cond=age_token+spatial=sinusoid";
  ok.train_cohort = "ages=0|mut=0|vols=all";
  ok.test_age_id = 0;
  ok.train_volumes = 3;
  ok.run_dice = {0.75, 0.85};
  StudyCell failed;
  failed.variant = ok.variant;
  failed.train_cohort = "ages=1|mut=0|vols=all";
  failed.test_age_id = 1;
  failed.failed_runs = 2;
  report.cells = {ok, failed};

  const fs::path dir = fresh_dir("report");
  emit_report(report, dir);
  const std::string csv = file_bytes(dir / "study_individual.csv");
  CHECK(csv.find("variant,train_cohort,test_age,mean_dice,sd,n_runs,status") == 0);
  CHECK(csv.find("ages=0|mut=0|vols=all,0,0.8,") != std::string::npos);
  CHECK(csv.find(",2,ok") != std::string::npos);
  CHECK(csv.find("ages=1|mut=0|vols=all,1,,,0,failed") != std::string::npos);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);  // header + 2 cells

  const fs::path dir2 = fresh_dir("report_again");
  emit_report(report, dir2);
  CHECK(file_bytes(dir2 / "study_individual.csv") == csv);

  // Data-scaling reports add per-variant series averaged over test ages.
  StudyReport scaling;
  scaling.kind = StudyKind::data_scaling;
  for (const auto& [vols, age, dice] :
       std::vector<std::tuple<std::int64_t, int, double>>{
           {1, 0, 0.5}, {1, 1, 0.7}, {2, 0, 0.8}, {2, 1, 0.9}}) {
    StudyCell c;
    c.variant = "cond=age_token+spatial=sinusoid";
    c.train_cohort = "ages=0+1|mut=0|vols=" + std::to_string(vols);
    c.test_age_id = age;
    c.train_volumes = vols * 2;
    c.run_dice = {dice};
    scaling.cells.push_back(c);
  }
  const fs::path dir3 = fresh_dir("scaling");
  emit_report(scaling, dir3);
  CHECK(fs::exists(dir3 / "study_data_scaling.csv"));
  const std::string series = file_bytes(dir3 / "scaling_variant0.csv");
  CHECK(series.find("train_volumes,mean_dice") == 0);
  CHECK(series.find("2,0.6") != std::string::npos);  // (0.5 + 0.7) / 2
  CHECK(series.find("4,0.85") != std::string::npos);
}

TEST_CASE("study runner: micro individual study trains, scores, and reports") {
  const fs::path root = fresh_dir("study_data");
  GenConfig gen;
  gen.height = gen.width = 64;
  gen.total_slices = 20;
  gen.train_volumes_per_age = 1;
  gen.test_volumes_per_age = 1;
  gen.ages = {default_age_profiles()[0]};
  gen.mutations = {identity_mutation()};
  gen.seed = 13;
  build_dataset(root, gen);

  StudyConfig cfg;
  cfg.kind = StudyKind::individual;
  cfg.repetitions = 1;
  cfg.seed = 3;
  cfg.model = micro_model();
  cfg.train.epochs = 1;
  cfg.train.batch_size = 2;
  cfg.train.augment.random_crop = false;

  const fs::path out = fresh_dir("study_out");
  StudyRunner runner(root, cfg, out);
  CHECK(runner.manifest().volumes.size() == 2);
  const StudyReport report = runner.run();

  REQUIRE(report.cells.size() == 1);  // one variant, one cohort, one test age
  const StudyCell& cell = report.cells[0];
  CHECK(cell.variant == "cond=age_token+spatial=sinusoid");
  CHECK(cell.train_cohort == "ages=0|mut=0|vols=all");
  CHECK(cell.test_age_id == 0);
  CHECK(cell.train_volumes == 1);
  CHECK(cell.failed_runs == 0);
  REQUIRE(cell.run_dice.size() == 1);
  CHECK(cell.run_dice[0] >= 0.0);
  CHECK(cell.run_dice[0] <= 1.0);

  CHECK(fs::exists(out / "run_v0_c0_r0" / "train_log.csv"));
  CHECK(fs::exists(out / "run_v0_c0_r0" / "ckpt_final.bin"));

  emit_report(report, out);
  const std::string csv = file_bytes(out / "study_individual.csv");
  CHECK(csv.find(",1,ok") != std::string::npos);

  // A per-run training failure marks the cell but the study completes.
  StudyConfig broken = cfg;
  broken.schedule.lr_min = 1.0;  // exceeds lr_init: the trainer refuses it
  const fs::path out2 = fresh_dir("study_broken");
  StudyRunner bad(root, broken, out2);
  const StudyReport rep2 = bad.run();
  REQUIRE(rep2.cells.size() == 1);
  CHECK(rep2.cells[0].failed());
  CHECK(rep2.cells[0].failed_runs == 1);
  CHECK(fs::exists(out2 / "run_v0_c0_r0" / "failed.txt"));
  emit_report(rep2, out2);
  CHECK(file_bytes(out2 / "study_individual.csv").find(",,0,failed") != std::string::npos);

  // Mismatched model and slice extents are rejected up front.
  StudyConfig wrong = cfg;
  wrong.model.img_size = 32;
  StudyRunner mismatched(root, wrong, fresh_dir("study_mismatch"));
  CHECK_THROWS_WITH_AS(mismatched.run(), doctest::Contains("incompatible"),
                       std::invalid_argument);
}
