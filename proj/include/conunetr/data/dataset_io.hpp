#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "conunetr/data/phantom.hpp"
#include "conunetr/data/profiles.hpp"
#include "conunetr/data/sample.hpp"
#include "conunetr/data/sampling.hpp"
#include "conunetr/tensor/rng.hpp"

namespace conunetr {

static_assert(std::endian::native == std::endian::little,
              "dataset raw files assume a little-endian host");

inline std::uint64_t fnv1a64(const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 1469598103934665603ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

struct VolumeRecord {
  std::string volume_id;
  int age_id = 0;
  int mutation_id = 0;
  std::string split;  // "train" or "test"
  std::int64_t total_slices = 0;
  std::vector<std::int64_t> annotated;
  std::uint64_t seed = 0;
  std::vector<std::string> image_paths, mask_paths;        // relative, one per slice
  std::vector<std::uint64_t> image_checksums, mask_checksums;
};

struct DatasetManifest {
  std::int64_t height = 0, width = 0;
  double budget_fraction = 0.05;
  std::uint64_t master_seed = 0;
  std::vector<AgeProfile> age_profiles;
  std::vector<MutationProfile> mutation_profiles;
  std::vector<VolumeRecord> volumes;
};

inline void to_json(nlohmann::json& j, const VolumeRecord& v) {
  j = nlohmann::json{{"volume_id", v.volume_id},
                     {"age_id", v.age_id},
                     {"mutation_id", v.mutation_id},
                     {"split", v.split},
                     {"total_slices", v.total_slices},
                     {"annotated", v.annotated},
                     {"seed", v.seed},
                     {"image_paths", v.image_paths},
                     {"mask_paths", v.mask_paths},
                     {"image_checksums", v.image_checksums},
                     {"mask_checksums", v.mask_checksums}};
}

inline void from_json(const nlohmann::json& j, VolumeRecord& v) {
  j.at("volume_id").get_to(v.volume_id);
  j.at("age_id").get_to(v.age_id);
  j.at("mutation_id").get_to(v.mutation_id);
  j.at("split").get_to(v.split);
  j.at("total_slices").get_to(v.total_slices);
  j.at("annotated").get_to(v.annotated);
  j.at("seed").get_to(v.seed);
  j.at("image_paths").get_to(v.image_paths);
  j.at("mask_paths").get_to(v.mask_paths);
  j.at("image_checksums").get_to(v.image_checksums);
  j.at("mask_checksums").get_to(v.mask_checksums);
}

inline void to_json(nlohmann::json& j, const DatasetManifest& m) {
  j = nlohmann::json{{"version", 1},
                     {"height", m.height},
                     {"width", m.width},
                     {"budget_fraction", m.budget_fraction},
                     {"master_seed", m.master_seed},
                     {"age_profiles", m.age_profiles},
                     {"mutation_profiles", m.mutation_profiles},
                     {"volumes", m.volumes}};
}

inline void from_json(const nlohmann::json& j, DatasetManifest& m) {
  if (!j.contains("version") || j.at("version").get<int>() != 1) {
    throw std::invalid_argument("manifest: missing or unsupported version");
  }
  j.at("height").get_to(m.height);
  j.at("width").get_to(m.width);
  j.at("budget_fraction").get_to(m.budget_fraction);
  j.at("master_seed").get_to(m.master_seed);
  j.at("age_profiles").get_to(m.age_profiles);
  j.at("mutation_profiles").get_to(m.mutation_profiles);
  j.at("volumes").get_to(m.volumes);
}

// Cohort layout for generation. The base mutation gets train and test
// volumes per age; every further mutation gets test volumes only (a held-out
// transfer target).
struct GenConfig {
  std::int64_t height = 128, width = 128;
  std::int64_t total_slices = 100;
  double budget_fraction = 0.05;
  int train_volumes_per_age = 3;
  int test_volumes_per_age = 2;
  std::vector<AgeProfile> ages = default_age_profiles();
  std::vector<MutationProfile> mutations = {identity_mutation(), variant_mutation()};
  std::uint64_t seed = 7;
};

inline void to_json(nlohmann::json& j, const GenConfig& c) {
  j = nlohmann::json{{"height", c.height},
                     {"width", c.width},
                     {"total_slices", c.total_slices},
                     {"budget_fraction", c.budget_fraction},
                     {"train_volumes_per_age", c.train_volumes_per_age},
                     {"test_volumes_per_age", c.test_volumes_per_age},
                     {"ages", c.ages},
                     {"mutations", c.mutations},
                     {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, GenConfig& c) {
  if (j.contains("height")) j.at("height").get_to(c.height);
  if (j.contains("width")) j.at("width").get_to(c.width);
  if (j.contains("total_slices")) j.at("total_slices").get_to(c.total_slices);
  if (j.contains("budget_fraction")) j.at("budget_fraction").get_to(c.budget_fraction);
  if (j.contains("train_volumes_per_age")) {
    j.at("train_volumes_per_age").get_to(c.train_volumes_per_age);
  }
  if (j.contains("test_volumes_per_age")) j.at("test_volumes_per_age").get_to(c.test_volumes_per_age);
  if (j.contains("ages")) j.at("ages").get_to(c.ages);
  if (j.contains("mutations")) j.at("mutations").get_to(c.mutations);
  if (j.contains("seed")) j.at("seed").get_to(c.seed);
}

namespace detail {

inline void write_file_bytes(const std::filesystem::path& path, const void* data,
                             std::size_t n) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("dataset: cannot open " + path.string() + " for writing");
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out) throw std::runtime_error("dataset: write to " + path.string() + " failed");
}

inline std::vector<char> read_file_bytes(const std::filesystem::path& path,
                                         std::size_t expect) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("dataset: missing file " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() != expect) {
    throw std::runtime_error("dataset: " + path.string() + " holds " +
                             std::to_string(bytes.size()) + " bytes, expected " +
                             std::to_string(expect));
  }
  return bytes;
}

}  // namespace detail

// Generates every volume of the cohort layout, writes the tree
// <root>/mut<id>/age<id>/<volume_id>/{slice,mask}_<idx> plus manifest.json,
// and returns the manifest. Deterministic: volume seeds derive from the
// master seed and the (mutation, age, ordinal) triple.
inline DatasetManifest build_dataset(const std::filesystem::path& root, const GenConfig& cfg) {
  validate_age_schedule(cfg.ages);
  for (const MutationProfile& m : cfg.mutations) m.validate();
  if (cfg.mutations.empty()) throw std::invalid_argument("build_dataset: no mutations");
  if (cfg.train_volumes_per_age < 1 || cfg.test_volumes_per_age < 1) {
    throw std::invalid_argument("build_dataset: need at least one volume per split");
  }

  DatasetManifest manifest;
  manifest.height = cfg.height;
  manifest.width = cfg.width;
  manifest.budget_fraction = cfg.budget_fraction;
  manifest.master_seed = cfg.seed;
  manifest.age_profiles = cfg.ages;
  manifest.mutation_profiles = cfg.mutations;

  for (std::size_t mi = 0; mi < cfg.mutations.size(); ++mi) {
    const MutationProfile& mut = cfg.mutations[mi];
    const int n_train = mi == 0 ? cfg.train_volumes_per_age : 0;
    for (const AgeProfile& age : cfg.ages) {
      const int n_total = n_train + cfg.test_volumes_per_age;
      for (int k = 0; k < n_total; ++k) {
        VolumeRecord rec;
        rec.volume_id = "m" + std::to_string(mut.mutation_id) + "_a" +
                        std::to_string(age.age_id) + "_v" + std::to_string(k);
        rec.age_id = age.age_id;
        rec.mutation_id = mut.mutation_id;
        rec.split = k < n_train ? "train" : "test";
        rec.total_slices = cfg.total_slices;
        rec.seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(mut.mutation_id) + 1,
                               static_cast<std::uint64_t>(age.age_id) + 1,
                               static_cast<std::uint64_t>(k) + 1);
        rec.annotated = sample_annotated_slices(cfg.total_slices, cfg.budget_fraction, rec.seed);

        const auto slices =
            generate_volume(age, mut, cfg.height, cfg.width, cfg.total_slices, rec.seed);
        const std::filesystem::path rel =
            std::filesystem::path("mut" + std::to_string(mut.mutation_id)) /
            ("age" + std::to_string(age.age_id)) / rec.volume_id;
        std::filesystem::create_directories(root / rel);
        for (std::int64_t z = 0; z < cfg.total_slices; ++z) {
          const auto& [img, msk] = slices[static_cast<std::size_t>(z)];
          const std::string img_rel = (rel / ("slice_" + std::to_string(z) + ".f32")).string();
          const std::string msk_rel = (rel / ("mask_" + std::to_string(z) + ".u8")).string();

          detail::write_file_bytes(root / img_rel, img.values().data(),
                                   img.values().size() * sizeof(float));
          std::vector<unsigned char> mbytes(msk.values().size());
          for (std::size_t i = 0; i < mbytes.size(); ++i) {
            mbytes[i] = msk.values()[i] != 0.0f ? 1 : 0;
          }
          detail::write_file_bytes(root / msk_rel, mbytes.data(), mbytes.size());

          rec.image_paths.push_back(img_rel);
          rec.mask_paths.push_back(msk_rel);
          rec.image_checksums.push_back(
              fnv1a64(img.values().data(), img.values().size() * sizeof(float)));
          rec.mask_checksums.push_back(fnv1a64(mbytes.data(), mbytes.size()));
        }
        manifest.volumes.push_back(std::move(rec));
      }
    }
  }

  const nlohmann::json j = manifest;
  std::ofstream out(root / "manifest.json");
  if (!out) throw std::runtime_error("dataset: cannot write manifest under " + root.string());
  out << j.dump(2) << "\n";
  return manifest;
}

inline DatasetManifest read_manifest(const std::filesystem::path& root) {
  std::ifstream in(root / "manifest.json");
  if (!in) throw std::runtime_error("dataset: missing manifest at " + (root / "manifest.json").string());
  nlohmann::json j = nlohmann::json::parse(in, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded()) throw std::runtime_error("dataset: malformed manifest JSON");
  DatasetManifest m;
  try {
    m = j.get<DatasetManifest>();
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("dataset: malformed manifest: ") + e.what());
  }
  if (m.height < 1 || m.width < 1) throw std::runtime_error("dataset: manifest extents invalid");
  return m;
}

// Loads one slice, verifying file sizes and checksums against the manifest.
inline SliceSample load_slice(const std::filesystem::path& root, const DatasetManifest& manifest,
                              const VolumeRecord& rec, std::int64_t slice_index) {
  if (slice_index < 0 || slice_index >= rec.total_slices) {
    throw std::invalid_argument("load_slice: index " + std::to_string(slice_index) +
                                " outside volume " + rec.volume_id);
  }
  const std::int64_t h = manifest.height, w = manifest.width;
  const std::size_t zi = static_cast<std::size_t>(slice_index);
  if (rec.image_paths.size() != static_cast<std::size_t>(rec.total_slices) ||
      rec.mask_paths.size() != static_cast<std::size_t>(rec.total_slices)) {
    throw std::runtime_error("load_slice: manifest paths incomplete for " + rec.volume_id);
  }

  const std::filesystem::path img_path = root / rec.image_paths[zi];
  const std::vector<char> ibytes =
      detail::read_file_bytes(img_path, static_cast<std::size_t>(h * w) * sizeof(float));
  if (fnv1a64(ibytes.data(), ibytes.size()) != rec.image_checksums[zi]) {
    throw std::runtime_error("load_slice: checksum mismatch for " + img_path.string());
  }
  std::vector<float> img(static_cast<std::size_t>(h * w));
  std::memcpy(img.data(), ibytes.data(), ibytes.size());

  const std::filesystem::path msk_path = root / rec.mask_paths[zi];
  const std::vector<char> mbytes =
      detail::read_file_bytes(msk_path, static_cast<std::size_t>(h * w));
  if (fnv1a64(mbytes.data(), mbytes.size()) != rec.mask_checksums[zi]) {
    throw std::runtime_error("load_slice: checksum mismatch for " + msk_path.string());
  }
  std::vector<float> msk(static_cast<std::size_t>(h * w));
  for (std::size_t i = 0; i < msk.size(); ++i) {
    msk[i] = static_cast<unsigned char>(mbytes[i]) != 0 ? 1.0f : 0.0f;
  }

  SliceSample s;
  s.image = Tensor<float>::from_values(Shape{1, h, w}, std::move(img));
  s.mask = Tensor<float>::from_values(Shape{h, w}, std::move(msk));
  s.age_id = rec.age_id;
  s.mutation_id = rec.mutation_id;
  s.volume_id = rec.volume_id;
  s.slice_index = slice_index;
  s.total_slices = rec.total_slices;
  return s;
}

inline std::vector<SliceSample> load_annotated_slices(const std::filesystem::path& root,
                                                      const DatasetManifest& manifest,
                                                      const VolumeRecord& rec) {
  std::vector<SliceSample> out;
  for (const std::int64_t idx : rec.annotated) {
    out.push_back(load_slice(root, manifest, rec, idx));
  }
  return out;
}

}  // namespace conunetr
