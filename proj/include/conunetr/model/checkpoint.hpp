#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "conunetr/nn/parameters.hpp"
#include "conunetr/tensor/tensor.hpp"

namespace conunetr {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'C', 'U', 'N', 'E', 'T', 'R', 'K', '\n'};

// Optimizer accumulators captured alongside the parameters, in registration
// order. Values are stored as 32-bit floats like the parameters themselves.
template <typename S>
struct OptimizerSnapshot {
  std::int64_t t = 0;
  std::vector<std::vector<S>> m, v;
};

namespace detail {

class ByteReader {
 public:
  explicit ByteReader(std::vector<char> data) : data_(std::move(data)) {}

  template <typename T>
  T read(const char* what) {
    T value;
    take(&value, sizeof(T), what);
    return value;
  }

  std::string read_string(const char* what) {
    const auto len = read<std::uint32_t>(what);
    if (len > 1 << 20) throw std::runtime_error(std::string("checkpoint: implausible ") + what);
    std::string s(len, '\0');
    take(s.data(), len, what);
    return s;
  }

  void take(void* dst, std::size_t n, const char* what) {
    if (pos_ + n > data_.size()) {
      throw std::runtime_error(std::string("checkpoint: truncated file while reading ") + what);
    }
    std::memcpy(dst, data_.data() + pos_, n);
    pos_ += n;
  }

  bool exhausted() const { return pos_ == data_.size(); }

 private:
  std::vector<char> data_;
  std::size_t pos_ = 0;
};

class ByteWriter {
 public:
  explicit ByteWriter(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    path_ = path;
  }

  template <typename T>
  void write(T value) {
    out_.write(reinterpret_cast<const char*>(&value), sizeof(T));
  }

  void write_string(const std::string& s) {
    write<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }

  void write_raw(const void* data, std::size_t n) {
    out_.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n));
  }

  void finish() {
    out_.flush();
    if (!out_) throw std::runtime_error("checkpoint: write to " + path_ + " failed");
  }

 private:
  std::ofstream out_;
  std::string path_;
};

template <typename S>
void write_f32_values(ByteWriter& w, std::span<const S> values) {
  for (const S v : values) {
    const float f = static_cast<float>(v);
    w.write<float>(f);
  }
}

template <typename S>
std::vector<S> read_f32_values(ByteReader& r, std::size_t n, const std::string& name) {
  std::vector<S> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = static_cast<S>(r.read<float>(("values of " + name).c_str()));
  }
  return out;
}

}  // namespace detail

// Layout: magic, u32 version, length-prefixed config JSON, u64 parameter
// count, then per parameter (name, u32 rank, u64 dims, f32 values). An
// optional optimizer section (u8 flag) and trainer section (u8 flag, u64
// next epoch) follow.
template <typename S>
void save_checkpoint(const std::string& path, const nlohmann::json& config,
                     const ParamList<S>& params, const OptimizerSnapshot<S>* opt = nullptr,
                     const std::int64_t* next_epoch = nullptr) {
  detail::ByteWriter w(path);
  w.write_raw(kCheckpointMagic, sizeof(kCheckpointMagic));
  w.write<std::uint32_t>(kCheckpointVersion);
  w.write_string(config.dump());
  w.write<std::uint64_t>(params.items.size());
  for (const auto& item : params.items) {
    w.write_string(item.name);
    const Shape& shape = item.tensor.shape();
    w.write<std::uint32_t>(static_cast<std::uint32_t>(shape.rank()));
    for (int i = 0; i < shape.rank(); ++i) {
      w.write<std::uint64_t>(static_cast<std::uint64_t>(shape.extent(i)));
    }
    detail::write_f32_values(w, item.tensor.values());
  }
  if (opt != nullptr) {
    if (opt->m.size() != params.items.size() || opt->v.size() != params.items.size()) {
      throw std::invalid_argument("checkpoint: optimizer snapshot does not match parameters");
    }
    w.write<std::uint8_t>(1);
    w.write<std::uint64_t>(static_cast<std::uint64_t>(opt->t));
    for (std::size_t i = 0; i < params.items.size(); ++i) {
      detail::write_f32_values(w, std::span<const S>(opt->m[i]));
      detail::write_f32_values(w, std::span<const S>(opt->v[i]));
    }
  } else {
    w.write<std::uint8_t>(0);
  }
  if (next_epoch != nullptr) {
    w.write<std::uint8_t>(1);
    w.write<std::uint64_t>(static_cast<std::uint64_t>(*next_epoch));
  } else {
    w.write<std::uint8_t>(0);
  }
  w.finish();
}

// Loads into an existing parameter list. The whole file is parsed and
// verified (every expected name present, shapes equal, no extras) before any
// tensor is touched, so a bad file never leaves the model half-updated.
// Returns the stored config JSON.
template <typename S>
nlohmann::json load_checkpoint(const std::string& path, const ParamList<S>& params,
                               OptimizerSnapshot<S>* opt = nullptr,
                               std::int64_t* next_epoch = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  detail::ByteReader r(std::move(bytes));

  char magic[sizeof(kCheckpointMagic)];
  r.take(magic, sizeof(magic), "magic");
  if (std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("checkpoint: " + path + " is not a checkpoint file");
  }
  const auto version = r.read<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: version " + std::to_string(version) +
                             " unsupported (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  nlohmann::json config;
  {
    const std::string text = r.read_string("config");
    config = nlohmann::json::parse(text, nullptr, /*allow_exceptions=*/false);
    if (config.is_discarded()) throw std::runtime_error("checkpoint: config record is not JSON");
  }

  const auto count = r.read<std::uint64_t>("parameter count");
  if (count != params.items.size()) {
    throw std::runtime_error("checkpoint: holds " + std::to_string(count) +
                             " parameters, model expects " + std::to_string(params.items.size()));
  }
  std::vector<std::vector<S>> staged(params.items.size());
  std::vector<bool> seen(params.items.size(), false);
  for (std::uint64_t p = 0; p < count; ++p) {
    const std::string name = r.read_string("parameter name");
    const auto rank = r.read<std::uint32_t>(("rank of " + name).c_str());
    if (rank > 4) throw std::runtime_error("checkpoint: parameter " + name + " has rank > 4");
    std::vector<std::int64_t> dims;
    std::uint64_t numel = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const auto d = r.read<std::uint64_t>(("dims of " + name).c_str());
      dims.push_back(static_cast<std::int64_t>(d));
      numel *= d;
    }
    // Locate the expected entry.
    std::size_t idx = params.items.size();
    for (std::size_t i = 0; i < params.items.size(); ++i) {
      if (params.items[i].name == name) {
        idx = i;
        break;
      }
    }
    if (idx == params.items.size()) {
      throw std::runtime_error("checkpoint: unexpected parameter " + name);
    }
    if (seen[idx]) throw std::runtime_error("checkpoint: duplicate parameter " + name);
    seen[idx] = true;
    const Shape expect = params.items[idx].tensor.shape();
    const Shape got = rank == 0 ? Shape{} : Shape(dims);
    if (got != expect) {
      throw std::runtime_error("checkpoint: parameter " + name + " has shape " + got.str() +
                               ", model expects " + expect.str());
    }
    staged[idx] = detail::read_f32_values<S>(r, static_cast<std::size_t>(numel), name);
  }
  for (std::size_t i = 0; i < seen.size(); ++i) {
    if (!seen[i]) throw std::runtime_error("checkpoint: missing parameter " + params.items[i].name);
  }

  OptimizerSnapshot<S> staged_opt;
  const auto has_opt = r.read<std::uint8_t>("optimizer flag");
  if (has_opt != 0) {
    staged_opt.t = static_cast<std::int64_t>(r.read<std::uint64_t>("optimizer step count"));
    for (std::size_t i = 0; i < params.items.size(); ++i) {
      const std::size_t n = params.items[i].tensor.values().size();
      staged_opt.m.push_back(detail::read_f32_values<S>(r, n, params.items[i].name + " (m)"));
      staged_opt.v.push_back(detail::read_f32_values<S>(r, n, params.items[i].name + " (v)"));
    }
  }
  if (opt != nullptr && has_opt == 0) {
    throw std::runtime_error("checkpoint: optimizer state requested but not stored in " + path);
  }

  const auto has_trainer = r.read<std::uint8_t>("trainer flag");
  std::uint64_t stored_epoch = 0;
  if (has_trainer != 0) stored_epoch = r.read<std::uint64_t>("next epoch");
  if (next_epoch != nullptr && has_trainer == 0) {
    throw std::runtime_error("checkpoint: trainer state requested but not stored in " + path);
  }

  // Everything parsed and verified: commit.
  for (std::size_t i = 0; i < params.items.size(); ++i) {
    const std::span<S> dst = params.items[i].tensor.mutable_values();
    std::copy(staged[i].begin(), staged[i].end(), dst.begin());
  }
  if (opt != nullptr) *opt = std::move(staged_opt);
  if (next_epoch != nullptr) *next_epoch = static_cast<std::int64_t>(stored_epoch);
  return config;
}

// Reads only the header (magic, version, config JSON) so a model can be
// rebuilt from its stored config before the parameters are loaded.
inline nlohmann::json read_checkpoint_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  detail::ByteReader r(std::move(bytes));
  char magic[sizeof(kCheckpointMagic)];
  r.take(magic, sizeof(magic), "magic");
  if (std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("checkpoint: " + path + " is not a checkpoint file");
  }
  const auto version = r.read<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: version " + std::to_string(version) +
                             " unsupported (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  const std::string text = r.read_string("config");
  nlohmann::json config = nlohmann::json::parse(text, nullptr, /*allow_exceptions=*/false);
  if (config.is_discarded()) throw std::runtime_error("checkpoint: config record is not JSON");
  return config;
}

}  // namespace conunetr
