#pragma once

// Checkpoint container, little-endian:
//   magic "CTRSINK\0" | u32 version | u32 scalar width in bytes
//   u64 metadata length | metadata (JSON text: model config + caller metadata)
//   u64 tensor count | per tensor: u64 name length | name | u64 rows | u64 cols | raw values

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "ctrsink/errors.hpp"
#include "ctrsink/model/model.hpp"

namespace ctrsink {

inline constexpr std::array<char, 8> kCheckpointMagic = {'C', 'T', 'R', 'S', 'I', 'N', 'K', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
struct LoadedCheckpoint {
  Model<T> model;
  nlohmann::json metadata;
};

namespace detail {

template <class U>
void put(std::ostream& out, U v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <class U>
U get(std::istream& in) {
  U v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(U));
  if (!in) throw IoError("checkpoint: truncated file");
  return v;
}

}  // namespace detail

template <class T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& model, const nlohmann::json& metadata = {}) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  detail::put<std::uint32_t>(out, sizeof(T));
  nlohmann::json meta = {{"model_config", model.config}, {"metadata", metadata}};
  const std::string text = meta.dump();
  detail::put<std::uint64_t>(out, text.size());
  out.write(text.data(), std::streamsize(text.size()));
  const auto params = model.named_parameters();
  detail::put<std::uint64_t>(out, params.size());
  for (const auto& [name, t] : params) {
    detail::put<std::uint64_t>(out, name.size());
    out.write(name.data(), std::streamsize(name.size()));
    detail::put<std::uint64_t>(out, t.rows());
    detail::put<std::uint64_t>(out, t.cols());
    out.write(reinterpret_cast<const char*>(t.data().data()), std::streamsize(t.size() * sizeof(T)));
  }
  if (!out) throw IoError("write failed for checkpoint " + path.string());
}

template <class T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kCheckpointMagic) throw IoError("checkpoint: bad magic in " + path.string());
  if (detail::get<std::uint32_t>(in) != kCheckpointVersion) throw IoError("checkpoint: unsupported version");
  if (detail::get<std::uint32_t>(in) != sizeof(T)) throw IoError("checkpoint: scalar width mismatch");
  const auto meta_len = detail::get<std::uint64_t>(in);
  std::string text(meta_len, '\0');
  in.read(text.data(), std::streamsize(meta_len));
  if (!in) throw IoError("checkpoint: truncated metadata");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: bad metadata: ") + e.what());
  }
  LoadedCheckpoint<T> res;
  ModelConfig cfg;
  try {
    cfg = meta.at("model_config").get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: bad model config: ") + e.what());
  }
  res.model = init_model<T>(cfg, 0);
  res.metadata = meta.value("metadata", nlohmann::json::object());
  auto params = res.model.named_parameters();
  if (detail::get<std::uint64_t>(in) != params.size()) throw IoError("checkpoint: tensor count differs from config");
  for (auto& [name, t] : params) {
    const auto len = detail::get<std::uint64_t>(in);
    std::string stored(len, '\0');
    in.read(stored.data(), std::streamsize(len));
    if (!in || stored != name) throw IoError("checkpoint: expected tensor " + name);
    const auto rows = detail::get<std::uint64_t>(in);
    const auto cols = detail::get<std::uint64_t>(in);
    if (rows != t.rows() || cols != t.cols()) throw IoError("checkpoint: shape mismatch for " + name);
    auto dst = t.mutable_data();
    in.read(reinterpret_cast<char*>(dst.data()), std::streamsize(dst.size() * sizeof(T)));
    if (!in) throw IoError("checkpoint: truncated tensor " + name);
  }
  return res;
}

}  // namespace ctrsink
