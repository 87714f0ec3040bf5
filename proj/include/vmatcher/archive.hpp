#pragma once

// Single-file weight archive:
//   8-byte magic "VMWEIGHT", u32 format version, u64 manifest length,
//   JSON manifest {config, arrays: [{name, shape, offset}], data_bytes},
//   then every array as raw little-endian float32, in manifest order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "vmatcher/model.hpp"

namespace vmatcher {

inline constexpr char kArchiveMagic[8] = {'V', 'M', 'W', 'E', 'I', 'G', 'H', 'T'};
inline constexpr std::uint32_t kArchiveVersion = 1;

static_assert(std::endian::native == std::endian::little, "archive IO assumes a little-endian host");

namespace detail {

template <typename U>
void put_raw(std::string& out, U v) {
  char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  out.append(b, sizeof(U));
}

template <typename U>
U get_raw(const std::string& in, std::size_t& pos, const std::string& path) {
  if (in.size() - pos < sizeof(U)) throw IoError(path + ": truncated archive header");
  U v;
  std::memcpy(&v, in.data() + pos, sizeof(U));
  pos += sizeof(U);
  return v;
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace detail

/// Serializes every array of the model (trainable weights and normalization
/// statistics) together with its configuration.
inline std::string archive_bytes(Model& model) {
  nlohmann::json manifest;
  manifest["config"] = model.config();
  manifest["arrays"] = nlohmann::json::array();
  std::string data;
  model.visit([&](const std::string& name, Tensor& t, bool) {
    manifest["arrays"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", data.size()}});
    for (float v : t.data()) detail::put_raw(data, v);
  });
  manifest["data_bytes"] = data.size();
  const std::string text = manifest.dump();
  std::string out(kArchiveMagic, sizeof kArchiveMagic);
  detail::put_raw(out, kArchiveVersion);
  detail::put_raw(out, static_cast<std::uint64_t>(text.size()));
  out += text;
  out += data;
  return out;
}

inline void save_model(Model& model, const std::string& path) {
  const std::string bytes = archive_bytes(model);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for " + path);
}

struct ParsedArchive {
  ModelConfig config;
  struct Entry {
    Shape shape;
    std::size_t offset = 0;
  };
  std::map<std::string, Entry> arrays;
  std::string data;
};

inline ParsedArchive parse_archive(const std::string& bytes, const std::string& path) {
  if (bytes.size() < sizeof kArchiveMagic || std::memcmp(bytes.data(), kArchiveMagic, sizeof kArchiveMagic) != 0)
    throw IoError(path + ": not a weight archive (bad magic)");
  std::size_t pos = sizeof kArchiveMagic;
  const auto version = detail::get_raw<std::uint32_t>(bytes, pos, path);
  if (version != kArchiveVersion)
    throw IoError(path + ": archive version " + std::to_string(version) + " is not supported (expected " +
                  std::to_string(kArchiveVersion) + ")");
  const auto len = detail::get_raw<std::uint64_t>(bytes, pos, path);
  if (bytes.size() - pos < len) throw IoError(path + ": truncated manifest");
  ParsedArchive a;
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                     bytes.begin() + static_cast<std::ptrdiff_t>(pos + len));
    a.config = manifest.at("config").get<ModelConfig>();
    for (const auto& e : manifest.at("arrays"))
      a.arrays[e.at("name").get<std::string>()] = {e.at("shape").get<Shape>(), e.at("offset").get<std::size_t>()};
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path + ": corrupt manifest (" + e.what() + ")");
  }
  pos += len;
  const auto data_bytes = manifest.value("data_bytes", std::size_t{0});
  if (bytes.size() - pos != data_bytes)
    throw IoError(path + ": truncated or oversized array data (" + std::to_string(bytes.size() - pos) + " of " +
                  std::to_string(data_bytes) + " bytes)");
  a.data = bytes.substr(pos);
  for (const auto& [name, e] : a.arrays)
    if (e.offset + numel(e.shape) * sizeof(float) > a.data.size())
      throw IoError(path + ": array '" + name + "' extends past the end of the data");
  return a;
}

/// Copies archived arrays into an existing model. Every model array must be
/// present with the same shape.
inline void load_weights(Model& model, const ParsedArchive& a, const std::string& path) {
  model.visit([&](const std::string& name, Tensor& t, bool) {
    auto it = a.arrays.find(name);
    if (it == a.arrays.end()) throw IoError(path + ": array '" + name + "' is missing");
    if (it->second.shape != t.shape())
      throw IoError(path + ": shape mismatch for array '" + name + "': archive " + to_string(it->second.shape) +
                    ", model " + to_string(t.shape()));
    std::memcpy(t.mutable_data().data(), a.data.data() + it->second.offset, t.size() * sizeof(float));
  });
}

inline void load_weights(Model& model, const std::string& path) {
  load_weights(model, parse_archive(detail::read_file(path), path), path);
  model.set_training(false);
}

/// Builds the archived configuration and fills it; ready for inference.
inline Model load_model(const std::string& path) {
  const ParsedArchive a = parse_archive(detail::read_file(path), path);
  Model m = Model::build(a.config, 0);
  load_weights(m, a, path);
  m.set_training(false);
  return m;
}

}  // namespace vmatcher
