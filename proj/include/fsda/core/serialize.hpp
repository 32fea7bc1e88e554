#pragma once

// Checkpoint container: magic + JSON header + packed f32 blobs.
// Native little-endian layout; these files live and die inside one run tree.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "fsda/core/errors.hpp"
#include "fsda/core/nn.hpp"
#include "json.hpp"

namespace fsda {

inline constexpr char kCkptMagic[8] = {'F', 'S', 'D', 'A', 'C', 'K', 'P', '1'};

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct Checkpoint {
  nlohmann::json meta;
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor* find(const std::string& name) const {
    for (auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

inline void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& meta,
                            const std::vector<CheckpointTensor>& tensors) {
  nlohmann::json hdr;
  hdr["meta"] = meta;
  hdr["tensors"] = nlohmann::json::array();
  for (auto& t : tensors) hdr["tensors"].push_back({{"name", t.name}, {"shape", t.shape}});
  std::string hs = hdr.dump();
  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw MissingArtifactError("cannot open for write: " + path.string());
  f.write(kCkptMagic, 8);
  uint64_t hlen = hs.size();
  f.write(reinterpret_cast<const char*>(&hlen), 8);
  f.write(hs.data(), (std::streamsize)hs.size());
  for (auto& t : tensors) f.write(reinterpret_cast<const char*>(t.data.data()), (std::streamsize)t.data.size() * 4);
  if (!f) throw MissingArtifactError("write failed: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingArtifactError("checkpoint not found: " + path.string());
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kCkptMagic, 8) != 0)
    throw MissingArtifactError("bad checkpoint magic: " + path.string());
  uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), 8);
  if (!f || hlen > (1ull << 30)) throw MissingArtifactError("bad checkpoint header: " + path.string());
  std::string hs(hlen, '\0');
  f.read(hs.data(), (std::streamsize)hlen);
  nlohmann::json hdr = nlohmann::json::parse(hs, nullptr, false);
  if (hdr.is_discarded()) throw MissingArtifactError("corrupt checkpoint header: " + path.string());
  Checkpoint ck;
  ck.meta = hdr.value("meta", nlohmann::json::object());
  for (auto& jt : hdr["tensors"]) {
    CheckpointTensor t;
    t.name = jt["name"].get<std::string>();
    t.shape = jt["shape"].get<Shape>();
    t.data.resize((size_t)shape_numel(t.shape));
    f.read(reinterpret_cast<char*>(t.data.data()), (std::streamsize)t.data.size() * 4);
    if (!f) throw MissingArtifactError("truncated checkpoint: " + path.string());
    ck.tensors.push_back(std::move(t));
  }
  return ck;
}

inline std::vector<CheckpointTensor> snapshot(const NamedParams<float>& ps) {
  std::vector<CheckpointTensor> out;
  out.reserve(ps.size());
  for (auto& [name, p] : ps) out.push_back({name, p.shape(), p.vals()});
  return out;
}

/// Strict by-name restore: every param must be present with matching shape.
inline void restore(NamedParams<float>& ps, const Checkpoint& ck) {
  for (auto& [name, p] : ps) {
    const CheckpointTensor* t = ck.find(name);
    if (!t) throw MissingArtifactError("checkpoint missing tensor: " + name);
    if (t->shape != p.shape()) throw MissingArtifactError("checkpoint shape mismatch for " + name);
    std::copy(t->data.begin(), t->data.end(), p.data());
  }
}

/// FNV-1a over parameter bytes in listing order; used to assert tensors that
/// must stay frozen actually did.
inline uint64_t fnv1a_params(const NamedParams<float>& ps) {
  uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* ptr, size_t n) {
    const unsigned char* p = static_cast<const unsigned char*>(ptr);
    for (size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  };
  for (auto& [name, p] : ps) {
    mix(name.data(), name.size());
    mix(p.data(), (size_t)p.numel() * sizeof(float));
  }
  return h;
}

}  // namespace fsda
