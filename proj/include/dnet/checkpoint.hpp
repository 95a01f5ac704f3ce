#pragma once

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dnet/binio.hpp"
#include "dnet/model.hpp"
#include "dnet/tensor.hpp"

// WeightStore: the ordered parameter-path -> tensor map behind checkpoints.
//
// Checkpoint layout (all little-endian):
//   magic "DNW1" | u32 version = 1 | u64 parameter count
//   per parameter: u16 path length | UTF-8 path | u8 rank |
//                  rank * u32 extents | raw f32 data

namespace dnet {

struct WeightStore {
  std::uint32_t version = 1;
  std::uint64_t config_hash = 0;  // schema hash over (path, extents)
  std::vector<std::pair<std::string, DenseTensor<float>>> entries;

  std::uint64_t total_elements() const {
    std::uint64_t n = 0;
    for (const auto& [path, t] : entries) n += t.size();
    return n;
  }

  const DenseTensor<float>* find(const std::string& path) const {
    for (const auto& [p, t] : entries) {
      if (p == path) return &t;
    }
    return nullptr;
  }
};

// FNV-1a over the ordered (path, extents) schema; identifies an architecture
// independent of weight values.
inline std::uint64_t schema_hash(const WeightStore& store) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* data, std::size_t len) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [path, t] : store.entries) {
    mix(path.data(), path.size());
    const std::uint8_t rank = static_cast<std::uint8_t>(t.rank());
    mix(&rank, 1);
    for (std::size_t e : t.extents) {
      const std::uint32_t x = static_cast<std::uint32_t>(e);
      mix(&x, 4);
    }
  }
  return h;
}

template <typename T>
WeightStore store_from_model(Model<T>& m) {
  WeightStore store;
  m.visit([&store](const std::string& path, Param<T>& p, ParamInit) {
    store.entries.emplace_back(path, cast_tensor<float>(p.value));
  });
  store.config_hash = schema_hash(store);
  return store;
}

// Strict loads require the path sets to match exactly; force loads copy the
// matching entries and leave the rest at their built values.
template <typename T>
void load_model_from_store(Model<T>& m, const WeightStore& store,
                           bool force = false) {
  std::unordered_map<std::string, const DenseTensor<float>*> by_path;
  for (const auto& [path, t] : store.entries) {
    if (!by_path.emplace(path, &t).second) {
      throw std::runtime_error("checkpoint contains duplicate parameter path '" +
                               path + "'");
    }
  }

  std::vector<std::string> missing;  // in the model but not the store
  m.visit([&](const std::string& path, Param<T>& p, ParamInit) {
    auto it = by_path.find(path);
    if (it == by_path.end()) {
      missing.push_back(path);
      return;
    }
    if (it->second->extents != p.value.extents) {
      if (!force) {
        throw std::runtime_error("checkpoint parameter '" + path +
                                 "' has extents " +
                                 extents_to_string(it->second->extents) +
                                 ", model expects " +
                                 extents_to_string(p.value.extents));
      }
      by_path.erase(it);
      return;
    }
    p.value = cast_tensor<T>(*it->second);
    by_path.erase(it);
  });

  if (!force && (!missing.empty() || !by_path.empty())) {
    std::string msg = "checkpoint does not match the model configuration;";
    if (!missing.empty()) {
      msg += " missing parameter paths:";
      for (const auto& p : missing) msg += " " + p;
      msg += ";";
    }
    if (!by_path.empty()) {
      msg += " extra parameter paths:";
      std::vector<std::string> extra;
      for (const auto& [p, t] : by_path) extra.push_back(p);
      std::sort(extra.begin(), extra.end());
      for (const auto& p : extra) msg += " " + p;
    }
    throw std::runtime_error(msg);
  }
}

// ---------------------------------------------------------------------------
// Binary IO
// ---------------------------------------------------------------------------

inline void save_weights(const WeightStore& store, const std::string& path) {
  std::string buf;
  buf += "DNW1";
  binio::put_u32(buf, store.version);
  binio::put_u64(buf, static_cast<std::uint64_t>(store.entries.size()));
  for (const auto& [name, t] : store.entries) {
    if (name.size() > 0xffff) {
      throw std::runtime_error("checkpoint: parameter path too long: " + name);
    }
    binio::put_u16(buf, static_cast<std::uint16_t>(name.size()));
    buf += name;
    buf.push_back(static_cast<char>(t.rank()));
    for (std::size_t e : t.extents) {
      binio::put_u32(buf, static_cast<std::uint32_t>(e));
    }
    binio::put_raw(buf, t.data.data(), t.data.size());
  }
  binio::write_file(path, buf, "checkpoint");
}

inline WeightStore load_weights(const std::string& path) {
  const std::string buf = binio::read_file(path, "checkpoint");
  binio::Reader r(buf, "checkpoint");
  const std::string magic = r.bytes(4, "magic");
  if (magic != "DNW1") {
    throw std::runtime_error(
        "checkpoint: bad magic at byte offset 0 (expected 'DNW1')");
  }
  WeightStore store;
  store.version = r.u32("version");
  if (store.version != 1) {
    throw std::runtime_error("checkpoint: unsupported format version " +
                             std::to_string(store.version) +
                             " at byte offset 4 (expected 1)");
  }
  const std::uint64_t count = r.u64("parameter count");
  store.entries.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint16_t len = r.u16("path length");
    std::string name = r.bytes(len, "path");
    const std::uint8_t rank = r.u8("rank");
    if (rank == 0 || rank > 8) {
      throw std::runtime_error("checkpoint: invalid rank " +
                               std::to_string(rank) + " at byte offset " +
                               std::to_string(r.pos - 1));
    }
    Extents extents(rank);
    std::uint64_t elems = 1;
    for (std::uint8_t a = 0; a < rank; ++a) {
      extents[a] = r.u32("extent");
      elems *= extents[a];
    }
    DenseTensor<float> t(extents);
    r.raw(t.data.data(), elems, "tensor data");
    store.entries.emplace_back(std::move(name), std::move(t));
  }
  if (r.pos != buf.size()) {
    throw std::runtime_error("checkpoint: trailing garbage at byte offset " +
                             std::to_string(r.pos));
  }
  store.config_hash = schema_hash(store);
  return store;
}

}  // namespace dnet
