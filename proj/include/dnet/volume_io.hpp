#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <variant>

#include "dnet/binio.hpp"
#include "dnet/tensor.hpp"
#include "dnet/training.hpp"

// On-disk volume format (all little-endian):
//   magic "DVOL" | u32 version = 1 | u8 dtype (0 = f32, 1 = u16 labels) |
//   u8 rank (4 = [C,D,H,W], 5 = [N,C,D,H,W]) | rank * u32 extents | payload
// Label volumes use rank 4 as [1, D, H, W] (single channel) or rank 5 as
// [N, 1, D, H, W].

namespace dnet {

using VolumeData = std::variant<DenseTensor<float>, train::LabelVolume>;

namespace detail_vol {

inline void check_volume_rank(const Extents& extents, const char* what) {
  if (extents.size() != 4 && extents.size() != 5) {
    throw std::invalid_argument(std::string(what) +
                                ": volume rank must be 4 or 5, got extents " +
                                extents_to_string(extents));
  }
}

template <typename T>
void write_volume(const std::string& path, const DenseTensor<T>& t,
                  std::uint8_t dtype) {
  check_volume_rank(t.extents, "volume save");
  std::string buf;
  buf += "DVOL";
  binio::put_u32(buf, 1);
  buf.push_back(static_cast<char>(dtype));
  buf.push_back(static_cast<char>(t.rank()));
  for (std::size_t e : t.extents) {
    binio::put_u32(buf, static_cast<std::uint32_t>(e));
  }
  binio::put_raw(buf, t.data.data(), t.data.size());
  binio::write_file(path, buf, "volume");
}

}  // namespace detail_vol

inline void save_volume(const std::string& path, const DenseTensor<float>& t) {
  detail_vol::write_volume(path, t, 0);
}

inline void save_volume(const std::string& path, const train::LabelVolume& t) {
  detail_vol::write_volume(path, t, 1);
}

inline VolumeData load_volume(const std::string& path) {
  const std::string buf = binio::read_file(path, "volume");
  binio::Reader r(buf, "volume");
  const std::string magic = r.bytes(4, "magic");
  if (magic != "DVOL") {
    throw std::runtime_error("volume: bad magic at byte offset 0 (expected 'DVOL')");
  }
  const std::uint32_t version = r.u32("version");
  if (version != 1) {
    throw std::runtime_error("volume: unsupported format version " +
                             std::to_string(version) +
                             " at byte offset 4 (expected 1)");
  }
  const std::uint8_t dtype = r.u8("dtype");
  if (dtype > 1) {
    throw std::runtime_error("volume: unknown dtype code " +
                             std::to_string(dtype) + " at byte offset 8");
  }
  const std::uint8_t rank = r.u8("rank");
  if (rank != 4 && rank != 5) {
    throw std::runtime_error("volume: rank must be 4 or 5, got " +
                             std::to_string(rank) + " at byte offset 9");
  }
  Extents extents(rank);
  std::uint64_t elems = 1;
  for (std::uint8_t a = 0; a < rank; ++a) {
    extents[a] = r.u32("extent");
    if (extents[a] == 0) {
      throw std::runtime_error("volume: zero extent at byte offset " +
                               std::to_string(r.pos - 4));
    }
    elems *= extents[a];
  }
  const std::size_t expect = elems * (dtype == 0 ? 4 : 2);
  if (buf.size() - r.pos != expect) {
    throw std::runtime_error(
        "volume: payload at byte offset " + std::to_string(r.pos) +
        " has " + std::to_string(buf.size() - r.pos) + " bytes, expected " +
        std::to_string(expect));
  }
  if (dtype == 0) {
    DenseTensor<float> t(extents);
    r.raw(t.data.data(), elems, "payload");
    return t;
  }
  train::LabelVolume t;
  t.extents = extents;
  t.data.resize(elems);
  r.raw(t.data.data(), elems, "payload");
  return t;
}

// Promotes a rank-4 [C,D,H,W] volume to the canonical [1,C,D,H,W].
inline DenseTensor<float> as_batched(DenseTensor<float> t) {
  detail_vol::check_volume_rank(t.extents, "volume");
  if (t.rank() == 4) {
    t.extents.insert(t.extents.begin(), 1);
  }
  return t;
}

}  // namespace dnet
