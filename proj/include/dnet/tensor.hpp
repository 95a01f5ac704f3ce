#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dnet {

using Extents = std::vector<std::size_t>;

inline std::string extents_to_string(const Extents& e) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < e.size(); ++i) {
    if (i) os << ", ";
    os << e[i];
  }
  os << "]";
  return os.str();
}

inline std::size_t element_count(const Extents& e) {
  std::size_t n = 1;
  for (std::size_t x : e) n *= x;
  return n;
}

inline void check_extents(const Extents& e) {
  if (e.empty()) throw std::invalid_argument("tensor rank must be >= 1");
  for (std::size_t x : e) {
    if (x == 0) {
      throw std::invalid_argument("every tensor extent must be >= 1, got " +
                                  extents_to_string(e));
    }
  }
}

// Dense row-major tensor. The canonical feature layout is
// [N, C, D, H, W]; lower ranks are used for weights, biases and scalars.
template <typename T>
struct DenseTensor {
  Extents extents;
  std::vector<T> data;

  DenseTensor() = default;

  explicit DenseTensor(Extents e) : extents(std::move(e)) {
    check_extents(extents);
    data.assign(element_count(extents), T(0));
  }

  DenseTensor(Extents e, std::vector<T> d)
      : extents(std::move(e)), data(std::move(d)) {
    check_extents(extents);
    if (element_count(extents) != data.size()) {
      throw std::invalid_argument(
          "tensor data length " + std::to_string(data.size()) +
          " does not match extents " + extents_to_string(extents));
    }
  }

  static DenseTensor filled(Extents e, T v) {
    DenseTensor t(std::move(e));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return extents.size(); }

  // Rank-5 feature-map accessors.
  std::size_t n() const { return extents[0]; }
  std::size_t c() const { return extents[1]; }
  std::size_t d() const { return extents[2]; }
  std::size_t h() const { return extents[3]; }
  std::size_t w() const { return extents[4]; }
  std::size_t spatial_volume() const { return d() * h() * w(); }

  std::size_t idx5(std::size_t in, std::size_t ic, std::size_t iz,
                   std::size_t iy, std::size_t ix) const {
    return (((in * c() + ic) * d() + iz) * h() + iy) * w() + ix;
  }
  T& at5(std::size_t in, std::size_t ic, std::size_t iz, std::size_t iy,
         std::size_t ix) {
    return data[idx5(in, ic, iz, iy, ix)];
  }
  const T& at5(std::size_t in, std::size_t ic, std::size_t iz, std::size_t iy,
               std::size_t ix) const {
    return data[idx5(in, ic, iz, iy, ix)];
  }

  void require_rank(std::size_t r, const char* what) const {
    if (rank() != r) {
      throw std::invalid_argument(std::string(what) + ": expected rank " +
                                  std::to_string(r) + " tensor, got extents " +
                                  extents_to_string(extents));
    }
  }
};

template <typename To, typename From>
DenseTensor<To> cast_tensor(const DenseTensor<From>& t) {
  DenseTensor<To> out;
  out.extents = t.extents;
  out.data.resize(t.data.size());
  for (std::size_t i = 0; i < t.data.size(); ++i) {
    out.data[i] = static_cast<To>(t.data[i]);
  }
  return out;
}

template <typename T>
void ensure_finite(const DenseTensor<T>& t, const char* context) {
  for (const T& v : t.data) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw std::runtime_error(std::string("non-finite value produced by ") +
                               context);
    }
  }
}

// ---------------------------------------------------------------------------
// Convolution descriptor. Axis order everywhere is (D, H, W).
// ---------------------------------------------------------------------------

struct ConvSpec {
  std::array<int, 3> kernel{1, 1, 1};
  std::array<int, 3> stride{1, 1, 1};
  std::array<int, 3> dilation{1, 1, 1};
  std::array<int, 3> padding{0, 0, 0};
  int groups = 1;
  int in_channels = 1;
  int out_channels = 1;
  bool has_bias = true;

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (kernel[a] < 1 || stride[a] < 1 || dilation[a] < 1 || padding[a] < 0) {
        throw std::invalid_argument("invalid conv spec: kernel/stride/dilation "
                                    "must be >= 1 and padding >= 0");
      }
    }
    if (groups < 1 || in_channels < 1 || out_channels < 1) {
      throw std::invalid_argument("invalid conv spec: channel counts and "
                                  "groups must be >= 1");
    }
    if (in_channels % groups != 0 || out_channels % groups != 0) {
      throw std::invalid_argument(
          "invalid conv spec: groups=" + std::to_string(groups) +
          " must divide in_channels=" + std::to_string(in_channels) +
          " and out_channels=" + std::to_string(out_channels));
    }
  }

  // Dilation-aware kernel footprint along one axis.
  int effective_kernel(int axis) const {
    return dilation[axis] * (kernel[axis] - 1) + 1;
  }

  std::array<std::size_t, 3> out_spatial(
      const std::array<std::size_t, 3>& in) const {
    std::array<std::size_t, 3> out{};
    for (int a = 0; a < 3; ++a) {
      const long long l = static_cast<long long>(in[a]);
      const long long numer = l + 2LL * padding[a] - effective_kernel(a);
      if (numer < 0) {
        throw std::invalid_argument(
            "invalid conv spec: zero-sized output on axis " +
            std::to_string(a) + " (input extent " + std::to_string(l) +
            ", effective kernel " + std::to_string(effective_kernel(a)) +
            ", padding " + std::to_string(padding[a]) + ")");
      }
      out[a] = static_cast<std::size_t>(numer / stride[a] + 1);
    }
    return out;
  }

  std::array<std::size_t, 3> transposed_out_spatial(
      const std::array<std::size_t, 3>& in) const {
    std::array<std::size_t, 3> out{};
    for (int a = 0; a < 3; ++a) {
      const long long l = static_cast<long long>(in[a]);
      const long long o =
          (l - 1) * stride[a] - 2LL * padding[a] + effective_kernel(a);
      if (o < 1) {
        throw std::invalid_argument(
            "invalid transposed conv spec: zero-sized output on axis " +
            std::to_string(a));
      }
      out[a] = static_cast<std::size_t>(o);
    }
    return out;
  }

  // conv3d weight layout: [out_channels, in_channels/groups, kD, kH, kW]
  Extents weight_extents() const {
    return {static_cast<std::size_t>(out_channels),
            static_cast<std::size_t>(in_channels / groups),
            static_cast<std::size_t>(kernel[0]),
            static_cast<std::size_t>(kernel[1]),
            static_cast<std::size_t>(kernel[2])};
  }

  // transposed_conv3d weight layout: [in_channels, out_channels/groups, ...]
  Extents transposed_weight_extents() const {
    return {static_cast<std::size_t>(in_channels),
            static_cast<std::size_t>(out_channels / groups),
            static_cast<std::size_t>(kernel[0]),
            static_cast<std::size_t>(kernel[1]),
            static_cast<std::size_t>(kernel[2])};
  }

  std::size_t weight_count() const { return element_count(weight_extents()); }

  // Shape-preserving padding for stride-1 use: p = d * (k - 1) / 2.
  static std::array<int, 3> same_padding(const std::array<int, 3>& kernel,
                                         const std::array<int, 3>& dilation) {
    std::array<int, 3> p{};
    for (int a = 0; a < 3; ++a) p[a] = dilation[a] * (kernel[a] - 1) / 2;
    return p;
  }
};

inline ConvSpec make_conv_spec(int in_channels, int out_channels, int kernel,
                               int stride = 1, int dilation = 1,
                               int groups = 1, bool has_bias = true) {
  ConvSpec s;
  s.kernel = {kernel, kernel, kernel};
  s.stride = {stride, stride, stride};
  s.dilation = {dilation, dilation, dilation};
  s.padding = ConvSpec::same_padding(s.kernel, s.dilation);
  s.groups = groups;
  s.in_channels = in_channels;
  s.out_channels = out_channels;
  s.has_bias = has_bias;
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Deterministic random streams. Engines are always explicitly seeded and
// converted to floats by hand so results do not depend on library
// distribution internals.
// ---------------------------------------------------------------------------

inline double u64_to_unit(std::uint64_t x) {
  return static_cast<double>(x >> 11) * 0x1.0p-53;
}

struct SplitMix64 {
  std::uint64_t state = 0;
  explicit SplitMix64(std::uint64_t seed) : state(seed) {}
  std::uint64_t next() {
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  double unit() { return u64_to_unit(next()); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * unit(); }
  // Inclusive integer range.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    return lo + static_cast<std::int64_t>(
                    next() % static_cast<std::uint64_t>(hi - lo + 1));
  }
};

// Box-Muller over a SplitMix64 stream.
struct GaussianSource {
  SplitMix64 rng;
  bool has_spare = false;
  double spare = 0.0;
  explicit GaussianSource(std::uint64_t seed) : rng(seed) {}
  double next() {
    if (has_spare) {
      has_spare = false;
      return spare;
    }
    double u1 = rng.unit();
    while (u1 <= 0.0) u1 = rng.unit();
    const double u2 = rng.unit();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare = r * std::sin(theta);
    has_spare = true;
    return r * std::cos(theta);
  }
};

}  // namespace dnet
