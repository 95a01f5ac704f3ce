#pragma once

#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <vector>

// Effective receptive field of a convolution cascade along one axis:
//   R_i = R_{i-1} + (k_i - 1) * j_i
// with R_0 = 1, k_i the dilation-aware kernel extent d*(k-1)+1, and the
// jump j_i the product of all preceding strides.

namespace dnet::analysis {

struct ErfLayer {
  int kernel = 1;
  int dilation = 1;
  int stride = 1;
};

inline std::int64_t compute_erf(const std::vector<ErfLayer>& layers) {
  if (layers.empty()) {
    throw std::invalid_argument("compute_erf: layer list must be non-empty");
  }
  std::int64_t r = 1;
  std::int64_t jump = 1;
  for (const ErfLayer& l : layers) {
    if (l.kernel < 1 || l.dilation < 1 || l.stride < 1) {
      throw std::invalid_argument(
          "compute_erf: kernel, dilation and stride must be >= 1");
    }
    const std::int64_t k_eff =
        static_cast<std::int64_t>(l.dilation) * (l.kernel - 1) + 1;
    r += (k_eff - 1) * jump;
    jump *= l.stride;
  }
  return r;
}

inline std::int64_t compute_erf(std::initializer_list<ErfLayer> layers) {
  return compute_erf(std::vector<ErfLayer>(layers));
}

}  // namespace dnet::analysis
