#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dnet/tensor.hpp"

// Forward kernels and their backward companions. Every function is a pure
// map from inputs to freshly allocated outputs; reductions accumulate in
// double with a fixed row-major order so runs are reproducible.

namespace dnet::ops {

template <typename T>
void check_feature_map(const DenseTensor<T>& t, const char* what) {
  t.require_rank(5, what);
}

// ---------------------------------------------------------------------------
// conv3d
// ---------------------------------------------------------------------------

template <typename T>
void check_conv_args(const DenseTensor<T>& input, const DenseTensor<T>& weights,
                     const DenseTensor<T>* bias, const ConvSpec& spec,
                     bool transposed) {
  spec.validate();
  check_feature_map(input, transposed ? "transposed_conv3d" : "conv3d");
  const Extents expect =
      transposed ? spec.transposed_weight_extents() : spec.weight_extents();
  if (weights.extents != expect) {
    throw std::invalid_argument(
        std::string(transposed ? "transposed_conv3d" : "conv3d") +
        ": weight extents " + extents_to_string(weights.extents) +
        " do not match spec " + extents_to_string(expect));
  }
  if (input.c() != static_cast<std::size_t>(spec.in_channels)) {
    throw std::invalid_argument(
        std::string(transposed ? "transposed_conv3d" : "conv3d") +
        ": input channel extent " + std::to_string(input.c()) +
        " does not match spec in_channels " + std::to_string(spec.in_channels));
  }
  if (spec.has_bias) {
    if (bias == nullptr ||
        bias->extents != Extents{static_cast<std::size_t>(spec.out_channels)}) {
      throw std::invalid_argument("conv: bias must have extents [out_channels]");
    }
  } else if (bias != nullptr) {
    throw std::invalid_argument("conv: bias given but spec.has_bias is false");
  }
}

template <typename T>
DenseTensor<T> conv3d(const DenseTensor<T>& input, const DenseTensor<T>& weights,
                      const DenseTensor<T>* bias, const ConvSpec& spec) {
  check_conv_args(input, weights, bias, spec, false);
  const auto os = spec.out_spatial({input.d(), input.h(), input.w()});
  const std::size_t N = input.n();
  const std::size_t OC = static_cast<std::size_t>(spec.out_channels);
  DenseTensor<T> out({N, OC, os[0], os[1], os[2]});

  const std::size_t icg = static_cast<std::size_t>(spec.in_channels / spec.groups);
  const std::size_t ocg = static_cast<std::size_t>(spec.out_channels / spec.groups);
  const long long ID = static_cast<long long>(input.d());
  const long long IH = static_cast<long long>(input.h());
  const long long IW = static_cast<long long>(input.w());
  const std::size_t kd = weights.extents[2], kh = weights.extents[3],
                    kw = weights.extents[4];

  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t g = 0; g < static_cast<std::size_t>(spec.groups); ++g) {
      for (std::size_t ol = 0; ol < ocg; ++ol) {
        const std::size_t oc = g * ocg + ol;
        const T* wbase = weights.data.data() + oc * icg * kd * kh * kw;
        const double b = spec.has_bias ? static_cast<double>(bias->data[oc]) : 0.0;
        for (std::size_t oz = 0; oz < os[0]; ++oz) {
          for (std::size_t oy = 0; oy < os[1]; ++oy) {
            for (std::size_t ox = 0; ox < os[2]; ++ox) {
              double acc = b;
              for (std::size_t il = 0; il < icg; ++il) {
                const std::size_t ic = g * icg + il;
                const T* ibase = input.data.data() +
                                 (n * input.c() + ic) * input.spatial_volume();
                const T* wtap = wbase + il * kd * kh * kw;
                for (std::size_t tz = 0; tz < kd; ++tz) {
                  const long long iz = static_cast<long long>(oz) * spec.stride[0] -
                                       spec.padding[0] +
                                       static_cast<long long>(tz) * spec.dilation[0];
                  if (iz < 0 || iz >= ID) continue;
                  for (std::size_t ty = 0; ty < kh; ++ty) {
                    const long long iy = static_cast<long long>(oy) * spec.stride[1] -
                                         spec.padding[1] +
                                         static_cast<long long>(ty) * spec.dilation[1];
                    if (iy < 0 || iy >= IH) continue;
                    for (std::size_t tx = 0; tx < kw; ++tx) {
                      const long long ix = static_cast<long long>(ox) * spec.stride[2] -
                                           spec.padding[2] +
                                           static_cast<long long>(tx) * spec.dilation[2];
                      if (ix < 0 || ix >= IW) continue;
                      acc += static_cast<double>(ibase[(iz * IH + iy) * IW + ix]) *
                             static_cast<double>(wtap[(tz * kh + ty) * kw + tx]);
                    }
                  }
                }
              }
              out.at5(n, oc, oz, oy, ox) = static_cast<T>(acc);
            }
          }
        }
      }
    }
  }
  ensure_finite(out, "conv3d");
  return out;
}

template <typename T>
struct ConvGrads {
  DenseTensor<T> wrt_input;
  DenseTensor<T> wrt_weights;
  DenseTensor<T> wrt_bias;  // empty when the spec has no bias
};

template <typename T>
ConvGrads<T> conv3d_backward(const DenseTensor<T>& input,
                             const DenseTensor<T>& weights, const ConvSpec& spec,
                             const DenseTensor<T>& grad_out) {
  const auto os = spec.out_spatial({input.d(), input.h(), input.w()});
  const std::size_t N = input.n();
  std::vector<double> gin(input.size(), 0.0);
  std::vector<double> gw(weights.size(), 0.0);
  std::vector<double> gb(static_cast<std::size_t>(spec.out_channels), 0.0);

  const std::size_t icg = static_cast<std::size_t>(spec.in_channels / spec.groups);
  const std::size_t ocg = static_cast<std::size_t>(spec.out_channels / spec.groups);
  const long long ID = static_cast<long long>(input.d());
  const long long IH = static_cast<long long>(input.h());
  const long long IW = static_cast<long long>(input.w());
  const std::size_t kd = weights.extents[2], kh = weights.extents[3],
                    kw = weights.extents[4];

  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t g = 0; g < static_cast<std::size_t>(spec.groups); ++g) {
      for (std::size_t ol = 0; ol < ocg; ++ol) {
        const std::size_t oc = g * ocg + ol;
        for (std::size_t oz = 0; oz < os[0]; ++oz) {
          for (std::size_t oy = 0; oy < os[1]; ++oy) {
            for (std::size_t ox = 0; ox < os[2]; ++ox) {
              const double go =
                  static_cast<double>(grad_out.at5(n, oc, oz, oy, ox));
              if (spec.has_bias) gb[oc] += go;
              for (std::size_t il = 0; il < icg; ++il) {
                const std::size_t ic = g * icg + il;
                const std::size_t ioff =
                    (n * input.c() + ic) * input.spatial_volume();
                const std::size_t woff = (oc * icg + il) * kd * kh * kw;
                for (std::size_t tz = 0; tz < kd; ++tz) {
                  const long long iz = static_cast<long long>(oz) * spec.stride[0] -
                                       spec.padding[0] +
                                       static_cast<long long>(tz) * spec.dilation[0];
                  if (iz < 0 || iz >= ID) continue;
                  for (std::size_t ty = 0; ty < kh; ++ty) {
                    const long long iy = static_cast<long long>(oy) * spec.stride[1] -
                                         spec.padding[1] +
                                         static_cast<long long>(ty) * spec.dilation[1];
                    if (iy < 0 || iy >= IH) continue;
                    for (std::size_t tx = 0; tx < kw; ++tx) {
                      const long long ix = static_cast<long long>(ox) * spec.stride[2] -
                                           spec.padding[2] +
                                           static_cast<long long>(tx) * spec.dilation[2];
                      if (ix < 0 || ix >= IW) continue;
                      const std::size_t ii =
                          ioff + static_cast<std::size_t>((iz * IH + iy) * IW + ix);
                      const std::size_t wi =
                          woff + (tz * kh + ty) * kw + tx;
                      gin[ii] += go * static_cast<double>(weights.data[wi]);
                      gw[wi] += go * static_cast<double>(input.data[ii]);
                    }
                  }
                }
              }
            }
          }
        }
      }
    }
  }

  ConvGrads<T> g;
  g.wrt_input = DenseTensor<T>(input.extents);
  for (std::size_t i = 0; i < gin.size(); ++i)
    g.wrt_input.data[i] = static_cast<T>(gin[i]);
  g.wrt_weights = DenseTensor<T>(weights.extents);
  for (std::size_t i = 0; i < gw.size(); ++i)
    g.wrt_weights.data[i] = static_cast<T>(gw[i]);
  if (spec.has_bias) {
    g.wrt_bias = DenseTensor<T>({static_cast<std::size_t>(spec.out_channels)});
    for (std::size_t i = 0; i < gb.size(); ++i)
      g.wrt_bias.data[i] = static_cast<T>(gb[i]);
  }
  return g;
}

// ---------------------------------------------------------------------------
// transposed_conv3d (scatter formulation: the adjoint of conv3d w.r.t. input)
// ---------------------------------------------------------------------------

template <typename T>
DenseTensor<T> transposed_conv3d(const DenseTensor<T>& input,
                                 const DenseTensor<T>& weights,
                                 const DenseTensor<T>* bias,
                                 const ConvSpec& spec) {
  check_conv_args(input, weights, bias, spec, true);
  const auto os = spec.transposed_out_spatial({input.d(), input.h(), input.w()});
  const std::size_t N = input.n();
  const std::size_t OC = static_cast<std::size_t>(spec.out_channels);
  DenseTensor<T> out({N, OC, os[0], os[1], os[2]});
  std::vector<double> acc(out.size(), 0.0);

  const std::size_t icg = static_cast<std::size_t>(spec.in_channels / spec.groups);
  const std::size_t ocg = static_cast<std::size_t>(spec.out_channels / spec.groups);
  const long long OD = static_cast<long long>(os[0]);
  const long long OH = static_cast<long long>(os[1]);
  const long long OW = static_cast<long long>(os[2]);
  const std::size_t kd = weights.extents[2], kh = weights.extents[3],
                    kw = weights.extents[4];

  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t g = 0; g < static_cast<std::size_t>(spec.groups); ++g) {
      for (std::size_t il = 0; il < icg; ++il) {
        const std::size_t ic = g * icg + il;
        for (std::size_t iz = 0; iz < input.d(); ++iz) {
          for (std::size_t iy = 0; iy < input.h(); ++iy) {
            for (std::size_t ix = 0; ix < input.w(); ++ix) {
              const double v = static_cast<double>(input.at5(n, ic, iz, iy, ix));
              for (std::size_t ol = 0; ol < ocg; ++ol) {
                const std::size_t oc = g * ocg + ol;
                const std::size_t ooff = (n * OC + oc) * os[0] * os[1] * os[2];
                const std::size_t woff = (ic * ocg + ol) * kd * kh * kw;
                for (std::size_t tz = 0; tz < kd; ++tz) {
                  const long long oz = static_cast<long long>(iz) * spec.stride[0] -
                                       spec.padding[0] +
                                       static_cast<long long>(tz) * spec.dilation[0];
                  if (oz < 0 || oz >= OD) continue;
                  for (std::size_t ty = 0; ty < kh; ++ty) {
                    const long long oy = static_cast<long long>(iy) * spec.stride[1] -
                                         spec.padding[1] +
                                         static_cast<long long>(ty) * spec.dilation[1];
                    if (oy < 0 || oy >= OH) continue;
                    for (std::size_t tx = 0; tx < kw; ++tx) {
                      const long long ox = static_cast<long long>(ix) * spec.stride[2] -
                                           spec.padding[2] +
                                           static_cast<long long>(tx) * spec.dilation[2];
                      if (ox < 0 || ox >= OW) continue;
                      acc[ooff + static_cast<std::size_t>((oz * OH + oy) * OW + ox)] +=
                          v * static_cast<double>(
                                  weights.data[woff + (tz * kh + ty) * kw + tx]);
                    }
                  }
                }
              }
            }
          }
        }
      }
    }
  }

  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t oc = 0; oc < OC; ++oc) {
      const double b = spec.has_bias ? static_cast<double>(bias->data[oc]) : 0.0;
      const std::size_t off = (n * OC + oc) * os[0] * os[1] * os[2];
      for (std::size_t i = 0; i < os[0] * os[1] * os[2]; ++i) {
        out.data[off + i] = static_cast<T>(acc[off + i] + b);
      }
    }
  }
  ensure_finite(out, "transposed_conv3d");
  return out;
}

template <typename T>
ConvGrads<T> transposed_conv3d_backward(const DenseTensor<T>& input,
                                        const DenseTensor<T>& weights,
                                        const ConvSpec& spec,
                                        const DenseTensor<T>& grad_out) {
  const auto os = spec.transposed_out_spatial({input.d(), input.h(), input.w()});
  const std::size_t N = input.n();
  std::vector<double> gin(input.size(), 0.0);
  std::vector<double> gw(weights.size(), 0.0);
  std::vector<double> gb(static_cast<std::size_t>(spec.out_channels), 0.0);

  const std::size_t icg = static_cast<std::size_t>(spec.in_channels / spec.groups);
  const std::size_t ocg = static_cast<std::size_t>(spec.out_channels / spec.groups);
  const long long OD = static_cast<long long>(os[0]);
  const long long OH = static_cast<long long>(os[1]);
  const long long OW = static_cast<long long>(os[2]);
  const std::size_t OC = static_cast<std::size_t>(spec.out_channels);
  const std::size_t kd = weights.extents[2], kh = weights.extents[3],
                    kw = weights.extents[4];

  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t g = 0; g < static_cast<std::size_t>(spec.groups); ++g) {
      for (std::size_t il = 0; il < icg; ++il) {
        const std::size_t ic = g * icg + il;
        for (std::size_t iz = 0; iz < input.d(); ++iz) {
          for (std::size_t iy = 0; iy < input.h(); ++iy) {
            for (std::size_t ix = 0; ix < input.w(); ++ix) {
              const std::size_t ii = input.idx5(n, ic, iz, iy, ix);
              const double v = static_cast<double>(input.data[ii]);
              double gi = 0.0;
              for (std::size_t ol = 0; ol < ocg; ++ol) {
                const std::size_t oc = g * ocg + ol;
                const std::size_t ooff = (n * OC + oc) * os[0] * os[1] * os[2];
                const std::size_t woff = (ic * ocg + ol) * kd * kh * kw;
                for (std::size_t tz = 0; tz < kd; ++tz) {
                  const long long oz = static_cast<long long>(iz) * spec.stride[0] -
                                       spec.padding[0] +
                                       static_cast<long long>(tz) * spec.dilation[0];
                  if (oz < 0 || oz >= OD) continue;
                  for (std::size_t ty = 0; ty < kh; ++ty) {
                    const long long oy = static_cast<long long>(iy) * spec.stride[1] -
                                         spec.padding[1] +
                                         static_cast<long long>(ty) * spec.dilation[1];
                    if (oy < 0 || oy >= OH) continue;
                    for (std::size_t tx = 0; tx < kw; ++tx) {
                      const long long ox = static_cast<long long>(ix) * spec.stride[2] -
                                           spec.padding[2] +
                                           static_cast<long long>(tx) * spec.dilation[2];
                      if (ox < 0 || ox >= OW) continue;
                      const double go = static_cast<double>(
                          grad_out.data[ooff +
                                        static_cast<std::size_t>(
                                            (oz * OH + oy) * OW + ox)]);
                      const std::size_t wi = woff + (tz * kh + ty) * kw + tx;
                      gi += go * static_cast<double>(weights.data[wi]);
                      gw[wi] += go * v;
                    }
                  }
                }
              }
              gin[ii] += gi;
            }
          }
        }
      }
    }
  }
  if (spec.has_bias) {
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t oc = 0; oc < OC; ++oc) {
        const std::size_t off = (n * OC + oc) * os[0] * os[1] * os[2];
        for (std::size_t i = 0; i < os[0] * os[1] * os[2]; ++i) {
          gb[oc] += static_cast<double>(grad_out.data[off + i]);
        }
      }
    }
  }

  ConvGrads<T> g;
  g.wrt_input = DenseTensor<T>(input.extents);
  for (std::size_t i = 0; i < gin.size(); ++i)
    g.wrt_input.data[i] = static_cast<T>(gin[i]);
  g.wrt_weights = DenseTensor<T>(weights.extents);
  for (std::size_t i = 0; i < gw.size(); ++i)
    g.wrt_weights.data[i] = static_cast<T>(gw[i]);
  if (spec.has_bias) {
    g.wrt_bias = DenseTensor<T>({OC});
    for (std::size_t i = 0; i < gb.size(); ++i)
      g.wrt_bias.data[i] = static_cast<T>(gb[i]);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

enum class ChannelStat { mean, max };

template <typename T>
DenseTensor<T> channel_stats_pool(const DenseTensor<T>& input, ChannelStat kind) {
  check_feature_map(input, "channel_stats_pool");
  const std::size_t C = input.c();
  const std::size_t vol = input.spatial_volume();
  DenseTensor<T> out({input.n(), 1, input.d(), input.h(), input.w()});
  for (std::size_t n = 0; n < input.n(); ++n) {
    const T* base = input.data.data() + n * C * vol;
    T* obase = out.data.data() + n * vol;
    for (std::size_t v = 0; v < vol; ++v) {
      if (kind == ChannelStat::mean) {
        double acc = 0.0;
        for (std::size_t c = 0; c < C; ++c) acc += static_cast<double>(base[c * vol + v]);
        obase[v] = static_cast<T>(acc / static_cast<double>(C));
      } else {
        T m = base[v];
        for (std::size_t c = 1; c < C; ++c) m = std::max(m, base[c * vol + v]);
        obase[v] = m;
      }
    }
  }
  ensure_finite(out, "channel_stats_pool");
  return out;
}

// Ties in the max pool route the gradient to the lowest channel index.
template <typename T>
DenseTensor<T> channel_stats_pool_backward(const DenseTensor<T>& input,
                                           ChannelStat kind,
                                           const DenseTensor<T>& grad_out) {
  const std::size_t C = input.c();
  const std::size_t vol = input.spatial_volume();
  DenseTensor<T> gin(input.extents);
  for (std::size_t n = 0; n < input.n(); ++n) {
    const T* base = input.data.data() + n * C * vol;
    const T* gbase = grad_out.data.data() + n * vol;
    T* obase = gin.data.data() + n * C * vol;
    for (std::size_t v = 0; v < vol; ++v) {
      if (kind == ChannelStat::mean) {
        const T g = static_cast<T>(static_cast<double>(gbase[v]) /
                                   static_cast<double>(C));
        for (std::size_t c = 0; c < C; ++c) obase[c * vol + v] += g;
      } else {
        std::size_t arg = 0;
        T m = base[v];
        for (std::size_t c = 1; c < C; ++c) {
          if (base[c * vol + v] > m) {
            m = base[c * vol + v];
            arg = c;
          }
        }
        obase[arg * vol + v] += gbase[v];
      }
    }
  }
  return gin;
}

template <typename T>
DenseTensor<T> global_avg_pool(const DenseTensor<T>& input) {
  check_feature_map(input, "global_avg_pool");
  const std::size_t vol = input.spatial_volume();
  DenseTensor<T> out({input.n(), input.c(), 1, 1, 1});
  for (std::size_t n = 0; n < input.n(); ++n) {
    for (std::size_t c = 0; c < input.c(); ++c) {
      const T* base = input.data.data() + (n * input.c() + c) * vol;
      double acc = 0.0;
      for (std::size_t v = 0; v < vol; ++v) acc += static_cast<double>(base[v]);
      out.data[n * input.c() + c] = static_cast<T>(acc / static_cast<double>(vol));
    }
  }
  ensure_finite(out, "global_avg_pool");
  return out;
}

template <typename T>
DenseTensor<T> global_avg_pool_backward(const Extents& input_extents,
                                        const DenseTensor<T>& grad_out) {
  DenseTensor<T> gin(input_extents);
  const std::size_t C = input_extents[1];
  const std::size_t vol = input_extents[2] * input_extents[3] * input_extents[4];
  for (std::size_t n = 0; n < input_extents[0]; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const T g = static_cast<T>(static_cast<double>(grad_out.data[n * C + c]) /
                                 static_cast<double>(vol));
      T* base = gin.data.data() + (n * C + c) * vol;
      for (std::size_t v = 0; v < vol; ++v) base[v] = g;
    }
  }
  return gin;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

enum class Activation { sigmoid, gelu, leaky_relu };

inline double sigmoid_scalar(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Exact Gaussian-CDF GELU: x * Phi(x).
inline double gelu_scalar(double x) {
  return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244));
}

inline double gelu_grad_scalar(double x) {
  const double phi = std::exp(-0.5 * x * x) * 0.3989422804014326779;  // pdf
  const double Phi = 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
  return Phi + x * phi;
}

template <typename T>
DenseTensor<T> activation(const DenseTensor<T>& input, Activation kind,
                          double alpha = 0.01) {
  DenseTensor<T> out;
  out.extents = input.extents;
  out.data.resize(input.size());
  for (std::size_t i = 0; i < input.size(); ++i) {
    const double x = static_cast<double>(input.data[i]);
    double y = 0.0;
    switch (kind) {
      case Activation::sigmoid: y = sigmoid_scalar(x); break;
      case Activation::gelu: y = gelu_scalar(x); break;
      case Activation::leaky_relu: y = x >= 0.0 ? x : alpha * x; break;
    }
    out.data[i] = static_cast<T>(y);
  }
  ensure_finite(out, "activation");
  return out;
}

template <typename T>
DenseTensor<T> activation_backward(const DenseTensor<T>& input, Activation kind,
                                   double alpha, const DenseTensor<T>& grad_out) {
  DenseTensor<T> gin;
  gin.extents = input.extents;
  gin.data.resize(input.size());
  for (std::size_t i = 0; i < input.size(); ++i) {
    const double x = static_cast<double>(input.data[i]);
    double d = 0.0;
    switch (kind) {
      case Activation::sigmoid: {
        const double s = sigmoid_scalar(x);
        d = s * (1.0 - s);
        break;
      }
      case Activation::gelu: d = gelu_grad_scalar(x); break;
      case Activation::leaky_relu: d = x >= 0.0 ? 1.0 : alpha; break;
    }
    gin.data[i] = static_cast<T>(d * static_cast<double>(grad_out.data[i]));
  }
  return gin;
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

template <typename T>
void check_norm_params(const DenseTensor<T>& input, const DenseTensor<T>& scale,
                       const DenseTensor<T>& shift, const char* what) {
  check_feature_map(input, what);
  const Extents want{input.c()};
  if (scale.extents != want || shift.extents != want) {
    throw std::invalid_argument(
        std::string(what) + ": scale/shift must have extents [C] = " +
        extents_to_string(want) + ", got " + extents_to_string(scale.extents) +
        " and " + extents_to_string(shift.extents));
  }
}

// Per-voxel normalization across the channel axis only (channels-first
// convention), population variance.
template <typename T>
DenseTensor<T> layer_norm(const DenseTensor<T>& input, const DenseTensor<T>& scale,
                          const DenseTensor<T>& shift, double eps = 1e-6) {
  check_norm_params(input, scale, shift, "layer_norm");
  const std::size_t C = input.c();
  const std::size_t vol = input.spatial_volume();
  DenseTensor<T> out;
  out.extents = input.extents;
  out.data.resize(input.size());
  for (std::size_t n = 0; n < input.n(); ++n) {
    const T* base = input.data.data() + n * C * vol;
    T* obase = out.data.data() + n * C * vol;
    for (std::size_t v = 0; v < vol; ++v) {
      double mean = 0.0;
      for (std::size_t c = 0; c < C; ++c) mean += static_cast<double>(base[c * vol + v]);
      mean /= static_cast<double>(C);
      double var = 0.0;
      for (std::size_t c = 0; c < C; ++c) {
        const double d = static_cast<double>(base[c * vol + v]) - mean;
        var += d * d;
      }
      var /= static_cast<double>(C);
      const double inv = 1.0 / std::sqrt(var + eps);
      for (std::size_t c = 0; c < C; ++c) {
        const double xhat = (static_cast<double>(base[c * vol + v]) - mean) * inv;
        obase[c * vol + v] = static_cast<T>(xhat * static_cast<double>(scale.data[c]) +
                                            static_cast<double>(shift.data[c]));
      }
    }
  }
  ensure_finite(out, "layer_norm");
  return out;
}

template <typename T>
struct NormGrads {
  DenseTensor<T> wrt_input;
  DenseTensor<T> wrt_scale;
  DenseTensor<T> wrt_shift;
};

template <typename T>
NormGrads<T> layer_norm_backward(const DenseTensor<T>& input,
                                 const DenseTensor<T>& scale, double eps,
                                 const DenseTensor<T>& grad_out) {
  const std::size_t C = input.c();
  const std::size_t vol = input.spatial_volume();
  NormGrads<T> g;
  g.wrt_input = DenseTensor<T>(input.extents);
  g.wrt_scale = DenseTensor<T>({C});
  g.wrt_shift = DenseTensor<T>({C});
  std::vector<double> gscale(C, 0.0), gshift(C, 0.0);
  std::vector<double> xhat(C, 0.0), gy(C, 0.0);
  for (std::size_t n = 0; n < input.n(); ++n) {
    const T* base = input.data.data() + n * C * vol;
    const T* gbase = grad_out.data.data() + n * C * vol;
    T* obase = g.wrt_input.data.data() + n * C * vol;
    for (std::size_t v = 0; v < vol; ++v) {
      double mean = 0.0;
      for (std::size_t c = 0; c < C; ++c) mean += static_cast<double>(base[c * vol + v]);
      mean /= static_cast<double>(C);
      double var = 0.0;
      for (std::size_t c = 0; c < C; ++c) {
        const double d = static_cast<double>(base[c * vol + v]) - mean;
        var += d * d;
      }
      var /= static_cast<double>(C);
      const double inv = 1.0 / std::sqrt(var + eps);
      double m1 = 0.0, m2 = 0.0;
      for (std::size_t c = 0; c < C; ++c) {
        xhat[c] = (static_cast<double>(base[c * vol + v]) - mean) * inv;
        gy[c] = static_cast<double>(gbase[c * vol + v]) *
                static_cast<double>(scale.data[c]);
        m1 += gy[c];
        m2 += gy[c] * xhat[c];
        gscale[c] += static_cast<double>(gbase[c * vol + v]) * xhat[c];
        gshift[c] += static_cast<double>(gbase[c * vol + v]);
      }
      m1 /= static_cast<double>(C);
      m2 /= static_cast<double>(C);
      for (std::size_t c = 0; c < C; ++c) {
        obase[c * vol + v] = static_cast<T>(inv * (gy[c] - m1 - xhat[c] * m2));
      }
    }
  }
  for (std::size_t c = 0; c < C; ++c) {
    g.wrt_scale.data[c] = static_cast<T>(gscale[c]);
    g.wrt_shift.data[c] = static_cast<T>(gshift[c]);
  }
  return g;
}

template <typename T>
struct BatchNormResult {
  DenseTensor<T> output;
  DenseTensor<T> new_running_mean;
  DenseTensor<T> new_running_var;
  // Statistics actually used for normalization (batch in train mode,
  // running in eval mode); saved for the backward pass.
  std::vector<double> used_mean;
  std::vector<double> used_invstd;
};

// Train mode normalizes with per-channel batch statistics over (N, spatial)
// and blends population statistics into the running estimates:
// running <- (1 - momentum) * running + momentum * batch.
template <typename T>
BatchNormResult<T> batch_norm(const DenseTensor<T>& input,
                              const DenseTensor<T>& scale,
                              const DenseTensor<T>& shift,
                              const DenseTensor<T>& running_mean,
                              const DenseTensor<T>& running_var, bool train,
                              double momentum = 0.1, double eps = 1e-5) {
  check_norm_params(input, scale, shift, "batch_norm");
  const std::size_t C = input.c();
  if (running_mean.extents != Extents{C} || running_var.extents != Extents{C}) {
    throw std::invalid_argument("batch_norm: running stats must have extents [C]");
  }
  const std::size_t vol = input.spatial_volume();
  const std::size_t count = input.n() * vol;

  BatchNormResult<T> r;
  r.used_mean.resize(C);
  r.used_invstd.resize(C);
  r.new_running_mean = running_mean;
  r.new_running_var = running_var;

  for (std::size_t c = 0; c < C; ++c) {
    double mean, var;
    if (train) {
      double acc = 0.0;
      for (std::size_t n = 0; n < input.n(); ++n) {
        const T* base = input.data.data() + (n * C + c) * vol;
        for (std::size_t v = 0; v < vol; ++v) acc += static_cast<double>(base[v]);
      }
      mean = acc / static_cast<double>(count);
      double vacc = 0.0;
      for (std::size_t n = 0; n < input.n(); ++n) {
        const T* base = input.data.data() + (n * C + c) * vol;
        for (std::size_t v = 0; v < vol; ++v) {
          const double d = static_cast<double>(base[v]) - mean;
          vacc += d * d;
        }
      }
      var = vacc / static_cast<double>(count);
      r.new_running_mean.data[c] = static_cast<T>(
          (1.0 - momentum) * static_cast<double>(running_mean.data[c]) +
          momentum * mean);
      r.new_running_var.data[c] = static_cast<T>(
          (1.0 - momentum) * static_cast<double>(running_var.data[c]) +
          momentum * var);
    } else {
      mean = static_cast<double>(running_mean.data[c]);
      var = static_cast<double>(running_var.data[c]);
    }
    r.used_mean[c] = mean;
    r.used_invstd[c] = 1.0 / std::sqrt(var + eps);
  }

  r.output.extents = input.extents;
  r.output.data.resize(input.size());
  for (std::size_t n = 0; n < input.n(); ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const T* base = input.data.data() + (n * C + c) * vol;
      T* obase = r.output.data.data() + (n * C + c) * vol;
      const double m = r.used_mean[c];
      const double inv = r.used_invstd[c];
      const double sc = static_cast<double>(scale.data[c]);
      const double sh = static_cast<double>(shift.data[c]);
      for (std::size_t v = 0; v < vol; ++v) {
        obase[v] = static_cast<T>((static_cast<double>(base[v]) - m) * inv * sc + sh);
      }
    }
  }
  ensure_finite(r.output, "batch_norm");
  return r;
}

// `through_stats` distinguishes train mode (gradient flows through the batch
// statistics) from eval mode (statistics are constants).
template <typename T>
NormGrads<T> batch_norm_backward(const DenseTensor<T>& input,
                                 const DenseTensor<T>& scale,
                                 const std::vector<double>& used_mean,
                                 const std::vector<double>& used_invstd,
                                 bool through_stats,
                                 const DenseTensor<T>& grad_out) {
  const std::size_t C = input.c();
  const std::size_t vol = input.spatial_volume();
  const std::size_t count = input.n() * vol;
  NormGrads<T> g;
  g.wrt_input = DenseTensor<T>(input.extents);
  g.wrt_scale = DenseTensor<T>({C});
  g.wrt_shift = DenseTensor<T>({C});

  for (std::size_t c = 0; c < C; ++c) {
    const double m = used_mean[c];
    const double inv = used_invstd[c];
    const double sc = static_cast<double>(scale.data[c]);
    double sum_gy = 0.0, sum_gy_xhat = 0.0, gscale = 0.0, gshift = 0.0;
    for (std::size_t n = 0; n < input.n(); ++n) {
      const T* base = input.data.data() + (n * C + c) * vol;
      const T* gbase = grad_out.data.data() + (n * C + c) * vol;
      for (std::size_t v = 0; v < vol; ++v) {
        const double xhat = (static_cast<double>(base[v]) - m) * inv;
        const double go = static_cast<double>(gbase[v]);
        gscale += go * xhat;
        gshift += go;
        sum_gy += go * sc;
        sum_gy_xhat += go * sc * xhat;
      }
    }
    g.wrt_scale.data[c] = static_cast<T>(gscale);
    g.wrt_shift.data[c] = static_cast<T>(gshift);
    const double m1 = sum_gy / static_cast<double>(count);
    const double m2 = sum_gy_xhat / static_cast<double>(count);
    for (std::size_t n = 0; n < input.n(); ++n) {
      const T* base = input.data.data() + (n * C + c) * vol;
      const T* gbase = grad_out.data.data() + (n * C + c) * vol;
      T* obase = g.wrt_input.data.data() + (n * C + c) * vol;
      for (std::size_t v = 0; v < vol; ++v) {
        const double go = static_cast<double>(gbase[v]) * sc;
        if (through_stats) {
          const double xhat = (static_cast<double>(base[v]) - m) * inv;
          obase[v] = static_cast<T>(inv * (go - m1 - xhat * m2));
        } else {
          obase[v] = static_cast<T>(inv * go);
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Concatenation / slicing along the channel axis
// ---------------------------------------------------------------------------

template <typename T>
DenseTensor<T> concat_channels(const DenseTensor<T>& a, const DenseTensor<T>& b) {
  check_feature_map(a, "concat_channels");
  check_feature_map(b, "concat_channels");
  if (a.n() != b.n() || a.d() != b.d() || a.h() != b.h() || a.w() != b.w()) {
    throw std::invalid_argument("concat_channels: non-channel extents differ: " +
                                extents_to_string(a.extents) + " vs " +
                                extents_to_string(b.extents));
  }
  DenseTensor<T> out({a.n(), a.c() + b.c(), a.d(), a.h(), a.w()});
  const std::size_t vol = a.spatial_volume();
  for (std::size_t n = 0; n < a.n(); ++n) {
    std::copy(a.data.begin() + n * a.c() * vol, a.data.begin() + (n + 1) * a.c() * vol,
              out.data.begin() + n * (a.c() + b.c()) * vol);
    std::copy(b.data.begin() + n * b.c() * vol, b.data.begin() + (n + 1) * b.c() * vol,
              out.data.begin() + (n * (a.c() + b.c()) + a.c()) * vol);
  }
  return out;
}

template <typename T>
DenseTensor<T> slice_channels(const DenseTensor<T>& x, std::size_t begin,
                              std::size_t count) {
  check_feature_map(x, "slice_channels");
  if (count == 0 || begin + count > x.c()) {
    throw std::invalid_argument("slice_channels: channel range [" +
                                std::to_string(begin) + ", " +
                                std::to_string(begin + count) +
                                ") out of bounds for C=" + std::to_string(x.c()));
  }
  DenseTensor<T> out({x.n(), count, x.d(), x.h(), x.w()});
  const std::size_t vol = x.spatial_volume();
  for (std::size_t n = 0; n < x.n(); ++n) {
    std::copy(x.data.begin() + (n * x.c() + begin) * vol,
              x.data.begin() + (n * x.c() + begin + count) * vol,
              out.data.begin() + n * count * vol);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise add / mul with gate broadcasting
// ---------------------------------------------------------------------------

enum class EwKind { add, mul };

// Which form the second operand takes relative to the first.
enum class BroadcastKind { none, channel, spatial };

inline BroadcastKind broadcast_kind(const Extents& a, const Extents& b) {
  if (a == b) return BroadcastKind::none;
  if (a.size() == 5 && b.size() == 5 && a[0] == b[0]) {
    if (b[1] == a[1] && b[2] == 1 && b[3] == 1 && b[4] == 1)
      return BroadcastKind::channel;
    if (b[1] == 1 && b[2] == a[2] && b[3] == a[3] && b[4] == a[4])
      return BroadcastKind::spatial;
  }
  throw std::invalid_argument("elementwise: incompatible extents " +
                              extents_to_string(a) + " vs " +
                              extents_to_string(b));
}

template <typename T>
DenseTensor<T> elementwise(const DenseTensor<T>& a, const DenseTensor<T>& b,
                           EwKind kind) {
  const BroadcastKind bc = broadcast_kind(a.extents, b.extents);
  DenseTensor<T> out;
  out.extents = a.extents;
  out.data.resize(a.size());
  auto apply = [kind](T x, T y) {
    return kind == EwKind::add ? static_cast<T>(x + y) : static_cast<T>(x * y);
  };
  if (bc == BroadcastKind::none) {
    for (std::size_t i = 0; i < a.size(); ++i)
      out.data[i] = apply(a.data[i], b.data[i]);
  } else if (bc == BroadcastKind::channel) {
    const std::size_t vol = a.spatial_volume();
    for (std::size_t n = 0; n < a.n(); ++n) {
      for (std::size_t c = 0; c < a.c(); ++c) {
        const T g = b.data[n * a.c() + c];
        const T* base = a.data.data() + (n * a.c() + c) * vol;
        T* obase = out.data.data() + (n * a.c() + c) * vol;
        for (std::size_t v = 0; v < vol; ++v) obase[v] = apply(base[v], g);
      }
    }
  } else {
    const std::size_t vol = a.spatial_volume();
    for (std::size_t n = 0; n < a.n(); ++n) {
      const T* gbase = b.data.data() + n * vol;
      for (std::size_t c = 0; c < a.c(); ++c) {
        const T* base = a.data.data() + (n * a.c() + c) * vol;
        T* obase = out.data.data() + (n * a.c() + c) * vol;
        for (std::size_t v = 0; v < vol; ++v) obase[v] = apply(base[v], gbase[v]);
      }
    }
  }
  ensure_finite(out, "elementwise");
  return out;
}

// Sum-reduce a full-shape gradient down to broadcast extents.
template <typename T>
DenseTensor<T> reduce_to_extents(const DenseTensor<T>& grad, const Extents& target) {
  if (grad.extents == target) return grad;
  const BroadcastKind bc = broadcast_kind(grad.extents, target);
  DenseTensor<T> out(target);
  const std::size_t vol = grad.spatial_volume();
  if (bc == BroadcastKind::channel) {
    for (std::size_t n = 0; n < grad.n(); ++n) {
      for (std::size_t c = 0; c < grad.c(); ++c) {
        const T* base = grad.data.data() + (n * grad.c() + c) * vol;
        double acc = 0.0;
        for (std::size_t v = 0; v < vol; ++v) acc += static_cast<double>(base[v]);
        out.data[n * grad.c() + c] = static_cast<T>(acc);
      }
    }
  } else {
    for (std::size_t n = 0; n < grad.n(); ++n) {
      T* obase = out.data.data() + n * vol;
      for (std::size_t v = 0; v < vol; ++v) {
        double acc = 0.0;
        for (std::size_t c = 0; c < grad.c(); ++c) {
          acc += static_cast<double>(grad.data[(n * grad.c() + c) * vol + v]);
        }
        obase[v] = static_cast<T>(acc);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

template <typename T>
DenseTensor<T> dropout(const DenseTensor<T>& input, double rate, bool train,
                       std::uint64_t seed) {
  if (rate < 0.0 || rate >= 1.0) {
    throw std::invalid_argument("dropout: rate must lie in [0, 1), got " +
                                std::to_string(rate));
  }
  if (!train || rate == 0.0) return input;
  DenseTensor<T> out;
  out.extents = input.extents;
  out.data.resize(input.size());
  SplitMix64 rng(seed);
  const double scale = 1.0 / (1.0 - rate);
  for (std::size_t i = 0; i < input.size(); ++i) {
    out.data[i] = rng.unit() < rate ? T(0) : static_cast<T>(input.data[i] * scale);
  }
  return out;
}

template <typename T>
DenseTensor<T> dropout_backward(const Extents& extents, double rate, bool train,
                                std::uint64_t seed, const DenseTensor<T>& grad_out) {
  if (!train || rate == 0.0) return grad_out;
  DenseTensor<T> gin;
  gin.extents = extents;
  gin.data.resize(grad_out.size());
  SplitMix64 rng(seed);
  const double scale = 1.0 / (1.0 - rate);
  for (std::size_t i = 0; i < grad_out.size(); ++i) {
    gin.data[i] = rng.unit() < rate ? T(0) : static_cast<T>(grad_out.data[i] * scale);
  }
  return gin;
}

// ---------------------------------------------------------------------------
// Reductions / softmax
// ---------------------------------------------------------------------------

template <typename T>
T sum(const DenseTensor<T>& input) {
  double acc = 0.0;
  for (const T& v : input.data) acc += static_cast<double>(v);
  return static_cast<T>(acc);
}

// Numerically stable per-voxel softmax across the channel axis.
template <typename T>
DenseTensor<T> softmax_channels(const DenseTensor<T>& logits) {
  check_feature_map(logits, "softmax_channels");
  const std::size_t C = logits.c();
  const std::size_t vol = logits.spatial_volume();
  DenseTensor<T> out;
  out.extents = logits.extents;
  out.data.resize(logits.size());
  for (std::size_t n = 0; n < logits.n(); ++n) {
    const T* base = logits.data.data() + n * C * vol;
    T* obase = out.data.data() + n * C * vol;
    for (std::size_t v = 0; v < vol; ++v) {
      double m = static_cast<double>(base[v]);
      for (std::size_t c = 1; c < C; ++c)
        m = std::max(m, static_cast<double>(base[c * vol + v]));
      double z = 0.0;
      for (std::size_t c = 0; c < C; ++c)
        z += std::exp(static_cast<double>(base[c * vol + v]) - m);
      for (std::size_t c = 0; c < C; ++c) {
        obase[c * vol + v] = static_cast<T>(
            std::exp(static_cast<double>(base[c * vol + v]) - m) / z);
      }
    }
  }
  return out;
}

}  // namespace dnet::ops
