#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dnet/autograd.hpp"
#include "dnet/ops.hpp"
#include "dnet/tensor.hpp"

// Parameter containers and the per-forward Session that binds them onto a
// tape. Weights are immutable during a forward pass; batch-norm running
// statistic updates are collected on the session and committed by the
// caller that owns the model.

namespace dnet {

enum class ParamInit { he_conv, zeros, ones };

template <typename T>
struct Param {
  DenseTensor<T> value;
  bool trainable = true;
};

enum class RunMode { train, eval };

template <typename T>
struct Session {
  Tape<T>& tape;
  RunMode mode = RunMode::eval;
  bool want_grads = false;
  std::uint64_t seed = 0;          // base stream for dropout masks
  std::uint64_t dropout_calls = 0;  // advances once per dropout layer
  std::unordered_map<const Param<T>*, Var> bound;
  std::vector<std::pair<const Param<T>*, DenseTensor<T>>> stat_updates;
  // When set, forwards append their discrete branch decisions (leaky-ReLU
  // input signs, channel-max argmax indices). Gradient checking compares the
  // traces of perturbed evaluations to detect probes that straddle a
  // non-differentiable point.
  std::vector<std::int32_t>* decision_trace = nullptr;

  explicit Session(Tape<T>& t, RunMode m = RunMode::eval, bool grads = false,
                   std::uint64_t s = 0)
      : tape(t), mode(m), want_grads(grads), seed(s) {}

  bool training() const { return mode == RunMode::train; }

  Var use(const Param<T>& p) {
    auto it = bound.find(&p);
    if (it != bound.end()) return it->second;
    Var v = tape.leaf(p.value, want_grads && p.trainable);
    bound.emplace(&p, v);
    return v;
  }

  std::uint64_t next_dropout_seed() {
    SplitMix64 mix(seed + 0x5eed0000ULL + dropout_calls);
    ++dropout_calls;
    return mix.next();
  }

  void observe_signs(const DenseTensor<T>& pre_activation) {
    if (!decision_trace) return;
    for (const T& v : pre_activation.data) {
      decision_trace->push_back(v >= T(0) ? 1 : -1);
    }
  }

  void observe_channel_argmax(const DenseTensor<T>& x) {
    if (!decision_trace) return;
    const std::size_t vol = x.spatial_volume();
    for (std::size_t n = 0; n < x.n(); ++n) {
      const T* base = x.data.data() + n * x.c() * vol;
      for (std::size_t v = 0; v < vol; ++v) {
        std::size_t arg = 0;
        T best = base[v];
        for (std::size_t c = 1; c < x.c(); ++c) {
          if (base[c * vol + v] > best) {
            best = base[c * vol + v];
            arg = c;
          }
        }
        decision_trace->push_back(static_cast<std::int32_t>(arg));
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

template <typename T>
struct Conv3dLayer {
  ConvSpec spec;
  bool transposed = false;
  Param<T> weight;
  Param<T> bias;  // unused when !spec.has_bias

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".weight", weight, ParamInit::he_conv);
    if (spec.has_bias) f(prefix + ".bias", bias, ParamInit::zeros);
  }
};

template <typename T>
struct LayerNormLayer {
  std::size_t channels = 0;
  double eps = 1e-6;
  Param<T> scale;
  Param<T> shift;

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".scale", scale, ParamInit::ones);
    f(prefix + ".shift", shift, ParamInit::zeros);
  }
};

template <typename T>
struct BatchNormLayer {
  std::size_t channels = 0;
  double momentum = 0.1;
  double eps = 1e-5;
  Param<T> scale;
  Param<T> shift;
  Param<T> running_mean;  // trainable = false
  Param<T> running_var;

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".scale", scale, ParamInit::ones);
    f(prefix + ".shift", shift, ParamInit::zeros);
    f(prefix + ".running_mean", running_mean, ParamInit::zeros);
    f(prefix + ".running_var", running_var, ParamInit::ones);
  }
};

// conv + BN + leaky ReLU, the projection-style block used by the stem, the
// Salience layer and the NETR decoder. The conv carries no bias.
template <typename T>
struct ConvBnAct {
  Conv3dLayer<T> conv;
  BatchNormLayer<T> bn;
  double leaky_alpha = 0.01;

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    conv.visit(prefix + ".conv", f);
    bn.visit(prefix + ".bn", f);
  }
};

// ---------------------------------------------------------------------------
// Constructors
// ---------------------------------------------------------------------------

template <typename T>
Conv3dLayer<T> make_conv_layer(const ConvSpec& spec, bool transposed = false) {
  spec.validate();
  Conv3dLayer<T> l;
  l.spec = spec;
  l.transposed = transposed;
  l.weight.value = DenseTensor<T>(transposed ? spec.transposed_weight_extents()
                                             : spec.weight_extents());
  if (spec.has_bias) {
    l.bias.value =
        DenseTensor<T>({static_cast<std::size_t>(spec.out_channels)});
  }
  return l;
}

template <typename T>
Conv3dLayer<T> make_pointwise(int in_channels, int out_channels,
                              bool has_bias = true) {
  return make_conv_layer<T>(
      make_conv_spec(in_channels, out_channels, 1, 1, 1, 1, has_bias));
}

template <typename T>
Conv3dLayer<T> make_depthwise(int channels, int kernel, int dilation) {
  return make_conv_layer<T>(
      make_conv_spec(channels, channels, kernel, 1, dilation, channels, true));
}

template <typename T>
LayerNormLayer<T> make_layer_norm(int channels, double eps = 1e-6) {
  LayerNormLayer<T> l;
  l.channels = static_cast<std::size_t>(channels);
  l.eps = eps;
  l.scale.value = DenseTensor<T>({l.channels});
  l.shift.value = DenseTensor<T>({l.channels});
  return l;
}

template <typename T>
BatchNormLayer<T> make_batch_norm(int channels, double momentum = 0.1,
                                  double eps = 1e-5) {
  BatchNormLayer<T> l;
  l.channels = static_cast<std::size_t>(channels);
  l.momentum = momentum;
  l.eps = eps;
  l.scale.value = DenseTensor<T>({l.channels});
  l.shift.value = DenseTensor<T>({l.channels});
  l.running_mean.value = DenseTensor<T>({l.channels});
  l.running_mean.trainable = false;
  l.running_var.value = DenseTensor<T>({l.channels});
  l.running_var.trainable = false;
  return l;
}

template <typename T>
ConvBnAct<T> make_conv_bn_act(int in_channels, int out_channels, int kernel,
                              int stride = 1, double leaky_alpha = 0.01) {
  ConvBnAct<T> b;
  ConvSpec s = make_conv_spec(in_channels, out_channels, kernel, stride, 1, 1,
                              /*has_bias=*/false);
  b.conv = make_conv_layer<T>(s);
  b.bn = make_batch_norm<T>(out_channels);
  b.leaky_alpha = leaky_alpha;
  return b;
}

// ---------------------------------------------------------------------------
// Forwards
// ---------------------------------------------------------------------------

template <typename T>
Var conv_forward(Session<T>& s, const Conv3dLayer<T>& layer, Var x) {
  std::optional<Var> b;
  if (layer.spec.has_bias) b = s.use(layer.bias);
  if (layer.transposed) {
    return s.tape.transposed_conv3d(x, s.use(layer.weight), b, layer.spec);
  }
  return s.tape.conv3d(x, s.use(layer.weight), b, layer.spec);
}

template <typename T>
Var layer_norm_forward(Session<T>& s, const LayerNormLayer<T>& ln, Var x) {
  return s.tape.layer_norm(x, s.use(ln.scale), s.use(ln.shift), ln.eps);
}

template <typename T>
Var batch_norm_forward(Session<T>& s, const BatchNormLayer<T>& bn, Var x) {
  DenseTensor<T> new_mean, new_var;
  Var y = s.tape.batch_norm(x, s.use(bn.scale), s.use(bn.shift),
                            bn.running_mean.value, bn.running_var.value,
                            s.training(), bn.momentum, bn.eps, &new_mean, &new_var);
  if (s.training()) {
    s.stat_updates.emplace_back(&bn.running_mean, std::move(new_mean));
    s.stat_updates.emplace_back(&bn.running_var, std::move(new_var));
  }
  return y;
}

template <typename T>
Var conv_bn_act_forward(Session<T>& s, const ConvBnAct<T>& b, Var x) {
  Var y = conv_forward(s, b.conv, x);
  y = batch_norm_forward(s, b.bn, y);
  s.observe_signs(s.tape.value(y));
  return s.tape.activation(y, ops::Activation::leaky_relu, b.leaky_alpha);
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

// He-uniform fan-in for conv weights; the fan-in of a conv weight tensor
// [OC, IC/G, kd, kh, kw] is the product of all but the leading extent.
template <typename T>
void init_param(Param<T>& p, ParamInit kind, std::mt19937_64& eng) {
  switch (kind) {
    case ParamInit::he_conv: {
      std::size_t fan_in = 1;
      for (std::size_t a = 1; a < p.value.rank(); ++a) fan_in *= p.value.extents[a];
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      for (T& v : p.value.data) {
        v = static_cast<T>((2.0 * u64_to_unit(eng()) - 1.0) * bound);
      }
      break;
    }
    case ParamInit::zeros:
      std::fill(p.value.data.begin(), p.value.data.end(), T(0));
      break;
    case ParamInit::ones:
      std::fill(p.value.data.begin(), p.value.data.end(), T(1));
      break;
  }
}

}  // namespace dnet
