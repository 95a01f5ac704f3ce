#pragma once

#include <stdexcept>
#include <string>

#include "dnet/erf.hpp"
#include "dnet/layers.hpp"

// Dynamic Large Kernel: a cascade of a 5x5x5 depthwise convolution and a
// dilated 7x7x7 depthwise convolution whose multi-scale outputs are selected
// by sigmoid spatial and channel gates, wrapped into a pre-norm residual
// block that stands in for multi-head self-attention.

namespace dnet {

// How the spatial selection values combine the two kernel branches.
// split_calibrate:  X_ch = concat(w1 * X1, w2 * X2)
// literal_sum:      X_ch = w1 * X_sp + w2 * X_sp
enum class CombineMode { split_calibrate, literal_sum };

inline const char* to_string(CombineMode m) {
  return m == CombineMode::split_calibrate ? "split_calibrate" : "literal_sum";
}

template <typename T>
struct DLKWeights {
  Conv3dLayer<T> project;       // 1x1x1, C -> C/2
  Conv3dLayer<T> dw5;           // depthwise 5x5x5, dilation 1, on C/2
  Conv3dLayer<T> dw7;           // depthwise 7x7x7, dilation 3, on C/2
  Conv3dLayer<T> spatial_gate;  // 7x7x7, 2 -> 2
  Conv3dLayer<T> channel_gate;  // 1x1x1, C -> C

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    project.visit(prefix + ".project", f);
    dw5.visit(prefix + ".dw5", f);
    dw7.visit(prefix + ".dw7", f);
    spatial_gate.visit(prefix + ".spatial_gate", f);
    channel_gate.visit(prefix + ".channel_gate", f);
  }
};

template <typename T>
struct DLKModuleWeights {
  Conv3dLayer<T> pre_linear;   // 1x1x1, C -> C
  DLKWeights<T> dlk;
  Conv3dLayer<T> post_linear;  // 1x1x1, C -> C

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    pre_linear.visit(prefix + ".pre_linear", f);
    dlk.visit(prefix, f);
    post_linear.visit(prefix + ".post_linear", f);
  }
};

template <typename T>
struct MLPWeights {
  int ratio = 4;
  Conv3dLayer<T> expand;    // 1x1x1, C -> r*C
  Conv3dLayer<T> contract;  // 1x1x1, r*C -> C

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    expand.visit(prefix + ".expand", f);
    contract.visit(prefix + ".contract", f);
  }
};

template <typename T>
struct DLKBlockWeights {
  LayerNormLayer<T> ln1;
  LayerNormLayer<T> ln2;
  DLKModuleWeights<T> dlk_module;
  MLPWeights<T> mlp;

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    ln1.visit(prefix + ".ln1", f);
    ln2.visit(prefix + ".ln2", f);
    dlk_module.visit(prefix + ".dlk", f);
    mlp.visit(prefix + ".mlp", f);
  }
};

template <typename T>
DLKWeights<T> make_dlk(int channels) {
  if (channels % 2 != 0) {
    throw std::invalid_argument("DLK requires an even channel count, got " +
                                std::to_string(channels));
  }
  DLKWeights<T> w;
  const int half = channels / 2;
  w.project = make_pointwise<T>(channels, half);
  w.dw5 = make_depthwise<T>(half, 5, 1);
  w.dw7 = make_depthwise<T>(half, 7, 3);
  w.spatial_gate = make_conv_layer<T>(make_conv_spec(2, 2, 7));
  w.channel_gate = make_pointwise<T>(channels, channels);
  return w;
}

template <typename T>
DLKModuleWeights<T> make_dlk_module(int channels) {
  DLKModuleWeights<T> w;
  w.pre_linear = make_pointwise<T>(channels, channels);
  w.dlk = make_dlk<T>(channels);
  w.post_linear = make_pointwise<T>(channels, channels);
  return w;
}

template <typename T>
MLPWeights<T> make_mlp(int channels, int ratio) {
  if (ratio < 1) throw std::invalid_argument("MLP ratio must be >= 1");
  MLPWeights<T> w;
  w.ratio = ratio;
  w.expand = make_pointwise<T>(channels, ratio * channels);
  w.contract = make_pointwise<T>(ratio * channels, channels);
  return w;
}

template <typename T>
DLKBlockWeights<T> make_dlk_block(int channels, int mlp_ratio) {
  DLKBlockWeights<T> w;
  w.ln1 = make_layer_norm<T>(channels);
  w.ln2 = make_layer_norm<T>(channels);
  w.dlk_module = make_dlk_module<T>(channels);
  w.mlp = make_mlp<T>(channels, mlp_ratio);
  return w;
}

// ---------------------------------------------------------------------------
// Forwards
// ---------------------------------------------------------------------------

template <typename T>
Var dlk_forward(Session<T>& s, const DLKWeights<T>& w, Var x_in,
                CombineMode mode) {
  const DenseTensor<T>& xv = s.tape.value(x_in);
  if (xv.c() % 2 != 0) {
    throw std::invalid_argument("dlk_forward: channel extent must be even, got " +
                                std::to_string(xv.c()));
  }
  Var x = conv_forward(s, w.project, x_in);
  Var x1 = conv_forward(s, w.dw5, x);
  Var x2 = conv_forward(s, w.dw7, x1);
  Var x_sp = s.tape.concat_channels(x1, x2);
  s.observe_channel_argmax(s.tape.value(x_sp));

  Var w_avp = s.tape.channel_stats_pool(x_sp, ops::ChannelStat::mean);
  Var w_map = s.tape.channel_stats_pool(x_sp, ops::ChannelStat::max);
  Var gates = conv_forward(s, w.spatial_gate, s.tape.concat_channels(w_avp, w_map));
  gates = s.tape.activation(gates, ops::Activation::sigmoid);
  Var w1 = s.tape.slice_channels(gates, 0, 1);
  Var w2 = s.tape.slice_channels(gates, 1, 1);

  Var x_ch;
  if (mode == CombineMode::split_calibrate) {
    x_ch = s.tape.concat_channels(s.tape.mul(x1, w1), s.tape.mul(x2, w2));
  } else {
    x_ch = s.tape.add(s.tape.mul(x_sp, w1), s.tape.mul(x_sp, w2));
  }

  Var pooled = s.tape.global_avg_pool(x_ch);
  Var w_ch = s.tape.activation(conv_forward(s, w.channel_gate, pooled),
                               ops::Activation::sigmoid);
  return s.tape.add(s.tape.mul(x_ch, w_ch), x_in);
}

template <typename T>
Var dlk_module_forward(Session<T>& s, const DLKModuleWeights<T>& w, Var x,
                       CombineMode mode) {
  Var y = conv_forward(s, w.pre_linear, x);
  y = s.tape.activation(y, ops::Activation::gelu);
  y = dlk_forward(s, w.dlk, y, mode);
  y = conv_forward(s, w.post_linear, y);
  return s.tape.add(y, x);
}

template <typename T>
Var mlp_forward(Session<T>& s, const MLPWeights<T>& w, Var x) {
  Var y = conv_forward(s, w.expand, x);
  y = s.tape.activation(y, ops::Activation::gelu);
  return conv_forward(s, w.contract, y);
}

template <typename T>
Var dlk_block_forward(Session<T>& s, const DLKBlockWeights<T>& w, Var x,
                      CombineMode mode) {
  Var y = s.tape.add(dlk_module_forward(s, w.dlk_module,
                                        layer_norm_forward(s, w.ln1, x), mode),
                     x);
  return s.tape.add(mlp_forward(s, w.mlp, layer_norm_forward(s, w.ln2, y)), y);
}

// ERF of the canonical (5, d1) -> (7, d3) cascade, via the layer recurrence.
inline std::int64_t dlk_erf() {
  return analysis::compute_erf({{5, 1, 1}, {7, 3, 1}});
}

}  // namespace dnet
