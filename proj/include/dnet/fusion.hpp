#pragma once

#include <string>

#include "dnet/layers.hpp"

// Dynamic Feature Fusion: concatenates two C-channel maps, calibrates the
// 2C channels with a global channel gate before a 1x1x1 reduction back to C,
// then recalibrates with a single-channel spatial saliency gate.
//
// Decoder convention: f1 is the skip (encoder-side) feature map, f2 the
// upsampled decoder feature map.

namespace dnet {

template <typename T>
struct DFFWeights {
  Conv3dLayer<T> channel_gate;    // 1x1x1, 2C -> 2C
  Conv3dLayer<T> reduce;          // 1x1x1, 2C -> C
  Conv3dLayer<T> spatial_gate_a;  // 1x1x1, C -> 1
  Conv3dLayer<T> spatial_gate_b;  // 1x1x1, C -> 1

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    channel_gate.visit(prefix + ".channel_gate", f);
    reduce.visit(prefix + ".reduce", f);
    spatial_gate_a.visit(prefix + ".spatial_gate_a", f);
    spatial_gate_b.visit(prefix + ".spatial_gate_b", f);
  }
};

template <typename T>
DFFWeights<T> make_dff(int channels) {
  DFFWeights<T> w;
  w.channel_gate = make_pointwise<T>(2 * channels, 2 * channels);
  w.reduce = make_pointwise<T>(2 * channels, channels);
  w.spatial_gate_a = make_pointwise<T>(channels, 1);
  w.spatial_gate_b = make_pointwise<T>(channels, 1);
  return w;
}

template <typename T>
Var dff_forward(Session<T>& s, const DFFWeights<T>& w, Var f1, Var f2) {
  const DenseTensor<T>& a = s.tape.value(f1);
  const DenseTensor<T>& b = s.tape.value(f2);
  if (a.extents != b.extents) {
    throw std::invalid_argument("dff_forward: input extents differ: " +
                                extents_to_string(a.extents) + " vs " +
                                extents_to_string(b.extents));
  }
  Var f = s.tape.concat_channels(f1, f2);
  Var w_ch = s.tape.activation(
      conv_forward(s, w.channel_gate, s.tape.global_avg_pool(f)),
      ops::Activation::sigmoid);
  Var f_ch = conv_forward(s, w.reduce, s.tape.mul(f, w_ch));
  Var w_sp = s.tape.activation(s.tape.add(conv_forward(s, w.spatial_gate_a, f1),
                                          conv_forward(s, w.spatial_gate_b, f2)),
                               ops::Activation::sigmoid);
  return s.tape.mul(f_ch, w_sp);
}

}  // namespace dnet
