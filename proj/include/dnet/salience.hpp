#pragma once

#include <array>
#include <stdexcept>
#include <string>

#include "dnet/dlk.hpp"
#include "dnet/fusion.hpp"
#include "dnet/layers.hpp"

// Channel Mixer and the full-resolution Salience layer. The Salience layer
// projects the raw image to C channels without changing resolution, mixes
// channels, fuses with the decoder output in a DFF, refines with two 3x3x3
// conv blocks and emits voxel-wise logits.

namespace dnet {

enum class SalienceBody { none, convblock, dlk, mixer };

inline const char* to_string(SalienceBody b) {
  switch (b) {
    case SalienceBody::none: return "none";
    case SalienceBody::convblock: return "convblock";
    case SalienceBody::dlk: return "dlk";
    case SalienceBody::mixer: return "mixer";
  }
  return "?";
}

template <typename T>
struct ChannelMixerWeights {
  int expansion = 4;
  BatchNormLayer<T> bn;
  Conv3dLayer<T> expand;    // 1x1x1, C -> M*C
  Conv3dLayer<T> dw3;       // depthwise 3x3x3 on M*C
  Conv3dLayer<T> contract;  // 1x1x1, M*C -> C
  double drop1 = 0.0;
  double drop2 = 0.0;

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    bn.visit(prefix + ".bn", f);
    expand.visit(prefix + ".expand", f);
    dw3.visit(prefix + ".dw3", f);
    contract.visit(prefix + ".contract", f);
  }
};

template <typename T>
ChannelMixerWeights<T> make_channel_mixer(int channels, int expansion,
                                          double drop1 = 0.0, double drop2 = 0.0) {
  if (expansion < 1) {
    throw std::invalid_argument("channel mixer expansion must be >= 1");
  }
  ChannelMixerWeights<T> w;
  w.expansion = expansion;
  w.bn = make_batch_norm<T>(channels);
  w.expand = make_pointwise<T>(channels, expansion * channels);
  w.dw3 = make_depthwise<T>(expansion * channels, 3, 1);
  w.contract = make_pointwise<T>(expansion * channels, channels);
  w.drop1 = drop1;
  w.drop2 = drop2;
  return w;
}

// BN -> expand -> DWConv3 -> GELU -> dropout -> contract -> dropout -> + x
template <typename T>
Var channel_mixer_forward(Session<T>& s, const ChannelMixerWeights<T>& w, Var x) {
  Var y = batch_norm_forward(s, w.bn, x);
  y = conv_forward(s, w.expand, y);
  y = conv_forward(s, w.dw3, y);
  y = s.tape.activation(y, ops::Activation::gelu);
  y = s.tape.dropout(y, w.drop1, s.training(), s.next_dropout_seed());
  y = conv_forward(s, w.contract, y);
  y = s.tape.dropout(y, w.drop2, s.training(), s.next_dropout_seed());
  return s.tape.add(y, x);
}

template <typename T>
struct SalienceWeights {
  SalienceBody body_kind = SalienceBody::mixer;
  ConvBnAct<T> projection;  // 3x3x3 in_ch -> C, stride 1
  // exactly one body is populated, matching body_kind
  ChannelMixerWeights<T> mixer;
  ConvBnAct<T> body1, body2;      // convblock variant
  DLKWeights<T> dlk1, dlk2;       // dlk variant
  DFFWeights<T> dff;
  ConvBnAct<T> refine1;
  ConvBnAct<T> refine2;
  Conv3dLayer<T> head;  // 1x1x1, C -> num_classes

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    projection.visit(prefix + ".projection", f);
    switch (body_kind) {
      case SalienceBody::mixer:
        mixer.visit(prefix + ".mixer", f);
        break;
      case SalienceBody::convblock:
        body1.visit(prefix + ".body1", f);
        body2.visit(prefix + ".body2", f);
        break;
      case SalienceBody::dlk:
        dlk1.visit(prefix + ".body1", f);
        dlk2.visit(prefix + ".body2", f);
        break;
      case SalienceBody::none:
        break;
    }
    dff.visit(prefix + ".dff", f);
    refine1.visit(prefix + ".refine1", f);
    refine2.visit(prefix + ".refine2", f);
    head.visit(prefix + ".head", f);
  }
};

template <typename T>
SalienceWeights<T> make_salience(int in_channels, int channels, int num_classes,
                                 SalienceBody body, int mixer_expansion,
                                 double drop1, double drop2) {
  if (body == SalienceBody::none) {
    throw std::invalid_argument("salience layer requires a body kind");
  }
  SalienceWeights<T> w;
  w.body_kind = body;
  w.projection = make_conv_bn_act<T>(in_channels, channels, 3);
  switch (body) {
    case SalienceBody::mixer:
      w.mixer = make_channel_mixer<T>(channels, mixer_expansion, drop1, drop2);
      break;
    case SalienceBody::convblock:
      w.body1 = make_conv_bn_act<T>(channels, channels, 3);
      w.body2 = make_conv_bn_act<T>(channels, channels, 3);
      break;
    case SalienceBody::dlk:
      w.dlk1 = make_dlk<T>(channels);
      w.dlk2 = make_dlk<T>(channels);
      break;
    case SalienceBody::none:
      break;
  }
  w.dff = make_dff<T>(channels);
  w.refine1 = make_conv_bn_act<T>(channels, channels, 3);
  w.refine2 = make_conv_bn_act<T>(channels, channels, 3);
  w.head = make_pointwise<T>(channels, num_classes);
  return w;
}

template <typename T>
Var salience_forward(Session<T>& s, const SalienceWeights<T>& w, Var image,
                     Var decoder_out, CombineMode combine_mode) {
  const DenseTensor<T>& img = s.tape.value(image);
  const DenseTensor<T>& dec = s.tape.value(decoder_out);
  if (img.d() != dec.d() || img.h() != dec.h() || img.w() != dec.w()) {
    throw std::invalid_argument(
        "salience_forward: image and decoder output must share spatial "
        "extents, got " +
        extents_to_string(img.extents) + " vs " + extents_to_string(dec.extents));
  }
  Var x = conv_bn_act_forward(s, w.projection, image);
  switch (w.body_kind) {
    case SalienceBody::mixer:
      x = channel_mixer_forward(s, w.mixer, x);
      break;
    case SalienceBody::convblock:
      x = conv_bn_act_forward(s, w.body1, x);
      x = conv_bn_act_forward(s, w.body2, x);
      break;
    case SalienceBody::dlk:
      x = dlk_forward(s, w.dlk1, x, combine_mode);
      x = dlk_forward(s, w.dlk2, x, combine_mode);
      break;
    case SalienceBody::none:
      throw std::logic_error("salience_forward: body kind none");
  }
  x = dff_forward(s, w.dff, x, decoder_out);
  x = conv_bn_act_forward(s, w.refine1, x);
  x = conv_bn_act_forward(s, w.refine2, x);
  return conv_forward(s, w.head, x);
}

}  // namespace dnet
