#pragma once

#include <cassert>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "dnet/dlk.hpp"
#include "dnet/fusion.hpp"
#include "dnet/layers.hpp"
#include "dnet/salience.hpp"

// Model assembly: D-Net (encoder / bottleneck / decoder / Salience layer),
// DLK-Net (the same U without the Salience layer) and DLK-NETR (the same
// encoder in a UNETR-style decoder).

namespace dnet {

enum class Variant { dnet, dlknet, dlknetr };

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::dnet: return "dnet";
    case Variant::dlknet: return "dlknet";
    case Variant::dlknetr: return "dlknetr";
  }
  return "?";
}

struct ModelConfig {
  Variant variant = Variant::dnet;
  int base_width = 48;  // C
  int in_channels = 1;
  int num_classes = 16;
  int num_stages = 4;
  int blocks_per_stage = 2;
  int mlp_ratio = 4;
  CombineMode combine_mode = CombineMode::split_calibrate;
  SalienceBody salience_body = SalienceBody::mixer;
  std::array<double, 2> dropout_rates{0.0, 0.0};
  std::uint64_t init_seed = 0;

  // Input spatial extents must be divisible by this (stem plus per-stage
  // downsampling).
  std::size_t required_multiple() const {
    return std::size_t(1) << (num_stages + 1);
  }

  int stage_channels(int stage) const {  // channels the stage's blocks run at
    return base_width << (stage - 1);
  }
  int bottleneck_channels() const { return base_width << num_stages; }

  bool has_salience() const {
    return variant == Variant::dnet && salience_body != SalienceBody::none;
  }

  void validate() const {
    if (base_width < 2 || base_width % 2 != 0) {
      throw std::invalid_argument("base_width must be a positive even integer");
    }
    if (in_channels < 1 || num_classes < 1) {
      throw std::invalid_argument("in_channels and num_classes must be >= 1");
    }
    if (num_stages < 1 || num_stages > 8) {
      throw std::invalid_argument("num_stages must lie in [1, 8]");
    }
    if (blocks_per_stage < 1 || mlp_ratio < 1) {
      throw std::invalid_argument("blocks_per_stage and mlp_ratio must be >= 1");
    }
    for (double r : dropout_rates) {
      if (r < 0.0 || r >= 1.0) {
        throw std::invalid_argument("dropout rates must lie in [0, 1)");
      }
    }
    if (variant != Variant::dnet && salience_body != SalienceBody::none) {
      throw std::invalid_argument(
          "salience_body must be 'none' unless variant is dnet");
    }
  }
};

// ---------------------------------------------------------------------------
// Weight containers
// ---------------------------------------------------------------------------

template <typename T>
struct EncoderStage {
  std::vector<DLKBlockWeights<T>> blocks;
  Conv3dLayer<T> downsample;  // 3x3x3 stride 2, c -> 2c

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    for (std::size_t j = 0; j < blocks.size(); ++j) {
      blocks[j].visit(prefix + ".block" + std::to_string(j + 1), f);
    }
    downsample.visit(prefix + ".downsample", f);
  }
};

template <typename T>
struct DecoderStage {
  Conv3dLayer<T> upsample;  // transposed 2x2x2 stride 2, 2c -> c
  DFFWeights<T> dff;
  std::vector<DLKBlockWeights<T>> blocks;

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    upsample.visit(prefix + ".upsample", f);
    dff.visit(prefix + ".dff", f);
    for (std::size_t j = 0; j < blocks.size(); ++j) {
      blocks[j].visit(prefix + ".block" + std::to_string(j + 1), f);
    }
  }
};

template <typename T>
struct NetrLevel {
  Conv3dLayer<T> upsample;  // transposed 2x2x2 stride 2, 2c -> c
  ConvBnAct<T> skip_conv;   // residual 3x3x3 block at c
  ConvBnAct<T> merge;       // 3x3x3, 2c -> c

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    upsample.visit(prefix + ".upsample", f);
    skip_conv.visit(prefix + ".skip_conv", f);
    merge.visit(prefix + ".merge", f);
  }
};

template <typename T>
struct NetrDecoder {
  std::vector<NetrLevel<T>> levels;  // deepest first
  Conv3dLayer<T> final_up;           // transposed, C -> C, to full resolution
  ConvBnAct<T> input_block;          // 3x3x3, in_channels -> C, on the raw input
  ConvBnAct<T> final_merge;          // 3x3x3, 2C -> C
  Conv3dLayer<T> head;               // 1x1x1, C -> num_classes

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    for (std::size_t i = 0; i < levels.size(); ++i) {
      levels[i].visit(prefix + ".level" + std::to_string(i + 1), f);
    }
    final_up.visit(prefix + ".final_up", f);
    input_block.visit(prefix + ".input_block", f);
    final_merge.visit(prefix + ".final_merge", f);
    head.visit(prefix + ".head", f);
  }
};

template <typename T>
struct Model {
  ModelConfig config;
  ConvBnAct<T> stem;  // 7x7x7 stride 2
  std::vector<EncoderStage<T>> encoder;
  std::vector<DLKBlockWeights<T>> bottleneck;
  std::vector<DecoderStage<T>> decoder;  // deepest first; empty for dlknetr
  std::optional<Conv3dLayer<T>> decoder_stem;
  std::optional<SalienceWeights<T>> salience;
  std::optional<Conv3dLayer<T>> head;  // plain 1x1x1 head when no salience
  std::optional<NetrDecoder<T>> netr;

  template <class F>
  void visit(F&& f) {
    stem.visit("stem", f);
    for (std::size_t i = 0; i < encoder.size(); ++i) {
      encoder[i].visit("stage" + std::to_string(i + 1), f);
    }
    for (std::size_t j = 0; j < bottleneck.size(); ++j) {
      bottleneck[j].visit("bottleneck.block" + std::to_string(j + 1), f);
    }
    for (std::size_t i = 0; i < decoder.size(); ++i) {
      decoder[i].visit("decoder.stage" + std::to_string(i + 1), f);
    }
    if (decoder_stem) decoder_stem->visit("decoder.stem", f);
    if (salience) salience->visit("salience", f);
    if (head) head->visit("head", f);
    if (netr) netr->visit("netr", f);
  }
};

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

template <typename T>
Conv3dLayer<T> make_transposed2(int in_channels, int out_channels) {
  ConvSpec s;
  s.kernel = {2, 2, 2};
  s.stride = {2, 2, 2};
  s.dilation = {1, 1, 1};
  s.padding = {0, 0, 0};
  s.groups = 1;
  s.in_channels = in_channels;
  s.out_channels = out_channels;
  s.has_bias = true;
  return make_conv_layer<T>(s, /*transposed=*/true);
}

template <typename T>
Model<T> build_model(const ModelConfig& config) {
  config.validate();
  Model<T> m;
  m.config = config;
  const int C = config.base_width;

  m.stem = make_conv_bn_act<T>(config.in_channels, C, 7, /*stride=*/2);

  for (int i = 1; i <= config.num_stages; ++i) {
    const int c = config.stage_channels(i);
    EncoderStage<T> st;
    for (int j = 0; j < config.blocks_per_stage; ++j) {
      st.blocks.push_back(make_dlk_block<T>(c, config.mlp_ratio));
    }
    st.downsample =
        make_conv_layer<T>(make_conv_spec(c, 2 * c, 3, /*stride=*/2));
    m.encoder.push_back(std::move(st));
  }

  const int bc = config.bottleneck_channels();
  for (int j = 0; j < config.blocks_per_stage; ++j) {
    m.bottleneck.push_back(make_dlk_block<T>(bc, config.mlp_ratio));
  }

  if (config.variant == Variant::dlknetr) {
    NetrDecoder<T> nd;
    for (int i = config.num_stages; i >= 1; --i) {
      const int c = config.stage_channels(i);
      NetrLevel<T> lv;
      lv.upsample = make_transposed2<T>(2 * c, c);
      lv.skip_conv = make_conv_bn_act<T>(c, c, 3);
      lv.merge = make_conv_bn_act<T>(2 * c, c, 3);
      nd.levels.push_back(std::move(lv));
    }
    nd.final_up = make_transposed2<T>(C, C);
    nd.input_block = make_conv_bn_act<T>(config.in_channels, C, 3);
    nd.final_merge = make_conv_bn_act<T>(2 * C, C, 3);
    nd.head = make_pointwise<T>(C, config.num_classes);
    m.netr = std::move(nd);
  } else {
    for (int i = config.num_stages; i >= 1; --i) {
      const int c = config.stage_channels(i);
      DecoderStage<T> st;
      st.upsample = make_transposed2<T>(2 * c, c);
      st.dff = make_dff<T>(c);
      for (int j = 0; j < config.blocks_per_stage; ++j) {
        st.blocks.push_back(make_dlk_block<T>(c, config.mlp_ratio));
      }
      m.decoder.push_back(std::move(st));
    }
    m.decoder_stem = make_transposed2<T>(C, C);
    if (config.has_salience()) {
      m.salience = make_salience<T>(config.in_channels, C, config.num_classes,
                                    config.salience_body, config.mlp_ratio,
                                    config.dropout_rates[0],
                                    config.dropout_rates[1]);
    } else {
      m.head = make_pointwise<T>(C, config.num_classes);
    }
  }

  std::mt19937_64 eng(config.init_seed);
  m.visit([&eng](const std::string&, Param<T>& p, ParamInit kind) {
    init_param(p, kind, eng);
  });
  return m;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

template <typename T>
void check_model_input(const ModelConfig& config, const DenseTensor<T>& input) {
  input.require_rank(5, "model_forward");
  if (input.c() != static_cast<std::size_t>(config.in_channels)) {
    throw std::invalid_argument(
        "model_forward: input has " + std::to_string(input.c()) +
        " channels, config expects " + std::to_string(config.in_channels));
  }
  const std::size_t mult = config.required_multiple();
  if (input.d() % mult || input.h() % mult || input.w() % mult) {
    throw std::invalid_argument(
        "model_forward: input spatial extents " +
        extents_to_string({input.d(), input.h(), input.w()}) +
        " must each be divisible by " + std::to_string(mult) +
        " (stem stride 2 plus " + std::to_string(config.num_stages) +
        " downsampling stages)");
  }
}

template <typename T>
Var model_forward_on(Session<T>& s, const Model<T>& m, Var input) {
  const ModelConfig& cfg = m.config;
  check_model_input(cfg, s.tape.value(input));

  Var x = conv_bn_act_forward(s, m.stem, input);
  assert(s.tape.value(x).c() == static_cast<std::size_t>(cfg.base_width));

  std::vector<Var> skips;
  for (std::size_t i = 0; i < m.encoder.size(); ++i) {
    for (const auto& blk : m.encoder[i].blocks) {
      x = dlk_block_forward(s, blk, x, cfg.combine_mode);
    }
    skips.push_back(x);
    x = conv_forward(s, m.encoder[i].downsample, x);
    assert(s.tape.value(x).c() ==
           static_cast<std::size_t>(cfg.base_width) << (i + 1));
  }
  for (const auto& blk : m.bottleneck) {
    x = dlk_block_forward(s, blk, x, cfg.combine_mode);
  }

  if (m.netr) {
    for (std::size_t i = 0; i < m.netr->levels.size(); ++i) {
      const NetrLevel<T>& lv = m.netr->levels[i];
      x = conv_forward(s, lv.upsample, x);
      Var skip = skips[skips.size() - 1 - i];
      Var sk = conv_forward(s, lv.skip_conv.conv, skip);
      sk = batch_norm_forward(s, lv.skip_conv.bn, sk);
      sk = s.tape.add(sk, skip);
      s.observe_signs(s.tape.value(sk));
      sk = s.tape.activation(sk, ops::Activation::leaky_relu,
                             lv.skip_conv.leaky_alpha);
      x = conv_bn_act_forward(s, lv.merge, s.tape.concat_channels(sk, x));
    }
    x = conv_forward(s, m.netr->final_up, x);
    Var inp = conv_bn_act_forward(s, m.netr->input_block, input);
    x = conv_bn_act_forward(s, m.netr->final_merge, s.tape.concat_channels(inp, x));
    return conv_forward(s, m.netr->head, x);
  }

  for (std::size_t i = 0; i < m.decoder.size(); ++i) {
    const DecoderStage<T>& st = m.decoder[i];
    x = conv_forward(s, st.upsample, x);
    x = dff_forward(s, st.dff, skips[skips.size() - 1 - i], x);
    for (const auto& blk : st.blocks) {
      x = dlk_block_forward(s, blk, x, cfg.combine_mode);
    }
  }
  x = conv_forward(s, *m.decoder_stem, x);

  if (m.salience) {
    return salience_forward(s, *m.salience, input, x, cfg.combine_mode);
  }
  return conv_forward(s, *m.head, x);
}

// Convenience single-shot forward; training drives sessions directly.
template <typename T>
DenseTensor<T> model_forward(const Model<T>& m, const DenseTensor<T>& input,
                             RunMode mode = RunMode::eval,
                             std::uint64_t seed = 0) {
  Tape<T> tape;
  Session<T> s(tape, mode, /*grads=*/false, seed);
  Var out = model_forward_on(s, m, tape.leaf(input));
  return tape.value(out);
}

// Applies batch-norm running statistic updates collected during a training
// forward pass. The session's parameter pointers identify the slots.
template <typename T>
void commit_stat_updates(Model<T>& m, const Session<T>& s) {
  if (s.stat_updates.empty()) return;
  std::unordered_map<const Param<T>*, const DenseTensor<T>*> updates;
  for (const auto& [p, v] : s.stat_updates) updates[p] = &v;
  m.visit([&updates](const std::string&, Param<T>& p, ParamInit) {
    auto it = updates.find(&p);
    if (it != updates.end()) p.value = *it->second;
  });
}

// ---------------------------------------------------------------------------
// Shape schedule (used by tests and the analysis walk)
// ---------------------------------------------------------------------------

struct StageShape {
  std::string name;
  Extents extents;  // [N, C, D, H, W]
};

inline std::vector<StageShape> model_shape_schedule(const ModelConfig& config,
                                                    const Extents& input) {
  config.validate();
  if (input.size() != 5) {
    throw std::invalid_argument("model_shape_schedule expects rank-5 extents");
  }
  std::vector<StageShape> out;
  const std::size_t N = input[0];
  auto at = [&](int c, std::size_t div) {
    return Extents{N, static_cast<std::size_t>(c), input[2] / div,
                   input[3] / div, input[4] / div};
  };
  out.push_back({"input", input});
  out.push_back({"stem", at(config.base_width, 2)});
  for (int i = 1; i <= config.num_stages; ++i) {
    out.push_back({"stage" + std::to_string(i),
                   at(config.base_width << i, std::size_t(1) << (i + 1))});
  }
  out.push_back({"bottleneck", at(config.bottleneck_channels(),
                                  std::size_t(1) << (config.num_stages + 1))});
  for (int i = 1; i <= config.num_stages; ++i) {
    const int stage = config.num_stages - i + 1;
    out.push_back({"decoder.stage" + std::to_string(i),
                   at(config.stage_channels(stage), std::size_t(1) << stage)});
  }
  out.push_back({"full_resolution", at(config.base_width, 1)});
  out.push_back({"logits", at(config.num_classes, 1)});
  return out;
}

}  // namespace dnet
