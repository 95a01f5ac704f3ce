#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dnet/erf.hpp"
#include "dnet/model.hpp"

// Analytical complexity accounting. Convolution MACs are
// out_voxels * out_channels * (in_channels / groups) * kD*kH*kW; transposed
// convolutions are counted against their output voxels with the same
// formula. Activations, normalizations, pooling reductions and elementwise
// gates count one op per element and are lumped into per-module "pointwise"
// entries; channel concatenation is pure data movement and counts zero.
// flops_x1 reports MACs as FLOPs, flops_x2 doubles them (multiply + add).

namespace dnet::analysis {

struct LayerEntry {
  std::string path;
  std::uint64_t param_count = 0;
  std::uint64_t macs = 0;
  std::uint64_t flops_x1 = 0;
  std::uint64_t flops_x2 = 0;
};

struct FlopReport {
  Extents input_extents;  // [N, C_in, D, H, W]
  std::vector<LayerEntry> layers;
  std::uint64_t total_params = 0;
  std::uint64_t total_macs = 0;
  std::uint64_t total_flops_x1 = 0;
  std::uint64_t total_flops_x2 = 0;
  std::string notes;

  void add(const std::string& path, std::uint64_t params, std::uint64_t macs) {
    layers.push_back({path, params, macs, macs, 2 * macs});
    total_params += params;
    total_macs += macs;
    total_flops_x1 += macs;
    total_flops_x2 += 2 * macs;
  }
};

namespace detail {

inline std::uint64_t conv_params(const ConvSpec& s, bool transposed) {
  const std::uint64_t k = static_cast<std::uint64_t>(s.kernel[0]) * s.kernel[1] *
                          s.kernel[2];
  const std::uint64_t w =
      transposed ? static_cast<std::uint64_t>(s.in_channels) *
                       (s.out_channels / s.groups) * k
                 : static_cast<std::uint64_t>(s.out_channels) *
                       (s.in_channels / s.groups) * k;
  return w + (s.has_bias ? static_cast<std::uint64_t>(s.out_channels) : 0);
}

inline std::uint64_t conv_macs(const ConvSpec& s, std::uint64_t out_voxels) {
  const std::uint64_t k = static_cast<std::uint64_t>(s.kernel[0]) * s.kernel[1] *
                          s.kernel[2];
  return out_voxels * s.out_channels * (s.in_channels / s.groups) * k;
}

inline std::uint64_t norm_params(std::uint64_t channels, bool batch_norm) {
  return channels * (batch_norm ? 4 : 2);  // BN carries running stats
}

// Walk context: voxel counts are N * spatial volume at the current level.
struct Walk {
  FlopReport& r;
  std::uint64_t batch;

  void conv(const std::string& path, const ConvSpec& s, std::uint64_t out_vox,
            bool transposed = false) {
    r.add(path, conv_params(s, transposed), conv_macs(s, out_vox));
  }
  void layer_norm(const std::string& path, std::uint64_t c, std::uint64_t vox) {
    r.add(path, norm_params(c, false), c * vox);
  }
  void batch_norm(const std::string& path, std::uint64_t c, std::uint64_t vox) {
    r.add(path, norm_params(c, true), c * vox);
  }
  void pointwise(const std::string& path, std::uint64_t ops) {
    r.add(path, 0, ops);
  }
};

inline void conv_bn_act_report(Walk& w, const std::string& prefix,
                               const ConvSpec& s, std::uint64_t out_vox) {
  w.conv(prefix + ".conv", s, out_vox);
  w.batch_norm(prefix + ".bn", s.out_channels, out_vox);
  w.pointwise(prefix + ".act", static_cast<std::uint64_t>(s.out_channels) * out_vox);
}

inline void dlk_report(Walk& w, const std::string& prefix, int c,
                       std::uint64_t vox, std::uint64_t batch,
                       CombineMode mode) {
  const std::uint64_t uc = static_cast<std::uint64_t>(c);
  const int half = c / 2;
  w.conv(prefix + ".project", make_conv_spec(c, half, 1), vox);
  w.conv(prefix + ".dw5", make_conv_spec(half, half, 5, 1, 1, half), vox);
  w.conv(prefix + ".dw7", make_conv_spec(half, half, 7, 1, 3, half), vox);
  w.conv(prefix + ".spatial_gate", make_conv_spec(2, 2, 7), vox);
  w.conv(prefix + ".channel_gate", make_conv_spec(c, c, 1), batch);
  // pools, gate sigmoids, calibration muls and the residual add
  std::uint64_t ops = 2 * uc * vox;  // avp + map reductions
  ops += 2 * vox;                    // gate sigmoid
  ops += (mode == CombineMode::split_calibrate) ? uc * vox : 3 * uc * vox;
  ops += uc * vox;          // global average pool reduction
  ops += uc * batch;        // channel gate sigmoid
  ops += 2 * uc * vox;      // w_ch scaling + residual add
  w.pointwise(prefix + ".pointwise", ops);
}

inline void dlk_block_report(Walk& w, const std::string& prefix, int c,
                             std::uint64_t vox, std::uint64_t batch, int ratio,
                             CombineMode mode) {
  const std::uint64_t uc = static_cast<std::uint64_t>(c);
  w.layer_norm(prefix + ".ln1", uc, vox);
  w.conv(prefix + ".dlk.pre_linear", make_conv_spec(c, c, 1), vox);
  dlk_report(w, prefix + ".dlk", c, vox, batch, mode);
  w.conv(prefix + ".dlk.post_linear", make_conv_spec(c, c, 1), vox);
  w.layer_norm(prefix + ".ln2", uc, vox);
  w.conv(prefix + ".mlp.expand", make_conv_spec(c, ratio * c, 1), vox);
  w.conv(prefix + ".mlp.contract", make_conv_spec(ratio * c, c, 1), vox);
  // gelu in the module, gelu in the mlp hidden, two residual adds
  w.pointwise(prefix + ".pointwise",
              uc * vox + static_cast<std::uint64_t>(ratio) * uc * vox + 2 * uc * vox);
}

inline void dff_report(Walk& w, const std::string& prefix, int c,
                       std::uint64_t vox, std::uint64_t batch) {
  const std::uint64_t uc = static_cast<std::uint64_t>(c);
  w.conv(prefix + ".channel_gate", make_conv_spec(2 * c, 2 * c, 1), batch);
  w.conv(prefix + ".reduce", make_conv_spec(2 * c, c, 1), vox);
  w.conv(prefix + ".spatial_gate_a", make_conv_spec(c, 1, 1), vox);
  w.conv(prefix + ".spatial_gate_b", make_conv_spec(c, 1, 1), vox);
  // gap + channel sigmoid + channel calibration, spatial add/sigmoid/scale
  w.pointwise(prefix + ".pointwise",
              2 * uc * vox + 2 * uc * batch + 2 * uc * vox + 2 * vox + uc * vox);
}

inline void mixer_report(Walk& w, const std::string& prefix, int c, int m,
                         std::uint64_t vox) {
  const std::uint64_t uc = static_cast<std::uint64_t>(c);
  const std::uint64_t hidden = uc * static_cast<std::uint64_t>(m);
  w.batch_norm(prefix + ".bn", uc, vox);
  w.conv(prefix + ".expand", make_conv_spec(c, m * c, 1), vox);
  w.conv(prefix + ".dw3",
         make_conv_spec(m * c, m * c, 3, 1, 1, m * c), vox);
  w.conv(prefix + ".contract", make_conv_spec(m * c, c, 1), vox);
  w.pointwise(prefix + ".pointwise", hidden * vox + uc * vox);  // gelu + residual
}

}  // namespace detail

inline FlopReport model_report(const ModelConfig& config,
                               const std::array<std::size_t, 3>& dims,
                               std::size_t batch = 1) {
  config.validate();
  const std::size_t mult = config.required_multiple();
  if (dims[0] % mult || dims[1] % mult || dims[2] % mult) {
    throw std::invalid_argument(
        "model_report: input dims " +
        extents_to_string({dims[0], dims[1], dims[2]}) +
        " must each be divisible by " + std::to_string(mult));
  }
  FlopReport report;
  report.input_extents = {batch, static_cast<std::size_t>(config.in_channels),
                          dims[0], dims[1], dims[2]};
  report.notes =
      "macs: out_voxels*out_ch*(in_ch/groups)*k^3 per convolution "
      "(transposed counted against output voxels); activations, norms, "
      "pools and gates: 1 op/element, lumped into .pointwise entries; "
      "concat free; flops_x1 = macs, flops_x2 = 2*macs";
  detail::Walk w{report, static_cast<std::uint64_t>(batch)};

  auto vox_at = [&](int level) {  // N * spatial voxels at 1/2^level resolution
    return static_cast<std::uint64_t>(batch) * (dims[0] >> level) *
           (dims[1] >> level) * (dims[2] >> level);
  };
  const std::uint64_t ub = static_cast<std::uint64_t>(batch);
  const int C = config.base_width;
  const int S = config.num_stages;

  detail::conv_bn_act_report(
      w, "stem", make_conv_spec(config.in_channels, C, 7, 2, 1, 1, false),
      vox_at(1));

  for (int i = 1; i <= S; ++i) {
    const int c = config.stage_channels(i);
    const std::string sp = "stage" + std::to_string(i);
    for (int j = 1; j <= config.blocks_per_stage; ++j) {
      detail::dlk_block_report(w, sp + ".block" + std::to_string(j), c,
                               vox_at(i), ub, config.mlp_ratio,
                               config.combine_mode);
    }
    w.conv(sp + ".downsample", make_conv_spec(c, 2 * c, 3, 2), vox_at(i + 1));
  }
  for (int j = 1; j <= config.blocks_per_stage; ++j) {
    detail::dlk_block_report(w, "bottleneck.block" + std::to_string(j),
                             config.bottleneck_channels(), vox_at(S + 1), ub,
                             config.mlp_ratio, config.combine_mode);
  }

  if (config.variant == Variant::dlknetr) {
    for (int i = 1; i <= S; ++i) {
      const int stage = S - i + 1;
      const int c = config.stage_channels(stage);
      const std::string lp = "netr.level" + std::to_string(i);
      ConvSpec up;
      up.kernel = {2, 2, 2};
      up.stride = {2, 2, 2};
      up.in_channels = 2 * c;
      up.out_channels = c;
      w.conv(lp + ".upsample", up, vox_at(stage), true);
      detail::conv_bn_act_report(w, lp + ".skip_conv",
                                 make_conv_spec(c, c, 3, 1, 1, 1, false),
                                 vox_at(stage));
      w.pointwise(lp + ".skip_conv.residual",
                  static_cast<std::uint64_t>(c) * vox_at(stage));
      detail::conv_bn_act_report(w, lp + ".merge",
                                 make_conv_spec(2 * c, c, 3, 1, 1, 1, false),
                                 vox_at(stage));
    }
    ConvSpec fup;
    fup.kernel = {2, 2, 2};
    fup.stride = {2, 2, 2};
    fup.in_channels = C;
    fup.out_channels = C;
    w.conv("netr.final_up", fup, vox_at(0), true);
    detail::conv_bn_act_report(
        w, "netr.input_block",
        make_conv_spec(config.in_channels, C, 3, 1, 1, 1, false), vox_at(0));
    detail::conv_bn_act_report(w, "netr.final_merge",
                               make_conv_spec(2 * C, C, 3, 1, 1, 1, false),
                               vox_at(0));
    w.conv("netr.head", make_conv_spec(C, config.num_classes, 1), vox_at(0));
    return report;
  }

  for (int i = 1; i <= S; ++i) {
    const int stage = S - i + 1;
    const int c = config.stage_channels(stage);
    const std::string dp = "decoder.stage" + std::to_string(i);
    ConvSpec up;
    up.kernel = {2, 2, 2};
    up.stride = {2, 2, 2};
    up.in_channels = 2 * c;
    up.out_channels = c;
    w.conv(dp + ".upsample", up, vox_at(stage), true);
    detail::dff_report(w, dp + ".dff", c, vox_at(stage), ub);
    for (int j = 1; j <= config.blocks_per_stage; ++j) {
      detail::dlk_block_report(w, dp + ".block" + std::to_string(j), c,
                               vox_at(stage), ub, config.mlp_ratio,
                               config.combine_mode);
    }
  }
  ConvSpec dstem;
  dstem.kernel = {2, 2, 2};
  dstem.stride = {2, 2, 2};
  dstem.in_channels = C;
  dstem.out_channels = C;
  w.conv("decoder.stem", dstem, vox_at(0), true);

  if (config.has_salience()) {
    detail::conv_bn_act_report(
        w, "salience.projection",
        make_conv_spec(config.in_channels, C, 3, 1, 1, 1, false), vox_at(0));
    switch (config.salience_body) {
      case SalienceBody::mixer:
        detail::mixer_report(w, "salience.mixer", C, config.mlp_ratio, vox_at(0));
        break;
      case SalienceBody::convblock:
        detail::conv_bn_act_report(w, "salience.body1",
                                   make_conv_spec(C, C, 3, 1, 1, 1, false),
                                   vox_at(0));
        detail::conv_bn_act_report(w, "salience.body2",
                                   make_conv_spec(C, C, 3, 1, 1, 1, false),
                                   vox_at(0));
        break;
      case SalienceBody::dlk:
        detail::dlk_report(w, "salience.body1", C, vox_at(0), ub,
                           config.combine_mode);
        detail::dlk_report(w, "salience.body2", C, vox_at(0), ub,
                           config.combine_mode);
        break;
      case SalienceBody::none:
        break;
    }
    detail::dff_report(w, "salience.dff", C, vox_at(0), ub);
    detail::conv_bn_act_report(w, "salience.refine1",
                               make_conv_spec(C, C, 3, 1, 1, 1, false), vox_at(0));
    detail::conv_bn_act_report(w, "salience.refine2",
                               make_conv_spec(C, C, 3, 1, 1, 1, false), vox_at(0));
    w.conv("salience.head", make_conv_spec(C, config.num_classes, 1), vox_at(0));
  } else {
    w.conv("head", make_conv_spec(C, config.num_classes, 1), vox_at(0));
  }
  return report;
}

// Parameters are independent of the input patch size; the walk runs at the
// minimal valid dims.
inline std::uint64_t count_params(const ModelConfig& config) {
  const std::size_t m = config.required_multiple();
  return model_report(config, {m, m, m}).total_params;
}

// ERF of the encoder path along one axis: stem, then per stage the DLK
// depthwise cascade of every block followed by the downsampling conv.
inline std::vector<ErfLayer> encoder_erf_layers(const ModelConfig& config) {
  std::vector<ErfLayer> layers;
  layers.push_back({7, 1, 2});  // stem
  for (int i = 1; i <= config.num_stages; ++i) {
    for (int j = 0; j < config.blocks_per_stage; ++j) {
      layers.push_back({5, 1, 1});
      layers.push_back({7, 3, 1});
    }
    layers.push_back({3, 1, 2});  // downsample
  }
  for (int j = 0; j < config.blocks_per_stage; ++j) {
    layers.push_back({5, 1, 1});
    layers.push_back({7, 3, 1});
  }
  return layers;
}

}  // namespace dnet::analysis
