#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dnet/autograd.hpp"
#include "dnet/checkpoint.hpp"
#include "dnet/model.hpp"

// Training at desk scale: a combined Dice + cross-entropy segmentation
// loss, SGD with poly learning-rate decay, hard Dice/IoU metrics, a
// deterministic synthetic sphere dataset and a toy end-to-end loop.

namespace dnet::train {

using LabelVolume = DenseTensor<std::uint16_t>;  // [N, D, H, W]

struct LossConfig {
  double lambda_dice = 0.5;
  double lambda_ce = 0.5;
  double smooth = 1e-5;
  std::vector<double> class_weights;  // optional, cross-entropy only

  void validate() const {
    if (lambda_dice < 0.0 || lambda_ce < 0.0 || lambda_dice + lambda_ce <= 0.0) {
      throw std::invalid_argument(
          "loss weights must be non-negative with a positive sum");
    }
  }
};

template <typename T>
void check_logits_labels(const DenseTensor<T>& logits, const LabelVolume& labels) {
  logits.require_rank(5, "loss");
  if (labels.extents !=
      Extents{logits.n(), logits.d(), logits.h(), logits.w()}) {
    throw std::invalid_argument(
        "loss: labels extents " + extents_to_string(labels.extents) +
        " do not match logits " + extents_to_string(logits.extents));
  }
  for (std::uint16_t l : labels.data) {
    if (l >= logits.c()) {
      throw std::invalid_argument("loss: label " + std::to_string(l) +
                                  " out of range for " +
                                  std::to_string(logits.c()) + " classes");
    }
  }
}

// ---------------------------------------------------------------------------
// Cross-entropy (mean negative log softmax probability of the true class,
// optionally class-weighted)
// ---------------------------------------------------------------------------

template <typename T>
Var ce_loss_op(Tape<T>& tape, Var logits, const LabelVolume& labels,
               const std::vector<double>& class_weights = {}) {
  const DenseTensor<T>& lg = tape.value(logits);
  check_logits_labels(lg, labels);
  if (!class_weights.empty() && class_weights.size() != lg.c()) {
    throw std::invalid_argument("loss: class_weights must have one entry per class");
  }
  const std::size_t K = lg.c();
  const std::size_t vol = lg.spatial_volume();
  const DenseTensor<T> p = ops::softmax_channels(lg);

  double acc = 0.0, wsum = 0.0;
  for (std::size_t n = 0; n < lg.n(); ++n) {
    for (std::size_t v = 0; v < vol; ++v) {
      const std::uint16_t y = labels.data[n * vol + v];
      const double w = class_weights.empty() ? 1.0 : class_weights[y];
      const double py = static_cast<double>(p.data[(n * K + y) * vol + v]);
      acc += -w * std::log(std::max(py, 1e-30));
      wsum += w;
    }
  }
  DenseTensor<T> out({1});
  out.data[0] = static_cast<T>(acc / wsum);
  ensure_finite(out, "ce_loss");

  const LabelVolume lab = labels;
  const std::vector<double> cw = class_weights;
  return tape.record(std::move(out), {logits},
                     [logits, lab, cw, wsum](Tape<T>& t, Var o) {
    const DenseTensor<T>& lgv = t.value(logits);
    const std::size_t Kc = lgv.c();
    const std::size_t volv = lgv.spatial_volume();
    const DenseTensor<T> pr = ops::softmax_channels(lgv);
    const double g = static_cast<double>(t.grad_ref(o).data[0]);
    DenseTensor<T> gl(lgv.extents);
    for (std::size_t n = 0; n < lgv.n(); ++n) {
      for (std::size_t v = 0; v < volv; ++v) {
        const std::uint16_t y = lab.data[n * volv + v];
        const double w = cw.empty() ? 1.0 : cw[y];
        for (std::size_t k = 0; k < Kc; ++k) {
          const double pk = static_cast<double>(pr.data[(n * Kc + k) * volv + v]);
          const double d = (k == y) ? pk - 1.0 : pk;
          gl.data[(n * Kc + k) * volv + v] = static_cast<T>(g * w * d / wsum);
        }
      }
    }
    t.accumulate(logits, std::move(gl));
  });
}

// ---------------------------------------------------------------------------
// Soft Dice over softmax probabilities, averaged over foreground classes
// ---------------------------------------------------------------------------

template <typename T>
Var dice_loss_op(Tape<T>& tape, Var logits, const LabelVolume& labels,
                 double smooth = 1e-5) {
  const DenseTensor<T>& lg = tape.value(logits);
  check_logits_labels(lg, labels);
  if (lg.c() < 2) {
    throw std::invalid_argument("dice loss requires at least 2 classes");
  }
  const std::size_t K = lg.c();
  const std::size_t vol = lg.spatial_volume();
  const DenseTensor<T> p = ops::softmax_channels(lg);

  // Per foreground class: intersect = sum(p*y), total = sum(p) + sum(y).
  std::vector<double> intersect(K, 0.0), total(K, 0.0);
  for (std::size_t n = 0; n < lg.n(); ++n) {
    for (std::size_t v = 0; v < vol; ++v) {
      const std::uint16_t y = labels.data[n * vol + v];
      for (std::size_t c = 1; c < K; ++c) {
        const double pc = static_cast<double>(p.data[(n * K + c) * vol + v]);
        total[c] += pc;
        if (y == c) {
          intersect[c] += pc;
          total[c] += 1.0;
        }
      }
    }
  }
  double dice_sum = 0.0;
  for (std::size_t c = 1; c < K; ++c) {
    dice_sum += (2.0 * intersect[c] + smooth) / (total[c] + smooth);
  }
  DenseTensor<T> out({1});
  out.data[0] = static_cast<T>(1.0 - dice_sum / static_cast<double>(K - 1));
  ensure_finite(out, "dice_loss");

  const LabelVolume lab = labels;
  return tape.record(std::move(out), {logits},
                     [logits, lab, smooth, intersect, total](Tape<T>& t, Var o) {
    const DenseTensor<T>& lgv = t.value(logits);
    const std::size_t Kc = lgv.c();
    const std::size_t volv = lgv.spatial_volume();
    const DenseTensor<T> pr = ops::softmax_channels(lgv);
    const double g = static_cast<double>(t.grad_ref(o).data[0]);
    const double inv_fg = 1.0 / static_cast<double>(Kc - 1);
    DenseTensor<T> gl(lgv.extents);
    std::vector<double> dLdp(Kc, 0.0);
    for (std::size_t n = 0; n < lgv.n(); ++n) {
      for (std::size_t v = 0; v < volv; ++v) {
        const std::uint16_t y = lab.data[n * volv + v];
        // dL/dp_c, then chain through the softmax jacobian
        double dot = 0.0;
        for (std::size_t c = 0; c < Kc; ++c) {
          if (c == 0) {
            dLdp[c] = 0.0;
          } else {
            const double denom = total[c] + smooth;
            const double num = 2.0 * intersect[c] + smooth;
            const double yc = (y == c) ? 1.0 : 0.0;
            dLdp[c] = -inv_fg * (2.0 * yc * denom - num) / (denom * denom);
          }
          dot += dLdp[c] * static_cast<double>(pr.data[(n * Kc + c) * volv + v]);
        }
        for (std::size_t k = 0; k < Kc; ++k) {
          const double pk = static_cast<double>(pr.data[(n * Kc + k) * volv + v]);
          gl.data[(n * Kc + k) * volv + v] =
              static_cast<T>(g * pk * (dLdp[k] - dot));
        }
      }
    }
    t.accumulate(logits, std::move(gl));
  });
}

template <typename T>
Var combined_loss_op(Tape<T>& tape, Var logits, const LabelVolume& labels,
                     const LossConfig& cfg) {
  cfg.validate();
  Var dice = dice_loss_op(tape, logits, labels, cfg.smooth);
  Var ce = ce_loss_op(tape, logits, labels, cfg.class_weights);
  return tape.weighted_sum(dice, ce, static_cast<T>(cfg.lambda_dice),
                           static_cast<T>(cfg.lambda_ce));
}

// Value-only conveniences.
template <typename T>
T dice_loss(const DenseTensor<T>& logits, const LabelVolume& labels,
            double smooth = 1e-5) {
  Tape<T> tape;
  return tape.value(dice_loss_op(tape, tape.leaf(logits), labels, smooth)).data[0];
}

template <typename T>
T combined_loss(const DenseTensor<T>& logits, const LabelVolume& labels,
                const LossConfig& cfg) {
  Tape<T> tape;
  return tape.value(combined_loss_op(tape, tape.leaf(logits), labels, cfg)).data[0];
}

// ---------------------------------------------------------------------------
// SGD with poly learning-rate decay
// ---------------------------------------------------------------------------

struct OptimConfig {
  double lr0 = 0.05;
  double momentum = 0.9;
  double poly_power = 0.9;
  std::int64_t max_epochs = 1;
};

struct OptimState {
  OptimConfig cfg;
  std::int64_t epoch = 0;  // advances on caller signal
  std::unordered_map<std::string, DenseTensor<float>> velocity;

  explicit OptimState(OptimConfig c) : cfg(std::move(c)) {
    if (cfg.lr0 < 0.0 || cfg.momentum < 0.0 || cfg.momentum >= 1.0 ||
        cfg.max_epochs < 1) {
      throw std::invalid_argument("invalid optimizer configuration");
    }
  }

  double lr() const { return lr_at(epoch); }
  double lr_at(std::int64_t e) const {
    const double frac = std::min(
        1.0, static_cast<double>(e) / static_cast<double>(cfg.max_epochs));
    return cfg.lr0 * std::pow(1.0 - frac, cfg.poly_power);
  }
};

using GradMap = std::vector<std::pair<std::string, DenseTensor<float>>>;

// v <- momentum * v + g;  w <- w - lr(epoch) * v
inline void sgd_poly_step(OptimState& state, const GradMap& grads,
                          Model<float>& model) {
  std::unordered_map<std::string, const DenseTensor<float>*> by_path;
  for (const auto& [path, g] : grads) by_path[path] = &g;
  const double lr = state.lr();
  const float m = static_cast<float>(state.cfg.momentum);
  model.visit([&](const std::string& path, Param<float>& p, ParamInit) {
    if (!p.trainable) return;
    auto it = by_path.find(path);
    if (it == by_path.end()) {
      throw std::runtime_error("sgd_poly_step: missing gradient for parameter '" +
                               path + "'");
    }
    const DenseTensor<float>& g = *it->second;
    if (g.extents != p.value.extents) {
      throw std::runtime_error("sgd_poly_step: gradient extents mismatch for '" +
                               path + "'");
    }
    auto [vit, inserted] = state.velocity.try_emplace(path, p.value.extents);
    DenseTensor<float>& vel = vit->second;
    for (std::size_t i = 0; i < vel.size(); ++i) {
      vel.data[i] = m * vel.data[i] + g.data[i];
      p.value.data[i] -= static_cast<float>(lr * vel.data[i]);
    }
  });
}

// ---------------------------------------------------------------------------
// Hard metrics
// ---------------------------------------------------------------------------

template <typename T>
LabelVolume argmax_labels(const DenseTensor<T>& logits) {
  logits.require_rank(5, "argmax_labels");
  const std::size_t K = logits.c();
  const std::size_t vol = logits.spatial_volume();
  LabelVolume out;
  out.extents = {logits.n(), logits.d(), logits.h(), logits.w()};
  out.data.assign(logits.n() * vol, 0);
  for (std::size_t n = 0; n < logits.n(); ++n) {
    for (std::size_t v = 0; v < vol; ++v) {
      std::size_t arg = 0;
      T best = logits.data[(n * K) * vol + v];
      for (std::size_t k = 1; k < K; ++k) {  // ties keep the lowest class
        const T x = logits.data[(n * K + k) * vol + v];
        if (x > best) {
          best = x;
          arg = k;
        }
      }
      out.data[n * vol + v] = static_cast<std::uint16_t>(arg);
    }
  }
  return out;
}

struct ClassMetrics {
  double dice = 1.0;
  double iou = 1.0;
};

// Per-class hard Dice and IoU; an empty-vs-empty class scores 1.0.
inline std::vector<ClassMetrics> eval_metrics(const LabelVolume& pred,
                                              const LabelVolume& truth,
                                              int num_classes) {
  if (pred.extents != truth.extents) {
    throw std::invalid_argument("eval_metrics: extents differ");
  }
  std::vector<std::uint64_t> inter(num_classes, 0), np(num_classes, 0),
      nt(num_classes, 0);
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const std::uint16_t a = pred.data[i];
    const std::uint16_t b = truth.data[i];
    if (a < num_classes) ++np[a];
    if (b < num_classes) ++nt[b];
    if (a == b && a < num_classes) ++inter[a];
  }
  std::vector<ClassMetrics> out(num_classes);
  for (int c = 0; c < num_classes; ++c) {
    const std::uint64_t i = inter[c];
    const std::uint64_t u = np[c] + nt[c] - i;
    if (np[c] + nt[c] == 0) {
      out[c] = {1.0, 1.0};
    } else {
      out[c].dice = 2.0 * static_cast<double>(i) /
                    static_cast<double>(np[c] + nt[c]);
      out[c].iou = u == 0 ? 1.0 : static_cast<double>(i) / static_cast<double>(u);
    }
  }
  return out;
}

inline double foreground_mean_dice(const std::vector<ClassMetrics>& m) {
  double acc = 0.0;
  for (std::size_t c = 1; c < m.size(); ++c) acc += m[c].dice;
  return m.size() > 1 ? acc / static_cast<double>(m.size() - 1) : 0.0;
}

inline double foreground_mean_iou(const std::vector<ClassMetrics>& m) {
  double acc = 0.0;
  for (std::size_t c = 1; c < m.size(); ++c) acc += m[c].iou;
  return m.size() > 1 ? acc / static_cast<double>(m.size() - 1) : 0.0;
}

// ---------------------------------------------------------------------------
// Synthetic sphere volumes
// ---------------------------------------------------------------------------

struct SynthSpec {
  Extents extents;  // [D, H, W]
  int num_spheres = 2;
  int radius_min = 3;
  int radius_max = 5;
  double noise_sigma = 0.05;
  std::uint64_t seed = 0;
  int num_classes = 2;

  void validate() const {
    if (extents.size() != 3) {
      throw std::invalid_argument("synth extents must be [D, H, W]");
    }
    check_extents(extents);
    if (num_spheres < 0 || num_classes < 2) {
      throw std::invalid_argument("synth: num_spheres >= 0 and num_classes >= 2");
    }
    if (radius_min < 1 || radius_max < radius_min) {
      throw std::invalid_argument("synth: invalid radius range");
    }
    const std::size_t min_extent =
        std::min({extents[0], extents[1], extents[2]});
    if (num_spheres > 0 &&
        static_cast<std::size_t>(2 * radius_max + 1) > min_extent) {
      throw std::invalid_argument(
          "synth: spheres of radius " + std::to_string(radius_max) +
          " do not fit inside volume " + extents_to_string(extents));
    }
    if (noise_sigma < 0.0) {
      throw std::invalid_argument("synth: noise sigma must be >= 0");
    }
  }
};

struct SynthSample {
  DenseTensor<float> volume;  // [1, 1, D, H, W]
  LabelVolume labels;         // [1, D, H, W]
};

// Foreground class c gets a distinct intensity offset over the noisy zero
// background.
inline double class_intensity(int cls, int num_classes) {
  return 0.5 + 0.5 * static_cast<double>(cls) /
                   static_cast<double>(std::max(1, num_classes - 1));
}

inline SynthSample synth_sample(const SynthSpec& spec, std::uint64_t index) {
  spec.validate();
  const std::size_t D = spec.extents[0], H = spec.extents[1], W = spec.extents[2];
  SynthSample s;
  s.volume = DenseTensor<float>({1, 1, D, H, W});
  s.labels.extents = {1, D, H, W};
  s.labels.data.assign(D * H * W, 0);

  SplitMix64 mix(spec.seed ^ (0x9e3779b97f4a7c15ULL * (index + 1)));
  SplitMix64 geom(mix.next());
  GaussianSource noise(mix.next());

  for (int k = 0; k < spec.num_spheres; ++k) {
    const std::int64_t r = geom.uniform_int(spec.radius_min, spec.radius_max);
    const std::int64_t cz = geom.uniform_int(r, static_cast<std::int64_t>(D) - 1 - r);
    const std::int64_t cy = geom.uniform_int(r, static_cast<std::int64_t>(H) - 1 - r);
    const std::int64_t cx = geom.uniform_int(r, static_cast<std::int64_t>(W) - 1 - r);
    const int cls = static_cast<int>(geom.uniform_int(1, spec.num_classes - 1));
    const float val = static_cast<float>(class_intensity(cls, spec.num_classes));
    for (std::int64_t z = cz - r; z <= cz + r; ++z) {
      for (std::int64_t y = cy - r; y <= cy + r; ++y) {
        for (std::int64_t x = cx - r; x <= cx + r; ++x) {
          const std::int64_t dz = z - cz, dy = y - cy, dx = x - cx;
          if (dz * dz + dy * dy + dx * dx <= r * r) {
            const std::size_t i =
                (static_cast<std::size_t>(z) * H + y) * W + x;
            s.labels.data[i] = static_cast<std::uint16_t>(cls);
            s.volume.data[i] = val;
          }
        }
      }
    }
  }
  for (float& v : s.volume.data) {
    v += static_cast<float>(spec.noise_sigma * noise.next());
  }
  return s;
}

// Number of lattice points inside a radius-r sphere (test oracle helper).
inline std::uint64_t sphere_voxel_count(int r) {
  std::uint64_t n = 0;
  for (int z = -r; z <= r; ++z) {
    for (int y = -r; y <= r; ++y) {
      for (int x = -r; x <= r; ++x) {
        if (z * z + y * y + x * x <= r * r) ++n;
      }
    }
  }
  return n;
}

// ---------------------------------------------------------------------------
// Toy training loop
// ---------------------------------------------------------------------------

struct TraceRow {
  std::int64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double dice = 0.0;
  double iou = 0.0;
};

struct TrainResult {
  WeightStore weights;
  std::vector<TraceRow> trace;
};

namespace detail {

inline std::pair<DenseTensor<float>, LabelVolume> make_batch(
    const SynthSpec& spec, std::uint64_t first_index, int batch) {
  std::vector<SynthSample> samples;
  for (int b = 0; b < batch; ++b) {
    samples.push_back(synth_sample(spec, first_index + b));
  }
  const std::size_t D = spec.extents[0], H = spec.extents[1], W = spec.extents[2];
  DenseTensor<float> vol({static_cast<std::size_t>(batch), 1, D, H, W});
  LabelVolume lab;
  lab.extents = {static_cast<std::size_t>(batch), D, H, W};
  lab.data.assign(batch * D * H * W, 0);
  for (int b = 0; b < batch; ++b) {
    std::copy(samples[b].volume.data.begin(), samples[b].volume.data.end(),
              vol.data.begin() + b * D * H * W);
    std::copy(samples[b].labels.data.begin(), samples[b].labels.data.end(),
              lab.data.begin() + b * D * H * W);
  }
  return {std::move(vol), std::move(lab)};
}

}  // namespace detail

// Deterministic toy run: synthetic batches stream by index, evaluation uses
// a disjoint index range. Non-finite loss aborts with the offending step.
inline TrainResult train_toy(const ModelConfig& config, const SynthSpec& spec,
                             std::int64_t steps, std::uint64_t seed,
                             OptimConfig optim = {}, LossConfig loss_cfg = {},
                             int batch_size = 2, int eval_interval = 10) {
  config.validate();
  spec.validate();
  loss_cfg.validate();
  if (steps < 0 || batch_size < 1 || eval_interval < 1) {
    throw std::invalid_argument("train_toy: invalid steps/batch/interval");
  }
  if (config.num_classes != spec.num_classes) {
    throw std::invalid_argument("train_toy: config and synth class counts differ");
  }

  Model<float> model = build_model<float>(config);
  optim.max_epochs = std::max<std::int64_t>(steps, 1);
  OptimState state(optim);

  const std::uint64_t eval_base = 1ULL << 32;
  auto eval_batch = detail::make_batch(spec, eval_base, batch_size);
  const DenseTensor<float>& eval_vol = eval_batch.first;
  const LabelVolume& eval_lab = eval_batch.second;

  auto evaluate = [&](std::int64_t step, double lr) {
    Tape<float> tape;
    Session<float> s(tape, RunMode::eval);
    Var logits = model_forward_on(s, model, tape.leaf(eval_vol));
    Var loss = combined_loss_op(tape, logits, eval_lab, loss_cfg);
    const auto metrics = eval_metrics(argmax_labels(tape.value(logits)), eval_lab,
                                      config.num_classes);
    TraceRow row;
    row.step = step;
    row.lr = lr;
    row.loss = static_cast<double>(tape.value(loss).data[0]);
    row.dice = foreground_mean_dice(metrics);
    row.iou = foreground_mean_iou(metrics);
    return row;
  };

  TrainResult result;
  result.trace.push_back(evaluate(0, state.lr_at(0)));

  for (std::int64_t t = 0; t < steps; ++t) {
    auto [vol, lab] = detail::make_batch(
        spec, static_cast<std::uint64_t>(t) * batch_size, batch_size);
    Tape<float> tape;
    SplitMix64 step_seed(seed ^ (0xd1b54a32d192ed03ULL * (t + 1)));
    Session<float> s(tape, RunMode::train, /*grads=*/true, step_seed.next());
    Var logits = model_forward_on(s, model, tape.leaf(std::move(vol)));
    Var loss = combined_loss_op(tape, logits, lab, loss_cfg);
    const double loss_value = static_cast<double>(tape.value(loss).data[0]);
    if (!std::isfinite(loss_value)) {
      throw std::runtime_error("train_toy: non-finite loss at step " +
                               std::to_string(t));
    }
    tape.backward(loss);

    GradMap grads;
    model.visit([&](const std::string& path, Param<float>& p, ParamInit) {
      if (!p.trainable) return;
      auto it = s.bound.find(&p);
      if (it == s.bound.end()) {
        throw std::runtime_error("train_toy: parameter '" + path +
                                 "' unused in forward pass");
      }
      grads.emplace_back(path, tape.grad(it->second));
    });
    commit_stat_updates(model, s);
    sgd_poly_step(state, grads, model);
    state.epoch += 1;

    const std::int64_t done = t + 1;
    if (done % eval_interval == 0 || done == steps) {
      result.trace.push_back(evaluate(done, state.lr_at(t)));
    }
  }

  result.weights = store_from_model(model);
  return result;
}

}  // namespace dnet::train
