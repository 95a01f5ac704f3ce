#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "dnet/ops.hpp"
#include "dnet/tensor.hpp"

// Reverse-mode differentiation. A Tape records one forward pass; Vars are
// handles into it. Backward replays the recorded nodes in exact reverse
// execution order and accumulates gradients by summation across fan-out.

namespace dnet {

struct Var {
  std::uint32_t id = UINT32_MAX;
  bool valid() const { return id != UINT32_MAX; }
};

template <typename T>
class Tape {
 public:
  Var leaf(DenseTensor<T> value, bool requires_grad = false) {
    return push(std::move(value), requires_grad);
  }

  const DenseTensor<T>& value(Var v) const {
    check(v);
    return slots_[v.id].value;
  }

  bool requires_grad(Var v) const {
    check(v);
    return slots_[v.id].requires_grad;
  }

  std::size_t num_values() const { return slots_.size(); }
  std::size_t num_nodes() const { return nodes_.size(); }

  // Record an externally computed op. The closure receives the tape and the
  // output Var and must accumulate() into the parents.
  Var record(DenseTensor<T> value, const std::vector<Var>& parents,
             std::function<void(Tape&, Var)> backward) {
    bool need = false;
    for (Var p : parents) need = need || requires_grad(p);
    Var out = push(std::move(value), need);
    if (need) nodes_.push_back(Node{out, std::move(backward)});
    return out;
  }

  void accumulate(Var v, DenseTensor<T>&& g) {
    check(v);
    if (!slots_[v.id].requires_grad) return;
    if (g.extents != slots_[v.id].value.extents) {
      throw std::logic_error("gradient extents mismatch during backward");
    }
    if (!has_grad_[v.id]) {
      grads_[v.id] = std::move(g);
      has_grad_[v.id] = true;
    } else {
      DenseTensor<T>& acc = grads_[v.id];
      for (std::size_t i = 0; i < acc.size(); ++i) acc.data[i] += g.data[i];
    }
  }

  void backward(Var loss) {
    check(loss);
    if (value(loss).size() != 1) {
      throw std::invalid_argument("backward: loss must be a scalar, got extents " +
                                  extents_to_string(value(loss).extents));
    }
    if (!slots_[loss.id].requires_grad) {
      throw std::invalid_argument(
          "backward: loss does not depend on any differentiable value");
    }
    grads_.assign(slots_.size(), DenseTensor<T>());
    has_grad_.assign(slots_.size(), false);
    grads_[loss.id] = DenseTensor<T>::filled(value(loss).extents, T(1));
    has_grad_[loss.id] = true;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (has_grad_[it->out.id]) it->fn(*this, it->out);
    }
    ran_backward_ = true;
  }

  // Gradient of a recorded differentiable value; zeros if no gradient flowed.
  DenseTensor<T> grad(Var v) const {
    check(v);
    if (!ran_backward_) throw std::logic_error("grad() called before backward()");
    if (!slots_[v.id].requires_grad) {
      throw std::invalid_argument(
          "grad requested for a value not marked differentiable");
    }
    if (!has_grad_[v.id]) return DenseTensor<T>(slots_[v.id].value.extents);
    return grads_[v.id];
  }

  const DenseTensor<T>& grad_ref(Var v) const {
    check(v);
    return grads_[v.id];
  }

  // ---- taped operations ---------------------------------------------------

  Var conv3d(Var input, Var weight, std::optional<Var> bias, const ConvSpec& spec) {
    const DenseTensor<T>* b = bias ? &value(*bias) : nullptr;
    DenseTensor<T> out = ops::conv3d(value(input), value(weight), b, spec);
    std::vector<Var> parents{input, weight};
    if (bias) parents.push_back(*bias);
    return record(std::move(out), parents, [input, weight, bias, spec](Tape& t, Var o) {
      auto g = ops::conv3d_backward(t.value(input), t.value(weight), spec,
                                    t.grad_ref(o));
      t.accumulate(input, std::move(g.wrt_input));
      t.accumulate(weight, std::move(g.wrt_weights));
      if (bias) t.accumulate(*bias, std::move(g.wrt_bias));
    });
  }

  Var transposed_conv3d(Var input, Var weight, std::optional<Var> bias,
                        const ConvSpec& spec) {
    const DenseTensor<T>* b = bias ? &value(*bias) : nullptr;
    DenseTensor<T> out = ops::transposed_conv3d(value(input), value(weight), b, spec);
    std::vector<Var> parents{input, weight};
    if (bias) parents.push_back(*bias);
    return record(std::move(out), parents, [input, weight, bias, spec](Tape& t, Var o) {
      auto g = ops::transposed_conv3d_backward(t.value(input), t.value(weight),
                                               spec, t.grad_ref(o));
      t.accumulate(input, std::move(g.wrt_input));
      t.accumulate(weight, std::move(g.wrt_weights));
      if (bias) t.accumulate(*bias, std::move(g.wrt_bias));
    });
  }

  Var channel_stats_pool(Var input, ops::ChannelStat kind) {
    DenseTensor<T> out = ops::channel_stats_pool(value(input), kind);
    return record(std::move(out), {input}, [input, kind](Tape& t, Var o) {
      t.accumulate(input, ops::channel_stats_pool_backward(t.value(input), kind,
                                                           t.grad_ref(o)));
    });
  }

  Var global_avg_pool(Var input) {
    DenseTensor<T> out = ops::global_avg_pool(value(input));
    return record(std::move(out), {input}, [input](Tape& t, Var o) {
      t.accumulate(input, ops::global_avg_pool_backward(t.value(input).extents,
                                                        t.grad_ref(o)));
    });
  }

  Var activation(Var input, ops::Activation kind, double alpha = 0.01) {
    DenseTensor<T> out = ops::activation(value(input), kind, alpha);
    return record(std::move(out), {input}, [input, kind, alpha](Tape& t, Var o) {
      t.accumulate(input, ops::activation_backward(t.value(input), kind, alpha,
                                                   t.grad_ref(o)));
    });
  }

  Var layer_norm(Var input, Var scale, Var shift, double eps) {
    DenseTensor<T> out = ops::layer_norm(value(input), value(scale), value(shift), eps);
    return record(std::move(out), {input, scale, shift}, [input, scale, shift, eps](Tape& t, Var o) {
      auto g = ops::layer_norm_backward(t.value(input), t.value(scale), eps,
                                        t.grad_ref(o));
      t.accumulate(input, std::move(g.wrt_input));
      t.accumulate(scale, std::move(g.wrt_scale));
      t.accumulate(shift, std::move(g.wrt_shift));
    });
  }

  // Running statistics are non-differentiable state: callers pass them by
  // value and receive the updated estimates out-of-band.
  Var batch_norm(Var input, Var scale, Var shift, const DenseTensor<T>& running_mean,
                 const DenseTensor<T>& running_var, bool train, double momentum,
                 double eps, DenseTensor<T>* updated_mean = nullptr,
                 DenseTensor<T>* updated_var = nullptr) {
    auto r = ops::batch_norm(value(input), value(scale), value(shift), running_mean,
                             running_var, train, momentum, eps);
    if (updated_mean) *updated_mean = std::move(r.new_running_mean);
    if (updated_var) *updated_var = std::move(r.new_running_var);
    auto mean = std::move(r.used_mean);
    auto invstd = std::move(r.used_invstd);
    return record(std::move(r.output), {input, scale, shift},
                  [input, scale, shift, mean, invstd, train](Tape& t, Var o) {
                    auto g = ops::batch_norm_backward(t.value(input), t.value(scale),
                                                      mean, invstd, train,
                                                      t.grad_ref(o));
                    t.accumulate(input, std::move(g.wrt_input));
                    t.accumulate(scale, std::move(g.wrt_scale));
                    t.accumulate(shift, std::move(g.wrt_shift));
                  });
  }

  Var concat_channels(Var a, Var b) {
    DenseTensor<T> out = ops::concat_channels(value(a), value(b));
    return record(std::move(out), {a, b}, [a, b](Tape& t, Var o) {
      const std::size_t ca = t.value(a).c();
      const std::size_t cb = t.value(b).c();
      t.accumulate(a, ops::slice_channels(t.grad_ref(o), 0, ca));
      t.accumulate(b, ops::slice_channels(t.grad_ref(o), ca, cb));
    });
  }

  Var slice_channels(Var x, std::size_t begin, std::size_t count) {
    DenseTensor<T> out = ops::slice_channels(value(x), begin, count);
    return record(std::move(out), {x}, [x, begin, count](Tape& t, Var o) {
      DenseTensor<T> g(t.value(x).extents);
      const DenseTensor<T>& go = t.grad_ref(o);
      const std::size_t vol = g.spatial_volume();
      for (std::size_t n = 0; n < g.n(); ++n) {
        std::copy(go.data.begin() + n * count * vol,
                  go.data.begin() + (n + 1) * count * vol,
                  g.data.begin() + (n * g.c() + begin) * vol);
      }
      t.accumulate(x, std::move(g));
    });
  }

  Var add(Var a, Var b) { return ew(a, b, ops::EwKind::add); }
  Var mul(Var a, Var b) { return ew(a, b, ops::EwKind::mul); }

  Var dropout(Var input, double rate, bool train, std::uint64_t seed) {
    DenseTensor<T> out = ops::dropout(value(input), rate, train, seed);
    return record(std::move(out), {input}, [input, rate, train, seed](Tape& t, Var o) {
      t.accumulate(input, ops::dropout_backward(t.value(input).extents, rate, train,
                                                seed, t.grad_ref(o)));
    });
  }

  Var sum(Var input) {
    DenseTensor<T> out({1});
    out.data[0] = ops::sum(value(input));
    return record(std::move(out), {input}, [input](Tape& t, Var o) {
      const T g = t.grad_ref(o).data[0];
      t.accumulate(input, DenseTensor<T>::filled(t.value(input).extents, g));
    });
  }

  // wa * a + wb * b for scalar values.
  Var weighted_sum(Var a, Var b, T wa, T wb) {
    if (value(a).size() != 1 || value(b).size() != 1) {
      throw std::invalid_argument("weighted_sum expects scalar values");
    }
    DenseTensor<T> out({1});
    out.data[0] = static_cast<T>(wa * value(a).data[0] + wb * value(b).data[0]);
    return record(std::move(out), {a, b}, [a, b, wa, wb](Tape& t, Var o) {
      const T g = t.grad_ref(o).data[0];
      t.accumulate(a, DenseTensor<T>::filled({1}, static_cast<T>(g * wa)));
      t.accumulate(b, DenseTensor<T>::filled({1}, static_cast<T>(g * wb)));
    });
  }

 private:
  struct Slot {
    DenseTensor<T> value;
    bool requires_grad = false;
  };
  struct Node {
    Var out;
    std::function<void(Tape&, Var)> fn;
  };

  void check(Var v) const {
    if (!v.valid() || v.id >= slots_.size()) {
      throw std::invalid_argument("value is not on the tape");
    }
  }

  Var push(DenseTensor<T> value, bool requires_grad) {
    slots_.push_back(Slot{std::move(value), requires_grad});
    return Var{static_cast<std::uint32_t>(slots_.size() - 1)};
  }

  Var ew(Var a, Var b, ops::EwKind kind) {
    DenseTensor<T> out = ops::elementwise(value(a), value(b), kind);
    return record(std::move(out), {a, b}, [a, b, kind](Tape& t, Var o) {
      const DenseTensor<T>& go = t.grad_ref(o);
      const DenseTensor<T>& av = t.value(a);
      const DenseTensor<T>& bv = t.value(b);
      if (kind == ops::EwKind::add) {
        t.accumulate(a, DenseTensor<T>(go));
        t.accumulate(b, ops::reduce_to_extents(go, bv.extents));
      } else {
        if (t.requires_grad(a)) {
          t.accumulate(a, ops::elementwise(go, bv, ops::EwKind::mul));
        }
        if (t.requires_grad(b)) {
          auto ga = ops::elementwise(go, av, ops::EwKind::mul);
          t.accumulate(b, ops::reduce_to_extents(ga, bv.extents));
        }
      }
    });
  }

  std::vector<Slot> slots_;
  std::vector<Node> nodes_;
  std::vector<DenseTensor<T>> grads_;
  std::vector<bool> has_grad_;
  bool ran_backward_ = false;
};

}  // namespace dnet
