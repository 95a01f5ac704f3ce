#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dnet/model.hpp"

// Finite-difference verification of model parameter gradients on the
// 64-bit evaluation path: central differences with step h, relative error
// |analytic - fd| / max(|analytic|, |fd|, floor) per sampled element.
//
// Central differences are meaningless across non-differentiable points, so
// every evaluation records the forward pass's discrete branch decisions
// (leaky-ReLU input signs and channel-max argmax indices, via
// Session::decision_trace). If the two probes of an element land on
// different branch patterns, the loss is not differentiable on that probe
// segment and the element is counted as skipped instead of compared. A
// wrong analytic gradient still fails: it cannot flip branches.

namespace dnet {

struct GradCheckGroup {
  std::string group;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  double max_rel_err = 0.0;
  bool pass = true;
};

struct GradCheckReport {
  std::vector<GradCheckGroup> groups;
  bool pass = true;
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
};

namespace detail_gc {

inline double rel_err(double a, double b, double floor = 1e-3) {
  const double denom = std::max({std::abs(a), std::abs(b), floor});
  return std::abs(a - b) / denom;
}

inline std::string group_of(const std::string& path) {
  const std::size_t dot = path.find('.');
  return dot == std::string::npos ? path : path.substr(0, dot);
}

}  // namespace detail_gc

// make_loss runs a forward pass over `weights` (anything exposing
// visit(f) over Param<double>) and returns a scalar loss Var; it must be
// deterministic for a fixed session seed. samples_per_param caps the number
// of elements checked per tensor (0 = all).
template <typename Weights, typename MakeLoss>
GradCheckReport gradcheck_params(Weights& model, MakeLoss&& make_loss,
                                 double h = 1e-3, double tol = 1e-3,
                                 std::size_t samples_per_param = 8,
                                 std::uint64_t seed = 0) {
  // Analytic gradients from one taped pass.
  std::map<std::string, DenseTensor<double>> analytic;
  {
    Tape<double> tape;
    Session<double> s(tape, RunMode::train, /*grads=*/true, seed);
    Var loss = make_loss(s, model);
    tape.backward(loss);
    model.visit([&](const std::string& path, Param<double>& p, ParamInit) {
      if (!p.trainable) return;
      auto it = s.bound.find(&p);
      if (it != s.bound.end()) analytic[path] = tape.grad(it->second);
    });
  }

  auto eval_loss = [&](std::vector<std::int32_t>* decisions) {
    Tape<double> tape;
    Session<double> s(tape, RunMode::train, /*grads=*/false, seed);
    s.decision_trace = decisions;
    Var loss = make_loss(s, model);
    return static_cast<double>(tape.value(loss).data[0]);
  };

  // Branch decisions of the unperturbed forward; the analytic gradient is
  // only valid on this pattern.
  std::vector<std::int32_t> trace_center;
  eval_loss(&trace_center);

  std::map<std::string, GradCheckGroup> groups;
  SplitMix64 pick(seed ^ 0xfd1e5ffULL);
  std::vector<std::int32_t> trace_plus, trace_minus;
  model.visit([&](const std::string& path, Param<double>& p, ParamInit) {
    if (!p.trainable) return;
    auto it = analytic.find(path);
    if (it == analytic.end()) return;
    const DenseTensor<double>& g = it->second;
    std::vector<std::size_t> indices;
    if (samples_per_param == 0 || p.value.size() <= samples_per_param) {
      for (std::size_t i = 0; i < p.value.size(); ++i) indices.push_back(i);
    } else {
      for (std::size_t k = 0; k < samples_per_param; ++k) {
        indices.push_back(static_cast<std::size_t>(
            pick.uniform_int(0, static_cast<std::int64_t>(p.value.size()) - 1)));
      }
    }
    GradCheckGroup& grp = groups[detail_gc::group_of(path)];
    grp.group = detail_gc::group_of(path);
    for (std::size_t i : indices) {
      const double orig = p.value.data[i];
      trace_plus.clear();
      trace_minus.clear();
      p.value.data[i] = orig + h;
      const double lp = eval_loss(&trace_plus);
      p.value.data[i] = orig - h;
      const double lm = eval_loss(&trace_minus);
      p.value.data[i] = orig;
      if (trace_plus != trace_center || trace_minus != trace_center) {
        grp.skipped += 1;  // probe segment crosses a branch point
        continue;
      }
      const double fd = (lp - lm) / (2.0 * h);
      const double err = detail_gc::rel_err(g.data[i], fd);
      grp.max_rel_err = std::max(grp.max_rel_err, err);
      grp.checked += 1;
      if (err >= tol) grp.pass = false;
    }
  });

  GradCheckReport report;
  for (auto& [name, grp] : groups) {
    report.pass = report.pass && grp.pass;
    report.max_rel_err = std::max(report.max_rel_err, grp.max_rel_err);
    report.checked += grp.checked;
    report.skipped += grp.skipped;
    report.groups.push_back(grp);
  }
  return report;
}

}  // namespace dnet
