#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "dnet/autograd.hpp"
#include "dnet/ops.hpp"
#include "dnet/tensor.hpp"

// Test-side oracles, independent of the implementation paths they check.

namespace testsup {

using dnet::ConvSpec;
using dnet::DenseTensor;
using dnet::Extents;
using dnet::SplitMix64;
using dnet::Tape;
using dnet::Var;

// Brute-force direct-loop convolution: the semantic definition, written as
// the plainest possible loop nest.
template <typename T>
DenseTensor<T> reference_conv3d(const DenseTensor<T>& in, const DenseTensor<T>& w,
                                const DenseTensor<T>* bias, const ConvSpec& s) {
  const auto os = s.out_spatial({in.d(), in.h(), in.w()});
  DenseTensor<T> out({in.n(), (std::size_t)s.out_channels, os[0], os[1], os[2]});
  const std::size_t icg = s.in_channels / s.groups;
  const std::size_t ocg = s.out_channels / s.groups;
  for (std::size_t n = 0; n < in.n(); ++n)
    for (std::size_t oc = 0; oc < (std::size_t)s.out_channels; ++oc)
      for (std::size_t oz = 0; oz < os[0]; ++oz)
        for (std::size_t oy = 0; oy < os[1]; ++oy)
          for (std::size_t ox = 0; ox < os[2]; ++ox) {
            double acc = s.has_bias ? (double)bias->data[oc] : 0.0;
            const std::size_t g = oc / ocg;
            for (std::size_t il = 0; il < icg; ++il)
              for (int kz = 0; kz < s.kernel[0]; ++kz)
                for (int ky = 0; ky < s.kernel[1]; ++ky)
                  for (int kx = 0; kx < s.kernel[2]; ++kx) {
                    const long long iz =
                        (long long)oz * s.stride[0] - s.padding[0] + (long long)kz * s.dilation[0];
                    const long long iy =
                        (long long)oy * s.stride[1] - s.padding[1] + (long long)ky * s.dilation[1];
                    const long long ix =
                        (long long)ox * s.stride[2] - s.padding[2] + (long long)kx * s.dilation[2];
                    if (iz < 0 || iz >= (long long)in.d() || iy < 0 ||
                        iy >= (long long)in.h() || ix < 0 || ix >= (long long)in.w())
                      continue;
                    const std::size_t ic = g * icg + il;
                    acc += (double)in.at5(n, ic, iz, iy, ix) *
                           (double)w.data[(((oc * icg + il) * s.kernel[0] + kz) *
                                               s.kernel[1] +
                                           ky) *
                                              s.kernel[2] +
                                          kx];
                  }
            out.at5(n, oc, oz, oy, ox) = (T)acc;
          }
  return out;
}

// Scatter-formulation transposed convolution oracle.
template <typename T>
DenseTensor<T> reference_transposed_conv3d(const DenseTensor<T>& in,
                                           const DenseTensor<T>& w,
                                           const DenseTensor<T>* bias,
                                           const ConvSpec& s) {
  const auto os = s.transposed_out_spatial({in.d(), in.h(), in.w()});
  DenseTensor<T> out({in.n(), (std::size_t)s.out_channels, os[0], os[1], os[2]});
  std::vector<double> acc(out.size(), 0.0);
  const std::size_t icg = s.in_channels / s.groups;
  const std::size_t ocg = s.out_channels / s.groups;
  for (std::size_t n = 0; n < in.n(); ++n)
    for (std::size_t ic = 0; ic < (std::size_t)s.in_channels; ++ic)
      for (std::size_t iz = 0; iz < in.d(); ++iz)
        for (std::size_t iy = 0; iy < in.h(); ++iy)
          for (std::size_t ix = 0; ix < in.w(); ++ix) {
            const std::size_t g = ic / icg;
            for (std::size_t ol = 0; ol < ocg; ++ol) {
              const std::size_t oc = g * ocg + ol;
              for (int kz = 0; kz < s.kernel[0]; ++kz)
                for (int ky = 0; ky < s.kernel[1]; ++ky)
                  for (int kx = 0; kx < s.kernel[2]; ++kx) {
                    const long long oz =
                        (long long)iz * s.stride[0] - s.padding[0] + (long long)kz * s.dilation[0];
                    const long long oy =
                        (long long)iy * s.stride[1] - s.padding[1] + (long long)ky * s.dilation[1];
                    const long long ox =
                        (long long)ix * s.stride[2] - s.padding[2] + (long long)kx * s.dilation[2];
                    if (oz < 0 || oz >= (long long)os[0] || oy < 0 ||
                        oy >= (long long)os[1] || ox < 0 || ox >= (long long)os[2])
                      continue;
                    acc[out.idx5(n, oc, oz, oy, ox)] +=
                        (double)in.at5(n, ic, iz, iy, ix) *
                        (double)w.data[(((ic * ocg + ol) * s.kernel[0] + kz) *
                                            s.kernel[1] +
                                        ky) *
                                           s.kernel[2] +
                                       kx];
                  }
            }
          }
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t oc = (i / (os[0] * os[1] * os[2])) % s.out_channels;
    out.data[i] = (T)(acc[i] + (s.has_bias ? (double)bias->data[oc] : 0.0));
  }
  return out;
}

template <typename T>
double max_abs_diff(const DenseTensor<T>& a, const DenseTensor<T>& b) {
  if (a.extents != b.extents) return 1e30;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs((double)a.data[i] - (double)b.data[i]));
  }
  return m;
}

template <typename T>
DenseTensor<T> random_tensor(const Extents& e, SplitMix64& rng, double lo = -1.0,
                             double hi = 1.0) {
  DenseTensor<T> t(e);
  for (T& v : t.data) v = (T)rng.uniform(lo, hi);
  return t;
}

// ---------------------------------------------------------------------------
// Finite-difference check for taped ops (64-bit path, central differences).
// The loss is a random fixed projection of the op output, which catches
// sign/permutation errors that a plain sum can cancel out.
// ---------------------------------------------------------------------------

struct FdResult {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
};

inline double fd_rel_err(double a, double b) {
  const double denom = std::max({std::abs(a), std::abs(b), 1e-3});
  return std::abs(a - b) / denom;
}

// build: (tape, input vars) -> output var (any shape; projected internally)
inline FdResult fd_check(
    const std::function<Var(Tape<double>&, const std::vector<Var>&)>& build,
    std::vector<DenseTensor<double>> inputs, std::uint64_t seed = 7,
    double h = 1e-3) {
  // Fixed projection tensor, shaped after one dry run.
  DenseTensor<double> projection;
  {
    Tape<double> tape;
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.leaf(t, false));
    Var out = build(tape, vars);
    SplitMix64 rng(seed ^ 0x9e37ULL);
    projection = random_tensor<double>(tape.value(out).extents, rng);
  }

  auto loss_of = [&](const std::vector<DenseTensor<double>>& ins, bool grads,
                     std::vector<DenseTensor<double>>* out_grads) {
    Tape<double> tape;
    std::vector<Var> vars;
    for (const auto& t : ins) vars.push_back(tape.leaf(t, grads));
    Var out = build(tape, vars);
    Var loss = tape.sum(tape.mul(out, tape.leaf(projection, false)));
    const double value = tape.value(loss).data[0];
    if (grads) {
      tape.backward(loss);
      out_grads->clear();
      for (Var v : vars) out_grads->push_back(tape.grad(v));
    }
    return value;
  };

  std::vector<DenseTensor<double>> analytic;
  loss_of(inputs, true, &analytic);

  FdResult r;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    for (std::size_t i = 0; i < inputs[t].size(); ++i) {
      const double orig = inputs[t].data[i];
      inputs[t].data[i] = orig + h;
      const double lp = loss_of(inputs, false, nullptr);
      inputs[t].data[i] = orig - h;
      const double lm = loss_of(inputs, false, nullptr);
      inputs[t].data[i] = orig;
      const double fd = (lp - lm) / (2.0 * h);
      r.max_rel_err = std::max(r.max_rel_err, fd_rel_err(analytic[t].data[i], fd));
      r.checked += 1;
    }
  }
  return r;
}

}  // namespace testsup
