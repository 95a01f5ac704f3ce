#include <catch2/catch_amalgamated.hpp>

#include "dnet/autograd.hpp"
#include "support.hpp"

using namespace dnet;
using testsup::fd_check;
using testsup::random_tensor;

TEST_CASE("backward basics") {
  // loss = sum(x): gradient is all ones
  Tape<double> tape;
  SplitMix64 rng(1);
  Var x = tape.leaf(random_tensor<double>({1, 2, 2, 2, 2}, rng), true);
  Var loss = tape.sum(x);
  tape.backward(loss);
  for (double g : tape.grad(x).data) CHECK(g == 1.0);

  // loss = sum(sigmoid(x)) at x = 0: gradient is 0.25 per element
  Tape<double> tape2;
  Var z = tape2.leaf(DenseTensor<double>({1, 1, 1, 1, 4}), true);
  Var loss2 = tape2.sum(tape2.activation(z, ops::Activation::sigmoid));
  tape2.backward(loss2);
  for (double g : tape2.grad(z).data) CHECK(g == Catch::Approx(0.25));
}

TEST_CASE("gradient accumulates across fan-out") {
  Tape<double> tape;
  Var x = tape.leaf(DenseTensor<double>::filled({1, 1, 1, 1, 2}, 3.0), true);
  Var y = tape.add(x, x);
  Var loss = tape.sum(y);
  tape.backward(loss);
  for (double g : tape.grad(x).data) CHECK(g == 2.0);
}

TEST_CASE("grad of a value not on the tape is an error") {
  Tape<double> tape;
  Var x = tape.leaf(DenseTensor<double>({1}), true);
  Var loss = tape.sum(x);
  tape.backward(loss);
  CHECK_THROWS_AS(tape.grad(Var{999}), std::invalid_argument);
  Var plain = tape.leaf(DenseTensor<double>({1}), false);
  CHECK_THROWS_AS(tape.grad(plain), std::invalid_argument);

  Tape<double> tape3;
  Var big = tape3.leaf(DenseTensor<double>({2, 2}), true);
  CHECK_THROWS_AS(tape3.backward(big), std::invalid_argument);  // not scalar
}

TEST_CASE("finite differences: convolutions") {
  SplitMix64 rng(42);
  ConvSpec s = make_conv_spec(4, 6, 3, 2, 1, 2);
  auto input = random_tensor<double>({2, 4, 5, 4, 5}, rng);
  auto weights = random_tensor<double>(s.weight_extents(), rng);
  auto bias = random_tensor<double>({6}, rng);
  auto r = fd_check(
      [&](Tape<double>& t, const std::vector<Var>& v) {
        return t.conv3d(v[0], v[1], v[2], s);
      },
      {input, weights, bias});
  CHECK(r.max_rel_err < 1e-3);

  // dilated depthwise
  ConvSpec dw = make_conv_spec(3, 3, 3, 1, 2, 3);
  auto din = random_tensor<double>({1, 3, 5, 5, 5}, rng);
  auto dw_w = random_tensor<double>(dw.weight_extents(), rng);
  auto dw_b = random_tensor<double>({3}, rng);
  auto r2 = fd_check(
      [&](Tape<double>& t, const std::vector<Var>& v) {
        return t.conv3d(v[0], v[1], v[2], dw);
      },
      {din, dw_w, dw_b});
  CHECK(r2.max_rel_err < 1e-3);

  ConvSpec up;
  up.kernel = {2, 2, 2};
  up.stride = {2, 2, 2};
  up.in_channels = 4;
  up.out_channels = 2;
  auto uin = random_tensor<double>({1, 4, 2, 3, 2}, rng);
  auto uw = random_tensor<double>(up.transposed_weight_extents(), rng);
  auto ub = random_tensor<double>({2}, rng);
  auto r3 = fd_check(
      [&](Tape<double>& t, const std::vector<Var>& v) {
        return t.transposed_conv3d(v[0], v[1], v[2], up);
      },
      {uin, uw, ub});
  CHECK(r3.max_rel_err < 1e-3);
}

TEST_CASE("finite differences: pools") {
  SplitMix64 rng(43);
  auto x = random_tensor<double>({1, 4, 3, 3, 3}, rng);
  // separate the channel values so the max never flips under the fd step
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t v = 0; v < 27; ++v) x.data[c * 27 + v] += 0.5 * (double)c;

  for (auto kind : {ops::ChannelStat::mean, ops::ChannelStat::max}) {
    auto r = fd_check(
        [&](Tape<double>& t, const std::vector<Var>& v) {
          return t.channel_stats_pool(v[0], kind);
        },
        {x});
    CHECK(r.max_rel_err < 1e-3);
  }
  auto r = fd_check(
      [&](Tape<double>& t, const std::vector<Var>& v) {
        return t.global_avg_pool(v[0]);
      },
      {x});
  CHECK(r.max_rel_err < 1e-3);
}

TEST_CASE("finite differences: activations") {
  SplitMix64 rng(44);
  auto x = random_tensor<double>({1, 2, 3, 3, 3}, rng, -2.0, 2.0);
  // keep leaky-relu inputs away from the kink at zero
  for (double& v : x.data) {
    if (std::abs(v) < 0.05) v = v < 0 ? v - 0.1 : v + 0.1;
  }
  for (auto kind : {ops::Activation::sigmoid, ops::Activation::gelu,
                    ops::Activation::leaky_relu}) {
    auto r = fd_check(
        [&](Tape<double>& t, const std::vector<Var>& v) {
          return t.activation(v[0], kind, 0.01);
        },
        {x});
    CHECK(r.max_rel_err < 1e-3);
  }
}

TEST_CASE("finite differences: normalizations") {
  SplitMix64 rng(45);
  auto x = random_tensor<double>({2, 3, 2, 2, 2}, rng);
  auto scale = random_tensor<double>({3}, rng, 0.5, 1.5);
  auto shift = random_tensor<double>({3}, rng);

  auto r = fd_check(
      [&](Tape<double>& t, const std::vector<Var>& v) {
        return t.layer_norm(v[0], v[1], v[2], 1e-6);
      },
      {x, scale, shift});
  CHECK(r.max_rel_err < 1e-3);

  DenseTensor<double> rm({3});
  DenseTensor<double> rv = DenseTensor<double>::filled({3}, 1.0);
  for (bool train : {true, false}) {
    auto rb = fd_check(
        [&](Tape<double>& t, const std::vector<Var>& v) {
          return t.batch_norm(v[0], v[1], v[2], rm, rv, train, 0.1, 1e-5);
        },
        {x, scale, shift});
    CHECK(rb.max_rel_err < 1e-3);
  }
}

TEST_CASE("finite differences: concat, slice, elementwise, dropout") {
  SplitMix64 rng(46);
  auto a = random_tensor<double>({1, 2, 2, 2, 2}, rng);
  auto b = random_tensor<double>({1, 3, 2, 2, 2}, rng);
  auto r = fd_check(
      [&](Tape<double>& t, const std::vector<Var>& v) {
        return t.concat_channels(v[0], v[1]);
      },
      {a, b});
  CHECK(r.max_rel_err < 1e-3);

  auto r2 = fd_check(
      [&](Tape<double>& t, const std::vector<Var>& v) {
        return t.slice_channels(v[0], 1, 2);
      },
      {b});
  CHECK(r2.max_rel_err < 1e-3);

  auto x = random_tensor<double>({1, 3, 2, 2, 2}, rng);
  auto chan = random_tensor<double>({1, 3, 1, 1, 1}, rng);
  auto sp = random_tensor<double>({1, 1, 2, 2, 2}, rng);
  for (auto make : {+[](Tape<double>& t, Var p, Var q) { return t.add(p, q); },
                    +[](Tape<double>& t, Var p, Var q) { return t.mul(p, q); }}) {
    for (const auto& other : {x, chan, sp}) {
      auto rr = fd_check(
          [&](Tape<double>& t, const std::vector<Var>& v) {
            return make(t, v[0], v[1]);
          },
          {x, other});
      CHECK(rr.max_rel_err < 1e-3);
    }
  }

  auto r3 = fd_check(
      [&](Tape<double>& t, const std::vector<Var>& v) {
        return t.dropout(v[0], 0.3, true, 99);
      },
      {x});
  CHECK(r3.max_rel_err < 1e-3);
}

TEST_CASE("taped ops are deterministic") {
  SplitMix64 rng(47);
  auto x = random_tensor<double>({1, 4, 3, 3, 3}, rng);
  ConvSpec s = make_conv_spec(4, 4, 3);
  auto w = random_tensor<double>(s.weight_extents(), rng);
  auto b = random_tensor<double>({4}, rng);
  auto run = [&]() {
    Tape<double> t;
    Var out = t.conv3d(t.leaf(x, true), t.leaf(w, true), t.leaf(b, true), s);
    Var loss = t.sum(t.activation(out, ops::Activation::gelu));
    t.backward(loss);
    return t.value(loss).data[0];
  };
  CHECK(run() == run());
}
