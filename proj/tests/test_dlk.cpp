#include <catch2/catch_amalgamated.hpp>

#include "dnet/dlk.hpp"
#include "dnet/gradcheck.hpp"
#include "support.hpp"

using namespace dnet;
using testsup::max_abs_diff;
using testsup::random_tensor;

namespace {

template <typename T, typename W>
void zero_all(W& w) {
  w.visit("", [](const std::string&, Param<T>& p, ParamInit) {
    std::fill(p.value.data.begin(), p.value.data.end(), T(0));
  });
}

template <typename T, typename W>
void init_all(W& w, std::uint64_t seed) {
  std::mt19937_64 eng(seed);
  w.visit("", [&eng](const std::string&, Param<T>& p, ParamInit kind) {
    init_param(p, kind, eng);
  });
}

template <typename T>
DenseTensor<T> run_dlk(const DLKWeights<T>& w, const DenseTensor<T>& x,
                       CombineMode mode) {
  Tape<T> tape;
  Session<T> s(tape);
  return tape.value(dlk_forward(s, w, tape.leaf(x), mode));
}

}  // namespace

TEST_CASE("dlk gates are 0.5 when gate convs see zero input") {
  auto w = make_dlk<float>(4);
  init_all<float>(w, 3);
  // zero both gate convs: sigmoid inputs become exactly zero
  zero_all<float>(w.spatial_gate);
  zero_all<float>(w.channel_gate);

  SplitMix64 rng(5);
  auto x = random_tensor<float>({1, 4, 3, 3, 3}, rng);
  Tape<float> tape;
  Session<float> s(tape);
  Var x1 = conv_forward(s, w.project, tape.leaf(x));
  x1 = conv_forward(s, w.dw5, x1);
  Var x2 = conv_forward(s, w.dw7, x1);
  Var sp = tape.concat_channels(x1, x2);
  Var gates = conv_forward(
      s, w.spatial_gate,
      tape.concat_channels(tape.channel_stats_pool(sp, ops::ChannelStat::mean),
                           tape.channel_stats_pool(sp, ops::ChannelStat::max)));
  gates = tape.activation(gates, ops::Activation::sigmoid);
  for (float v : tape.value(gates).data) CHECK(v == 0.5f);
}

TEST_CASE("dlk preserves shape") {
  auto w = make_dlk<float>(4);
  init_all<float>(w, 7);
  SplitMix64 rng(8);
  auto x = random_tensor<float>({1, 4, 5, 6, 7}, rng);
  for (auto mode : {CombineMode::split_calibrate, CombineMode::literal_sum}) {
    auto out = run_dlk(w, x, mode);
    CHECK(out.extents == x.extents);
  }
}

TEST_CASE("dlk zero weights reduce to the residual identity") {
  auto w = make_dlk<float>(6);
  zero_all<float>(w);
  SplitMix64 rng(9);
  auto x = random_tensor<float>({2, 6, 3, 3, 3}, rng);
  for (auto mode : {CombineMode::split_calibrate, CombineMode::literal_sum}) {
    auto out = run_dlk(w, x, mode);
    CHECK(max_abs_diff(out, x) == 0.0);  // bit-exact
  }
}

TEST_CASE("dlk rejects odd channel counts") {
  CHECK_THROWS_AS(make_dlk<float>(5), std::invalid_argument);
  auto w = make_dlk<float>(4);
  SplitMix64 rng(2);
  auto x = random_tensor<float>({1, 3, 2, 2, 2}, rng);
  Tape<float> tape;
  Session<float> s(tape);
  CHECK_THROWS_AS(dlk_forward(s, w, tape.leaf(x), CombineMode::split_calibrate),
                  std::invalid_argument);
}

TEST_CASE("dlk erf values") {
  CHECK(dlk_erf() == 23);
  CHECK(analysis::compute_erf({{1, 1, 1}}) == 1);
  CHECK(analysis::compute_erf({{3, 1, 1}, {3, 1, 1}}) == 5);
  CHECK(analysis::compute_erf({{3, 1, 2}, {3, 1, 1}}) == 7);
}

TEST_CASE("dlk gate ranges lie strictly inside (0,1)") {
  SplitMix64 rng(10);
  for (int rep = 0; rep < 5; ++rep) {
    const int c = 2 * (int)rng.uniform_int(1, 4);
    auto w = make_dlk<float>(c);
    init_all<float>(w, rng.next());
    auto x = random_tensor<float>(
        {1, (std::size_t)c, (std::size_t)rng.uniform_int(2, 4),
         (std::size_t)rng.uniform_int(2, 4), (std::size_t)rng.uniform_int(2, 4)},
        rng, -2.0, 2.0);
    Tape<float> tape;
    Session<float> s(tape);
    Var x1 = conv_forward(s, w.project, tape.leaf(x));
    x1 = conv_forward(s, w.dw5, x1);
    Var x2 = conv_forward(s, w.dw7, x1);
    Var sp = tape.concat_channels(x1, x2);
    Var gates = tape.activation(
        conv_forward(s, w.spatial_gate,
                     tape.concat_channels(
                         tape.channel_stats_pool(sp, ops::ChannelStat::mean),
                         tape.channel_stats_pool(sp, ops::ChannelStat::max))),
        ops::Activation::sigmoid);
    for (float v : tape.value(gates).data) {
      CHECK(v > 0.0f);
      CHECK(v < 1.0f);
    }
  }
}

TEST_CASE("split_calibrate gating is monotone in the gate logits") {
  // Driving w1's pre-sigmoid logits to +/- large values sends the first C/2
  // channels of X_ch toward X1 and toward zero.
  const int c = 4;
  auto w = make_dlk<float>(c);
  init_all<float>(w, 21);
  zero_all<float>(w.spatial_gate);
  SplitMix64 rng(22);
  auto x = random_tensor<float>({1, c, 3, 3, 3}, rng);

  auto x_ch_first_half = [&](float gate_bias) {
    w.spatial_gate.bias.value.data[0] = gate_bias;  // channel 0 drives w1
    Tape<float> tape;
    Session<float> s(tape);
    Var x1 = conv_forward(s, w.project, tape.leaf(x));
    x1 = conv_forward(s, w.dw5, x1);
    Var x2 = conv_forward(s, w.dw7, x1);
    Var sp = tape.concat_channels(x1, x2);
    Var gates = tape.activation(
        conv_forward(s, w.spatial_gate,
                     tape.concat_channels(
                         tape.channel_stats_pool(sp, ops::ChannelStat::mean),
                         tape.channel_stats_pool(sp, ops::ChannelStat::max))),
        ops::Activation::sigmoid);
    Var w1 = tape.slice_channels(gates, 0, 1);
    Var w2 = tape.slice_channels(gates, 1, 1);
    Var x_ch = tape.concat_channels(tape.mul(x1, w1), tape.mul(x2, w2));
    return std::pair{ops::slice_channels(tape.value(x_ch), 0, c / 2),
                     tape.value(x1)};
  };

  auto [open_half, x1_open] = x_ch_first_half(30.f);
  CHECK(max_abs_diff(open_half, x1_open) < 1e-5);
  auto [closed_half, x1_closed] = x_ch_first_half(-30.f);
  for (float v : closed_half.data) CHECK(std::abs(v) < 1e-5);
}

TEST_CASE("combine modes differ in general") {
  auto w = make_dlk<float>(4);
  init_all<float>(w, 31);
  SplitMix64 rng(32);
  auto x = random_tensor<float>({1, 4, 3, 3, 3}, rng);
  auto a = run_dlk(w, x, CombineMode::split_calibrate);
  auto b = run_dlk(w, x, CombineMode::literal_sum);
  CHECK(max_abs_diff(a, b) > 1e-6);
}

TEST_CASE("dlk module zero weights give identity; mlp shapes") {
  auto mw = make_dlk_module<float>(4);
  zero_all<float>(mw);
  SplitMix64 rng(41);
  auto x = random_tensor<float>({1, 4, 3, 3, 3}, rng);
  Tape<float> tape;
  Session<float> s(tape);
  auto out = tape.value(
      dlk_module_forward(s, mw, tape.leaf(x), CombineMode::split_calibrate));
  CHECK(max_abs_diff(out, x) == 0.0);

  // shape preservation at [1, 8, 3, 3, 3]
  auto mw8 = make_dlk_module<float>(8);
  init_all<float>(mw8, 42);
  auto x8 = random_tensor<float>({1, 8, 3, 3, 3}, rng);
  Tape<float> t8;
  Session<float> s8(t8);
  CHECK(t8.value(dlk_module_forward(s8, mw8, t8.leaf(x8),
                                    CombineMode::split_calibrate))
            .extents == x8.extents);

  // mlp: r=4 at C=4 gives a 16-channel hidden layer; zero weights zero out
  auto mlp = make_mlp<float>(4, 4);
  CHECK(mlp.expand.spec.out_channels == 16);
  zero_all<float>(mlp.expand);
  zero_all<float>(mlp.contract);
  Tape<float> tm;
  Session<float> sm(tm);
  auto mout = tm.value(mlp_forward(sm, mlp, tm.leaf(x)));
  for (float v : mout.data) CHECK(v == 0.0f);
}

TEST_CASE("dlk block: zero weights, shape, composition") {
  auto blk = make_dlk_block<float>(4, 4);
  zero_all<float>(blk);
  SplitMix64 rng(51);
  auto x = random_tensor<float>({2, 4, 2, 2, 2}, rng);
  Tape<float> tape;
  Session<float> s(tape);
  auto out = tape.value(
      dlk_block_forward(s, blk, tape.leaf(x), CombineMode::split_calibrate));
  CHECK(max_abs_diff(out, x) == 0.0);

  auto blk2 = make_dlk_block<float>(4, 2);
  init_all<float>(blk2, 52);
  Tape<float> t2;
  Session<float> s2(t2);
  Var v = t2.leaf(x);
  // two consecutive blocks compose without shape change
  v = dlk_block_forward(s2, blk2, v, CombineMode::split_calibrate);
  v = dlk_block_forward(s2, blk2, v, CombineMode::split_calibrate);
  CHECK(t2.value(v).extents == x.extents);
}

TEST_CASE("dlk shape preservation over random shapes") {
  SplitMix64 rng(61);
  for (int rep = 0; rep < 8; ++rep) {
    const int c = 2 * (int)rng.uniform_int(1, 4);
    auto w = make_dlk<float>(c);
    init_all<float>(w, rng.next());
    Extents e{(std::size_t)rng.uniform_int(1, 2), (std::size_t)c,
              (std::size_t)rng.uniform_int(1, 5), (std::size_t)rng.uniform_int(1, 5),
              (std::size_t)rng.uniform_int(1, 5)};
    auto x = random_tensor<float>(e, rng);
    auto mode = rng.unit() < 0.5 ? CombineMode::split_calibrate
                                 : CombineMode::literal_sum;
    CHECK(run_dlk(w, x, mode).extents == e);
  }
}

TEST_CASE("dlk module and mlp gradients match finite differences") {
  auto mw = make_dlk_module<double>(4);
  init_all<double>(mw, 71);
  SplitMix64 rng(72);
  auto x = random_tensor<double>({1, 4, 4, 4, 4}, rng);

  // gradient w.r.t. the input through the whole module
  auto r = testsup::fd_check(
      [&](Tape<double>& t, const std::vector<Var>& v) {
        Session<double> s(t);
        return dlk_module_forward(s, mw, v[0], CombineMode::split_calibrate);
      },
      {x});
  CHECK(r.max_rel_err < 1e-3);

  auto mlp = make_mlp<double>(4, 2);
  init_all<double>(mlp, 73);
  auto r2 = testsup::fd_check(
      [&](Tape<double>& t, const std::vector<Var>& v) {
        Session<double> s(t);
        return mlp_forward(s, mlp, v[0]);
      },
      {x});
  CHECK(r2.max_rel_err < 1e-3);
}

namespace {

// adapts a module weight struct (visit(prefix, f)) to gradcheck_params
template <typename W>
struct ModuleParams {
  W& w;
  template <class F>
  void visit(F&& f) {
    w.visit("m", f);
  }
};

}  // namespace

TEST_CASE("dlk module parameter gradients match finite differences") {
  auto mw = make_dlk_module<double>(4);
  init_all<double>(mw, 81);
  SplitMix64 rng(82);
  auto x = random_tensor<double>({1, 4, 4, 4, 4}, rng);
  ModuleParams<DLKModuleWeights<double>> adapter{mw};
  auto report = gradcheck_params(
      adapter,
      [&](Session<double>& s, ModuleParams<DLKModuleWeights<double>>& a) {
        Var out = dlk_module_forward(s, a.w, s.tape.leaf(x),
                                     CombineMode::split_calibrate);
        return s.tape.sum(out);
      },
      1e-3, 1e-3, /*samples_per_param=*/6, 83);
  CHECK(report.pass);
}
