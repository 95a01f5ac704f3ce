#include <catch2/catch_amalgamated.hpp>

#include "dnet/ops.hpp"
#include "support.hpp"

using namespace dnet;
using testsup::max_abs_diff;
using testsup::random_tensor;

namespace {

ConvSpec axis_spec(int in_ch, int out_ch, std::array<int, 3> k,
                   std::array<int, 3> stride, std::array<int, 3> dilation,
                   std::array<int, 3> padding, int groups, bool bias) {
  ConvSpec s;
  s.kernel = k;
  s.stride = stride;
  s.dilation = dilation;
  s.padding = padding;
  s.groups = groups;
  s.in_channels = in_ch;
  s.out_channels = out_ch;
  s.has_bias = bias;
  return s;
}

// Random spec/shape pair small enough for the brute-force oracle.
struct RandomCase {
  DenseTensor<float> input;
  DenseTensor<float> weights;
  DenseTensor<float> bias;
  ConvSpec spec;
};

RandomCase random_conv_case(SplitMix64& rng, bool transposed) {
  ConvSpec s;
  const int groups_pick = (int)rng.uniform_int(0, 2);
  int groups = 1;
  int in_ch = (int)rng.uniform_int(1, 8);
  int out_ch = (int)rng.uniform_int(1, 8);
  if (groups_pick == 1) {  // depthwise
    groups = in_ch;
    out_ch = in_ch;
  } else if (groups_pick == 2 && in_ch % 2 == 0 && out_ch % 2 == 0) {
    groups = 2;
  }
  for (int a = 0; a < 3; ++a) {
    s.kernel[a] = (int)rng.uniform_int(1, 3);
    s.stride[a] = (int)rng.uniform_int(1, 2);
    s.dilation[a] = (int)rng.uniform_int(1, 2);
    s.padding[a] = (int)rng.uniform_int(0, 2);
  }
  s.groups = groups;
  s.in_channels = in_ch;
  s.out_channels = out_ch;
  s.has_bias = rng.unit() < 0.7;
  if (transposed) {  // keep the scatter output non-empty
    for (int a = 0; a < 3; ++a) {
      s.padding[a] = std::min(s.padding[a], (s.effective_kernel(a) - 1) / 2);
    }
  }

  Extents in_extents{(std::size_t)rng.uniform_int(1, 2), (std::size_t)in_ch, 0, 0, 0};
  for (int a = 0; a < 3; ++a) {
    // keep the output non-empty for the forward direction
    const int min_len = transposed ? 1 : std::max(1, s.effective_kernel(a) - 2 * s.padding[a]);
    in_extents[2 + a] = (std::size_t)rng.uniform_int(min_len, 6);
  }

  RandomCase c;
  c.spec = s;
  c.input = random_tensor<float>(in_extents, rng);
  c.weights = random_tensor<float>(
      transposed ? s.transposed_weight_extents() : s.weight_extents(), rng);
  if (s.has_bias) {
    c.bias = random_tensor<float>({(std::size_t)s.out_channels}, rng);
  }
  return c;
}

}  // namespace

TEST_CASE("dense tensor invariants") {
  CHECK_THROWS_AS(DenseTensor<float>({3, 0, 2}), std::invalid_argument);
  CHECK_THROWS_AS(DenseTensor<float>({2, 2}, {1.f, 2.f, 3.f}), std::invalid_argument);
  DenseTensor<float> t({2, 3});
  CHECK(t.size() == 6);
  DenseTensor<float> bad({1, 2}, {1.f, std::numeric_limits<float>::infinity()});
  CHECK_THROWS_AS(ensure_finite(bad, "test"), std::runtime_error);
}

TEST_CASE("conv spec shape formula and validation") {
  ConvSpec s = make_conv_spec(4, 8, 3, 2);
  CHECK(s.padding == std::array<int, 3>{1, 1, 1});
  CHECK(s.out_spatial({8, 8, 8}) == std::array<std::size_t, 3>{4, 4, 4});

  ConvSpec d7 = make_conv_spec(2, 2, 7, 1, 3, 2);
  CHECK(d7.padding == std::array<int, 3>{9, 9, 9});
  CHECK(d7.out_spatial({5, 5, 5}) == std::array<std::size_t, 3>{5, 5, 5});

  ConvSpec bad = make_conv_spec(4, 8, 3);
  bad.groups = 3;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  ConvSpec tiny = axis_spec(1, 1, {5, 1, 1}, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, 1, false);
  CHECK_THROWS_AS(tiny.out_spatial({3, 3, 3}), std::invalid_argument);
}

TEST_CASE("conv3d hand examples") {
  // 1x1x3 input [1,2,3], kernel (1,1,3) of ones, padding (0,0,1)
  DenseTensor<float> in({1, 1, 1, 1, 3}, {1.f, 2.f, 3.f});
  DenseTensor<float> w({1, 1, 1, 1, 3}, {1.f, 1.f, 1.f});
  ConvSpec s = axis_spec(1, 1, {1, 1, 3}, {1, 1, 1}, {1, 1, 1}, {0, 0, 1}, 1, false);
  auto out = ops::conv3d<float>(in, w, nullptr, s);
  CHECK(out.extents == Extents{1, 1, 1, 1, 3});
  CHECK(out.data[0] == Catch::Approx(3.f));
  CHECK(out.data[1] == Catch::Approx(6.f));
  CHECK(out.data[2] == Catch::Approx(5.f));
  CHECK(max_abs_diff(out, testsup::reference_conv3d<float>(in, w, nullptr, s)) < 1e-6);
}

TEST_CASE("conv3d identity kernel") {
  SplitMix64 rng(11);
  auto in = random_tensor<float>({2, 3, 2, 3, 4}, rng);
  ConvSpec s = make_conv_spec(3, 3, 1, 1, 1, 3);
  DenseTensor<float> w = DenseTensor<float>::filled(s.weight_extents(), 1.f);
  DenseTensor<float> b({3});
  auto out = ops::conv3d(in, w, &b, s);
  CHECK(max_abs_diff(out, in) == 0.0);
}

TEST_CASE("conv3d dilated taps") {
  // Dilated taps sample x[i-2], x[i], x[i+2]; holes between taps stay holes.
  DenseTensor<float> in({1, 1, 1, 1, 5}, {1.f, 0.f, 0.f, 0.f, 2.f});
  DenseTensor<float> w({1, 1, 1, 1, 3}, {1.f, 1.f, 1.f});
  ConvSpec s = axis_spec(1, 1, {1, 1, 3}, {1, 1, 1}, {1, 1, 2}, {0, 0, 2}, 1, false);
  auto ref = testsup::reference_conv3d<float>(in, w, nullptr, s);
  auto out = ops::conv3d<float>(in, w, nullptr, s);
  CHECK(out.extents == Extents{1, 1, 1, 1, 5});
  const std::vector<float> expect{1.f, 0.f, 3.f, 0.f, 2.f};  // frozen from the oracle
  for (int i = 0; i < 5; ++i) {
    CHECK(ref.data[i] == Catch::Approx(expect[i]));
    CHECK(out.data[i] == Catch::Approx(expect[i]));
  }
}

TEST_CASE("conv3d shape errors") {
  DenseTensor<float> in({1, 2, 2, 2, 2});
  ConvSpec s = make_conv_spec(3, 4, 1);
  DenseTensor<float> w(s.weight_extents());
  DenseTensor<float> b({4});
  CHECK_THROWS_WITH(ops::conv3d(in, w, &b, s),
                    Catch::Matchers::ContainsSubstring("channel extent"));
  DenseTensor<float> wrong_w({4, 3, 2, 1, 1});
  CHECK_THROWS_WITH(ops::conv3d(in, wrong_w, &b, s),
                    Catch::Matchers::ContainsSubstring("weight extents"));
}

TEST_CASE("conv3d matches brute-force oracle on random cases") {
  SplitMix64 rng(1234);
  for (int i = 0; i < 60; ++i) {
    auto c = random_conv_case(rng, false);
    auto got = ops::conv3d(c.input, c.weights, c.spec.has_bias ? &c.bias : nullptr,
                           c.spec);
    auto want = testsup::reference_conv3d(
        c.input, c.weights, c.spec.has_bias ? &c.bias : nullptr, c.spec);
    REQUIRE(got.extents == want.extents);
    REQUIRE(max_abs_diff(got, want) < 1e-5);
  }
}

TEST_CASE("transposed conv hand examples") {
  // 1x1x2 input [1,2], kernel (1,1,2) of ones, stride 2
  DenseTensor<float> in({1, 1, 1, 1, 2}, {1.f, 2.f});
  ConvSpec s = axis_spec(1, 1, {1, 1, 2}, {1, 1, 2}, {1, 1, 1}, {0, 0, 0}, 1, false);
  DenseTensor<float> w(s.transposed_weight_extents(), {1.f, 1.f});
  auto out = ops::transposed_conv3d<float>(in, w, nullptr, s);
  CHECK(out.extents == Extents{1, 1, 1, 1, 4});
  CHECK(out.data == std::vector<float>{1.f, 1.f, 2.f, 2.f});

  // zero input propagates only the bias
  SplitMix64 rng(5);
  ConvSpec s2 = axis_spec(3, 2, {2, 2, 2}, {2, 2, 2}, {1, 1, 1}, {0, 0, 0}, 1, true);
  DenseTensor<float> zin({1, 3, 2, 2, 2});
  auto w2 = random_tensor<float>(s2.transposed_weight_extents(), rng);
  DenseTensor<float> b2({2}, {0.5f, -1.f});
  auto out2 = ops::transposed_conv3d(zin, w2, &b2, s2);
  CHECK(out2.extents == Extents{1, 2, 4, 4, 4});
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t v = 0; v < 64; ++v)
      CHECK(out2.data[c * 64 + v] == b2.data[c]);

  // C=4 at 4^3 with a 2^3/stride-2 spec and out_channels 2 doubles each axis
  ConvSpec s3 = axis_spec(4, 2, {2, 2, 2}, {2, 2, 2}, {1, 1, 1}, {0, 0, 0}, 1, true);
  auto in3 = random_tensor<float>({1, 4, 4, 4, 4}, rng);
  auto w3 = random_tensor<float>(s3.transposed_weight_extents(), rng);
  auto b3 = random_tensor<float>({2}, rng);
  auto out3 = ops::transposed_conv3d(in3, w3, &b3, s3);
  CHECK(out3.extents == Extents{1, 2, 8, 8, 8});
}

TEST_CASE("transposed conv matches scatter oracle on random cases") {
  SplitMix64 rng(4321);
  for (int i = 0; i < 40; ++i) {
    auto c = random_conv_case(rng, true);
    auto got = ops::transposed_conv3d(c.input, c.weights,
                                      c.spec.has_bias ? &c.bias : nullptr, c.spec);
    auto want = testsup::reference_transposed_conv3d(
        c.input, c.weights, c.spec.has_bias ? &c.bias : nullptr, c.spec);
    REQUIRE(got.extents == want.extents);
    REQUIRE(max_abs_diff(got, want) < 1e-5);
  }
}

TEST_CASE("channel stats pool") {
  DenseTensor<float> two({1, 2, 1, 1, 1}, {2.f, 4.f});
  CHECK(ops::channel_stats_pool(two, ops::ChannelStat::mean).data[0] == 3.f);
  CHECK(ops::channel_stats_pool(two, ops::ChannelStat::max).data[0] == 4.f);

  auto constant = DenseTensor<float>::filled({1, 5, 2, 2, 2}, 0.75f);
  for (auto kind : {ops::ChannelStat::mean, ops::ChannelStat::max}) {
    auto out = ops::channel_stats_pool(constant, kind);
    CHECK(out.extents == Extents{1, 1, 2, 2, 2});
    for (float v : out.data) CHECK(v == 0.75f);
  }

  SplitMix64 rng(77);
  auto x = random_tensor<float>({1, 4, 2, 2, 2}, rng);
  auto mean = ops::channel_stats_pool(x, ops::ChannelStat::mean);
  auto mx = ops::channel_stats_pool(x, ops::ChannelStat::max);
  for (std::size_t v = 0; v < 8; ++v) {  // per-voxel loop oracle
    double acc = 0.0;
    float m = -1e30f;
    for (std::size_t c = 0; c < 4; ++c) {
      acc += x.data[c * 8 + v];
      m = std::max(m, x.data[c * 8 + v]);
    }
    CHECK(mean.data[v] == Catch::Approx(acc / 4.0).margin(1e-6));
    CHECK(mx.data[v] == m);
  }
}

TEST_CASE("global average pool") {
  DenseTensor<float> x({1, 1, 1, 2, 2}, {1.f, 2.f, 3.f, 6.f});
  CHECK(ops::global_avg_pool(x).data[0] == Catch::Approx(3.0));

  auto constant = DenseTensor<float>::filled({2, 3, 2, 2, 2}, -1.25f);
  auto out = ops::global_avg_pool(constant);
  CHECK(out.extents == Extents{2, 3, 1, 1, 1});
  for (float v : out.data) CHECK(v == Catch::Approx(-1.25f));

  SplitMix64 rng(99);
  auto r = random_tensor<float>({1, 3, 2, 2, 2}, rng);
  auto pooled = ops::global_avg_pool(r);
  for (std::size_t c = 0; c < 3; ++c) {
    double acc = 0.0;
    for (std::size_t v = 0; v < 8; ++v) acc += r.data[c * 8 + v];
    CHECK(pooled.data[c] == Catch::Approx(acc / 8.0).margin(1e-6));
  }
}

TEST_CASE("activations") {
  DenseTensor<float> x({1, 1, 1, 1, 3}, {0.f, -2.f, 1.f});
  auto sig = ops::activation(x, ops::Activation::sigmoid);
  CHECK(sig.data[0] == Catch::Approx(0.5));
  auto gelu = ops::activation(x, ops::Activation::gelu);
  CHECK(gelu.data[0] == Catch::Approx(0.0));
  auto leaky = ops::activation(x, ops::Activation::leaky_relu, 0.01);
  CHECK(leaky.data[1] == Catch::Approx(-0.02));
  CHECK(leaky.data[2] == Catch::Approx(1.0));
}

TEST_CASE("layer norm") {
  DenseTensor<float> scale({2}, {1.f, 1.f});
  DenseTensor<float> shift({2}, {0.f, 0.f});
  DenseTensor<float> x({1, 2, 1, 1, 1}, {1.f, 3.f});
  auto out = ops::layer_norm(x, scale, shift, 1e-6);
  CHECK(out.data[0] == Catch::Approx(-1.0).margin(1e-4));
  CHECK(out.data[1] == Catch::Approx(1.0).margin(1e-4));

  // moment oracle: per-voxel mean ~ 0 and variance ~ 1 before the affine map
  SplitMix64 rng(3);
  auto big = random_tensor<float>({1, 6, 2, 2, 2}, rng, -2.0, 2.0);
  DenseTensor<float> s6 = DenseTensor<float>::filled({6}, 1.f);
  DenseTensor<float> z6({6});
  auto normed = ops::layer_norm(big, s6, z6, 1e-6);
  for (std::size_t v = 0; v < 8; ++v) {
    double mean = 0.0, var = 0.0;
    for (std::size_t c = 0; c < 6; ++c) mean += normed.data[c * 8 + v];
    mean /= 6.0;
    for (std::size_t c = 0; c < 6; ++c) {
      const double d = normed.data[c * 8 + v] - mean;
      var += d * d;
    }
    var /= 6.0;
    CHECK(std::abs(mean) <= 1e-5);
    CHECK(std::abs(var - 1.0) <= 1e-3);
  }

  DenseTensor<float> wrong({3});
  CHECK_THROWS_AS(ops::layer_norm(x, wrong, shift, 1e-6), std::invalid_argument);
}

TEST_CASE("batch norm") {
  SplitMix64 rng(8);
  auto x = random_tensor<float>({2, 3, 2, 2, 2}, rng);
  DenseTensor<float> scale = DenseTensor<float>::filled({3}, 1.f);
  DenseTensor<float> shift({3});
  DenseTensor<float> rm({3});
  DenseTensor<float> rv = DenseTensor<float>::filled({3}, 1.f);

  // eval with identity statistics is the identity up to epsilon
  auto eval = ops::batch_norm(x, scale, shift, rm, rv, false, 0.1, 1e-5);
  CHECK(max_abs_diff(eval.output, x) < 1e-4);

  // train mode standardizes each channel over (N, spatial)
  auto tr = ops::batch_norm(x, scale, shift, rm, rv, true, 0.1, 1e-5);
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0.0;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t v = 0; v < 8; ++v) mean += tr.output.data[(n * 3 + c) * 8 + v];
    CHECK(std::abs(mean / 16.0) < 1e-5);
    // running stats blend with momentum 0.1
    CHECK(tr.new_running_mean.data[c] ==
          Catch::Approx(0.9 * 0.0 + 0.1 * tr.used_mean[c]).margin(1e-6));
  }
}

TEST_CASE("concat and slice channels") {
  DenseTensor<float> a({1, 2, 1, 1, 1}, {1.f, 2.f});
  DenseTensor<float> b({1, 2, 1, 1, 1}, {3.f, 4.f});
  auto cat = ops::concat_channels(a, b);
  CHECK(cat.extents == Extents{1, 4, 1, 1, 1});
  CHECK(cat.data == std::vector<float>{1.f, 2.f, 3.f, 4.f});

  // extents >= 1 is enforced at construction, so an empty operand cannot exist
  CHECK_THROWS_AS(DenseTensor<float>({1, 0, 1, 1, 1}), std::invalid_argument);

  SplitMix64 rng(21);
  auto x = random_tensor<float>({2, 3, 2, 1, 2}, rng);
  auto y = random_tensor<float>({2, 2, 2, 1, 2}, rng);
  auto joined = ops::concat_channels(x, y);
  CHECK(max_abs_diff(ops::slice_channels(joined, 0, 3), x) == 0.0);
  CHECK(max_abs_diff(ops::slice_channels(joined, 3, 2), y) == 0.0);

  DenseTensor<float> mismatch({2, 3, 2, 2, 2});
  CHECK_THROWS_AS(ops::concat_channels(x, mismatch), std::invalid_argument);
}

TEST_CASE("elementwise with broadcasting") {
  SplitMix64 rng(31);
  auto x = random_tensor<float>({2, 3, 2, 2, 2}, rng);

  auto ones = DenseTensor<float>::filled({2, 3, 1, 1, 1}, 1.f);
  CHECK(max_abs_diff(ops::elementwise(x, ones, ops::EwKind::mul), x) == 0.0);

  auto neg = x;
  for (float& v : neg.data) v = -v;
  auto zero = ops::elementwise(x, neg, ops::EwKind::add);
  for (float v : zero.data) CHECK(v == 0.0f);

  // channel-scalar broadcast vs explicit tiling oracle
  auto gate = random_tensor<float>({2, 3, 1, 1, 1}, rng);
  auto got = ops::elementwise(x, gate, ops::EwKind::mul);
  DenseTensor<float> tiled(x.extents);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t v = 0; v < 8; ++v)
        tiled.data[(n * 3 + c) * 8 + v] = gate.data[n * 3 + c];
  auto want = ops::elementwise(x, tiled, ops::EwKind::mul);
  CHECK(max_abs_diff(got, want) == 0.0);

  // spatial-map broadcast
  auto sp = random_tensor<float>({2, 1, 2, 2, 2}, rng);
  auto got_sp = ops::elementwise(x, sp, ops::EwKind::add);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t v = 0; v < 8; ++v)
        CHECK(got_sp.data[(n * 3 + c) * 8 + v] ==
              x.data[(n * 3 + c) * 8 + v] + sp.data[n * 8 + v]);

  DenseTensor<float> bad({2, 2, 2, 2, 2});
  CHECK_THROWS_AS(ops::elementwise(x, bad, ops::EwKind::add), std::invalid_argument);
}

TEST_CASE("dropout") {
  SplitMix64 rng(41);
  auto x = random_tensor<float>({1, 2, 2, 2, 2}, rng);
  CHECK(max_abs_diff(ops::dropout(x, 0.0, true, 1), x) == 0.0);
  CHECK(max_abs_diff(ops::dropout(x, 0.9, false, 1), x) == 0.0);
  CHECK_THROWS_AS(ops::dropout(x, 1.0, true, 1), std::invalid_argument);

  // binomial oracle: survivor count within 3 sigma of n*(1-rate)
  auto big = DenseTensor<float>::filled({1, 1, 10, 100, 10}, 1.f);
  auto dropped = ops::dropout(big, 0.5, true, 123);
  std::size_t survivors = 0;
  for (float v : dropped.data) {
    if (v != 0.0f) {
      ++survivors;
      CHECK(v == Catch::Approx(2.0f));  // 1 / (1 - rate)
    }
  }
  const double n = 1e4, p = 0.5;
  const double sigma = std::sqrt(n * p * (1 - p));
  CHECK(std::abs((double)survivors - n * p) < 3 * sigma);

  // deterministic per seed
  auto again = ops::dropout(big, 0.5, true, 123);
  CHECK(max_abs_diff(dropped, again) == 0.0);
}

TEST_CASE("shape formula holds over randomized specs") {
  SplitMix64 rng(555);
  for (int i = 0; i < 100; ++i) {
    auto c = random_conv_case(rng, false);
    auto out = ops::conv3d(c.input, c.weights, c.spec.has_bias ? &c.bias : nullptr,
                           c.spec);
    for (int a = 0; a < 3; ++a) {
      const long long L = (long long)c.input.extents[2 + a];
      const long long expect =
          (L + 2LL * c.spec.padding[a] - c.spec.dilation[a] * (c.spec.kernel[a] - 1) - 1) /
              c.spec.stride[a] +
          1;
      CHECK((long long)out.extents[2 + a] == expect);
    }
    auto t = random_conv_case(rng, true);
    auto tout = ops::transposed_conv3d(t.input, t.weights,
                                       t.spec.has_bias ? &t.bias : nullptr, t.spec);
    for (int a = 0; a < 3; ++a) {
      const long long L = (long long)t.input.extents[2 + a];
      const long long expect = (L - 1) * t.spec.stride[a] - 2LL * t.spec.padding[a] +
                               t.spec.dilation[a] * (t.spec.kernel[a] - 1) + 1;
      CHECK((long long)tout.extents[2 + a] == expect);
    }
  }
}
