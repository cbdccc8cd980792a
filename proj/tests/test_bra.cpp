#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include <gtest/gtest.h>

#include "hyatt/bra.hpp"
#include "hyatt/gradcheck.hpp"
#include "dense_oracle.hpp"
#include "test_util.hpp"

using namespace hyatt;
using hyatt::test::bitwise_equal;
using hyatt::test::dense_oracle;
using hyatt::test::max_rel_diff;

namespace {

struct Fixture {
  ParameterStore<double> store;
  BraParams<double> params;
  Tensor<double> x;
};

Fixture make_fixture(const BraConfig& cfg, std::size_t B, std::size_t H, std::size_t W, std::uint64_t seed) {
  Rng rng(seed);
  Fixture f;
  f.params = make_bra_params(f.store, "attn", cfg, rng);
  f.x = uniform_tensor<double>({B, cfg.channels, H, W}, rng);
  return f;
}

}  // namespace

TEST(RegionPartition, WorkedExample) {
  Tensor<double> x({1, 1, 4, 4});
  std::iota(x.data().begin(), x.data().end(), 0.0);
  const auto r = region_partition(x, 2);
  EXPECT_EQ(r.shape(), (Shape{1, 4, 4, 1}));
  EXPECT_EQ(r[0], 0.0);  // token (0,0): region 0, slot 0
  // token (2,3) = value 11: region 3, slot 1
  EXPECT_EQ(r[3 * 4 + 1], 11.0);
  EXPECT_EQ(std::vector<double>(r.data().begin(), r.data().begin() + 4), (std::vector<double>{0, 1, 4, 5}));
}

TEST(RegionPartition, SingleRegionIsRowMajor) {
  Rng rng(1);
  auto x = uniform_tensor<double>({1, 3, 4, 6}, rng);
  const auto r = region_partition(x, 1);
  ASSERT_EQ(r.shape(), (Shape{1, 1, 24, 3}));
  for (std::size_t t = 0; t < 24; ++t)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(r[t * 3 + c], x[c * 24 + t]);
}

TEST(RegionPartition, RoundTripIsBitwise) {
  Rng rng(2);
  auto x = uniform_tensor<float>({2, 3, 8, 8}, rng);
  EXPECT_TRUE(bitwise_equal(region_merge(region_partition(x, 4), 4, 8, 8), x));
}

TEST(RegionPartition, IndivisibleMapIsRejected) {
  Tensor<float> x({1, 2, 6, 8});
  try {
    region_partition(x, 4);
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_EQ(e.axis(), "height");
    EXPECT_NE(std::string(e.what()).find("divisible"), std::string::npos);
  }
}

TEST(RegionSummaries, MatchesLoopOracle) {
  Rng rng(3);
  auto x = uniform_tensor<double>({1, 5, 8, 12}, rng);
  const std::size_t S = 4, rh = 2, rw = 3;
  const auto r = region_partition(x, S);
  const Tensor<double> flat = reshape(r, {S * S, rh * rw, 5});
  const auto s = region_summaries(flat, flat);
  for (std::size_t ry = 0; ry < S; ++ry)
    for (std::size_t rx = 0; rx < S; ++rx)
      for (std::size_t c = 0; c < 5; ++c) {
        double acc = 0.0;
        for (std::size_t y = ry * rh; y < (ry + 1) * rh; ++y)
          for (std::size_t xx = rx * rw; xx < (rx + 1) * rw; ++xx) acc += x[(c * 8 + y) * 12 + xx];
        EXPECT_NEAR(s.q_mean[(ry * S + rx) * 5 + c], acc / 6.0, 1e-14);
        EXPECT_NEAR(s.k_mean[(ry * S + rx) * 5 + c], acc / 6.0, 1e-14);
      }
}

TEST(Routing, IdentitySummaries) {
  const auto eye = hyatt::test::make<float>({2, 2}, {1, 0, 0, 1});
  EXPECT_EQ(routing(eye, eye, 1).indices.values, (std::vector<std::size_t>{0, 1}));
}

TEST(Routing, FullRoutingIsPermutation) {
  Rng rng(4);
  auto q = uniform_tensor<float>({9, 4}, rng), k = uniform_tensor<float>({9, 4}, rng);
  const auto ri = routing(q, k, 9);
  for (std::size_t r = 0; r < 9; ++r) {
    std::vector<std::size_t> row(ri.indices.row(r).begin(), ri.indices.row(r).end());
    std::sort(row.begin(), row.end());
    std::vector<std::size_t> all(9);
    std::iota(all.begin(), all.end(), 0);
    EXPECT_EQ(row, all);
  }
}

TEST(Routing, MatchesSortOracle) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    auto q = uniform_tensor<double>({4, 6}, rng), k = uniform_tensor<double>({4, 6}, rng);
    const auto ri = routing(q, k, 2);
    for (std::size_t i = 0; i < 4; ++i) {
      std::vector<std::pair<double, std::size_t>> a;
      for (std::size_t j = 0; j < 4; ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < 6; ++c) dot += q[i * 6 + c] * k[j * 6 + c];
        a.push_back({-dot, j});
      }
      std::sort(a.begin(), a.end());
      EXPECT_EQ(ri.indices(i, 0), a[0].second);
      EXPECT_EQ(ri.indices(i, 1), a[1].second);
    }
  }
}

TEST(Routing, EnlargingKKeepsEarlierRegions) {
  Rng rng(5);
  auto q = uniform_tensor<float>({16, 8}, rng), k = uniform_tensor<float>({16, 8}, rng);
  // Integer-valued summaries create many exact ties.
  auto qi = q.clone(), ki = k.clone();
  for (auto& v : qi.data()) v = std::round(v * 2);
  for (auto& v : ki.data()) v = std::round(v * 2);
  for (const auto* pair : {&q, &qi}) {
    const auto& qq = *pair;
    const auto& kk = pair == &q ? k : ki;
    for (std::size_t a = 1; a < 16; ++a) {
      const auto small = routing(qq, kk, a), big = routing(qq, kk, a + 1);
      for (std::size_t r = 0; r < 16; ++r) {
        std::set<std::size_t> s(big.indices.row(r).begin(), big.indices.row(r).end());
        for (auto idx : small.indices.row(r)) EXPECT_TRUE(s.count(idx)) << "k=" << a << " row " << r;
      }
    }
  }
}

TEST(BraConfig, Invariants) {
  EXPECT_THROW((BraConfig{2, 5, 1, 8}).validate(), std::invalid_argument);
  EXPECT_THROW((BraConfig{2, 0, 1, 8}).validate(), std::invalid_argument);
  EXPECT_THROW((BraConfig{2, 2, 3, 8}).validate(), std::invalid_argument);
  EXPECT_NO_THROW((BraConfig{2, 4, 2, 8}).validate());
  EXPECT_THROW((BraConfig{4, 4, 1, 8}).validate_for(8, 6), DimensionError);
}

TEST(BraForward, FullRoutingMatchesDenseOracle) {
  struct Draw {
    std::size_t S, heads, C, B, H, W;
  };
  const std::vector<Draw> draws = {{2, 1, 4, 1, 4, 4},   {2, 1, 8, 2, 8, 8},   {4, 1, 4, 1, 8, 8},
                                   {4, 1, 6, 1, 16, 16}, {2, 1, 5, 1, 16, 12}, {1, 1, 4, 1, 8, 8},
                                   {4, 2, 8, 1, 12, 16}, {2, 2, 4, 2, 6, 6},   {8, 1, 4, 1, 16, 16},
                                   {2, 4, 8, 1, 10, 10}, {4, 1, 3, 1, 16, 16}, {1, 2, 6, 2, 5, 7}};
  std::uint64_t seed = 100;
  for (const auto& d : draws) {
    const BraConfig cfg{d.S, d.S * d.S, d.heads, d.C};
    auto f = make_fixture(cfg, d.B, d.H, d.W, seed++);
    const auto got = bra_forward(f.x, f.params, cfg);
    EXPECT_LT(max_rel_diff(got, dense_oracle(f.x, f.params, d.heads)), 1e-5) << "S=" << d.S << " heads=" << d.heads;
  }
}

TEST(BraForward, SingleRegionMatchesDenseOracle) {
  const BraConfig cfg{1, 1, 1, 6};
  auto f = make_fixture(cfg, 2, 8, 8, 7);
  EXPECT_LT(max_rel_diff(bra_forward(f.x, f.params, cfg), dense_oracle(f.x, f.params, 1)), 1e-5);
  EXPECT_LT(max_rel_diff(dense_attention_forward(f.x, f.params, BraConfig{4, 2, 1, 6}), dense_oracle(f.x, f.params, 1)),
            1e-5);
}

TEST(BraForward, FloatFullRoutingTracksDenseOracle) {
  const BraConfig cfg{4, 16, 1, 8};
  auto f = make_fixture(cfg, 1, 16, 16, 9);
  ParameterStore<float> store;
  BraParams<float> pf;
  auto cast_linear = [](const LinearLayer<double>& l) {
    return LinearLayer<float>{l.weight.cast<float>(), l.bias.cast<float>()};
  };
  pf.q = cast_linear(f.params.q);
  pf.k = cast_linear(f.params.k);
  pf.v = cast_linear(f.params.v);
  pf.out = cast_linear(f.params.out);
  pf.lce = {f.params.lce.weight.cast<float>(), f.params.lce.bias.cast<float>(), f.params.lce.options};
  const auto got = bra_forward(f.x.cast<float>(), pf, cfg).cast<double>();
  EXPECT_LT(hyatt::test::max_abs_diff(got, dense_oracle(f.x, f.params, 1)), 1e-5);
}

TEST(BraForward, ZeroValuePathGivesOutputBias) {
  const BraConfig cfg{2, 2, 2, 4};
  auto f = make_fixture(cfg, 1, 8, 8, 11);
  for (auto* t : {&f.params.v.weight, &f.params.v.bias, &f.params.lce.weight, &f.params.lce.bias}) fill(*t, 0.0);
  const auto y = bra_forward(f.x, f.params, cfg);
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t i = 0; i < 64; ++i) EXPECT_EQ(y[c * 64 + i], f.params.out.bias[c]);
  fill(f.params.out.bias, 0.0);
  const auto z = bra_forward(f.x, f.params, cfg);
  for (double v : z.data()) EXPECT_EQ(v, 0.0);
}

TEST(BraForward, NonRoutedRegionsGetExactlyZeroGradient) {
  const BraConfig cfg{4, 3, 2, 4};
  auto f = make_fixture(cfg, 1, 8, 8, 12);
  for (auto* t : {&f.params.lce.weight, &f.params.lce.bias}) fill(*t, 0.0);
  std::vector<RoutingIndices> routes;
  {
    NoGradGuard<double> off;
    bra_forward(f.x, f.params, cfg, nullptr, &routes);
  }
  for (std::size_t query = 0; query < 16; ++query) {
    Tensor<double> x = f.x.clone();
    x.set_requires_grad(true);
    Tape<double> tape;
    Tensor<double> loss;
    {
      TapeGuard<double> g(tape);
      const auto part = region_partition(bra_forward(x, f.params, cfg), 4);
      std::vector<std::size_t> sel;
      for (std::size_t i = query * 4 * 4; i < (query + 1) * 4 * 4; ++i) sel.push_back(i);
      loss = sum(reindex(part, {sel.size()}, sel));
    }
    tape.backward(loss);
    const auto gx = region_partition(Tensor<double>(x.shape(), std::vector<double>(x.grad().begin(), x.grad().end())), 4);
    std::set<std::size_t> allowed(routes[0].indices.row(query).begin(), routes[0].indices.row(query).end());
    allowed.insert(query);
    for (std::size_t r = 0; r < 16; ++r) {
      double mag = 0.0;
      for (std::size_t i = 0; i < 16; ++i) mag += std::abs(gx[r * 16 + i]);
      if (allowed.count(r)) continue;
      EXPECT_EQ(mag, 0.0) << "query " << query << " leaked into region " << r;
    }
  }
}

TEST(BraForward, RegionPermutationCommutes) {
  const BraConfig cfg{2, 2, 2, 6};
  auto f = make_fixture(cfg, 1, 8, 8, 13);
  for (auto* t : {&f.params.lce.weight, &f.params.lce.bias}) fill(*t, 0.0);
  const std::vector<std::size_t> perm = {2, 0, 3, 1};
  auto permute_regions = [&](const Tensor<double>& t) {
    const auto r = region_partition(t, 2);
    const std::size_t block = r.numel() / 4;
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < block; ++j) idx.push_back(perm[i] * block + j);
    return region_merge(reindex(r, r.shape(), idx), 2, 8, 8);
  };
  const auto lhs = bra_forward(permute_regions(f.x), f.params, cfg);
  const auto rhs = permute_regions(bra_forward(f.x, f.params, cfg));
  EXPECT_LT(hyatt::test::max_abs_diff(lhs, rhs), 1e-12);
}

TEST(BraForward, CountersScaleWithRoutedFraction) {
  for (std::size_t k : {1u, 2u, 4u, 8u, 16u}) {
    const BraConfig cfg{4, k, 2, 8};
    auto f = make_fixture(cfg, 1, 16, 16, 14);
    AttentionCounters sparse, dense;
    bra_forward(f.x, f.params, cfg, &sparse);
    dense_attention_forward(f.x, f.params, cfg, &dense);
    const std::uint64_t T = 256, Tr = 16;
    EXPECT_EQ(dense.qk_macs, T * T * 8);
    EXPECT_EQ(sparse.qk_macs, T * (k * Tr) * 8);
    EXPECT_EQ(sparse.av_macs, sparse.qk_macs);
    EXPECT_EQ(sparse.token_macs() * 16, dense.token_macs() * k);
    EXPECT_EQ(sparse.routing_macs, 16u * 16u * 8u);
  }
}

TEST(BraForward, GradientsExtendedPrecision) {
  for (const BraConfig cfg : {BraConfig{2, 2, 2, 4}, BraConfig{2, 4, 1, 4}, BraConfig{1, 1, 2, 4}}) {
    auto f = make_fixture(cfg, 2, 4, 4, 15);
    Rng rng(16);
    const auto w = uniform_tensor<double>(f.x.shape(), rng, 0.5, 1.5);
    std::vector<Tensor<double>> inputs = {f.x};
    for (const auto& e : f.store.entries()) inputs.push_back(e.tensor);
    GradCheckOptions opt;
    opt.step = 1e-5;
    opt.tolerance = 1e-5;
    // The key bias has an exactly zero gradient (softmax shift invariance), so
    // its numeric estimate is pure cancellation noise around 1e-11.
    opt.floor = 1e-3;
    const auto r = check_gradients<double>(
        "bra_forward", [&] { return sum(mul(bra_forward(f.x, f.params, cfg), w)); }, inputs, opt);
    EXPECT_TRUE(r.passed) << r.max_rel_error << " " << r.worst;
  }
}

namespace {

struct BlockFixture {
  ParameterStore<float> store;
  BiformerParams<float> params;
};

}  // namespace

TEST(BiformerBlock, ZeroBranchesGiveIdentity) {
  const BraConfig cfg{2, 2, 2, 8};
  BlockFixture f;
  Rng rng(20);
  f.params = make_biformer_params(f.store, "blk", cfg, 3, rng);
  for (auto* t : {&f.params.pos.weight, &f.params.pos.bias, &f.params.attn.out.weight, &f.params.attn.out.bias,
                  &f.params.fc2.weight, &f.params.fc2.bias})
    fill(*t, 0.0f);
  auto x = uniform_tensor<float>({1, 8, 8, 8}, rng);
  EXPECT_TRUE(bitwise_equal(biformer_block(x, f.params, cfg), x));
}

TEST(BiformerBlock, ShapeContract) {
  const BraConfig cfg{2, 2, 2, 16};
  BlockFixture f;
  Rng rng(21);
  f.params = make_biformer_params(f.store, "blk", cfg, 3, rng);
  auto x = uniform_tensor<float>({1, 16, 8, 8}, rng);
  EXPECT_EQ(biformer_block(x, f.params, cfg).shape(), (Shape{1, 16, 8, 8}));
}

TEST(BiformerBlock, InputGradientDefaultPrecision) {
  const BraConfig cfg{2, 2, 2, 8};
  BlockFixture f;
  Rng rng(22);
  f.params = make_biformer_params(f.store, "blk", cfg, 3, rng);
  auto x = uniform_tensor<float>({1, 8, 8, 8}, rng);
  GradCheckOptions opt;
  opt.step = 1e-2;
  opt.tolerance = 1e-2;
  opt.floor = 1e-1;
  const auto r = check_gradients<float>("biformer", [&] { return sum(biformer_block(x, f.params, cfg)); }, {x}, opt);
  EXPECT_TRUE(r.passed) << r.max_rel_error << " " << r.worst;
}

TEST(BiformerBlock, GradientsExtendedPrecision) {
  const BraConfig cfg{2, 2, 2, 4};
  ParameterStore<double> store;
  Rng rng(23);
  const auto p = make_biformer_params(store, "blk", cfg, 3, rng);
  auto x = uniform_tensor<double>({2, 4, 4, 4}, rng);
  const auto w = uniform_tensor<double>(x.shape(), rng, 0.5, 1.5);
  std::vector<Tensor<double>> inputs = {x};
  for (const auto& e : store.entries()) inputs.push_back(e.tensor);
  GradCheckOptions opt;
  opt.step = 1e-5;
  opt.tolerance = 1e-5;
  opt.floor = 1e-3;
  const auto r =
      check_gradients<double>("biformer", [&] { return sum(mul(biformer_block(x, p, cfg), w)); }, inputs, opt);
  EXPECT_TRUE(r.passed) << r.max_rel_error << " " << r.worst;
}
