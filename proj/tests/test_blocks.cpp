#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

#include "hyatt/blocks.hpp"
#include "hyatt/gradcheck.hpp"
#include "test_util.hpp"

using namespace hyatt;
using hyatt::test::conv2d_oracle;
using hyatt::test::max_abs_diff;

namespace {

using D = Tensor<double>;

double sig(double v) { return 1.0 / (1.0 + std::exp(-v)); }

/// CBAM written out with loops.
D cbam_oracle(const D& f, const CbamParams<double>& p, D* ca_out = nullptr, D* sa_out = nullptr) {
  const std::size_t B = f.dim(0), C = f.dim(1), H = f.dim(2), W = f.dim(3), P = H * W;
  const std::size_t R = p.fc1.weight.dim(0);
  auto mlp = [&](const std::vector<double>& v) {
    std::vector<double> hidden(R), out(C);
    for (std::size_t j = 0; j < R; ++j) {
      double a = p.fc1.bias[j];
      for (std::size_t i = 0; i < C; ++i) a += p.fc1.weight[j * C + i] * v[i];
      hidden[j] = std::max(a, 0.0);
    }
    for (std::size_t c = 0; c < C; ++c) {
      double a = p.fc2.bias[c];
      for (std::size_t j = 0; j < R; ++j) a += p.fc2.weight[c * R + j] * hidden[j];
      out[c] = a;
    }
    return out;
  };
  D ca({B, C, 1, 1}), sa({B, 1, H, W}), out(f.shape());
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<double> avg(C, 0.0), mx(C, -1e300);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < P; ++i) {
        avg[c] += f[(b * C + c) * P + i] / double(P);
        mx[c] = std::max(mx[c], f[(b * C + c) * P + i]);
      }
    const auto ma = mlp(avg), mm = mlp(mx);
    for (std::size_t c = 0; c < C; ++c) ca.data()[b * C + c] = sig(ma[c] + mm[c]);
    std::vector<double> f1(C * P), pa(P, 0.0), pm(P, -1e300);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < P; ++i) {
        f1[c * P + i] = ca[b * C + c] * f[(b * C + c) * P + i];
        pa[i] += f1[c * P + i] / double(C);
        pm[i] = std::max(pm[i], f1[c * P + i]);
      }
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        double a = p.spatial.bias[0];
        for (std::size_t i = 0; i < 7; ++i)
          for (std::size_t j = 0; j < 7; ++j) {
            const long yy = long(y + i) - 3, xx = long(x + j) - 3;
            if (yy < 0 || xx < 0 || yy >= long(H) || xx >= long(W)) continue;
            a += p.spatial.weight[i * 7 + j] * pa[yy * W + xx] + p.spatial.weight[49 + i * 7 + j] * pm[yy * W + xx];
          }
        sa.data()[b * P + y * W + x] = sig(a);
      }
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < P; ++i) out.data()[(b * C + c) * P + i] = sa[b * P + i] * f1[c * P + i];
  }
  if (ca_out) *ca_out = ca;
  if (sa_out) *sa_out = sa;
  return out;
}

/// Inference-mode batch norm with loops.
D bn_oracle(const D& x, const BatchNorm<double>& bn) {
  D out(x.shape());
  const std::size_t C = x.dim(1), P = x.dim(2) * x.dim(3);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const std::size_t c = (i / P) % C;
    out.data()[i] = (x[i] - bn.running_mean[c]) / std::sqrt(bn.running_var[c] + 1e-5) * bn.gamma[c] + bn.beta[c];
  }
  return out;
}

D relu_oracle(D x) {
  D out = x.clone();
  for (auto& v : out.data()) v = std::max(v, 0.0);
  return out;
}

D conv_oracle(const D& x, const ConvLayer<double>& c) {
  return conv2d_oracle(x, c.weight, c.bias, c.options.stride, c.options.padding, c.options.dilation, c.options.groups);
}

void randomize_stats(BatchNorm<double>& bn, Rng& rng) {
  std::uniform_real_distribution<double> u(0.5, 1.5), m(-0.3, 0.3);
  for (auto& v : bn.running_mean.data()) v = m(rng);
  for (auto& v : bn.running_var.data()) v = u(rng);
  for (auto& v : bn.gamma.data()) v = u(rng);
  for (auto& v : bn.beta.data()) v = m(rng);
}

/// Composite blocks contain parameters with exactly zero gradient (conv bias
/// ahead of batch statistics, softmax shifts) whose numeric estimate is pure
/// cancellation noise, so small gradients are compared absolutely.
GradCheckOptions extended() {
  GradCheckOptions opt;
  opt.step = 1e-5;
  opt.tolerance = 1e-5;
  opt.floor = 1e-3;
  return opt;
}

std::vector<D> with_params(const D& x, const ParameterStore<double>& store) {
  std::vector<D> inputs = {x};
  for (const auto& e : store.entries())
    if (e.trainable) inputs.push_back(e.tensor);
  return inputs;
}

}  // namespace

TEST(ChannelAttention, ZeroMlpGivesHalf) {
  ParameterStore<float> store;
  Rng rng(1);
  auto p = make_cbam(store, "cbam", 8, 4, rng);
  for (auto* t : {&p.fc1.weight, &p.fc1.bias, &p.fc2.weight, &p.fc2.bias}) fill(*t, 0.0f);
  const auto ca = channel_attention(uniform_tensor<float>({2, 8, 5, 5}, rng), p);
  EXPECT_EQ(ca.shape(), (Shape{2, 8, 1, 1}));
  for (float v : ca.data()) EXPECT_EQ(v, 0.5f);
}

TEST(ChannelAttention, ConstantChannelsDoubleTheMlp) {
  ParameterStore<double> store;
  Rng rng(2);
  auto p = make_cbam(store, "cbam", 4, 2, rng);
  D f({1, 4, 3, 3});
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t i = 0; i < 9; ++i) f.data()[c * 9 + i] = 0.3 * double(c) - 0.4;
  const auto pooled = pool(f, PoolKind::GlobalAvg);
  const auto mlp = p.fc2(relu(p.fc1(pooled)));
  const auto ca = channel_attention(f, p);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(ca[c], sig(2 * mlp[c]), 1e-15);
}

TEST(ChannelAttention, RejectsChannelMismatch) {
  ParameterStore<float> store;
  Rng rng(3);
  auto p = make_cbam(store, "cbam", 8, 4, rng);
  EXPECT_THROW(channel_attention(Tensor<float>({1, 4, 3, 3}), p), DimensionError);
  EXPECT_THROW(make_cbam(store, "bad", 6, 4, rng), std::invalid_argument);
}

TEST(SpatialAttention, ZeroConvGivesHalf) {
  ParameterStore<float> store;
  Rng rng(4);
  auto p = make_cbam(store, "cbam", 4, 2, rng);
  fill(p.spatial.weight, 0.0f);
  fill(p.spatial.bias, 0.0f);
  const auto sa = spatial_attention(uniform_tensor<float>({1, 4, 6, 6}, rng), p);
  EXPECT_EQ(sa.shape(), (Shape{1, 1, 6, 6}));
  for (float v : sa.data()) EXPECT_EQ(v, 0.5f);
}

TEST(SpatialAttention, ConstantInputIsUniformAwayFromBorder) {
  ParameterStore<double> store;
  Rng rng(5);
  auto p = make_cbam(store, "cbam", 4, 2, rng);
  const auto sa = spatial_attention(D({1, 4, 12, 12}, 0.7), p);
  // Zero padding makes the 3-pixel border differ; the interior sees a constant stack.
  const double ref = sa[3 * 12 + 3];
  for (std::size_t y = 3; y < 9; ++y)
    for (std::size_t x = 3; x < 9; ++x) EXPECT_NEAR(sa[y * 12 + x], ref, 1e-15);
}

TEST(Cbam, MatchesLoopOracle) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ParameterStore<double> store;
    Rng rng(10 + seed);
    auto p = make_cbam(store, "cbam", 8, 4, rng);
    const auto f = uniform_tensor<double>({2, 8, 7, 9}, rng, -2, 2);
    D ca, sa;
    const auto expect = cbam_oracle(f, p, &ca, &sa);
    EXPECT_LT(max_abs_diff(cbam(f, p), expect), 1e-6);
    EXPECT_LT(max_abs_diff(channel_attention(f, p), ca), 1e-6);
    EXPECT_LT(max_abs_diff(spatial_attention(mul(channel_attention(f, p), f), p), sa), 1e-6);
  }
}

TEST(Cbam, ZeroInputGivesZero) {
  ParameterStore<float> store;
  Rng rng(6);
  auto p = make_cbam(store, "cbam", 8, 4, rng);
  const auto y = cbam(Tensor<float>({1, 8, 4, 4}), p);
  for (float v : y.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Cbam, OutputIsContraction) {
  ParameterStore<float> store;
  Rng rng(7);
  auto p = make_cbam(store, "cbam", 8, 2, rng);
  const auto f = uniform_tensor<float>({2, 8, 6, 6}, rng, -5, 5);
  const auto y = cbam(f, p);
  for (std::size_t i = 0; i < f.numel(); ++i) EXPECT_LE(std::abs(y[i]), std::abs(f[i]));
}

TEST(Cbam, GradientsExtendedPrecision) {
  ParameterStore<double> store;
  Rng rng(8);
  auto p = make_cbam(store, "cbam", 4, 2, rng);
  const auto f = uniform_tensor<double>({2, 4, 5, 5}, rng);
  const auto w = uniform_tensor<double>(f.shape(), rng, 0.5, 1.5);
  const auto r = check_gradients<double>("cbam", [&] { return sum(mul(cbam(f, p), w)); }, with_params(f, store), extended());
  EXPECT_TRUE(r.passed) << r.max_rel_error << " " << r.worst;
}

TEST(Arm, MatchesStepByStepOracle) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    ParameterStore<double> store;
    Rng rng(20 + seed);
    auto p = make_arm(store, "arm", 4, 8, 4, rng);
    randomize_stats(p.norm1, rng);
    randomize_stats(p.norm2, rng);
    const auto f = uniform_tensor<double>({2, 4, 8, 8}, rng);
    const auto a = relu_oracle(bn_oracle(conv_oracle(f, p.conv1), p.norm1));
    const auto b = bn_oracle(conv_oracle(a, p.conv2), p.norm2);
    const auto c = cbam_oracle(b, p.cbam);
    auto expect = conv_oracle(f, p.residual);
    for (std::size_t i = 0; i < expect.numel(); ++i) expect.data()[i] = std::max(expect[i] + c[i], 0.0);
    EXPECT_LT(max_abs_diff(arm(f, p), expect), 1e-6);
  }
}

TEST(Arm, PreservesSpatialSize) {
  ParameterStore<float> store;
  Rng rng(9);
  auto p = make_arm(store, "arm", 8, 8, 4, rng);
  EXPECT_EQ(arm(uniform_tensor<float>({1, 8, 5, 7}, rng), p).shape(), (Shape{1, 8, 5, 7}));
}

TEST(Arm, ZeroInputWithZeroBiasesGivesZero) {
  ParameterStore<float> store;
  Rng rng(10);
  auto p = make_arm(store, "arm", 8, 8, 4, rng);
  for (auto* t : {&p.conv1.bias, &p.conv2.bias, &p.residual.bias, &p.cbam.fc1.bias, &p.cbam.fc2.bias, &p.cbam.spatial.bias})
    fill(*t, 0.0f);
  const auto y = arm(Tensor<float>({1, 8, 6, 6}), p);
  for (float v : y.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Arm, OutputIsNonNegative) {
  ParameterStore<float> store;
  Rng rng(11);
  auto p = make_arm(store, "arm", 4, 8, 2, rng);
  const auto y = arm(uniform_tensor<float>({2, 4, 8, 8}, rng, -3, 3), p, {true, false});
  for (float v : y.data()) EXPECT_GE(v, 0.0f);
}

TEST(Arm, GradientsExtendedPrecision) {
  for (bool training : {false, true}) {
    ParameterStore<double> store;
    Rng rng(12);
    auto p = make_arm(store, "arm", 2, 4, 2, rng);
    randomize_stats(p.norm1, rng);
    randomize_stats(p.norm2, rng);
    const auto f = uniform_tensor<double>({2, 2, 5, 5}, rng);
    const auto w = uniform_tensor<double>({2, 4, 5, 5}, rng, 0.5, 1.5);
    const ForwardMode mode{training, false};
    const auto r =
        check_gradients<double>("arm", [&] { return sum(mul(arm(f, p, mode), w)); }, with_params(f, store), extended());
    EXPECT_TRUE(r.passed) << "training=" << training << " " << r.max_rel_error << " " << r.worst;
  }
}

TEST(PatchEmbed, ShapeContract) {
  ParameterStore<float> store;
  Rng rng(13);
  auto p = make_patch_embed(store, "embed", 1, 16, rng);
  EXPECT_EQ(patch_embed(Tensor<float>({1, 1, 64, 64}), p).shape(), (Shape{1, 16, 16, 16}));
  try {
    patch_embed(Tensor<float>({1, 1, 64, 62}), p);
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_EQ(e.axis(), "width");
  }
}

TEST(PatchEmbed, ConstantImageGivesUniformEmbedding) {
  ParameterStore<double> store;
  Rng rng(14);
  auto p = make_patch_embed(store, "embed", 1, 6, rng);
  fill(p.conv.bias, 0.0);
  const auto y = patch_embed(D({1, 1, 32, 32}, 0.8), p);
  for (std::size_t c = 0; c < 6; ++c)
    for (std::size_t i = 0; i < 64; ++i) EXPECT_EQ(y[c * 64 + i], y[c * 64]);
}

TEST(PatchEmbed, GradientsExtendedPrecision) {
  ParameterStore<double> store;
  Rng rng(15);
  auto p = make_patch_embed(store, "embed", 1, 3, rng);
  const auto x = uniform_tensor<double>({2, 1, 8, 8}, rng);
  const auto w = uniform_tensor<double>({2, 3, 2, 2}, rng, 0.5, 1.5);
  for (bool training : {false, true}) {
    const ForwardMode mode{training, false};
    const auto r = check_gradients<double>("patch_embed", [&] { return sum(mul(patch_embed(x, p, mode), w)); },
                                           with_params(x, store), extended());
    EXPECT_TRUE(r.passed) << r.max_rel_error << " " << r.worst;
  }
}

namespace {

struct FfcmFixture {
  ParameterStore<double> store;
  FfcmParams<double> p;
  D u5, h2, image;
};

FfcmFixture make_ffcm_fixture(std::size_t feat, std::size_t n, std::size_t h, std::uint64_t seed) {
  FfcmFixture f;
  Rng rng(seed);
  f.p = make_ffcm(f.store, "ffcm", feat, n, 1, 4, 6, 5, rng);
  f.u5 = uniform_tensor<double>({1, feat, h, h}, rng);
  f.h2 = uniform_tensor<double>({1, n, h, h}, rng);
  f.image = uniform_tensor<double>({1, 1, 4 * h, 4 * h}, rng, 0, 1);
  return f;
}

}  // namespace

TEST(Ffcm, ShapeContract) {
  ParameterStore<float> store;
  Rng rng(16);
  auto p = make_ffcm(store, "ffcm", 256, 4, 1, 8, 32, 16, rng);
  EXPECT_EQ(p.fuse.weight.dim(1), 256u + 4u + 32u);
  const auto out = ffcm(Tensor<float>({1, 256, 32, 32}), Tensor<float>({1, 4, 32, 32}), Tensor<float>({1, 1, 128, 128}), p);
  EXPECT_EQ(out.shape(), (Shape{1, 16, 128, 128}));
  EXPECT_EQ(ffcm_heatmap(out, p).shape(), (Shape{1, 4, 128, 128}));
}

TEST(Ffcm, RejectsMisalignedInputs) {
  auto f = make_ffcm_fixture(3, 2, 4, 17);
  EXPECT_THROW(ffcm(f.u5, D({1, 2, 5, 4}), f.image, f.p), DimensionError);
}

TEST(Ffcm, ZeroContextBranchIgnoresImage) {
  auto f = make_ffcm_fixture(3, 2, 4, 18);
  fill(f.p.fc2.weight, 0.0);
  fill(f.p.fc2.bias, 0.0);
  Rng rng(19);
  const auto a = ffcm(f.u5, f.h2, f.image, f.p);
  const auto b = ffcm(f.u5, f.h2, uniform_tensor<double>(f.image.shape(), rng, 0, 1), f.p);
  EXPECT_TRUE(hyatt::test::bitwise_equal(a, b));
}

TEST(Ffcm, MatchesFormulaOracle) {
  auto f = make_ffcm_fixture(3, 2, 4, 20);
  const std::size_t H = 16, ctx = 6;
  // Context vector by loops.
  const auto stem = relu_oracle(conv_oracle(f.image, f.p.stem));
  std::vector<double> pooled(4, 0.0), hidden(ctx), context(ctx);
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t i = 0; i < H * H; ++i) pooled[c] += stem[c * H * H + i] / double(H * H);
  for (std::size_t j = 0; j < ctx; ++j) {
    double a = f.p.fc1.bias[j];
    for (std::size_t c = 0; c < 4; ++c) a += f.p.fc1.weight[j * 4 + c] * pooled[c];
    hidden[j] = std::max(a, 0.0);
  }
  for (std::size_t j = 0; j < ctx; ++j) {
    double a = f.p.fc2.bias[j];
    for (std::size_t i = 0; i < ctx; ++i) a += f.p.fc2.weight[j * ctx + i] * hidden[i];
    context[j] = a;
  }
  // Bilinear upsample by 4 with half-pixel centers, clamped at the edges.
  auto up = [&](const D& x) {
    const std::size_t C = x.dim(1), h = x.dim(2);
    D out({1, C, H, H});
    auto src = [&](std::size_t o, std::size_t& lo, std::size_t& hi, double& t) {
      double s = (double(o) + 0.5) / 4.0 - 0.5;
      s = std::max(s, 0.0);
      lo = std::min(std::size_t(s), h - 1);
      hi = std::min(lo + 1, h - 1);
      t = s - double(lo);
    };
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x0 = 0; x0 < H; ++x0) {
          std::size_t y0, y1, xa, xb;
          double ty, tx;
          src(y, y0, y1, ty);
          src(x0, xa, xb, tx);
          auto at = [&](std::size_t yy, std::size_t xx) { return x[(c * h + yy) * h + xx]; };
          out.data()[(c * H + y) * H + x0] = (1 - ty) * ((1 - tx) * at(y0, xa) + tx * at(y0, xb)) +
                                             ty * ((1 - tx) * at(y1, xa) + tx * at(y1, xb));
        }
    return out;
  };
  const auto uu = up(f.u5), hh = up(f.h2);
  D u6({1, 3 + 2 + ctx, H, H});
  for (std::size_t i = 0; i < H * H; ++i) {
    for (std::size_t c = 0; c < 3; ++c) u6.data()[c * H * H + i] = uu[c * H * H + i];
    for (std::size_t c = 0; c < 2; ++c) u6.data()[(3 + c) * H * H + i] = hh[c * H * H + i];
    for (std::size_t c = 0; c < ctx; ++c) u6.data()[(5 + c) * H * H + i] = context[c];
  }
  EXPECT_LT(max_abs_diff(ffcm(f.u5, f.h2, f.image, f.p), conv_oracle(u6, f.p.fuse)), 1e-6);
}

TEST(Ffcm, GradientsExtendedPrecision) {
  auto f = make_ffcm_fixture(3, 2, 2, 21);
  Rng rng(22);
  const auto w = uniform_tensor<double>({1, 2, 8, 8}, rng, 0.5, 1.5);
  std::vector<D> inputs = with_params(f.u5, f.store);
  inputs.push_back(f.h2);
  inputs.push_back(f.image);
  const auto r = check_gradients<double>(
      "ffcm", [&] { return sum(mul(ffcm_heatmap(ffcm(f.u5, f.h2, f.image, f.p), f.p), w)); }, inputs, extended());
  EXPECT_TRUE(r.passed) << r.max_rel_error << " " << r.worst;
}

TEST(Heads, ShapeAndComposition) {
  ParameterStore<double> store;
  Rng rng(23);
  auto p = make_head(store, "head", 6, 5, 3, rng);
  const auto x = uniform_tensor<double>({2, 6, 4, 4}, rng);
  const auto expect = conv_oracle(relu_oracle(conv_oracle(x, p.conv)), p.out);
  EXPECT_LT(max_abs_diff(heatmap_head(x, p), expect), 1e-12);
}
