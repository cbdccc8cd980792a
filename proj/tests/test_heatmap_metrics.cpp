#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "hyatt/gradcheck.hpp"
#include "hyatt/metrics.hpp"
#include "test_util.hpp"

using namespace hyatt;

namespace {

LandmarkSet points(std::vector<Point> p, std::optional<double> spacing = std::nullopt) { return {std::move(p), spacing}; }

}  // namespace

TEST(EncodeHeatmap, LiteralCenterValues) {
  const auto h2 = encode_heatmap<double>(points({{10, 12}}), 32, 32, 2.0, false);
  EXPECT_NEAR(h2[12 * 32 + 10], 1.0 / (std::sqrt(2 * std::numbers::pi) * 2.0), 1e-12);
  EXPECT_NEAR(h2[12 * 32 + 10], 0.19947, 1e-5);
  const auto h4 = encode_heatmap<double>(points({{10, 12}}), 32, 32, 4.0, false);
  const double c = h4[12 * 32 + 10];
  EXPECT_NEAR(c, 0.09974, 1e-5);
  EXPECT_NEAR(h4[12 * 32 + 14], c * std::exp(-0.5), 1e-15);
  EXPECT_NEAR(h4[16 * 32 + 10], c * std::exp(-0.5), 1e-15);
}

TEST(EncodeHeatmap, PeakNormalizedCenterIsOne) {
  const auto h = encode_heatmap<float>(points({{3, 4}, {7, 1}}), 8, 9, 2.0, true);
  EXPECT_EQ(h.shape(), (Shape{2, 8, 9}));
  EXPECT_EQ(h[4 * 9 + 3], 1.0f);
  EXPECT_EQ(h[72 + 1 * 9 + 7], 1.0f);
}

TEST(EncodeHeatmap, MatchesPerPixelOracle) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-4, 36);
  for (int trial = 0; trial < 50; ++trial) {
    const Point p{u(rng), u(rng)};
    const double sigma = trial % 2 ? 2.0 : 4.0;
    const bool peak = trial % 3 == 0;
    const auto h = encode_heatmap<float>(points({p}), 30, 34, sigma, peak);
    for (std::size_t y = 0; y < 30; ++y)
      for (std::size_t x = 0; x < 34; ++x) {
        const double d2 = (x - p.x) * (x - p.x) + (y - p.y) * (y - p.y);
        const double a = peak ? 1.0 : 1.0 / (std::sqrt(2 * std::numbers::pi) * sigma);
        ASSERT_NEAR(h[y * 34 + x], a * std::exp(-d2 / (2 * sigma * sigma)), 1e-7);
      }
  }
}

TEST(EncodeHeatmap, PositiveEverywhereAndMaximalAtLandmark) {
  const auto h = encode_heatmap<double>(points({{5, 20}}), 32, 32, 2.0, false);
  std::size_t best = 0;
  for (std::size_t i = 0; i < h.numel(); ++i) {
    EXPECT_GT(h[i], 0.0);
    if (h[i] > h[best]) best = i;
  }
  EXPECT_EQ(best, 20u * 32u + 5u);
}

TEST(EncodeHeatmap, OutsideLandmarkIsTruncatedNotAnError) {
  const auto h = encode_heatmap<double>(points({{-30, 50}}), 16, 16, 2.0, true);
  for (double v : h.data()) EXPECT_LT(v, 1e-10);
}

TEST(EncodeHeatmap, RejectsNonPositiveSigma) {
  EXPECT_THROW(encode_heatmap<float>(points({{1, 1}}), 4, 4, 0.0, true), std::invalid_argument);
  EXPECT_THROW(encode_heatmap<float>(points({{1, 1}}), 4, 4, -1.0, true), std::invalid_argument);
}

TEST(DecodeHeatmap, RoundTripOnIntegerLandmarks) {
  std::mt19937_64 rng(2);
  std::size_t failures = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const double sigma = trial % 2 ? 2.0 : 4.0;
    const bool peak = (trial / 2) % 2;
    const std::size_t h = 64, w = 48, margin = std::size_t(3 * sigma);
    std::uniform_int_distribution<std::size_t> ux(margin, w - 1 - margin), uy(margin, h - 1 - margin);
    const LandmarkSet l = points({{double(ux(rng)), double(uy(rng))}, {double(ux(rng)), double(uy(rng))}});
    if (decode_heatmap(encode_heatmap<float>(l, h, w, sigma, peak)).points != l.points) ++failures;
  }
  EXPECT_EQ(failures, 0u);
}

TEST(DecodeHeatmap, TieBreakIsLowestIndex) {
  EXPECT_EQ(decode_heatmap(Tensor<float>({1, 4, 5}, 0.3f)).points[0], (Point{0, 0}));
  Tensor<float> m({1, 3, 4});
  m.data()[5] = 2.0f;
  m.data()[9] = 2.0f;
  EXPECT_EQ(decode_heatmap(m).points[0], (Point{1, 1}));  // index 5 = row 1, col 1
}

TEST(DecodeHeatmap, QuarterPixelRefinement) {
  Tensor<float> m({1, 5, 5});
  m.data()[2 * 5 + 2] = 1.0f;
  m.data()[2 * 5 + 3] = 0.5f;
  m.data()[1 * 5 + 2] = 0.4f;
  EXPECT_EQ(decode_heatmap(m).points[0], (Point{2, 2}));
  EXPECT_EQ(decode_heatmap(m, {true}).points[0], (Point{2.25, 1.75}));
}

TEST(CombinedLoss, WeightedSumOfComponents) {
  auto one = [](double v) { return Tensor<double>({1, 1, 1, 1}, v); };
  const HeatmapStack<double> pred{one(std::sqrt(0.1)), one(std::sqrt(0.2)), one(std::sqrt(0.3))};
  const HeatmapStack<double> target{one(0), one(0), one(0)};
  EXPECT_NEAR(combined_loss(pred, target).item(), 1.6, 1e-12);
}

TEST(CombinedLoss, ZeroIffEqual) {
  Rng rng(3);
  const HeatmapStack<float> a{uniform_tensor<float>({2, 3, 4, 4}, rng), uniform_tensor<float>({2, 3, 8, 8}, rng),
                              uniform_tensor<float>({2, 3, 32, 32}, rng)};
  EXPECT_EQ(combined_loss(a, a).item(), 0.0f);
  for (auto member : {&HeatmapStack<float>::h1, &HeatmapStack<float>::h2, &HeatmapStack<float>::h3}) {
    HeatmapStack<float> b{a.h1.clone(), a.h2.clone(), a.h3.clone()};
    (b.*member).data()[7] += 0.01f;
    EXPECT_GT(combined_loss(a, b).item(), 0.0f);
  }
}

TEST(CombinedLoss, RejectsShapeMismatch) {
  const HeatmapStack<float> a{Tensor<float>({1, 2, 4, 4}), Tensor<float>({1, 2, 8, 8}), Tensor<float>({1, 2, 32, 32})};
  HeatmapStack<float> b = a;
  b.h2 = Tensor<float>({1, 3, 8, 8});
  try {
    combined_loss(a, b);
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_EQ(e.axis(), "h2");
  }
}

TEST(CombinedLoss, GradientExtendedPrecision) {
  Rng rng(4);
  const HeatmapStack<double> p{uniform_tensor<double>({1, 2, 2, 2}, rng), uniform_tensor<double>({1, 2, 4, 4}, rng),
                               uniform_tensor<double>({1, 2, 6, 6}, rng)};
  const HeatmapStack<double> t{uniform_tensor<double>({1, 2, 2, 2}, rng), uniform_tensor<double>({1, 2, 4, 4}, rng),
                               uniform_tensor<double>({1, 2, 6, 6}, rng)};
  GradCheckOptions opt;
  opt.step = 1e-5;
  opt.tolerance = 1e-5;
  const auto r = check_gradients<double>("combined_loss", [&] { return combined_loss(p, t); }, {p.h1, p.h2, p.h3}, opt);
  EXPECT_TRUE(r.passed) << r.max_rel_error << " " << r.worst;
}

TEST(EncodeTargets, PerHeadGridsAndSigmas) {
  const LossConfig cfg;
  const auto t = encode_targets<float>({points({{35, 67}}), points({{8, 100}})}, 128, 128, cfg);
  EXPECT_EQ(t.h1.shape(), (Shape{2, 1, 16, 16}));
  EXPECT_EQ(t.h2.shape(), (Shape{2, 1, 32, 32}));
  EXPECT_EQ(t.h3.shape(), (Shape{2, 1, 128, 128}));
  // (35.5 / 4 - 0.5, 67.5 / 4 - 0.5) = (8.375, 16.375)
  const auto expect = encode_heatmap<float>(points({{8.375, 16.375}}), 32, 32, 2.0, true);
  for (std::size_t i = 0; i < expect.numel(); ++i) EXPECT_EQ(t.h2[i], expect[i]);
  EXPECT_EQ(t.h3[67 * 128 + 35], 1.0f);
}

TEST(GridMapping, InverseAndCenters) {
  EXPECT_DOUBLE_EQ(to_grid(from_grid(3.25, 8), 8), 3.25);
  EXPECT_DOUBLE_EQ(to_grid(3.5, 8), 0.0);  // center of the first 8-pixel cell
}

TEST(Mre, WorkedExamples) {
  auto r = mre(points({{3, 4}}), points({{0, 0}}));
  EXPECT_EQ(r.radial[0], 5.0);
  EXPECT_EQ(r.unit, "px");
  r = mre(points({{3, 4}}, 0.1), points({{0, 0}}, 0.1));
  EXPECT_NEAR(r.radial[0], 0.5, 1e-15);
  EXPECT_EQ(r.unit, "mm");
}

TEST(Mre, RejectsMismatches) {
  EXPECT_THROW(mre(points({{0, 0}}), points({{0, 0}, {1, 1}})), DimensionError);
  EXPECT_THROW(mre(points({{0, 0}}, 0.1), points({{0, 0}})), std::invalid_argument);
  EXPECT_THROW(mre(points({{0, 0}}, 0.1), points({{0, 0}}, 0.2)), std::invalid_argument);
}

TEST(Mre, MatchesLoopOracle) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-100, 100);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + trial % 19;
    LandmarkSet p, g;
    if (trial % 2) p.spacing = g.spacing = 0.1;
    for (std::size_t i = 0; i < n; ++i) {
      p.points.push_back({u(rng), u(rng)});
      g.points.push_back({u(rng), u(rng)});
    }
    const auto r = mre(p, g);
    double s = 0.0;
    std::vector<double> rad;
    for (std::size_t i = 0; i < n; ++i) {
      rad.push_back(std::hypot(p.points[i].x - g.points[i].x, p.points[i].y - g.points[i].y) * g.spacing.value_or(1.0));
    }
    for (std::size_t i = 0; i < n; ++i) s += rad[i];
    const double m = s / double(n);
    double q = 0.0;
    for (double v : rad) q += (v - m) * (v - m);
    ASSERT_EQ(r.radial.size(), n);
    for (std::size_t i = 0; i < n; ++i) ASSERT_NEAR(r.radial[i], rad[i], 1e-12 * rad[i]);
    ASSERT_NEAR(r.mre, m, 1e-12 * m);
    ASSERT_NEAR(r.std, std::sqrt(q / double(n)), 1e-9);
  }
}

TEST(Mre, TranslationInvariant) {
  const auto a = mre(points({{1, 2}, {5, -3}}), points({{4, 6}, {0, 0}}));
  const auto b = mre(points({{11, 22}, {15, 17}}), points({{14, 26}, {10, 20}}));
  EXPECT_NEAR(a.mre, b.mre, 1e-12);
}

TEST(Sdr, WorkedExampleUsesStrictInequality) {
  const auto s = sdr({1.0, 2.5, 3.5}, {2, 2.5, 3, 4});
  ASSERT_EQ(s.size(), 4u);
  EXPECT_NEAR(s[0], 100.0 / 3, 1e-12);
  EXPECT_NEAR(s[1], 100.0 / 3, 1e-12);
  EXPECT_NEAR(s[2], 200.0 / 3, 1e-12);
  EXPECT_EQ(s[3], 100.0);
}

TEST(Sdr, PerfectDetection) {
  for (double v : sdr({0, 0, 0, 0}, {2, 2.5, 3, 4})) EXPECT_EQ(v, 100.0);
}

TEST(Sdr, MatchesLoopOracleAndIsMonotone) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0, 6);
  const std::vector<double> th = {0.5, 1, 2, 2.5, 3, 4, std::numeric_limits<double>::max()};
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> r(1 + trial % 37);
    for (auto& v : r) v = std::round(u(rng) * 4) / 4;  // lands on thresholds often
    const auto s = sdr(r, th);
    for (std::size_t i = 0; i < th.size(); ++i) {
      std::size_t c = 0;
      for (double v : r) c += v < th[i];
      ASSERT_EQ(s[i], 100.0 * double(c) / double(r.size()));
      if (i) {
        ASSERT_GE(s[i], s[i - 1]);
      }
    }
    ASSERT_EQ(s.back(), 100.0);
  }
}

TEST(Sdr, RejectsBadThresholds) {
  EXPECT_THROW(sdr({1.0}, {2, 1}), std::invalid_argument);
  EXPECT_THROW(sdr({1.0}, {0}), std::invalid_argument);
}

TEST(EvalReport, GroundTruthAsPrediction) {
  const std::vector<LandmarkSet> gt = {points({{1, 2}, {3, 4}}, 0.1), points({{5, 6}, {7, 8}}, 0.1)};
  const auto rep = make_report(gt, gt, {2, 2.5, 3, 4});
  EXPECT_EQ(rep.mre, 0.0);
  EXPECT_EQ(rep.unit, "mm");
  for (double v : rep.sdr_percent) EXPECT_EQ(v, 100.0);
}

TEST(EvalReport, SingleSampleEqualsPerPointMetrics) {
  const auto p = points({{0, 0}, {3, 4}, {1, 1}}), g = points({{1, 0}, {0, 0}, {1, 1}});
  const auto rep = make_report({p}, {g}, {1.5, 6});
  const auto r = mre(p, g);
  EXPECT_EQ(rep.mre, r.mre);
  EXPECT_EQ(rep.std, r.std);
  EXPECT_EQ(rep.per_sample[0], r.radial);
  EXPECT_EQ(rep.sdr_percent, sdr(r.radial, {1.5, 6}));
}

TEST(EvalReport, AggregationMatchesLoopOracle) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0, 10);
  std::vector<LandmarkSet> p(6), g(6);
  for (std::size_t s = 0; s < 6; ++s)
    for (int i = 0; i < 4; ++i) {
      p[s].points.push_back({u(rng), u(rng)});
      g[s].points.push_back({u(rng), u(rng)});
    }
  const auto rep = make_report(p, g, {2, 4});
  std::vector<double> all;
  for (std::size_t s = 0; s < 6; ++s)
    for (std::size_t i = 0; i < 4; ++i)
      all.push_back(std::hypot(p[s].points[i].x - g[s].points[i].x, p[s].points[i].y - g[s].points[i].y));
  double m = 0.0;
  for (double v : all) m += v;
  m /= double(all.size());
  double q = 0.0;
  for (double v : all) q += (v - m) * (v - m);
  EXPECT_NEAR(rep.mre, m, 1e-12);
  EXPECT_NEAR(rep.std, std::sqrt(q / double(all.size())), 1e-12);
  std::size_t below2 = 0;
  for (double v : all) below2 += v < 2;
  EXPECT_EQ(rep.sdr_percent[0], 100.0 * double(below2) / 24.0);
}

TEST(EvalReport, SerializedForms) {
  const auto rep = make_report({points({{3, 4}})}, {points({{0, 0}})}, {2, 6});
  EXPECT_EQ(rep.csv(), "threshold,sdr_percent\n2,0.000000\n6,100.000000\n");
  EXPECT_EQ(rep.summary(), "mre=5.000000 std=0.000000 n_landmarks=1 n_samples=1 unit=px");
  EXPECT_EQ(rep.per_point_csv(), "sample,r0\n0,5.000000\n");
  EXPECT_THROW(make_report({points({{0, 0}}, 0.1), points({{0, 0}})}, {points({{0, 0}}, 0.1), points({{0, 0}})}, {2}),
               std::invalid_argument);
}
