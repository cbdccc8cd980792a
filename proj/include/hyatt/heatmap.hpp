#pragma once

#include <cmath>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "hyatt/ops.hpp"

namespace hyatt {

struct Point {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point&) const = default;
};

/// N landmarks in the pixel frame of some grid, with optional mm-per-pixel spacing.
struct LandmarkSet {
  std::vector<Point> points;
  std::optional<double> spacing;

  std::size_t size() const noexcept { return points.size(); }

  void validate() const {
    if (points.empty()) throw std::invalid_argument("LandmarkSet: at least one landmark required");
    for (const auto& p : points) {
      if (!std::isfinite(p.x) || !std::isfinite(p.y)) throw std::invalid_argument("LandmarkSet: non-finite coordinate");
    }
    if (spacing && !(*spacing > 0.0)) throw std::invalid_argument("LandmarkSet: spacing must be positive");
  }
};

/// Grid coordinate of an input-pixel coordinate on a map downsampled by `stride`
/// (pixel centers aligned, matching bilinear resizing).
inline double to_grid(double input_coord, double stride) { return (input_coord + 0.5) / stride - 0.5; }
inline double from_grid(double grid_coord, double stride) { return (grid_coord + 0.5) * stride - 0.5; }

inline LandmarkSet rescale(const LandmarkSet& l, double stride) {
  LandmarkSet out = l;
  for (auto& p : out.points) p = {to_grid(p.x, stride), to_grid(p.y, stride)};
  return out;
}

/// [N, h, w] Gaussian maps. Literal mode uses the 1/(sqrt(2 pi) sigma) amplitude;
/// peak_normalize sets the amplitude to 1.
template <class T>
Tensor<T> encode_heatmap(const LandmarkSet& landmarks, std::size_t h, std::size_t w, double sigma, bool peak_normalize) {
  if (!(sigma > 0.0)) throw std::invalid_argument("encode_heatmap: sigma must be positive, got " + std::to_string(sigma));
  const std::size_t n = landmarks.size();
  if (n == 0) throw std::invalid_argument("encode_heatmap: no landmarks");
  const double amp = peak_normalize ? 1.0 : 1.0 / (std::sqrt(2.0 * std::numbers::pi) * sigma);
  const double inv = 1.0 / (2.0 * sigma * sigma);
  Tensor<T> out({n, h, w});
  T* po = out.ptr();
  for (std::size_t i = 0; i < n; ++i) {
    const Point c = landmarks.points[i];
    for (std::size_t y = 0; y < h; ++y) {
      const double dy = double(y) - c.y;
      for (std::size_t x = 0; x < w; ++x) {
        const double dx = double(x) - c.x;
        po[(i * h + y) * w + x] = static_cast<T>(amp * std::exp(-(dx * dx + dy * dy) * inv));
      }
    }
  }
  return out;
}

/// Stacks per-sample encodings into [B, N, h, w].
template <class T>
Tensor<T> encode_batch(const std::vector<LandmarkSet>& batch, std::size_t h, std::size_t w, double sigma,
                       bool peak_normalize) {
  if (batch.empty()) throw std::invalid_argument("encode_batch: empty batch");
  const std::size_t n = batch.front().size();
  Tensor<T> out({batch.size(), n, h, w});
  for (std::size_t b = 0; b < batch.size(); ++b) {
    if (batch[b].size() != n) throw DimensionError("encode_batch", "landmarks", "samples disagree on N");
    const auto one = encode_heatmap<T>(batch[b], h, w, sigma, peak_normalize);
    std::copy(one.data().begin(), one.data().end(), out.ptr() + b * one.numel());
  }
  return out;
}

struct DecodeOptions {
  /// Shift a quarter pixel toward the larger axis neighbour.
  bool quarter_pixel = false;
};

/// Argmax per channel of an [N, h, w] map; ties resolve to the lowest linear index.
template <class T>
LandmarkSet decode_heatmap(const Tensor<T>& heatmap, DecodeOptions opt = {}) {
  detail::require_rank(heatmap.shape(), 3, "decode_heatmap", "heatmap");
  const std::size_t n = heatmap.dim(0), h = heatmap.dim(1), w = heatmap.dim(2);
  LandmarkSet out;
  out.points.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* m = heatmap.ptr() + i * h * w;
    std::size_t best = 0;
    for (std::size_t j = 1; j < h * w; ++j)
      if (m[j] > m[best]) best = j;
    const std::size_t by = best / w, bx = best % w;
    double x = double(bx), y = double(by);
    if (opt.quarter_pixel) {
      if (bx > 0 && bx + 1 < w) {
        const T l = m[best - 1], r = m[best + 1];
        if (r > l) x += 0.25;
        if (l > r) x -= 0.25;
      }
      if (by > 0 && by + 1 < h) {
        const T u = m[best - w], d = m[best + w];
        if (d > u) y += 0.25;
        if (u > d) y -= 0.25;
      }
    }
    out.points[i] = {x, y};
  }
  return out;
}

/// Three deep-supervision maps: H1 (stride 8), H2 (stride 4), H3 (full resolution).
template <class T>
struct HeatmapStack {
  Tensor<T> h1, h2, h3;
};

struct LossConfig {
  double sigma1 = 2.0, sigma2 = 2.0, sigma3 = 4.0;
  double w1 = 1.0, w2 = 3.0, w3 = 3.0;
  bool peak_normalize = true;
};

/// w1·MSE(H1, G1) + w2·MSE(H2, G2) + w3·MSE(H3, G3)
template <class T>
Tensor<T> combined_loss(const HeatmapStack<T>& pred, const HeatmapStack<T>& target, const LossConfig& cfg = {}) {
  const std::pair<const Tensor<T>*, const Tensor<T>*> pairs[] = {
      {&pred.h1, &target.h1}, {&pred.h2, &target.h2}, {&pred.h3, &target.h3}};
  const char* names[] = {"h1", "h2", "h3"};
  for (int i = 0; i < 3; ++i) {
    if (pairs[i].first->shape() != pairs[i].second->shape()) {
      throw DimensionError("combined_loss", names[i], "prediction " + to_string(pairs[i].first->shape()) + " vs target " +
                                                          to_string(pairs[i].second->shape()));
    }
  }
  const Tensor<T> l1 = scale(mse_loss(pred.h1, target.h1), T(cfg.w1));
  const Tensor<T> l2 = scale(mse_loss(pred.h2, target.h2), T(cfg.w2));
  const Tensor<T> l3 = scale(mse_loss(pred.h3, target.h3), T(cfg.w3));
  return add(add(l1, l2), l3);
}

/// Targets for a batch of input-pixel landmarks, each encoded on its head's grid
/// with that head's sigma.
template <class T>
HeatmapStack<T> encode_targets(const std::vector<LandmarkSet>& batch, std::size_t height, std::size_t width,
                               const LossConfig& cfg) {
  std::vector<LandmarkSet> g1, g2;
  for (const auto& l : batch) {
    g1.push_back(rescale(l, 8.0));
    g2.push_back(rescale(l, 4.0));
  }
  return {encode_batch<T>(g1, height / 8, width / 8, cfg.sigma1, cfg.peak_normalize),
          encode_batch<T>(g2, height / 4, width / 4, cfg.sigma2, cfg.peak_normalize),
          encode_batch<T>(batch, height, width, cfg.sigma3, cfg.peak_normalize)};
}

}  // namespace hyatt
