#pragma once

#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "hyatt/config.hpp"
#include "hyatt/heatmap.hpp"
#include "hyatt/manifest.hpp"
#include "hyatt/ops.hpp"
#include "hyatt/png_io.hpp"

namespace hyatt {

/// Half-pixel mapping between an original axis of `from` pixels and a resized
/// axis of `to` pixels.
inline double resize_coord(double x, std::size_t from, std::size_t to) {
  return (x + 0.5) * double(to) / double(from) - 0.5;
}

struct Sample {
  Tensor<float> image;             ///< [C, H, W] at target size
  LandmarkSet landmarks;           ///< target-size pixels
  LandmarkSet original;            ///< as listed in the manifest, with spacing
  std::size_t original_height = 0, original_width = 0;

  /// Maps target-size predictions back into original-image pixels.
  LandmarkSet to_original(const LandmarkSet& target) const {
    LandmarkSet out{{}, original.spacing};
    const std::size_t H = std::size_t(image.dim(1)), W = std::size_t(image.dim(2));
    for (const auto& p : target.points) {
      out.points.push_back({resize_coord(p.x, W, original_width), resize_coord(p.y, H, original_height)});
    }
    return out;
  }
};

struct Dataset {
  std::size_t num_landmarks = 0;
  std::size_t height = 0, width = 0, channels = 1;
  std::vector<Sample> samples;

  std::size_t size() const noexcept { return samples.size(); }
};

/// Reads every image, resizes to the manifest's target size and rescales the
/// landmarks per axis. Gray images are replicated over `channels`.
inline Dataset load_dataset(const std::string& manifest_path, std::size_t channels = 1) {
  const DatasetManifest m = read_manifest(manifest_path);
  Dataset ds;
  ds.num_landmarks = m.num_landmarks;
  ds.height = m.target_size[0];
  ds.width = m.target_size[1];
  ds.channels = channels;
  NoGradGuard<float> off;
  for (const auto& entry : m.samples) {
    const GrayImage img = read_png(resolve_image(manifest_path, entry.image));
    Tensor<float> t({1, 1, img.height, img.width}, img.pixels);
    if (img.height != ds.height || img.width != ds.width) t = bilinear_resize(t, ds.height, ds.width);
    Sample s;
    s.original_height = img.height;
    s.original_width = img.width;
    s.original = {entry.landmarks, entry.spacing_mm};
    s.landmarks.spacing = entry.spacing_mm;
    for (const auto& p : entry.landmarks) {
      s.landmarks.points.push_back({resize_coord(p.x, img.width, ds.width), resize_coord(p.y, img.height, ds.height)});
    }
    std::vector<float> data;
    data.reserve(channels * ds.height * ds.width);
    for (std::size_t c = 0; c < channels; ++c) data.insert(data.end(), t.data().begin(), t.data().end());
    s.image = Tensor<float>({channels, ds.height, ds.width}, std::move(data));
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

/// Random shift / scale / rotation about the image centre, applied to the
/// image by inverse bilinear sampling (zero outside) and to the landmarks.
inline std::pair<Tensor<float>, LandmarkSet> augment(const Tensor<float>& image, const LandmarkSet& marks,
                                                     const AugmentConfig& cfg, std::mt19937_64& rng) {
  auto uni = [&](double r) { return std::uniform_real_distribution<double>(-r, r)(rng); };
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  const double tx = uni(cfg.shift) * double(W), ty = uni(cfg.shift) * double(H);
  const double s = 1.0 + uni(cfg.scale);
  const double th = uni(cfg.rotation) * std::numbers::pi / 180.0;
  const double cx = (double(W) - 1) / 2, cy = (double(H) - 1) / 2;
  const double c = std::cos(th) * s, sn = std::sin(th) * s;
  auto forward = [&](double x, double y) {
    const double dx = x - cx, dy = y - cy;
    return Point{cx + c * dx - sn * dy + tx, cy + sn * dx + c * dy + ty};
  };
  const double det = c * c + sn * sn;
  Tensor<float> out = Tensor<float>::zeros({C, H, W});
  const float* src = image.ptr();
  float* dst = out.ptr();
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const double dx = double(x) - cx - tx, dy = double(y) - cy - ty;
      const double sx = cx + (c * dx + sn * dy) / det, sy = cy + (-sn * dx + c * dy) / det;
      const double fx = std::floor(sx), fy = std::floor(sy);
      const double ax = sx - fx, ay = sy - fy;
      for (std::size_t ch = 0; ch < C; ++ch) {
        double v = 0;
        for (int j = 0; j < 2; ++j) {
          for (int i = 0; i < 2; ++i) {
            const long xi = long(fx) + i, yi = long(fy) + j;
            if (xi < 0 || yi < 0 || xi >= long(W) || yi >= long(H)) continue;
            v += (i ? ax : 1 - ax) * (j ? ay : 1 - ay) * src[(ch * H + std::size_t(yi)) * W + std::size_t(xi)];
          }
        }
        dst[(ch * H + y) * W + x] = float(v);
      }
    }
  }
  LandmarkSet moved{{}, marks.spacing};
  for (const auto& p : marks.points) moved.points.push_back(forward(p.x, p.y));
  return {out, moved};
}

/// Stacks [C, H, W] images into a [B, C, H, W] batch.
inline Tensor<float> stack_images(const std::vector<Tensor<float>>& images) {
  const Shape one = images.at(0).shape();
  std::vector<float> data;
  data.reserve(images.size() * images[0].numel());
  for (const auto& t : images) data.insert(data.end(), t.data().begin(), t.data().end());
  return Tensor<float>({images.size(), one[0], one[1], one[2]}, std::move(data));
}

}  // namespace hyatt
