#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "hyatt/config.hpp"
#include "hyatt/manifest.hpp"
#include "hyatt/png_io.hpp"

namespace hyatt {

/// Parameters of the synthetic "anatomy": an outer ellipse, a nested inner
/// ellipse and a curved ridge. Landmarks, in order:
///   0 outer right extreme, 1 outer top, 2 inner left, 3 inner bottom,
///   4 ridge start, 5 ridge end, 6 outer left, 7 outer bottom.
struct SyntheticSpec {
  static constexpr std::size_t kMaxLandmarks = 8;

  std::size_t count = 8;
  std::size_t height = 128;
  std::size_t width = 128;
  std::size_t num_landmarks = 4;
  std::array<double, 2> outer_axis{0.45, 0.8};   ///< semi-axis as a fraction of the half side
  std::array<double, 2> inner_ratio{0.35, 0.6};  ///< inner semi-axes relative to outer
  double ridge_width = 1.5;                      ///< pixels
  double noise = 0.02;                           ///< Gaussian sigma, intensity units
  std::optional<double> spacing_mm;
  std::uint64_t seed = 0;

  void validate() const {
    if (count == 0) throw ConfigError("count", "must be positive");
    if (height < 16 || width < 16) throw ConfigError("size", "must be at least 16x16");
    if (num_landmarks == 0 || num_landmarks > kMaxLandmarks) throw ConfigError("num_landmarks", "must lie in [1, 8]");
    if (!(outer_axis[0] > 0 && outer_axis[0] <= outer_axis[1] && outer_axis[1] < 1)) {
      throw ConfigError("outer_axis", "need 0 < lo <= hi < 1");
    }
    if (!(inner_ratio[0] > 0 && inner_ratio[0] <= inner_ratio[1] && inner_ratio[1] < 1)) {
      throw ConfigError("inner_ratio", "need 0 < lo <= hi < 1");
    }
    if (!(ridge_width > 0)) throw ConfigError("ridge_width", "must be positive");
    if (!(noise >= 0)) throw ConfigError("noise", "must be non-negative");
    if (spacing_mm && !(*spacing_mm > 0)) throw ConfigError("spacing_mm", "must be positive");
  }
};

inline SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j) {
  using detail::read_field;
  if (!j.is_object()) throw ConfigError("<root>", "expected a JSON object");
  detail::reject_unknown(j, {"count", "size", "num_landmarks", "outer_axis", "inner_ratio", "ridge_width", "noise", "spacing_mm", "seed"}, "");
  SyntheticSpec s;
  read_field(j, "count", s.count);
  if (j.contains("size")) {
    if (j.at("size").is_array()) {
      std::array<std::size_t, 2> hw{};
      read_field(j, "size", hw);
      s.height = hw[0];
      s.width = hw[1];
    } else {
      read_field(j, "size", s.height);
      s.width = s.height;
    }
  }
  read_field(j, "num_landmarks", s.num_landmarks);
  read_field(j, "outer_axis", s.outer_axis);
  read_field(j, "inner_ratio", s.inner_ratio);
  read_field(j, "ridge_width", s.ridge_width);
  read_field(j, "noise", s.noise);
  if (j.contains("spacing_mm") && !j.at("spacing_mm").is_null()) {
    double v = 0;
    read_field(j, "spacing_mm", v);
    s.spacing_mm = v;
  }
  read_field(j, "seed", s.seed);
  s.validate();
  return s;
}

/// Integer-valued geometry of one synthetic figure.
struct SyntheticFigure {
  double cx, cy, a, b;      ///< outer ellipse
  double icx, icy, ia, ib;  ///< inner ellipse
  std::array<Point, 3> ridge;  ///< quadratic Bezier start, control, end

  std::vector<Point> landmarks(std::size_t n) const {
    const std::array<Point, SyntheticSpec::kMaxLandmarks> all{
        Point{cx + a, cy}, Point{cx, cy - b},  Point{icx - ia, icy}, Point{icx, icy + ib},
        ridge[0],          ridge[2],           Point{cx - a, cy},    Point{cx, cy + b}};
    return {all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n)};
  }
};

inline SyntheticFigure sample_figure(const SyntheticSpec& spec, std::mt19937_64& rng) {
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  const double W = double(spec.width), H = double(spec.height);
  SyntheticFigure f{};
  const double max_a = std::floor((W - 5) / 2), max_b = std::floor((H - 5) / 2);
  f.a = std::clamp(std::round(uni(spec.outer_axis[0], spec.outer_axis[1]) * W / 2), 3.0, max_a);
  f.b = std::clamp(std::round(uni(spec.outer_axis[0], spec.outer_axis[1]) * H / 2), 3.0, max_b);
  f.cx = std::round(uni(f.a + 2, W - 3 - f.a));
  f.cy = std::round(uni(f.b + 2, H - 3 - f.b));
  const double r = uni(spec.inner_ratio[0], spec.inner_ratio[1]);
  f.ia = std::max(1.0, std::round(r * f.a));
  f.ib = std::max(1.0, std::round(r * f.b));
  f.icx = f.cx + std::round(uni(-0.3, 0.3) * (f.a - f.ia));
  f.icy = f.cy + std::round(uni(-0.3, 0.3) * (f.b - f.ib));
  for (auto& p : f.ridge) p = {f.cx + std::round(uni(-0.6, 0.6) * f.a), f.cy + std::round(uni(-0.6, 0.6) * f.b)};
  return f;
}

inline GrayImage render_figure(const SyntheticFigure& f, const SyntheticSpec& spec, std::mt19937_64& rng) {
  GrayImage img{spec.height, spec.width, std::vector<float>(spec.height * spec.width)};
  constexpr int kRidgeSamples = 96;
  std::array<Point, kRidgeSamples + 1> curve;
  for (int i = 0; i <= kRidgeSamples; ++i) {
    const double t = double(i) / kRidgeSamples, u = 1 - t;
    curve[i] = {u * u * f.ridge[0].x + 2 * u * t * f.ridge[1].x + t * t * f.ridge[2].x,
                u * u * f.ridge[0].y + 2 * u * t * f.ridge[1].y + t * t * f.ridge[2].y};
  }
  // signed radial distance to an ellipse outline, in pixels along the shorter axis
  auto edge = [](double x, double y, double cx, double cy, double a, double b) {
    return (std::hypot((x - cx) / a, (y - cy) / b) - 1.0) * std::min(a, b);
  };
  auto inside = [](double d) { return 1.0 / (1.0 + std::exp(d)); };
  auto rim = [](double d) { return std::exp(-0.5 * d * d); };
  const double w2 = 2 * spec.ridge_width * spec.ridge_width;
  std::normal_distribution<double> noise(0.0, spec.noise > 0 ? spec.noise : 1.0);
  for (std::size_t y = 0; y < spec.height; ++y) {
    for (std::size_t x = 0; x < spec.width; ++x) {
      const double px = double(x), py = double(y);
      const double d_out = edge(px, py, f.cx, f.cy, f.a, f.b), d_in = edge(px, py, f.icx, f.icy, f.ia, f.ib);
      double ridge2 = 1e30;
      for (std::size_t i = 0; i + 1 < curve.size(); ++i) {
        const double vx = curve[i + 1].x - curve[i].x, vy = curve[i + 1].y - curve[i].y;
        const double len2 = vx * vx + vy * vy;
        const double t = len2 > 0 ? std::clamp(((px - curve[i].x) * vx + (py - curve[i].y) * vy) / len2, 0.0, 1.0) : 0.0;
        const double dx = px - curve[i].x - t * vx, dy = py - curve[i].y - t * vy;
        ridge2 = std::min(ridge2, dx * dx + dy * dy);
      }
      double v = 0.1 + 0.2 * inside(d_out) + 0.15 * inside(d_in) + 0.3 * rim(d_out) + 0.3 * rim(d_in) + 0.35 * std::exp(-ridge2 / w2);
      if (spec.noise > 0) v += noise(rng);
      img.at(y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return img;
}

/// Writes img_XXXX.png files plus manifest.json into `out_dir`.
inline DatasetManifest generate_synthetic(const SyntheticSpec& spec, const std::string& out_dir) {
  spec.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir)) throw ImageError("cannot create output directory " + out_dir);
  std::mt19937_64 rng(spec.seed);
  DatasetManifest m;
  m.num_landmarks = spec.num_landmarks;
  m.target_size = {spec.height, spec.width};
  for (std::size_t i = 0; i < spec.count; ++i) {
    const SyntheticFigure fig = sample_figure(spec, rng);
    char name[32];
    std::snprintf(name, sizeof name, "img_%04zu.png", i);
    write_png((std::filesystem::path(out_dir) / name).string(), render_figure(fig, spec, rng));
    m.samples.push_back({name, fig.landmarks(spec.num_landmarks), spec.spacing_mm});
  }
  write_manifest((std::filesystem::path(out_dir) / "manifest.json").string(), m);
  return m;
}

}  // namespace hyatt
