#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "hyatt/heatmap.hpp"

namespace hyatt {

struct RadialErrors {
  double mre = 0.0;
  double std = 0.0;  ///< population standard deviation
  std::vector<double> radial;
  std::string unit;  ///< "mm" when spacing is known, otherwise "px"
};

namespace detail {

inline std::string unit_of(const LandmarkSet& pred, const LandmarkSet& gt) {
  if (pred.spacing.has_value() != gt.spacing.has_value()) {
    throw std::invalid_argument("mre: spacing present on only one landmark set");
  }
  if (pred.spacing && *pred.spacing != *gt.spacing) {
    throw std::invalid_argument("mre: spacing mismatch (" + std::to_string(*pred.spacing) + " vs " +
                                std::to_string(*gt.spacing) + ")");
  }
  return gt.spacing ? "mm" : "px";
}

inline std::pair<double, double> mean_and_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double s = 0.0;
  for (double r : v) s += r;
  const double m = s / double(v.size());
  double q = 0.0;
  for (double r : v) q += (r - m) * (r - m);
  return {m, std::sqrt(q / double(v.size()))};
}

}  // namespace detail

/// Radial error per landmark, scaled to mm when spacing is present.
inline RadialErrors mre(const LandmarkSet& pred, const LandmarkSet& gt) {
  if (pred.size() != gt.size()) {
    throw DimensionError("mre", "landmarks", std::to_string(pred.size()) + " predicted vs " + std::to_string(gt.size()));
  }
  RadialErrors out;
  out.unit = detail::unit_of(pred, gt);
  const double s = gt.spacing.value_or(1.0);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const double dx = pred.points[i].x - gt.points[i].x, dy = pred.points[i].y - gt.points[i].y;
    out.radial.push_back(std::sqrt(dx * dx + dy * dy) * s);
  }
  std::tie(out.mre, out.std) = detail::mean_and_std(out.radial);
  return out;
}

/// Percentage of errors strictly below each threshold.
inline std::vector<double> sdr(const std::vector<double>& radial, const std::vector<double>& thresholds) {
  for (std::size_t i = 0; i < thresholds.size(); ++i) {
    if (!(thresholds[i] > 0.0)) throw std::invalid_argument("sdr: thresholds must be positive");
    if (i && thresholds[i] <= thresholds[i - 1]) throw std::invalid_argument("sdr: thresholds must be ascending");
  }
  std::vector<double> out;
  for (double z : thresholds) {
    std::size_t hit = 0;
    for (double r : radial)
      if (r < z) ++hit;
    out.push_back(radial.empty() ? 0.0 : 100.0 * double(hit) / double(radial.size()));
  }
  return out;
}

/// Aggregate metrics over every (sample, landmark) radial error.
struct EvalReport {
  double mre = 0.0;
  double std = 0.0;
  std::string unit = "px";
  std::size_t num_landmarks = 0;
  std::size_t num_samples = 0;
  std::vector<double> thresholds;
  std::vector<double> sdr_percent;
  std::vector<std::vector<double>> per_sample;  ///< [sample][landmark] radial errors

  std::string csv() const {
    std::ostringstream os;
    os << "threshold,sdr_percent\n";
    char buf[64];
    for (std::size_t i = 0; i < thresholds.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%g,%.6f\n", thresholds[i], sdr_percent[i]);
      os << buf;
    }
    return os.str();
  }

  /// Radial errors, one row per sample.
  std::string per_point_csv() const {
    std::ostringstream os;
    os << "sample";
    for (std::size_t j = 0; j < num_landmarks; ++j) os << ",r" << j;
    os << '\n';
    char buf[64];
    for (std::size_t s = 0; s < per_sample.size(); ++s) {
      os << s;
      for (double r : per_sample[s]) {
        std::snprintf(buf, sizeof buf, ",%.6f", r);
        os << buf;
      }
      os << '\n';
    }
    return os.str();
  }

  std::string summary() const {
    char buf[160];
    std::snprintf(buf, sizeof buf, "mre=%.6f std=%.6f n_landmarks=%zu n_samples=%zu unit=%s", mre, std, num_landmarks,
                  num_samples, unit.c_str());
    return buf;
  }
};

inline EvalReport make_report(const std::vector<LandmarkSet>& preds, const std::vector<LandmarkSet>& gts,
                              const std::vector<double>& thresholds) {
  if (preds.size() != gts.size()) throw std::invalid_argument("make_report: prediction and ground-truth counts differ");
  if (gts.empty()) throw std::invalid_argument("make_report: no samples");
  EvalReport rep;
  rep.num_samples = gts.size();
  rep.num_landmarks = gts.front().size();
  rep.thresholds = thresholds;
  std::vector<double> all;
  for (std::size_t s = 0; s < gts.size(); ++s) {
    auto r = mre(preds[s], gts[s]);
    if (s == 0) rep.unit = r.unit;
    if (r.unit != rep.unit) throw std::invalid_argument("make_report: samples mix mm and px units");
    all.insert(all.end(), r.radial.begin(), r.radial.end());
    rep.per_sample.push_back(std::move(r.radial));
  }
  std::tie(rep.mre, rep.std) = detail::mean_and_std(all);
  rep.sdr_percent = sdr(all, thresholds);
  return rep;
}

}  // namespace hyatt
