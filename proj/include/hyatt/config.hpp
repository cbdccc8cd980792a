#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "hyatt/bra.hpp"
#include "hyatt/heatmap.hpp"

namespace hyatt {

/// Raised for invalid configuration; `field()` names the offending key.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string field, const std::string& detail)
      : std::invalid_argument("config: " + field + ": " + detail), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

struct OptimizerConfig {
  double lr = 4e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AugmentConfig {
  bool enabled = false;
  double shift = 0.05;      ///< fraction of image size
  double scale = 0.05;      ///< relative
  double rotation = 5.0;    ///< degrees
};

/// Architecture plus training hyperparameters.
struct HyattConfig {
  static constexpr std::size_t kStages = 5;
  using PerStage = std::array<std::size_t, kStages>;

  std::size_t height = 128;
  std::size_t width = 128;
  std::size_t in_channels = 1;
  std::size_t num_landmarks = 4;

  PerStage stage_dims{16, 32, 64, 96, 128};
  PerStage region_grid{4, 4, 2, 2, 1};
  PerStage topk{4, 8, 2, 4, 1};
  PerStage heads{1, 2, 2, 4, 4};
  std::size_t mlp_ratio = 3;
  std::size_t cbam_reduction = 4;

  std::size_t decoder_dim = 256;
  std::size_t head_dim = 64;
  std::size_t ffcm_stem_dim = 8;
  std::size_t ffcm_context_dim = 32;
  std::size_t ffcm_dim = 32;

  LossConfig loss;
  OptimizerConfig optimizer;
  AugmentConfig augment;

  std::size_t epochs = 150;
  std::size_t iterations = 0;  ///< when nonzero, overrides epochs
  std::size_t batch_size = 2;
  std::uint64_t seed = 0;

  std::string train_manifest;
  std::string val_manifest;
  std::vector<double> sdr_thresholds{2.0, 2.5, 3.0, 4.0};
  bool quarter_pixel = false;

  /// Feature-map side of stage i (0-based): input / (4 * 2^i).
  std::size_t stage_height(std::size_t i) const { return height / (std::size_t{4} << i); }
  std::size_t stage_width(std::size_t i) const { return width / (std::size_t{4} << i); }

  BraConfig bra(std::size_t i) const { return {region_grid[i], topk[i], heads[i], stage_dims[i], 5}; }

  void validate() const {
    auto positive = [](const char* name, std::size_t v) {
      if (v == 0) throw ConfigError(name, "must be positive");
    };
    positive("input_size", height);
    positive("input_size", width);
    positive("in_channels", in_channels);
    positive("num_landmarks", num_landmarks);
    positive("mlp_ratio", mlp_ratio);
    positive("decoder_dim", decoder_dim);
    positive("head_dim", head_dim);
    positive("ffcm_stem_dim", ffcm_stem_dim);
    positive("ffcm_context_dim", ffcm_context_dim);
    positive("ffcm_dim", ffcm_dim);
    positive("batch_size", batch_size);
    if (height % 64 != 0 || width % 64 != 0) {
      throw ConfigError("input_size", "H and W must be divisible by 64 (patch embed x4, four stride-2 stages), got " +
                                          std::to_string(height) + "x" + std::to_string(width));
    }
    for (std::size_t i = 0; i < kStages; ++i) {
      const std::string tag = "[" + std::to_string(i) + "]";
      if (stage_dims[i] == 0) throw ConfigError("stage_dims" + tag, "must be positive");
      if (region_grid[i] == 0) throw ConfigError("stage_region_grid" + tag, "must be positive");
      if (heads[i] == 0 || stage_dims[i] % heads[i] != 0) {
        throw ConfigError("heads" + tag, "must divide stage_dims" + tag + "=" + std::to_string(stage_dims[i]));
      }
      if (topk[i] == 0 || topk[i] > region_grid[i] * region_grid[i]) {
        throw ConfigError("stage_topk" + tag, "must lie in [1, S^2=" + std::to_string(region_grid[i] * region_grid[i]) + "]");
      }
      if (stage_height(i) % region_grid[i] != 0 || stage_width(i) % region_grid[i] != 0) {
        throw ConfigError("stage_region_grid" + tag, "feature map " + std::to_string(stage_height(i)) + "x" +
                                                         std::to_string(stage_width(i)) + " not divisible by S=" +
                                                         std::to_string(region_grid[i]));
      }
      if (cbam_reduction == 0 || stage_dims[i] % cbam_reduction != 0) {
        throw ConfigError("cbam_reduction", "must divide stage_dims" + tag + "=" + std::to_string(stage_dims[i]));
      }
    }
    if (!(loss.sigma1 > 0 && loss.sigma2 > 0 && loss.sigma3 > 0)) throw ConfigError("sigma", "must be positive");
    if (!(optimizer.lr > 0)) throw ConfigError("optimizer.lr", "must be positive");
    if (optimizer.weight_decay < 0) throw ConfigError("optimizer.weight_decay", "must be non-negative");
    if (!(optimizer.beta1 >= 0 && optimizer.beta1 < 1 && optimizer.beta2 >= 0 && optimizer.beta2 < 1)) {
      throw ConfigError("optimizer.betas", "must lie in [0, 1)");
    }
    if (!(optimizer.eps > 0)) throw ConfigError("optimizer.eps", "must be positive");
    for (std::size_t i = 0; i < sdr_thresholds.size(); ++i) {
      if (!(sdr_thresholds[i] > 0) || (i && sdr_thresholds[i] <= sdr_thresholds[i - 1])) {
        throw ConfigError("sdr_thresholds", "must be positive and ascending");
      }
    }
  }
};

inline nlohmann::json to_json(const HyattConfig& c) {
  using nlohmann::json;
  json j;
  j["input_size"] = {c.height, c.width};
  j["in_channels"] = c.in_channels;
  j["num_landmarks"] = c.num_landmarks;
  j["stage_dims"] = c.stage_dims;
  j["stage_region_grid"] = c.region_grid;
  j["stage_topk"] = c.topk;
  j["heads"] = c.heads;
  j["mlp_ratio"] = c.mlp_ratio;
  j["cbam_reduction"] = c.cbam_reduction;
  j["decoder_dim"] = c.decoder_dim;
  j["head_dim"] = c.head_dim;
  j["ffcm_stem_dim"] = c.ffcm_stem_dim;
  j["ffcm_context_dim"] = c.ffcm_context_dim;
  j["ffcm_dim"] = c.ffcm_dim;
  j["sigma"] = {c.loss.sigma1, c.loss.sigma2, c.loss.sigma3};
  j["loss_weights"] = {c.loss.w1, c.loss.w2, c.loss.w3};
  j["peak_normalize"] = c.loss.peak_normalize;
  j["optimizer"] = {{"name", "adamw"},
                    {"lr", c.optimizer.lr},
                    {"weight_decay", c.optimizer.weight_decay},
                    {"betas", {c.optimizer.beta1, c.optimizer.beta2}},
                    {"eps", c.optimizer.eps}};
  j["augment"] = {{"enabled", c.augment.enabled},
                  {"shift", c.augment.shift},
                  {"scale", c.augment.scale},
                  {"rotation", c.augment.rotation}};
  j["epochs"] = c.epochs;
  j["iterations"] = c.iterations;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["train_manifest"] = c.train_manifest;
  j["val_manifest"] = c.val_manifest;
  j["sdr_thresholds"] = c.sdr_thresholds;
  j["quarter_pixel"] = c.quarter_pixel;
  return j;
}

namespace detail {

template <class V>
void read_field(const nlohmann::json& j, const char* key, V& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(key, std::string("wrong type: ") + e.what());
  }
}

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) throw ConfigError(where + it.key(), "unknown key");
  }
}

}  // namespace detail

/// Missing keys keep their defaults; unknown keys are rejected.
inline HyattConfig config_from_json(const nlohmann::json& j) {
  using detail::read_field;
  if (!j.is_object()) throw ConfigError("<root>", "expected a JSON object");
  detail::reject_unknown(j,
                         {"input_size", "in_channels", "num_landmarks", "stage_dims", "stage_region_grid", "stage_topk",
                          "heads", "mlp_ratio", "cbam_reduction", "decoder_dim", "head_dim", "ffcm_stem_dim",
                          "ffcm_context_dim", "ffcm_dim", "sigma", "loss_weights", "peak_normalize", "optimizer",
                          "augment", "epochs", "iterations", "batch_size", "seed", "train_manifest", "val_manifest",
                          "sdr_thresholds", "quarter_pixel"},
                         "");
  HyattConfig c;
  std::array<std::size_t, 2> size{c.height, c.width};
  read_field(j, "input_size", size);
  c.height = size[0];
  c.width = size[1];
  read_field(j, "in_channels", c.in_channels);
  read_field(j, "num_landmarks", c.num_landmarks);
  read_field(j, "stage_dims", c.stage_dims);
  read_field(j, "stage_region_grid", c.region_grid);
  read_field(j, "stage_topk", c.topk);
  read_field(j, "heads", c.heads);
  read_field(j, "mlp_ratio", c.mlp_ratio);
  read_field(j, "cbam_reduction", c.cbam_reduction);
  read_field(j, "decoder_dim", c.decoder_dim);
  read_field(j, "head_dim", c.head_dim);
  read_field(j, "ffcm_stem_dim", c.ffcm_stem_dim);
  read_field(j, "ffcm_context_dim", c.ffcm_context_dim);
  read_field(j, "ffcm_dim", c.ffcm_dim);
  std::array<double, 3> sigma{c.loss.sigma1, c.loss.sigma2, c.loss.sigma3};
  read_field(j, "sigma", sigma);
  std::tie(c.loss.sigma1, c.loss.sigma2, c.loss.sigma3) = std::tuple(sigma[0], sigma[1], sigma[2]);
  std::array<double, 3> weights{c.loss.w1, c.loss.w2, c.loss.w3};
  read_field(j, "loss_weights", weights);
  std::tie(c.loss.w1, c.loss.w2, c.loss.w3) = std::tuple(weights[0], weights[1], weights[2]);
  read_field(j, "peak_normalize", c.loss.peak_normalize);
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    if (!o.is_object()) throw ConfigError("optimizer", "expected an object");
    detail::reject_unknown(o, {"name", "lr", "weight_decay", "betas", "eps"}, "optimizer.");
    std::string name = "adamw";
    read_field(o, "name", name);
    if (name != "adamw") throw ConfigError("optimizer.name", "only \"adamw\" is supported, got \"" + name + "\"");
    read_field(o, "lr", c.optimizer.lr);
    read_field(o, "weight_decay", c.optimizer.weight_decay);
    std::array<double, 2> betas{c.optimizer.beta1, c.optimizer.beta2};
    read_field(o, "betas", betas);
    c.optimizer.beta1 = betas[0];
    c.optimizer.beta2 = betas[1];
    read_field(o, "eps", c.optimizer.eps);
  }
  if (j.contains("augment")) {
    const auto& a = j.at("augment");
    if (!a.is_object()) throw ConfigError("augment", "expected an object");
    detail::reject_unknown(a, {"enabled", "shift", "scale", "rotation"}, "augment.");
    read_field(a, "enabled", c.augment.enabled);
    read_field(a, "shift", c.augment.shift);
    read_field(a, "scale", c.augment.scale);
    read_field(a, "rotation", c.augment.rotation);
  }
  read_field(j, "epochs", c.epochs);
  read_field(j, "iterations", c.iterations);
  read_field(j, "batch_size", c.batch_size);
  read_field(j, "seed", c.seed);
  read_field(j, "train_manifest", c.train_manifest);
  read_field(j, "val_manifest", c.val_manifest);
  read_field(j, "sdr_thresholds", c.sdr_thresholds);
  read_field(j, "quarter_pixel", c.quarter_pixel);
  c.validate();
  return c;
}

inline HyattConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("<file>", "cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("<file>", std::string("invalid JSON in ") + path + ": " + e.what());
  }
  return config_from_json(j);
}

}  // namespace hyatt
