#pragma once

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "hyatt/checkpoint.hpp"
#include "hyatt/config.hpp"
#include "hyatt/dataset.hpp"
#include "hyatt/metrics.hpp"
#include "hyatt/network.hpp"
#include "hyatt/optimizer.hpp"

namespace hyatt {

/// Applies HYATT_SEED when set.
inline HyattConfig with_env_seed(HyattConfig cfg) {
  if (const char* s = std::getenv("HYATT_SEED")) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(s, &end, 10);
    if (end == s || *end != '\0') throw ConfigError("HYATT_SEED", std::string("not an unsigned integer: ") + s);
    cfg.seed = v;
  }
  return cfg;
}

inline void check_compatible(const HyattConfig& cfg, const Dataset& ds, const std::string& what) {
  if (ds.num_landmarks != cfg.num_landmarks) {
    throw ManifestError(what + ": manifest has " + std::to_string(ds.num_landmarks) + " landmarks, model expects " +
                        std::to_string(cfg.num_landmarks));
  }
  if (ds.height != cfg.height || ds.width != cfg.width) {
    throw ManifestError(what + ": target_size " + std::to_string(ds.height) + "x" + std::to_string(ds.width) +
                        " differs from model input_size " + std::to_string(cfg.height) + "x" + std::to_string(cfg.width));
  }
  if (ds.size() == 0) throw ManifestError(what + ": no samples");
}

struct EpochLog {
  std::size_t epoch = 0;  ///< 0 is the untrained model
  std::size_t iterations = 0;
  double loss = 0.0;
  std::optional<double> val_mre;
};

struct TrainResult {
  HyattNet<float> net;
  std::vector<double> step_losses;
  std::vector<EpochLog> epochs;

  std::string loss_csv() const {
    std::string out = "epoch,iterations,loss,val_mre\n";
    char buf[128];
    for (const auto& e : epochs) {
      std::snprintf(buf, sizeof buf, "%zu,%zu,%.9g,", e.epoch, e.iterations, e.loss);
      out += buf;
      if (e.val_mre) {
        std::snprintf(buf, sizeof buf, "%.6f", *e.val_mre);
        out += buf;
      }
      out += '\n';
    }
    return out;
  }

  /// Per-iteration losses with round-trip precision.
  std::string steps_csv() const {
    std::string out = "iteration,loss\n";
    char buf[64];
    for (std::size_t i = 0; i < step_losses.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%zu,%.17g\n", i + 1, step_losses[i]);
      out += buf;
    }
    return out;
  }
};

struct Batch {
  Tensor<float> images;
  std::vector<LandmarkSet> landmarks;
};

inline Batch make_batch(const Dataset& ds, const std::vector<std::size_t>& idx) {
  Batch b;
  std::vector<Tensor<float>> images;
  for (auto i : idx) {
    images.push_back(ds.samples[i].image);
    b.landmarks.push_back(ds.samples[i].landmarks);
  }
  b.images = stack_images(images);
  return b;
}

/// Mean combined loss over the dataset in consecutive batches, without
/// touching weights or normalization statistics.
inline double dataset_loss(const HyattNet<float>& net, const Dataset& ds, ForwardMode mode) {
  NoGradGuard<float> off;
  const auto& cfg = net.config();
  ForwardOptions<float> opt;
  opt.mode = {mode.training, false};
  double total = 0.0;
  std::size_t batches = 0;
  for (std::size_t start = 0; start < ds.size(); start += cfg.batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(ds.size(), start + cfg.batch_size); ++i) idx.push_back(i);
    const Batch b = make_batch(ds, idx);
    total += combined_loss(net.forward(b.images, opt), encode_targets<float>(b.landmarks, cfg.height, cfg.width, cfg.loss),
                           cfg.loss)
                 .item();
    ++batches;
  }
  return total / double(batches);
}

/// Predictions in original-image pixels for every sample.
inline std::vector<LandmarkSet> predict_dataset(const HyattNet<float>& net, const Dataset& ds) {
  std::vector<LandmarkSet> out;
  DecodeOptions dopt;
  dopt.quarter_pixel = net.config().quarter_pixel;
  for (std::size_t start = 0; start < ds.size(); start += net.config().batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(ds.size(), start + net.config().batch_size); ++i) idx.push_back(i);
    const auto preds = net.predict(make_batch(ds, idx).images, dopt);
    for (std::size_t k = 0; k < idx.size(); ++k) out.push_back(ds.samples[idx[k]].to_original(preds[k]));
  }
  return out;
}

inline EvalReport evaluate(const HyattNet<float>& net, const Dataset& ds, const std::vector<double>& thresholds) {
  check_compatible(net.config(), ds, "evaluate");
  std::vector<LandmarkSet> gts;
  for (const auto& s : ds.samples) gts.push_back(s.original);
  return make_report(predict_dataset(net, ds), gts, thresholds);
}

inline void write_report(const std::string& out_dir, const EvalReport& rep) {
  std::filesystem::create_directories(out_dir);
  const std::filesystem::path dir(out_dir);
  write_file((dir / "sdr.csv").string(), rep.csv());
  write_file((dir / "radial_errors.csv").string(), rep.per_point_csv());
  write_file((dir / "summary.txt").string(), rep.summary() + "\n");
}

using TrainProgress = std::function<void(const EpochLog&)>;

/// AdamW on combined_loss with batch-norm batch statistics. `iterations`
/// (when nonzero) overrides `epochs`; the last epoch may then be partial.
inline TrainResult train(const HyattConfig& cfg, const Dataset& train_set, const Dataset* val_set = nullptr,
                         const TrainProgress& progress = {}) {
  cfg.validate();
  check_compatible(cfg, train_set, "train");
  if (val_set) check_compatible(cfg, *val_set, "validation");

  TrainResult r{HyattNet<float>(cfg), {}, {}};
  HyattNet<float>& net = r.net;
  AdamW<float> opt(net.parameters().trainable(), cfg.optimizer);
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  ForwardOptions<float> fwd;
  fwd.mode = {true, true};

  auto validate_mre = [&]() -> std::optional<double> {
    if (!val_set) return std::nullopt;
    return evaluate(net, *val_set, cfg.sdr_thresholds).mre;
  };

  r.epochs.push_back({0, 0, dataset_loss(net, train_set, {true, false}), validate_mre()});
  if (progress) progress(r.epochs.back());

  const std::size_t per_epoch = (train_set.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = cfg.iterations ? cfg.iterations : cfg.epochs * per_epoch;
  std::vector<std::size_t> order(train_set.size());
  std::size_t step = 0;
  for (std::size_t epoch = 1; step < total; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t start = 0; start < order.size() && step < total; start += cfg.batch_size, ++step) {
      Batch b;
      std::vector<Tensor<float>> images;
      for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i) {
        const Sample& s = train_set.samples[order[i]];
        if (cfg.augment.enabled) {
          auto [img, marks] = augment(s.image, s.landmarks, cfg.augment, rng);
          images.push_back(img);
          b.landmarks.push_back(marks);
        } else {
          images.push_back(s.image);
          b.landmarks.push_back(s.landmarks);
        }
      }
      b.images = stack_images(images);
      const auto target = encode_targets<float>(b.landmarks, cfg.height, cfg.width, cfg.loss);
      net.parameters().zero_grad();
      Tape<float> tape;
      Tensor<float> loss;
      {
        TapeGuard<float> guard(tape);
        loss = combined_loss(net.forward(b.images, fwd), target, cfg.loss);
      }
      tape.backward(loss);
      opt.step();
      r.step_losses.push_back(loss.item());
      sum += r.step_losses.back();
      ++n;
    }
    r.epochs.push_back({epoch, step, sum / double(n), validate_mre()});
    if (progress) progress(r.epochs.back());
  }
  return r;
}

/// Writes checkpoint.hyatt, loss.csv, steps.csv and config.json into `out_dir`.
inline void write_training_outputs(const std::string& out_dir, const TrainResult& r) {
  std::filesystem::create_directories(out_dir);
  const std::filesystem::path dir(out_dir);
  save_checkpoint(r.net, (dir / "checkpoint.hyatt").string());
  write_file((dir / "loss.csv").string(), r.loss_csv());
  write_file((dir / "steps.csv").string(), r.steps_csv());
  write_file((dir / "config.json").string(), to_json(r.net.config()).dump(2) + "\n");
}

}  // namespace hyatt
