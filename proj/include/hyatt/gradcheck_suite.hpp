#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "hyatt/gradcheck.hpp"
#include "hyatt/heatmap.hpp"
#include "hyatt/network.hpp"
#include "hyatt/ops.hpp"
#include "hyatt/random.hpp"

namespace hyatt {

template <class T>
struct OpCase {
  std::string name;
  std::function<std::vector<Tensor<T>>(Rng&)> inputs;
  std::function<Tensor<T>(const std::vector<Tensor<T>>&)> op;
};

/// One case per differentiable primitive, with small random inputs.
template <class T>
std::vector<OpCase<T>> op_cases() {
  using V = std::vector<Tensor<T>>;
  auto u = [](Shape s, Rng& r, double lo = -1, double hi = 1) { return uniform_tensor<T>(std::move(s), r, lo, hi); };
  std::vector<OpCase<T>> cases;
  cases.push_back({"conv2d", [u](Rng& r) { return V{u({2, 4, 5, 5}, r), u({6, 2, 3, 3}, r), u({6}, r)}; },
                   [](const V& in) { return conv2d(in[0], in[1], in[2], {.stride = 2, .padding = 2, .dilation = 2, .groups = 2}); }});
  cases.push_back({"conv2d_depthwise", [u](Rng& r) { return V{u({1, 3, 6, 6}, r), u({3, 1, 5, 5}, r), u({3}, r)}; },
                   [](const V& in) { return conv2d(in[0], in[1], in[2], {.padding = 2, .groups = 3}); }});
  cases.push_back({"transposed_conv2d", [u](Rng& r) { return V{u({2, 3, 3, 3}, r), u({3, 2, 3, 3}, r), u({2}, r)}; },
                   [](const V& in) { return transposed_conv2d(in[0], in[1], in[2], 2, 1); }});
  cases.push_back({"softmax_lastdim", [u](Rng& r) { return V{u({3, 5}, r, -3, 3)}; },
                   [](const V& in) { return softmax_lastdim(in[0]); }});
  cases.push_back({"gather_rows", [u](Rng& r) { return V{u({4, 3}, r)}; },
                   [](const V& in) { return gather_rows(in[0], IndexMatrix{4, 2, {3, 1, 0, 0, 2, 3, 1, 2}}); }});
  const std::pair<PoolKind, const char*> pools[] = {{PoolKind::GlobalAvg, "pool_global_avg"},
                                                    {PoolKind::GlobalMax, "pool_global_max"},
                                                    {PoolKind::SpatialChannelAvg, "pool_channel_avg"},
                                                    {PoolKind::SpatialChannelMax, "pool_channel_max"}};
  for (auto [kind, name] : pools) {
    cases.push_back({name, [u](Rng& r) { return V{u({2, 3, 4, 4}, r)}; }, [kind](const V& in) { return pool(in[0], kind); }});
  }
  cases.push_back({"matmul_broadcast", [u](Rng& r) { return V{u({2, 1, 3, 4}, r), u({3, 5, 4}, r)}; },
                   [](const V& in) { return matmul(in[0], in[1], false, true); }});
  cases.push_back({"matmul_trans_a", [u](Rng& r) { return V{u({2, 4, 3}, r), u({2, 4, 5}, r)}; },
                   [](const V& in) { return matmul(in[0], in[1], true, false); }});
  cases.push_back({"matmul_trans_both", [u](Rng& r) { return V{u({4, 3}, r), u({2, 5, 4}, r)}; },
                   [](const V& in) { return matmul(in[0], in[1], true, true); }});
  cases.push_back({"add_broadcast", [u](Rng& r) { return V{u({2, 3, 4}, r), u({3, 1}, r)}; },
                   [](const V& in) { return add(in[0], in[1]); }});
  cases.push_back({"mul_broadcast", [u](Rng& r) { return V{u({2, 3, 2, 2}, r), u({2, 3, 1, 1}, r)}; },
                   [](const V& in) { return mul(in[0], in[1]); }});
  cases.push_back({"sub", [u](Rng& r) { return V{u({4}, r), u({4}, r)}; }, [](const V& in) { return sub(in[0], in[1]); }});
  cases.push_back({"relu", [u](Rng& r) { return V{u({3, 4}, r)}; }, [](const V& in) { return relu(in[0]); }});
  cases.push_back({"gelu", [u](Rng& r) { return V{u({3, 4}, r, -3, 3)}; }, [](const V& in) { return gelu(in[0]); }});
  cases.push_back({"sigmoid", [u](Rng& r) { return V{u({3, 4}, r, -3, 3)}; }, [](const V& in) { return sigmoid(in[0]); }});
  cases.push_back({"layer_norm_channels", [u](Rng& r) { return V{u({2, 5, 3, 2}, r), u({5}, r), u({5}, r)}; },
                   [](const V& in) { return layer_norm_channels(in[0], in[1], in[2]); }});
  cases.push_back({"batch_norm2d_train", [u](Rng& r) { return V{u({3, 4, 2, 3}, r), u({4}, r), u({4}, r)}; },
                   [](const V& in) {
                     return batch_norm2d(in[0], in[1], in[2], Tensor<T>::zeros({4}), Tensor<T>::ones({4}), true, T(0.1), T(1e-5),
                                         false);
                   }});
  cases.push_back({"batch_norm2d_eval", [u](Rng& r) { return V{u({2, 4, 2, 3}, r), u({4}, r), u({4}, r)}; },
                   [](const V& in) {
                     return batch_norm2d(in[0], in[1], in[2], Tensor<T>({4}, {0.1, -0.2, 0.3, 0.0}), Tensor<T>({4}, {1.5, 0.5, 2.0, 1.0}),
                                         false);
                   }});
  cases.push_back({"linear", [u](Rng& r) { return V{u({2, 3, 4}, r), u({5, 4}, r), u({5}, r)}; },
                   [](const V& in) { return linear(in[0], in[1], in[2]); }});
  cases.push_back({"bilinear_up", [u](Rng& r) { return V{u({1, 2, 3, 4}, r)}; },
                   [](const V& in) { return bilinear_resize(in[0], 7, 9); }});
  cases.push_back({"bilinear_down", [u](Rng& r) { return V{u({1, 2, 8, 6}, r)}; },
                   [](const V& in) { return bilinear_resize(in[0], 3, 4); }});
  cases.push_back({"concat_channels", [u](Rng& r) { return V{u({2, 1, 2, 3}, r), u({2, 3, 2, 3}, r)}; },
                   [](const V& in) { return concat_channels(V{in[0], in[1]}); }});
  cases.push_back({"permute", [u](Rng& r) { return V{u({2, 3, 4}, r)}; }, [](const V& in) { return permute(in[0], {2, 0, 1}); }});
  cases.push_back({"broadcast_to", [u](Rng& r) { return V{u({2, 3, 1, 1}, r)}; },
                   [](const V& in) { return broadcast_to(in[0], {2, 3, 2, 2}); }});
  cases.push_back({"scale", [u](Rng& r) { return V{u({5}, r)}; }, [](const V& in) { return scale(in[0], T(-1.5)); }});
  cases.push_back({"mean", [u](Rng& r) { return V{u({3, 4}, r)}; }, [](const V& in) { return mean(in[0]); }});
  cases.push_back({"mse_loss", [u](Rng& r) { return V{u({3, 4}, r), u({3, 4}, r)}; },
                   [](const V& in) { return mse_loss(in[0], in[1]); }});
  return cases;
}

/// Checks one case on loss = sum(op(inputs) * w) with w ~ U(0.5, 1.5).
template <class T>
GradCheckResult run_op_case(const OpCase<T>& c, std::uint64_t seed, const GradCheckOptions& opt) {
  Rng rng(seed);
  auto inputs = c.inputs(rng);
  Tensor<T> probe;
  {
    NoGradGuard<T> ng;
    probe = c.op(inputs);
  }
  auto weights = uniform_tensor<T>(probe.shape(), rng, 0.5, 1.5);
  std::function<Tensor<T>()> loss = [&]() { return sum(mul(c.op(inputs), weights)); };
  return check_gradients<T>(c.name, loss, inputs, opt);
}

/// Tolerances used for the op suite at each precision.
inline GradCheckOptions op_check_options(bool extended) {
  GradCheckOptions opt;
  if (extended) {
    opt.step = 1e-5;
    opt.tolerance = 1e-5;
  } else {
    opt.step = 1e-3;
    opt.tolerance = 1e-2;
    // float rounding of an O(10) loss leaves ~1e-3 noise in the difference quotient
    opt.floor = 1.0;
  }
  return opt;
}

/// Every op case over `seeds` draws; the worst result per case.
template <class T>
std::vector<GradCheckResult> op_gradcheck_suite(const GradCheckOptions& opt, std::size_t seeds = 5) {
  std::vector<GradCheckResult> out;
  for (const auto& c : op_cases<T>()) {
    GradCheckResult worst;
    std::size_t checked = 0;
    for (std::uint64_t s = 1; s <= seeds; ++s) {
      auto r = run_op_case<T>(c, s * 7919 + 13, opt);
      checked += r.checked;
      if (s == 1 || r.max_rel_error > worst.max_rel_error) worst = r;
    }
    worst.checked = checked;
    worst.passed = worst.max_rel_error < opt.tolerance;
    out.push_back(std::move(worst));
  }
  return out;
}

// ------------------------------------------------------------------ network

struct NetworkProbe {
  std::string parameter;
  std::size_t element = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct NetworkGradCheckOptions {
  std::size_t samples = 24;
  std::uint64_t seed = 0;
  std::size_t batch = 2;
  double step = 1e-5;
  double tolerance = 1e-2;
};

struct NetworkGradCheckResult {
  double loss = 0.0;
  double floor = 0.0;
  double max_rel_error = 0.0;
  std::vector<NetworkProbe> probes;
  bool passed = false;
};

/// Float reverse-mode gradients of combined_loss for a random subset of
/// parameters, against central differences taken on a double-precision copy
/// of the same weights. Batch norm runs on running statistics. Errors are
/// relative to max(|a|, |n|, eps_float * |loss|).
inline NetworkGradCheckResult network_gradcheck(const HyattConfig& cfg, const NetworkGradCheckOptions& opt = {}) {
  HyattNet<float> net(cfg);
  HyattNet<double> ref(cfg);
  const auto& src = net.parameters().entries();
  const auto& dst = ref.parameters().entries();
  for (std::size_t i = 0; i < src.size(); ++i) {
    Tensor<double> d = dst[i].tensor;
    for (std::size_t j = 0; j < d.numel(); ++j) d.data()[j] = src[i].tensor.data()[j];
  }

  Rng rng(opt.seed);
  const auto image = uniform_tensor<float>({opt.batch, cfg.in_channels, cfg.height, cfg.width}, rng, 0.0, 1.0);
  const auto image_d = image.cast<double>();
  std::uniform_real_distribution<double> ux(0.0, double(cfg.width - 1)), uy(0.0, double(cfg.height - 1));
  std::vector<LandmarkSet> marks(opt.batch);
  for (auto& m : marks) {
    for (std::size_t n = 0; n < cfg.num_landmarks; ++n) m.points.push_back({std::round(ux(rng)), std::round(uy(rng))});
  }
  const auto target = encode_targets<float>(marks, cfg.height, cfg.width, cfg.loss);
  const auto target_d = encode_targets<double>(marks, cfg.height, cfg.width, cfg.loss);
  ForwardOptions<float> fo;
  fo.mode = {false, false};
  ForwardOptions<double> fo_d;
  fo_d.mode = {false, false};

  NetworkGradCheckResult result;
  net.parameters().zero_grad();
  {
    Tape<float> tape;
    Tensor<float> loss;
    {
      TapeGuard<float> guard(tape);
      loss = combined_loss(net.forward(image, fo), target, cfg.loss);
    }
    tape.backward(loss);
    result.loss = loss.item();
  }
  result.floor = std::numeric_limits<float>::epsilon() * std::abs(result.loss);

  const auto trainable = net.parameters().trainable();
  auto trainable_d = ref.parameters().trainable();
  std::vector<std::string> names;
  for (const auto& e : src) {
    if (e.trainable) names.push_back(e.name);
  }
  std::size_t total = 0;
  for (const auto& t : trainable) total += t.numel();
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);

  NoGradGuard<double> off;
  auto eval = [&] { return combined_loss(ref.forward(image_d, fo_d), target_d, cfg.loss).item(); };
  for (std::size_t s = 0; s < opt.samples; ++s) {
    std::size_t flat = pick(rng), t = 0;
    while (flat >= trainable[t].numel()) flat -= trainable[t++].numel();
    NetworkProbe p;
    p.parameter = names[t];
    p.element = flat;
    p.analytic = trainable[t].has_grad() ? trainable[t].grad()[flat] : 0.0;
    double& w = trainable_d[t].data()[flat];
    const double saved = w;
    w = saved + opt.step;
    const double hi = eval();
    w = saved - opt.step;
    const double lo = eval();
    w = saved;
    p.numeric = (hi - lo) / (2 * opt.step);
    p.rel_error = std::abs(p.analytic - p.numeric) / std::max({std::abs(p.analytic), std::abs(p.numeric), result.floor});
    result.max_rel_error = std::max(result.max_rel_error, p.rel_error);
    result.probes.push_back(std::move(p));
  }
  result.passed = result.max_rel_error < opt.tolerance;
  return result;
}

}  // namespace hyatt
