#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "hyatt/tensor.hpp"

namespace hyatt {

struct GradCheckOptions {
  double step = 1e-3;
  double tolerance = 1e-2;
  /// Denominator floor for the relative error, so that entries whose true
  /// gradient is ~0 are compared absolutely.
  double floor = 1e-6;
  /// 0 checks every element; otherwise a random sample of this many
  /// (input, element) pairs across all inputs.
  std::size_t sample = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  bool passed = false;
  std::string worst;  // "input[i] element j: analytic a numeric n"
};

/// Central finite differences against reverse-mode gradients. `loss_fn` must
/// be a pure function of the values in `inputs` and return a scalar.
template <class T>
GradCheckResult check_gradients(std::string name, const std::function<Tensor<T>()>& loss_fn, std::vector<Tensor<T>> inputs,
                                const GradCheckOptions& opt = {}) {
  GradCheckResult result;
  result.name = std::move(name);

  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.drop_grad();
  }
  {
    Tape<T> tape;
    Tensor<T> loss;
    {
      TapeGuard<T> guard(tape);
      loss = loss_fn();
    }
    tape.backward(loss);
  }

  std::vector<std::pair<std::size_t, std::size_t>> probes;
  if (opt.sample == 0) {
    for (std::size_t i = 0; i < inputs.size(); ++i)
      for (std::size_t j = 0; j < inputs[i].numel(); ++j) probes.emplace_back(i, j);
  } else {
    std::mt19937_64 rng(opt.seed);
    std::size_t total = 0;
    for (const auto& t : inputs) total += t.numel();
    std::uniform_int_distribution<std::size_t> pick(0, total - 1);
    for (std::size_t s = 0; s < opt.sample; ++s) {
      std::size_t flat = pick(rng);
      std::size_t i = 0;
      while (flat >= inputs[i].numel()) flat -= inputs[i++].numel();
      probes.emplace_back(i, flat);
    }
  }

  NoGradGuard<T> no_grad;
  auto eval = [&]() { return static_cast<double>(loss_fn().item()); };
  for (auto [i, j] : probes) {
    Tensor<T>& t = inputs[i];
    const double analytic = t.has_grad() ? static_cast<double>(t.grad()[j]) : 0.0;
    const T saved = t.data()[j];
    t.data()[j] = static_cast<T>(static_cast<double>(saved) + opt.step);
    const double hi = eval();
    t.data()[j] = static_cast<T>(static_cast<double>(saved) - opt.step);
    const double lo = eval();
    t.data()[j] = saved;
    const double numeric = (hi - lo) / (2.0 * opt.step);
    const double denom = std::max({std::abs(analytic), std::abs(numeric), opt.floor});
    const double rel = std::abs(analytic - numeric) / denom;
    ++result.checked;
    if (rel > result.max_rel_error || result.worst.empty()) {
      result.max_rel_error = std::max(rel, result.max_rel_error);
      if (rel >= result.max_rel_error) {
        result.worst = "input[" + std::to_string(i) + "] element " + std::to_string(j) +
                       ": analytic " + std::to_string(analytic) + " numeric " + std::to_string(numeric);
      }
    }
  }
  result.passed = result.max_rel_error < opt.tolerance;
  return result;
}

}  // namespace hyatt
