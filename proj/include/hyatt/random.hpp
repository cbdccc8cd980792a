#pragma once

#include <cstdint>
#include <random>

#include "hyatt/tensor.hpp"

namespace hyatt {

using Rng = std::mt19937_64;

template <class T>
Tensor<T> uniform_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (T& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

template <class T>
Tensor<T> normal_tensor(Shape shape, Rng& rng, double stddev = 1.0) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (T& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

}  // namespace hyatt
