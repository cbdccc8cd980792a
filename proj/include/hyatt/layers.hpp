#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "hyatt/ops.hpp"
#include "hyatt/random.hpp"

namespace hyatt {

/// Named, ordered parameter registry. Order of registration is the order of
/// checkpoint serialization.
template <class T>
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
    bool trainable;
  };

  Tensor<T> add(std::string name, Tensor<T> value, bool trainable = true) {
    for (const auto& e : entries_) {
      if (e.name == name) throw std::invalid_argument("duplicate parameter name: " + name);
    }
    value.set_requires_grad(trainable);
    entries_.push_back({std::move(name), value, trainable});
    return value;
  }

  const std::vector<Entry>& entries() const noexcept { return entries_; }

  std::vector<Tensor<T>> trainable() const {
    std::vector<Tensor<T>> out;
    for (const auto& e : entries_)
      if (e.trainable) out.push_back(e.tensor);
    return out;
  }

  std::size_t trainable_scalars() const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.trainable) n += e.tensor.numel();
    return n;
  }

  const Entry* find(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.name == name) return &e;
    return nullptr;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.drop_grad();
  }

 private:
  std::vector<Entry> entries_;
};

/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual default for conv and linear layers.
template <class T>
Tensor<T> fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return uniform_tensor<T>(std::move(shape), rng, -bound, bound);
}

template <class T>
struct ConvLayer {
  Tensor<T> weight;
  Tensor<T> bias;
  Conv2dOptions options;

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, options); }
};

template <class T>
ConvLayer<T> make_conv(ParameterStore<T>& store, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
                       Rng& rng, Conv2dOptions opt = {}, bool with_bias = true) {
  const std::size_t fan_in = cin / opt.groups * k * k;
  ConvLayer<T> layer;
  layer.weight = store.add(name + ".weight", fan_in_uniform<T>({cout, cin / opt.groups, k, k}, fan_in, rng));
  if (with_bias) layer.bias = store.add(name + ".bias", fan_in_uniform<T>({cout}, fan_in, rng));
  layer.options = opt;
  return layer;
}

template <class T>
struct LinearLayer {
  Tensor<T> weight;
  Tensor<T> bias;

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }
};

template <class T>
LinearLayer<T> make_linear(ParameterStore<T>& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
  LinearLayer<T> layer;
  layer.weight = store.add(name + ".weight", fan_in_uniform<T>({out, in}, in, rng));
  layer.bias = store.add(name + ".bias", fan_in_uniform<T>({out}, in, rng));
  return layer;
}

template <class T>
struct LayerNorm {
  Tensor<T> gamma;
  Tensor<T> beta;

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm_channels(x, gamma, beta); }
};

template <class T>
LayerNorm<T> make_layer_norm(ParameterStore<T>& store, const std::string& name, std::size_t channels) {
  return {store.add(name + ".weight", Tensor<T>::ones({channels})), store.add(name + ".bias", Tensor<T>::zeros({channels}))};
}

/// How normalization layers behave during a forward pass.
struct ForwardMode {
  bool training = false;
  /// Fold batch statistics into running estimates (training only).
  bool update_stats = true;
};

template <class T>
struct BatchNorm {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;

  Tensor<T> operator()(const Tensor<T>& x, ForwardMode mode) const {
    return batch_norm2d(x, gamma, beta, running_mean, running_var, mode.training, T(0.1), T(1e-5), mode.update_stats);
  }
};

template <class T>
BatchNorm<T> make_batch_norm(ParameterStore<T>& store, const std::string& name, std::size_t channels) {
  BatchNorm<T> bn;
  bn.gamma = store.add(name + ".weight", Tensor<T>::ones({channels}));
  bn.beta = store.add(name + ".bias", Tensor<T>::zeros({channels}));
  bn.running_mean = store.add(name + ".running_mean", Tensor<T>::zeros({channels}), false);
  bn.running_var = store.add(name + ".running_var", Tensor<T>::ones({channels}), false);
  return bn;
}

template <class T>
void fill(Tensor<T> t, T value) {
  std::fill(t.data().begin(), t.data().end(), value);
}

}  // namespace hyatt
