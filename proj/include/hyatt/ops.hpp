#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "hyatt/gemm.hpp"
#include "hyatt/tensor.hpp"

// Forward operations with reverse-mode support. Every op records a backward
// closure on the active tape when any of its inputs requires a gradient.

namespace hyatt {

// ---------------------------------------------------------------------------
// Broadcasting helpers
// ---------------------------------------------------------------------------

namespace detail {

inline Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(op, std::to_string(i),
                           "cannot broadcast " + to_string(a) + " with " + to_string(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

/// Strides of `in` when viewed with the (larger) shape `out`; broadcast axes get stride 0.
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t i = 0; i < in.size(); ++i) {
    const std::size_t src = in.size() - 1 - i;
    const std::size_t dst = out.size() - 1 - i;
    strides[dst] = in[src] == 1 ? 0 : stride;
    stride *= in[src];
  }
  return strides;
}

/// Calls f(out_index, a_index, b_index) over every element of `out` in row-major order.
template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa, const std::vector<std::size_t>& sb,
                        F&& f) {
  const std::size_t n = numel_of(out);
  if (out.empty()) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t rank = out.size();
  const std::size_t inner = out.back();
  const std::size_t ia_step = sa.back();
  const std::size_t ib_step = sb.back();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0;
  std::size_t ib = 0;
  for (std::size_t o = 0; o < n; o += inner) {
    for (std::size_t j = 0; j < inner; ++j) f(o + j, ia + j * ia_step, ib + j * ib_step);
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

template <class T>
void accumulate(Tensor<T>& t, std::size_t i, T v) {
  t.grad()[i] += v;
}

inline void require_rank(const Shape& s, std::size_t rank, const char* op, const char* name) {
  if (s.size() != rank) {
    throw DimensionError(op, name, "expected rank " + std::to_string(rank) + ", got shape " + to_string(s));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

namespace detail {

enum class BinaryKind { Add, Sub, Mul };

template <class T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinaryKind kind, const char* name) {
  const Shape out_shape = broadcast_shapes(a.shape(), b.shape(), name);
  Tensor<T> out(out_shape);
  const auto sa = broadcast_strides(a.shape(), out_shape);
  const auto sb = broadcast_strides(b.shape(), out_shape);
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  T* po = out.ptr();
  const bool same = a.shape() == b.shape();
  switch (kind) {
    case BinaryKind::Add:
      if (same) {
        for (std::size_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + pb[i];
      } else {
        for_each_broadcast(out_shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) { po[o] = pa[i] + pb[j]; });
      }
      break;
    case BinaryKind::Sub:
      if (same) {
        for (std::size_t i = 0; i < out.numel(); ++i) po[i] = pa[i] - pb[i];
      } else {
        for_each_broadcast(out_shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) { po[o] = pa[i] - pb[j]; });
      }
      break;
    case BinaryKind::Mul:
      if (same) {
        for (std::size_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * pb[i];
      } else {
        for_each_broadcast(out_shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) { po[o] = pa[i] * pb[j]; });
      }
      break;
  }
  if (auto* tape = recording_tape({&a, &b})) {
    tape->record(name, out, [a, b, out, sa, sb, kind, out_shape]() mutable {
      const T* g = out.grad().data();
      const bool ga = wants_grad(a);
      const bool gb = wants_grad(b);
      T* da = ga ? a.grad().data() : nullptr;
      T* db = gb ? b.grad().data() : nullptr;
      const T* pa = a.ptr();
      const T* pb = b.ptr();
      for_each_broadcast(out_shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) {
        switch (kind) {
          case BinaryKind::Add:
            if (da) da[i] += g[o];
            if (db) db[j] += g[o];
            break;
          case BinaryKind::Sub:
            if (da) da[i] += g[o];
            if (db) db[j] -= g[o];
            break;
          case BinaryKind::Mul:
            if (da) da[i] += g[o] * pb[j];
            if (db) db[j] += g[o] * pa[i];
            break;
        }
      });
    });
  }
  return out;
}

template <class T, class Fwd, class Deriv>
Tensor<T> unary(const Tensor<T>& x, const char* name, Fwd fwd, Deriv deriv) {
  Tensor<T> out(x.shape());
  const T* px = x.ptr();
  T* po = out.ptr();
  for (std::size_t i = 0; i < x.numel(); ++i) po[i] = fwd(px[i]);
  if (auto* tape = recording_tape({&x})) {
    tape->record(name, out, [x, out, deriv]() mutable {
      const T* g = out.grad().data();
      T* dx = x.grad().data();
      const T* px = x.ptr();
      const T* po = out.ptr();
      for (std::size_t i = 0; i < x.numel(); ++i) dx[i] += g[i] * deriv(px[i], po[i]);
    });
  }
  return out;
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::BinaryKind::Add, "add");
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::BinaryKind::Sub, "sub");
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::BinaryKind::Mul, "mul");
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return detail::unary(
      x, "scale", [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(
      x, "relu", [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      x, "sigmoid", [](T v) { return T(1) / (T(1) + std::exp(-v)); }, [](T, T y) { return y * (T(1) - y); });
}

/// Exact (erf-based) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  constexpr T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  return detail::unary(
      x, "gelu", [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [](T v, T) { return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(T(-0.5) * v * v); });
}

/// Materializes `x` broadcast to `shape`.
template <class T>
Tensor<T> broadcast_to(const Tensor<T>& x, const Shape& shape) {
  const Shape out_shape = detail::broadcast_shapes(x.shape(), shape, "broadcast_to");
  if (out_shape != shape) throw DimensionError("broadcast_to", "shape", to_string(x.shape()) + " -> " + to_string(shape));
  const auto sx = detail::broadcast_strides(x.shape(), shape);
  const std::vector<std::size_t> zero(shape.size(), 0);
  Tensor<T> out(shape);
  const T* px = x.ptr();
  T* po = out.ptr();
  detail::for_each_broadcast(shape, sx, zero, [&](std::size_t o, std::size_t i, std::size_t) { po[o] = px[i]; });
  if (auto* tape = detail::recording_tape({&x})) {
    tape->record("broadcast_to", out, [x, out, sx, zero, shape]() mutable {
      const T* g = out.grad().data();
      T* dx = x.grad().data();
      detail::for_each_broadcast(shape, sx, zero, [&](std::size_t o, std::size_t i, std::size_t) { dx[i] += g[o]; });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  double acc = 0.0;
  for (T v : x.data()) acc += static_cast<double>(v);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
  if (auto* tape = detail::recording_tape({&x})) {
    tape->record("sum", out, [x, out]() mutable {
      const T g = out.grad()[0];
      for (T& d : x.grad()) d += g;
    });
  }
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  double acc = 0.0;
  for (T v : x.data()) acc += static_cast<double>(v);
  const double n = static_cast<double>(x.numel());
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / n));
  if (auto* tape = detail::recording_tape({&x})) {
    tape->record("mean", out, [x, out, n]() mutable {
      const T g = static_cast<T>(out.grad()[0] / n);
      for (T& d : x.grad()) d += g;
    });
  }
  return out;
}

/// Mean squared error over all elements.
template <class T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape()) {
    throw DimensionError("mse_loss", "shape", to_string(pred.shape()) + " vs " + to_string(target.shape()));
  }
  double acc = 0.0;
  const T* p = pred.ptr();
  const T* t = target.ptr();
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const double d = static_cast<double>(p[i]) - static_cast<double>(t[i]);
    acc += d * d;
  }
  const double n = static_cast<double>(pred.numel());
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / n));
  if (auto* tape = detail::recording_tape({&pred, &target})) {
    tape->record("mse_loss", out, [pred, target, out, n]() mutable {
      const T g = static_cast<T>(2.0 * out.grad()[0] / n);
      const T* p = pred.ptr();
      const T* t = target.ptr();
      if (detail::wants_grad(pred)) {
        T* d = pred.grad().data();
        for (std::size_t i = 0; i < pred.numel(); ++i) d[i] += g * (p[i] - t[i]);
      }
      if (detail::wants_grad(target)) {
        T* d = target.grad().data();
        for (std::size_t i = 0; i < target.numel(); ++i) d[i] -= g * (p[i] - t[i]);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Layout
// ---------------------------------------------------------------------------

/// Zero-copy reshape; the result shares data and gradient storage with `x`.
template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  return x.view(std::move(shape));
}

/// out[i] = x[index[i]]. The general gather behind permutes and region layouts.
template <class T>
Tensor<T> reindex(const Tensor<T>& x, Shape out_shape, std::vector<std::size_t> index, const char* name = "reindex") {
  if (index.size() != numel_of(out_shape)) {
    throw DimensionError(name, "index", "index map size does not match output shape " + to_string(out_shape));
  }
  Tensor<T> out(std::move(out_shape));
  const T* px = x.ptr();
  T* po = out.ptr();
  for (std::size_t i = 0; i < index.size(); ++i) po[i] = px[index[i]];
  if (auto* tape = detail::recording_tape({&x})) {
    tape->record(name, out, [x, out, index = std::move(index)]() mutable {
      const T* g = out.grad().data();
      T* dx = x.grad().data();
      for (std::size_t i = 0; i < index.size(); ++i) dx[index[i]] += g[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const Shape& in = x.shape();
  if (perm.size() != in.size()) throw DimensionError("permute", "rank", "permutation rank mismatch");
  Shape out_shape(in.size());
  std::vector<std::size_t> in_strides(in.size());
  std::size_t stride = 1;
  for (std::size_t d = in.size(); d-- > 0;) {
    in_strides[d] = stride;
    stride *= in[d];
  }
  std::vector<std::size_t> strides(in.size());
  for (std::size_t d = 0; d < perm.size(); ++d) {
    out_shape[d] = in[perm[d]];
    strides[d] = in_strides[perm[d]];
  }
  std::vector<std::size_t> index(x.numel());
  const std::vector<std::size_t> zero(in.size(), 0);
  detail::for_each_broadcast(out_shape, strides, zero, [&](std::size_t o, std::size_t i, std::size_t) { index[o] = i; });
  return reindex(x, out_shape, std::move(index), "permute");
}

/// Concatenates [B, Ci, H, W] tensors along the channel axis.
template <class T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels: no inputs");
  const Shape& s0 = parts.front().shape();
  detail::require_rank(s0, 4, "concat_channels", "input");
  std::size_t channels = 0;
  for (const auto& p : parts) {
    detail::require_rank(p.shape(), 4, "concat_channels", "input");
    if (p.dim(0) != s0[0]) throw DimensionError("concat_channels", "batch", to_string(p.shape()) + " vs " + to_string(s0));
    if (p.dim(2) != s0[2]) throw DimensionError("concat_channels", "height", to_string(p.shape()) + " vs " + to_string(s0));
    if (p.dim(3) != s0[3]) throw DimensionError("concat_channels", "width", to_string(p.shape()) + " vs " + to_string(s0));
    channels += p.dim(1);
  }
  const std::size_t batch = s0[0];
  const std::size_t plane = s0[2] * s0[3];
  Tensor<T> out({batch, channels, s0[2], s0[3]});
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t offset = 0;
    for (const auto& p : parts) {
      const std::size_t block = p.dim(1) * plane;
      std::copy_n(p.ptr() + b * block, block, out.ptr() + (b * channels) * plane + offset);
      offset += block;
    }
  }
  if (auto* tape = detail::recording_tape(parts)) {
    tape->record("concat_channels", out, [parts, out, batch, channels, plane]() mutable {
      const T* g = out.grad().data();
      for (std::size_t b = 0; b < batch; ++b) {
        std::size_t offset = 0;
        for (auto& p : parts) {
          const std::size_t block = p.dim(1) * plane;
          if (detail::wants_grad(p)) {
            T* d = p.grad().data() + b * block;
            const T* src = g + (b * channels) * plane + offset;
            for (std::size_t i = 0; i < block; ++i) d[i] += src[i];
          }
          offset += block;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

/// Batched matrix product over the last two axes with broadcasting of the
/// leading (batch) axes. trans_a / trans_b transpose the stored operand.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false, bool trans_b = false) {
  if (a.rank() < 2) throw DimensionError("matmul", "lhs", "rank must be >= 2, got " + to_string(a.shape()));
  if (b.rank() < 2) throw DimensionError("matmul", "rhs", "rank must be >= 2, got " + to_string(b.shape()));
  const std::size_t a_rows = a.dim(-2), a_cols = a.dim(-1);
  const std::size_t b_rows = b.dim(-2), b_cols = b.dim(-1);
  const std::size_t m = trans_a ? a_cols : a_rows;
  const std::size_t k = trans_a ? a_rows : a_cols;
  const std::size_t kb = trans_b ? b_cols : b_rows;
  const std::size_t n = trans_b ? b_rows : b_cols;
  if (k != kb) {
    throw DimensionError("matmul", "inner", "contraction extents differ: " + std::to_string(k) + " vs " + std::to_string(kb));
  }
  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  const Shape batch = detail::broadcast_shapes(a_batch, b_batch, "matmul");
  const auto sa = detail::broadcast_strides(a_batch, batch);
  const auto sb = detail::broadcast_strides(b_batch, batch);
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<T> out(out_shape);
  const std::size_t a_mat = a_rows * a_cols;
  const std::size_t b_mat = b_rows * b_cols;
  const std::size_t c_mat = m * n;
  std::vector<std::size_t> pairs;
  pairs.reserve(3 * numel_of(batch));
  detail::for_each_broadcast(batch, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) {
    pairs.push_back(o);
    pairs.push_back(i);
    pairs.push_back(j);
  });
  for (std::size_t p = 0; p < pairs.size(); p += 3) {
    detail::gemm(trans_a, trans_b, m, n, k, a.ptr() + pairs[p + 1] * a_mat, b.ptr() + pairs[p + 2] * b_mat,
                 out.ptr() + pairs[p] * c_mat, false);
  }
  if (auto* tape = detail::recording_tape({&a, &b})) {
    tape->record("matmul", out, [a, b, out, pairs, trans_a, trans_b, m, n, k, a_mat, b_mat, c_mat]() mutable {
      const T* g = out.grad().data();
      const bool ga = detail::wants_grad(a);
      const bool gb = detail::wants_grad(b);
      T* da = ga ? a.grad().data() : nullptr;
      T* db = gb ? b.grad().data() : nullptr;
      for (std::size_t p = 0; p < pairs.size(); p += 3) {
        const T* gc = g + pairs[p] * c_mat;
        const T* pa = a.ptr() + pairs[p + 1] * a_mat;
        const T* pb = b.ptr() + pairs[p + 2] * b_mat;
        if (ga) {
          T* d = da + pairs[p + 1] * a_mat;
          if (!trans_a) {
            detail::gemm(false, !trans_b, m, k, n, gc, pb, d, true);
          } else {
            detail::gemm(trans_b, true, k, m, n, pb, gc, d, true);
          }
        }
        if (gb) {
          T* d = db + pairs[p + 2] * b_mat;
          if (!trans_b) {
            detail::gemm(!trans_a, false, k, n, m, pa, gc, d, true);
          } else {
            detail::gemm(true, trans_a, n, k, m, gc, pa, d, true);
          }
        }
      }
    });
  }
  return out;
}

/// Fully connected layer over the last axis: y = x W^T + b, W is [out, in].
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {}) {
  detail::require_rank(weight.shape(), 2, "linear", "weight");
  const std::size_t in = weight.dim(1);
  const std::size_t out_features = weight.dim(0);
  if (x.rank() < 1 || x.dim(-1) != in) {
    throw DimensionError("linear", "in_features", "input " + to_string(x.shape()) + " vs weight " + to_string(weight.shape()));
  }
  if (!bias.empty() && (bias.rank() != 1 || bias.dim(0) != out_features)) {
    throw DimensionError("linear", "bias", "expected [" + std::to_string(out_features) + "], got " + to_string(bias.shape()));
  }
  const std::size_t rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out_features;
  Tensor<T> out(out_shape);
  detail::gemm(false, true, rows, out_features, in, x.ptr(), weight.ptr(), out.ptr(), false);
  if (!bias.empty()) {
    T* po = out.ptr();
    const T* pb = bias.ptr();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < out_features; ++j) po[r * out_features + j] += pb[j];
  }
  if (auto* tape = detail::recording_tape({&x, &weight, &bias})) {
    tape->record("linear", out, [x, weight, bias, out, rows, in, out_features]() mutable {
      const T* g = out.grad().data();
      if (detail::wants_grad(x)) detail::gemm(false, false, rows, in, out_features, g, weight.ptr(), x.grad().data(), true);
      if (detail::wants_grad(weight)) detail::gemm(true, false, out_features, in, rows, g, x.ptr(), weight.grad().data(), true);
      if (detail::wants_grad(bias)) {
        T* db = bias.grad().data();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < out_features; ++j) db[j] += g[r * out_features + j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t dilation = 1;
  std::size_t groups = 1;
};

namespace detail {

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t kh, kw;
  std::size_t stride, padding, dilation;
  std::size_t out_h, out_w;
};

/// Unfolds one image (channels x height x width) into [channels*kh*kw, out_h*out_w].
template <class T>
void im2col(const T* im, const ConvGeometry& g, T* col) {
  const std::size_t cols = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = col + ((c * g.kh + ki) * g.kw + kj) * cols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki * g.dilation) - static_cast<std::ptrdiff_t>(g.padding);
          T* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill_n(dst, g.out_w, T(0));
            continue;
          }
          const T* src = im + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + kj * g.dilation) - static_cast<std::ptrdiff_t>(g.padding);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) ? T(0) : src[ix];
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters-adds columns back into the image.
template <class T>
void col2im(const T* col, const ConvGeometry& g, T* im) {
  const std::size_t cols = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = col + ((c * g.kh + ki) * g.kw + kj) * cols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki * g.dilation) - static_cast<std::ptrdiff_t>(g.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          T* dst = im + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          const T* src = row + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + kj * g.dilation) - static_cast<std::ptrdiff_t>(g.padding);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.width)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, const Conv2dOptions& o, const char* axis) {
  const std::size_t span = o.dilation * (k - 1) + 1;
  if (in + 2 * o.padding < span) {
    throw DimensionError("conv2d", axis,
                         "kernel span " + std::to_string(span) + " exceeds padded input " + std::to_string(in + 2 * o.padding));
  }
  return (in + 2 * o.padding - span) / o.stride + 1;
}

template <class T>
void add_bias_nchw(T* out, const T* bias, std::size_t batch, std::size_t channels, std::size_t plane) {
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c) {
      T* p = out + (b * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] += bias[c];
    }
}

template <class T>
void bias_grad_nchw(const T* g, T* db, std::size_t batch, std::size_t channels, std::size_t plane) {
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c) {
      const T* p = g + (b * channels + c) * plane;
      T acc = T(0);
      for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      db[c] += acc;
    }
}

}  // namespace detail

/// 2-D cross-correlation. input [B, Cin, H, W], weight [Cout, Cin/groups, kh, kw].
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias = {}, Conv2dOptions opt = {}) {
  detail::require_rank(input.shape(), 4, "conv2d", "input");
  detail::require_rank(weight.shape(), 4, "conv2d", "weight");
  if (opt.stride == 0) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (opt.dilation == 0) throw std::invalid_argument("conv2d: dilation must be >= 1");
  if (opt.groups == 0) throw std::invalid_argument("conv2d: groups must be >= 1");
  const std::size_t batch = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (cin % opt.groups != 0) {
    throw DimensionError("conv2d", "in_channels", std::to_string(cin) + " not divisible by groups " + std::to_string(opt.groups));
  }
  if (cout % opt.groups != 0) {
    throw DimensionError("conv2d", "out_channels", std::to_string(cout) + " not divisible by groups " + std::to_string(opt.groups));
  }
  const std::size_t cg = cin / opt.groups;
  const std::size_t og = cout / opt.groups;
  if (weight.dim(1) != cg) {
    throw DimensionError("conv2d", "in_channels",
                         "weight expects " + std::to_string(weight.dim(1)) + " channels per group, input provides " +
                             std::to_string(cg));
  }
  if (!bias.empty() && (bias.rank() != 1 || bias.dim(0) != cout)) {
    throw DimensionError("conv2d", "bias", "expected [" + std::to_string(cout) + "], got " + to_string(bias.shape()));
  }
  const std::size_t oh = detail::conv_out_extent(h, kh, opt, "height");
  const std::size_t ow = detail::conv_out_extent(w, kw, opt, "width");
  const detail::ConvGeometry geo{cg, h, w, kh, kw, opt.stride, opt.padding, opt.dilation, oh, ow};
  const std::size_t krows = cg * kh * kw;
  const std::size_t cols = oh * ow;
  Tensor<T> out({batch, cout, oh, ow});
  std::vector<T> col(krows * cols);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t g = 0; g < opt.groups; ++g) {
      detail::im2col(input.ptr() + (b * cin + g * cg) * h * w, geo, col.data());
      detail::gemm(false, false, og, cols, krows, weight.ptr() + g * og * krows, col.data(),
                   out.ptr() + (b * cout + g * og) * cols, false);
    }
  }
  if (!bias.empty()) detail::add_bias_nchw(out.ptr(), bias.ptr(), batch, cout, cols);
  if (auto* tape = detail::recording_tape({&input, &weight, &bias})) {
    tape->record("conv2d", out, [input, weight, bias, out, geo, opt, batch, cin, cout, cg, og, krows, cols]() mutable {
      const T* g = out.grad().data();
      const bool gx = detail::wants_grad(input);
      const bool gw = detail::wants_grad(weight);
      std::vector<T> col(krows * cols);
      const std::size_t plane = geo.height * geo.width;
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t grp = 0; grp < opt.groups; ++grp) {
          const T* gout = g + (b * cout + grp * og) * cols;
          if (gw) {
            detail::im2col(input.ptr() + (b * cin + grp * cg) * plane, geo, col.data());
            detail::gemm(false, true, og, krows, cols, gout, col.data(), weight.grad().data() + grp * og * krows, true);
          }
          if (gx) {
            detail::gemm(true, false, krows, cols, og, weight.ptr() + grp * og * krows, gout, col.data(), false);
            detail::col2im(col.data(), geo, input.grad().data() + (b * cin + grp * cg) * plane);
          }
        }
      }
      if (detail::wants_grad(bias)) detail::bias_grad_nchw(g, bias.grad().data(), batch, cout, cols);
    });
  }
  return out;
}

/// Transposed convolution (the adjoint of conv2d w.r.t. its input), used
/// as a learned upsampler. input [B, Cin, H, W], weight [Cin, Cout, kh, kw].
template <class T>
Tensor<T> transposed_conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias = {},
                            std::size_t stride = 1, std::size_t padding = 0) {
  detail::require_rank(input.shape(), 4, "transposed_conv2d", "input");
  detail::require_rank(weight.shape(), 4, "transposed_conv2d", "weight");
  if (stride == 0) throw std::invalid_argument("transposed_conv2d: stride must be >= 1");
  const std::size_t batch = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (weight.dim(0) != cin) {
    throw DimensionError("transposed_conv2d", "in_channels",
                         "weight expects " + std::to_string(weight.dim(0)) + ", input provides " + std::to_string(cin));
  }
  const std::size_t cout = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
  if (!bias.empty() && (bias.rank() != 1 || bias.dim(0) != cout)) {
    throw DimensionError("transposed_conv2d", "bias", "expected [" + std::to_string(cout) + "], got " + to_string(bias.shape()));
  }
  if ((h - 1) * stride + kh <= 2 * padding) throw DimensionError("transposed_conv2d", "height", "padding too large");
  if ((w - 1) * stride + kw <= 2 * padding) throw DimensionError("transposed_conv2d", "width", "padding too large");
  const std::size_t oh = (h - 1) * stride + kh - 2 * padding;
  const std::size_t ow = (w - 1) * stride + kw - 2 * padding;
  // Geometry of the conv2d this operator is the adjoint of: (oh, ow) -> (h, w).
  const detail::ConvGeometry geo{cout, oh, ow, kh, kw, stride, padding, 1, h, w};
  const std::size_t krows = cout * kh * kw;
  const std::size_t cols = h * w;
  const std::size_t plane = oh * ow;
  Tensor<T> out({batch, cout, oh, ow});
  std::vector<T> col(krows * cols);
  for (std::size_t b = 0; b < batch; ++b) {
    detail::gemm(true, false, krows, cols, cin, weight.ptr(), input.ptr() + b * cin * cols, col.data(), false);
    detail::col2im(col.data(), geo, out.ptr() + b * cout * plane);
  }
  if (!bias.empty()) detail::add_bias_nchw(out.ptr(), bias.ptr(), batch, cout, plane);
  if (auto* tape = detail::recording_tape({&input, &weight, &bias})) {
    tape->record("transposed_conv2d", out, [input, weight, bias, out, geo, batch, cin, cout, krows, cols, plane]() mutable {
      const T* g = out.grad().data();
      std::vector<T> col(krows * cols);
      for (std::size_t b = 0; b < batch; ++b) {
        detail::im2col(g + b * cout * plane, geo, col.data());
        if (detail::wants_grad(input))
          detail::gemm(false, false, cin, cols, krows, weight.ptr(), col.data(), input.grad().data() + b * cin * cols, true);
        if (detail::wants_grad(weight))
          detail::gemm(false, true, cin, krows, cols, input.ptr() + b * cin * cols, col.data(), weight.grad().data(), true);
      }
      if (detail::wants_grad(bias)) detail::bias_grad_nchw(g, bias.grad().data(), batch, cout, plane);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attention primitives
// ---------------------------------------------------------------------------

/// Softmax over the last axis, max-subtracted.
template <class T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  if (x.rank() == 0) throw DimensionError("softmax_lastdim", "last", "input has no axes");
  const std::size_t n = x.dim(-1);
  const std::size_t rows = x.numel() / n;
  Tensor<T> out(x.shape());
  const T* px = x.ptr();
  T* po = out.ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = px + r * n;
    T* o = po + r * n;
    const T mx = *std::max_element(in, in + n);
    T total = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    const T inv = T(1) / total;
    for (std::size_t j = 0; j < n; ++j) o[j] *= inv;
  }
  if (auto* tape = detail::recording_tape({&x})) {
    tape->record("softmax_lastdim", out, [x, out, n, rows]() mutable {
      const T* g = out.grad().data();
      const T* y = out.ptr();
      T* dx = x.grad().data();
      for (std::size_t r = 0; r < rows; ++r) {
        T dot = T(0);
        for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
        for (std::size_t j = 0; j < n; ++j) dx[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
      }
    });
  }
  return out;
}

/// Row-major matrix of indices.
struct IndexMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::size_t> values;

  std::size_t operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  std::span<const std::size_t> row(std::size_t r) const { return {values.data() + r * cols, cols}; }
  bool operator==(const IndexMatrix&) const = default;
};

/// Indices of the k largest entries per row of a [M, N] matrix, ordered by
/// descending score; equal scores keep ascending column order.
template <class T>
IndexMatrix topk_rows(const Tensor<T>& scores, std::size_t k) {
  detail::require_rank(scores.shape(), 2, "topk_rows", "scores");
  const std::size_t m = scores.dim(0), n = scores.dim(1);
  if (k < 1 || k > n) {
    throw std::out_of_range("topk_rows: k=" + std::to_string(k) + " must lie in [1, " + std::to_string(n) + "]");
  }
  IndexMatrix out{m, k, std::vector<std::size_t>(m * k)};
  std::vector<std::size_t> order(n);
  for (std::size_t r = 0; r < m; ++r) {
    const T* row = scores.ptr() + r * n;
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [row](std::size_t a, std::size_t b) { return row[a] > row[b] || (row[a] == row[b] && a < b); });
    std::copy_n(order.begin(), k, out.values.begin() + static_cast<std::ptrdiff_t>(r * k));
  }
  return out;
}

/// output[i, j, ...] = source[indices(i, j), ...].
template <class T>
Tensor<T> gather_rows(const Tensor<T>& source, const IndexMatrix& indices) {
  if (source.rank() < 1) throw DimensionError("gather_rows", "rows", "source must have a leading row axis");
  const std::size_t m = source.dim(0);
  const std::size_t row_size = source.numel() / m;
  for (std::size_t i = 0; i < indices.rows; ++i) {
    for (std::size_t j = 0; j < indices.cols; ++j) {
      if (indices(i, j) >= m) {
        throw std::out_of_range("gather_rows: row " + std::to_string(i) + " holds index " + std::to_string(indices(i, j)) +
                                " outside [0, " + std::to_string(m) + ")");
      }
    }
  }
  Shape out_shape{indices.rows, indices.cols};
  out_shape.insert(out_shape.end(), source.shape().begin() + 1, source.shape().end());
  Tensor<T> out(out_shape);
  for (std::size_t e = 0; e < indices.values.size(); ++e) {
    std::copy_n(source.ptr() + indices.values[e] * row_size, row_size, out.ptr() + e * row_size);
  }
  if (auto* tape = detail::recording_tape({&source})) {
    tape->record("gather_rows", out, [source, out, indices, row_size]() mutable {
      const T* g = out.grad().data();
      T* ds = source.grad().data();
      for (std::size_t e = 0; e < indices.values.size(); ++e) {
        T* d = ds + indices.values[e] * row_size;
        const T* src = g + e * row_size;
        for (std::size_t i = 0; i < row_size; ++i) d[i] += src[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pooling and resizing
// ---------------------------------------------------------------------------

enum class PoolKind { GlobalAvg, GlobalMax, SpatialChannelAvg, SpatialChannelMax };

/// global_* reduce H, W to 1x1 per channel; spatial_channel_* reduce C to 1 per pixel.
template <class T>
Tensor<T> pool(const Tensor<T>& x, PoolKind kind) {
  detail::require_rank(x.shape(), 4, "pool", "input");
  const std::size_t batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
  const bool global = kind == PoolKind::GlobalAvg || kind == PoolKind::GlobalMax;
  const bool is_max = kind == PoolKind::GlobalMax || kind == PoolKind::SpatialChannelMax;
  Tensor<T> out = global ? Tensor<T>({batch, channels, 1, 1}) : Tensor<T>({batch, 1, x.dim(2), x.dim(3)});
  std::vector<std::size_t> argmax(is_max ? out.numel() : 0);
  const T* px = x.ptr();
  T* po = out.ptr();
  if (global) {
    for (std::size_t bc = 0; bc < batch * channels; ++bc) {
      const T* p = px + bc * plane;
      if (is_max) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < plane; ++i)
          if (p[i] > p[best]) best = i;
        argmax[bc] = bc * plane + best;
        po[bc] = p[best];
      } else {
        double acc = 0.0;
        for (std::size_t i = 0; i < plane; ++i) acc += static_cast<double>(p[i]);
        po[bc] = static_cast<T>(acc / static_cast<double>(plane));
      }
    }
  } else {
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t base = b * channels * plane + i;
        if (is_max) {
          std::size_t best = base;
          for (std::size_t c = 1; c < channels; ++c)
            if (px[base + c * plane] > px[best]) best = base + c * plane;
          argmax[b * plane + i] = best;
          po[b * plane + i] = px[best];
        } else {
          T acc = T(0);
          for (std::size_t c = 0; c < channels; ++c) acc += px[base + c * plane];
          po[b * plane + i] = acc / static_cast<T>(channels);
        }
      }
    }
  }
  if (auto* tape = detail::recording_tape({&x})) {
    tape->record("pool", out, [x, out, argmax, global, is_max, batch, channels, plane]() mutable {
      const T* g = out.grad().data();
      T* dx = x.grad().data();
      if (is_max) {
        for (std::size_t i = 0; i < argmax.size(); ++i) dx[argmax[i]] += g[i];
      } else if (global) {
        for (std::size_t bc = 0; bc < batch * channels; ++bc) {
          const T v = g[bc] / static_cast<T>(plane);
          for (std::size_t i = 0; i < plane; ++i) dx[bc * plane + i] += v;
        }
      } else {
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t i = 0; i < plane; ++i) {
            const T v = g[b * plane + i] / static_cast<T>(channels);
            for (std::size_t c = 0; c < channels; ++c) dx[(b * channels + c) * plane + i] += v;
          }
      }
    });
  }
  return out;
}

namespace detail {

struct LerpTaps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> w_hi;
};

/// Half-pixel source sampling: src = (dst + 0.5) * in / out - 0.5, clamped at 0.
inline LerpTaps lerp_taps(std::size_t in, std::size_t out) {
  LerpTaps t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.w_hi.resize(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    auto lo = static_cast<std::size_t>(src);
    if (lo > in - 1) lo = in - 1;
    t.lo[i] = lo;
    t.hi[i] = std::min(lo + 1, in - 1);
    t.w_hi[i] = src - static_cast<double>(lo);
  }
  return t;
}

}  // namespace detail

/// Bilinear resize of [B, C, H, W] to [B, C, out_h, out_w] (half-pixel centers).
template <class T>
Tensor<T> bilinear_resize(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  detail::require_rank(x.shape(), 4, "bilinear_resize", "input");
  if (out_h == 0 || out_w == 0) throw DimensionError("bilinear_resize", "size", "output extents must be positive");
  const std::size_t bc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto ty = detail::lerp_taps(h, out_h);
  const auto tx = detail::lerp_taps(w, out_w);
  Tensor<T> out({x.dim(0), x.dim(1), out_h, out_w});
  const T* px = x.ptr();
  T* po = out.ptr();
  for (std::size_t p = 0; p < bc; ++p) {
    const T* in = px + p * h * w;
    T* o = po + p * out_h * out_w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const T wy = static_cast<T>(ty.w_hi[i]);
      const T* r0 = in + ty.lo[i] * w;
      const T* r1 = in + ty.hi[i] * w;
      for (std::size_t j = 0; j < out_w; ++j) {
        const T wx = static_cast<T>(tx.w_hi[j]);
        const T top = r0[tx.lo[j]] * (T(1) - wx) + r0[tx.hi[j]] * wx;
        const T bot = r1[tx.lo[j]] * (T(1) - wx) + r1[tx.hi[j]] * wx;
        o[i * out_w + j] = top * (T(1) - wy) + bot * wy;
      }
    }
  }
  if (auto* tape = detail::recording_tape({&x})) {
    tape->record("bilinear_resize", out, [x, out, ty, tx, bc, h, w, out_h, out_w]() mutable {
      const T* g = out.grad().data();
      T* dx = x.grad().data();
      for (std::size_t p = 0; p < bc; ++p) {
        T* d = dx + p * h * w;
        const T* go = g + p * out_h * out_w;
        for (std::size_t i = 0; i < out_h; ++i) {
          const T wy = static_cast<T>(ty.w_hi[i]);
          T* r0 = d + ty.lo[i] * w;
          T* r1 = d + ty.hi[i] * w;
          for (std::size_t j = 0; j < out_w; ++j) {
            const T wx = static_cast<T>(tx.w_hi[j]);
            const T v = go[i * out_w + j];
            r0[tx.lo[j]] += v * (T(1) - wy) * (T(1) - wx);
            r0[tx.hi[j]] += v * (T(1) - wy) * wx;
            r1[tx.lo[j]] += v * wy * (T(1) - wx);
            r1[tx.hi[j]] += v * wy * wx;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Layer normalization across the channel axis of [B, C, H, W], per pixel.
template <class T>
Tensor<T> layer_norm_channels(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  detail::require_rank(x.shape(), 4, "layer_norm_channels", "input");
  const std::size_t batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (gamma.numel() != channels || beta.numel() != channels) {
    throw DimensionError("layer_norm_channels", "channels", "affine parameters must have " + std::to_string(channels) + " entries");
  }
  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(batch * plane);
  const T* px = x.ptr();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < plane; ++i) {
      const std::size_t base = b * channels * plane + i;
      T mu = T(0);
      for (std::size_t c = 0; c < channels; ++c) mu += px[base + c * plane];
      mu /= static_cast<T>(channels);
      T var = T(0);
      for (std::size_t c = 0; c < channels; ++c) {
        const T d = px[base + c * plane] - mu;
        var += d * d;
      }
      var /= static_cast<T>(channels);
      const T inv = T(1) / std::sqrt(var + eps);
      inv_std[b * plane + i] = inv;
      for (std::size_t c = 0; c < channels; ++c) {
        const std::size_t k = base + c * plane;
        xhat[k] = (px[k] - mu) * inv;
        out.ptr()[k] = gamma[c] * xhat[k] + beta[c];
      }
    }
  }
  if (auto* tape = detail::recording_tape({&x, &gamma, &beta})) {
    tape->record("layer_norm_channels", out,
                 [x, gamma, beta, out, xhat = std::move(xhat), inv_std = std::move(inv_std), batch, channels, plane]() mutable {
                   const T* g = out.grad().data();
                   const bool gx = detail::wants_grad(x);
                   T* dgamma = detail::wants_grad(gamma) ? gamma.grad().data() : nullptr;
                   T* dbeta = detail::wants_grad(beta) ? beta.grad().data() : nullptr;
                   T* dx = gx ? x.grad().data() : nullptr;
                   const T n = static_cast<T>(channels);
                   for (std::size_t b = 0; b < batch; ++b) {
                     for (std::size_t i = 0; i < plane; ++i) {
                       const std::size_t base = b * channels * plane + i;
                       T sum_d = T(0), sum_dx = T(0);
                       for (std::size_t c = 0; c < channels; ++c) {
                         const std::size_t k = base + c * plane;
                         const T d = g[k] * gamma[c];
                         sum_d += d;
                         sum_dx += d * xhat[k];
                         if (dgamma) dgamma[c] += g[k] * xhat[k];
                         if (dbeta) dbeta[c] += g[k];
                       }
                       if (!dx) continue;
                       const T inv = inv_std[b * plane + i];
                       for (std::size_t c = 0; c < channels; ++c) {
                         const std::size_t k = base + c * plane;
                         dx[k] += inv / n * (n * g[k] * gamma[c] - sum_d - xhat[k] * sum_dx);
                       }
                     }
                   }
                 });
  }
  return out;
}

/// Batch normalization over (B, H, W) per channel. In training mode batch
/// statistics are used and, when `update_stats`, folded into the running
/// estimates with the given momentum (unbiased variance).
template <class T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T> running_mean,
                       Tensor<T> running_var, bool training, T momentum = T(0.1), T eps = T(1e-5),
                       bool update_stats = true) {
  detail::require_rank(x.shape(), 4, "batch_norm2d", "input");
  const std::size_t batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (gamma.numel() != channels || beta.numel() != channels || running_mean.numel() != channels ||
      running_var.numel() != channels) {
    throw DimensionError("batch_norm2d", "channels", "parameters must have " + std::to_string(channels) + " entries");
  }
  const std::size_t count = batch * plane;
  std::vector<T> mu(channels), inv(channels);
  const T* px = x.ptr();
  for (std::size_t c = 0; c < channels; ++c) {
    if (training) {
      double m = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* p = px + (b * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) m += static_cast<double>(p[i]);
      }
      m /= static_cast<double>(count);
      double v = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* p = px + (b * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = static_cast<double>(p[i]) - m;
          v += d * d;
        }
      }
      const double biased = v / static_cast<double>(count);
      mu[c] = static_cast<T>(m);
      inv[c] = static_cast<T>(1.0 / std::sqrt(biased + static_cast<double>(eps)));
      if (update_stats) {
        const double unbiased = count > 1 ? v / static_cast<double>(count - 1) : biased;
        running_mean.ptr()[c] = (T(1) - momentum) * running_mean[c] + momentum * static_cast<T>(m);
        running_var.ptr()[c] = (T(1) - momentum) * running_var[c] + momentum * static_cast<T>(unbiased);
      }
    } else {
      mu[c] = running_mean[c];
      inv[c] = T(1) / std::sqrt(running_var[c] + eps);
    }
  }
  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.numel());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t off = (b * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        xhat[off + i] = (px[off + i] - mu[c]) * inv[c];
        out.ptr()[off + i] = gamma[c] * xhat[off + i] + beta[c];
      }
    }
  if (auto* tape = detail::recording_tape({&x, &gamma, &beta})) {
    tape->record("batch_norm2d", out,
                 [x, gamma, beta, out, xhat = std::move(xhat), inv = std::move(inv), training, batch, channels, plane,
                  count]() mutable {
                   const T* g = out.grad().data();
                   T* dx = detail::wants_grad(x) ? x.grad().data() : nullptr;
                   T* dgamma = detail::wants_grad(gamma) ? gamma.grad().data() : nullptr;
                   T* dbeta = detail::wants_grad(beta) ? beta.grad().data() : nullptr;
                   for (std::size_t c = 0; c < channels; ++c) {
                     T sum_g = T(0), sum_gx = T(0);
                     for (std::size_t b = 0; b < batch; ++b) {
                       const std::size_t off = (b * channels + c) * plane;
                       for (std::size_t i = 0; i < plane; ++i) {
                         sum_g += g[off + i];
                         sum_gx += g[off + i] * xhat[off + i];
                       }
                     }
                     if (dgamma) dgamma[c] += sum_gx;
                     if (dbeta) dbeta[c] += sum_g;
                     if (!dx) continue;
                     const T n = static_cast<T>(count);
                     for (std::size_t b = 0; b < batch; ++b) {
                       const std::size_t off = (b * channels + c) * plane;
                       for (std::size_t i = 0; i < plane; ++i) {
                         if (training) {
                           dx[off + i] += gamma[c] * inv[c] / n * (n * g[off + i] - sum_g - xhat[off + i] * sum_gx);
                         } else {
                           dx[off + i] += gamma[c] * inv[c] * g[off + i];
                         }
                       }
                     }
                   }
                 });
  }
  return out;
}

}  // namespace hyatt
