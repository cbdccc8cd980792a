#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "hyatt/layers.hpp"
#include "hyatt/ops.hpp"

namespace hyatt {

struct BraConfig {
  std::size_t region_grid = 1;  ///< S: the map is cut into an S x S grid of regions
  std::size_t topk = 1;         ///< k routed regions per query region
  std::size_t heads = 1;
  std::size_t channels = 1;
  std::size_t lce_kernel = 5;

  void validate() const {
    if (region_grid < 1) throw std::invalid_argument("BraConfig: region_grid must be positive");
    if (channels < 1 || heads < 1) throw std::invalid_argument("BraConfig: channels and heads must be positive");
    if (topk < 1 || topk > region_grid * region_grid) {
      throw std::invalid_argument("BraConfig: topk=" + std::to_string(topk) + " must lie in [1, " +
                                  std::to_string(region_grid * region_grid) + "]");
    }
    if (channels % heads != 0) {
      throw std::invalid_argument("BraConfig: channels=" + std::to_string(channels) + " not divisible by heads=" +
                                  std::to_string(heads));
    }
    if (lce_kernel % 2 == 0) throw std::invalid_argument("BraConfig: lce_kernel must be odd");
  }

  void validate_for(std::size_t h, std::size_t w) const {
    validate();
    if (h % region_grid != 0 || w % region_grid != 0) {
      throw DimensionError("bra", h % region_grid != 0 ? "height" : "width",
                           "feature map " + std::to_string(h) + "x" + std::to_string(w) + " must be divisible by S=" +
                               std::to_string(region_grid));
    }
  }

  std::size_t regions() const noexcept { return region_grid * region_grid; }
};

/// I^p: per query region, the k routed key regions in descending affinity.
struct RoutingIndices {
  IndexMatrix indices;
};

template <class T>
struct RegionSummaries {
  Tensor<T> q_mean;  ///< [S², C]
  Tensor<T> k_mean;  ///< [S², C]
};

/// Multiply-accumulate tallies gathered while running attention.
struct AttentionCounters {
  std::uint64_t qk_macs = 0;
  std::uint64_t av_macs = 0;
  std::uint64_t routing_macs = 0;
  std::uint64_t pooling_adds = 0;

  std::uint64_t token_macs() const noexcept { return qk_macs + av_macs; }
  void reset() { *this = {}; }
};

namespace detail {

inline void check_region_grid(const Shape& s, std::size_t S, const char* op) {
  require_rank(s, 4, op, "input");
  if (S < 1) throw std::invalid_argument(std::string(op) + ": S must be positive");
  if (s[2] % S != 0) {
    throw DimensionError(op, "height", "H=" + std::to_string(s[2]) + " must be divisible by S=" + std::to_string(S));
  }
  if (s[3] % S != 0) {
    throw DimensionError(op, "width", "W=" + std::to_string(s[3]) + " must be divisible by S=" + std::to_string(S));
  }
}

/// Flat NCHW offset for every element of the [B, S², T, C] region layout.
inline std::vector<std::size_t> region_index(std::size_t B, std::size_t C, std::size_t H, std::size_t W, std::size_t S) {
  const std::size_t rh = H / S, rw = W / S, T = rh * rw;
  std::vector<std::size_t> index(B * C * H * W);
  std::size_t o = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t r = 0; r < S * S; ++r) {
      const std::size_t y0 = (r / S) * rh, x0 = (r % S) * rw;
      for (std::size_t t = 0; t < T; ++t) {
        const std::size_t y = y0 + t / rw, x = x0 + t % rw;
        for (std::size_t c = 0; c < C; ++c) index[o++] = ((b * C + c) * H + y) * W + x;
      }
    }
  return index;
}

}  // namespace detail

/// [B, C, H, W] -> [B, S², HW/S², C]. Regions and the tokens inside them are row-major.
template <class T>
Tensor<T> region_partition(const Tensor<T>& x, std::size_t S) {
  detail::check_region_grid(x.shape(), S, "region_partition");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  return reindex(x, {B, S * S, H * W / (S * S), C}, detail::region_index(B, C, H, W, S), "region_partition");
}

/// Inverse of region_partition.
template <class T>
Tensor<T> region_merge(const Tensor<T>& x, std::size_t S, std::size_t H, std::size_t W) {
  detail::require_rank(x.shape(), 4, "region_merge", "input");
  const std::size_t B = x.dim(0), C = x.dim(3);
  if (x.dim(1) != S * S || x.dim(2) * S * S != H * W) {
    throw DimensionError("region_merge", "regions", to_string(x.shape()) + " does not tile " + std::to_string(H) + "x" +
                                                        std::to_string(W) + " with S=" + std::to_string(S));
  }
  detail::check_region_grid({B, C, H, W}, S, "region_merge");
  const auto fwd = detail::region_index(B, C, H, W, S);
  std::vector<std::size_t> inv(fwd.size());
  for (std::size_t i = 0; i < fwd.size(); ++i) inv[fwd[i]] = i;
  return reindex(x, {B, C, H, W}, std::move(inv), "region_merge");
}

/// Per-region token means of one sample's [S², T, C] queries and keys.
template <class T>
RegionSummaries<T> region_summaries(const Tensor<T>& q, const Tensor<T>& k) {
  detail::require_rank(q.shape(), 3, "region_summaries", "q");
  if (q.shape() != k.shape()) throw DimensionError("region_summaries", "k", "q and k shapes differ");
  const std::size_t R = q.dim(0), Tn = q.dim(1), C = q.dim(2);
  RegionSummaries<T> out{Tensor<T>({R, C}), Tensor<T>({R, C})};
  auto reduce = [&](const Tensor<T>& src, Tensor<T>& dst) {
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < C; ++c) {
        double acc = 0.0;
        for (std::size_t t = 0; t < Tn; ++t) acc += double(src[(r * Tn + t) * C + c]);
        dst.data()[r * C + c] = T(acc / double(Tn));
      }
  };
  reduce(q, out.q_mean);
  reduce(k, out.k_mean);
  return out;
}

/// A^p = q_mean · k_meanᵀ, then row-wise top-k.
template <class T>
RoutingIndices routing(const Tensor<T>& q_mean, const Tensor<T>& k_mean, std::size_t k) {
  detail::require_rank(q_mean.shape(), 2, "routing", "q_mean");
  detail::require_rank(k_mean.shape(), 2, "routing", "k_mean");
  if (q_mean.dim(1) != k_mean.dim(1)) {
    throw DimensionError("routing", "channels", std::to_string(q_mean.dim(1)) + " vs " + std::to_string(k_mean.dim(1)));
  }
  NoGradGuard<T> off;
  return {topk_rows(matmul(q_mean, k_mean, false, true), k)};
}

template <class T>
struct BraParams {
  LinearLayer<T> q, k, v, out;
  ConvLayer<T> lce;  ///< depthwise, applied to V on the full map
};

template <class T>
BraParams<T> make_bra_params(ParameterStore<T>& store, const std::string& name, const BraConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t C = cfg.channels;
  BraParams<T> p;
  p.q = make_linear(store, name + ".q", C, C, rng);
  p.k = make_linear(store, name + ".k", C, C, rng);
  p.v = make_linear(store, name + ".v", C, C, rng);
  p.lce = make_conv(store, name + ".lce", C, C, cfg.lce_kernel, rng, {1, cfg.lce_kernel / 2, 1, C});
  p.out = make_linear(store, name + ".proj", C, C, rng);
  return p;
}

namespace detail {

/// [B, R, N, C] -> [B, R, heads, N, C/heads]
template <class T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads) {
  const std::size_t B = x.dim(0), R = x.dim(1), N = x.dim(2), C = x.dim(3);
  if (heads == 1) return reshape(x, {B, R, 1, N, C});
  return permute(reshape(x, {B, R, N, heads, C / heads}), {0, 1, 3, 2, 4});
}

template <class T>
Tensor<T> merge_heads(const Tensor<T>& x) {
  const std::size_t B = x.dim(0), R = x.dim(1), h = x.dim(2), N = x.dim(3), d = x.dim(4);
  if (h == 1) return reshape(x, {B, R, N, d});
  return reshape(permute(x, {0, 1, 3, 2, 4}), {B, R, N, h * d});
}

}  // namespace detail

/// Bi-level routing attention on a [B, C, H, W] map. When `routes` is given it
/// receives one RoutingIndices per sample.
template <class T>
Tensor<T> bra_forward(const Tensor<T>& x, const BraParams<T>& p, const BraConfig& cfg,
                      AttentionCounters* counters = nullptr, std::vector<RoutingIndices>* routes = nullptr) {
  detail::require_rank(x.shape(), 4, "bra_forward", "input");
  cfg.validate_for(x.dim(2), x.dim(3));
  if (x.dim(1) != cfg.channels) {
    throw DimensionError("bra_forward", "channels", "expected " + std::to_string(cfg.channels) + ", got " +
                                                        std::to_string(x.dim(1)));
  }
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t S = cfg.region_grid, R = cfg.regions(), Tn = H * W / R, kk = cfg.topk;
  const std::size_t heads = cfg.heads, d = C / heads;

  const Tensor<T> xr = region_partition(x, S);
  const Tensor<T> q = p.q(xr);
  const Tensor<T> k = p.k(xr);
  const Tensor<T> v = p.v(xr);

  // Routing is not differentiated; one index matrix per sample, offset into
  // the flattened [B·S², T·C] row space used for the gather.
  IndexMatrix global{B * R, kk, std::vector<std::size_t>(B * R * kk)};
  if (routes) routes->clear();
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t span = R * Tn * C;
    const Tensor<T> qb({R, Tn, C}, std::vector<T>(q.ptr() + b * span, q.ptr() + (b + 1) * span));
    const Tensor<T> kb({R, Tn, C}, std::vector<T>(k.ptr() + b * span, k.ptr() + (b + 1) * span));
    const auto summary = region_summaries(qb, kb);
    RoutingIndices ri = routing(summary.q_mean, summary.k_mean, kk);
    for (std::size_t i = 0; i < R * kk; ++i) global.values[b * R * kk + i] = b * R + ri.indices.values[i];
    if (routes) routes->push_back(std::move(ri));
  }

  const Tensor<T> kg = reshape(gather_rows(reshape(k, {B * R, Tn * C}), global), {B, R, kk * Tn, C});
  const Tensor<T> vg = reshape(gather_rows(reshape(v, {B * R, Tn * C}), global), {B, R, kk * Tn, C});

  const Tensor<T> qh = detail::split_heads(q, heads);
  const Tensor<T> kh = detail::split_heads(kg, heads);
  const Tensor<T> vh = detail::split_heads(vg, heads);
  const Tensor<T> scores = scale(matmul(qh, kh, false, true), T(1.0 / std::sqrt(double(d))));
  const Tensor<T> attn = softmax_lastdim(scores);
  const Tensor<T> o = detail::merge_heads(matmul(attn, vh));

  const Tensor<T> lce = region_partition(p.lce(region_merge(v, S, H, W)), S);
  const Tensor<T> y = p.out(add(o, lce));

  if (counters) {
    const std::uint64_t per = std::uint64_t(B) * R * heads * Tn * (kk * Tn) * d;
    counters->qk_macs += per;
    counters->av_macs += per;
    counters->routing_macs += std::uint64_t(B) * R * R * C;
    counters->pooling_adds += std::uint64_t(B) * 2 * H * W * C;
  }
  return region_merge(y, S, H, W);
}

/// Full attention over all HW tokens with the same projections and LCE: the
/// single-region special case of bra_forward.
template <class T>
Tensor<T> dense_attention_forward(const Tensor<T>& x, const BraParams<T>& p, BraConfig cfg,
                                  AttentionCounters* counters = nullptr) {
  cfg.region_grid = 1;
  cfg.topk = 1;
  return bra_forward(x, p, cfg, counters);
}

template <class T>
struct BiformerParams {
  ConvLayer<T> pos;  ///< depthwise 3x3
  LayerNorm<T> norm1;
  BraParams<T> attn;
  LayerNorm<T> norm2;
  ConvLayer<T> fc1, fc2;  ///< per-pixel linear layers (1x1 convs)
};

template <class T>
BiformerParams<T> make_biformer_params(ParameterStore<T>& store, const std::string& name, const BraConfig& cfg,
                                       std::size_t mlp_ratio, Rng& rng) {
  const std::size_t C = cfg.channels;
  BiformerParams<T> p;
  p.pos = make_conv(store, name + ".pos", C, C, 3, rng, {1, 1, 1, C});
  p.norm1 = make_layer_norm(store, name + ".norm1", C);
  p.attn = make_bra_params(store, name + ".attn", cfg, rng);
  p.norm2 = make_layer_norm(store, name + ".norm2", C);
  p.fc1 = make_conv(store, name + ".mlp.fc1", C, C * mlp_ratio, 1, rng);
  p.fc2 = make_conv(store, name + ".mlp.fc2", C * mlp_ratio, C, 1, rng);
  return p;
}

/// Replacement for bra_forward inside a block (e.g. a dense reference).
template <class T>
using AttentionFn = std::function<Tensor<T>(const Tensor<T>&, const BraParams<T>&, const BraConfig&, AttentionCounters*)>;

/// x + DWConv(x), then pre-norm attention and pre-norm MLP, each with a residual.
template <class T>
Tensor<T> biformer_block(const Tensor<T>& x, const BiformerParams<T>& p, const BraConfig& cfg,
                         const AttentionFn<T>& attention = {}, AttentionCounters* counters = nullptr) {
  const Tensor<T> y1 = add(x, p.pos(x));
  const Tensor<T> n1 = p.norm1(y1);
  const Tensor<T> a = attention ? attention(n1, p.attn, cfg, counters) : bra_forward(n1, p.attn, cfg, counters);
  const Tensor<T> y2 = add(y1, a);
  return add(y2, p.fc2(gelu(p.fc1(p.norm2(y2)))));
}

}  // namespace hyatt
