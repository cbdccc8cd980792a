#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <string>

#include "hyatt/config.hpp"
#include "hyatt/network.hpp"

namespace hyatt {

struct StageFlops {
  std::size_t height = 0, width = 0, channels = 0, region_grid = 1, topk = 1;
  std::uint64_t tokens = 0;          ///< T = H*W
  std::uint64_t dense_macs = 0;      ///< 2*T^2*C (QK^T and AV)
  std::uint64_t bra_macs = 0;        ///< 2*T*(k*T/S^2)*C
  std::uint64_t routing_macs = 0;    ///< S^2*S^2*C
  std::uint64_t pooling_adds = 0;    ///< region means of Q and K: 2*T*C
  std::uint64_t measured_bra_macs = 0;
  std::uint64_t measured_dense_macs = 0;
  std::uint64_t measured_routing_macs = 0;

  /// bra/dense; exactly k/S^2 because both counts are integers with that ratio.
  double ratio() const { return double(bra_macs) / double(dense_macs); }
  bool ratio_is_exact() const { return bra_macs * region_grid * region_grid == dense_macs * topk; }
  bool counters_match() const {
    return measured_bra_macs == bra_macs && measured_dense_macs == dense_macs && measured_routing_macs == routing_macs;
  }
};

struct FlopReport {
  std::array<StageFlops, HyattConfig::kStages> stages;

  std::uint64_t total_bra() const {
    std::uint64_t n = 0;
    for (const auto& s : stages) n += s.bra_macs;
    return n;
  }
  std::uint64_t total_dense() const {
    std::uint64_t n = 0;
    for (const auto& s : stages) n += s.dense_macs;
    return n;
  }

  /// MACs per image; FLOPs are 2 per MAC.
  std::string csv() const {
    std::string out =
        "stage,height,width,channels,S,k,tokens,dense_macs,bra_macs,routing_macs,pooling_adds,measured_dense_macs,"
        "measured_bra_macs,measured_routing_macs,ratio,k_over_s2\n";
    char buf[512];
    for (std::size_t i = 0; i < stages.size(); ++i) {
      const auto& s = stages[i];
      std::snprintf(buf, sizeof buf, "%zu,%zu,%zu,%zu,%zu,%zu,%llu,%llu,%llu,%llu,%llu,%llu,%llu,%llu,%.6f,%.6f\n", i + 1,
                    s.height, s.width, s.channels, s.region_grid, s.topk, (unsigned long long)s.tokens,
                    (unsigned long long)s.dense_macs, (unsigned long long)s.bra_macs, (unsigned long long)s.routing_macs,
                    (unsigned long long)s.pooling_adds, (unsigned long long)s.measured_dense_macs,
                    (unsigned long long)s.measured_bra_macs, (unsigned long long)s.measured_routing_macs, s.ratio(),
                    double(s.topk) / double(s.region_grid * s.region_grid));
      out += buf;
    }
    return out;
  }
};

/// Closed-form counts per image.
inline FlopReport analytic_flops(const HyattConfig& cfg) {
  FlopReport r;
  for (std::size_t i = 0; i < HyattConfig::kStages; ++i) {
    auto& s = r.stages[i];
    s.height = cfg.stage_height(i);
    s.width = cfg.stage_width(i);
    s.channels = cfg.stage_dims[i];
    s.region_grid = cfg.region_grid[i];
    s.topk = cfg.topk[i];
    const std::uint64_t T = s.height * s.width, C = s.channels, S2 = s.region_grid * s.region_grid;
    s.tokens = T;
    s.dense_macs = 2 * T * T * C;
    s.bra_macs = 2 * T * (s.topk * T / S2) * C;
    s.routing_macs = S2 * S2 * C;
    s.pooling_adds = 2 * T * C;
  }
  return r;
}

/// Analytic counts plus the instrumented counters from one forward pass of a
/// single image, once with routing and once with every stage dense.
inline FlopReport flops_report(const HyattConfig& cfg) {
  FlopReport r = analytic_flops(cfg);
  HyattConfig dense_cfg = cfg;
  for (std::size_t i = 0; i < HyattConfig::kStages; ++i) {
    dense_cfg.region_grid[i] = 1;
    dense_cfg.topk[i] = 1;
  }
  NoGradGuard<float> off;
  const Tensor<float> image = Tensor<float>::zeros({1, cfg.in_channels, cfg.height, cfg.width});
  for (const bool dense : {false, true}) {
    HyattNet<float> net(dense ? dense_cfg : cfg);
    std::array<AttentionCounters, HyattConfig::kStages> counters{};
    ForwardOptions<float> opt;
    opt.counters = &counters;
    net.encode(image, opt);
    for (std::size_t i = 0; i < HyattConfig::kStages; ++i) {
      if (dense) {
        r.stages[i].measured_dense_macs = counters[i].token_macs();
      } else {
        r.stages[i].measured_bra_macs = counters[i].token_macs();
        r.stages[i].measured_routing_macs = counters[i].routing_macs;
      }
    }
  }
  return r;
}

}  // namespace hyatt
