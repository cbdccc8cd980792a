#pragma once

#include <array>
#include <string>
#include <vector>

#include "hyatt/blocks.hpp"
#include "hyatt/bra.hpp"
#include "hyatt/config.hpp"
#include "hyatt/heatmap.hpp"

namespace hyatt {

template <class T>
struct StageParams {
  EmbedParams<T> down;  ///< patch embed (stage 0) or stride-2 conv
  BiformerParams<T> biformer;
  ArmParams<T> arm;
  ConvLayer<T> proj;  ///< 1x1 to decoder_dim
};

template <class T>
struct FeaturePyramid {
  std::array<Tensor<T>, HyattConfig::kStages> d;  ///< D1..D5 (strides 4..64)
};

template <class T>
struct ForwardOptions {
  ForwardMode mode;
  /// Replaces bra_forward in every BiFormer block when set.
  AttentionFn<T> attention;
  /// One counter per stage when non-null.
  std::array<AttentionCounters, HyattConfig::kStages>* counters = nullptr;
};

/// U-shaped detector: five BiFormer+ARM stages, transposed-conv decoder with
/// projected skips, heads at stride 8 (H1), stride 4 (H2) and full resolution (H3).
template <class T>
class HyattNet {
 public:
  explicit HyattNet(HyattConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(cfg_.seed);
    const auto& dims = cfg_.stage_dims;
    for (std::size_t i = 0; i < HyattConfig::kStages; ++i) {
      const std::string name = "stage" + std::to_string(i + 1);
      StageParams<T> s;
      s.down = i == 0 ? make_patch_embed(store_, name + ".embed", cfg_.in_channels, dims[0], rng)
                      : make_downsample(store_, name + ".down", dims[i - 1], dims[i], rng);
      s.biformer = make_biformer_params(store_, name + ".biformer", cfg_.bra(i), cfg_.mlp_ratio, rng);
      s.arm = make_arm(store_, name + ".arm", dims[i], dims[i], cfg_.cbam_reduction, rng);
      s.proj = make_conv(store_, name + ".proj", dims[i], cfg_.decoder_dim, 1, rng);
      stages_.push_back(std::move(s));
    }
    const std::size_t D = cfg_.decoder_dim;
    for (std::size_t i = 0; i + 1 < HyattConfig::kStages; ++i) {
      const std::string name = "decoder.up" + std::to_string(i + 1);
      ConvLayer<T> up;
      up.weight = store_.add(name + ".weight", fan_in_uniform<T>({D, D, 2, 2}, D * 4, rng));
      up.bias = store_.add(name + ".bias", fan_in_uniform<T>({D}, D * 4, rng));
      ups_.push_back(std::move(up));
    }
    head1_ = make_head(store_, "head1", D, cfg_.head_dim, cfg_.num_landmarks, rng);
    head2_ = make_head(store_, "head2", D, cfg_.head_dim, cfg_.num_landmarks, rng);
    ffcm_ = make_ffcm(store_, "ffcm", D, cfg_.num_landmarks, cfg_.in_channels, cfg_.ffcm_stem_dim, cfg_.ffcm_context_dim,
                      cfg_.ffcm_dim, rng);
  }

  const HyattConfig& config() const noexcept { return cfg_; }
  ParameterStore<T>& parameters() noexcept { return store_; }
  const ParameterStore<T>& parameters() const noexcept { return store_; }
  std::size_t parameter_count() const { return store_.trainable_scalars(); }

  FeaturePyramid<T> encode(const Tensor<T>& image, const ForwardOptions<T>& opt = {}) const {
    check_input(image);
    FeaturePyramid<T> out;
    Tensor<T> x = image;
    for (std::size_t i = 0; i < HyattConfig::kStages; ++i) {
      const auto& s = stages_[i];
      x = i == 0 ? patch_embed(x, s.down, opt.mode) : downsample(x, s.down, opt.mode);
      x = biformer_block(x, s.biformer, cfg_.bra(i), opt.attention, opt.counters ? &(*opt.counters)[i] : nullptr);
      x = arm(x, s.arm, opt.mode);
      out.d[i] = x;
    }
    return out;
  }

  /// U1..U5, all at decoder_dim channels; U5 at input/4.
  std::array<Tensor<T>, HyattConfig::kStages> decode(const FeaturePyramid<T>& pyr) const {
    constexpr std::size_t n = HyattConfig::kStages;
    std::array<Tensor<T>, n> u;
    u[0] = stages_[n - 1].proj(pyr.d[n - 1]);
    for (std::size_t i = 0; i + 1 < n; ++i) {
      const Tensor<T> up = transposed_conv2d(u[i], ups_[i].weight, ups_[i].bias, 2, 0);
      u[i + 1] = add(up, stages_[n - 2 - i].proj(pyr.d[n - 2 - i]));
    }
    return u;
  }

  HeatmapStack<T> forward(const Tensor<T>& image, const ForwardOptions<T>& opt = {}) const {
    const auto u = decode(encode(image, opt));
    HeatmapStack<T> out;
    out.h1 = heatmap_head(u[3], head1_);
    out.h2 = heatmap_head(u[4], head2_);
    out.h3 = ffcm_heatmap(ffcm(u[4], out.h2, image, ffcm_), ffcm_);
    return out;
  }

  /// Per-sample landmarks in input pixels from the averaged, full-resolution stack.
  std::vector<LandmarkSet> predict(const Tensor<T>& image, DecodeOptions dopt = {}) const {
    NoGradGuard<T> off;
    return decode_stack(forward(image), cfg_.height, cfg_.width, dopt);
  }

  static std::vector<LandmarkSet> decode_stack(const HeatmapStack<T>& stack, std::size_t height, std::size_t width,
                                               DecodeOptions dopt = {}) {
    NoGradGuard<T> off;
    const Tensor<T> avg =
        scale(add(add(bilinear_resize(stack.h1, height, width), bilinear_resize(stack.h2, height, width)), stack.h3),
              T(1.0 / 3.0));
    const std::size_t B = avg.dim(0), N = avg.dim(1), plane = N * height * width;
    std::vector<LandmarkSet> out;
    for (std::size_t b = 0; b < B; ++b) {
      const Tensor<T> one({N, height, width}, std::vector<T>(avg.ptr() + b * plane, avg.ptr() + (b + 1) * plane));
      out.push_back(decode_heatmap(one, dopt));
    }
    return out;
  }

  // Direct access for tests and targeted ablations.
  std::vector<StageParams<T>>& stages() noexcept { return stages_; }
  std::vector<ConvLayer<T>>& upsamplers() noexcept { return ups_; }

 private:
  void check_input(const Tensor<T>& image) const {
    detail::require_rank(image.shape(), 4, "HyattNet", "image");
    if (image.dim(1) != cfg_.in_channels) {
      throw DimensionError("HyattNet", "channels", "expected " + std::to_string(cfg_.in_channels) + ", got " +
                                                       std::to_string(image.dim(1)));
    }
    if (image.dim(2) != cfg_.height || image.dim(3) != cfg_.width) {
      throw DimensionError("HyattNet", "input_size", "expected " + std::to_string(cfg_.height) + "x" +
                                                         std::to_string(cfg_.width) + ", got " + to_string(image.shape()));
    }
  }

  HyattConfig cfg_;
  ParameterStore<T> store_;
  std::vector<StageParams<T>> stages_;
  std::vector<ConvLayer<T>> ups_;
  HeadParams<T> head1_, head2_;
  FfcmParams<T> ffcm_;
};

}  // namespace hyatt
