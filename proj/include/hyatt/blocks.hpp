#pragma once

#include <stdexcept>
#include <string>

#include "hyatt/layers.hpp"
#include "hyatt/ops.hpp"

namespace hyatt {

// ---------------------------------------------------------------------------
// CBAM
// ---------------------------------------------------------------------------

template <class T>
struct CbamParams {
  ConvLayer<T> fc1, fc2;  ///< shared channel MLP as 1x1 convs on pooled [B, C, 1, 1]
  ConvLayer<T> spatial;   ///< 7x7 over the [avg; max] channel stack
};

template <class T>
CbamParams<T> make_cbam(ParameterStore<T>& store, const std::string& name, std::size_t channels, std::size_t reduction,
                        Rng& rng) {
  if (reduction == 0 || channels % reduction != 0) {
    throw std::invalid_argument("cbam: reduction " + std::to_string(reduction) + " must divide channels " +
                                std::to_string(channels));
  }
  CbamParams<T> p;
  p.fc1 = make_conv(store, name + ".ca.fc1", channels, channels / reduction, 1, rng);
  p.fc2 = make_conv(store, name + ".ca.fc2", channels / reduction, channels, 1, rng);
  p.spatial = make_conv(store, name + ".sa.conv", 2, 1, 7, rng, {1, 3, 1, 1});
  return p;
}

/// sigmoid(MLP(avg(f)) + MLP(max(f))) -> [B, C, 1, 1]
template <class T>
Tensor<T> channel_attention(const Tensor<T>& f, const CbamParams<T>& p) {
  detail::require_rank(f.shape(), 4, "channel_attention", "input");
  if (f.dim(1) != p.fc1.weight.dim(1)) {
    throw DimensionError("channel_attention", "channels", "expected " + std::to_string(p.fc1.weight.dim(1)) + ", got " +
                                                              std::to_string(f.dim(1)));
  }
  auto mlp = [&](const Tensor<T>& v) { return p.fc2(relu(p.fc1(v))); };
  return sigmoid(add(mlp(pool(f, PoolKind::GlobalAvg)), mlp(pool(f, PoolKind::GlobalMax))));
}

/// sigmoid(conv7x7([mean_c(f); max_c(f)])) -> [B, 1, H, W]
template <class T>
Tensor<T> spatial_attention(const Tensor<T>& f, const CbamParams<T>& p) {
  return sigmoid(p.spatial(concat_channels<T>({pool(f, PoolKind::SpatialChannelAvg), pool(f, PoolKind::SpatialChannelMax)})));
}

template <class T>
Tensor<T> cbam(const Tensor<T>& f, const CbamParams<T>& p) {
  const Tensor<T> fc = mul(channel_attention(f, p), f);
  return mul(spatial_attention(fc, p), fc);
}

// ---------------------------------------------------------------------------
// Attention residual module
// ---------------------------------------------------------------------------

template <class T>
struct ArmParams {
  ConvLayer<T> conv1;  ///< 3x3, dilation 1
  BatchNorm<T> norm1;
  ConvLayer<T> conv2;  ///< 3x3, dilation 2
  BatchNorm<T> norm2;
  CbamParams<T> cbam;
  ConvLayer<T> residual;  ///< 1x1
};

template <class T>
ArmParams<T> make_arm(ParameterStore<T>& store, const std::string& name, std::size_t cin, std::size_t cout,
                      std::size_t reduction, Rng& rng) {
  ArmParams<T> p;
  p.conv1 = make_conv(store, name + ".conv1", cin, cout, 3, rng, {1, 1, 1, 1});
  p.norm1 = make_batch_norm(store, name + ".norm1", cout);
  p.conv2 = make_conv(store, name + ".conv2", cout, cout, 3, rng, {1, 2, 2, 1});
  p.norm2 = make_batch_norm(store, name + ".norm2", cout);
  p.cbam = make_cbam(store, name + ".cbam", cout, reduction, rng);
  p.residual = make_conv(store, name + ".residual", cin, cout, 1, rng);
  return p;
}

/// relu(Conv1x1(f) + CBAM(Norm(Conv_d2(relu(Norm(Conv_d1(f)))))))
template <class T>
Tensor<T> arm(const Tensor<T>& f, const ArmParams<T>& p, ForwardMode mode = {}) {
  const Tensor<T> a = relu(p.norm1(p.conv1(f), mode));
  const Tensor<T> b = p.norm2(p.conv2(a), mode);
  return relu(add(p.residual(f), cbam(b, p.cbam)));
}

// ---------------------------------------------------------------------------
// Patch embedding and stage downsampling
// ---------------------------------------------------------------------------

template <class T>
struct EmbedParams {
  ConvLayer<T> conv;
  BatchNorm<T> norm;
};

/// 4x4 stride-4 conv + norm.
template <class T>
EmbedParams<T> make_patch_embed(ParameterStore<T>& store, const std::string& name, std::size_t cin, std::size_t cout,
                                Rng& rng) {
  return {make_conv(store, name + ".conv", cin, cout, 4, rng, {4, 0, 1, 1}), make_batch_norm(store, name + ".norm", cout)};
}

/// 3x3 stride-2 conv + norm.
template <class T>
EmbedParams<T> make_downsample(ParameterStore<T>& store, const std::string& name, std::size_t cin, std::size_t cout,
                               Rng& rng) {
  return {make_conv(store, name + ".conv", cin, cout, 3, rng, {2, 1, 1, 1}), make_batch_norm(store, name + ".norm", cout)};
}

template <class T>
Tensor<T> patch_embed(const Tensor<T>& image, const EmbedParams<T>& p, ForwardMode mode = {}) {
  detail::require_rank(image.shape(), 4, "patch_embed", "image");
  if (image.dim(2) % 4 != 0 || image.dim(3) % 4 != 0) {
    throw DimensionError("patch_embed", image.dim(2) % 4 ? "height" : "width",
                         "image " + to_string(image.shape()) + " must have H and W divisible by 4");
  }
  return p.norm(p.conv(image), mode);
}

template <class T>
Tensor<T> downsample(const Tensor<T>& x, const EmbedParams<T>& p, ForwardMode mode = {}) {
  return p.norm(p.conv(x), mode);
}

// ---------------------------------------------------------------------------
// Heads and feature fusion correction
// ---------------------------------------------------------------------------

template <class T>
struct HeadParams {
  ConvLayer<T> conv;  ///< 3x3
  ConvLayer<T> out;   ///< 1x1 to N
};

template <class T>
HeadParams<T> make_head(ParameterStore<T>& store, const std::string& name, std::size_t cin, std::size_t hidden,
                        std::size_t landmarks, Rng& rng) {
  return {make_conv(store, name + ".conv", cin, hidden, 3, rng, {1, 1, 1, 1}),
          make_conv(store, name + ".out", hidden, landmarks, 1, rng)};
}

template <class T>
Tensor<T> heatmap_head(const Tensor<T>& x, const HeadParams<T>& p) {
  return p.out(relu(p.conv(x)));
}

template <class T>
struct FfcmParams {
  ConvLayer<T> stem;      ///< 3x3 on the raw image
  LinearLayer<T> fc1, fc2;  ///< context MLP
  ConvLayer<T> fuse;      ///< 3x3 over [U5; H2; context]
  ConvLayer<T> head;      ///< 1x1 to N, produces H3
  std::size_t context_dim = 32;
};

template <class T>
FfcmParams<T> make_ffcm(ParameterStore<T>& store, const std::string& name, std::size_t feature_dim, std::size_t landmarks,
                        std::size_t image_channels, std::size_t stem_dim, std::size_t context_dim, std::size_t out_dim,
                        Rng& rng) {
  FfcmParams<T> p;
  p.stem = make_conv(store, name + ".stem", image_channels, stem_dim, 3, rng, {1, 1, 1, 1});
  p.fc1 = make_linear(store, name + ".fc1", stem_dim, context_dim, rng);
  p.fc2 = make_linear(store, name + ".fc2", context_dim, context_dim, rng);
  p.fuse = make_conv(store, name + ".fuse", feature_dim + landmarks + context_dim, out_dim, 3, rng, {1, 1, 1, 1});
  p.head = make_conv(store, name + ".head", out_dim, landmarks, 1, rng);
  p.context_dim = context_dim;
  return p;
}

/// Global image context: FC(relu(FC(avg(relu(stem(image)))))) -> [B, ctx]
template <class T>
Tensor<T> ffcm_context(const Tensor<T>& image, const FfcmParams<T>& p) {
  const Tensor<T> pooled = pool(relu(p.stem(image)), PoolKind::GlobalAvg);
  const Tensor<T> flat = reshape(pooled, {pooled.dim(0), pooled.dim(1)});
  return p.fc2(relu(p.fc1(flat)));
}

/// conv3x3(concat(up(u5), up(h2), broadcast(context))) at the image resolution.
template <class T>
Tensor<T> ffcm(const Tensor<T>& u5, const Tensor<T>& h2, const Tensor<T>& image, const FfcmParams<T>& p) {
  detail::require_rank(u5.shape(), 4, "ffcm", "u5");
  detail::require_rank(h2.shape(), 4, "ffcm", "h2");
  detail::require_rank(image.shape(), 4, "ffcm", "image");
  if (u5.dim(2) != h2.dim(2) || u5.dim(3) != h2.dim(3) || u5.dim(0) != h2.dim(0)) {
    throw DimensionError("ffcm", "h2", "u5 " + to_string(u5.shape()) + " and h2 " + to_string(h2.shape()) +
                                           " are not spatially aligned");
  }
  if (image.dim(0) != u5.dim(0)) throw DimensionError("ffcm", "batch", "image and features differ in batch size");
  const std::size_t B = image.dim(0), H = image.dim(2), W = image.dim(3);
  const Tensor<T> ctx = reshape(ffcm_context(image, p), {B, p.context_dim, 1, 1});
  const Tensor<T> u6 = concat_channels<T>(
      {bilinear_resize(u5, H, W), bilinear_resize(h2, H, W), broadcast_to(ctx, {B, p.context_dim, H, W})});
  return p.fuse(u6);
}

/// H3 = Conv1x1(relu(ffcm(...)))
template <class T>
Tensor<T> ffcm_heatmap(const Tensor<T>& fused, const FfcmParams<T>& p) {
  return p.head(relu(fused));
}

}  // namespace hyatt
