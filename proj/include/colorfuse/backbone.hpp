#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "colorfuse/autodiff.hpp"
#include "colorfuse/tensor.hpp"

namespace colorfuse {

// Architecture description for a colorization backbone. layer_channels and
// scale_profile run in lockstep: layer j outputs layer_channels[j] channels
// at input_size / scale_profile[j]. The profile may only hold steady,
// double (a stride-2 conv) or halve (a 2x nearest upsample) between
// consecutive layers, and must return to 1 so the ab head sees full
// resolution.
struct BackboneConfig {
  std::vector<int> layer_channels;
  std::vector<int> scale_profile;
  int base_resolution = 256;
  std::vector<int> fusion_layers;
  std::uint64_t seed = 0;

  int layer_count() const { return static_cast<int>(layer_channels.size()); }
};

// The reference 13-layer configuration: a 4-stage encoder down to 1/8
// resolution followed by a mirrored decoder.
inline BackboneConfig reference_backbone_config(std::uint64_t seed = 0) {
  BackboneConfig cfg;
  cfg.layer_channels = {64, 128, 256, 512, 512, 512, 512,
                        256, 256, 128, 128, 128, 128};
  cfg.scale_profile = {1, 2, 4, 8, 8, 8, 8, 4, 4, 2, 2, 1, 1};
  cfg.base_resolution = 256;
  cfg.fusion_layers.resize(13);
  for (int i = 0; i < 13; ++i) cfg.fusion_layers[i] = i;
  cfg.seed = seed;
  return cfg;
}

// A small 4-layer configuration for fast tests and examples.
inline BackboneConfig toy_backbone_config(std::uint64_t seed = 0) {
  BackboneConfig cfg;
  cfg.layer_channels = {8, 16, 16, 8};
  cfg.scale_profile = {1, 2, 2, 1};
  cfg.base_resolution = 64;
  cfg.fusion_layers = {0, 1, 2, 3};
  cfg.seed = seed;
  return cfg;
}

inline void validate_backbone_config(const BackboneConfig& cfg) {
  const int n = cfg.layer_count();
  if (n < 2) throw std::invalid_argument("backbone config: need >= 2 layers");
  if (static_cast<int>(cfg.scale_profile.size()) != n)
    throw std::invalid_argument(
        "backbone config: scale_profile length must match layer_channels");
  if (cfg.base_resolution < 1)
    throw std::invalid_argument("backbone config: base_resolution must be >= 1");
  int prev = 1;
  for (int i = 0; i < n; ++i) {
    if (cfg.layer_channels[i] < 1)
      throw std::invalid_argument("backbone config: channel counts must be >= 1");
    const int p = cfg.scale_profile[i];
    if (p < 1 || (p != prev && p != 2 * prev && 2 * p != prev))
      throw std::invalid_argument(
          "backbone config: scale_profile may only hold, double or halve");
    prev = p;
  }
  if (prev != 1)
    throw std::invalid_argument("backbone config: scale_profile must end at 1");
  for (int f : cfg.fusion_layers)
    if (f < 0 || f >= n)
      throw std::invalid_argument("backbone config: fusion layer out of range");
}

inline int max_scale(const BackboneConfig& cfg) {
  int m = 1;
  for (int p : cfg.scale_profile) m = std::max(m, p);
  return m;
}

// Index of the first decoder layer: the first layer that upsamples.
// Everything before it counts as encoder for placement ablations.
inline int decoder_start(const BackboneConfig& cfg) {
  int prev = 1;
  for (int i = 0; i < cfg.layer_count(); ++i) {
    if (cfg.scale_profile[i] < prev) return i;
    prev = cfg.scale_profile[i];
  }
  return cfg.layer_count();
}

// Canonical architecture fingerprint. Seed is deliberately excluded: a
// checkpoint is loadable into any identically-shaped network.
inline std::uint64_t config_hash(const BackboneConfig& cfg) {
  std::string s = "channels=";
  for (int c : cfg.layer_channels) s += std::to_string(c) + ",";
  s += ";profile=";
  for (int p : cfg.scale_profile) s += std::to_string(p) + ",";
  s += ";base=" + std::to_string(cfg.base_resolution);
  s += ";fusion=";
  for (int f : cfg.fusion_layers) s += std::to_string(f) + ",";
  return fnv1a64(s);
}

inline bool same_architecture(const BackboneConfig& a, const BackboneConfig& b) {
  return config_hash(a) == config_hash(b);
}

enum class NetRole { full_image, instance };

inline const char* role_name(NetRole r) {
  return r == NetRole::full_image ? "full_image" : "instance";
}

// Called after each layer's activation; may replace the tap (the fusion
// driver swaps in the blended feature before the next layer consumes it).
using TapHook = std::function<Var(int layer, const Var& tap)>;

// Encoder-decoder colorization backbone. Every layer is a 3x3 convolution
// with LeakyReLU(0.2); stride-2 convs downsample and nearest-neighbor
// upsamples precede the conv on halving layers. A 1x1 conv with tanh maps
// the last tap to the 2-channel ab prediction in [-1,1].
class ColorizationNetwork {
 public:
  ColorizationNetwork(BackboneConfig cfg, NetRole role)
      : cfg_(std::move(cfg)), role_(role) {
    validate_backbone_config(cfg_);
    Rng rng(cfg_.seed);
    int prev_c = 1, prev_p = 1;
    for (int i = 0; i < cfg_.layer_count(); ++i) {
      const int c = cfg_.layer_channels[i];
      const int p = cfg_.scale_profile[i];
      Layer layer;
      layer.stride = p == 2 * prev_p ? 2 : 1;
      layer.upsample_before = 2 * p == prev_p;
      layer.w = leaf(he_init({c, prev_c, 3, 3}, rng));
      layer.b = leaf(Tensor({c}));
      layers_.push_back(layer);
      prev_c = c;
      prev_p = p;
    }
    head_w_ = leaf(he_init({2, prev_c, 1, 1}, rng));
    head_b_ = leaf(Tensor({2}));
  }

  const BackboneConfig& config() const { return cfg_; }
  NetRole role() const { return role_; }
  void set_role(NetRole r) { role_ = r; }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& [name, p] : named_parameters()) n += p->value.size();
    return n;
  }

  std::vector<std::pair<std::string, Var>> named_parameters() const {
    std::vector<std::pair<std::string, Var>> out;
    char buf[32];
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      std::snprintf(buf, sizeof buf, "layer%02zu", i);
      out.emplace_back(std::string(buf) + ".w", layers_[i].w);
      out.emplace_back(std::string(buf) + ".b", layers_[i].b);
    }
    out.emplace_back("head.w", head_w_);
    out.emplace_back("head.b", head_b_);
    return out;
  }

  std::vector<Var> parameters() const {
    std::vector<Var> out;
    for (auto& [name, p] : named_parameters()) out.push_back(p);
    return out;
  }

  void set_trainable(bool trainable) {
    for (auto& p : parameters()) p->requires_grad = trainable;
  }

  // Forward pass from a normalized L plane wrapped as a graph node.
  // Returns the ab prediction and the (possibly hook-replaced) per-layer
  // taps.
  std::pair<Var, std::vector<Var>> forward_with_taps(
      const Var& input, const TapHook& hook = nullptr) const {
    const Tensor& in = input->value;
    if (in.rank() != 3 || in.dim(0) != 1)
      throw std::invalid_argument("forward: expects a [1,H,W] L plane");
    const int m = max_scale(cfg_);
    if (in.dim(1) % m != 0 || in.dim(2) % m != 0 || in.dim(1) < m ||
        in.dim(2) < m)
      throw std::invalid_argument(
          "forward: input sides must be positive multiples of " +
          std::to_string(m));
    Var x = input;
    std::vector<Var> taps;
    taps.reserve(layers_.size());
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const Layer& L = layers_[i];
      if (L.upsample_before) x = upsample_nearest2(x);
      x = leaky_relu(conv2d(x, L.w, L.b, L.stride, 1), 0.2);
      if (hook) x = hook(static_cast<int>(i), x);
      taps.push_back(x);
    }
    Var ab = tanh_op(conv2d(x, head_w_, head_b_, 1, 0));
    return {ab, taps};
  }

  std::pair<Var, std::vector<Var>> forward_with_taps(
      const Tensor& l_plane, const TapHook& hook = nullptr) const {
    return forward_with_taps(constant(l_plane), hook);
  }

  // Plain prediction without keeping taps.
  Tensor predict(const Tensor& l_plane) const {
    return forward_with_taps(l_plane).first->value;
  }

 private:
  struct Layer {
    Var w, b;
    int stride = 1;
    bool upsample_before = false;
  };

  static Tensor he_init(std::vector<int> shape, Rng& rng) {
    Tensor t(shape);
    std::size_t fan_in = 1;
    for (std::size_t i = 1; i < shape.size(); ++i)
      fan_in *= static_cast<std::size_t>(shape[i]);
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, stddev);
    return t;
  }

  BackboneConfig cfg_;
  NetRole role_;
  std::vector<Layer> layers_;
  Var head_w_, head_b_;
};

inline ColorizationNetwork build_backbone(const BackboneConfig& cfg,
                                          NetRole role = NetRole::full_image) {
  return ColorizationNetwork(cfg, role);
}

// Deep-copies parameter values between identically-shaped networks.
inline void copy_parameters(const ColorizationNetwork& src,
                            ColorizationNetwork& dst) {
  if (!same_architecture(src.config(), dst.config()))
    throw std::invalid_argument("copy_parameters: config mismatch");
  auto src_params = src.named_parameters();
  auto dst_params = dst.named_parameters();
  for (std::size_t i = 0; i < src_params.size(); ++i)
    dst_params[i].second->value = src_params[i].second->value;
}

// Initializes a network for dst_role from src's trained parameters.
inline ColorizationNetwork transfer_weights(const ColorizationNetwork& src,
                                            NetRole dst_role) {
  ColorizationNetwork dst(src.config(), dst_role);
  copy_parameters(src, dst);
  return dst;
}

}  // namespace colorfuse
