#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "colorfuse/autodiff.hpp"
#include "colorfuse/backbone.hpp"
#include "colorfuse/detection.hpp"
#include "colorfuse/tensor.hpp"

namespace colorfuse {

// Three stacked convolutions squeezing a feature map down to a 1-channel
// weight-map logit: 3x3 -> 3x3 -> 1x1 with LeakyReLU between. Spatial size
// is preserved.
class WeightHead {
 public:
  WeightHead(int in_channels, Rng& rng) : in_channels_(in_channels) {
    const int m1 = std::max(in_channels / 2, 4);
    const int m2 = std::max(in_channels / 4, 4);
    w1_ = leaf(he_init({m1, in_channels, 3, 3}, rng));
    b1_ = leaf(Tensor({m1}));
    w2_ = leaf(he_init({m2, m1, 3, 3}, rng));
    b2_ = leaf(Tensor({m2}));
    w3_ = leaf(he_init({1, m2, 1, 1}, rng));
    b3_ = leaf(Tensor({1}));
  }

  int in_channels() const { return in_channels_; }

  Var predict(const Var& feat) const {
    if (feat->value.rank() != 3 || feat->value.dim(0) != in_channels_)
      throw std::invalid_argument(
          "WeightHead: feature channels do not match head width");
    Var h = leaky_relu(conv2d(feat, w1_, b1_, 1, 1), 0.2);
    h = leaky_relu(conv2d(h, w2_, b2_, 1, 1), 0.2);
    return conv2d(h, w3_, b3_, 1, 0);
  }

  std::vector<std::pair<std::string, Var>> named_parameters(
      const std::string& prefix) const {
    return {{prefix + ".conv1.w", w1_}, {prefix + ".conv1.b", b1_},
            {prefix + ".conv2.w", w2_}, {prefix + ".conv2.b", b2_},
            {prefix + ".conv3.w", w3_}, {prefix + ".conv3.b", b3_}};
  }

 private:
  static Tensor he_init(std::vector<int> shape, Rng& rng) {
    Tensor t(shape);
    std::size_t fan_in = 1;
    for (std::size_t i = 1; i < shape.size(); ++i)
      fan_in *= static_cast<std::size_t>(shape[i]);
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, stddev);
    return t;
  }

  int in_channels_;
  Var w1_, b1_, w2_, b2_, w3_, b3_;
};

inline Var predict_weight_logits(const WeightHead& head, const Var& feat) {
  return head.predict(feat);
}

// One head pair per fusion layer: the full-image branch and the instance
// branch score their features with separate parameters.
class FusionHeads {
 public:
  FusionHeads(const BackboneConfig& cfg, std::uint64_t seed)
      : arch_hash_(config_hash(cfg)) {
    Rng rng(seed);
    for (int layer : cfg.fusion_layers) {
      const int c = cfg.layer_channels[static_cast<std::size_t>(layer)];
      heads_.emplace(layer, HeadPair{WeightHead(c, rng), WeightHead(c, rng)});
    }
  }

  struct HeadPair {
    WeightHead full;
    WeightHead inst;
  };

  bool has(int layer) const { return heads_.count(layer) > 0; }

  const HeadPair& at(int layer) const {
    auto it = heads_.find(layer);
    if (it == heads_.end())
      throw std::invalid_argument("FusionHeads: no head for layer " +
                                  std::to_string(layer));
    return it->second;
  }

  std::uint64_t architecture_hash() const { return arch_hash_; }

  std::vector<std::pair<std::string, Var>> named_parameters() const {
    std::vector<std::pair<std::string, Var>> out;
    for (const auto& [layer, pair] : heads_) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "fusion%02d", layer);
      for (auto& p : pair.full.named_parameters(std::string(buf) + ".full"))
        out.push_back(p);
      for (auto& p : pair.inst.named_parameters(std::string(buf) + ".inst"))
        out.push_back(p);
    }
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

 private:
  std::uint64_t arch_hash_;
  std::map<int, HeadPair> heads_;
};

// An instance feature and its weight-map logits mapped into full-layer
// coordinates: bilinearly resized to the layer box, zero elsewhere, with
// mask marking the covered pixels.
struct RetargetedInstance {
  Var feature;
  Var logits;
  Tensor mask;
};

inline RetargetedInstance retarget_instance(const Var& feat, const Var& logits,
                                            const BoundingBox& layer_box,
                                            int layer_h, int layer_w) {
  if (feat->value.rank() != 3 || logits->value.rank() != 3 ||
      logits->value.dim(0) != 1 ||
      logits->value.dim(1) != feat->value.dim(1) ||
      logits->value.dim(2) != feat->value.dim(2))
    throw std::invalid_argument("retarget_instance: feature/logit mismatch");
  if (layer_box.degenerate() || layer_box.x0 < 0 || layer_box.y0 < 0 ||
      layer_box.x1 > layer_w || layer_box.y1 > layer_h)
    throw std::invalid_argument("retarget_instance: degenerate layer box");

  const int bh = layer_box.height(), bw = layer_box.width();
  RetargetedInstance out;
  out.feature = paste_into(resize_bilinear(feat, bh, bw), layer_box.y0,
                           layer_box.x0, layer_h, layer_w);
  out.logits = paste_into(resize_bilinear(logits, bh, bw), layer_box.y0,
                          layer_box.x0, layer_h, layer_w);
  out.mask = Tensor({layer_h, layer_w});
  for (int y = layer_box.y0; y < layer_box.y1; ++y)
    for (int x = layer_box.x0; x < layer_box.x1; ++x) out.mask.at(y, x) = 1.0;
  return out;
}

// Operands of the per-layer weighted sum.
struct FusionBundle {
  Var full_feature;
  Var full_logits;
  std::vector<RetargetedInstance> instances;
};

// Per-pixel softmax over the full branch and every instance covering the
// pixel, then the weighted feature sum. weights_out (optional) receives
// the [N+1,h,w] softmax weights, full branch first.
inline Var fuse_layer(const FusionBundle& bundle,
                      Tensor* weights_out = nullptr) {
  const int h = bundle.full_feature->value.dim(1);
  const int w = bundle.full_feature->value.dim(2);
  std::vector<Var> feats{bundle.full_feature};
  std::vector<Var> logits{bundle.full_logits};
  std::vector<Tensor> masks{Tensor({h, w}, 1.0)};
  for (const auto& inst : bundle.instances) {
    feats.push_back(inst.feature);
    logits.push_back(inst.logits);
    masks.push_back(inst.mask);
  }
  return masked_softmax_blend(feats, logits, masks, weights_out);
}

// One instance's contribution to a fused forward pass: the box in
// full-image pixels plus the normalized L crop the instance branch eats.
struct InstanceInput {
  Tensor l_crop;
  BoundingBox box;
};

// Softmax weights exported from one fusion layer, full branch first.
struct LayerWeights {
  int layer = 0;
  Tensor weights;  // [N+1, h, w]
};

using BlendFn = std::function<Var(int layer, const FusionBundle& bundle)>;

struct FusedForwardOptions {
  int max_instances = 8;
  // Restricts fusion to these layers when non-empty (placement ablations);
  // otherwise the backbone config's fusion_layers apply.
  std::vector<int> fusion_layers_override;
  // Replaces the learned softmax blend (mask-based ablations).
  BlendFn blend_override;
  // When set, receives the softmax weight maps of every fused layer.
  std::vector<LayerWeights>* weights_sink = nullptr;
};

// Runs the instance branch on every crop, then the full branch with the
// blended feature swapped in at each fusion layer. With no instances the
// hook leaves taps untouched and the pass is the plain full-branch
// forward, op for op.
inline Var fused_forward(const ColorizationNetwork& full_net,
                         const ColorizationNetwork& inst_net,
                         const FusionHeads& heads, const Tensor& l_full,
                         const std::vector<InstanceInput>& instances,
                         const FusedForwardOptions& opt = {}) {
  if (!same_architecture(full_net.config(), inst_net.config()))
    throw std::invalid_argument("fused_forward: backbone configs differ");
  if (heads.architecture_hash() != config_hash(full_net.config()))
    throw std::invalid_argument("fused_forward: heads built for another config");
  if (static_cast<int>(instances.size()) > opt.max_instances)
    throw std::invalid_argument("fused_forward: instance count " +
                                std::to_string(instances.size()) +
                                " exceeds the maximum of " +
                                std::to_string(opt.max_instances));
  if (l_full.rank() != 3 || l_full.dim(0) != 1)
    throw std::invalid_argument("fused_forward: expects a [1,H,W] L plane");
  const int full_h = l_full.dim(1), full_w = l_full.dim(2);
  for (const auto& inst : instances) {
    if (inst.box.degenerate() || inst.box.x0 < 0 || inst.box.y0 < 0 ||
        inst.box.x1 > full_w || inst.box.y1 > full_h)
      throw std::invalid_argument("fused_forward: box outside image");
  }

  std::vector<std::vector<Var>> inst_taps;
  inst_taps.reserve(instances.size());
  for (const auto& inst : instances)
    inst_taps.push_back(inst_net.forward_with_taps(inst.l_crop).second);

  const std::vector<int>& fuse_at = opt.fusion_layers_override.empty()
                                        ? full_net.config().fusion_layers
                                        : opt.fusion_layers_override;

  TapHook hook = [&](int layer, const Var& tap) -> Var {
    if (instances.empty() ||
        std::find(fuse_at.begin(), fuse_at.end(), layer) == fuse_at.end())
      return tap;
    const int h = tap->value.dim(1), w = tap->value.dim(2);
    FusionBundle bundle;
    bundle.full_feature = tap;
    bundle.full_logits = heads.at(layer).full.predict(tap);
    for (std::size_t i = 0; i < instances.size(); ++i) {
      const Var& feat = inst_taps[i][static_cast<std::size_t>(layer)];
      Var logits = heads.at(layer).inst.predict(feat);
      const BoundingBox layer_box =
          scale_box_to_layer(instances[i].box, full_h, full_w, h, w);
      bundle.instances.push_back(
          retarget_instance(feat, logits, layer_box, h, w));
    }
    if (opt.blend_override) return opt.blend_override(layer, bundle);
    if (opt.weights_sink) {
      LayerWeights lw;
      lw.layer = layer;
      Var fused = fuse_layer(bundle, &lw.weights);
      opt.weights_sink->push_back(std::move(lw));
      return fused;
    }
    return fuse_layer(bundle);
  };

  return full_net.forward_with_taps(l_full, hook).first;
}

}  // namespace colorfuse
