#pragma once

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "colorfuse/backbone.hpp"
#include "colorfuse/dataset.hpp"
#include "colorfuse/detection.hpp"
#include "colorfuse/evaluation.hpp"
#include "colorfuse/fusion.hpp"
#include "colorfuse/tensor.hpp"

namespace colorfuse {

enum class FusionPlacement { none, encoder_only, decoder_only, both };
enum class BlendMode { learned_fusion, box_mask, gt_mask };

inline const char* placement_name(FusionPlacement p) {
  switch (p) {
    case FusionPlacement::none: return "none";
    case FusionPlacement::encoder_only: return "encoder_only";
    case FusionPlacement::decoder_only: return "decoder_only";
    default: return "both";
  }
}

inline FusionPlacement parse_placement(const std::string& s) {
  if (s == "none") return FusionPlacement::none;
  if (s == "encoder_only") return FusionPlacement::encoder_only;
  if (s == "decoder_only") return FusionPlacement::decoder_only;
  if (s == "both") return FusionPlacement::both;
  throw std::invalid_argument("unknown fusion placement: " + s);
}

inline const char* blend_mode_name(BlendMode b) {
  switch (b) {
    case BlendMode::learned_fusion: return "learned_fusion";
    case BlendMode::box_mask: return "box_mask";
    default: return "gt_mask";
  }
}

inline BlendMode parse_blend_mode(const std::string& s) {
  if (s == "learned_fusion") return BlendMode::learned_fusion;
  if (s == "box_mask") return BlendMode::box_mask;
  if (s == "gt_mask") return BlendMode::gt_mask;
  throw std::invalid_argument("unknown blend mode: " + s);
}

// One ablation cell: where fusion happens, how features are blended, and
// which boxes feed the instance branch.
struct AblationSpec {
  FusionPlacement placement = FusionPlacement::both;
  BlendMode blend = BlendMode::learned_fusion;
  SelectStrategy box_strategy = SelectStrategy::ground_truth;
  int top_k = 8;
  double threshold = 0.5;
  std::uint64_t seed = 0;
  int max_instances = 8;
};

// The configured fusion layers restricted to one placement. Encoder
// layers are those before the first upsampling layer.
inline std::vector<int> placement_layers(const BackboneConfig& cfg,
                                         FusionPlacement placement) {
  const int split = decoder_start(cfg);
  std::vector<int> out;
  for (int layer : cfg.fusion_layers) {
    switch (placement) {
      case FusionPlacement::none:
        break;
      case FusionPlacement::encoder_only:
        if (layer < split) out.push_back(layer);
        break;
      case FusionPlacement::decoder_only:
        if (layer >= split) out.push_back(layer);
        break;
      case FusionPlacement::both:
        out.push_back(layer);
        break;
    }
  }
  return out;
}

namespace ablation_detail {

// Nearest-neighbor resample with pixel-center alignment, for carrying a
// full-resolution mask down to a feature layer.
inline Tensor resize_plane_nearest(const Tensor& plane, int oh, int ow) {
  if (plane.rank() != 2)
    throw std::invalid_argument("resize_plane_nearest: expected [H,W]");
  if (oh < 1 || ow < 1)
    throw std::invalid_argument("resize_plane_nearest: bad output size");
  const int ih = plane.dim(0), iw = plane.dim(1);
  Tensor out({oh, ow});
  const double ry = static_cast<double>(ih) / oh;
  const double rx = static_cast<double>(iw) / ow;
  for (int y = 0; y < oh; ++y) {
    int sy = static_cast<int>((y + 0.5) * ry);
    sy = std::min(std::max(sy, 0), ih - 1);
    for (int x = 0; x < ow; ++x) {
      int sx = static_cast<int>((x + 0.5) * rx);
      sx = std::min(std::max(sx, 0), iw - 1);
      out.at(y, x) = plane.at(sy, sx);
    }
  }
  return out;
}

// Replacement-style paste: inside the mask the instance feature wins
// outright; outside, the running blend is kept. Instances are applied in
// ascending index order, so on overlap the later one is what remains.
inline Var masked_replace(const Var& base,
                          const std::vector<Var>& features,
                          const std::vector<Tensor>& masks) {
  Var out = base;
  const int h = base->value.dim(1), w = base->value.dim(2);
  for (std::size_t i = 0; i < features.size(); ++i) {
    Tensor keep({h, w});
    for (std::size_t j = 0; j < keep.size(); ++j)
      keep[j] = 1.0 - masks[i][j];
    out = add(mul_plane(out, keep), mul_plane(features[i], masks[i]));
  }
  return out;
}

}  // namespace ablation_detail

// Blend that pastes each instance feature over the full feature within
// its scaled box.
inline Var fuse_layer_box_mask(const FusionBundle& bundle) {
  std::vector<Var> feats;
  std::vector<Tensor> masks;
  for (const auto& inst : bundle.instances) {
    feats.push_back(inst.feature);
    masks.push_back(inst.mask);
  }
  return ablation_detail::masked_replace(bundle.full_feature, feats, masks);
}

// Blend gated by per-instance segmentation masks given at image
// resolution. Each mask is resampled to the layer grid and intersected
// with the instance's box support so a feature never leaks outside the
// region it was pasted into.
inline Var fuse_layer_gt_mask(const FusionBundle& bundle,
                              const std::vector<Tensor>& gt_masks) {
  if (gt_masks.size() != bundle.instances.size())
    throw std::invalid_argument("fuse_layer_gt_mask: mask count mismatch");
  const int h = bundle.full_feature->value.dim(1);
  const int w = bundle.full_feature->value.dim(2);
  std::vector<Var> feats;
  std::vector<Tensor> masks;
  for (std::size_t i = 0; i < bundle.instances.size(); ++i) {
    feats.push_back(bundle.instances[i].feature);
    Tensor m = ablation_detail::resize_plane_nearest(gt_masks[i], h, w);
    for (std::size_t j = 0; j < m.size(); ++j)
      m[j] = (m[j] != 0.0 && bundle.instances[i].mask[j] != 0.0) ? 1.0 : 0.0;
    masks.push_back(std::move(m));
  }
  return ablation_detail::masked_replace(bundle.full_feature, feats, masks);
}

// Colorizes one sample under an ablation spec and returns [3,H,W] RGB.
// The default spec reproduces the standard fused prediction exactly.
inline Tensor ablation_predict_rgb(const AblationSpec& spec,
                                   const ColorizationNetwork& full_net,
                                   const ColorizationNetwork& inst_net,
                                   const FusionHeads& heads,
                                   const Sample& sample) {
  const BackboneConfig& cfg = full_net.config();
  std::vector<int> layers = placement_layers(cfg, spec.placement);

  DetectionSet dets;
  dets.image_id = sample.id;
  dets.boxes = sample.boxes;
  std::vector<std::size_t> picked = select_box_indices(
      dets, spec.box_strategy, spec.top_k, spec.threshold, spec.seed);
  if (picked.size() > static_cast<std::size_t>(spec.max_instances)) {
    // Over the cap the highest-confidence survivors are kept, in the
    // same confidence-descending order the plain fused path uses.
    DetectionSet sub;
    sub.image_id = sample.id;
    for (std::size_t i : picked) sub.boxes.push_back(sample.boxes[i]);
    std::vector<std::size_t> keep = select_box_indices(
        sub, SelectStrategy::top_k, spec.max_instances, 0.0, 0);
    std::vector<std::size_t> reordered;
    for (std::size_t j : keep) reordered.push_back(picked[j]);
    picked = std::move(reordered);
  }

  if (spec.blend == BlendMode::gt_mask)
    for (std::size_t i : picked)
      if (i >= sample.masks.size())
        throw std::invalid_argument(
            "ablation_predict_rgb: gt_mask blend needs a mask per box");

  Tensor ab;
  if (layers.empty() || picked.empty()) {
    // No fusion point or no instances: the full branch alone decides.
    ab = full_net.predict(sample.l_norm);
  } else {
    std::vector<InstanceInput> instances;
    std::vector<Tensor> gt_masks;
    for (std::size_t i : picked) {
      InstanceInput in;
      in.box = sample.boxes[i];
      in.l_crop = resize_image_bilinear(crop_image(sample.l_norm, in.box),
                                        cfg.base_resolution,
                                        cfg.base_resolution);
      instances.push_back(std::move(in));
      if (spec.blend == BlendMode::gt_mask) gt_masks.push_back(sample.masks[i]);
    }

    FusedForwardOptions opt;
    opt.max_instances = spec.max_instances;
    opt.fusion_layers_override = layers;
    if (spec.blend == BlendMode::box_mask) {
      opt.blend_override = [](int, const FusionBundle& bundle) {
        return fuse_layer_box_mask(bundle);
      };
    } else if (spec.blend == BlendMode::gt_mask) {
      opt.blend_override = [&gt_masks](int, const FusionBundle& bundle) {
        return fuse_layer_gt_mask(bundle, gt_masks);
      };
    }
    ab = fused_forward(full_net, inst_net, heads, sample.l_norm, instances,
                       opt)
             ->value;
  }
  return recompose_with_gt_l(sample.rgb, ab);
}

// Scores a whole dataset under one ablation cell with the standard
// metric protocol.
inline MetricReport run_ablation(const AblationSpec& spec,
                                 const ColorizationNetwork& full_net,
                                 const ColorizationNetwork& inst_net,
                                 const FusionHeads& heads, const Dataset& data,
                                 const EvaluationOptions& eval_opt = {}) {
  return evaluate_dataset(
      data,
      [&](const Sample& s) {
        return ablation_predict_rgb(spec, full_net, inst_net, heads, s);
      },
      eval_opt);
}

}  // namespace colorfuse
