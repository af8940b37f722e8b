#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "colorfuse/colorspace.hpp"
#include "colorfuse/detection.hpp"
#include "colorfuse/fixture.hpp"
#include "colorfuse/fusion.hpp"
#include "colorfuse/tensor.hpp"

namespace colorfuse {

// One training-ready image: normalized planes plus the boxes that drive
// the instance branch. The original RGB is kept for metric reports.
struct Sample {
  std::string id;
  Tensor l_norm;   // [1,H,W]
  Tensor ab_norm;  // [2,H,W]
  Tensor rgb;      // [3,H,W] in [0,255]
  std::vector<BoundingBox> boxes;
  std::vector<Tensor> masks;  // optional, [H,W] each, aligned with boxes
};

struct Dataset {
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
};

inline Sample sample_from_rgb(std::string id, Tensor rgb,
                              std::vector<BoundingBox> boxes = {},
                              std::vector<Tensor> masks = {}) {
  Sample s;
  s.id = std::move(id);
  split_lab_channels(rgb, s.l_norm, s.ab_norm);
  s.rgb = std::move(rgb);
  s.boxes = std::move(boxes);
  s.masks = std::move(masks);
  return s;
}

inline Dataset dataset_from_fixture(const std::vector<FixtureSample>& scenes) {
  Dataset ds;
  ds.samples.reserve(scenes.size());
  for (const auto& scene : scenes) {
    std::vector<BoundingBox> boxes;
    std::vector<Tensor> masks;
    for (const auto& obj : scene.objects) {
      boxes.push_back(obj.box);
      masks.push_back(obj.mask);
    }
    ds.samples.push_back(sample_from_rgb(scene.id, scene.rgb,
                                         std::move(boxes), std::move(masks)));
  }
  return ds;
}

// Expands every box into its own sample: L and ab are cropped with the
// same box and resized to a square network input. Ids get a per-box
// suffix so instance records stay traceable to their source image.
inline Dataset make_instance_dataset(const Dataset& full, int target_side) {
  if (target_side < 1)
    throw std::invalid_argument("make_instance_dataset: bad target side");
  Dataset out;
  for (const auto& s : full.samples) {
    for (std::size_t i = 0; i < s.boxes.size(); ++i) {
      const BoundingBox& box = s.boxes[i];
      Sample inst;
      inst.id = s.id + "#" + std::to_string(i);
      inst.l_norm = resize_image_bilinear(crop_image(s.l_norm, box),
                                          target_side, target_side);
      inst.ab_norm = resize_image_bilinear(crop_image(s.ab_norm, box),
                                           target_side, target_side);
      out.samples.push_back(std::move(inst));
    }
  }
  return out;
}

// The per-image instance inputs consumed by the fused forward pass.
// When more boxes exist than max_instances allows, the highest-scoring
// ones are kept (earlier boxes win ties); pass a negative cap for all.
inline std::vector<InstanceInput> instance_inputs_for(const Sample& s,
                                                      int target_side,
                                                      int max_instances = -1) {
  std::vector<BoundingBox> boxes = s.boxes;
  if (max_instances >= 0 &&
      boxes.size() > static_cast<std::size_t>(max_instances)) {
    DetectionSet set;
    set.image_id = s.id;
    set.boxes = std::move(boxes);
    boxes = select_boxes(set, SelectStrategy::top_k, max_instances, 0.0, 0);
  }
  std::vector<InstanceInput> out;
  out.reserve(boxes.size());
  for (const auto& box : boxes) {
    InstanceInput in;
    in.box = box;
    in.l_crop = resize_image_bilinear(crop_image(s.l_norm, box), target_side,
                                      target_side);
    out.push_back(std::move(in));
  }
  return out;
}

}  // namespace colorfuse
