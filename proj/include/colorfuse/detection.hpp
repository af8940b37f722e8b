#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "colorfuse/tensor.hpp"

namespace colorfuse {

// Object boxes use half-open pixel intervals [x0,x1) x [y0,y1) in full-image
// coordinates, which compose cleanly with cropping and zero padding.
struct BoundingBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  double confidence = 1.0;
  std::string label;

  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  bool degenerate() const { return x1 <= x0 || y1 <= y0; }
};

struct DetectionSet {
  std::string image_id;
  std::vector<BoundingBox> boxes;
};

struct ImageInfo {
  std::string id;
  int width = 0, height = 0;
  std::string file;
};

// Parsed annotation file: image records plus per-image detections, with
// boxes already clamped to their image bounds.
struct AnnotationStore {
  std::map<std::string, ImageInfo> images;
  std::map<std::string, DetectionSet> detections;
  int dropped_boxes = 0;  // degenerate after clamping
};

inline BoundingBox clamp_box(BoundingBox b, int width, int height) {
  b.x0 = std::clamp(b.x0, 0, width);
  b.x1 = std::clamp(b.x1, 0, width);
  b.y0 = std::clamp(b.y0, 0, height);
  b.y1 = std::clamp(b.y1, 0, height);
  return b;
}

// Annotation schema:
// {"images":[{"id","width","height","file"}],
//  "boxes":[{"image_id","bbox":[x0,y0,x1,y1],"score","label"?}]}
inline AnnotationStore load_annotations(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_annotations: cannot open " + path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("load_annotations: parse failure in " + path +
                             ": " + e.what());
  }
  if (!doc.is_object() || !doc.contains("images") || !doc["images"].is_array())
    throw std::runtime_error("load_annotations: missing images array");

  AnnotationStore store;
  for (const auto& im : doc["images"]) {
    if (!im.contains("id") || !im.contains("width") || !im.contains("height"))
      throw std::runtime_error("load_annotations: malformed image record");
    ImageInfo info;
    info.id = im["id"].get<std::string>();
    info.width = im["width"].get<int>();
    info.height = im["height"].get<int>();
    if (im.contains("file")) info.file = im["file"].get<std::string>();
    if (info.width < 1 || info.height < 1)
      throw std::runtime_error("load_annotations: nonpositive image size for " +
                               info.id);
    store.images[info.id] = info;
    store.detections[info.id] = DetectionSet{info.id, {}};
  }

  if (doc.contains("boxes")) {
    if (!doc["boxes"].is_array())
      throw std::runtime_error("load_annotations: boxes must be an array");
    for (const auto& jb : doc["boxes"]) {
      if (!jb.contains("image_id") || !jb.contains("bbox") ||
          !jb["bbox"].is_array() || jb["bbox"].size() != 4)
        throw std::runtime_error("load_annotations: malformed box record");
      const std::string image_id = jb["image_id"].get<std::string>();
      auto it = store.images.find(image_id);
      if (it == store.images.end())
        throw std::runtime_error("load_annotations: box references unknown image " +
                                 image_id);
      BoundingBox box;
      box.x0 = static_cast<int>(std::llround(jb["bbox"][0].get<double>()));
      box.y0 = static_cast<int>(std::llround(jb["bbox"][1].get<double>()));
      box.x1 = static_cast<int>(std::llround(jb["bbox"][2].get<double>()));
      box.y1 = static_cast<int>(std::llround(jb["bbox"][3].get<double>()));
      box.confidence = jb.contains("score") ? jb["score"].get<double>() : 1.0;
      if (jb.contains("label")) box.label = jb["label"].get<std::string>();
      box = clamp_box(box, it->second.width, it->second.height);
      if (box.degenerate()) {
        ++store.dropped_boxes;
        continue;
      }
      store.detections[image_id].boxes.push_back(box);
    }
  }
  return store;
}

enum class SelectStrategy { top_k, random_k, threshold, ground_truth };

inline SelectStrategy parse_select_strategy(const std::string& s) {
  if (s == "top_k") return SelectStrategy::top_k;
  if (s == "random_k") return SelectStrategy::random_k;
  if (s == "threshold") return SelectStrategy::threshold;
  if (s == "ground_truth") return SelectStrategy::ground_truth;
  throw std::invalid_argument("unknown box selection strategy: " + s);
}

// Box selection by source index. top_k keeps the k highest-confidence
// boxes with ties broken by earlier list position; random_k draws k
// without replacement (deterministic under seed); threshold keeps
// confidence >= tau in list order; ground_truth passes everything
// through unchanged.
inline std::vector<std::size_t> select_box_indices(const DetectionSet& dets,
                                                   SelectStrategy strategy,
                                                   int k, double tau,
                                                   std::uint64_t seed) {
  if (k < 0) throw std::invalid_argument("select_boxes: k must be >= 0");
  if (tau < 0.0 || tau > 1.0)
    throw std::invalid_argument("select_boxes: tau must lie in [0,1]");
  const auto& boxes = dets.boxes;
  std::vector<std::size_t> idx(boxes.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  switch (strategy) {
    case SelectStrategy::top_k: {
      std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return boxes[a].confidence > boxes[b].confidence;
      });
      idx.resize(std::min<std::size_t>(k, idx.size()));
      return idx;
    }
    case SelectStrategy::random_k: {
      // Partial Fisher-Yates so the draw sequence is seed-stable.
      Rng rng(seed);
      const std::size_t n = std::min<std::size_t>(k, idx.size());
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j =
            i + static_cast<std::size_t>(rng.uniform_int(
                    0, static_cast<int>(idx.size() - i) - 1));
        std::swap(idx[i], idx[j]);
      }
      idx.resize(n);
      return idx;
    }
    case SelectStrategy::threshold: {
      std::vector<std::size_t> out;
      for (std::size_t i = 0; i < boxes.size(); ++i)
        if (boxes[i].confidence >= tau) out.push_back(i);
      return out;
    }
    case SelectStrategy::ground_truth:
      return idx;
  }
  throw std::logic_error("select_boxes: unreachable");
}

inline std::vector<BoundingBox> select_boxes(const DetectionSet& dets,
                                             SelectStrategy strategy, int k,
                                             double tau, std::uint64_t seed) {
  std::vector<BoundingBox> out;
  for (std::size_t i : select_box_indices(dets, strategy, k, tau, seed))
    out.push_back(dets.boxes[i]);
  return out;
}

namespace detail {
// Same tap math as the differentiable resize op. Kept local so this header
// stays free of the numerics dependencies the graph ops pull in.
struct PlaneTap {
  int y0, y1, x0, x1;
  double w00, w01, w10, w11;
};
inline PlaneTap plane_tap(int oy, int ox, int h, int w, int oh, int ow) {
  double sy = (oy + 0.5) * static_cast<double>(h) / oh - 0.5;
  double sx = (ox + 0.5) * static_cast<double>(w) / ow - 0.5;
  sy = std::min(std::max(sy, 0.0), static_cast<double>(h - 1));
  sx = std::min(std::max(sx, 0.0), static_cast<double>(w - 1));
  PlaneTap t;
  t.y0 = static_cast<int>(std::floor(sy));
  t.x0 = static_cast<int>(std::floor(sx));
  t.y1 = std::min(t.y0 + 1, h - 1);
  t.x1 = std::min(t.x0 + 1, w - 1);
  const double fy = sy - t.y0, fx = sx - t.x0;
  t.w00 = (1 - fy) * (1 - fx);
  t.w01 = (1 - fy) * fx;
  t.w10 = fy * (1 - fx);
  t.w11 = fy * fx;
  return t;
}
}  // namespace detail

inline Tensor resize_plane_bilinear(const Tensor& plane, int oh, int ow) {
  if (plane.rank() != 2)
    throw std::invalid_argument("resize_plane_bilinear: expects [H,W]");
  if (oh < 1 || ow < 1)
    throw std::invalid_argument("resize_plane_bilinear: bad target size");
  const int h = plane.dim(0), w = plane.dim(1);
  Tensor out({oh, ow});
  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox) {
      const auto t = detail::plane_tap(oy, ox, h, w, oh, ow);
      out.at(oy, ox) = t.w00 * plane.at(t.y0, t.x0) +
                       t.w01 * plane.at(t.y0, t.x1) +
                       t.w10 * plane.at(t.y1, t.x0) +
                       t.w11 * plane.at(t.y1, t.x1);
    }
  return out;
}

inline Tensor resize_image_bilinear(const Tensor& img, int oh, int ow) {
  if (img.rank() != 3)
    throw std::invalid_argument("resize_image_bilinear: expects [C,H,W]");
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  Tensor out({c, oh, ow});
  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox) {
      const auto t = detail::plane_tap(oy, ox, h, w, oh, ow);
      for (int ci = 0; ci < c; ++ci)
        out.at(ci, oy, ox) = t.w00 * img.at(ci, t.y0, t.x0) +
                             t.w01 * img.at(ci, t.y0, t.x1) +
                             t.w10 * img.at(ci, t.y1, t.x0) +
                             t.w11 * img.at(ci, t.y1, t.x1);
    }
  return out;
}

inline Tensor crop_plane(const Tensor& plane, const BoundingBox& box) {
  if (plane.rank() != 2) throw std::invalid_argument("crop_plane: expects [H,W]");
  if (box.degenerate() || box.x0 < 0 || box.y0 < 0 || box.x1 > plane.dim(1) ||
      box.y1 > plane.dim(0))
    throw std::invalid_argument("crop_plane: box outside image or degenerate");
  Tensor out({box.height(), box.width()});
  for (int y = 0; y < box.height(); ++y)
    for (int x = 0; x < box.width(); ++x)
      out.at(y, x) = plane.at(box.y0 + y, box.x0 + x);
  return out;
}

inline Tensor crop_image(const Tensor& img, const BoundingBox& box) {
  if (img.rank() != 3) throw std::invalid_argument("crop_image: expects [C,H,W]");
  if (box.degenerate() || box.x0 < 0 || box.y0 < 0 || box.x1 > img.dim(2) ||
      box.y1 > img.dim(1))
    throw std::invalid_argument("crop_image: box outside image or degenerate");
  Tensor out({img.dim(0), box.height(), box.width()});
  for (int c = 0; c < img.dim(0); ++c)
    for (int y = 0; y < box.height(); ++y)
      for (int x = 0; x < box.width(); ++x)
        out.at(c, y, x) = img.at(c, box.y0 + y, box.x0 + x);
  return out;
}

// Cuts the box out of an L plane and resizes it to target x target for the
// instance branch.
inline Tensor crop_resize_instance(const Tensor& plane, const BoundingBox& box,
                                   int target) {
  if (target < 1)
    throw std::invalid_argument("crop_resize_instance: target must be >= 1");
  Tensor crop = crop_plane(plane, box);
  return resize_plane_bilinear(crop, target, target);
}

// Maps a full-image box to a layer's resolution. Coordinates scale by the
// layer/full ratio, round half-away-from-zero, and the result is clamped
// so the box keeps at least one pixel on each side.
inline BoundingBox scale_box_to_layer(const BoundingBox& box, int full_h,
                                      int full_w, int layer_h, int layer_w) {
  if (layer_h < 1 || layer_w < 1)
    throw std::invalid_argument("scale_box_to_layer: layer size must be >= 1");
  const double ry = static_cast<double>(layer_h) / full_h;
  const double rx = static_cast<double>(layer_w) / full_w;
  BoundingBox out = box;
  out.x0 = static_cast<int>(std::llround(box.x0 * rx));
  out.x1 = static_cast<int>(std::llround(box.x1 * rx));
  out.y0 = static_cast<int>(std::llround(box.y0 * ry));
  out.y1 = static_cast<int>(std::llround(box.y1 * ry));
  out = clamp_box(out, layer_w, layer_h);
  if (out.x1 <= out.x0) {
    if (out.x0 >= layer_w) out.x0 = layer_w - 1;
    out.x1 = out.x0 + 1;
  }
  if (out.y1 <= out.y0) {
    if (out.y0 >= layer_h) out.y0 = layer_h - 1;
    out.y1 = out.y0 + 1;
  }
  return out;
}

// Detector plug-in seam. The bundled implementation replays stored
// annotations; a real detector can be dropped in behind the same call.
class Detector {
 public:
  virtual ~Detector() = default;
  virtual DetectionSet detect(const Tensor& l_plane,
                              const std::string& image_id) = 0;
};

class AnnotationDetector : public Detector {
 public:
  explicit AnnotationDetector(const AnnotationStore* store) : store_(store) {}

  DetectionSet detect(const Tensor&, const std::string& image_id) override {
    auto it = store_->detections.find(image_id);
    if (it == store_->detections.end())
      throw std::runtime_error("AnnotationDetector: no annotations for image " +
                               image_id);
    return it->second;
  }

 private:
  const AnnotationStore* store_;
};

}  // namespace colorfuse
