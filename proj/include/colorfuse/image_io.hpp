#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>

#include "colorfuse/dataset.hpp"
#include "colorfuse/detection.hpp"
#include "colorfuse/fixture.hpp"
#include "colorfuse/tensor.hpp"

namespace colorfuse {

// Reads any format the codec layer understands into [3,H,W] RGB doubles
// in [0,255]. Grayscale sources are expanded to three equal channels.
inline Tensor read_image_rgb(const std::string& path) {
  cv::Mat img = cv::imread(path, cv::IMREAD_COLOR);
  if (img.empty())
    throw std::runtime_error("read_image_rgb: cannot read " + path);
  Tensor out({3, img.rows, img.cols});
  for (int y = 0; y < img.rows; ++y) {
    const cv::Vec3b* row = img.ptr<cv::Vec3b>(y);
    for (int x = 0; x < img.cols; ++x) {
      out.at(0, y, x) = row[x][2];  // codec order is BGR
      out.at(1, y, x) = row[x][1];
      out.at(2, y, x) = row[x][0];
    }
  }
  return out;
}

inline void write_image_rgb(const std::string& path, const Tensor& rgb) {
  if (rgb.rank() != 3 || rgb.dim(0) != 3)
    throw std::invalid_argument("write_image_rgb: expected [3,H,W]");
  const int h = rgb.dim(1), w = rgb.dim(2);
  cv::Mat img(h, w, CV_8UC3);
  for (int y = 0; y < h; ++y) {
    cv::Vec3b* row = img.ptr<cv::Vec3b>(y);
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = std::round(rgb.at(c, y, x));
        row[x][2 - c] = static_cast<unsigned char>(std::clamp(v, 0.0, 255.0));
      }
    }
  }
  if (!cv::imwrite(path, img))
    throw std::runtime_error("write_image_rgb: cannot write " + path);
}

// Binary masks travel as grayscale images: anything at or above half
// intensity counts as inside.
inline Tensor read_mask(const std::string& path) {
  cv::Mat img = cv::imread(path, cv::IMREAD_GRAYSCALE);
  if (img.empty()) throw std::runtime_error("read_mask: cannot read " + path);
  Tensor out({img.rows, img.cols});
  for (int y = 0; y < img.rows; ++y)
    for (int x = 0; x < img.cols; ++x)
      out.at(y, x) = img.at<unsigned char>(y, x) >= 128 ? 1.0 : 0.0;
  return out;
}

inline void write_mask(const std::string& path, const Tensor& mask) {
  if (mask.rank() != 2)
    throw std::invalid_argument("write_mask: expected [H,W]");
  cv::Mat img(mask.dim(0), mask.dim(1), CV_8UC1);
  for (int y = 0; y < mask.dim(0); ++y)
    for (int x = 0; x < mask.dim(1); ++x)
      img.at<unsigned char>(y, x) = mask.at(y, x) != 0.0 ? 255 : 0;
  if (!cv::imwrite(path, img))
    throw std::runtime_error("write_mask: cannot write " + path);
}

// A single plane of arbitrary values rendered to an 8-bit grayscale
// image; values are expected in [0,1] and are clipped otherwise.
inline void write_heatmap(const std::string& path, const Tensor& plane) {
  if (plane.rank() != 2)
    throw std::invalid_argument("write_heatmap: expected [H,W]");
  cv::Mat img(plane.dim(0), plane.dim(1), CV_8UC1);
  for (int y = 0; y < plane.dim(0); ++y)
    for (int x = 0; x < plane.dim(1); ++x) {
      const double v = std::clamp(plane.at(y, x), 0.0, 1.0);
      img.at<unsigned char>(y, x) = static_cast<unsigned char>(
          std::round(v * 255.0));
    }
  if (!cv::imwrite(path, img))
    throw std::runtime_error("write_heatmap: cannot write " + path);
}

namespace io_detail {

inline std::string mask_file_name(const std::string& image_id,
                                  std::size_t index) {
  return image_id + "_" + std::to_string(index) + ".png";
}

}  // namespace io_detail

// Writes generated scenes as a directory dataset:
//   images/<id>.png, masks/<id>_<i>.png, annotations.json
inline void write_fixture_dataset(const std::string& dir,
                                  const std::vector<FixtureSample>& scenes) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "masks");

  nlohmann::json ann;
  ann["images"] = nlohmann::json::array();
  ann["boxes"] = nlohmann::json::array();
  for (const auto& scene : scenes) {
    const int h = scene.rgb.dim(1), w = scene.rgb.dim(2);
    write_image_rgb((fs::path(dir) / "images" / (scene.id + ".png")).string(),
                    scene.rgb);
    nlohmann::json rec;
    rec["id"] = scene.id;
    rec["width"] = w;
    rec["height"] = h;
    rec["file"] = "images/" + scene.id + ".png";
    ann["images"].push_back(std::move(rec));
    for (std::size_t i = 0; i < scene.objects.size(); ++i) {
      const auto& obj = scene.objects[i];
      write_mask((fs::path(dir) / "masks" /
                  io_detail::mask_file_name(scene.id, i))
                     .string(),
                 obj.mask);
      nlohmann::json box;
      box["image_id"] = scene.id;
      box["bbox"] = {obj.box.x0, obj.box.y0, obj.box.x1, obj.box.y1};
      box["score"] = obj.box.confidence;
      box["label"] = obj.box.label;
      ann["boxes"].push_back(std::move(box));
    }
  }
  std::ofstream out(fs::path(dir) / "annotations.json", std::ios::trunc);
  if (!out)
    throw std::runtime_error("write_fixture_dataset: cannot write " + dir);
  out << ann.dump(2) << "\n";
}

// Loads a directory dataset written in the layout above. Image files
// are resolved relative to the annotation file's directory. Masks are
// optional; when the masks directory exists each box gets its mask by
// position, and a missing file simply leaves that slot empty.
inline Dataset load_dataset(const std::string& annotations_path) {
  namespace fs = std::filesystem;
  AnnotationStore store = load_annotations(annotations_path);
  const fs::path root = fs::path(annotations_path).parent_path();

  Dataset ds;
  for (const auto& [id, info] : store.images) {
    Tensor rgb = read_image_rgb((root / info.file).string());
    if (rgb.dim(1) != info.height || rgb.dim(2) != info.width)
      throw std::runtime_error("load_dataset: size of " + info.file +
                               " disagrees with its annotation record");
    std::vector<BoundingBox> boxes;
    auto det = store.detections.find(id);
    if (det != store.detections.end()) boxes = det->second.boxes;

    std::vector<Tensor> masks(boxes.size());
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      const fs::path mask_path =
          root / "masks" / io_detail::mask_file_name(id, i);
      if (fs::exists(mask_path)) masks[i] = read_mask(mask_path.string());
    }
    ds.samples.push_back(
        sample_from_rgb(id, std::move(rgb), std::move(boxes),
                        std::move(masks)));
  }
  if (ds.empty()) throw std::runtime_error("load_dataset: no images found");
  return ds;
}

}  // namespace colorfuse
