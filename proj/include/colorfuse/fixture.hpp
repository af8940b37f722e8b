#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "colorfuse/colorspace.hpp"
#include "colorfuse/detection.hpp"
#include "colorfuse/tensor.hpp"

namespace colorfuse {

// Synthetic scenes for end-to-end checks: striped diamonds on a textured
// gray background. The chroma of a diamond is a fixed function of its
// size class, while its stripe texture has a constant period in image
// space. A crop that is resized to the network input side therefore
// carries the object size in its stripe frequency, which is exactly the
// cue an instance branch can exploit and a full-image branch cannot
// recover from a local patch.
struct FixtureObject {
  BoundingBox box;
  Tensor mask;  // [H,W], 1.0 inside the diamond
  int size_class = 0;
};

struct FixtureSample {
  std::string id;
  Tensor rgb;  // [3,H,W], values in [0,255]
  std::vector<FixtureObject> objects;
};

namespace fixture_detail {

constexpr int kSizeClasses[4] = {12, 16, 24, 32};
constexpr int kStripePeriod = 4;  // image-space pixels per L stripe cycle

// Chroma per size class, spaced a quarter turn apart.
inline void class_chroma(int cls, double* a, double* b) {
  constexpr double kRadius = 32.0;
  switch (cls & 3) {
    case 0: *a = kRadius; *b = 0.0; return;
    case 1: *a = 0.0; *b = kRadius; return;
    case 2: *a = -kRadius; *b = 0.0; return;
    default: *a = 0.0; *b = -kRadius; return;
  }
}

inline bool boxes_overlap(const BoundingBox& a, const BoundingBox& b,
                          int margin) {
  return a.x0 < b.x1 + margin && b.x0 < a.x1 + margin &&
         a.y0 < b.y1 + margin && b.y0 < a.y1 + margin;
}

}  // namespace fixture_detail

inline FixtureSample generate_fixture_sample(int side, std::uint64_t seed,
                                             const std::string& id) {
  using namespace fixture_detail;
  if (side < kSizeClasses[3] + 2)
    throw std::invalid_argument("generate_fixture_sample: side too small");
  Rng rng(seed);

  FixtureSample sample;
  sample.id = id;

  // Lab planes first; RGB is derived at the end so ground truth is always
  // a realizable image.
  Tensor lum({side, side});
  Tensor ca({side, side});
  Tensor cb({side, side});

  // Background: vertical lightness ramp, coarse checker texture, and a
  // small per-image tint. The tint is independent of everything else in
  // the scene, so background chroma stays unpredictable by design.
  const double tint_a = rng.uniform(-3.0, 3.0);
  const double tint_b = rng.uniform(-3.0, 3.0);
  for (int y = 0; y < side; ++y) {
    const double ramp = 28.0 + 14.0 * static_cast<double>(y) / (side - 1);
    for (int x = 0; x < side; ++x) {
      const double checker = (((x / 8) + (y / 8)) % 2 == 0) ? 2.0 : -2.0;
      lum.at(y, x) = ramp + checker;
      ca.at(y, x) = tint_a;
      cb.at(y, x) = tint_b;
    }
  }

  const int count = rng.uniform_int(1, 3);
  for (int n = 0; n < count; ++n) {
    const int cls = rng.uniform_int(0, 3);
    const int s = kSizeClasses[cls];

    // Rejection-sample a position that keeps diamonds apart.
    BoundingBox box;
    bool placed = false;
    for (int attempt = 0; attempt < 64 && !placed; ++attempt) {
      box.x0 = rng.uniform_int(1, side - s - 1);
      box.y0 = rng.uniform_int(1, side - s - 1);
      box.x1 = box.x0 + s;
      box.y1 = box.y0 + s;
      placed = true;
      for (const auto& other : sample.objects)
        if (boxes_overlap(box, other.box, 2)) placed = false;
    }
    if (!placed) continue;
    box.confidence = rng.uniform(0.75, 1.0);
    box.label = "diamond";

    double obj_a = 0.0, obj_b = 0.0;
    class_chroma(cls, &obj_a, &obj_b);

    FixtureObject obj;
    obj.box = box;
    obj.size_class = cls;
    obj.mask = Tensor({side, side});
    const double ccx = box.x0 + s / 2.0 - 0.5;
    const double ccy = box.y0 + s / 2.0 - 0.5;
    const double radius = s / 2.0 - 0.5;
    for (int y = box.y0; y < box.y1; ++y) {
      for (int x = box.x0; x < box.x1; ++x) {
        if (std::abs(x - ccx) + std::abs(y - ccy) > radius + 1e-9) continue;
        obj.mask.at(y, x) = 1.0;
        const bool hi = (x / (kStripePeriod / 2)) % 2 == 0;
        lum.at(y, x) = hi ? 62.0 : 48.0;
        ca.at(y, x) = obj_a;
        cb.at(y, x) = obj_b;
      }
    }
    sample.objects.push_back(std::move(obj));
  }

  sample.rgb = Tensor({3, side, side});
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      double r, g, b;
      lab_to_rgb(lum.at(y, x), ca.at(y, x), cb.at(y, x), r, g, b);
      sample.rgb.at(0, y, x) = std::round(r);
      sample.rgb.at(1, y, x) = std::round(g);
      sample.rgb.at(2, y, x) = std::round(b);
    }
  }
  return sample;
}

// A deterministic batch of scenes. Image ids are zero-padded so
// lexicographic and generation order agree.
inline std::vector<FixtureSample> generate_fixture(int count,
                                                   std::uint64_t seed,
                                                   int side = 64) {
  if (count <= 0)
    throw std::invalid_argument("generate_fixture: count must be positive");
  std::vector<FixtureSample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "fixture_%04d", i);
    out.push_back(generate_fixture_sample(side, seed * 1000003ull + i, name));
  }
  return out;
}

}  // namespace colorfuse
