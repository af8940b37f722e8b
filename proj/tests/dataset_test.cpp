#include <cmath>
#include <set>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "colorfuse/colorspace.hpp"
#include "colorfuse/dataset.hpp"
#include "colorfuse/detection.hpp"
#include "colorfuse/fixture.hpp"

namespace cf = colorfuse;

namespace {

bool overlaps(const cf::BoundingBox& a, const cf::BoundingBox& b) {
  return a.x0 < b.x1 && b.x0 < a.x1 && a.y0 < b.y1 && b.y0 < a.y1;
}

}  // namespace

TEST(FixtureTest, GenerationIsDeterministic) {
  auto a = cf::generate_fixture(4, 9);
  auto b = cf::generate_fixture(4, 9);
  ASSERT_EQ(a.size(), 4u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].id, b[i].id);
    ASSERT_TRUE(a[i].rgb.same_shape(b[i].rgb));
    for (std::size_t j = 0; j < a[i].rgb.size(); ++j)
      ASSERT_EQ(a[i].rgb[j], b[i].rgb[j]);
    ASSERT_EQ(a[i].objects.size(), b[i].objects.size());
    for (std::size_t j = 0; j < a[i].objects.size(); ++j) {
      EXPECT_EQ(a[i].objects[j].box.x0, b[i].objects[j].box.x0);
      EXPECT_EQ(a[i].objects[j].box.confidence, b[i].objects[j].box.confidence);
    }
  }
  auto c = cf::generate_fixture(4, 10);
  bool any_diff = false;
  for (std::size_t j = 0; j < a[0].rgb.size(); ++j)
    if (a[0].rgb[j] != c[0].rgb[j]) any_diff = true;
  EXPECT_TRUE(any_diff);
}

TEST(FixtureTest, ImagesAreValidAndObjectsStayApart) {
  auto scenes = cf::generate_fixture(12, 3);
  for (const auto& scene : scenes) {
    ASSERT_EQ(scene.rgb.shape()[0], 3);
    const int side = scene.rgb.shape()[1];
    for (std::size_t j = 0; j < scene.rgb.size(); ++j) {
      ASSERT_GE(scene.rgb[j], 0.0);
      ASSERT_LE(scene.rgb[j], 255.0);
      ASSERT_EQ(scene.rgb[j], std::round(scene.rgb[j]));
    }
    for (std::size_t i = 0; i < scene.objects.size(); ++i) {
      const auto& obj = scene.objects[i];
      EXPECT_GE(obj.box.x0, 0);
      EXPECT_GE(obj.box.y0, 0);
      EXPECT_LE(obj.box.x1, side);
      EXPECT_LE(obj.box.y1, side);
      EXPECT_FALSE(obj.box.degenerate());
      for (std::size_t k = i + 1; k < scene.objects.size(); ++k)
        EXPECT_FALSE(overlaps(obj.box, scene.objects[k].box));
    }
  }
}

TEST(FixtureTest, MasksLiveInsideBoxesAndCoverDiamonds) {
  auto scenes = cf::generate_fixture(8, 21);
  int checked = 0;
  for (const auto& scene : scenes) {
    const int side = scene.rgb.shape()[1];
    for (const auto& obj : scene.objects) {
      double area = 0.0;
      for (int y = 0; y < side; ++y) {
        for (int x = 0; x < side; ++x) {
          const double m = obj.mask.at(y, x);
          ASSERT_TRUE(m == 0.0 || m == 1.0);
          if (m == 1.0) {
            ASSERT_GE(x, obj.box.x0);
            ASSERT_LT(x, obj.box.x1);
            ASSERT_GE(y, obj.box.y0);
            ASSERT_LT(y, obj.box.y1);
            area += 1.0;
          }
        }
      }
      // A diamond fills about half of its bounding box.
      const double box_area =
          static_cast<double>(obj.box.width()) * obj.box.height();
      EXPECT_GT(area, 0.35 * box_area);
      EXPECT_LT(area, 0.65 * box_area);
      ++checked;
    }
  }
  EXPECT_GT(checked, 4);
}

TEST(FixtureTest, SizeClassesCarryDistinctChroma) {
  auto scenes = cf::generate_fixture(40, 5);
  double sum_a[4] = {0, 0, 0, 0};
  double sum_b[4] = {0, 0, 0, 0};
  double count[4] = {0, 0, 0, 0};
  for (const auto& scene : scenes) {
    const int side = scene.rgb.shape()[1];
    for (const auto& obj : scene.objects) {
      ASSERT_GE(obj.size_class, 0);
      ASSERT_LT(obj.size_class, 4);
      for (int y = 0; y < side; ++y) {
        for (int x = 0; x < side; ++x) {
          if (obj.mask.at(y, x) != 1.0) continue;
          double ll, aa, bb;
          cf::rgb_to_lab(scene.rgb.at(0, y, x), scene.rgb.at(1, y, x),
                         scene.rgb.at(2, y, x), ll, aa, bb);
          sum_a[obj.size_class] += aa;
          sum_b[obj.size_class] += bb;
          count[obj.size_class] += 1.0;
        }
      }
    }
  }
  for (int c = 0; c < 4; ++c) {
    ASSERT_GT(count[c], 0.0) << "class " << c << " never sampled";
    sum_a[c] /= count[c];
    sum_b[c] /= count[c];
  }
  // Every class mean sits near its nominal chroma and far from the others.
  const double nominal[4][2] = {{32, 0}, {0, 32}, {-32, 0}, {0, -32}};
  for (int c = 0; c < 4; ++c) {
    EXPECT_LT(std::hypot(sum_a[c] - nominal[c][0], sum_b[c] - nominal[c][1]),
              6.0)
        << "class " << c;
    for (int d = c + 1; d < 4; ++d)
      EXPECT_GT(std::hypot(sum_a[c] - sum_a[d], sum_b[c] - sum_b[d]), 20.0);
  }
}

TEST(FixtureTest, ObjectSizeIsNotReadableFromLocalStripePattern) {
  // Interior stripes use one fixed image-space period, so two objects of
  // different sizes expose identical local luminance patterns.
  auto scene_small = cf::generate_fixture_sample(64, 77, "s");
  std::set<double> lum_values;
  for (const auto& obj : scene_small.objects) {
    for (int y = obj.box.y0; y < obj.box.y1; ++y)
      for (int x = obj.box.x0; x < obj.box.x1; ++x)
        if (obj.mask.at(y, x) == 1.0) {
          double ll, aa, bb;
          cf::rgb_to_lab(scene_small.rgb.at(0, y, x),
                         scene_small.rgb.at(1, y, x),
                         scene_small.rgb.at(2, y, x), ll, aa, bb);
          lum_values.insert(std::round(ll));
        }
  }
  // Only the two stripe levels may appear, regardless of object size.
  EXPECT_LE(lum_values.size(), 2u);
}

TEST(FixtureTest, RejectsBadArguments) {
  EXPECT_THROW(cf::generate_fixture(0, 1), std::invalid_argument);
  EXPECT_THROW(cf::generate_fixture_sample(8, 1, "x"), std::invalid_argument);
}

TEST(DatasetTest, FixtureConversionProducesNormalizedPlanes) {
  auto scenes = cf::generate_fixture(3, 11);
  auto ds = cf::dataset_from_fixture(scenes);
  ASSERT_EQ(ds.size(), 3u);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& s = ds.samples[i];
    EXPECT_EQ(s.id, scenes[i].id);
    ASSERT_EQ(s.l_norm.shape()[0], 1);
    ASSERT_EQ(s.ab_norm.shape()[0], 2);
    EXPECT_EQ(s.boxes.size(), scenes[i].objects.size());
    EXPECT_EQ(s.masks.size(), scenes[i].objects.size());
    for (std::size_t j = 0; j < s.l_norm.size(); ++j) {
      ASSERT_GE(s.l_norm[j], -1.0);
      ASSERT_LE(s.l_norm[j], 1.0);
    }
    // Recombining the planes reproduces the source image up to the
    // 8-bit rounding applied by the generator.
    cf::Tensor rebuilt = cf::merge_lab_channels(s.l_norm, s.ab_norm);
    for (std::size_t j = 0; j < rebuilt.size(); ++j)
      ASSERT_NEAR(rebuilt[j], s.rgb[j], 1.0);
  }
}

TEST(DatasetTest, InstanceDatasetExpandsBoxes) {
  auto ds = cf::dataset_from_fixture(cf::generate_fixture(4, 19));
  std::size_t total_boxes = 0;
  for (const auto& s : ds.samples) total_boxes += s.boxes.size();
  ASSERT_GT(total_boxes, 0u);

  auto inst = cf::make_instance_dataset(ds, 32);
  ASSERT_EQ(inst.size(), total_boxes);
  for (const auto& s : inst.samples) {
    ASSERT_EQ(s.l_norm.shape()[0], 1);
    ASSERT_EQ(s.l_norm.shape()[1], 32);
    ASSERT_EQ(s.l_norm.shape()[2], 32);
    ASSERT_EQ(s.ab_norm.shape()[0], 2);
    ASSERT_EQ(s.ab_norm.shape()[1], 32);
    EXPECT_NE(s.id.find('#'), std::string::npos);
  }

  // Crops agree with doing the two steps by hand on the first box.
  const auto& src = ds.samples[0];
  if (!src.boxes.empty()) {
    cf::Tensor manual = cf::resize_image_bilinear(
        cf::crop_image(src.l_norm, src.boxes[0]), 32, 32);
    const auto& got = inst.samples[0].l_norm;
    for (std::size_t j = 0; j < manual.size(); ++j)
      ASSERT_EQ(manual[j], got[j]);
  }
  EXPECT_THROW(cf::make_instance_dataset(ds, 0), std::invalid_argument);
}

TEST(DatasetTest, InstanceInputsRespectCapByConfidence) {
  cf::Sample s;
  s.id = "img";
  s.l_norm = cf::Tensor({1, 16, 16});
  s.ab_norm = cf::Tensor({2, 16, 16});
  for (int i = 0; i < 5; ++i) {
    cf::BoundingBox b;
    b.x0 = i;
    b.y0 = 0;
    b.x1 = i + 4;
    b.y1 = 4;
    b.confidence = 0.5 + 0.1 * i;
    s.boxes.push_back(b);
  }
  auto all = cf::instance_inputs_for(s, 8);
  EXPECT_EQ(all.size(), 5u);
  auto capped = cf::instance_inputs_for(s, 8, 3);
  ASSERT_EQ(capped.size(), 3u);
  EXPECT_DOUBLE_EQ(capped[0].box.confidence, 0.9);
  EXPECT_DOUBLE_EQ(capped[1].box.confidence, 0.8);
  EXPECT_DOUBLE_EQ(capped[2].box.confidence, 0.7);
  for (const auto& in : capped) {
    ASSERT_EQ(in.l_crop.shape()[1], 8);
    ASSERT_EQ(in.l_crop.shape()[2], 8);
  }
}
