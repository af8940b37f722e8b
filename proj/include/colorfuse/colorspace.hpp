#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "colorfuse/tensor.hpp"

namespace colorfuse {

// sRGB <-> CIE L*a*b* under the D65 illuminant. The Lab cube used
// throughout the model normalizes L to [-1,1] via L/50-1 and a,b via
// division by 128.

namespace lab_detail {

// sRGB to XYZ (linear light), D65. The white point is taken as the row
// sums of this matrix so that gray inputs map to exactly a=b=0.
constexpr double kM[3][3] = {
    {0.4124564, 0.3575761, 0.1804375},
    {0.2126729, 0.7151522, 0.0721750},
    {0.0193339, 0.1191920, 0.9503041},
};
constexpr double kWx = kM[0][0] + kM[0][1] + kM[0][2];
constexpr double kWy = kM[1][0] + kM[1][1] + kM[1][2];
constexpr double kWz = kM[2][0] + kM[2][1] + kM[2][2];

constexpr double kEps = 216.0 / 24389.0;   // (6/29)^3
constexpr double kKappa = 24389.0 / 27.0;  // (29/3)^3

inline double srgb_decode(double u) {
  return u <= 0.04045 ? u / 12.92 : std::pow((u + 0.055) / 1.055, 2.4);
}

inline double srgb_encode(double u) {
  return u <= 0.0031308 ? 12.92 * u : 1.055 * std::pow(u, 1.0 / 2.4) - 0.055;
}

inline double lab_f(double t) {
  return t > kEps ? std::cbrt(t) : (kKappa * t + 16.0) / 116.0;
}

inline double lab_finv(double t) {
  const double t3 = t * t * t;
  return t3 > kEps ? t3 : (116.0 * t - 16.0) / kKappa;
}

// Exact inverse of kM (cofactor expansion), so rgb->lab->rgb round-trips
// at double precision instead of drifting through a truncated published
// inverse.
struct InvMatrix {
  double m[3][3];
};

inline const InvMatrix& inv_m() {
  static const InvMatrix inv = [] {
    const auto& a = kM;
    const double det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) -
                       a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0]) +
                       a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
    InvMatrix r;
    r.m[0][0] = (a[1][1] * a[2][2] - a[1][2] * a[2][1]) / det;
    r.m[0][1] = (a[0][2] * a[2][1] - a[0][1] * a[2][2]) / det;
    r.m[0][2] = (a[0][1] * a[1][2] - a[0][2] * a[1][1]) / det;
    r.m[1][0] = (a[1][2] * a[2][0] - a[1][0] * a[2][2]) / det;
    r.m[1][1] = (a[0][0] * a[2][2] - a[0][2] * a[2][0]) / det;
    r.m[1][2] = (a[0][2] * a[1][0] - a[0][0] * a[1][2]) / det;
    r.m[2][0] = (a[1][0] * a[2][1] - a[1][1] * a[2][0]) / det;
    r.m[2][1] = (a[0][1] * a[2][0] - a[0][0] * a[2][1]) / det;
    r.m[2][2] = (a[0][0] * a[1][1] - a[0][1] * a[1][0]) / det;
    return r;
  }();
  return inv;
}

}  // namespace lab_detail

// r,g,b in [0,255]; writes L in [0,100], a,b roughly in [-128,128).
inline void rgb_to_lab(double r, double g, double b, double& ll, double& la,
                       double& lb) {
  using namespace lab_detail;
  const double rl = srgb_decode(r / 255.0);
  const double gl = srgb_decode(g / 255.0);
  const double bl = srgb_decode(b / 255.0);
  const double x = kM[0][0] * rl + kM[0][1] * gl + kM[0][2] * bl;
  const double y = kM[1][0] * rl + kM[1][1] * gl + kM[1][2] * bl;
  const double z = kM[2][0] * rl + kM[2][1] * gl + kM[2][2] * bl;
  const double fx = lab_f(x / kWx);
  const double fy = lab_f(y / kWy);
  const double fz = lab_f(z / kWz);
  ll = 116.0 * fy - 16.0;
  la = 500.0 * (fx - fy);
  lb = 200.0 * (fy - fz);
}

// Inverse transform; outputs are clamped to [0,255]. Zero (or negative)
// lightness renders black: chroma carries no displayable energy there,
// and only pure black is in-gamut at L=0 anyway.
inline void lab_to_rgb(double ll, double la, double lb, double& r, double& g,
                       double& b) {
  using namespace lab_detail;
  if (ll <= 0.0) {
    r = g = b = 0.0;
    return;
  }
  const double fy = (ll + 16.0) / 116.0;
  const double fx = fy + la / 500.0;
  const double fz = fy - lb / 200.0;
  const double x = kWx * lab_finv(fx);
  const double y = kWy * lab_finv(fy);
  const double z = kWz * lab_finv(fz);
  const auto& iv = inv_m().m;
  const double rl = iv[0][0] * x + iv[0][1] * y + iv[0][2] * z;
  const double gl = iv[1][0] * x + iv[1][1] * y + iv[1][2] * z;
  const double bl = iv[2][0] * x + iv[2][1] * y + iv[2][2] * z;
  r = std::clamp(srgb_encode(rl) * 255.0, 0.0, 255.0);
  g = std::clamp(srgb_encode(gl) * 255.0, 0.0, 255.0);
  b = std::clamp(srgb_encode(bl) * 255.0, 0.0, 255.0);
}

// An image split into its lightness plane (L, [H,W], range [0,100]) and
// chrominance pair (ab, [2,H,W]).
struct LabImage {
  Tensor L;
  Tensor ab;

  int height() const { return L.dim(0); }
  int width() const { return L.dim(1); }
};

enum class RgbRange { u8, unit };

// [3,H,W] raster to LabImage. Values must sit in the declared range.
inline LabImage rgb_to_lab(const Tensor& rgb, RgbRange range = RgbRange::u8) {
  if (rgb.rank() != 3 || rgb.dim(0) != 3)
    throw std::invalid_argument("rgb_to_lab: expects a [3,H,W] raster");
  const double hi = range == RgbRange::u8 ? 255.0 : 1.0;
  for (std::size_t i = 0; i < rgb.size(); ++i) {
    const double v = rgb[i];
    if (!(v >= 0.0 && v <= hi))
      throw std::invalid_argument("rgb_to_lab: pixel value outside [0," +
                                  std::to_string(hi) + "]");
  }
  const double s = 255.0 / hi;
  const int h = rgb.dim(1), w = rgb.dim(2);
  LabImage img{Tensor({h, w}), Tensor({2, h, w})};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double ll, la, lb;
      rgb_to_lab(s * rgb.at(0, y, x), s * rgb.at(1, y, x), s * rgb.at(2, y, x),
                 ll, la, lb);
      img.L.at(y, x) = ll;
      img.ab.at(0, y, x) = la;
      img.ab.at(1, y, x) = lb;
    }
  return img;
}

// LabImage to [3,H,W] raster in 0..255, clipped to the displayable range.
inline Tensor lab_to_rgb(const LabImage& img) {
  const int h = img.height(), w = img.width();
  Tensor rgb({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double r, g, b;
      const double ll = img.L.at(y, x);
      if (!std::isfinite(ll) || !std::isfinite(img.ab.at(0, y, x)) ||
          !std::isfinite(img.ab.at(1, y, x)))
        throw std::invalid_argument("lab_to_rgb: non-finite value");
      lab_to_rgb(ll, img.ab.at(0, y, x), img.ab.at(1, y, x), r, g, b);
      rgb.at(0, y, x) = r;
      rgb.at(1, y, x) = g;
      rgb.at(2, y, x) = b;
    }
  return rgb;
}

inline std::pair<Tensor, Tensor> split_channels(const LabImage& img) {
  return {img.L, img.ab};
}

inline LabImage merge_channels(const Tensor& l, const Tensor& ab) {
  if (l.rank() != 2 || ab.rank() != 3 || ab.dim(0) != 2 ||
      ab.dim(1) != l.dim(0) || ab.dim(2) != l.dim(1))
    throw std::invalid_argument("merge_channels: dimension mismatch");
  return LabImage{l, ab};
}

// [3,H,W] RGB (0..255) to [3,H,W] Lab (unnormalized units).
inline Tensor rgb_image_to_lab(const Tensor& rgb) {
  if (rgb.rank() != 3 || rgb.dim(0) != 3)
    throw std::invalid_argument("rgb_image_to_lab: expects [3,H,W]");
  const int h = rgb.dim(1), w = rgb.dim(2);
  Tensor lab({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double ll, la, lb;
      rgb_to_lab(rgb.at(0, y, x), rgb.at(1, y, x), rgb.at(2, y, x), ll, la, lb);
      lab.at(0, y, x) = ll;
      lab.at(1, y, x) = la;
      lab.at(2, y, x) = lb;
    }
  return lab;
}

inline Tensor lab_image_to_rgb(const Tensor& lab) {
  if (lab.rank() != 3 || lab.dim(0) != 3)
    throw std::invalid_argument("lab_image_to_rgb: expects [3,H,W]");
  const int h = lab.dim(1), w = lab.dim(2);
  Tensor rgb({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double r, g, b;
      lab_to_rgb(lab.at(0, y, x), lab.at(1, y, x), lab.at(2, y, x), r, g, b);
      rgb.at(0, y, x) = r;
      rgb.at(1, y, x) = g;
      rgb.at(2, y, x) = b;
    }
  return rgb;
}

// Network-facing normalization. L in [0,100] maps to [-1,1]; a,b map by
// 1/128 so the usual gamut sits inside [-1,1].
inline double normalize_l(double ll) { return ll / 50.0 - 1.0; }
inline double denormalize_l(double ln) { return (ln + 1.0) * 50.0; }
inline double normalize_ab(double v) { return v / 128.0; }
inline double denormalize_ab(double v) { return v * 128.0; }

// Splits an RGB image into the network input (normalized L, [1,H,W]) and
// regression target (normalized ab, [2,H,W]).
inline void split_lab_channels(const Tensor& rgb, Tensor& l_norm,
                               Tensor& ab_norm) {
  const Tensor lab = rgb_image_to_lab(rgb);
  const int h = lab.dim(1), w = lab.dim(2);
  l_norm = Tensor({1, h, w});
  ab_norm = Tensor({2, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      l_norm.at(0, y, x) = normalize_l(lab.at(0, y, x));
      ab_norm.at(0, y, x) = normalize_ab(lab.at(1, y, x));
      ab_norm.at(1, y, x) = normalize_ab(lab.at(2, y, x));
    }
}

// Recombines a normalized L channel with predicted normalized ab into an
// RGB image (0..255 doubles, clamped).
inline Tensor merge_lab_channels(const Tensor& l_norm, const Tensor& ab_norm) {
  if (l_norm.rank() != 3 || l_norm.dim(0) != 1)
    throw std::invalid_argument("merge_lab_channels: L expects [1,H,W]");
  if (ab_norm.rank() != 3 || ab_norm.dim(0) != 2)
    throw std::invalid_argument("merge_lab_channels: ab expects [2,H,W]");
  const int h = l_norm.dim(1), w = l_norm.dim(2);
  if (ab_norm.dim(1) != h || ab_norm.dim(2) != w)
    throw std::invalid_argument("merge_lab_channels: size mismatch");
  Tensor lab({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      lab.at(0, y, x) = denormalize_l(l_norm.at(0, y, x));
      lab.at(1, y, x) = denormalize_ab(ab_norm.at(0, y, x));
      lab.at(2, y, x) = denormalize_ab(ab_norm.at(1, y, x));
    }
  return lab_image_to_rgb(lab);
}

// Grayscale conversion used when the pipeline is fed an already-color
// image: keep L, zero the chroma.
inline Tensor desaturate(const Tensor& rgb) {
  const Tensor lab = rgb_image_to_lab(rgb);
  const int h = lab.dim(1), w = lab.dim(2);
  Tensor gray({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double r, g, b;
      lab_to_rgb(lab.at(0, y, x), 0.0, 0.0, r, g, b);
      gray.at(0, y, x) = r;
      gray.at(1, y, x) = g;
      gray.at(2, y, x) = b;
    }
  return gray;
}

}  // namespace colorfuse
