#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "colorfuse/colorspace.hpp"
#include "colorfuse/dataset.hpp"
#include "colorfuse/detection.hpp"
#include "colorfuse/tensor.hpp"

namespace colorfuse {

// Peak signal-to-noise ratio in dB. Identical inputs have no error to
// measure, which is reported as +infinity.
inline double psnr(const Tensor& a, const Tensor& b, double peak = 255.0) {
  check_same_shape(a, b, "psnr");
  if (peak <= 0.0) throw std::invalid_argument("psnr: peak must be > 0");
  if (a.size() == 0) throw std::invalid_argument("psnr: empty input");
  double mse = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

namespace eval_detail {

constexpr int kSsimRadius = 5;  // 11x11 window
constexpr double kSsimSigma = 1.5;

inline const std::vector<double>& ssim_kernel() {
  static const std::vector<double> k = [] {
    std::vector<double> taps(2 * kSsimRadius + 1);
    double sum = 0.0;
    for (int d = -kSsimRadius; d <= kSsimRadius; ++d) {
      const double v = std::exp(-0.5 * d * d / (kSsimSigma * kSsimSigma));
      taps[d + kSsimRadius] = v;
      sum += v;
    }
    for (double& v : taps) v /= sum;
    return taps;
  }();
  return k;
}

inline Tensor channel_plane(const Tensor& img, int c) {
  const int h = img.shape()[1], w = img.shape()[2];
  Tensor out({h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out.at(y, x) = img.at(c, y, x);
  return out;
}

// Separable valid-window filter: output is (H-2r) x (W-2r).
inline Tensor gaussian_valid(const Tensor& x) {
  const auto& k = ssim_kernel();
  const int h = x.shape()[0], w = x.shape()[1];
  const int r = kSsimRadius;
  Tensor horiz({h, w - 2 * r});
  for (int y = 0; y < h; ++y)
    for (int ox = 0; ox < w - 2 * r; ++ox) {
      double acc = 0.0;
      for (int t = 0; t < 2 * r + 1; ++t) acc += k[t] * x.at(y, ox + t);
      horiz.at(y, ox) = acc;
    }
  Tensor out({h - 2 * r, w - 2 * r});
  for (int oy = 0; oy < h - 2 * r; ++oy)
    for (int ox = 0; ox < w - 2 * r; ++ox) {
      double acc = 0.0;
      for (int t = 0; t < 2 * r + 1; ++t) acc += k[t] * horiz.at(oy + t, ox);
      out.at(oy, ox) = acc;
    }
  return out;
}

}  // namespace eval_detail

// Structural similarity of two planes with the standard Gaussian window
// (11x11, sigma 1.5) and stability constants K1=0.01, K2=0.03. Only
// positions where the window fits entirely contribute, and covariance is
// the plain weighted second moment without sample correction.
inline double ssim_plane(const Tensor& x, const Tensor& y,
                         double data_range = 255.0, double k1 = 0.01,
                         double k2 = 0.03) {
  check_same_shape(x, y, "ssim_plane");
  if (x.shape().size() != 2)
    throw std::invalid_argument("ssim_plane: expected a [H,W] plane");
  const int h = x.shape()[0], w = x.shape()[1];
  const int win = 2 * eval_detail::kSsimRadius + 1;
  if (h < win || w < win)
    throw std::invalid_argument("ssim_plane: plane smaller than the window");
  if (data_range <= 0.0)
    throw std::invalid_argument("ssim_plane: data_range must be > 0");

  Tensor xx({h, w}), yy({h, w}), xy({h, w});
  for (int i = 0; i < h * w; ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const Tensor ux = eval_detail::gaussian_valid(x);
  const Tensor uy = eval_detail::gaussian_valid(y);
  const Tensor uxx = eval_detail::gaussian_valid(xx);
  const Tensor uyy = eval_detail::gaussian_valid(yy);
  const Tensor uxy = eval_detail::gaussian_valid(xy);

  const double c1 = (k1 * data_range) * (k1 * data_range);
  const double c2 = (k2 * data_range) * (k2 * data_range);
  double acc = 0.0;
  for (std::size_t i = 0; i < ux.size(); ++i) {
    const double vx = uxx[i] - ux[i] * ux[i];
    const double vy = uyy[i] - uy[i] * uy[i];
    const double vxy = uxy[i] - ux[i] * uy[i];
    const double num = (2.0 * ux[i] * uy[i] + c1) * (2.0 * vxy + c2);
    const double den = (ux[i] * ux[i] + uy[i] * uy[i] + c1) * (vx + vy + c2);
    acc += num / den;
  }
  return acc / static_cast<double>(ux.size());
}

// Channel mean of the per-plane score. Accepts [H,W] or [C,H,W].
inline double ssim(const Tensor& a, const Tensor& b,
                   double data_range = 255.0) {
  check_same_shape(a, b, "ssim");
  if (a.shape().size() == 2) return ssim_plane(a, b, data_range);
  if (a.shape().size() != 3)
    throw std::invalid_argument("ssim: expected [H,W] or [C,H,W]");
  const int channels = a.shape()[0];
  double acc = 0.0;
  for (int c = 0; c < channels; ++c)
    acc += ssim_plane(eval_detail::channel_plane(a, c),
                      eval_detail::channel_plane(b, c), data_range);
  return acc / static_cast<double>(channels);
}

// Rebuilds an RGB prediction from the ground-truth luminance and the
// model's chroma, which is how colorization output is scored.
inline Tensor recompose_with_gt_l(const Tensor& gt_rgb,
                                  const Tensor& ab_norm) {
  Tensor l_norm, ab_gt;
  split_lab_channels(gt_rgb, l_norm, ab_gt);
  return merge_lab_channels(l_norm, ab_norm);
}

// External full-reference metric supplied by the embedding application.
// It sees ground truth first, prediction second, both as [3,H,W] RGB.
using PerceptualMetricHook =
    std::function<double(const Tensor& gt_rgb, const Tensor& pred_rgb)>;

struct EvaluationOptions {
  PerceptualMetricHook perceptual;  // empty: column is omitted entirely
  double data_range = 255.0;
};

struct MetricRow {
  std::string image_id;
  std::string instance_id;  // empty for whole-image rows
  double psnr_db = 0.0;
  double ssim = std::numeric_limits<double>::quiet_NaN();
  bool perceptual_ok = false;
  bool perceptual_failed = false;
  double perceptual = 0.0;
};

struct MetricReport {
  bool perceptual_enabled = false;
  std::vector<MetricRow> rows;
  double mean_psnr_db = std::numeric_limits<double>::quiet_NaN();
  double mean_ssim = std::numeric_limits<double>::quiet_NaN();
  double mean_perceptual = std::numeric_limits<double>::quiet_NaN();
};

namespace eval_detail {

inline MetricRow score_pair(const Tensor& gt, const Tensor& pred,
                            const EvaluationOptions& opt, std::string image_id,
                            std::string instance_id) {
  MetricRow row;
  row.image_id = std::move(image_id);
  row.instance_id = std::move(instance_id);
  row.psnr_db = psnr(gt, pred, opt.data_range);
  const int win = 2 * kSsimRadius + 1;
  if (gt.shape()[1] >= win && gt.shape()[2] >= win)
    row.ssim = ssim(gt, pred, opt.data_range);
  if (opt.perceptual) {
    try {
      row.perceptual = opt.perceptual(gt, pred);
      row.perceptual_ok = true;
    } catch (const std::exception&) {
      // The external metric is best effort; its failure must not take
      // down the evaluation run.
      row.perceptual_failed = true;
    }
  }
  return row;
}

inline double finite_mean(const std::vector<double>& vals) {
  double acc = 0.0;
  std::size_t n = 0;
  for (double v : vals)
    if (std::isfinite(v)) {
      acc += v;
      ++n;
    }
  if (n == 0) return std::numeric_limits<double>::quiet_NaN();
  return acc / static_cast<double>(n);
}

}  // namespace eval_detail

// Produces the prediction for one sample as [3,H,W] RGB.
using Predictor = std::function<Tensor(const Sample&)>;

// Scores every image and, using the same ground-truth boxes that drive
// the instance branch, every instance crop. Footer means skip non-finite
// entries so a single perfect (infinite PSNR) or tiny-crop row cannot
// poison the aggregate.
inline MetricReport evaluate_dataset(const Dataset& data,
                                     const Predictor& predict,
                                     const EvaluationOptions& opt = {}) {
  if (data.empty())
    throw std::invalid_argument("evaluate_dataset: dataset is empty");
  if (!predict)
    throw std::invalid_argument("evaluate_dataset: predictor is empty");

  MetricReport report;
  report.perceptual_enabled = static_cast<bool>(opt.perceptual);
  std::vector<double> all_psnr, all_ssim, all_perc;
  for (const auto& s : data.samples) {
    Tensor pred = predict(s);
    check_same_shape(s.rgb, pred, "evaluate_dataset prediction");
    report.rows.push_back(
        eval_detail::score_pair(s.rgb, pred, opt, s.id, ""));
    for (std::size_t i = 0; i < s.boxes.size(); ++i) {
      Tensor gt_crop = crop_image(s.rgb, s.boxes[i]);
      Tensor pred_crop = crop_image(pred, s.boxes[i]);
      report.rows.push_back(eval_detail::score_pair(
          gt_crop, pred_crop, opt, s.id, std::to_string(i)));
    }
  }
  for (const auto& row : report.rows) {
    all_psnr.push_back(row.psnr_db);
    all_ssim.push_back(row.ssim);
    if (row.perceptual_ok) all_perc.push_back(row.perceptual);
  }
  report.mean_psnr_db = eval_detail::finite_mean(all_psnr);
  report.mean_ssim = eval_detail::finite_mean(all_ssim);
  if (report.perceptual_enabled)
    report.mean_perceptual = eval_detail::finite_mean(all_perc);
  return report;
}

namespace eval_detail {

inline std::string format_metric(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

}  // namespace eval_detail

inline std::string metrics_to_csv(const MetricReport& report) {
  std::string out = "image_id,instance_id,psnr_db,ssim";
  if (report.perceptual_enabled) out += ",perceptual";
  out += "\n";
  auto row_line = [&](const MetricRow& r) {
    out += r.image_id + "," + r.instance_id + "," +
           eval_detail::format_metric(r.psnr_db) + "," +
           eval_detail::format_metric(r.ssim);
    if (report.perceptual_enabled) {
      out += ",";
      if (r.perceptual_failed)
        out += "failed";
      else if (r.perceptual_ok)
        out += eval_detail::format_metric(r.perceptual);
    }
    out += "\n";
  };
  for (const auto& r : report.rows) row_line(r);
  out += "mean,," + eval_detail::format_metric(report.mean_psnr_db) + "," +
         eval_detail::format_metric(report.mean_ssim);
  if (report.perceptual_enabled)
    out += "," + eval_detail::format_metric(report.mean_perceptual);
  out += "\n";
  return out;
}

// JSON numbers cannot carry inf or nan, so those become null here; the
// CSV rendering preserves them as text.
inline nlohmann::json metrics_to_json(const MetricReport& report) {
  auto number_or_null = [](double v) -> nlohmann::json {
    if (!std::isfinite(v)) return nullptr;
    return v;
  };
  nlohmann::json j;
  j["rows"] = nlohmann::json::array();
  for (const auto& r : report.rows) {
    nlohmann::json row;
    row["image_id"] = r.image_id;
    row["instance_id"] = r.instance_id;
    row["psnr_db"] = number_or_null(r.psnr_db);
    row["ssim"] = number_or_null(r.ssim);
    if (report.perceptual_enabled) {
      if (r.perceptual_failed)
        row["perceptual"] = "failed";
      else if (r.perceptual_ok)
        row["perceptual"] = number_or_null(r.perceptual);
      else
        row["perceptual"] = nullptr;
    }
    j["rows"].push_back(std::move(row));
  }
  j["means"]["psnr_db"] = number_or_null(report.mean_psnr_db);
  j["means"]["ssim"] = number_or_null(report.mean_ssim);
  if (report.perceptual_enabled)
    j["means"]["perceptual"] = number_or_null(report.mean_perceptual);
  return j;
}

inline void write_metrics_csv(const std::string& path,
                              const MetricReport& report) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("write_metrics_csv: cannot open " + path);
  out << metrics_to_csv(report);
}

inline void write_metrics_json(const std::string& path,
                               const MetricReport& report) {
  std::ofstream out(path, std::ios::trunc);
  if (!out)
    throw std::runtime_error("write_metrics_json: cannot open " + path);
  out << metrics_to_json(report).dump(2) << "\n";
}

}  // namespace colorfuse
