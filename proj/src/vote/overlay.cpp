#include "pother/vote/overlay.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "pother/core/error.hpp"
#include "pother/core/image_io.hpp"

namespace pother::vote {

namespace {

cv::Mat gray_to_bgr(const core::GrayImage& image) {
  auto q = core::to_u8(image);
  cv::Mat bgr;
  cv::cvtColor(core::as_mat(q), bgr, cv::COLOR_GRAY2BGR);
  return bgr;
}

// Blends heat into `dst` (CV_8UC3) in place; zero heat leaves pixels untouched.
void blend_heat(cv::Mat dst, const cv::Mat& heat, double gain) {
  cv::Mat heat8;
  heat.convertTo(heat8, CV_8U, 255.0);
  cv::Mat colored;
  cv::applyColorMap(heat8, colored, cv::COLORMAP_VIRIDIS);
  for (int r = 0; r < dst.rows; ++r) {
    auto* d = dst.ptr<cv::Vec3b>(r);
    const auto* c = colored.ptr<cv::Vec3b>(r);
    const auto* h = heat.ptr<float>(r);
    for (int col = 0; col < dst.cols; ++col) {
      const double a = std::clamp(gain * static_cast<double>(h[col]), 0.0, 1.0);
      if (a <= 0.0) continue;
      for (int k = 0; k < 3; ++k) {
        d[col][k] = cv::saturate_cast<std::uint8_t>((1.0 - a) * d[col][k] + a * c[col][k]);
      }
    }
  }
}

}  // namespace

cv::Vec3b class_color(core::ClassLabel label) {
  switch (label) {
    case core::ClassLabel::Normal: return {0, 255, 0};
    case core::ClassLabel::Pneumonia: return {255, 0, 0};
    case core::ClassLabel::Covid19: return {0, 0, 255};
  }
  return {255, 255, 255};
}

cv::Mat compose_overlay(const core::GrayImage& image, const VoteTally& tally, const std::vector<ActivationMap>& maps,
                        const OverlayConfig& config) {
  if (!maps.empty() && maps.size() != tally.votes.size()) {
    throw std::invalid_argument("compose_overlay: " + std::to_string(maps.size()) + " maps for " +
                                std::to_string(tally.votes.size()) + " votes");
  }
  cv::Mat canvas = gray_to_bgr(image);

  for (std::size_t i = 0; i < maps.size(); ++i) {
    const auto spec = patch::clamp_spec(tally.votes[i].spec);
    if (spec.source_size != image.rows() || spec.source_size != image.cols()) {
      throw std::invalid_argument("compose_overlay: patch spec does not match the image frame");
    }
    cv::Mat heat;
    cv::resize(core::as_mat(maps[i].heatmap), heat, cv::Size(spec.side, spec.side), 0, 0, cv::INTER_LINEAR);
    const double gain = config.alpha * (config.probability_weighting ? maps[i].weight : 1.0);
    blend_heat(canvas(cv::Rect(spec.col0(), spec.row0(), spec.side, spec.side)), heat, gain);
  }

  // Boxes go on last so overlapping windows cannot blend over them.
  for (const auto& v : tally.votes) {
    const auto spec = patch::clamp_spec(v.spec);
    const cv::Vec3b c = class_color(v.predicted);
    const int t = std::min(config.box_thickness, spec.side / 2);
    const cv::Rect outer(spec.col0(), spec.row0(), spec.side, spec.side);
    for (int k = 0; k < t; ++k) {
      cv::rectangle(canvas, cv::Rect(outer.x + k, outer.y + k, outer.width - 2 * k, outer.height - 2 * k),
                    cv::Scalar(c[0], c[1], c[2]), 1);
    }
  }

  if (!config.legend) return canvas;
  cv::Mat strip(config.legend_height, canvas.cols, CV_8UC3, cv::Scalar(0, 0, 0));
  const double scale = std::max(0.35, canvas.cols / 1400.0);
  int x = 8;
  const int baseline_y = config.legend_height / 2 + 6;
  for (auto label : core::kAllClasses) {
    const auto c = class_color(label);
    cv::rectangle(strip, cv::Rect(x, baseline_y - 14, 14, 14), cv::Scalar(c[0], c[1], c[2]), cv::FILLED);
    x += 20;
    const std::string name(core::to_string(label));
    cv::putText(strip, name, cv::Point(x, baseline_y), cv::FONT_HERSHEY_SIMPLEX, scale, cv::Scalar(255, 255, 255), 1);
    int base = 0;
    x += cv::getTextSize(name, cv::FONT_HERSHEY_SIMPLEX, scale, 1, &base).width + 18;
  }
  const std::string verdict = "final: " + std::string(core::to_string(tally.final)) + " (" +
                              std::to_string(tally.counts[core::to_index(tally.final)]) + "/" +
                              std::to_string(tally.votes.size()) + ")";
  const auto fc = class_color(tally.final);
  cv::putText(strip, verdict, cv::Point(x + 10, baseline_y), cv::FONT_HERSHEY_SIMPLEX, scale,
              cv::Scalar(fc[0], fc[1], fc[2]), 1);
  cv::Mat out;
  cv::vconcat(canvas, strip, out);
  return out;
}

cv::Mat render_patch_map(const core::GrayImage& patch, const ActivationMap& map, const OverlayConfig& config) {
  cv::Mat canvas = gray_to_bgr(patch);
  cv::Mat heat;
  cv::resize(core::as_mat(map.heatmap), heat, cv::Size(patch.cols(), patch.rows()), 0, 0, cv::INTER_LINEAR);
  blend_heat(canvas, heat, config.alpha * (config.probability_weighting ? map.weight : 1.0));
  const auto c = class_color(map.target_class);
  cv::rectangle(canvas, cv::Rect(0, 0, canvas.cols, canvas.rows), cv::Scalar(c[0], c[1], c[2]),
                std::max(1, config.box_thickness));
  return canvas;
}

cv::Mat compose_global_overlay(const core::GrayImage& image, const ActivationMap& map, int row_offset,
                               const OverlayConfig& config) {
  if (row_offset < 0 || row_offset >= image.rows()) throw std::invalid_argument("compose_global_overlay: bad row offset");
  cv::Mat canvas = gray_to_bgr(image);
  const cv::Rect roi(0, row_offset, image.cols(), image.rows() - row_offset);
  cv::Mat heat;
  cv::resize(core::as_mat(map.heatmap), heat, roi.size(), 0, 0, cv::INTER_LINEAR);
  blend_heat(canvas(roi), heat, config.alpha * (config.probability_weighting ? map.weight : 1.0));
  if (!config.legend) return canvas;
  cv::Mat strip(config.legend_height, canvas.cols, CV_8UC3, cv::Scalar(0, 0, 0));
  const double scale = std::max(0.35, canvas.cols / 1400.0);
  const auto c = class_color(map.target_class);
  char prob[32];
  std::snprintf(prob, sizeof prob, "%.3f", map.weight);
  cv::putText(strip, "global: " + std::string(core::to_string(map.target_class)) + " p=" + prob,
              cv::Point(8, config.legend_height / 2 + 6), cv::FONT_HERSHEY_SIMPLEX, scale, cv::Scalar(c[0], c[1], c[2]), 1);
  cv::Mat out;
  cv::vconcat(canvas, strip, out);
  return out;
}

void save_bgr(const std::filesystem::path& path, const cv::Mat& image) {
  if (!cv::imwrite(path.string(), image)) throw DataError("cannot write " + path.string());
}

}  // namespace pother::vote
