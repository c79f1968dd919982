#include "pother/lung/masks.hpp"

#include <algorithm>
#include <numeric>
#include <ostream>

#include <nlohmann/json.hpp>
#include <opencv2/imgproc.hpp>

#include "pother/core/error.hpp"
#include "pother/core/image_io.hpp"

namespace pother::lung {

std::string_view to_string(FilterStatus status) {
  switch (status) {
    case FilterStatus::Accepted: return "accepted";
    case FilterStatus::Repaired: return "repaired";
    case FilterStatus::Rejected: return "rejected";
  }
  return "?";
}

FilterResult filter_mask(const LungMask& mask, const FilterThresholds& thresholds) {
  FilterResult result{LungMask(mask.rows(), mask.cols()), {}};
  const double frame_area = static_cast<double>(mask.size());
  if (mask.empty()) {
    result.report = {FilterStatus::Rejected, "empty mask", 0, 0.0};
    return result;
  }

  bool removed_anything = false;
  LungMask lung(mask.rows(), mask.cols());
  {
    auto src = mask.values();
    auto dst = lung.values();
    for (std::size_t i = 0; i < src.size(); ++i) {
      if (src[i] == core::kLung) {
        dst[i] = 1;
      } else if (src[i] != core::kBackground) {
        removed_anything = true;
      }
    }
  }

  cv::Mat labels, stats, centroids;
  const int n_labels =
      cv::connectedComponentsWithStats(core::as_mat(lung), labels, stats, centroids, 8, CV_32S);

  struct Component {
    int label;
    int area;
  };
  std::vector<Component> comps;
  for (int l = 1; l < n_labels; ++l) comps.push_back({l, stats.at<int>(l, cv::CC_STAT_AREA)});
  // Largest first; ties resolved by label order so the result is deterministic.
  std::stable_sort(comps.begin(), comps.end(), [](const Component& a, const Component& b) { return a.area > b.area; });

  std::vector<int> kept;
  for (const auto& c : comps) {
    if (static_cast<int>(kept.size()) == thresholds.lungs_expected) break;
    if (static_cast<double>(c.area) / frame_area >= thresholds.min_component_fraction) kept.push_back(c.label);
  }
  if (kept.size() != comps.size()) removed_anything = true;

  std::size_t kept_area = 0;
  {
    auto dst = result.mask.values();
    const int* lab = labels.ptr<int>(0);
    for (std::size_t i = 0; i < dst.size(); ++i) {
      if (lab[i] != 0 && std::find(kept.begin(), kept.end(), lab[i]) != kept.end()) {
        dst[i] = core::kLung;
        ++kept_area;
      }
    }
  }

  auto& rep = result.report;
  rep.components_kept = static_cast<int>(kept.size());
  rep.lung_area_fraction = static_cast<double>(kept_area) / frame_area;
  if (comps.empty()) {
    rep.status = FilterStatus::Rejected;
    rep.reason = "no lung component";
  } else if (static_cast<int>(kept.size()) < thresholds.lungs_expected) {
    rep.status = FilterStatus::Rejected;
    rep.reason = "component count < " + std::to_string(thresholds.lungs_expected);
  } else if (rep.lung_area_fraction < thresholds.min_lung_fraction) {
    rep.status = FilterStatus::Rejected;
    rep.reason = "lung area fraction below minimum";
  } else if (rep.lung_area_fraction > thresholds.max_lung_fraction) {
    rep.status = FilterStatus::Rejected;
    rep.reason = "lung area fraction above maximum";
  } else if (removed_anything) {
    rep.status = FilterStatus::Repaired;
    rep.reason = "removed grey codes or extra components";
  } else {
    rep.status = FilterStatus::Accepted;
    rep.reason = "ok";
  }
  return result;
}

LungMask scale_lung_mask(const LungMask& mask, double ratio) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("draw-area ratio must lie in (0, 1]");
  double sum_r = 0.0, sum_c = 0.0;
  std::size_t n = 0;
  core::GrayImage indicator(mask.rows(), mask.cols());
  for (int r = 0; r < mask.rows(); ++r) {
    for (int c = 0; c < mask.cols(); ++c) {
      if (mask(r, c) == core::kLung) {
        indicator(r, c) = 1.0f;
        sum_r += r;
        sum_c += c;
        ++n;
      }
    }
  }
  if (n == 0) throw DataError("draw area requested for an empty lung mask");
  const double cy = sum_r / static_cast<double>(n);
  const double cx = sum_c / static_cast<double>(n);

  // dst = ratio * (src - centroid) + centroid
  cv::Mat m = (cv::Mat_<double>(2, 3) << ratio, 0.0, (1.0 - ratio) * cx, 0.0, ratio, (1.0 - ratio) * cy);
  cv::Mat scaled;
  cv::warpAffine(core::as_mat(indicator), scaled, m, cv::Size(mask.cols(), mask.rows()), cv::INTER_LINEAR,
                 cv::BORDER_CONSTANT, cv::Scalar(0));
  LungMask out(mask.rows(), mask.cols(), core::kBackground);
  for (int r = 0; r < mask.rows(); ++r) {
    const float* row = scaled.ptr<float>(r);
    for (int c = 0; c < mask.cols(); ++c) {
      if (row[c] > 0.5f) out(r, c) = core::kLung;
    }
  }
  return out;
}

DrawArea compute_draw_area(const LungMask& mask, double ratio, int frame_margin) {
  if (frame_margin < 0) throw ConfigError("frame margin must be non-negative");
  const auto scaled = scale_lung_mask(mask, ratio);

  DrawArea area{core::Grid<std::uint8_t>(mask.rows(), mask.cols()), {}};
  const int r_lo = frame_margin, r_hi = mask.rows() - frame_margin;
  const int c_lo = frame_margin, c_hi = mask.cols() - frame_margin;
  for (int r = 0; r < mask.rows(); ++r) {
    for (int c = 0; c < mask.cols(); ++c) {
      const bool inside_frame = r >= r_lo && r <= r_hi && c >= c_lo && c <= c_hi;
      if (inside_frame && scaled(r, c) == core::kLung && mask(r, c) == core::kLung) {
        area.valid_centers(r, c) = 1;
        area.center_indices.push_back(static_cast<std::uint32_t>(area.valid_centers.index(r, c)));
      }
    }
  }
  return area;
}

void write_filter_report_line(std::ostream& out, const std::string& image_path, const FilterReport& report) {
  nlohmann::ordered_json j;
  j["image_path"] = image_path;
  j["status"] = to_string(report.status);
  j["reason"] = report.reason;
  j["components_kept"] = report.components_kept;
  j["lung_area_fraction"] = report.lung_area_fraction;
  out << j.dump() << '\n';
}

}  // namespace pother::lung
