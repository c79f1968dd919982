#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "pother/core/grid.hpp"

namespace pother::lung {

using core::LungMask;

enum class FilterStatus { Accepted, Repaired, Rejected };

std::string_view to_string(FilterStatus status);

struct FilterReport {
  FilterStatus status = FilterStatus::Accepted;
  std::string reason;
  int components_kept = 0;
  double lung_area_fraction = 0.0;
};

struct FilterThresholds {
  double min_component_fraction = 0.01;
  double min_lung_fraction = 0.08;
  double max_lung_fraction = 0.90;
  int lungs_expected = 2;
};

struct FilterResult {
  LungMask mask;  // binary {0, 255}
  FilterReport report;
};

/// Grey device codes are cleared, then the two largest 8-connected lung components of at least
/// min_component_fraction of the frame are kept. Rejected when fewer than two qualify or the kept
/// lung area falls outside [min_lung_fraction, max_lung_fraction].
FilterResult filter_mask(const LungMask& mask, const FilterThresholds& thresholds = {});

/// Valid patch centres for one image.
struct DrawArea {
  core::Grid<std::uint8_t> valid_centers;  // 1 = valid
  std::vector<std::uint32_t> center_indices;  // flattened indices of valid pixels, row-major

  std::size_t nonzero_count() const { return center_indices.size(); }
  int rows() const { return valid_centers.rows(); }
  int cols() const { return valid_centers.cols(); }
};

/// Lung pixels affinely scaled by `ratio` about their centroid and re-binarized at 0.5.
LungMask scale_lung_mask(const LungMask& mask, double ratio = 0.9);

/// Whole-lung mask scaled by `ratio` about the lung-pixel centroid, re-binarized and intersected with
/// the lung mask. Centres closer than `frame_margin` to the frame edge are excluded so that a window
/// of side 2 * frame_margin never needs clamping.
DrawArea compute_draw_area(const LungMask& mask, double ratio = 0.9, int frame_margin = 40);

/// One JSON object per line: image_path, status, reason, components_kept, lung_area_fraction.
void write_filter_report_line(std::ostream& out, const std::string& image_path, const FilterReport& report);

}  // namespace pother::lung
