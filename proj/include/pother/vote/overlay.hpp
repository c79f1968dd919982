#pragma once

#include <array>
#include <filesystem>
#include <vector>

#include <opencv2/core.hpp>

#include "pother/vote/gradcam.hpp"
#include "pother/vote/vote.hpp"

namespace pother::vote {

struct OverlayConfig {
  double alpha = 0.4;
  int box_thickness = 3;
  bool probability_weighting = true;  // scale each map by its target-class probability
  bool legend = true;                 // appends a caption strip below the frame
  int legend_height = 48;
};

/// Box colour per class as BGR: green normal, blue pneumonia, red COVID-19.
cv::Vec3b class_color(core::ClassLabel label);

/// Renders a CV_8UC3 (BGR) composite: every patch heatmap alpha-blended into its source window with
/// weight alpha * heat (* probability), then a class-coloured box per vote. With `legend` a caption
/// strip with the class key and the final decision is appended below the frame.
cv::Mat compose_overlay(const core::GrayImage& image, const VoteTally& tally, const std::vector<ActivationMap>& maps,
                        const OverlayConfig& config = {});

/// Single heatmap rendered over its patch (used for per-patch figure output).
cv::Mat render_patch_map(const core::GrayImage& patch, const ActivationMap& map, const OverlayConfig& config = {});

/// Whole-image map: the heatmap covers rows [row_offset, rows) of the frame (the region the model saw).
cv::Mat compose_global_overlay(const core::GrayImage& image, const ActivationMap& map, int row_offset,
                               const OverlayConfig& config = {});

void save_bgr(const std::filesystem::path& path, const cv::Mat& image);

}  // namespace pother::vote
