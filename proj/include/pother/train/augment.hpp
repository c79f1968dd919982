#pragma once

#include <nlohmann/json.hpp>

#include "pother/core/grid.hpp"
#include "pother/core/rng.hpp"

namespace pother::train {

using core::GrayImage;

struct AugmentConfig {
  double p_flip = 0.5;
  double p_sharpen = 0.5;
  double p_emboss = 0.5;
  double p_clahe = 0.5;
  double p_affine = 0.5;
  double p_brightness_contrast = 0.5;

  double max_offset = 0.05;      // fraction of the side
  double max_scale = 0.10;       // per axis, aspect ratio not preserved
  double max_rotation_deg = 10.0;
  double max_brightness = 0.10;
  double max_contrast = 0.10;
  double clahe_clip_min = 1.0, clahe_clip_max = 4.0;
  int clahe_grid_min = 4, clahe_grid_max = 8;

  void validate() const;
  static AugmentConfig none();
};

void to_json(nlohmann::json& j, const AugmentConfig& c);
void from_json(const nlohmann::json& j, AugmentConfig& c);

/// Photometric and geometric soft augmentation; output is clipped to [0, 1].
GrayImage augment(const GrayImage& image, core::Rng& rng, const AugmentConfig& config);

/// Geometric transforms (flip, affine) are applied identically to the {0,1} mask; photometric ones to
/// the image only.
void augment_pair(GrayImage& image, core::Grid<std::uint8_t>& mask, core::Rng& rng, const AugmentConfig& config);

GrayImage horizontal_flip(const GrayImage& image);
GrayImage sharpen(const GrayImage& image, double alpha, double lightness);
GrayImage emboss(const GrayImage& image, double alpha, double strength);
GrayImage clahe(const GrayImage& image, double clip_limit, int grid);

/// Global histogram equalization on the 8-bit quantization: level v maps to round(255 * CDF(v)).
GrayImage histogram_equalize(const GrayImage& image);

}  // namespace pother::train
