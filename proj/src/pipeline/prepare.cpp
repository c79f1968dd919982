#include "pother/pipeline/prepare.hpp"

#include <cmath>

#include "pother/core/error.hpp"
#include "pother/core/image_io.hpp"
#include "pother/train/augment.hpp"

namespace pother::pipeline {

core::GrayImage preprocess(const core::GrayImage& image) { return train::histogram_equalize(image); }

core::GrayImage global_input(const core::GrayImage& raw, int input_size, double crop_top) {
  if (input_size < 1) throw ConfigError("input_size must be positive");
  if (!(crop_top >= 0.0 && crop_top < 1.0)) throw ConfigError("crop_top must lie in [0, 1)");
  const auto eq = preprocess(raw);
  const int skip = static_cast<int>(std::lround(crop_top * eq.rows()));
  core::GrayImage cropped(eq.rows() - skip, eq.cols());
  for (int r = 0; r < cropped.rows(); ++r) {
    for (int c = 0; c < cropped.cols(); ++c) cropped(r, c) = eq(r + skip, c);
  }
  return core::resize_area(cropped, input_size, input_size);
}

patch::PatchSource make_patch_source(const core::ImageRecord& record, const core::GrayImage& raw,
                                     const core::LungMask& mask, int source_size, double draw_ratio) {
  patch::PatchSource src;
  src.record = record;
  const bool same = raw.rows() == source_size && raw.cols() == source_size;
  src.image = preprocess(same ? raw : core::resize_linear(raw, source_size, source_size));
  src.mask = (mask.rows() == source_size && mask.cols() == source_size) ? mask
                                                                         : core::resize_mask(mask, source_size, source_size);
  if (core::count_lung(src.mask) == 0) {
    src.area = lung::DrawArea{core::Grid<std::uint8_t>(source_size, source_size), {}};  // skipped downstream
  } else {
    src.area = lung::compute_draw_area(src.mask, draw_ratio);
  }
  return src;
}

}  // namespace pother::pipeline
