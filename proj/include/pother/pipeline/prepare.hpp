#pragma once

#include "pother/core/grid.hpp"
#include "pother/core/manifest.hpp"
#include "pother/patch/patch.hpp"

namespace pother::pipeline {

/// Global histogram equalization, applied before any augmentation.
core::GrayImage preprocess(const core::GrayImage& image);

/// Whole-image baseline input: equalize, drop the top `crop_top` fraction of rows, area-resize to
/// input_size x input_size.
core::GrayImage global_input(const core::GrayImage& raw, int input_size, double crop_top = 0.08);

/// Patch-model source: linear resize of image and mask to source_size, equalization, draw area
/// (empty when the mask holds no lung, so the record is skipped rather than fatal).
patch::PatchSource make_patch_source(const core::ImageRecord& record, const core::GrayImage& raw,
                                     const core::LungMask& mask, int source_size = 1024, double draw_ratio = 0.9);

}  // namespace pother::pipeline
