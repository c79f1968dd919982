#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "pother/core/grid.hpp"
#include "pother/core/manifest.hpp"
#include "pother/core/rng.hpp"
#include "pother/lung/masks.hpp"

namespace pother::patch {

using core::GrayImage;
using core::LungMask;
using lung::DrawArea;

struct PatchSpec {
  int center_row = 0;
  int center_col = 0;
  int side = 80;
  int source_size = 1024;

  int row0() const { return center_row - side / 2; }
  int col0() const { return center_col - side / 2; }

  friend bool operator==(const PatchSpec&, const PatchSpec&) = default;
};

struct PatchPair {
  GrayImage image_patch;
  core::Grid<std::uint8_t> mask_patch;  // {0, 1}
  core::ClassLabel label = core::ClassLabel::Normal;
  PatchSpec spec;
};

struct Center {
  int row;
  int col;
  friend bool operator==(const Center&, const Center&) = default;
};

/// Uniform draw over the non-zero pixels of the draw area.
Center sample_patch_center(const DrawArea& area, core::Rng& rng);

/// Shifts the centre by the minimum amount needed for the side x side window to fit the frame.
PatchSpec clamp_spec(PatchSpec spec);

/// Cuts rows [r - side/2, r + side/2) and the same columns, after clamping, and resamples the crops
/// to out_size x out_size (image: linear; mask: linear then > 0.5).
PatchPair extract_patch(const GrayImage& image, const LungMask& mask, PatchSpec spec, int out_size = 224);

/// Image-only variant used at inference time.
GrayImage extract_image_patch(const GrayImage& image, PatchSpec spec, int out_size = 224);

/// Everything needed to cut training patches from one record.
struct PatchSource {
  core::ImageRecord record;
  GrayImage image;  // source_size x source_size
  LungMask mask;    // binary, same size
  DrawArea area;
};

struct PatchGeometry {
  int side = 80;
  int source_size = 1024;
  int out_size = 224;
};

/// One patch for the record with a fresh centre from the draw area. Returns nullopt (and the caller
/// records a skip) when the draw area is empty.
std::optional<PatchPair> make_training_example(const PatchSource& source, core::Rng& rng,
                                               const PatchGeometry& geometry = {});

struct SkipReport {
  std::vector<std::string> skipped;  // image paths
};

/// Exactly one patch per distinct source; sources without a usable draw area are skipped.
std::vector<PatchPair> make_training_batch(const std::vector<const PatchSource*>& sources, core::Rng& rng,
                                           const PatchGeometry& geometry, SkipReport* skips = nullptr);

enum class Strategy { Random, Grid };

std::optional<Strategy> parse_strategy(std::string_view s);

/// random: n independent uniform draws. grid: lattice centres (stride = side, offset side/2) inside
/// the draw area; when the lattice holds more than n points an evenly strided subset of n is kept.
std::vector<PatchSpec> make_inference_patches(const DrawArea& area, int n, Strategy strategy, core::Rng& rng,
                                              int side = 80);

void write_specs_jsonl(std::ostream& out, const std::vector<PatchSpec>& specs);
std::vector<PatchSpec> read_specs_jsonl(std::istream& in);

}  // namespace pother::patch
