#include "pother/patch/patch.hpp"

#include <algorithm>
#include <istream>
#include <ostream>

#include <nlohmann/json.hpp>
#include <opencv2/imgproc.hpp>

#include "pother/core/error.hpp"
#include "pother/core/image_io.hpp"

namespace pother::patch {

Center sample_patch_center(const DrawArea& area, core::Rng& rng) {
  if (area.nonzero_count() == 0) throw DataError("cannot sample a patch centre from an empty draw area");
  const auto flat = area.center_indices[core::uniform_index(rng, area.nonzero_count())];
  return {static_cast<int>(flat / static_cast<std::uint32_t>(area.cols())),
          static_cast<int>(flat % static_cast<std::uint32_t>(area.cols()))};
}

PatchSpec clamp_spec(PatchSpec spec) {
  if (spec.side <= 0) throw ConfigError("patch side must be positive");
  if (spec.side > spec.source_size) {
    throw ConfigError("patch side " + std::to_string(spec.side) + " larger than frame " +
                      std::to_string(spec.source_size));
  }
  const int half = spec.side / 2;
  const int lo = half;
  const int hi = spec.source_size - (spec.side - half);
  spec.center_row = std::clamp(spec.center_row, lo, hi);
  spec.center_col = std::clamp(spec.center_col, lo, hi);
  return spec;
}

namespace {

cv::Rect window(const PatchSpec& s) { return cv::Rect(s.col0(), s.row0(), s.side, s.side); }

void check_frame(int rows, int cols, const PatchSpec& spec) {
  if (rows != spec.source_size || cols != spec.source_size) {
    throw std::invalid_argument("frame " + std::to_string(rows) + "x" + std::to_string(cols) +
                                " does not match patch source size " + std::to_string(spec.source_size));
  }
}

}  // namespace

GrayImage extract_image_patch(const GrayImage& image, PatchSpec spec, int out_size) {
  spec = clamp_spec(spec);
  check_frame(image.rows(), image.cols(), spec);
  cv::Mat crop = core::as_mat(image)(window(spec));
  cv::Mat out;
  cv::resize(crop, out, cv::Size(out_size, out_size), 0, 0, cv::INTER_LINEAR);
  return core::gray_from_mat(out);
}

PatchPair extract_patch(const GrayImage& image, const LungMask& mask, PatchSpec spec, int out_size) {
  spec = clamp_spec(spec);
  check_frame(image.rows(), image.cols(), spec);
  check_frame(mask.rows(), mask.cols(), spec);

  PatchPair pair;
  pair.spec = spec;
  pair.image_patch = extract_image_patch(image, spec, out_size);

  GrayImage indicator(spec.side, spec.side);
  const int r0 = spec.row0(), c0 = spec.col0();
  for (int r = 0; r < spec.side; ++r) {
    for (int c = 0; c < spec.side; ++c) indicator(r, c) = mask(r0 + r, c0 + c) == core::kLung ? 1.0f : 0.0f;
  }
  auto resized = core::resize_linear(indicator, out_size, out_size);
  pair.mask_patch = core::Grid<std::uint8_t>(out_size, out_size);
  auto src = resized.values();
  auto dst = pair.mask_patch.values();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] > 0.5f ? 1 : 0;
  return pair;
}

std::optional<PatchPair> make_training_example(const PatchSource& source, core::Rng& rng,
                                               const PatchGeometry& geometry) {
  if (source.area.nonzero_count() == 0) return std::nullopt;
  const auto center = sample_patch_center(source.area, rng);
  PatchSpec spec{center.row, center.col, geometry.side, geometry.source_size};
  auto pair = extract_patch(source.image, source.mask, spec, geometry.out_size);
  pair.label = source.record.label;
  return pair;
}

std::vector<PatchPair> make_training_batch(const std::vector<const PatchSource*>& sources, core::Rng& rng,
                                           const PatchGeometry& geometry, SkipReport* skips) {
  std::vector<PatchPair> batch;
  batch.reserve(sources.size());
  for (const auto* src : sources) {
    auto pair = make_training_example(*src, rng, geometry);
    if (pair) {
      batch.push_back(std::move(*pair));
    } else if (skips) {
      skips->skipped.push_back(src->record.image_path);
    }
  }
  return batch;
}

std::optional<Strategy> parse_strategy(std::string_view s) {
  if (s == "random") return Strategy::Random;
  if (s == "grid") return Strategy::Grid;
  return std::nullopt;
}

std::vector<PatchSpec> make_inference_patches(const DrawArea& area, int n, Strategy strategy, core::Rng& rng,
                                              int side) {
  if (n < 1) throw ConfigError("inference patch count must be at least 1");
  if (area.nonzero_count() == 0) throw DataError("cannot place inference patches in an empty draw area");
  const int source = area.rows();
  std::vector<PatchSpec> specs;
  if (strategy == Strategy::Random) {
    specs.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      const auto c = sample_patch_center(area, rng);
      specs.push_back({c.row, c.col, side, source});
    }
    return specs;
  }

  std::vector<PatchSpec> lattice;
  for (int r = side / 2; r < area.rows(); r += side) {
    for (int c = side / 2; c < area.cols(); c += side) {
      if (area.valid_centers(r, c)) lattice.push_back({r, c, side, source});
    }
  }
  if (lattice.empty()) {
    // Draw area thinner than the lattice stride: fall back to its first pixel in scan order.
    const auto flat = area.center_indices.front();
    lattice.push_back({static_cast<int>(flat / area.cols()), static_cast<int>(flat % area.cols()), side, source});
  }
  if (static_cast<int>(lattice.size()) <= n) return lattice;
  for (int i = 0; i < n; ++i) {
    const auto idx = static_cast<std::size_t>((static_cast<double>(i) + 0.5) * lattice.size() / n);
    specs.push_back(lattice[idx]);
  }
  return specs;
}

void write_specs_jsonl(std::ostream& out, const std::vector<PatchSpec>& specs) {
  for (const auto& s : specs) {
    nlohmann::ordered_json j{{"center_row", s.center_row},
                             {"center_col", s.center_col},
                             {"side", s.side},
                             {"source_size", s.source_size}};
    out << j.dump() << '\n';
  }
}

std::vector<PatchSpec> read_specs_jsonl(std::istream& in) {
  std::vector<PatchSpec> specs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      specs.push_back({j.at("center_row").get<int>(), j.at("center_col").get<int>(), j.at("side").get<int>(),
                       j.at("source_size").get<int>()});
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(e.what(), line_no);
    }
  }
  return specs;
}

}  // namespace pother::patch
