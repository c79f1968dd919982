#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pother/core/grid.hpp"
#include "pother/core/manifest.hpp"

namespace pother::eval {

enum class Confounder { Token, Cable };

std::optional<Confounder> parse_confounder(std::string_view s);
std::string_view to_string(Confounder c);

/// Synthetic radiograph-like images: two elliptical lung fields inside a body, class textures inside
/// the lungs (clear speckle, diffuse dotted haze, peripheral striped haze) and a confounder whose
/// style matches the label with probability rho.
struct SynthSpec {
  int image_size = 256;
  std::array<int, core::kNumClasses> counts = {20, 20, 20};
  double rho = 1.0;
  Confounder confounder = Confounder::Token;
  std::uint64_t seed = 0;
  core::Split split = core::Split::Train;
  std::string prefix = "synth";
  int token_margin = 41;        // minimum token-to-lung distance, in reference-frame pixels
  int reference_size = 1024;    // frame in which token_margin is measured
  double texture_amplitude = 0.07;
  int token_size = 40;        // glyph side at 256 px
  double haze_scale = 1.0;

  void validate() const;
};

void to_json(nlohmann::json& j, const SynthSpec& s);
void from_json(const nlohmann::json& j, SynthSpec& s);

struct Box {
  int row0 = 0, col0 = 0, rows = 0, cols = 0;
  bool contains(int r, int c) const { return r >= row0 && r < row0 + rows && c >= col0 && c < col0 + cols; }
};

struct SynthImage {
  core::ImageRecord record;
  core::GrayImage image;  // 8-bit valued, in [0, 1]
  core::LungMask mask;    // exact {0, 255}
  int style = 0;          // confounder style index; equals the label index when linked
  Box confounder_box;     // bounding box of everything the confounder touches
};

struct SynthSet {
  core::DatasetManifest manifest;
  std::vector<SynthImage> items;
};

/// Deterministic in (spec, swapped). With `swapped` every confounder style s is replaced by (s + 1) % 3
/// and nothing else changes, so the two versions differ only inside confounder boxes.
SynthSet synth_generate(const SynthSpec& spec, bool swapped = false);

/// Euclidean distance from the token box to the nearest lung pixel, in image pixels.
double token_lung_distance(const SynthImage& item);

/// images/<name>.png, masks/<name>.png, manifest.txt and confounders.jsonl under `root`.
void write_synth(const std::filesystem::path& root, const SynthSet& set);

}  // namespace pother::eval
