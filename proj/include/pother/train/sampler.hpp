#pragma once

#include <vector>

#include "pother/core/manifest.hpp"
#include "pother/core/rng.hpp"

namespace pother::train {

/// Draws record indices with probability proportional to 1 / count(class of record), so every class
/// is expected equally often.
class WeightedSampler {
 public:
  WeightedSampler(const core::DatasetManifest& manifest, std::uint64_t seed);

  std::size_t next();
  std::vector<std::size_t> draw(std::size_t n);
  /// Up to n indices without repeats (rejection on duplicates); used so that a batch holds at most
  /// one patch per image.
  std::vector<std::size_t> draw_distinct(std::size_t n);

  const std::vector<double>& probabilities() const { return probs_; }

 private:
  std::vector<double> probs_;
  std::vector<double> cdf_;
  core::Rng rng_;
};

}  // namespace pother::train
