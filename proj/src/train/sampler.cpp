#include "pother/train/sampler.hpp"

#include <algorithm>
#include <unordered_set>

#include "pother/core/error.hpp"

namespace pother::train {

WeightedSampler::WeightedSampler(const core::DatasetManifest& manifest, std::uint64_t seed)
    : rng_(core::make_rng(seed, 0x5a)) {
  if (manifest.empty()) throw DataError("weighted sampler over an empty manifest");
  const auto& counts = manifest.class_counts();
  probs_.reserve(manifest.size());
  double total = 0.0;
  for (const auto& r : manifest.records()) {
    const double p = 1.0 / static_cast<double>(counts[core::to_index(r.label)]);
    probs_.push_back(p);
    total += p;
  }
  double acc = 0.0;
  cdf_.reserve(probs_.size());
  for (auto& p : probs_) {
    p /= total;
    acc += p;
    cdf_.push_back(acc);
  }
  cdf_.back() = 1.0;
}

std::size_t WeightedSampler::next() {
  const double u = core::uniform(rng_, 0.0, 1.0);
  const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
  return static_cast<std::size_t>(std::min<std::ptrdiff_t>(it - cdf_.begin(), static_cast<std::ptrdiff_t>(cdf_.size()) - 1));
}

std::vector<std::size_t> WeightedSampler::draw(std::size_t n) {
  std::vector<std::size_t> out(n);
  for (auto& v : out) v = next();
  return out;
}

std::vector<std::size_t> WeightedSampler::draw_distinct(std::size_t n) {
  n = std::min(n, probs_.size());
  std::vector<std::size_t> out;
  std::unordered_set<std::size_t> seen;
  // Bounded so a few dominant records cannot stall the loop.
  for (std::size_t attempts = 0; out.size() < n && attempts < 64 * n + 64; ++attempts) {
    const auto i = next();
    if (seen.insert(i).second) out.push_back(i);
  }
  // Exact weighted draws over the records not yet taken.
  while (out.size() < n) {
    double mass = 0.0;
    for (std::size_t i = 0; i < probs_.size(); ++i) {
      if (!seen.count(i)) mass += probs_[i];
    }
    double u = core::uniform(rng_, 0.0, mass);
    std::size_t pick = probs_.size();
    for (std::size_t i = 0; i < probs_.size(); ++i) {
      if (seen.count(i)) continue;
      pick = i;
      if ((u -= probs_[i]) < 0.0) break;
    }
    seen.insert(pick);
    out.push_back(pick);
  }
  return out;
}

}  // namespace pother::train
