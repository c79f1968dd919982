#include "pother/train/losses.hpp"

#include <cmath>
#include <numeric>

#include "pother/core/error.hpp"

namespace pother::train {

void LossConfig::validate() const {
  if (!(dice_epsilon > 0.0)) throw ConfigError("dice_epsilon must be positive");
  for (double w : class_weights) {
    if (!std::isfinite(w) || w <= 0.0) throw ConfigError("class weights must be finite and positive");
  }
}

torch::Tensor dice_loss(const torch::Tensor& pred, const torch::Tensor& target, double epsilon) {
  if (pred.sizes() != target.sizes()) throw std::invalid_argument("dice_loss: shape mismatch");
  if (pred.dim() == 0) throw std::invalid_argument("dice_loss: scalar input");
  const auto p = pred.dim() == 1 ? pred.unsqueeze(0) : pred.flatten(1);
  const auto g = (target.dim() == 1 ? target.unsqueeze(0) : target.flatten(1)).to(p.dtype());
  const auto inter = (p * g).sum(1);
  const auto denom = (p * p).sum(1) + (g * g).sum(1);
  return (1.0 - (2.0 * inter + epsilon) / (denom + epsilon)).mean();
}

torch::Tensor weighted_ce(const torch::Tensor& probs, const torch::Tensor& targets, const torch::Tensor& weights) {
  if (probs.dim() != 2) throw std::invalid_argument("weighted_ce: probs must be [N, C]");
  if (targets.dim() != 1 || targets.size(0) != probs.size(0)) {
    throw std::invalid_argument("weighted_ce: targets must be [N]");
  }
  if (weights.dim() != 1 || weights.size(0) != probs.size(1)) {
    throw std::invalid_argument("weighted_ce: weights must be [C]");
  }
  const auto p = probs.clamp(1e-12, 1.0 - 1e-12);
  const auto r = torch::one_hot(targets, probs.size(1)).to(p.dtype());
  const auto w = weights.to(p.dtype()).index_select(0, targets).unsqueeze(1);
  const auto per_class = w * r * torch::log(p) + (1.0 - r) * torch::log(1.0 - p);
  return -per_class.sum(1).mean();
}

torch::Tensor total_loss(const torch::Tensor& dice, const torch::Tensor& wce) {
  if (!torch::isfinite(dice).all().item<bool>() || !torch::isfinite(wce).all().item<bool>()) {
    throw NonFiniteError("non-finite loss term");
  }
  return dice + wce;
}

std::array<double, core::kNumClasses> class_weights(const core::ClassCounts& counts) {
  const double total = static_cast<double>(std::accumulate(counts.begin(), counts.end(), std::size_t{0}));
  std::array<double, core::kNumClasses> w{};
  for (int i = 0; i < core::kNumClasses; ++i) {
    if (counts[i] == 0) {
      throw DataError("class '" + std::string(core::to_string(core::label_from_index(i))) + "' has no examples");
    }
    w[i] = total / (core::kNumClasses * static_cast<double>(counts[i]));
  }
  return w;
}

}  // namespace pother::train
