#pragma once

#include <array>

#include <torch/torch.h>

#include "pother/core/manifest.hpp"

namespace pother::train {

struct LossConfig {
  double dice_epsilon = 1e-6;
  std::array<double, core::kNumClasses> class_weights = {1.0, 1.0, 1.0};

  void validate() const;
};

/// Soft Dice loss 1 - (2 sum(p g) + eps) / (sum(p^2) + sum(g^2) + eps), evaluated per sample over all
/// non-batch dimensions and averaged over the batch.
torch::Tensor dice_loss(const torch::Tensor& pred, const torch::Tensor& target, double epsilon = 1e-6);

/// -[w_t log p_t + sum_{i != t} log(1 - p_i)] averaged over the batch, where t is the target class,
/// p the softmax probabilities (clamped to [1e-12, 1 - 1e-12]) and w_t the target class weight.
/// probs: [N, C]; targets: [N] int64; weights: [C].
torch::Tensor weighted_ce(const torch::Tensor& probs, const torch::Tensor& targets, const torch::Tensor& weights);

/// Unweighted sum; throws NonFiniteError if either term is NaN/Inf.
torch::Tensor total_loss(const torch::Tensor& dice, const torch::Tensor& wce);

/// Mean-normalized inverse class frequency: total / (classes * count_i).
std::array<double, core::kNumClasses> class_weights(const core::ClassCounts& counts);

}  // namespace pother::train
