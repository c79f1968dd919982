#pragma once

#include <torch/torch.h>

#include "pother/core/grid.hpp"
#include "pother/core/manifest.hpp"
#include "pother/core/tensor.hpp"
#include "pother/net/pother_net.hpp"

namespace pother::vote {

struct ActivationMap {
  core::GrayImage heatmap;  // input resolution, [0, 1], max 1 unless identically zero
  core::ClassLabel target_class = core::ClassLabel::Normal;
  double weight = 0.0;  // softmax probability of target_class
};

/// GradCAM from a trace (target-layer activations + logits) that is still attached to the graph.
/// Channel weights are the spatially averaged gradients of the target logit; the rectified weighted
/// sum is bilinearly upsampled to `out_rows x out_cols` and max-normalized.
ActivationMap gradcam_from_trace(const net::ClassifierTrace& trace, core::ClassLabel target, int out_rows,
                                 int out_cols);

/// The model must expose `trace(Tensor[1,1,S,S]) -> ClassifierTrace`, with the target layer being
/// the activations returned in `features`.
template <typename ModelHolder>
ActivationMap gradcam(ModelHolder& model, const core::GrayImage& patch, core::ClassLabel target) {
  torch::AutoGradMode enable(true);
  model->eval();
  auto x = core::to_tensor(patch).unsqueeze(0);
  auto trace = model->trace(x);
  return gradcam_from_trace(trace, target, patch.rows(), patch.cols());
}

}  // namespace pother::vote
