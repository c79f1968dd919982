#include "pother/vote/gradcam.hpp"

namespace pother::vote {

namespace F = torch::nn::functional;

ActivationMap gradcam_from_trace(const net::ClassifierTrace& trace, core::ClassLabel target, int out_rows,
                                 int out_cols) {
  const auto& features = trace.features;
  if (!features.defined() || features.dim() != 4 || features.size(0) != 1) {
    throw std::invalid_argument("gradcam: target-layer activations must be [1, C, h, w]");
  }
  const auto cls = static_cast<std::int64_t>(core::to_index(target));
  auto score = trace.logits.index({0, cls});

  torch::Tensor grad;
  if (score.requires_grad() && features.requires_grad()) {
    auto grads = torch::autograd::grad({score}, {features}, /*grad_outputs=*/{}, /*retain_graph=*/false,
                                       /*create_graph=*/false, /*allow_unused=*/true);
    grad = grads[0];
  }
  if (!grad.defined()) grad = torch::zeros_like(features);

  torch::NoGradGuard no_grad;
  auto weights = grad.mean({2, 3}, /*keepdim=*/true);
  auto cam = torch::relu((weights * features.detach()).sum(1, /*keepdim=*/true));
  if (cam.size(2) != out_rows || cam.size(3) != out_cols) {
    cam = F::interpolate(cam, F::InterpolateFuncOptions()
                                  .size(std::vector<std::int64_t>{out_rows, out_cols})
                                  .mode(torch::kBilinear)
                                  .align_corners(false));
  }
  cam = cam.to(torch::kFloat32);
  const float peak = cam.max().item<float>();
  if (peak > 0.0f) {
    cam = cam / peak;
  } else {
    cam = torch::zeros_like(cam);
  }

  ActivationMap map;
  map.heatmap = core::from_tensor(cam);
  map.target_class = target;
  map.weight = torch::softmax(trace.logits.detach().to(torch::kFloat64), 1).index({0, cls}).item<double>();
  return map;
}

}  // namespace pother::vote
