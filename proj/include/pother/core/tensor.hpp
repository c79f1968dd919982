#pragma once

#include <span>

#include <torch/torch.h>

#include "pother/core/grid.hpp"

namespace pother::core {

/// [1, H, W] float tensor copy of the image.
inline torch::Tensor to_tensor(const GrayImage& image) {
  return torch::from_blob(const_cast<float*>(image.data()), {1, image.rows(), image.cols()}, torch::kFloat32)
      .clone();
}

/// [1, H, W] tensor with 1 for lung and 0 elsewhere.
inline torch::Tensor mask_to_tensor(const Grid<std::uint8_t>& mask, std::uint8_t on_value) {
  auto t = torch::empty({1, mask.rows(), mask.cols()}, torch::kFloat32);
  auto* p = t.data_ptr<float>();
  auto v = mask.values();
  for (std::size_t i = 0; i < v.size(); ++i) p[i] = v[i] == on_value ? 1.0f : 0.0f;
  return t;
}

/// Accepts [H, W], [1, H, W] or [1, 1, H, W].
inline GrayImage from_tensor(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kFloat32).contiguous().squeeze();
  if (c.dim() != 2) throw std::invalid_argument("from_tensor: expected a single 2-D plane");
  const auto rows = static_cast<int>(c.size(0));
  const auto cols = static_cast<int>(c.size(1));
  const float* p = c.data_ptr<float>();
  return GrayImage(rows, cols, std::vector<float>(p, p + c.numel()));
}

/// Stack [1, H, W] tensors into [N, 1, H, W].
inline torch::Tensor stack_planes(std::span<const torch::Tensor> planes) {
  return torch::stack(std::vector<torch::Tensor>(planes.begin(), planes.end()));
}

}  // namespace pother::core
