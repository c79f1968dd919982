#pragma once

#include <array>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "pother/core/error.hpp"
#include "pother/core/manifest.hpp"
#include "pother/core/tensor.hpp"
#include "pother/patch/patch.hpp"

namespace pother::vote {

using core::ClassLabel;
using Probs = std::array<double, core::kNumClasses>;

struct Vote {
  patch::PatchSpec spec;
  Probs probs{};
  ClassLabel predicted = ClassLabel::Normal;
};

/// Softmax in double precision; argmax with the lowest class index winning exact ties.
Vote vote_from_logits(std::span<const float> logits, const patch::PatchSpec& spec = {});

struct VoteTally {
  std::vector<Vote> votes;
  std::array<int, core::kNumClasses> counts{};
  ClassLabel final = ClassLabel::Normal;
  bool tie = false;
  Probs mean_probs{};
  Probs weighted_counts{};  // sum of probabilities; diagnostic only
};

/// Class with the most votes. Count ties go to the tied class with the highest mean softmax
/// probability, then to the lowest class index; `tie` is set whenever the count tie-break fired.
VoteTally majority_vote(const std::vector<Vote>& votes);

nlohmann::ordered_json to_json(const VoteTally& tally);

/// Batched patch classification; the model must expose `classify(Tensor[N,1,S,S]) -> logits`.
template <typename ModelHolder>
std::vector<Vote> classify_patches(ModelHolder& model, const std::vector<core::GrayImage>& patches,
                                   const std::vector<patch::PatchSpec>& specs, int batch_size = 32) {
  if (patches.size() != specs.size()) throw std::invalid_argument("classify_patches: patches/specs size mismatch");
  torch::NoGradGuard no_grad;
  model->eval();
  std::vector<Vote> votes;
  votes.reserve(patches.size());
  for (std::size_t start = 0; start < patches.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(patches.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<torch::Tensor> planes;
    for (std::size_t i = start; i < end; ++i) planes.push_back(core::to_tensor(patches[i]));
    auto logits = model->classify(core::stack_planes(planes)).to(torch::kFloat32).contiguous();
    if (!torch::isfinite(logits).all().template item<bool>()) throw NonFiniteError("non-finite logits from classifier");
    for (std::size_t i = start; i < end; ++i) {
      auto row = logits[static_cast<std::int64_t>(i - start)];
      votes.push_back(vote_from_logits(std::span<const float>(row.template data_ptr<float>(), row.numel()), specs[i]));
    }
  }
  return votes;
}

template <typename ModelHolder>
Vote classify_patch(ModelHolder& model, const core::GrayImage& patch, const patch::PatchSpec& spec = {}) {
  return classify_patches(model, std::vector<core::GrayImage>{patch}, std::vector<patch::PatchSpec>{spec}).front();
}

struct PatchInference {
  VoteTally tally;
  std::vector<core::GrayImage> patches;  // model-resolution crops, same order as tally.votes
};

/// Places n patches in the draw area, classifies them and takes the majority vote.
template <typename ModelHolder>
PatchInference infer_image(ModelHolder& model, const core::GrayImage& image, const lung::DrawArea& area, int n,
                           patch::Strategy strategy, core::Rng& rng, const patch::PatchGeometry& geometry) {
  PatchInference out;
  const auto specs = patch::make_inference_patches(area, n, strategy, rng, geometry.side);
  for (const auto& s : specs) out.patches.push_back(patch::extract_image_patch(image, s, geometry.out_size));
  out.tally = majority_vote(classify_patches(model, out.patches, specs));
  return out;
}

}  // namespace pother::vote
