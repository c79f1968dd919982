#pragma once

#include <filesystem>
#include <iosfwd>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "pother/core/grid.hpp"

namespace pother::lung {

struct SegmenterConfig {
  int input_size = 1024;   // frame size accepted by predict
  int working_size = 128;  // the network runs on an area-downsampled copy
  int base_width = 16;
  int levels = 3;
  int epochs = 5;
  int batch_size = 2;
  double learning_rate = 3e-3;
  double val_fraction = 0.2;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const SegmenterConfig& c);
void from_json(const nlohmann::json& j, SegmenterConfig& c);

/// U-Net encoder-decoder, single-channel in, single-channel logits out at the input resolution.
class SegmenterNetImpl : public torch::nn::Module {
 public:
  explicit SegmenterNetImpl(const SegmenterConfig& config);
  torch::Tensor forward(const torch::Tensor& x);  // logits
  torch::nn::Conv2d& head() { return head_; }

 private:
  int working_size_;
  std::vector<torch::nn::Sequential> down_;
  std::vector<torch::nn::Sequential> up_;
  torch::nn::Conv2d head_{nullptr};
};
TORCH_MODULE(SegmenterNet);

struct SegSample {
  core::GrayImage image;
  core::LungMask mask;  // binary {0, 255}
};

struct SegmenterWeights {
  SegmenterNet net{nullptr};
  SegmenterConfig config;
  double initial_loss = 0.0;
  std::vector<double> epoch_losses;
  double val_dice = 0.0;
  bool overfit_warning = false;
};

SegmenterWeights train_lung_segmenter(const std::vector<SegSample>& dataset, const SegmenterConfig& config,
                                      std::ostream* log = nullptr);

/// Sigmoid output thresholded with a strict > 0.5 rule to {0, 255}.
core::LungMask predict_pseudolabel(SegmenterWeights& weights, const core::GrayImage& image);

/// Hard Dice (2|A n B| / (|A| + |B|)) between two binary masks; 1 when both are empty.
double binary_dice(const core::LungMask& a, const core::LungMask& b);

void save_segmenter(const std::filesystem::path& path, SegmenterWeights& weights);
SegmenterWeights load_segmenter(const std::filesystem::path& path);

}  // namespace pother::lung
