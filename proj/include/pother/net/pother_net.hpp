#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace pother::net {

/// Architecture description. The defaults are the full-size network (residual-50 encoder at 224 px);
/// `desk()` is a slimmed preset for single-core CPU runs with the same topology.
struct ModelConfig {
  int input_size = 224;
  int num_classes = 3;
  std::string encoder_depth = "residual-50";  // residual-50 | residual-18 | residual-10
  int base_width = 64;
  bool pretrained_encoder = false;
  std::string encoder_weights;  // checkpoint holding encoder parameters, required when pretrained
  bool attention_enabled = true;
  bool inception_enabled = true;
  std::vector<int> inception_kernels = {1, 3, 5, 7};
  std::vector<int> inception_strides = {1, 2};
  std::vector<int> decoder_channels = {256, 128, 64, 32, 16};
  int gate_channels = 64;
  bool check_finite = true;

  /// Throws ConfigError on unsupported values.
  void validate() const;

  static ModelConfig desk();
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Kernel/stride pairs of the inception branches. Strides are spread over the kernels in order, so
/// kernels {1,3,5,7} with strides {1,2} give (1,1) (3,1) (5,2) (7,2).
std::vector<std::pair<int, int>> inception_branches(const std::vector<int>& kernels, const std::vector<int>& strides);

/// Divides every channel vector by its L2 norm (+1e-12), per spatial location.
torch::Tensor l2_normalize(const torch::Tensor& features);
std::vector<torch::Tensor> l2_normalize_scales(const std::vector<torch::Tensor>& features);

struct ConvBnReluImpl : torch::nn::Module {
  ConvBnReluImpl(int in, int out, int kernel, int stride = 1);
  torch::Tensor forward(const torch::Tensor& x);
  torch::nn::Conv2d conv{nullptr};
  torch::nn::BatchNorm2d bn{nullptr};
};
TORCH_MODULE(ConvBnRelu);

/// Residual backbone emitting five stages at strides 2, 4, 8, 16 and 32.
class ResidualEncoderImpl : public torch::nn::Module {
 public:
  ResidualEncoderImpl(const std::string& depth, int base_width);
  std::vector<torch::Tensor> forward(torch::Tensor x);
  const std::vector<int>& stage_channels() const { return channels_; }

 private:
  torch::nn::Sequential stem_{nullptr};
  torch::nn::MaxPool2d pool_{nullptr};
  std::vector<torch::nn::Sequential> layers_;
  std::vector<int> channels_;
};
TORCH_MODULE(ResidualEncoder);

/// Parallel multi-kernel branches of width C / branches, concatenated back to C channels.
/// Stride-2 branches are restored to the input size by nearest-neighbour upsampling.
class InceptionFuseImpl : public torch::nn::Module {
 public:
  InceptionFuseImpl(int channels, const std::vector<int>& kernels, const std::vector<int>& strides);
  torch::Tensor forward(const torch::Tensor& x);
  /// Output of one branch before resampling (test hook).
  torch::Tensor branch_raw(std::size_t i, const torch::Tensor& x);
  std::size_t branch_count() const { return convs_.size(); }

 private:
  std::vector<torch::nn::Conv2d> convs_;
  std::vector<std::pair<int, int>> spec_;
};
TORCH_MODULE(InceptionFuse);

enum class GateOverride { None, Ones, Zeros };

/// Attention gate whose gating signal aggregates a pyramid of decoder features. Each level is
/// projected to `gate_channels`, resampled to the skip resolution, passed through an inception
/// block and L2-normalized; the concatenation gates the skip features through additive attention.
class AttentionAggregateImpl : public torch::nn::Module {
 public:
  AttentionAggregateImpl(int skip_channels, std::vector<int> pyramid_channels, int gate_channels,
                         bool inception_enabled, const std::vector<int>& kernels, const std::vector<int>& strides);

  torch::Tensor forward(const torch::Tensor& skip, const std::vector<torch::Tensor>& pyramid);

  /// Coefficients from the most recent forward, shape [N, 1, H, W].
  const torch::Tensor& last_coefficients() const { return coefficients_; }
  void set_override(GateOverride o) { override_ = o; }

 private:
  std::vector<torch::nn::Conv2d> lateral_;
  std::vector<InceptionFuse> inception_;
  torch::nn::Conv2d theta_{nullptr}, phi_{nullptr}, psi_{nullptr};
  bool inception_enabled_;
  GateOverride override_ = GateOverride::None;
  torch::Tensor coefficients_;
};
TORCH_MODULE(AttentionAggregate);

struct DecoderBlockImpl : torch::nn::Module {
  DecoderBlockImpl(int in, int skip, int out);
  torch::Tensor forward(torch::Tensor x, const torch::Tensor& skip);
  ConvBnRelu conv1{nullptr}, conv2{nullptr};
};
TORCH_MODULE(DecoderBlock);

/// Classifier activations at the explanation target layer plus logits.
struct ClassifierTrace {
  torch::Tensor features;
  torch::Tensor logits;
};

struct ModelOutput {
  torch::Tensor class_logits;  // [N, classes]
  torch::Tensor seg_map;       // [N, 1, H, W], sigmoid
  torch::Tensor features;      // deepest encoder stage
};

/// Multi-task encoder-decoder: classification from the pooled encoder bottleneck, segmentation from
/// the attention-gated decoder.
class PotherNetImpl : public torch::nn::Module {
 public:
  explicit PotherNetImpl(ModelConfig config);

  ModelOutput forward(const torch::Tensor& x);
  /// Encoder and classification head only.
  ClassifierTrace trace(const torch::Tensor& x);
  torch::Tensor classify(const torch::Tensor& x) { return trace(x).logits; }

  const ModelConfig& config() const { return config_; }
  ResidualEncoder& encoder() { return encoder_; }
  std::vector<AttentionAggregate>& gates() { return gates_; }
  void set_gate_override(GateOverride o);

 private:
  torch::Tensor checked(torch::Tensor t, const char* stage, int index) const;

  ModelConfig config_;
  ResidualEncoder encoder_{nullptr};
  std::vector<AttentionAggregate> gates_;
  std::vector<DecoderBlock> decoder_;
  torch::nn::Conv2d seg_head_{nullptr};
  torch::nn::Linear classifier_{nullptr};
};
TORCH_MODULE(PotherNet);

/// Whole-image baseline: the same encoder with only the pooled classification head.
class GlobalNetImpl : public torch::nn::Module {
 public:
  explicit GlobalNetImpl(ModelConfig config);
  ClassifierTrace trace(const torch::Tensor& x);
  torch::Tensor forward(const torch::Tensor& x) { return trace(x).logits; }
  torch::Tensor classify(const torch::Tensor& x) { return trace(x).logits; }
  const ModelConfig& config() const { return config_; }

 private:
  ModelConfig config_;
  ResidualEncoder encoder_{nullptr};
  torch::nn::Linear classifier_{nullptr};
};
TORCH_MODULE(GlobalNet);

PotherNet build_model(const ModelConfig& config);

std::int64_t count_parameters(const torch::nn::Module& module);

}  // namespace pother::net
