#include "pother/net/pother_net.hpp"

#include <algorithm>

#include "pother/core/error.hpp"
#include "pother/net/checkpoint.hpp"

namespace pother::net {

namespace F = torch::nn::functional;

namespace {

torch::nn::Conv2dOptions conv_opts(int in, int out, int kernel, int stride = 1, bool bias = false) {
  return torch::nn::Conv2dOptions(in, out, kernel).stride(stride).padding(kernel / 2).bias(bias);
}

struct BasicBlockImpl : torch::nn::Module {
  static constexpr int kExpansion = 1;
  BasicBlockImpl(int in, int planes, int stride) {
    conv1 = register_module("conv1", torch::nn::Conv2d(conv_opts(in, planes, 3, stride)));
    bn1 = register_module("bn1", torch::nn::BatchNorm2d(planes));
    conv2 = register_module("conv2", torch::nn::Conv2d(conv_opts(planes, planes, 3)));
    bn2 = register_module("bn2", torch::nn::BatchNorm2d(planes));
    if (stride != 1 || in != planes) {
      down = register_module("down", torch::nn::Sequential(torch::nn::Conv2d(conv_opts(in, planes, 1, stride)),
                                                           torch::nn::BatchNorm2d(planes)));
    }
  }
  torch::Tensor forward(torch::Tensor x) {
    auto y = torch::relu(bn1(conv1(x)));
    y = bn2(conv2(y));
    auto identity = down ? down->forward(x) : x;
    return torch::relu(y + identity);
  }
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
  torch::nn::BatchNorm2d bn1{nullptr}, bn2{nullptr};
  torch::nn::Sequential down{nullptr};
};
TORCH_MODULE(BasicBlock);

struct BottleneckImpl : torch::nn::Module {
  static constexpr int kExpansion = 4;
  BottleneckImpl(int in, int planes, int stride) {
    const int out = planes * kExpansion;
    conv1 = register_module("conv1", torch::nn::Conv2d(conv_opts(in, planes, 1)));
    bn1 = register_module("bn1", torch::nn::BatchNorm2d(planes));
    conv2 = register_module("conv2", torch::nn::Conv2d(conv_opts(planes, planes, 3, stride)));
    bn2 = register_module("bn2", torch::nn::BatchNorm2d(planes));
    conv3 = register_module("conv3", torch::nn::Conv2d(conv_opts(planes, out, 1)));
    bn3 = register_module("bn3", torch::nn::BatchNorm2d(out));
    if (stride != 1 || in != out) {
      down = register_module("down", torch::nn::Sequential(torch::nn::Conv2d(conv_opts(in, out, 1, stride)),
                                                           torch::nn::BatchNorm2d(out)));
    }
  }
  torch::Tensor forward(torch::Tensor x) {
    auto y = torch::relu(bn1(conv1(x)));
    y = torch::relu(bn2(conv2(y)));
    y = bn3(conv3(y));
    auto identity = down ? down->forward(x) : x;
    return torch::relu(y + identity);
  }
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, conv3{nullptr};
  torch::nn::BatchNorm2d bn1{nullptr}, bn2{nullptr}, bn3{nullptr};
  torch::nn::Sequential down{nullptr};
};
TORCH_MODULE(Bottleneck);

void init_weights(torch::nn::Module& root) {
  torch::NoGradGuard guard;
  for (auto& m : root.modules(/*include_self=*/false)) {
    if (auto* conv = m->as<torch::nn::Conv2d>()) {
      torch::nn::init::kaiming_normal_(conv->weight, 0.0, torch::kFanOut, torch::kReLU);
      if (conv->bias.defined()) conv->bias.zero_();
    } else if (auto* bn = m->as<torch::nn::BatchNorm2d>()) {
      bn->weight.fill_(1.0);
      bn->bias.zero_();
    }
  }
}

void check_finite(const torch::Tensor& t, const std::string& where) {
  if (!torch::isfinite(t).all().item<bool>()) throw NonFiniteError("non-finite activations at " + where);
}

}  // namespace

void ModelConfig::validate() const {
  if (input_size <= 0 || input_size % 32 != 0) throw ConfigError("input_size must be a positive multiple of 32");
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
  if (encoder_depth != "residual-50" && encoder_depth != "residual-18" && encoder_depth != "residual-10") {
    throw ConfigError("unsupported encoder_depth '" + encoder_depth + "'");
  }
  if (base_width <= 0) throw ConfigError("base_width must be positive");
  if (pretrained_encoder && encoder_weights.empty()) {
    throw ConfigError("pretrained_encoder requires encoder_weights (no weights are downloaded)");
  }
  if (inception_kernels.empty() || inception_strides.empty()) throw ConfigError("inception lists must be non-empty");
  for (int k : inception_kernels) {
    if (k <= 0 || k % 2 == 0) throw ConfigError("inception kernels must be odd and positive");
  }
  for (int s : inception_strides) {
    if (s != 1 && s != 2) throw ConfigError("inception strides must be 1 or 2");
  }
  if (decoder_channels.size() != 5) throw ConfigError("decoder_channels needs 5 entries");
  for (int c : decoder_channels) {
    if (c <= 0) throw ConfigError("decoder channels must be positive");
  }
  if (gate_channels <= 0 || gate_channels % static_cast<int>(inception_kernels.size()) != 0) {
    throw ConfigError("gate_channels must be a positive multiple of the inception branch count");
  }
}

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.input_size = 64;
  c.encoder_depth = "residual-18";
  c.base_width = 8;
  c.decoder_channels = {32, 16, 16, 8, 8};
  c.gate_channels = 8;
  return c;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"input_size", c.input_size},
                     {"num_classes", c.num_classes},
                     {"encoder_depth", c.encoder_depth},
                     {"base_width", c.base_width},
                     {"pretrained_encoder", c.pretrained_encoder},
                     {"encoder_weights", c.encoder_weights},
                     {"attention_enabled", c.attention_enabled},
                     {"inception_enabled", c.inception_enabled},
                     {"inception_kernels", c.inception_kernels},
                     {"inception_strides", c.inception_strides},
                     {"decoder_channels", c.decoder_channels},
                     {"gate_channels", c.gate_channels},
                     {"check_finite", c.check_finite}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.input_size = j.value("input_size", d.input_size);
  c.num_classes = j.value("num_classes", d.num_classes);
  c.encoder_depth = j.value("encoder_depth", d.encoder_depth);
  c.base_width = j.value("base_width", d.base_width);
  c.pretrained_encoder = j.value("pretrained_encoder", d.pretrained_encoder);
  c.encoder_weights = j.value("encoder_weights", d.encoder_weights);
  c.attention_enabled = j.value("attention_enabled", d.attention_enabled);
  c.inception_enabled = j.value("inception_enabled", d.inception_enabled);
  c.inception_kernels = j.value("inception_kernels", d.inception_kernels);
  c.inception_strides = j.value("inception_strides", d.inception_strides);
  c.decoder_channels = j.value("decoder_channels", d.decoder_channels);
  c.gate_channels = j.value("gate_channels", d.gate_channels);
  c.check_finite = j.value("check_finite", d.check_finite);
}

std::vector<std::pair<int, int>> inception_branches(const std::vector<int>& kernels, const std::vector<int>& strides) {
  std::vector<std::pair<int, int>> out;
  for (std::size_t i = 0; i < kernels.size(); ++i) {
    out.emplace_back(kernels[i], strides[i * strides.size() / kernels.size()]);
  }
  return out;
}

torch::Tensor l2_normalize(const torch::Tensor& features) {
  return features / (features.norm(2, /*dim=*/{1}, /*keepdim=*/true) + 1e-12);
}

std::vector<torch::Tensor> l2_normalize_scales(const std::vector<torch::Tensor>& features) {
  if (features.empty()) throw std::invalid_argument("l2_normalize_scales: empty feature list");
  std::vector<torch::Tensor> out;
  out.reserve(features.size());
  for (const auto& f : features) out.push_back(l2_normalize(f));
  return out;
}

ConvBnReluImpl::ConvBnReluImpl(int in, int out, int kernel, int stride) {
  conv = register_module("conv", torch::nn::Conv2d(conv_opts(in, out, kernel, stride)));
  bn = register_module("bn", torch::nn::BatchNorm2d(out));
}

torch::Tensor ConvBnReluImpl::forward(const torch::Tensor& x) { return torch::relu(bn(conv(x))); }

ResidualEncoderImpl::ResidualEncoderImpl(const std::string& depth, int base_width) {
  stem_ = register_module("stem", torch::nn::Sequential(torch::nn::Conv2d(conv_opts(1, base_width, 7, 2)),
                                                        torch::nn::BatchNorm2d(base_width), torch::nn::ReLU()));
  pool_ = register_module("pool", torch::nn::MaxPool2d(torch::nn::MaxPool2dOptions(3).stride(2).padding(1)));
  channels_.push_back(base_width);

  const bool bottleneck = depth == "residual-50";
  std::vector<int> counts = bottleneck ? std::vector<int>{3, 4, 6, 3}
                            : depth == "residual-18" ? std::vector<int>{2, 2, 2, 2}
                                                     : std::vector<int>{1, 1, 1, 1};
  const int expansion = bottleneck ? BottleneckImpl::kExpansion : BasicBlockImpl::kExpansion;
  int in = base_width;
  for (int stage = 0; stage < 4; ++stage) {
    const int planes = base_width << stage;
    torch::nn::Sequential layer;
    for (int b = 0; b < counts[stage]; ++b) {
      const int stride = (b == 0 && stage > 0) ? 2 : 1;
      if (bottleneck) {
        layer->push_back(Bottleneck(in, planes, stride));
      } else {
        layer->push_back(BasicBlock(in, planes, stride));
      }
      in = planes * expansion;
    }
    layers_.push_back(register_module("layer" + std::to_string(stage + 1), layer));
    channels_.push_back(in);
  }
}

std::vector<torch::Tensor> ResidualEncoderImpl::forward(torch::Tensor x) {
  std::vector<torch::Tensor> stages;
  stages.reserve(5);
  x = stem_->forward(x);
  stages.push_back(x);
  x = pool_(x);
  for (auto& layer : layers_) {
    x = layer->forward(x);
    stages.push_back(x);
  }
  return stages;
}

InceptionFuseImpl::InceptionFuseImpl(int channels, const std::vector<int>& kernels, const std::vector<int>& strides)
    : spec_(inception_branches(kernels, strides)) {
  const int n = static_cast<int>(spec_.size());
  if (channels % n != 0) {
    throw ConfigError("inception: " + std::to_string(channels) + " channels not divisible by " + std::to_string(n) +
                      " branches");
  }
  for (int i = 0; i < n; ++i) {
    auto [k, s] = spec_[i];
    convs_.push_back(register_module("branch" + std::to_string(i),
                                     torch::nn::Conv2d(conv_opts(channels, channels / n, k, s, /*bias=*/true))));
  }
}

torch::Tensor InceptionFuseImpl::branch_raw(std::size_t i, const torch::Tensor& x) {
  return torch::relu(convs_.at(i)(x));
}

torch::Tensor InceptionFuseImpl::forward(const torch::Tensor& x) {
  std::vector<torch::Tensor> outs;
  outs.reserve(convs_.size());
  const std::vector<std::int64_t> size = {x.size(2), x.size(3)};
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    auto y = branch_raw(i, x);
    if (y.size(2) != size[0] || y.size(3) != size[1]) {
      y = F::interpolate(y, F::InterpolateFuncOptions().size(size).mode(torch::kNearest));
    }
    outs.push_back(y);
  }
  return torch::cat(outs, 1);
}

AttentionAggregateImpl::AttentionAggregateImpl(int skip_channels, std::vector<int> pyramid_channels, int gate_channels,
                                               bool inception_enabled, const std::vector<int>& kernels,
                                               const std::vector<int>& strides)
    : inception_enabled_(inception_enabled) {
  if (pyramid_channels.empty()) throw ConfigError("attention gate needs at least one pyramid level");
  for (std::size_t i = 0; i < pyramid_channels.size(); ++i) {
    lateral_.push_back(register_module(
        "lateral" + std::to_string(i), torch::nn::Conv2d(conv_opts(pyramid_channels[i], gate_channels, 1, 1, true))));
    if (inception_enabled_) {
      inception_.push_back(
          register_module("inception" + std::to_string(i), InceptionFuse(gate_channels, kernels, strides)));
    }
  }
  const int inter = std::max(4, skip_channels / 4);
  const int concat = gate_channels * static_cast<int>(pyramid_channels.size());
  theta_ = register_module("theta", torch::nn::Conv2d(conv_opts(skip_channels, inter, 1)));
  phi_ = register_module("phi", torch::nn::Conv2d(conv_opts(concat, inter, 1, 1, true)));
  psi_ = register_module("psi", torch::nn::Conv2d(conv_opts(inter, 1, 1, 1, true)));
}

torch::Tensor AttentionAggregateImpl::forward(const torch::Tensor& skip, const std::vector<torch::Tensor>& pyramid) {
  if (pyramid.size() != lateral_.size()) {
    throw std::invalid_argument("attention gate: expected " + std::to_string(lateral_.size()) + " pyramid levels");
  }
  const std::vector<std::int64_t> size = {skip.size(2), skip.size(3)};
  std::vector<torch::Tensor> levels;
  levels.reserve(pyramid.size());
  for (std::size_t i = 0; i < pyramid.size(); ++i) {
    // 1x1 projection commutes with bilinear resampling, so project at the coarse resolution.
    auto y = lateral_[i](pyramid[i]);
    if (y.size(2) != size[0] || y.size(3) != size[1]) {
      y = F::interpolate(y, F::InterpolateFuncOptions().size(size).mode(torch::kBilinear).align_corners(false));
    }
    if (y.size(2) != size[0] || y.size(3) != size[1]) {
      throw std::invalid_argument("attention gate: spatial size mismatch after resampling");
    }
    if (inception_enabled_) y = inception_[i](y);
    levels.push_back(y);
  }
  auto gating = torch::cat(l2_normalize_scales(levels), 1);

  switch (override_) {
    case GateOverride::Ones: coefficients_ = torch::ones({skip.size(0), 1, size[0], size[1]}, skip.options()); break;
    case GateOverride::Zeros: coefficients_ = torch::zeros({skip.size(0), 1, size[0], size[1]}, skip.options()); break;
    case GateOverride::None: coefficients_ = torch::sigmoid(psi_(torch::relu(theta_(skip) + phi_(gating)))); break;
  }
  return skip * coefficients_;
}

DecoderBlockImpl::DecoderBlockImpl(int in, int skip, int out) {
  conv1 = register_module("conv1", ConvBnRelu(in + skip, out, 3));
  conv2 = register_module("conv2", ConvBnRelu(out, out, 3));
}

torch::Tensor DecoderBlockImpl::forward(torch::Tensor x, const torch::Tensor& skip) {
  x = F::interpolate(x, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
  if (skip.defined()) x = torch::cat({x, skip}, 1);
  return conv2(conv1(x));
}

PotherNetImpl::PotherNetImpl(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  encoder_ = register_module("encoder", ResidualEncoder(config_.encoder_depth, config_.base_width));
  const auto& enc = encoder_->stage_channels();
  const auto& dec = config_.decoder_channels;

  for (int j = 0; j < 5; ++j) {
    const int in = j == 0 ? enc[4] : dec[j - 1];
    const int skip = j < 4 ? enc[3 - j] : 0;
    decoder_.push_back(register_module("decoder" + std::to_string(j), DecoderBlock(in, skip, dec[j])));
    if (j < 4 && config_.attention_enabled) {
      std::vector<int> pyramid = {enc[4]};
      for (int k = 0; k < j; ++k) pyramid.push_back(dec[k]);
      gates_.push_back(register_module("gate" + std::to_string(j),
                                       AttentionAggregate(skip, pyramid, config_.gate_channels,
                                                          config_.inception_enabled, config_.inception_kernels,
                                                          config_.inception_strides)));
    }
  }
  seg_head_ = register_module("seg_head", torch::nn::Conv2d(conv_opts(dec[4], 1, 1, 1, true)));
  classifier_ = register_module("classifier", torch::nn::Linear(enc[4], config_.num_classes));
  init_weights(*this);
  if (config_.pretrained_encoder) load_checkpoint(config_.encoder_weights, *encoder_);
}

torch::Tensor PotherNetImpl::checked(torch::Tensor t, const char* stage, int index) const {
  if (config_.check_finite) check_finite(t, std::string(stage) + " " + std::to_string(index));
  return t;
}

ClassifierTrace PotherNetImpl::trace(const torch::Tensor& x) {
  auto stages = encoder_->forward(x);
  for (int i = 0; i < 5; ++i) checked(stages[i], "encoder stage", i + 1);
  auto features = stages[4];
  auto pooled = F::adaptive_avg_pool2d(features, F::AdaptiveAvgPool2dFuncOptions(1)).flatten(1);
  return {features, checked(classifier_(pooled), "classifier", 0)};
}

ModelOutput PotherNetImpl::forward(const torch::Tensor& x) {
  auto stages = encoder_->forward(x);
  for (int i = 0; i < 5; ++i) checked(stages[i], "encoder stage", i + 1);
  const auto& bottleneck = stages[4];

  std::vector<torch::Tensor> pyramid = {bottleneck};
  torch::Tensor y = bottleneck;
  for (int j = 0; j < 5; ++j) {
    torch::Tensor skip;
    if (j < 4) {
      skip = stages[3 - j];
      if (config_.attention_enabled) skip = gates_[j](skip, pyramid);
    }
    y = checked(decoder_[j](y, skip), "decoder block", j);
    pyramid.push_back(y);
  }
  auto seg = torch::sigmoid(seg_head_(y));
  auto pooled = F::adaptive_avg_pool2d(bottleneck, F::AdaptiveAvgPool2dFuncOptions(1)).flatten(1);
  auto logits = checked(classifier_(pooled), "classifier", 0);
  return {logits, seg, bottleneck};
}

void PotherNetImpl::set_gate_override(GateOverride o) {
  for (auto& g : gates_) g->set_override(o);
}

GlobalNetImpl::GlobalNetImpl(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  encoder_ = register_module("encoder", ResidualEncoder(config_.encoder_depth, config_.base_width));
  classifier_ = register_module("classifier", torch::nn::Linear(encoder_->stage_channels()[4], config_.num_classes));
  init_weights(*this);
  if (config_.pretrained_encoder) load_checkpoint(config_.encoder_weights, *encoder_);
}

ClassifierTrace GlobalNetImpl::trace(const torch::Tensor& x) {
  auto stages = encoder_->forward(x);
  auto features = stages[4];
  if (config_.check_finite) check_finite(features, "encoder stage 5");
  auto pooled = F::adaptive_avg_pool2d(features, F::AdaptiveAvgPool2dFuncOptions(1)).flatten(1);
  return {features, classifier_(pooled)};
}

PotherNet build_model(const ModelConfig& config) { return PotherNet(config); }

std::int64_t count_parameters(const torch::nn::Module& module) {
  std::int64_t n = 0;
  for (const auto& p : module.parameters()) n += p.numel();
  return n;
}

}  // namespace pother::net
