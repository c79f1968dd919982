#include "pother/lung/segmenter.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "pother/core/error.hpp"
#include "pother/core/rng.hpp"
#include "pother/core/tensor.hpp"
#include "pother/core/version.hpp"
#include "pother/net/checkpoint.hpp"
#include "pother/net/pother_net.hpp"
#include "pother/train/losses.hpp"

namespace pother::lung {

namespace F = torch::nn::functional;

void SegmenterConfig::validate() const {
  if (input_size <= 0 || working_size <= 0) throw ConfigError("segmenter sizes must be positive");
  if (levels < 1 || working_size % (1 << levels) != 0) {
    throw ConfigError("segmenter working_size must be divisible by 2^levels");
  }
  if (base_width <= 0 || epochs <= 0 || batch_size <= 0) throw ConfigError("segmenter widths/epochs/batch must be positive");
  if (!(learning_rate > 0.0)) throw ConfigError("segmenter learning rate must be positive");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must lie in [0, 1)");
}

void to_json(nlohmann::json& j, const SegmenterConfig& c) {
  j = nlohmann::json{{"input_size", c.input_size},   {"working_size", c.working_size},
                     {"base_width", c.base_width},   {"levels", c.levels},
                     {"epochs", c.epochs},           {"batch_size", c.batch_size},
                     {"learning_rate", c.learning_rate}, {"val_fraction", c.val_fraction},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, SegmenterConfig& c) {
  SegmenterConfig d;
  c.input_size = j.value("input_size", d.input_size);
  c.working_size = j.value("working_size", d.working_size);
  c.base_width = j.value("base_width", d.base_width);
  c.levels = j.value("levels", d.levels);
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.val_fraction = j.value("val_fraction", d.val_fraction);
  c.seed = j.value("seed", d.seed);
}

SegmenterNetImpl::SegmenterNetImpl(const SegmenterConfig& config) : working_size_(config.working_size) {
  config.validate();
  const int w = config.base_width;
  down_.push_back(register_module("down0", torch::nn::Sequential(net::ConvBnRelu(1, w, 3), net::ConvBnRelu(w, w, 3))));
  for (int l = 1; l <= config.levels; ++l) {
    const int in = w << (l - 1), out = w << l;
    down_.push_back(register_module(
        "down" + std::to_string(l),
        torch::nn::Sequential(torch::nn::MaxPool2d(2), net::ConvBnRelu(in, out, 3), net::ConvBnRelu(out, out, 3))));
  }
  for (int l = config.levels - 1; l >= 0; --l) {
    const int in = (w << (l + 1)) + (w << l), out = w << l;
    up_.push_back(register_module("up" + std::to_string(l),
                                  torch::nn::Sequential(net::ConvBnRelu(in, out, 3), net::ConvBnRelu(out, out, 3))));
  }
  head_ = register_module("head", torch::nn::Conv2d(torch::nn::Conv2dOptions(w, 1, 1)));
  torch::NoGradGuard guard;
  head_->bias.zero_();
}

torch::Tensor SegmenterNetImpl::forward(const torch::Tensor& x) {
  const std::vector<std::int64_t> full = {x.size(2), x.size(3)};
  auto y = x;
  if (full[0] != working_size_ || full[1] != working_size_) {
    y = F::interpolate(x, F::InterpolateFuncOptions()
                              .size(std::vector<std::int64_t>{working_size_, working_size_})
                              .mode(torch::kArea));
  }
  std::vector<torch::Tensor> skips;
  for (auto& d : down_) {
    y = d->forward(y);
    skips.push_back(y);
  }
  skips.pop_back();
  for (auto& u : up_) {
    auto skip = skips.back();
    skips.pop_back();
    y = F::interpolate(y, F::InterpolateFuncOptions()
                              .size(std::vector<std::int64_t>{skip.size(2), skip.size(3)})
                              .mode(torch::kBilinear)
                              .align_corners(false));
    y = u->forward(torch::cat({y, skip}, 1));
  }
  auto logits = head_(y);
  if (logits.size(2) != full[0] || logits.size(3) != full[1]) {
    logits = F::interpolate(logits, F::InterpolateFuncOptions().size(full).mode(torch::kBilinear).align_corners(false));
  }
  return logits;
}

double binary_dice(const core::LungMask& a, const core::LungMask& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument("binary_dice: size mismatch");
  std::size_t inter = 0, na = 0, nb = 0;
  auto va = a.values();
  auto vb = b.values();
  for (std::size_t i = 0; i < va.size(); ++i) {
    const bool x = va[i] == core::kLung, y = vb[i] == core::kLung;
    inter += x && y;
    na += x;
    nb += y;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

core::LungMask predict_pseudolabel(SegmenterWeights& weights, const core::GrayImage& image) {
  const int n = weights.config.input_size;
  if (image.rows() != n || image.cols() != n) {
    throw std::invalid_argument("predict_pseudolabel: expected " + std::to_string(n) + "x" + std::to_string(n) +
                                " image, got " + std::to_string(image.rows()) + "x" + std::to_string(image.cols()));
  }
  torch::NoGradGuard no_grad;
  weights.net->eval();
  auto prob = torch::sigmoid(weights.net->forward(core::to_tensor(image).unsqueeze(0))).contiguous();
  core::LungMask mask(n, n);
  const float* p = prob.data_ptr<float>();
  auto out = mask.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = p[i] > 0.5f ? core::kLung : core::kBackground;
  return mask;
}

SegmenterWeights train_lung_segmenter(const std::vector<SegSample>& dataset, const SegmenterConfig& config,
                                      std::ostream* log) {
  config.validate();
  if (dataset.empty()) throw DataError("segmenter training set is empty");
  for (const auto& s : dataset) {
    if (s.image.rows() != config.input_size || s.image.cols() != config.input_size ||
        s.mask.rows() != config.input_size || s.mask.cols() != config.input_size) {
      throw DataError("segmenter sample does not match input_size " + std::to_string(config.input_size));
    }
    if (!core::is_binary(s.mask)) throw DataError("segmenter masks must be binary {0, 255}");
  }

  torch::manual_seed(config.seed);
  SegmenterWeights w;
  w.config = config;
  w.net = SegmenterNet(config);

  // Inputs and soft targets are cached at the working resolution; training runs there.
  const auto ws = std::vector<std::int64_t>{config.working_size, config.working_size};
  std::vector<torch::Tensor> xs, ys;
  for (const auto& s : dataset) {
    auto x = core::to_tensor(s.image).unsqueeze(0);
    auto y = core::mask_to_tensor(s.mask, core::kLung).unsqueeze(0);
    xs.push_back(F::interpolate(x, F::InterpolateFuncOptions().size(ws).mode(torch::kArea)).squeeze(0));
    ys.push_back(F::interpolate(y, F::InterpolateFuncOptions().size(ws).mode(torch::kArea)).squeeze(0));
  }

  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  auto rng = core::make_rng(config.seed, 0x5e6);
  std::shuffle(order.begin(), order.end(), rng);
  auto n_val = static_cast<std::size_t>(std::floor(config.val_fraction * static_cast<double>(dataset.size())));
  std::vector<std::size_t> train_idx, val_idx;
  if (dataset.size() < 2 || n_val == 0) {
    train_idx = order;
    val_idx = order;
    w.overfit_warning = true;
    if (log) *log << "warning: " << dataset.size() << " segmentation sample(s); validating on the training set (overfit)\n";
  } else {
    val_idx.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
    train_idx.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  }

  torch::optim::Adam opt(w.net->parameters(), torch::optim::AdamOptions(config.learning_rate));
  bool first = true;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    w.net->train();
    std::shuffle(train_idx.begin(), train_idx.end(), rng);
    double sum = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < train_idx.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const auto end = std::min(train_idx.size(), start + static_cast<std::size_t>(config.batch_size));
      std::vector<torch::Tensor> bx, by;
      for (auto k = start; k < end; ++k) {
        bx.push_back(xs[train_idx[k]]);
        by.push_back(ys[train_idx[k]]);
      }
      auto x = torch::stack(bx), y = torch::stack(by);
      auto logits = w.net->forward(x);
      auto loss = F::binary_cross_entropy_with_logits(logits, y) + train::dice_loss(torch::sigmoid(logits), y);
      const double value = loss.item<double>();
      if (!std::isfinite(value)) {
        throw NonFiniteError("segmenter loss diverged at epoch " + std::to_string(epoch + 1) + " batch " +
                             std::to_string(batches + 1));
      }
      if (first) {
        w.initial_loss = value;
        first = false;
      }
      opt.zero_grad();
      loss.backward();
      opt.step();
      sum += value;
      ++batches;
    }
    w.epoch_losses.push_back(sum / std::max(1, batches));
    if (log) *log << "segmenter epoch " << epoch + 1 << " loss " << w.epoch_losses.back() << '\n';
  }

  double dice = 0.0;
  for (auto i : val_idx) dice += binary_dice(predict_pseudolabel(w, dataset[i].image), dataset[i].mask);
  w.val_dice = dice / static_cast<double>(val_idx.size());
  if (log) *log << "segmenter validation dice " << w.val_dice << '\n';
  return w;
}

void save_segmenter(const std::filesystem::path& path, SegmenterWeights& weights) {
  nlohmann::json header{{"kind", "lung-segmenter"},
                        {"architecture", "unet-encoder-decoder, 1-channel in, sigmoid out"},
                        {"code_version", kCodeVersion},
                        {"seed", weights.config.seed},
                        {"config", weights.config},
                        {"epochs", weights.config.epochs},
                        {"loss_curve", weights.epoch_losses},
                        {"initial_loss", weights.initial_loss},
                        {"val_dice", weights.val_dice}};
  net::save_checkpoint(path, header, *weights.net);
}

SegmenterWeights load_segmenter(const std::filesystem::path& path) {
  auto header = net::read_checkpoint_header(path);
  if (header.value("kind", "") != "lung-segmenter") throw DataError(path.string() + " is not a segmenter checkpoint");
  SegmenterWeights w;
  w.config = header.at("config").get<SegmenterConfig>();
  w.net = SegmenterNet(w.config);
  net::load_checkpoint(path, *w.net);
  w.epoch_losses = header.value("loss_curve", std::vector<double>{});
  w.initial_loss = header.value("initial_loss", 0.0);
  w.val_dice = header.value("val_dice", 0.0);
  return w;
}

}  // namespace pother::lung
