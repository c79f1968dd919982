#pragma once

#include <atomic>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pother/eval/metrics.hpp"
#include "pother/net/pother_net.hpp"
#include "pother/patch/patch.hpp"
#include "pother/train/augment.hpp"
#include "pother/train/losses.hpp"

namespace pother::train {

struct TrainConfig {
  int epochs = 100;
  int batch_size = 16;
  double learning_rate = 1e-4;
  double weight_decay = 1e-4;
  std::string optimizer = "rectified-adam";
  AugmentConfig augment;
  std::uint64_t seed = 0;
  int steps_per_epoch = 0;  // 0: ceil(train images / batch_size)
  int val_patches = 9;      // grid patches voted per validation image
  patch::PatchGeometry geometry;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
  eval::PerClass val_f1{};
  int steps = 0;
  int samples = 0;  // patch pairs (or images) consumed
};

struct TrainHistory {
  double initial_loss = 0.0;  // loss of the very first batch, before any update
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  std::vector<std::string> skipped;  // records without a usable draw area
  bool interrupted = false;

  /// Epochs whose mean training loss is below the previous epoch's (epoch 1 vs the first batch).
  int decreasing_epochs() const;
};

/// epoch,train_loss,val_loss,val_acc,f1_normal,f1_pneumonia,f1_covid19
void write_history_csv(std::ostream& out, const TrainHistory& history);

struct TrainHooks {
  const std::atomic<bool>* stop = nullptr;  // checked after every optimizer step
  std::ostream* log = nullptr;
  std::filesystem::path dump_dir;  // batch dump on non-finite loss
};

/// Multi-task patch training. Each step draws distinct images with the class-balanced sampler, cuts
/// one fresh patch per image, augments it and minimizes Dice + weighted CE. On return the model holds
/// the weights of the best validation epoch (accuracy, then lower loss).
TrainHistory train(net::PotherNet& model, const std::vector<patch::PatchSource>& train_set,
                   const std::vector<patch::PatchSource>& val_set, const TrainConfig& config,
                   const LossConfig& loss, const TrainHooks& hooks = {});

struct ImageExample {
  core::ImageRecord record;
  core::GrayImage image;  // model input size
};

/// Whole-image baseline training with weighted CE only.
TrainHistory train_global(net::GlobalNet& model, const std::vector<ImageExample>& train_set,
                          const std::vector<ImageExample>& val_set, const TrainConfig& config,
                          const LossConfig& loss, const TrainHooks& hooks = {});

}  // namespace pother::train
