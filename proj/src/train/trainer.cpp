#include "pother/train/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>

#include "pother/core/error.hpp"
#include "pother/core/image_io.hpp"
#include "pother/core/rng.hpp"
#include "pother/core/tensor.hpp"
#include "pother/train/radam.hpp"
#include "pother/train/sampler.hpp"
#include "pother/vote/vote.hpp"

namespace pother::train {

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be >= 0");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) throw ConfigError("weight_decay must be >= 0");
  if (optimizer != "rectified-adam") throw ConfigError("unsupported optimizer '" + optimizer + "'");
  if (steps_per_epoch < 0) throw ConfigError("steps_per_epoch must be >= 0");
  if (val_patches < 1) throw ConfigError("val_patches must be at least 1");
  if (geometry.side < 2 || geometry.side > geometry.source_size || geometry.out_size < 8) {
    throw ConfigError("invalid patch geometry");
  }
  augment.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"learning_rate", c.learning_rate},
                     {"weight_decay", c.weight_decay},
                     {"optimizer", c.optimizer},
                     {"augment", c.augment},
                     {"seed", c.seed},
                     {"steps_per_epoch", c.steps_per_epoch},
                     {"val_patches", c.val_patches},
                     {"patch_side", c.geometry.side},
                     {"source_size", c.geometry.source_size},
                     {"patch_size", c.geometry.out_size}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.optimizer = j.value("optimizer", d.optimizer);
  c.augment = j.contains("augment") ? j.at("augment").get<AugmentConfig>() : d.augment;
  c.seed = j.value("seed", d.seed);
  c.steps_per_epoch = j.value("steps_per_epoch", d.steps_per_epoch);
  c.val_patches = j.value("val_patches", d.val_patches);
  c.geometry.side = j.value("patch_side", d.geometry.side);
  c.geometry.source_size = j.value("source_size", d.geometry.source_size);
  c.geometry.out_size = j.value("patch_size", d.geometry.out_size);
}

int TrainHistory::decreasing_epochs() const {
  int n = 0;
  double prev = initial_loss;
  for (const auto& e : epochs) {
    n += e.train_loss < prev;
    prev = e.train_loss;
  }
  return n;
}

void write_history_csv(std::ostream& out, const TrainHistory& history) {
  out << "epoch,train_loss,val_loss,val_acc,f1_normal,f1_pneumonia,f1_covid19\n";
  out << std::setprecision(9);
  for (const auto& e : history.epochs) {
    out << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.val_acc;
    for (double f : e.val_f1) out << ',' << f;
    out << '\n';
  }
}

namespace {

struct Snapshot {
  std::vector<torch::Tensor> tensors;
};

Snapshot snapshot(torch::nn::Module& m) {
  torch::NoGradGuard g;
  Snapshot s;
  for (auto& p : m.parameters()) s.tensors.push_back(p.detach().clone());
  for (auto& b : m.buffers()) s.tensors.push_back(b.detach().clone());
  return s;
}

void restore(torch::nn::Module& m, const Snapshot& s) {
  torch::NoGradGuard g;
  std::size_t i = 0;
  for (auto& p : m.parameters()) p.copy_(s.tensors[i++]);
  for (auto& b : m.buffers()) b.copy_(s.tensors[i++]);
}

core::DatasetManifest manifest_of(const std::vector<core::ImageRecord>& records) { return core::DatasetManifest(records); }

torch::Tensor weight_tensor(const LossConfig& loss) {
  return torch::tensor(std::vector<double>(loss.class_weights.begin(), loss.class_weights.end()), torch::kFloat32);
}

// Epoch bookkeeping shared by both trainers: best-epoch tracking and logging.
class Tracker {
 public:
  Tracker(torch::nn::Module& model, TrainHistory& history, const TrainHooks& hooks, bool has_val)
      : model_(model), history_(history), hooks_(hooks), has_val_(has_val) {}

  void finish_epoch(EpochRecord rec) {
    const bool better = !has_val_ || history_.best_epoch == 0 || rec.val_acc > best_acc_ ||
                        (rec.val_acc == best_acc_ && rec.val_loss < best_loss_);
    if (better) {
      history_.best_epoch = rec.epoch;
      best_acc_ = rec.val_acc;
      best_loss_ = rec.val_loss;
      best_ = snapshot(model_);
    }
    if (hooks_.log) {
      *hooks_.log << "epoch " << rec.epoch << " train_loss " << rec.train_loss << " val_loss " << rec.val_loss
                  << " val_acc " << rec.val_acc << (better ? " *" : "") << '\n';
    }
    history_.epochs.push_back(rec);
  }

  void restore_best() {
    if (history_.best_epoch > 0) restore(model_, best_);
  }

  bool stop_requested() const { return hooks_.stop && hooks_.stop->load(); }

 private:
  torch::nn::Module& model_;
  TrainHistory& history_;
  const TrainHooks& hooks_;
  bool has_val_;
  double best_acc_ = -1.0;
  double best_loss_ = 0.0;
  Snapshot best_;
};

void dump_batch(const TrainHooks& hooks, int epoch, int step, const std::vector<patch::PatchPair>& pairs,
                const std::vector<std::string>& paths, double dice, double wce) {
  if (hooks.dump_dir.empty()) return;
  std::filesystem::create_directories(hooks.dump_dir);
  nlohmann::ordered_json j;
  j["epoch"] = epoch;
  j["step"] = step;
  j["dice"] = std::isfinite(dice) ? nlohmann::ordered_json(dice) : nlohmann::ordered_json(std::to_string(dice));
  j["wce"] = std::isfinite(wce) ? nlohmann::ordered_json(wce) : nlohmann::ordered_json(std::to_string(wce));
  j["items"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& s = pairs[i].spec;
    j["items"].push_back({{"image_path", i < paths.size() ? paths[i] : ""},
                          {"label", core::to_string(pairs[i].label)},
                          {"center_row", s.center_row},
                          {"center_col", s.center_col},
                          {"side", s.side}});
    core::save_image(hooks.dump_dir / ("patch_" + std::to_string(i) + ".png"), pairs[i].image_patch);
  }
  std::ofstream(hooks.dump_dir / "batch.json") << j.dump(2) << '\n';
}

int steps_for(const TrainConfig& config, std::size_t n) {
  if (config.steps_per_epoch > 0) return config.steps_per_epoch;
  return static_cast<int>((n + static_cast<std::size_t>(config.batch_size) - 1) / static_cast<std::size_t>(config.batch_size));
}

struct ValResult {
  double loss = 0.0;
  eval::MetricsReport metrics;
  bool any = false;
};

ValResult validate_patch_model(net::PotherNet& model, const std::vector<patch::PatchSource>& val_set,
                               const TrainConfig& config, const LossConfig& loss, const torch::Tensor& weights) {
  ValResult out;
  torch::NoGradGuard no_grad;
  model->eval();
  std::vector<core::ClassLabel> preds, truths;
  double loss_sum = 0.0;
  auto rng = core::make_rng(config.seed, 0x7a1);
  for (const auto& src : val_set) {
    if (src.area.nonzero_count() == 0) continue;
    const auto specs = patch::make_inference_patches(src.area, config.val_patches, patch::Strategy::Grid, rng,
                                                     config.geometry.side);
    std::vector<torch::Tensor> xs, ms;
    for (const auto& s : specs) {
      auto pair = patch::extract_patch(src.image, src.mask, s, config.geometry.out_size);
      xs.push_back(core::to_tensor(pair.image_patch));
      ms.push_back(core::mask_to_tensor(pair.mask_patch, 1));
    }
    auto x = core::stack_planes(xs);
    auto m = core::stack_planes(ms);
    auto result = model->forward(x);
    auto probs = torch::softmax(result.class_logits, 1);
    auto targets = torch::full({x.size(0)}, static_cast<std::int64_t>(core::to_index(src.record.label)), torch::kInt64);
    auto l = total_loss(dice_loss(result.seg_map, m, loss.dice_epsilon), weighted_ce(probs, targets, weights));
    loss_sum += l.item<double>();

    auto logits = result.class_logits.to(torch::kFloat32).contiguous();
    std::vector<vote::Vote> votes;
    for (std::int64_t i = 0; i < logits.size(0); ++i) {
      auto row = logits[i].contiguous();
      votes.push_back(vote::vote_from_logits(std::span<const float>(row.data_ptr<float>(), row.numel()),
                                             specs[static_cast<std::size_t>(i)]));
    }
    preds.push_back(vote::majority_vote(votes).final);
    truths.push_back(src.record.label);
  }
  if (!truths.empty()) {
    out.any = true;
    out.loss = loss_sum / static_cast<double>(truths.size());
    out.metrics = eval::compute_metrics(preds, truths);
  }
  return out;
}

}  // namespace

TrainHistory train(net::PotherNet& model, const std::vector<patch::PatchSource>& train_set,
                   const std::vector<patch::PatchSource>& val_set, const TrainConfig& config,
                   const LossConfig& loss, const TrainHooks& hooks) {
  config.validate();
  loss.validate();
  if (train_set.empty()) throw DataError("no training images");
  if (model->config().input_size != config.geometry.out_size) {
    throw ConfigError("model input_size " + std::to_string(model->config().input_size) + " != patch_size " +
                      std::to_string(config.geometry.out_size));
  }

  torch::manual_seed(config.seed);
  std::vector<core::ImageRecord> records;
  for (const auto& s : train_set) records.push_back(s.record);
  WeightedSampler sampler(manifest_of(records), config.seed);
  auto patch_rng = core::make_rng(config.seed, 0x9a7);
  auto aug_rng = core::make_rng(config.seed, 0xa06);
  const auto weights = weight_tensor(loss);

  RAdam opt(model->parameters(), {config.learning_rate, 0.9, 0.999, 1e-8, config.weight_decay});
  TrainHistory history;
  Tracker tracker(*model, history, hooks, !val_set.empty());
  bool first = true;
  const int steps = steps_for(config, train_set.size());

  for (int epoch = 1; epoch <= config.epochs && !history.interrupted; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    double sum = 0.0;
    for (int step = 0; step < steps; ++step) {
      model->train();
      const auto idx = sampler.draw_distinct(static_cast<std::size_t>(config.batch_size));
      std::vector<const patch::PatchSource*> picked;
      std::vector<std::string> paths;
      for (auto i : idx) picked.push_back(&train_set[i]);
      patch::SkipReport skips;
      auto pairs = patch::make_training_batch(picked, patch_rng, config.geometry, &skips);
      for (auto& s : skips.skipped) {
        if (std::find(history.skipped.begin(), history.skipped.end(), s) == history.skipped.end()) {
          history.skipped.push_back(s);
        }
      }
      if (pairs.empty()) continue;

      std::vector<torch::Tensor> xs, ms;
      std::vector<std::int64_t> ys;
      for (auto& p : pairs) {
        augment_pair(p.image_patch, p.mask_patch, aug_rng, config.augment);
        xs.push_back(core::to_tensor(p.image_patch));
        ms.push_back(core::mask_to_tensor(p.mask_patch, 1));
        ys.push_back(core::to_index(p.label));
      }
      for (const auto* s : picked) {
        if (s->area.nonzero_count() > 0) paths.push_back(s->record.image_path);
      }
      auto x = core::stack_planes(xs);
      auto m = core::stack_planes(ms);
      auto y = torch::tensor(ys, torch::kInt64);

      auto out = model->forward(x);
      auto dice = dice_loss(out.seg_map, m, loss.dice_epsilon);
      auto wce = weighted_ce(torch::softmax(out.class_logits, 1), y, weights);
      torch::Tensor total;
      try {
        total = total_loss(dice, wce);
      } catch (const NonFiniteError&) {
        dump_batch(hooks, epoch, step + 1, pairs, paths, dice.item<double>(), wce.item<double>());
        throw NonFiniteError("non-finite loss at epoch " + std::to_string(epoch) + " step " +
                             std::to_string(step + 1) +
                             (hooks.dump_dir.empty() ? "" : "; batch dumped to " + hooks.dump_dir.string()));
      }
      const double value = total.item<double>();
      if (first) {
        history.initial_loss = value;
        first = false;
      }
      opt.zero_grad();
      total.backward();
      opt.step();
      sum += value;
      ++rec.steps;
      rec.samples += static_cast<int>(pairs.size());
      if (tracker.stop_requested()) {
        history.interrupted = true;
        break;
      }
    }
    rec.train_loss = rec.steps ? sum / rec.steps : 0.0;
    const auto val = validate_patch_model(model, val_set, config, loss, weights);
    if (val.any) {
      rec.val_loss = val.loss;
      rec.val_acc = val.metrics.accuracy;
      rec.val_f1 = val.metrics.f1;
    }
    tracker.finish_epoch(rec);
  }
  tracker.restore_best();
  model->eval();
  return history;
}

TrainHistory train_global(net::GlobalNet& model, const std::vector<ImageExample>& train_set,
                          const std::vector<ImageExample>& val_set, const TrainConfig& config,
                          const LossConfig& loss, const TrainHooks& hooks) {
  config.validate();
  loss.validate();
  if (train_set.empty()) throw DataError("no training images");
  const int size = model->config().input_size;
  for (const auto& e : train_set) {
    if (e.image.rows() != size || e.image.cols() != size) throw DataError("global example size != model input_size");
  }

  torch::manual_seed(config.seed);
  std::vector<core::ImageRecord> records;
  for (const auto& e : train_set) records.push_back(e.record);
  WeightedSampler sampler(manifest_of(records), config.seed);
  auto aug_rng = core::make_rng(config.seed, 0xa06);
  const auto weights = weight_tensor(loss);

  RAdam opt(model->parameters(), {config.learning_rate, 0.9, 0.999, 1e-8, config.weight_decay});
  TrainHistory history;
  Tracker tracker(*model, history, hooks, !val_set.empty());
  bool first = true;
  const int steps = steps_for(config, train_set.size());

  for (int epoch = 1; epoch <= config.epochs && !history.interrupted; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    double sum = 0.0;
    for (int step = 0; step < steps; ++step) {
      model->train();
      const auto idx = sampler.draw_distinct(static_cast<std::size_t>(config.batch_size));
      std::vector<torch::Tensor> xs;
      std::vector<std::int64_t> ys;
      for (auto i : idx) {
        xs.push_back(core::to_tensor(augment(train_set[i].image, aug_rng, config.augment)));
        ys.push_back(core::to_index(train_set[i].record.label));
      }
      auto logits = model->forward(core::stack_planes(xs));
      auto wce = weighted_ce(torch::softmax(logits, 1), torch::tensor(ys, torch::kInt64), weights);
      const double value = wce.item<double>();
      if (!std::isfinite(value)) {
        throw NonFiniteError("non-finite loss at epoch " + std::to_string(epoch) + " step " + std::to_string(step + 1));
      }
      if (first) {
        history.initial_loss = value;
        first = false;
      }
      opt.zero_grad();
      wce.backward();
      opt.step();
      sum += value;
      ++rec.steps;
      rec.samples += static_cast<int>(idx.size());
      if (tracker.stop_requested()) {
        history.interrupted = true;
        break;
      }
    }
    rec.train_loss = rec.steps ? sum / rec.steps : 0.0;
    if (!val_set.empty()) {
      torch::NoGradGuard no_grad;
      model->eval();
      std::vector<core::ClassLabel> preds, truths;
      double loss_sum = 0.0;
      for (std::size_t start = 0; start < val_set.size(); start += 32) {
        const auto end = std::min(val_set.size(), start + 32);
        std::vector<torch::Tensor> xs;
        std::vector<std::int64_t> ys;
        for (auto i = start; i < end; ++i) {
          xs.push_back(core::to_tensor(val_set[i].image));
          ys.push_back(core::to_index(val_set[i].record.label));
          truths.push_back(val_set[i].record.label);
        }
        auto logits = model->forward(core::stack_planes(xs));
        auto probs = torch::softmax(logits, 1);
        loss_sum += weighted_ce(probs, torch::tensor(ys, torch::kInt64), weights).item<double>() *
                    static_cast<double>(end - start);
        auto am = probs.argmax(1);
        for (std::int64_t k = 0; k < am.size(0); ++k) {
          preds.push_back(core::label_from_index(static_cast<int>(am[k].item<std::int64_t>())));
        }
      }
      const auto metrics = eval::compute_metrics(preds, truths);
      rec.val_loss = loss_sum / static_cast<double>(val_set.size());
      rec.val_acc = metrics.accuracy;
      rec.val_f1 = metrics.f1;
    }
    tracker.finish_epoch(rec);
  }
  tracker.restore_best();
  model->eval();
  return history;
}

}  // namespace pother::train
