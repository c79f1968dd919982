#include "cli.hpp"

#include <atomic>
#include <csignal>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <memory>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "pother/core/error.hpp"
#include "pother/core/image_io.hpp"
#include "pother/core/version.hpp"
#include "pother/eval/audit.hpp"
#include "pother/eval/metrics.hpp"
#include "pother/eval/synth.hpp"
#include "pother/lung/masks.hpp"
#include "pother/lung/segmenter.hpp"
#include "pother/net/checkpoint.hpp"
#include "pother/pipeline/prepare.hpp"
#include "pother/train/trainer.hpp"
#include "pother/vote/gradcam.hpp"
#include "pother/vote/overlay.hpp"
#include "pother/vote/vote.hpp"

namespace pother::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << h;
  return s.str();
}

namespace {

std::atomic<bool> g_stop{false};

extern "C" void on_sigint(int) { g_stop.store(true); }

struct SigintScope {
  SigintScope() {
    g_stop.store(false);
    previous = std::signal(SIGINT, on_sigint);
  }
  ~SigintScope() { std::signal(SIGINT, previous); }
  void (*previous)(int);
};

// Flag values land in the merged config under a JSON pointer, so flags win over the file.
struct Overrides {
  std::vector<std::function<void(json&)>> apply;

  template <typename T>
  CLI::Option* option(CLI::App* app, const std::string& name, const std::string& pointer, const std::string& help) {
    auto value = std::make_shared<T>();
    auto* opt = app->add_option(name, *value, help);
    apply.push_back([value, opt, pointer](json& cfg) {
      if (opt->count() > 0) cfg[json::json_pointer(pointer)] = *value;
    });
    return opt;
  }

  CLI::Option* flag(CLI::App* app, const std::string& name, const std::string& pointer, const std::string& help) {
    auto* opt = app->add_flag(name, help);
    apply.push_back([opt, pointer](json& cfg) {
      if (opt->count() > 0) cfg[json::json_pointer(pointer)] = true;
    });
    return opt;
  }

  void common(CLI::App* app) {
    option<std::string>(app, "--config", "/__config_file", "JSON config file");
    option<std::string>(app, "--out", "/paths/output_dir", "output directory");
    option<std::uint64_t>(app, "--seed", "/seed", "random seed");
  }
};

json load_merged(json cfg_flags_only, const Overrides& ov) {
  for (const auto& f : ov.apply) f(cfg_flags_only);
  json merged = json::object();
  if (cfg_flags_only.contains("__config_file")) {
    const fs::path file = cfg_flags_only["__config_file"].get<std::string>();
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot open config file " + file.string());
    try {
      merged = json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigError("config file " + file.string() + ": " + e.what());
    }
    cfg_flags_only.erase("__config_file");
  }
  merged.merge_patch(cfg_flags_only);
  return merged;
}

std::string path_of(const json& cfg, const std::string& key, bool required = true) {
  const auto ptr = json::json_pointer("/paths/" + key);
  if (cfg.contains(ptr) && cfg.at(ptr).is_string()) return cfg.at(ptr).get<std::string>();
  if (required) throw ConfigError("missing required path '" + key + "' (flag or paths." + key + " in the config)");
  return {};
}

fs::path existing(const json& cfg, const std::string& key) {
  const fs::path p = path_of(cfg, key);
  if (!fs::exists(p)) throw ConfigError(key + " does not exist: " + p.string());
  return p;
}

fs::path output_dir(const json& cfg) {
  fs::path p = path_of(cfg, "output_dir");
  if (p.is_relative()) {
    if (const char* root = std::getenv(kOutputRootEnv); root && *root) p = fs::path(root) / p;
  }
  fs::create_directories(p);
  return p;
}

std::uint64_t seed_of(const json& cfg) { return cfg.value("seed", std::uint64_t{0}); }

template <typename T>
T section(const json& cfg, const std::string& key, T fallback = {}) {
  if (!cfg.contains(key)) return fallback;
  try {
    return cfg.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config section '" + key + "': " + e.what());
  }
}

net::ModelConfig model_of(const json& cfg) {
  net::ModelConfig m;
  if (cfg.contains("model")) {
    const auto& v = cfg.at("model");
    if (v.is_string()) {
      const auto name = v.get<std::string>();
      if (name == "desk") m = net::ModelConfig::desk();
      else if (name != "full") throw ConfigError("model preset must be 'desk' or 'full', got '" + name + "'");
    } else {
      m = section<net::ModelConfig>(cfg, "model");
    }
  }
  m.validate();
  return m;
}

void write_json(const fs::path& path, const ojson& j) { std::ofstream(path) << j.dump(2) << '\n'; }

void stamp(const fs::path& dir, const std::string& command, const json& cfg) {
  write_json(dir / "config.json", ojson::parse(cfg.dump()));
  write_json(dir / "run_stamp.json", ojson{{"command", command},
                                           {"config_hash", fnv1a_hex(cfg.dump())},
                                           {"seed", seed_of(cfg)},
                                           {"code_version", kCodeVersion}});
}

fs::path mask_path_for(const fs::path& mask_root, const core::ImageRecord& r) {
  return mask_root / fs::path(r.image_path).filename().replace_extension(".png");
}

std::string stem_of(const core::ImageRecord& r) { return fs::path(r.image_path).stem().string(); }

// ---- synth ----

int cmd_synth(const json& cfg, std::ostream& out) {
  auto spec = section<eval::SynthSpec>(cfg, "synth");
  if (cfg.contains("seed")) spec.seed = seed_of(cfg);
  spec.validate();
  const bool swapped = cfg.value(json::json_pointer("/synth_options/swapped"), false);
  const auto dir = output_dir(cfg);
  const auto set = eval::synth_generate(spec, swapped);
  eval::write_synth(dir, set);
  stamp(dir, "synth", cfg);
  out << "wrote " << set.items.size() << " images to " << dir.string() << '\n';
  return kExitOk;
}

// ---- pretrain-seg ----

int cmd_pretrain_seg(const json& cfg, std::ostream& out) {
  auto sc = section<lung::SegmenterConfig>(cfg, "segmenter");
  if (cfg.contains("seed")) sc.seed = seed_of(cfg);
  sc.validate();
  const auto manifest_path = existing(cfg, "manifest");
  const auto image_root = existing(cfg, "image_root");
  const auto mask_root = existing(cfg, "mask_root");
  const int limit = cfg.value(json::json_pointer("/segmenter_options/limit"), 0);
  const auto dir = output_dir(cfg);
  stamp(dir, "pretrain-seg", cfg);

  const auto manifest = core::load_manifest(manifest_path);
  std::vector<lung::SegSample> data;
  for (const auto& r : manifest.records()) {
    if (limit > 0 && static_cast<int>(data.size()) >= limit) break;
    auto image = core::load_image(image_root / r.image_path, sc.input_size);
    auto mask = core::resize_mask(core::load_mask(mask_path_for(mask_root, r)), sc.input_size, sc.input_size);
    data.push_back({std::move(image), std::move(mask)});
  }
  auto weights = lung::train_lung_segmenter(data, sc, &out);
  lung::save_segmenter(dir / "segmenter.ckpt", weights);

  std::ofstream csv(dir / "history.csv");
  csv << "epoch,train_loss\n" << std::setprecision(9);
  for (std::size_t e = 0; e < weights.epoch_losses.size(); ++e) csv << e + 1 << ',' << weights.epoch_losses[e] << '\n';
  write_json(dir / "summary.json", ojson{{"samples", data.size()},
                                         {"initial_loss", weights.initial_loss},
                                         {"epoch_losses", weights.epoch_losses},
                                         {"val_dice", weights.val_dice},
                                         {"overfit_warning", weights.overfit_warning}});
  return kExitOk;
}

// ---- gen-masks ----

int cmd_gen_masks(const json& cfg, std::ostream& out) {
  const auto seg_path = existing(cfg, "segmenter");
  const auto manifest_path = existing(cfg, "manifest");
  const auto image_root = existing(cfg, "image_root");
  const auto dir = output_dir(cfg);
  stamp(dir, "gen-masks", cfg);
  fs::create_directories(dir / "masks");

  auto seg = lung::load_segmenter(seg_path);
  const auto manifest = core::load_manifest(manifest_path);
  std::ofstream report(dir / "filter_report.jsonl");
  std::array<int, 3> counts{};
  for (const auto& r : manifest.records()) {
    lung::FilterReport rep;
    try {
      const auto image = core::load_image(image_root / r.image_path, seg.config.input_size);
      auto result = lung::filter_mask(lung::predict_pseudolabel(seg, image));
      rep = result.report;
      if (rep.status != lung::FilterStatus::Rejected) core::save_mask(mask_path_for(dir / "masks", r), result.mask);
    } catch (const DataError& e) {
      rep.status = lung::FilterStatus::Rejected;
      rep.reason = std::string("decode failed: ") + e.what();
    }
    ++counts[static_cast<int>(rep.status)];
    lung::write_filter_report_line(report, r.image_path, rep);
  }
  out << "accepted " << counts[0] << " repaired " << counts[1] << " rejected " << counts[2] << '\n';
  write_json(dir / "summary.json", ojson{{"accepted", counts[0]}, {"repaired", counts[1]}, {"rejected", counts[2]}});
  return kExitOk;
}

// ---- train ----

std::vector<patch::PatchSource> load_sources(const core::DatasetManifest& m, const fs::path& image_root,
                                             const fs::path& mask_root, int source_size,
                                             std::vector<std::string>& skipped) {
  std::vector<patch::PatchSource> out;
  for (const auto& r : m.records()) {
    const auto mp = mask_path_for(mask_root, r);
    if (!fs::exists(mp)) {
      skipped.push_back(r.image_path + ": no mask");
      continue;
    }
    auto image = core::load_image(image_root / r.image_path, source_size);
    auto mask = core::load_mask(mp);
    if (!core::is_binary(mask)) throw DataError("mask is not binary {0,255}: " + mp.string());
    out.push_back(pipeline::make_patch_source(r, image, mask, source_size));
    if (out.back().area.nonzero_count() == 0) skipped.push_back(r.image_path + ": empty draw area");
  }
  return out;
}

train::TrainConfig train_config_of(const json& cfg, const net::ModelConfig& model) {
  auto tc = section<train::TrainConfig>(cfg, "train");
  if (cfg.contains("seed")) tc.seed = seed_of(cfg);
  const auto explicit_size = json::json_pointer("/train/patch_size");
  if (cfg.contains(explicit_size) && cfg.at(explicit_size).get<int>() != model.input_size) {
    throw ConfigError("train.patch_size must equal model.input_size");
  }
  tc.geometry.out_size = model.input_size;
  tc.validate();
  return tc;
}

ojson history_json(const train::TrainHistory& h) {
  ojson epochs = ojson::array();
  for (const auto& e : h.epochs) {
    epochs.push_back({{"epoch", e.epoch},
                      {"train_loss", e.train_loss},
                      {"val_loss", e.val_loss},
                      {"val_acc", e.val_acc},
                      {"val_f1", e.val_f1},
                      {"steps", e.steps},
                      {"samples", e.samples}});
  }
  return ojson{{"initial_loss", h.initial_loss},
               {"epochs", epochs},
               {"best_epoch", h.best_epoch},
               {"decreasing_epochs", h.decreasing_epochs()},
               {"skipped", h.skipped},
               {"interrupted", h.interrupted}};
}

int cmd_train(const json& cfg, std::ostream& out) {
  const auto model_cfg = model_of(cfg);
  const auto tc = train_config_of(cfg, model_cfg);
  const auto manifest_path = existing(cfg, "manifest");
  const auto image_root = existing(cfg, "image_root");
  const auto mask_root = existing(cfg, "mask_root");
  const double train_ratio = cfg.value(json::json_pointer("/train_options/train_ratio"), 0.8);
  const auto dir = output_dir(cfg);
  stamp(dir, "train", cfg);

  const auto manifest = core::load_manifest(manifest_path);
  auto train_m = manifest.filter(core::Split::Train);
  auto val_m = manifest.filter(core::Split::Val);
  if (val_m.empty()) std::tie(train_m, val_m) = core::split_train_val(manifest, train_ratio, tc.seed);

  std::vector<std::string> skipped;
  const auto train_sources = load_sources(train_m, image_root, mask_root, tc.geometry.source_size, skipped);
  const auto val_sources = load_sources(val_m, image_root, mask_root, tc.geometry.source_size, skipped);
  if (train_sources.empty()) throw DataError("no training images with masks");

  std::vector<core::ImageRecord> recs;
  for (const auto& s : train_sources) recs.push_back(s.record);
  train::LossConfig loss;
  loss.dice_epsilon = cfg.value(json::json_pointer("/loss/dice_epsilon"), loss.dice_epsilon);
  loss.class_weights = train::class_weights(core::DatasetManifest(recs).class_counts());

  torch::manual_seed(tc.seed);
  auto model = net::build_model(model_cfg);
  SigintScope sigint;
  train::TrainHooks hooks{&g_stop, &out, dir / "nonfinite_batch"};
  const auto history = train::train(model, train_sources, val_sources, tc, loss, hooks);

  json header{{"kind", "pother-net"},
              {"model", model_cfg},
              {"train", tc},
              {"class_weights", loss.class_weights},
              {"best_epoch", history.best_epoch},
              {"seed", tc.seed},
              {"code_version", kCodeVersion}};
  net::save_checkpoint(dir / "model.ckpt", header, *model);
  std::ofstream csv(dir / "history.csv");
  train::write_history_csv(csv, history);
  auto hj = history_json(history);
  for (const auto& s : skipped) hj["skipped"].push_back(s);
  write_json(dir / "history.json", hj);
  if (history.interrupted) out << "interrupted: checkpoint holds the best epoch so far\n";
  out << "best epoch " << history.best_epoch << ", loss decreased in " << history.decreasing_epochs() << " of "
      << history.epochs.size() << " epochs\n";
  return kExitOk;
}

// ---- inference helpers ----

struct LoadedModel {
  net::PotherNet model{nullptr};
  train::TrainConfig train;
};

LoadedModel load_model(const fs::path& path) {
  const auto header = net::read_checkpoint_header(path);
  if (header.value("kind", "") != "pother-net") throw DataError(path.string() + " is not a patch-model checkpoint");
  LoadedModel m;
  m.model = net::build_model(header.at("model").get<net::ModelConfig>());
  m.train = header.at("train").get<train::TrainConfig>();
  net::load_checkpoint(path, *m.model);
  m.model->eval();
  return m;
}

struct InferOptions {
  int patches = 100;
  patch::Strategy strategy = patch::Strategy::Random;
};

InferOptions infer_options(const json& cfg) {
  InferOptions o;
  o.patches = cfg.value(json::json_pointer("/infer/patches"), 100);
  const auto s = cfg.value(json::json_pointer("/infer/strategy"), std::string("random"));
  const auto parsed = patch::parse_strategy(s);
  if (!parsed) throw ConfigError("strategy must be 'random' or 'grid', got '" + s + "'");
  o.strategy = *parsed;
  if (o.patches < 1) throw ConfigError("patches must be at least 1");
  return o;
}

// Mask from --mask / mask_root when given, otherwise predicted and filtered with the segmenter.
std::optional<core::LungMask> mask_for(const json& cfg, const core::ImageRecord& r, const fs::path& image_path,
                                       std::optional<lung::SegmenterWeights>& seg, std::string& why) {
  const auto single = path_of(cfg, "mask", false);
  const auto root = path_of(cfg, "mask_root", false);
  if (!single.empty()) return core::load_mask(single);
  if (!root.empty()) {
    const auto p = mask_path_for(root, r);
    if (fs::exists(p)) return core::load_mask(p);
    why = "no mask at " + p.string();
    return std::nullopt;
  }
  if (!seg) seg = lung::load_segmenter(existing(cfg, "segmenter"));
  auto res = lung::filter_mask(lung::predict_pseudolabel(*seg, core::load_image(image_path, seg->config.input_size)));
  if (res.report.status == lung::FilterStatus::Rejected) {
    why = "mask rejected: " + res.report.reason;
    return std::nullopt;
  }
  return res.mask;
}

struct ImageResult {
  patch::PatchSource source;
  vote::PatchInference inference;
};

ImageResult infer_record(LoadedModel& lm, const core::ImageRecord& r, const fs::path& image_path,
                         const core::LungMask& mask, const InferOptions& opt, std::uint64_t seed, std::uint64_t index) {
  const int size = lm.train.geometry.source_size;
  ImageResult res{pipeline::make_patch_source(r, core::load_image(image_path, size), mask, size), {}};
  auto rng = core::make_rng(seed, 0x1f00 + index);
  res.inference = vote::infer_image(lm.model, res.source.image, res.source.area, opt.patches, opt.strategy, rng,
                                    lm.train.geometry);
  return res;
}

std::vector<vote::ActivationMap> maps_for(LoadedModel& lm, const vote::PatchInference& inf) {
  std::vector<vote::ActivationMap> maps;
  for (std::size_t i = 0; i < inf.patches.size(); ++i) {
    maps.push_back(vote::gradcam(lm.model, inf.patches[i], inf.tally.votes[i].predicted));
  }
  return maps;
}

// ---- infer ----

int cmd_infer(const json& cfg, std::ostream& out) {
  auto lm = load_model(existing(cfg, "checkpoint"));
  const auto opt = infer_options(cfg);
  const bool with_maps = cfg.value(json::json_pointer("/infer/gradcam"), false);
  const auto seed = seed_of(cfg);
  std::optional<lung::SegmenterWeights> seg;

  const auto single = path_of(cfg, "image", false);
  if (!single.empty()) {
    const fs::path image_path = existing(cfg, "image");
    const auto dir = output_dir(cfg);
    stamp(dir, "infer", cfg);
    core::ImageRecord r{"", image_path.filename().string(), core::ClassLabel::Normal, core::Split::Test, ""};
    std::string why;
    const auto mask = mask_for(cfg, r, image_path, seg, why);
    if (!mask) throw DataError(image_path.string() + ": " + why);
    const auto res = infer_record(lm, r, image_path, *mask, opt, seed, 0);
    write_json(dir / "votes.json", vote::to_json(res.inference.tally));
    std::vector<patch::PatchSpec> specs;
    for (const auto& v : res.inference.tally.votes) specs.push_back(v.spec);
    std::ofstream sj(dir / "specs.jsonl");
    patch::write_specs_jsonl(sj, specs);
    const auto maps = with_maps ? maps_for(lm, res.inference) : std::vector<vote::ActivationMap>{};
    vote::save_bgr(dir / "overlay.png", vote::compose_overlay(res.source.image, res.inference.tally, maps));
    out << "final " << core::to_string(res.inference.tally.final) << " (" << res.inference.tally.votes.size()
        << " patches)\n";
    return kExitOk;
  }

  const auto manifest_path = existing(cfg, "manifest");
  const auto image_root = existing(cfg, "image_root");
  const int overlays = cfg.value(json::json_pointer("/infer/overlays"), -1);
  const auto dir = output_dir(cfg);
  stamp(dir, "infer", cfg);
  fs::create_directories(dir / "overlays");
  const auto manifest = core::load_manifest(manifest_path);
  std::ofstream csv(dir / "predictions.csv");
  std::ofstream votes(dir / "votes.jsonl");
  std::ofstream skipped(dir / "skipped.txt");
  csv << "image_path,truth,predicted,tie\n";
  std::uint64_t index = 0;
  for (const auto& r : manifest.records()) {
    const auto image_path = image_root / r.image_path;
    std::string why;
    const auto mask = mask_for(cfg, r, image_path, seg, why);
    if (!mask) {
      skipped << r.image_path << ": " << why << '\n';
      ++index;
      continue;
    }
    const auto res = infer_record(lm, r, image_path, *mask, opt, seed, index);
    const auto& t = res.inference.tally;
    csv << r.image_path << ',' << core::to_string(r.label) << ',' << core::to_string(t.final) << ',' << (t.tie ? 1 : 0)
        << '\n';
    auto vj = vote::to_json(t);
    vj["image_path"] = r.image_path;
    votes << vj.dump() << '\n';
    if (overlays < 0 || static_cast<int>(index) < overlays) {
      const auto maps = with_maps ? maps_for(lm, res.inference) : std::vector<vote::ActivationMap>{};
      vote::save_bgr(dir / "overlays" / (stem_of(r) + ".png"), vote::compose_overlay(res.source.image, t, maps));
    }
    ++index;
  }
  out << "predicted " << index << " images\n";
  return kExitOk;
}

// ---- evaluate ----

int cmd_evaluate(const json& cfg, std::ostream& out) {
  const auto pred_path = existing(cfg, "predictions");
  const auto method = cfg.value(json::json_pointer("/evaluate/method"), std::string("POTHER"));
  const auto dir = output_dir(cfg);
  stamp(dir, "evaluate", cfg);

  std::ifstream in(pred_path);
  std::string line;
  std::getline(in, line);
  if (line.rfind("image_path,truth,predicted", 0) != 0) throw DataError("unexpected predictions header: " + line);
  std::vector<core::ClassLabel> truth, pred;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (cells.size() < 3) throw ParseError("expected image_path,truth,predicted", line_no);
    const auto t = core::parse_class_label(cells[1]);
    const auto p = core::parse_class_label(cells[2]);
    if (!t || !p) throw ParseError("unknown class label", line_no);
    truth.push_back(*t);
    pred.push_back(*p);
  }
  if (truth.empty()) throw DataError("no predictions in " + pred_path.string());
  const auto report = eval::compute_metrics(pred, truth);
  write_json(dir / "metrics.json", eval::to_json(report));
  const auto md = eval::to_markdown(report, method);
  std::ofstream(dir / "metrics.md") << md;
  out << md;
  return kExitOk;
}

// ---- gradcam ----

int cmd_gradcam(const json& cfg, std::ostream& out) {
  auto lm = load_model(existing(cfg, "checkpoint"));
  const auto opt = infer_options(cfg);
  const fs::path image_path = existing(cfg, "image");
  const auto dir = output_dir(cfg);
  stamp(dir, "gradcam", cfg);
  std::optional<lung::SegmenterWeights> seg;
  core::ImageRecord r{"", image_path.filename().string(), core::ClassLabel::Normal, core::Split::Test, ""};
  std::string why;
  const auto mask = mask_for(cfg, r, image_path, seg, why);
  if (!mask) throw DataError(image_path.string() + ": " + why);
  const auto res = infer_record(lm, r, image_path, *mask, opt, seed_of(cfg), 0);
  const auto maps = maps_for(lm, res.inference);

  vote::OverlayConfig ov;
  ojson mj = ojson::array();
  for (std::size_t i = 0; i < maps.size(); ++i) {
    vote::save_bgr(dir / ("patch_" + std::to_string(i) + ".png"), vote::render_patch_map(res.inference.patches[i], maps[i], ov));
    const auto& s = res.inference.tally.votes[i].spec;
    float peak = 0.0f;
    for (float v : maps[i].heatmap.values()) peak = std::max(peak, v);
    mj.push_back({{"patch", i},
                  {"center_row", s.center_row},
                  {"center_col", s.center_col},
                  {"target", core::to_string(maps[i].target_class)},
                  {"weight", maps[i].weight},
                  {"peak", peak}});
  }
  write_json(dir / "maps.json", mj);
  write_json(dir / "votes.json", vote::to_json(res.inference.tally));
  vote::save_bgr(dir / "overlay.png", vote::compose_overlay(res.source.image, res.inference.tally, maps, ov));
  out << "wrote " << maps.size() << " activation maps\n";
  return kExitOk;
}

// ---- audit-bias ----

int cmd_audit(const json& cfg, std::ostream& out) {
  auto ac = cfg.contains("audit") ? section<eval::AuditConfig>(cfg, "audit") : eval::AuditConfig::desk();
  if (cfg.contains("seed")) {
    ac.data.seed = seed_of(cfg);
    ac.pother_train.seed = ac.global_train.seed = seed_of(cfg);
  }
  ac.validate();
  const auto dir = output_dir(cfg);
  stamp(dir, "audit-bias", cfg);
  SigintScope sigint;
  const auto report = eval::run_bias_audit(ac, dir, &out);
  write_json(dir / "audit.json", eval::to_json(report, ac));
  const auto md = eval::to_markdown(report);
  std::ofstream(dir / "audit.md") << md;
  out << md;
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"patch-voted multi-task chest radiograph classifier"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "torch intra-op threads (0 = library default)");

  std::map<std::string, std::pair<Overrides, std::function<int(const json&, std::ostream&)>>> cmds;
  auto add = [&](const std::string& name, const std::string& help, auto fn) {
    auto* sub = app.add_subcommand(name, help);
    auto& entry = cmds[name];
    entry.second = fn;
    entry.first.common(sub);
    return std::pair<CLI::App*, Overrides*>{sub, &entry.first};
  };

  {
    auto [s, o] = add("synth", "generate a synthetic confounder dataset", cmd_synth);
    o->option<double>(s, "--rho", "/synth/rho", "confounder-label correlation");
    o->option<std::vector<int>>(s, "--counts", "/synth/counts", "images per class (3 values)")->expected(3);
    o->option<int>(s, "--image-size", "/synth/image_size", "image side in pixels");
    o->option<std::string>(s, "--confounder", "/synth/confounder", "token | cable");
    o->option<std::string>(s, "--split", "/synth/split", "train | val | test");
    o->option<std::string>(s, "--prefix", "/synth/prefix", "file name prefix");
    o->flag(s, "--swapped", "/synth_options/swapped", "permute confounder styles among classes");
  }
  {
    auto [s, o] = add("pretrain-seg", "train the lung segmenter", cmd_pretrain_seg);
    o->option<std::string>(s, "--manifest", "/paths/manifest", "dataset manifest");
    o->option<std::string>(s, "--image-root", "/paths/image_root", "image directory");
    o->option<std::string>(s, "--mask-root", "/paths/mask_root", "ground-truth mask directory");
    o->option<int>(s, "--epochs", "/segmenter/epochs", "training epochs");
    o->option<int>(s, "--working-size", "/segmenter/working_size", "internal resolution");
    o->option<int>(s, "--limit", "/segmenter_options/limit", "use at most N records");
  }
  {
    auto [s, o] = add("gen-masks", "predict and filter lung masks", cmd_gen_masks);
    o->option<std::string>(s, "--segmenter", "/paths/segmenter", "segmenter checkpoint");
    o->option<std::string>(s, "--manifest", "/paths/manifest", "dataset manifest");
    o->option<std::string>(s, "--image-root", "/paths/image_root", "image directory");
  }
  {
    auto [s, o] = add("train", "train the patch-based multi-task model", cmd_train);
    o->option<std::string>(s, "--manifest", "/paths/manifest", "dataset manifest");
    o->option<std::string>(s, "--image-root", "/paths/image_root", "image directory");
    o->option<std::string>(s, "--mask-root", "/paths/mask_root", "lung mask directory");
    o->option<std::string>(s, "--model", "/model", "model preset: full | desk");
    o->option<int>(s, "--epochs", "/train/epochs", "epochs");
    o->option<int>(s, "--batch-size", "/train/batch_size", "images per step");
    o->option<double>(s, "--lr", "/train/learning_rate", "learning rate");
    o->option<double>(s, "--weight-decay", "/train/weight_decay", "L2 weight decay");
    o->option<int>(s, "--steps-per-epoch", "/train/steps_per_epoch", "optimizer steps per epoch (0 = one pass)");
    o->option<double>(s, "--train-ratio", "/train_options/train_ratio", "train share when the manifest has no val split");
  }
  for (const auto& name : {"infer", "gradcam"}) {
    auto [s, o] = add(name, name == std::string("infer") ? "classify images by patch voting" : "per-patch activation maps",
                      name == std::string("infer") ? cmd_infer : cmd_gradcam);
    o->option<std::string>(s, "--checkpoint", "/paths/checkpoint", "model checkpoint");
    o->option<std::string>(s, "--image", "/paths/image", "single image");
    o->option<std::string>(s, "--mask", "/paths/mask", "lung mask for --image");
    o->option<std::string>(s, "--mask-root", "/paths/mask_root", "lung mask directory");
    o->option<std::string>(s, "--segmenter", "/paths/segmenter", "segmenter checkpoint when no mask is given");
    o->option<int>(s, "--patches", "/infer/patches", "patches per image");
    o->option<std::string>(s, "--strategy", "/infer/strategy", "random | grid");
    if (std::string(name) == "infer") {
      o->option<std::string>(s, "--manifest", "/paths/manifest", "batch mode manifest");
      o->option<std::string>(s, "--image-root", "/paths/image_root", "batch mode image directory");
      o->option<int>(s, "--overlays", "/infer/overlays", "overlay PNGs to write in batch mode (-1 = all)");
      o->flag(s, "--gradcam", "/infer/gradcam", "blend activation maps into overlays");
    }
  }
  {
    auto [s, o] = add("evaluate", "metrics from a predictions CSV", cmd_evaluate);
    o->option<std::string>(s, "--predictions", "/paths/predictions", "predictions.csv from infer");
    o->option<std::string>(s, "--method", "/evaluate/method", "row label in the table");
  }
  {
    auto [s, o] = add("audit-bias", "train and audit global vs patch-voted models on synthetic confounders", cmd_audit);
    o->option<std::vector<double>>(s, "--rhos", "/audit/rhos", "correlation values to audit");
  }

  std::vector<std::string> argv_store{"pother"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return e.get_exit_code() == 0 ? kExitOk : kExitConfig;
  }
  if (threads > 0) torch::set_num_threads(threads);

  for (auto* sub : app.get_subcommands()) {
    auto& [overrides, fn] = cmds.at(sub->get_name());
    try {
      const auto cfg = load_merged(json::object(), overrides);
      if (cfg.contains("audit") && cfg["audit"].is_object() && sub->get_name() == "audit-bias") {
        // --rhos alone must not wipe the preset: merge onto the desk defaults.
        json base = eval::AuditConfig::desk();
        base.merge_patch(cfg["audit"]);
        json c2 = cfg;
        c2["audit"] = base;
        return fn(c2, out);
      }
      return fn(cfg, out);
    } catch (const ConfigError& e) {
      err << "config error: " << e.what() << '\n';
      return kExitConfig;
    } catch (const std::exception& e) {
      err << "error: " << e.what() << '\n';
      return kExitRuntime;
    }
  }
  return kExitConfig;
}

}  // namespace pother::cli
