#include "pother/eval/audit.hpp"

#include <chrono>
#include <cstdio>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <tuple>

#include "pother/core/error.hpp"
#include "pother/core/image_io.hpp"
#include "pother/pipeline/prepare.hpp"
#include "pother/vote/gradcam.hpp"
#include "pother/vote/overlay.hpp"
#include "pother/vote/vote.hpp"

namespace pother::eval {

AuditConfig AuditConfig::desk() {
  AuditConfig c;
  c.data.counts = {40, 40, 40};
  c.data.prefix = "audit";

  c.pother_train.epochs = 25;
  c.pother_train.batch_size = 16;
  c.pother_train.learning_rate = 2e-3;
  c.pother_train.steps_per_epoch = 15;
  c.pother_train.val_patches = 9;
  c.pother_train.geometry = {80, 1024, c.model.input_size};

  c.global_train = c.pother_train;
  c.global_train.epochs = 100;
  c.global_train.steps_per_epoch = 8;
  return c;
}

void AuditConfig::validate() const {
  data.validate();
  model.validate();
  pother_train.validate();
  global_train.validate();
  if (rhos.empty()) throw ConfigError("audit needs at least one rho");
  for (double r : rhos) {
    if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("audit rho values must lie in [0, 1]");
  }
  for (int c : val_counts) {
    if (c < 0) throw ConfigError("val_counts must be >= 0");
  }
  for (int c : test_counts) {
    if (c < 1) throw ConfigError("test_counts must be >= 1");
  }
  if (infer_patches < 1) throw ConfigError("infer_patches must be at least 1");
  if (pother_train.geometry.out_size != model.input_size) throw ConfigError("patch size must equal model input_size");
  if (figures < 0) throw ConfigError("figures must be >= 0");
}

void to_json(nlohmann::json& j, const AuditConfig& c) {
  j = nlohmann::json{{"data", c.data},
                     {"val_counts", c.val_counts},
                     {"test_counts", c.test_counts},
                     {"rhos", c.rhos},
                     {"model", c.model},
                     {"pother_train", c.pother_train},
                     {"global_train", c.global_train},
                     {"infer_patches", c.infer_patches},
                     {"strategy", c.strategy == patch::Strategy::Grid ? "grid" : "random"},
                     {"crop_top", c.crop_top},
                     {"global_swapped_max", c.global_swapped_max},
                     {"pother_retention_min", c.pother_retention_min},
                     {"control_retention_min", c.control_retention_min},
                     {"figures", c.figures}};
}

void from_json(const nlohmann::json& j, AuditConfig& c) {
  const auto d = AuditConfig::desk();
  c.data = j.contains("data") ? j.at("data").get<SynthSpec>() : d.data;
  c.val_counts = j.value("val_counts", d.val_counts);
  c.test_counts = j.value("test_counts", d.test_counts);
  c.rhos = j.value("rhos", d.rhos);
  c.model = j.contains("model") ? j.at("model").get<net::ModelConfig>() : d.model;
  c.pother_train = j.contains("pother_train") ? j.at("pother_train").get<train::TrainConfig>() : d.pother_train;
  c.global_train = j.contains("global_train") ? j.at("global_train").get<train::TrainConfig>() : d.global_train;
  c.infer_patches = j.value("infer_patches", d.infer_patches);
  const auto strategy = j.value("strategy", std::string("grid"));
  const auto parsed = patch::parse_strategy(strategy);
  if (!parsed) throw ConfigError("unknown strategy '" + strategy + "'");
  c.strategy = *parsed;
  c.crop_top = j.value("crop_top", d.crop_top);
  c.global_swapped_max = j.value("global_swapped_max", d.global_swapped_max);
  c.pother_retention_min = j.value("pother_retention_min", d.pother_retention_min);
  c.control_retention_min = j.value("control_retention_min", d.control_retention_min);
  c.figures = j.value("figures", d.figures);
}

namespace {

SynthSpec with(const SynthSpec& base, double rho, std::array<int, 3> counts, std::uint64_t seed_offset, core::Split split,
               const std::string& prefix) {
  SynthSpec s = base;
  s.rho = rho;
  s.counts = counts;
  s.seed = base.seed + seed_offset;
  s.split = split;
  s.prefix = base.prefix + "_" + prefix;
  return s;
}

std::vector<train::ImageExample> global_examples(const SynthSet& set, int input_size, double crop_top) {
  std::vector<train::ImageExample> out;
  out.reserve(set.items.size());
  for (const auto& item : set.items) out.push_back({item.record, pipeline::global_input(item.image, input_size, crop_top)});
  return out;
}

std::vector<patch::PatchSource> patch_sources(const SynthSet& set, int source_size) {
  std::vector<patch::PatchSource> out;
  out.reserve(set.items.size());
  for (const auto& item : set.items) out.push_back(pipeline::make_patch_source(item.record, item.image, item.mask, source_size));
  return out;
}

std::vector<core::ClassLabel> predict_global(net::GlobalNet& model, const SynthSet& set, const AuditConfig& config) {
  torch::NoGradGuard no_grad;
  model->eval();
  std::vector<core::ClassLabel> out;
  for (std::size_t start = 0; start < set.items.size(); start += 32) {
    const auto end = std::min(set.items.size(), start + 32);
    std::vector<torch::Tensor> xs;
    for (auto i = start; i < end; ++i) {
      xs.push_back(core::to_tensor(pipeline::global_input(set.items[i].image, config.model.input_size, config.crop_top)));
    }
    auto am = model->forward(core::stack_planes(xs)).argmax(1);
    for (std::int64_t k = 0; k < am.size(0); ++k) out.push_back(core::label_from_index(static_cast<int>(am[k].item<std::int64_t>())));
  }
  return out;
}

vote::PatchInference infer_one(net::PotherNet& model, const SynthImage& item, std::size_t index, const AuditConfig& config) {
  const auto src = pipeline::make_patch_source(item.record, item.image, item.mask, config.pother_train.geometry.source_size);
  auto rng = core::make_rng(config.data.seed, 0x1f00 + index);
  return vote::infer_image(model, src.image, src.area, config.infer_patches, config.strategy, rng, config.pother_train.geometry);
}

std::vector<core::ClassLabel> predict_pother(net::PotherNet& model, const SynthSet& set, const AuditConfig& config) {
  std::vector<core::ClassLabel> out;
  for (std::size_t i = 0; i < set.items.size(); ++i) out.push_back(infer_one(model, set.items[i], i, config).tally.final);
  return out;
}

std::vector<core::ClassLabel> truths(const SynthSet& set) {
  std::vector<core::ClassLabel> out;
  for (const auto& item : set.items) out.push_back(item.record.label);
  return out;
}

ModelAudit audit_of(const std::vector<core::ClassLabel>& clean, const std::vector<core::ClassLabel>& swapped,
                    const std::vector<core::ClassLabel>& truth) {
  ModelAudit a;
  a.clean = compute_metrics(clean, truth);
  a.swapped = compute_metrics(swapped, truth);
  a.retention = a.clean.accuracy > 0.0 ? a.swapped.accuracy / a.clean.accuracy : 0.0;
  return a;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

void apply_verdicts(RhoAudit& run, const AuditConfig& config) {
  if (run.rho >= 1.0) {
    run.global.pass = run.global.swapped.accuracy <= config.global_swapped_max;
    run.global.criterion = "swapped accuracy <= " + fmt(config.global_swapped_max);
    run.pother.pass = run.pother.retention >= config.pother_retention_min;
    run.pother.criterion = "retention >= " + fmt(config.pother_retention_min);
  } else if (run.rho <= 0.0) {
    for (auto* m : {&run.global, &run.pother}) {
      m->pass = m->retention >= config.control_retention_min;
      m->criterion = "retention >= " + fmt(config.control_retention_min);
    }
  } else {
    run.global.pass = run.pother.pass = true;
    run.global.criterion = run.pother.criterion = "informational";
  }
}

void write_figures(net::GlobalNet& global_model, net::PotherNet& pother_model, const SynthSet& swapped, double rho,
                   const AuditConfig& config, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  vote::OverlayConfig ov;
  const int n = std::min<int>(config.figures, static_cast<int>(swapped.items.size()));
  for (int f = 0; f < n; ++f) {
    // Spread the figures over the classes.
    const auto index = static_cast<std::size_t>(f) * swapped.items.size() / static_cast<std::size_t>(std::max(1, n));
    const auto& item = swapped.items[index];
    const auto stem = "rho" + fmt(rho) + "_" + std::filesystem::path(item.record.image_path).stem().string();

    const auto gin = pipeline::global_input(item.image, config.model.input_size, config.crop_top);
    vote::Vote gv;
    {
      torch::NoGradGuard no_grad;
      global_model->eval();
      auto logits = global_model->forward(core::to_tensor(gin).unsqueeze(0)).contiguous();
      gv = vote::vote_from_logits(std::span<const float>(logits.data_ptr<float>(), logits.numel()));
    }
    const auto gmap = vote::gradcam(global_model, gin, gv.predicted);
    const int offset = static_cast<int>(std::lround(config.crop_top * item.image.rows()));
    vote::save_bgr(dir / (stem + "_global.png"), vote::compose_global_overlay(item.image, gmap, offset, ov));

    const auto inf = infer_one(pother_model, item, index, config);
    std::vector<vote::ActivationMap> maps;
    for (std::size_t i = 0; i < inf.patches.size(); ++i) {
      maps.push_back(vote::gradcam(pother_model, inf.patches[i], inf.tally.votes[i].predicted));
    }
    const auto frame = pipeline::preprocess(core::resize_linear(item.image, config.pother_train.geometry.source_size,
                                                                config.pother_train.geometry.source_size));
    vote::save_bgr(dir / (stem + "_pother.png"), vote::compose_overlay(frame, inf.tally, maps, ov));
  }
}

}  // namespace

std::pair<ModelAudit, ModelAudit> bias_audit(net::GlobalNet& global_model, net::PotherNet& pother_model,
                                             const SynthSet& clean, const SynthSet& swapped,
                                             const AuditConfig& config) {
  if (global_model.is_empty() || pother_model.is_empty()) throw ConfigError("bias audit needs two trained models");
  if (clean.items.size() != swapped.items.size() || clean.items.empty()) {
    throw ConfigError("clean and swapped test sets must be non-empty and the same size");
  }
  const auto truth = truths(clean);
  auto g = audit_of(predict_global(global_model, clean, config), predict_global(global_model, swapped, config), truth);
  auto p = audit_of(predict_pother(pother_model, clean, config), predict_pother(pother_model, swapped, config), truth);
  return {g, p};
}

BiasAuditReport run_bias_audit(const AuditConfig& config, const std::filesystem::path& out_dir, std::ostream* log) {
  config.validate();
  BiasAuditReport report;
  report.pass = true;
  for (double rho : config.rhos) {
    const auto t0 = std::chrono::steady_clock::now();
    RhoAudit run;
    run.rho = rho;
    const auto tag = "r" + fmt(rho);
    const auto train_set = synth_generate(with(config.data, rho, config.data.counts, 0, core::Split::Train, tag + "_train"));
    const auto val_set = synth_generate(with(config.data, rho, config.val_counts, 101, core::Split::Val, tag + "_val"));
    const auto test_spec = with(config.data, rho, config.test_counts, 202, core::Split::Test, tag + "_test");
    const auto clean = synth_generate(test_spec, false);
    const auto swapped = synth_generate(test_spec, true);

    const auto counts = train_set.manifest.class_counts();
    train::LossConfig loss;
    loss.class_weights = train::class_weights(counts);

    train::TrainHooks hooks;
    if (log) *log << "[rho " << rho << "] training global baseline\n";
    hooks.log = log;
    torch::manual_seed(config.global_train.seed);
    net::GlobalNet global_model(config.model);
    run.global_history = train::train_global(global_model, global_examples(train_set, config.model.input_size, config.crop_top),
                                             global_examples(val_set, config.model.input_size, config.crop_top),
                                             config.global_train, loss, hooks);

    if (log) *log << "[rho " << rho << "] training patch model\n";
    torch::manual_seed(config.pother_train.seed);
    auto pother_model = net::build_model(config.model);
    {
      const auto train_sources = patch_sources(train_set, config.pother_train.geometry.source_size);
      const auto val_sources = patch_sources(val_set, config.pother_train.geometry.source_size);
      run.pother_history = train::train(pother_model, train_sources, val_sources, config.pother_train, loss, hooks);
    }

    std::tie(run.global, run.pother) = bias_audit(global_model, pother_model, clean, swapped, config);
    apply_verdicts(run, config);
    if (!out_dir.empty() && config.figures > 0) {
      write_figures(global_model, pother_model, swapped, rho, config, out_dir / "figures");
    }
    run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (log) {
      *log << "[rho " << rho << "] global clean " << run.global.clean.accuracy << " swapped " << run.global.swapped.accuracy
           << " | patch clean " << run.pother.clean.accuracy << " swapped " << run.pother.swapped.accuracy << " ("
           << run.seconds << " s)\n";
    }
    report.pass = report.pass && run.global.pass && run.pother.pass;
    report.runs.push_back(std::move(run));
  }
  return report;
}

nlohmann::ordered_json to_json(const BiasAuditReport& report, const AuditConfig& config) {
  nlohmann::ordered_json j;
  j["pass"] = report.pass;
  j["thresholds"] = {{"global_swapped_max", config.global_swapped_max},
                     {"pother_retention_min", config.pother_retention_min},
                     {"control_retention_min", config.control_retention_min}};
  j["runs"] = nlohmann::ordered_json::array();
  for (const auto& r : report.runs) {
    auto model = [](const ModelAudit& m, const train::TrainHistory& h) {
      return nlohmann::ordered_json{{"clean_accuracy", m.clean.accuracy},
                                    {"swapped_accuracy", m.swapped.accuracy},
                                    {"retention", m.retention},
                                    {"criterion", m.criterion},
                                    {"pass", m.pass},
                                    {"best_epoch", h.best_epoch},
                                    {"clean", to_json(m.clean)},
                                    {"swapped", to_json(m.swapped)}};
    };
    j["runs"].push_back({{"rho", r.rho},
                         {"global", model(r.global, r.global_history)},
                         {"pother", model(r.pother, r.pother_history)}});
  }
  return j;
}

std::string to_markdown(const BiasAuditReport& report) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(3);
  out << "| rho | Model | Clean acc | Swapped acc | Retention | Criterion | Verdict |\n";
  out << "|---|---|---|---|---|---|---|\n";
  for (const auto& r : report.runs) {
    for (const auto& [name, m] : {std::pair<const char*, const ModelAudit*>{"global baseline", &r.global},
                                  std::pair<const char*, const ModelAudit*>{"patch-voted", &r.pother}}) {
      out << "| " << std::setprecision(2) << r.rho << std::setprecision(3) << " | " << name << " | "
          << m->clean.accuracy << " | " << m->swapped.accuracy << " | " << m->retention << " | " << m->criterion
          << " | " << (m->pass ? "PASS" : "FAIL") << " |\n";
    }
  }
  out << "\nOverall: " << (report.pass ? "PASS" : "FAIL") << '\n';
  return out.str();
}

}  // namespace pother::eval
