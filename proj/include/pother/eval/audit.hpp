#pragma once

#include <filesystem>
#include <iosfwd>
#include <vector>

#include <nlohmann/json.hpp>

#include "pother/eval/metrics.hpp"
#include "pother/eval/synth.hpp"
#include "pother/net/pother_net.hpp"
#include "pother/train/trainer.hpp"

namespace pother::eval {

struct AuditConfig {
  SynthSpec data;  // training-set spec; rho is overridden per run
  std::array<int, core::kNumClasses> val_counts = {8, 8, 8};
  std::array<int, core::kNumClasses> test_counts = {30, 30, 30};
  std::vector<double> rhos = {1.0, 0.0};
  net::ModelConfig model = net::ModelConfig::desk();
  train::TrainConfig pother_train;
  train::TrainConfig global_train;
  int infer_patches = 9;
  patch::Strategy strategy = patch::Strategy::Grid;
  double crop_top = 0.08;
  double global_swapped_max = 0.50;     // shortcut condition: baseline must collapse to at most this
  double pother_retention_min = 0.90;   // shortcut condition: patch model must keep at least this
  double control_retention_min = 0.95;  // rho = 0: both models
  int figures = 2;                      // swapped test images rendered per run

  /// Desk preset: single-core CPU budget.
  static AuditConfig desk();
  void validate() const;
};

void to_json(nlohmann::json& j, const AuditConfig& c);
void from_json(const nlohmann::json& j, AuditConfig& c);

struct ModelAudit {
  MetricsReport clean;
  MetricsReport swapped;
  double retention = 0.0;  // swapped / clean accuracy, 0 when clean accuracy is 0
  bool pass = false;
  std::string criterion;
};

struct RhoAudit {
  double rho = 0.0;
  ModelAudit global;
  ModelAudit pother;
  train::TrainHistory global_history;
  train::TrainHistory pother_history;
  double seconds = 0.0;
};

struct BiasAuditReport {
  std::vector<RhoAudit> runs;
  bool pass = false;
};

/// Clean vs token-swapped accuracy for an already trained pair of models. Throws ConfigError when a
/// model holder is empty.
std::pair<ModelAudit, ModelAudit> bias_audit(net::GlobalNet& global_model, net::PotherNet& pother_model,
                                             const SynthSet& clean, const SynthSet& swapped,
                                             const AuditConfig& config);

/// Trains both models for every rho in the config, audits them and applies the verdict thresholds.
/// Writes comparison figures under out_dir/figures when out_dir is non-empty.
BiasAuditReport run_bias_audit(const AuditConfig& config, const std::filesystem::path& out_dir = {},
                               std::ostream* log = nullptr);

nlohmann::ordered_json to_json(const BiasAuditReport& report, const AuditConfig& config);
std::string to_markdown(const BiasAuditReport& report);

}  // namespace pother::eval
