#pragma once

#include <array>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pother/core/manifest.hpp"

namespace pother::eval {

using core::ClassLabel;
using PerClass = std::array<double, core::kNumClasses>;

struct MetricsReport {
  std::array<std::array<std::size_t, core::kNumClasses>, core::kNumClasses> confusion{};  // [truth][pred]
  PerClass precision{};
  PerClass recall{};
  PerClass f1{};
  std::array<std::size_t, core::kNumClasses> support{};
  double accuracy = 0.0;
  std::size_t total = 0;

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

/// F1 = 2pr / (p + r), 0 when p + r == 0.
double f1_score(double precision, double recall);

/// One-vs-rest per-class metrics. Throws std::invalid_argument on length mismatch or empty input.
MetricsReport compute_metrics(const std::vector<ClassLabel>& predictions, const std::vector<ClassLabel>& truths);

nlohmann::ordered_json to_json(const MetricsReport& report);

/// Method / Class / Precision / Recall / F1 / Accuracy table, three decimals, accuracy on the middle row.
std::string to_markdown(const MetricsReport& report, const std::string& method);

struct PublishedRow {
  std::string method;
  ClassLabel label;
  double precision;
  double recall;
  double f1;
};

/// The twelve per-class rows of the reference COVIDx comparison table.
const std::vector<PublishedRow>& published_rows();

struct ConsistencyResult {
  PublishedRow row;
  double recomputed_f1;
  bool pass;
};

std::vector<ConsistencyResult> reference_f1_consistency(double tolerance = 1e-3);

}  // namespace pother::eval
