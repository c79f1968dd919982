#include "pother/eval/metrics.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace pother::eval {

double f1_score(double precision, double recall) {
  const double s = precision + recall;
  return s > 0.0 ? 2.0 * precision * recall / s : 0.0;
}

MetricsReport compute_metrics(const std::vector<ClassLabel>& predictions, const std::vector<ClassLabel>& truths) {
  if (predictions.size() != truths.size()) {
    throw std::invalid_argument("compute_metrics: " + std::to_string(predictions.size()) + " predictions for " +
                                std::to_string(truths.size()) + " labels");
  }
  if (truths.empty()) throw std::invalid_argument("compute_metrics: no examples");
  MetricsReport r;
  r.total = truths.size();
  for (std::size_t i = 0; i < truths.size(); ++i) {
    ++r.confusion[core::to_index(truths[i])][core::to_index(predictions[i])];
  }
  std::size_t correct = 0;
  for (int c = 0; c < core::kNumClasses; ++c) {
    std::size_t predicted = 0, actual = 0;
    for (int k = 0; k < core::kNumClasses; ++k) {
      predicted += r.confusion[k][c];
      actual += r.confusion[c][k];
    }
    const auto tp = r.confusion[c][c];
    correct += tp;
    r.support[c] = actual;
    r.precision[c] = predicted ? static_cast<double>(tp) / static_cast<double>(predicted) : 0.0;
    r.recall[c] = actual ? static_cast<double>(tp) / static_cast<double>(actual) : 0.0;
    r.f1[c] = f1_score(r.precision[c], r.recall[c]);
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(r.total);
  return r;
}

nlohmann::ordered_json to_json(const MetricsReport& report) {
  nlohmann::ordered_json j;
  j["total"] = report.total;
  j["accuracy"] = report.accuracy;
  nlohmann::ordered_json per_class = nlohmann::ordered_json::object();
  for (auto label : core::kAllClasses) {
    const int c = core::to_index(label);
    per_class[std::string(core::to_string(label))] = {{"precision", report.precision[c]},
                                                      {"recall", report.recall[c]},
                                                      {"f1", report.f1[c]},
                                                      {"support", report.support[c]}};
  }
  j["per_class"] = per_class;
  j["confusion"] = report.confusion;
  j["confusion_axes"] = "rows: truth, columns: prediction; order normal, pneumonia, COVID-19";
  return j;
}

std::string to_markdown(const MetricsReport& report, const std::string& method) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(3);
  out << "| Method | Class | Precision | Recall | F1 | Accuracy |\n";
  out << "|---|---|---|---|---|---|\n";
  for (auto label : core::kAllClasses) {
    const int c = core::to_index(label);
    out << "| " << (c == 0 ? method : "") << " | " << core::to_string(label) << " | " << report.precision[c] << " | "
        << report.recall[c] << " | " << report.f1[c] << " | ";
    if (c == 1) out << report.accuracy;
    out << " |\n";
  }
  return out.str();
}

const std::vector<PublishedRow>& published_rows() {
  using L = ClassLabel;
  static const std::vector<PublishedRow> rows = {
      {"ResNet-50", L::Normal, 0.882, 0.970, 0.924},      {"ResNet-50", L::Pneumonia, 0.868, 0.920, 0.893},
      {"ResNet-50", L::Covid19, 0.988, 0.830, 0.902},     {"COVID-Net", L::Normal, 0.905, 0.950, 0.927},
      {"COVID-Net", L::Pneumonia, 0.913, 0.940, 0.926},   {"COVID-Net", L::Covid19, 0.989, 0.910, 0.948},
      {"Patch learning", L::Normal, 0.815, 0.970, 0.886}, {"Patch learning", L::Pneumonia, 0.914, 0.813, 0.860},
      {"Patch learning", L::Covid19, 0.963, 0.867, 0.912}, {"POTHER", L::Normal, 0.790, 0.980, 0.875},
      {"POTHER", L::Pneumonia, 0.963, 0.780, 0.862},      {"POTHER", L::Covid19, 1.000, 0.950, 0.974},
  };
  return rows;
}

std::vector<ConsistencyResult> reference_f1_consistency(double tolerance) {
  std::vector<ConsistencyResult> out;
  for (const auto& row : published_rows()) {
    const double f1 = f1_score(row.precision, row.recall);
    // 1e-12 absorbs binary representation error at the boundary.
    out.push_back({row, f1, std::abs(f1 - row.f1) <= tolerance + 1e-12});
  }
  return out;
}

}  // namespace pother::eval
