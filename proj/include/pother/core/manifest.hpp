#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace pother::core {

enum class ClassLabel : int { Normal = 0, Pneumonia = 1, Covid19 = 2 };

inline constexpr int kNumClasses = 3;
inline constexpr std::array<ClassLabel, kNumClasses> kAllClasses = {
    ClassLabel::Normal, ClassLabel::Pneumonia, ClassLabel::Covid19};

constexpr int to_index(ClassLabel label) { return static_cast<int>(label); }
ClassLabel label_from_index(int index);

/// Canonical token written to manifests ("normal", "pneumonia", "COVID-19").
std::string_view to_string(ClassLabel label);

/// Case-insensitive; accepts "covid", "covid19", "covid-19" and "covid_19" for COVID-19.
std::optional<ClassLabel> parse_class_label(std::string_view token);

enum class Split { Train, Val, Test };

std::string_view to_string(Split split);
std::optional<Split> parse_split(std::string_view token);

struct ImageRecord {
  std::string patient_id;
  std::string image_path;  // relative to the image root
  ClassLabel label = ClassLabel::Normal;
  Split split = Split::Train;
  std::string source;

  friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

using ClassCounts = std::array<std::size_t, kNumClasses>;

class DatasetManifest {
 public:
  DatasetManifest() = default;
  explicit DatasetManifest(std::vector<ImageRecord> records);

  const std::vector<ImageRecord>& records() const { return records_; }
  const ClassCounts& class_counts() const { return class_counts_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }

  /// Fraction of records in each split, indexed by Split.
  std::array<double, 3> split_ratios() const;

  DatasetManifest filter(Split split) const;

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;

 private:
  std::vector<ImageRecord> records_;
  ClassCounts class_counts_{};
};

/// Whitespace-separated `patient_id filename class source [split]` lines; `#` starts a comment line.
/// Records without a split column get `default_split`.
DatasetManifest parse_manifest(std::istream& in, Split default_split = Split::Train);
DatasetManifest load_manifest(const std::filesystem::path& path, Split default_split = Split::Train);

/// Canonical five-column form.
void write_manifest(std::ostream& out, const DatasetManifest& manifest);
void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

/// Stratified re-partition of the train-split records. Per class, floor(ratio * n) records stay in
/// train and the remainder move to val. Non-train records are dropped from both outputs.
std::pair<DatasetManifest, DatasetManifest> split_train_val(const DatasetManifest& manifest, double ratio,
                                                            std::uint64_t seed);

}  // namespace pother::core
