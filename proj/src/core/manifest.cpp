#include "pother/core/manifest.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "pother/core/error.hpp"

namespace pother::core {

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
  return out;
}

}  // namespace

ClassLabel label_from_index(int index) {
  if (index < 0 || index >= kNumClasses) {
    throw std::out_of_range("class index " + std::to_string(index) + " out of range");
  }
  return static_cast<ClassLabel>(index);
}

std::string_view to_string(ClassLabel label) {
  switch (label) {
    case ClassLabel::Normal: return "normal";
    case ClassLabel::Pneumonia: return "pneumonia";
    case ClassLabel::Covid19: return "COVID-19";
  }
  return "?";
}

std::optional<ClassLabel> parse_class_label(std::string_view token) {
  const std::string t = lower(token);
  if (t == "normal") return ClassLabel::Normal;
  if (t == "pneumonia") return ClassLabel::Pneumonia;
  if (t == "covid-19" || t == "covid" || t == "covid19" || t == "covid_19") return ClassLabel::Covid19;
  return std::nullopt;
}

std::string_view to_string(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

std::optional<Split> parse_split(std::string_view token) {
  const std::string t = lower(token);
  if (t == "train") return Split::Train;
  if (t == "val" || t == "valid" || t == "validation") return Split::Val;
  if (t == "test") return Split::Test;
  return std::nullopt;
}

DatasetManifest::DatasetManifest(std::vector<ImageRecord> records) : records_(std::move(records)) {
  for (const auto& r : records_) ++class_counts_[to_index(r.label)];
}

std::array<double, 3> DatasetManifest::split_ratios() const {
  std::array<double, 3> ratios{};
  if (records_.empty()) return ratios;
  for (const auto& r : records_) ratios[static_cast<int>(r.split)] += 1.0;
  for (auto& v : ratios) v /= static_cast<double>(records_.size());
  return ratios;
}

DatasetManifest DatasetManifest::filter(Split split) const {
  std::vector<ImageRecord> out;
  std::copy_if(records_.begin(), records_.end(), std::back_inserter(out),
               [split](const ImageRecord& r) { return r.split == split; });
  return DatasetManifest(std::move(out));
}

DatasetManifest parse_manifest(std::istream& in, Split default_split) {
  std::vector<ImageRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream fields(line);
    std::vector<std::string> tokens;
    for (std::string tok; fields >> tok;) tokens.push_back(tok);
    if (tokens.empty() || tokens.front().starts_with('#')) continue;
    if (tokens.size() < 4) {
      throw ParseError("expected at least 4 fields (patient_id filename class source), got " +
                           std::to_string(tokens.size()),
                       line_no);
    }
    ImageRecord rec;
    rec.patient_id = tokens[0];
    rec.image_path = tokens[1];
    auto label = parse_class_label(tokens[2]);
    if (!label) throw ParseError("unknown class '" + tokens[2] + "'", line_no);
    rec.label = *label;
    rec.source = tokens[3];
    rec.split = default_split;
    if (tokens.size() >= 5) {
      auto split = parse_split(tokens[4]);
      if (!split) throw ParseError("unknown split '" + tokens[4] + "'", line_no);
      rec.split = *split;
    }
    records.push_back(std::move(rec));
  }
  return DatasetManifest(std::move(records));
}

DatasetManifest load_manifest(const std::filesystem::path& path, Split default_split) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  return parse_manifest(in, default_split);
}

void write_manifest(std::ostream& out, const DatasetManifest& manifest) {
  for (const auto& r : manifest.records()) {
    out << r.patient_id << ' ' << r.image_path << ' ' << to_string(r.label) << ' ' << r.source << ' '
        << to_string(r.split) << '\n';
  }
}

void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest " + path.string());
  write_manifest(out, manifest);
}

std::pair<DatasetManifest, DatasetManifest> split_train_val(const DatasetManifest& manifest, double ratio,
                                                            std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) {
    throw ConfigError("split ratio must lie in (0, 1), got " + std::to_string(ratio));
  }
  const auto& records = manifest.records();
  std::array<std::vector<std::size_t>, kNumClasses> by_class;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].split == Split::Train) by_class[to_index(records[i].label)].push_back(i);
  }

  std::mt19937_64 rng(seed);
  std::vector<bool> keep_train(records.size(), false);
  for (auto& idx : by_class) {
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_train = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(idx.size()) + 1e-9));
    for (std::size_t k = 0; k < n_train; ++k) keep_train[idx[k]] = true;
  }

  std::vector<ImageRecord> train, val;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].split != Split::Train) continue;
    ImageRecord r = records[i];
    if (keep_train[i]) {
      train.push_back(std::move(r));
    } else {
      r.split = Split::Val;
      val.push_back(std::move(r));
    }
  }
  return {DatasetManifest(std::move(train)), DatasetManifest(std::move(val))};
}

}  // namespace pother::core
