#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "fixtures.hpp"
#include "pother/core/error.hpp"
#include "pother/eval/audit.hpp"
#include "pother/eval/metrics.hpp"
#include "pother/eval/synth.hpp"
#include "pother/pipeline/prepare.hpp"

using namespace pother;
using core::ClassLabel;
using L = ClassLabel;

namespace {

std::vector<ClassLabel> labels(std::initializer_list<int> idx) {
  std::vector<ClassLabel> out;
  for (int i : idx) out.push_back(core::label_from_index(i));
  return out;
}

eval::SynthSpec small_spec(int per_class, double rho, std::uint64_t seed = 1) {
  eval::SynthSpec s;
  s.image_size = 128;
  s.counts = {per_class, per_class, per_class};
  s.rho = rho;
  s.seed = seed;
  return s;
}

}  // namespace

TEST(Metrics, F1Helper) {
  EXPECT_DOUBLE_EQ(eval::f1_score(0.0, 0.0), 0.0);
  EXPECT_DOUBLE_EQ(eval::f1_score(1.0, 1.0), 1.0);
  EXPECT_NEAR(eval::f1_score(0.5, 1.0), 2.0 / 3.0, 1e-12);
}

TEST(Metrics, PerfectPrediction) {
  const auto y = labels({0, 1, 2, 2, 1, 0, 0});
  const auto r = eval::compute_metrics(y, y);
  EXPECT_DOUBLE_EQ(r.accuracy, 1.0);
  for (int c = 0; c < 3; ++c) {
    EXPECT_DOUBLE_EQ(r.precision[c], 1.0);
    EXPECT_DOUBLE_EQ(r.recall[c], 1.0);
    EXPECT_DOUBLE_EQ(r.f1[c], 1.0);
  }
  EXPECT_EQ(r.support, (std::array<std::size_t, 3>{3, 2, 2}));
}

TEST(Metrics, HandWorkedConfusion) {
  const auto truth = labels({0, 0, 0, 1, 1, 2});
  const auto pred = labels({0, 0, 1, 1, 2, 2});
  const auto r = eval::compute_metrics(pred, truth);
  EXPECT_EQ(r.confusion[0][0], 2u);
  EXPECT_EQ(r.confusion[0][1], 1u);
  EXPECT_EQ(r.confusion[1][2], 1u);
  EXPECT_NEAR(r.precision[0], 1.0, 1e-12);
  EXPECT_NEAR(r.precision[1], 0.5, 1e-12);
  EXPECT_NEAR(r.precision[2], 0.5, 1e-12);
  EXPECT_NEAR(r.recall[0], 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(r.recall[1], 0.5, 1e-12);
  EXPECT_NEAR(r.recall[2], 1.0, 1e-12);
  EXPECT_NEAR(r.f1[0], 0.8, 1e-12);
  EXPECT_NEAR(r.f1[2], 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(r.accuracy, 4.0 / 6.0, 1e-12);
}

TEST(Metrics, NeverPredictedClassHasZeroPrecision) {
  const auto r = eval::compute_metrics(labels({0, 0, 0}), labels({0, 1, 2}));
  EXPECT_DOUBLE_EQ(r.precision[1], 0.0);
  EXPECT_DOUBLE_EQ(r.f1[1], 0.0);
  EXPECT_FALSE(std::isnan(r.f1[2]));
}

TEST(Metrics, ConservationAndPermutationInvariance) {
  std::mt19937 gen(4);
  std::uniform_int_distribution<int> d(0, 2);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 1 + trial * 3;
    std::vector<ClassLabel> t, p;
    for (int i = 0; i < n; ++i) {
      t.push_back(core::label_from_index(d(gen)));
      p.push_back(core::label_from_index(d(gen)));
    }
    const auto r = eval::compute_metrics(p, t);
    std::size_t sum = 0, diag = 0;
    for (int a = 0; a < 3; ++a) {
      std::size_t row = 0;
      for (int b = 0; b < 3; ++b) row += r.confusion[a][b];
      ASSERT_EQ(row, r.support[a]);
      sum += row;
      diag += r.confusion[a][a];
    }
    ASSERT_EQ(sum, static_cast<std::size_t>(n));
    ASSERT_NEAR(r.accuracy, static_cast<double>(diag) / n, 1e-12);
    for (int c = 0; c < 3; ++c) {
      ASSERT_GE(r.f1[c], std::min(r.precision[c], r.recall[c]) - 1e-12);
      ASSERT_LE(r.f1[c], std::max(r.precision[c], r.recall[c]) + 1e-12);
    }

    std::vector<std::size_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0u);
    std::shuffle(order.begin(), order.end(), gen);
    std::vector<ClassLabel> t2, p2;
    for (auto i : order) {
      t2.push_back(t[i]);
      p2.push_back(p[i]);
    }
    ASSERT_EQ(eval::compute_metrics(p2, t2), r);
  }
}

TEST(Metrics, RejectsBadInput) {
  EXPECT_THROW(eval::compute_metrics({}, {}), std::invalid_argument);
  EXPECT_THROW(eval::compute_metrics(labels({0}), labels({0, 1})), std::invalid_argument);
}

TEST(Metrics, MarkdownLayout) {
  const auto r = eval::compute_metrics(labels({0, 0, 1, 1, 2, 2}), labels({0, 1, 1, 1, 2, 0}));
  const auto md = eval::to_markdown(r, "POTHER");
  std::vector<std::string> lines;
  std::istringstream in(md);
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  ASSERT_EQ(lines.size(), 5u);
  EXPECT_EQ(lines[0], "| Method | Class | Precision | Recall | F1 | Accuracy |");
  EXPECT_EQ(lines[2].rfind("| POTHER |", 0), 0u);
  EXPECT_NE(lines[3].find("0.667 |"), std::string::npos);  // accuracy on the middle row
  EXPECT_EQ(lines[4].substr(lines[4].size() - 4), "|  |");
  EXPECT_EQ(eval::to_json(r).dump(), eval::to_json(r).dump());
}

TEST(Metrics, ReferenceTableInternallyConsistent) {
  const auto rows = eval::reference_f1_consistency();
  ASSERT_EQ(rows.size(), 12u);
  for (const auto& r : rows) {
    EXPECT_TRUE(r.pass) << r.row.method << " " << core::to_string(r.row.label) << " " << r.recomputed_f1;
    EXPECT_NEAR(r.recomputed_f1, 2 * r.row.precision * r.row.recall / (r.row.precision + r.row.recall), 1e-12);
  }
  const auto& pub = eval::published_rows();
  const auto covid = std::find_if(pub.begin(), pub.end(),
                                  [](const auto& r) { return r.method == "POTHER" && r.label == L::Covid19; });
  ASSERT_NE(covid, pub.end());
  EXPECT_DOUBLE_EQ(covid->f1, 0.974);
  const auto normal = std::find_if(pub.begin(), pub.end(),
                                   [](const auto& r) { return r.method == "POTHER" && r.label == L::Normal; });
  EXPECT_DOUBLE_EQ(normal->f1, 0.875);
}

TEST(Synth, DeterministicAndLabelled) {
  const auto spec = small_spec(4, 1.0);
  const auto a = eval::synth_generate(spec);
  const auto b = eval::synth_generate(spec);
  ASSERT_EQ(a.items.size(), 12u);
  for (std::size_t i = 0; i < a.items.size(); ++i) {
    ASSERT_EQ(a.items[i].image, b.items[i].image);
    ASSERT_EQ(a.items[i].mask, b.items[i].mask);
    ASSERT_TRUE(core::is_binary(a.items[i].mask));
    // rho = 1 links style to label.
    ASSERT_EQ(a.items[i].style, core::to_index(a.items[i].record.label));
    for (float v : a.items[i].image.values()) {
      ASSERT_GE(v, 0.0f);
      ASSERT_LE(v, 1.0f);
      ASSERT_EQ(std::round(v * 255.0f), v * 255.0f);
    }
  }
  EXPECT_EQ(a.manifest.class_counts(), (core::ClassCounts{4, 4, 4}));
  auto other = spec;
  other.seed = 2;
  EXPECT_NE(eval::synth_generate(other).items[0].image, a.items[0].image);
}

TEST(Synth, SwapTouchesOnlyConfounderBox) {
  for (auto conf : {eval::Confounder::Token, eval::Confounder::Cable}) {
    auto spec = small_spec(3, 1.0, 7);
    spec.confounder = conf;
    const auto clean = eval::synth_generate(spec);
    const auto swapped = eval::synth_generate(spec, true);
    for (std::size_t i = 0; i < clean.items.size(); ++i) {
      const auto& a = clean.items[i];
      const auto& b = swapped.items[i];
      ASSERT_EQ(b.style, (a.style + 1) % 3);
      ASSERT_EQ(a.mask, b.mask);
      ASSERT_EQ(a.record.label, b.record.label);
      bool differs = false;
      for (int r = 0; r < a.image.rows(); ++r) {
        for (int c = 0; c < a.image.cols(); ++c) {
          if (a.image(r, c) == b.image(r, c)) continue;
          differs = true;
          const bool inside = a.confounder_box.contains(r, c) || b.confounder_box.contains(r, c);
          ASSERT_TRUE(inside) << eval::to_string(conf) << " item " << i << " at " << r << "," << c;
        }
      }
      EXPECT_TRUE(differs);
    }
  }
}

TEST(Synth, TokenKeepsDistanceFromLungs) {
  auto spec = small_spec(10, 0.5, 3);
  spec.image_size = 256;
  const double min_d = 41.0 * 256 / 1024;
  for (const auto& item : eval::synth_generate(spec).items) {
    EXPECT_GE(eval::token_lung_distance(item), min_d);
    for (int r = 0; r < item.confounder_box.rows; ++r) {
      for (int c = 0; c < item.confounder_box.cols; ++c) {
        ASSERT_EQ(item.mask(item.confounder_box.row0 + r, item.confounder_box.col0 + c), core::kBackground);
      }
    }
  }
}

TEST(Synth, StyleIndependentOfLabelAtRhoZero) {
  const auto set = eval::synth_generate(small_spec(150, 0.0, 11));
  double table[3][3] = {};
  for (const auto& it : set.items) table[core::to_index(it.record.label)][it.style] += 1;
  double rows[3] = {}, cols[3] = {}, n = 0;
  for (int a = 0; a < 3; ++a) {
    for (int b = 0; b < 3; ++b) {
      rows[a] += table[a][b];
      cols[b] += table[a][b];
      n += table[a][b];
    }
  }
  double chi = 0;
  for (int a = 0; a < 3; ++a) {
    for (int b = 0; b < 3; ++b) {
      const double e = rows[a] * cols[b] / n;
      chi += (table[a][b] - e) * (table[a][b] - e) / e;
    }
  }
  EXPECT_GT(fixtures::chi_square_sf(chi, 4), 0.001) << chi;
}

TEST(Synth, LinkedFractionTracksRho) {
  const auto set = eval::synth_generate(small_spec(100, 0.6, 12));
  int linked = 0;
  for (const auto& it : set.items) linked += it.style == core::to_index(it.record.label);
  // P(linked) = rho + (1 - rho) / 3
  EXPECT_NEAR(linked / 300.0, 0.6 + 0.4 / 3, 0.07);
}

TEST(Synth, PatchesNeverSeeTheToken) {
  auto spec = small_spec(4, 1.0, 5);
  spec.image_size = 256;
  const auto set = eval::synth_generate(spec);
  auto rng = core::make_rng(9);
  const double scale = 1024.0 / 256;
  for (const auto& item : set.items) {
    const auto src = pipeline::make_patch_source(item.record, item.image, item.mask);
    const auto& box = item.confounder_box;
    for (int k = 0; k < 200; ++k) {
      const auto c = patch::sample_patch_center(src.area, rng);
      const auto s = patch::clamp_spec({c.row, c.col, 80, 1024});
      const double r0 = s.row0() / scale, r1 = (s.row0() + 80) / scale;
      const double c0 = s.col0() / scale, c1 = (s.col0() + 80) / scale;
      const bool overlap = r0 < box.row0 + box.rows && box.row0 < r1 && c0 < box.col0 + box.cols && box.col0 < c1;
      ASSERT_FALSE(overlap) << item.record.image_path;
    }
  }
}

TEST(Synth, ConfigValidation) {
  auto s = small_spec(1, 1.0);
  s.rho = 1.5;
  EXPECT_THROW(eval::synth_generate(s), ConfigError);
  s = small_spec(1, 1.0);
  s.token_size = 4;
  EXPECT_THROW(s.validate(), ConfigError);
  s = small_spec(1, 1.0);
  const nlohmann::json j = s;
  EXPECT_EQ(nlohmann::json(j.get<eval::SynthSpec>()), j);
}

TEST(Synth, WritesDatasetLayout) {
  fixtures::TempDir dir("synth");
  const auto set = eval::synth_generate(small_spec(2, 1.0));
  eval::write_synth(dir.path, set);
  EXPECT_TRUE(std::filesystem::exists(dir.path / "manifest.txt"));
  EXPECT_TRUE(std::filesystem::exists(dir.path / "confounders.jsonl"));
  std::size_t images = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir.path / "images")) images += e.is_regular_file();
  EXPECT_EQ(images, 6u);
  const auto m = core::load_manifest(dir.path / "manifest.txt");
  EXPECT_EQ(m.records().size(), 6u);
}

TEST(Audit, EmptyModelsRejected) {
  const auto cfg = eval::AuditConfig::desk();
  const auto set = eval::synth_generate(small_spec(1, 1.0));
  net::GlobalNet g{nullptr};
  net::PotherNet p{nullptr};
  EXPECT_THROW(eval::bias_audit(g, p, set, set, cfg), ConfigError);
}

TEST(Audit, ConfigJsonAndValidation) {
  auto cfg = eval::AuditConfig::desk();
  EXPECT_NO_THROW(cfg.validate());
  const nlohmann::json j = cfg;
  EXPECT_EQ(nlohmann::json(j.get<eval::AuditConfig>()), j);
  cfg.pother_train.geometry.out_size = cfg.model.input_size + 32;
  EXPECT_THROW(cfg.validate(), ConfigError);
}
