#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include <torch/torch.h>

#include "fixtures.hpp"
#include "pother/core/error.hpp"
#include "pother/core/image_io.hpp"
#include "pother/vote/gradcam.hpp"
#include "pother/vote/overlay.hpp"
#include "pother/vote/vote.hpp"

using namespace pother;
using core::ClassLabel;
using vote::Vote;

namespace {

Vote make_vote(ClassLabel label, std::array<double, 3> probs = {}, patch::PatchSpec spec = {}) {
  Vote v;
  v.predicted = label;
  if (probs == std::array<double, 3>{}) probs[static_cast<std::size_t>(core::to_index(label))] = 1.0;
  v.probs = probs;
  v.spec = spec;
  return v;
}

std::vector<Vote> random_votes(core::Rng& rng, int n) {
  std::vector<Vote> out;
  for (int i = 0; i < n; ++i) {
    std::array<float, 3> logits{};
    for (auto& l : logits) l = static_cast<float>(core::uniform(rng, -3, 3));
    out.push_back(vote::vote_from_logits(logits));
  }
  return out;
}

// C-channel activations with a linear readout of their spatial means: GradCAM has a closed form.
struct ToyImpl : torch::nn::Module {
  explicit ToyImpl(torch::Tensor act, torch::Tensor readout) : act_(std::move(act)), readout_(std::move(readout)) {}
  net::ClassifierTrace trace(const torch::Tensor&) {
    auto a = act_.clone().requires_grad_(true);
    auto pooled = a.mean({2, 3});  // [1, C]
    return {a, pooled.matmul(readout_)};
  }
  torch::Tensor act_, readout_;
};
TORCH_MODULE(Toy);

// Logits that ignore the activations entirely.
struct FrozenImpl : torch::nn::Module {
  net::ClassifierTrace trace(const torch::Tensor&) {
    auto a = torch::rand({1, 4, 6, 6}).requires_grad_(true);
    return {a, torch::tensor({{0.3f, 0.2f, 0.1f}})};
  }
};
TORCH_MODULE(Frozen);

}  // namespace

TEST(ClassifyPatch, SoftmaxExamples) {
  const std::array<float, 3> a{2, 0, 0};
  const auto v = vote::vote_from_logits(a);
  EXPECT_EQ(v.predicted, ClassLabel::Normal);
  const double z = std::exp(2.0) + 2.0;
  EXPECT_NEAR(v.probs[0], std::exp(2.0) / z, 1e-12);
  EXPECT_NEAR(v.probs[1], 1.0 / z, 1e-12);
  EXPECT_NEAR(v.probs[0], 0.787, 1e-3);

  const std::array<float, 3> zeros{0, 0, 0};
  const auto t = vote::vote_from_logits(zeros);
  EXPECT_EQ(t.predicted, ClassLabel::Normal);
  for (double p : t.probs) EXPECT_NEAR(p, 1.0 / 3.0, 1e-12);
}

TEST(ClassifyPatch, ScaleInvariantArgmaxAndNormalized) {
  auto rng = core::make_rng(5);
  for (int i = 0; i < 1000; ++i) {
    std::array<float, 3> l{};
    for (auto& x : l) x = static_cast<float>(core::uniform(rng, -10, 10));
    const auto v = vote::vote_from_logits(l);
    EXPECT_NEAR(v.probs[0] + v.probs[1] + v.probs[2], 1.0, 1e-6);
    const float s = static_cast<float>(core::uniform(rng, 0.1, 10));
    std::array<float, 3> scaled{l[0] * s, l[1] * s, l[2] * s};
    EXPECT_EQ(vote::vote_from_logits(scaled).predicted, v.predicted);
  }
}

TEST(MajorityVote, StrictMajority) {
  const auto t = vote::majority_vote({make_vote(ClassLabel::Covid19), make_vote(ClassLabel::Covid19),
                                      make_vote(ClassLabel::Normal)});
  EXPECT_EQ(t.final, ClassLabel::Covid19);
  EXPECT_EQ(t.counts, (std::array<int, 3>{1, 0, 2}));
  EXPECT_FALSE(t.tie);
}

TEST(MajorityVote, SixOfNineSurviveThreeFlips) {
  std::vector<Vote> votes(6, make_vote(ClassLabel::Pneumonia));
  for (int i = 0; i < 3; ++i) votes.push_back(make_vote(ClassLabel::Covid19, {0.0, 0.01, 0.99}));
  EXPECT_EQ(vote::majority_vote(votes).final, ClassLabel::Pneumonia);
}

TEST(MajorityVote, TieBrokenByMeanProbability) {
  const auto t = vote::majority_vote({make_vote(ClassLabel::Normal, {0.4, 0.35, 0.25}),
                                      make_vote(ClassLabel::Pneumonia, {0.2, 0.6, 0.2})});
  EXPECT_TRUE(t.tie);
  EXPECT_EQ(t.final, ClassLabel::Pneumonia);
  // Identical probabilities fall through to the lowest class index.
  const auto u = vote::majority_vote({make_vote(ClassLabel::Covid19, {0.3, 0.3, 0.4}),
                                      make_vote(ClassLabel::Pneumonia, {0.3, 0.4, 0.3})});
  EXPECT_EQ(u.final, ClassLabel::Pneumonia);
}

TEST(MajorityVote, PermutationInvariant) {
  auto rng = core::make_rng(17);
  std::mt19937 shuffler(3);
  for (int trial = 0; trial < 200; ++trial) {
    auto votes = random_votes(rng, 1 + trial % 12);
    const auto base = vote::majority_vote(votes);
    for (int k = 0; k < 5; ++k) {
      std::shuffle(votes.begin(), votes.end(), shuffler);
      const auto t = vote::majority_vote(votes);
      ASSERT_EQ(t.final, base.final);
      ASSERT_EQ(t.counts, base.counts);
      ASSERT_EQ(t.tie, base.tie);
      ASSERT_EQ(t.mean_probs, base.mean_probs);
    }
  }
}

TEST(MajorityVote, DuplicatingWinnerIsMonotone) {
  auto rng = core::make_rng(18);
  for (int trial = 0; trial < 200; ++trial) {
    auto votes = random_votes(rng, 1 + trial % 10);
    const auto base = vote::majority_vote(votes);
    const auto winner = *std::find_if(votes.begin(), votes.end(), [&](const Vote& v) { return v.predicted == base.final; });
    for (int k = 1; k <= 4; ++k) {
      votes.push_back(winner);
      ASSERT_EQ(vote::majority_vote(votes).final, base.final);
    }
  }
}

TEST(MajorityVote, DeterministicAndSerializable) {
  auto rng = core::make_rng(19);
  const auto votes = random_votes(rng, 9);
  const auto a = vote::majority_vote(votes), b = vote::majority_vote(votes);
  EXPECT_EQ(vote::to_json(a).dump(), vote::to_json(b).dump());
  const auto j = vote::to_json(a);
  EXPECT_EQ(j.at("votes").size(), 9u);
  EXPECT_TRUE(j.contains("final"));
  EXPECT_THROW(vote::majority_vote({}), std::invalid_argument);
}

TEST(GradCam, ClosedFormMultiChannel) {
  torch::manual_seed(2);
  auto act = torch::randn({1, 3, 7, 7}, torch::kFloat64);
  auto readout = torch::randn({3, 3}, torch::kFloat64);
  Toy toy(act, readout);
  for (int t = 0; t < 3; ++t) {
    const auto map = vote::gradcam(toy, core::GrayImage(7, 7, 0.0f), core::label_from_index(t));
    // d logit_t / d A_c = readout[c, t] / (h w) everywhere.
    auto weights = (readout.index({torch::indexing::Slice(), t}) / 49.0).view({1, 3, 1, 1});
    auto cam = torch::relu((weights * act).sum(1)).squeeze();
    const double peak = cam.max().item<double>();
    if (peak > 0) cam = cam / peak;
    for (int r = 0; r < 7; ++r) {
      for (int c = 0; c < 7; ++c) EXPECT_NEAR(map.heatmap(r, c), cam[r][c].item<double>(), 1e-6);
    }
  }
}

TEST(GradCam, SingleChannelIdentityHead) {
  auto act = torch::tensor({{{{-1.0, 2.0}, {0.5, 4.0}}}}, torch::kFloat64);
  Toy toy(act, torch::ones({1, 3}, torch::kFloat64));
  const auto map = vote::gradcam(toy, core::GrayImage(2, 2, 0.0f), ClassLabel::Covid19);
  EXPECT_NEAR(map.heatmap(0, 0), 0.0, 1e-9);
  EXPECT_NEAR(map.heatmap(0, 1), 0.5, 1e-6);
  EXPECT_NEAR(map.heatmap(1, 0), 0.125, 1e-6);
  EXPECT_NEAR(map.heatmap(1, 1), 1.0, 1e-6);
  EXPECT_NEAR(map.weight, 1.0 / 3.0, 1e-9);
}

TEST(GradCam, ZeroGradientGivesZeroMap) {
  Frozen frozen;
  const auto map = vote::gradcam(frozen, core::GrayImage(12, 12, 0.0f), ClassLabel::Normal);
  EXPECT_EQ(map.heatmap.rows(), 12);
  for (float v : map.heatmap.values()) ASSERT_EQ(v, 0.0f);
}

TEST(GradCam, RealModelMapsNormalized) {
  auto model = net::build_model(net::ModelConfig::desk());
  core::GrayImage patch(64, 64);
  auto rng = core::make_rng(1);
  for (auto& v : patch.values()) v = static_cast<float>(core::uniform(rng, 0, 1));
  for (auto label : core::kAllClasses) {
    const auto map = vote::gradcam(model, patch, label);
    EXPECT_EQ(map.heatmap.rows(), 64);
    float peak = 0.0f;
    for (float v : map.heatmap.values()) {
      ASSERT_GE(v, 0.0f);
      ASSERT_LE(v, 1.0f);
      peak = std::max(peak, v);
    }
    EXPECT_TRUE(peak == 0.0f || std::abs(peak - 1.0f) < 1e-6f);
  }
}

TEST(Overlay, ZeroHeatOnlyAddsBox) {
  core::GrayImage img(256, 256);
  for (int r = 0; r < 256; ++r) {
    for (int c = 0; c < 256; ++c) img(r, c) = static_cast<float>((r + c) % 200) / 255.0f;
  }
  const patch::PatchSpec s{128, 128, 80, 256};
  const auto tally = vote::majority_vote({make_vote(ClassLabel::Normal, {}, s)});
  vote::ActivationMap zero{core::GrayImage(64, 64, 0.0f), ClassLabel::Normal, 1.0};
  const auto out = vote::compose_overlay(img, tally, {zero});
  EXPECT_EQ(out.rows, 256 + vote::OverlayConfig{}.legend_height);
  const auto q = core::to_u8(img);
  for (int r = 0; r < 256; ++r) {
    for (int c = 0; c < 256; ++c) {
      const auto px = out.at<cv::Vec3b>(r, c);
      const bool on_box = r >= 88 && r < 168 && c >= 88 && c < 168 &&
                          (r < 91 || r >= 165 || c < 91 || c >= 165);
      if (on_box) {
        ASSERT_EQ(px, vote::class_color(ClassLabel::Normal)) << r << "," << c;
      } else {
        ASSERT_EQ(px, cv::Vec3b(q(r, c), q(r, c), q(r, c))) << r << "," << c;
      }
    }
  }
}

TEST(Overlay, NineBoxesColouredByVote) {
  core::GrayImage img(1024, 1024, 0.5f);
  std::vector<Vote> votes;
  for (int i = 0; i < 9; ++i) {
    const patch::PatchSpec s{200 + (i / 3) * 150, 200 + (i % 3) * 150, 80, 1024};
    votes.push_back(make_vote(core::label_from_index(i % 3), {}, s));
  }
  vote::OverlayConfig cfg;
  cfg.legend = false;
  const auto out = vote::compose_overlay(img, vote::majority_vote(votes), {}, cfg);
  ASSERT_EQ(out.rows, 1024);
  const auto grey = core::to_u8(img)(0, 0);
  for (const auto& v : votes) {
    const auto expect = vote::class_color(v.predicted);
    const int r0 = v.spec.row0(), c0 = v.spec.col0();
    for (int k = 0; k < 80; k += 7) {
      EXPECT_EQ(out.at<cv::Vec3b>(r0, c0 + k), expect);
      EXPECT_EQ(out.at<cv::Vec3b>(r0 + 79, c0 + k), expect);
      EXPECT_EQ(out.at<cv::Vec3b>(r0 + k, c0), expect);
      EXPECT_EQ(out.at<cv::Vec3b>(r0 + k, c0 + 79), expect);
    }
    EXPECT_EQ(out.at<cv::Vec3b>(r0 + 40, c0 + 40), cv::Vec3b(grey, grey, grey));
  }
}

TEST(Overlay, ClassColours) {
  EXPECT_EQ(vote::class_color(ClassLabel::Normal), cv::Vec3b(0, 255, 0));
  EXPECT_EQ(vote::class_color(ClassLabel::Pneumonia), cv::Vec3b(255, 0, 0));
  EXPECT_EQ(vote::class_color(ClassLabel::Covid19), cv::Vec3b(0, 0, 255));
}

TEST(Overlay, HeatChangesOnlyItsWindow) {
  core::GrayImage img(256, 256, 0.2f);
  const patch::PatchSpec s{100, 120, 80, 256};
  const auto tally = vote::majority_vote({make_vote(ClassLabel::Covid19, {}, s)});
  vote::ActivationMap hot{core::GrayImage(64, 64, 1.0f), ClassLabel::Covid19, 0.9};
  vote::OverlayConfig cfg;
  cfg.legend = false;
  const auto out = vote::compose_overlay(img, tally, {hot}, cfg);
  EXPECT_NE(out.at<cv::Vec3b>(100, 120), cv::Vec3b(51, 51, 51));
  EXPECT_EQ(out.at<cv::Vec3b>(10, 10), cv::Vec3b(51, 51, 51));
  EXPECT_THROW(vote::compose_overlay(img, tally, {hot, hot}, cfg), std::invalid_argument);
}

TEST(InferImage, VotesFromModel) {
  auto model = net::build_model(net::ModelConfig::desk());
  core::GrayImage img(1024, 1024, 0.4f);
  const auto area = lung::compute_draw_area(fixtures::two_lungs(1024));
  auto rng = core::make_rng(2);
  const auto res = vote::infer_image(model, img, area, 9, patch::Strategy::Grid, rng, {80, 1024, 64});
  EXPECT_EQ(res.tally.votes.size(), 9u);
  EXPECT_EQ(res.patches.size(), 9u);
  EXPECT_EQ(res.patches[0].rows(), 64);
  auto rng2 = core::make_rng(2);
  const auto again = vote::infer_image(model, img, area, 9, patch::Strategy::Grid, rng2, {80, 1024, 64});
  EXPECT_EQ(vote::to_json(res.tally).dump(), vote::to_json(again.tally).dump());
}
