#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <thread>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <torch/torch.h>

#include "cli.hpp"
#include "pother/core/manifest.hpp"
#include "pother/eval/audit.hpp"
#include "pother/eval/metrics.hpp"
#include "pother/lung/masks.hpp"
#include "pother/net/pother_net.hpp"
#include "pother/patch/patch.hpp"
#include "pother/train/losses.hpp"
#include "pother/vote/gradcam.hpp"
#include "pother/vote/vote.hpp"

using namespace pother;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

// Collects the first few failure messages; a criterion passes only with none.
struct Checks {
  int failed = 0;
  std::ostringstream msg;
  void expect(bool ok, const std::string& what) {
    if (ok) return;
    if (failed++ < 3) msg << what << "; ";
  }
  Outcome done(const std::string& summary) const {
    return {failed == 0, failed == 0 ? summary : std::to_string(failed) + " failed: " + msg.str()};
  }
};

std::string fmt(double v, int digits = 3) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

// ---------------------------------------------------------------- 1

Outcome reference_f1() {
  Checks c;
  int n = 0;
  for (const auto& r : eval::reference_f1_consistency(1e-3)) {
    const double f1 = 2 * r.row.precision * r.row.recall / (r.row.precision + r.row.recall);
    c.expect(std::abs(f1 - r.row.f1) <= 1e-3 + 1e-12, r.row.method + "/" + std::string(core::to_string(r.row.label)));
    c.expect(r.pass, "library verdict for " + r.row.method);
    ++n;
  }
  c.expect(n == 12, "expected 12 rows, got " + std::to_string(n));
  const double covid = 2 * 1.000 * 0.950 / (1.000 + 0.950);
  c.expect(std::abs(covid - 0.974) <= 1e-3, "COVID-19 example");
  return c.done(std::to_string(n) + " rows within 0.001");
}

// ---------------------------------------------------------------- 2

std::vector<double> flat(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kFloat64).contiguous();
  return {c.data_ptr<double>(), c.data_ptr<double>() + c.numel()};
}

double dice_ref(const std::vector<double>& p, const std::vector<double>& g, double eps) {
  double pg = 0, pp = 0, gg = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    pg += p[i] * g[i];
    pp += p[i] * p[i];
    gg += g[i] * g[i];
  }
  return 1.0 - (2 * pg + eps) / (pp + gg + eps);
}

double wce_ref(const std::vector<double>& probs, const std::vector<std::int64_t>& t, const std::vector<double>& w) {
  const std::size_t n = t.size();
  double total = 0;
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t k = 0; k < 3; ++k) {
      const double p = probs[r * 3 + k];
      total -= k == static_cast<std::size_t>(t[r]) ? w[k] * std::log(p) : std::log(1 - p);
    }
  }
  return total / static_cast<double>(n);
}

double rel(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

template <typename F>
double worst_fd_error(torch::Tensor x, F&& loss) {
  x = x.detach().clone().requires_grad_(true);
  loss(x).backward();
  const auto analytic = flat(x.grad());
  auto base = x.detach();
  double worst = 0;
  const double h = 1e-6;
  for (std::int64_t i = 0; i < base.numel(); ++i) {
    auto a = base.clone(), b = base.clone();
    a.view(-1)[i] += h;
    b.view(-1)[i] -= h;
    const double fd = (loss(a).template item<double>() - loss(b).template item<double>()) / (2 * h);
    worst = std::max(worst, rel(analytic[static_cast<std::size_t>(i)], fd));
  }
  return worst;
}

Outcome loss_oracles() {
  Checks c;
  torch::manual_seed(2024);
  double dice_err = 0, wce_err = 0, dice_fd = 0, wce_fd = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 1 + trial % 3, h = 2 + trial % 5, w = 2 + (trial * 7) % 5;
    auto p = torch::rand({n, 1, h, w}, torch::kFloat64) * 0.9 + 0.05;
    auto g = (torch::rand({n, 1, h, w}, torch::kFloat64) > 0.5).to(torch::kFloat64);
    double ref = 0;
    for (int k = 0; k < n; ++k) ref += dice_ref(flat(p[k]), flat(g[k]), 1e-6) / n;
    dice_err = std::max(dice_err, std::abs(train::dice_loss(p, g, 1e-6).item<double>() - ref));
    dice_fd = std::max(dice_fd, worst_fd_error(p, [&](const torch::Tensor& x) { return train::dice_loss(x, g, 1e-6); }));

    const int rows = 1 + trial % 5;
    auto probs = torch::softmax(torch::randn({rows, 3}, torch::kFloat64) * 1.5, 1);
    auto t = torch::randint(0, 3, {rows}, torch::kInt64);
    const std::vector<double> wv{0.4 + 0.1 * trial, 1.0, 13.9 - 0.3 * trial};
    auto wt = torch::tensor(wv, torch::kFloat64);
    std::vector<std::int64_t> tv(t.data_ptr<std::int64_t>(), t.data_ptr<std::int64_t>() + rows);
    wce_err = std::max(wce_err, std::abs(train::weighted_ce(probs, t, wt).item<double>() - wce_ref(flat(probs), tv, wv)));
    wce_fd = std::max(wce_fd, worst_fd_error(probs, [&](const torch::Tensor& x) { return train::weighted_ce(x, t, wt); }));
  }
  c.expect(dice_err <= 1e-6, "dice value error " + std::to_string(dice_err));
  c.expect(wce_err <= 1e-6, "wce value error " + std::to_string(wce_err));
  c.expect(dice_fd < 1e-4, "dice gradient rel error " + std::to_string(dice_fd));
  c.expect(wce_fd < 1e-4, "wce gradient rel error " + std::to_string(wce_fd));
  std::ostringstream s;
  s << "20 grids; max |value err| dice " << std::scientific << std::setprecision(1) << dice_err << " wce " << wce_err
    << "; max grad rel err dice " << dice_fd << " wce " << wce_fd;
  return c.done(s.str());
}

// ---------------------------------------------------------------- 3

void fill_ellipse(core::LungMask& m, double cy, double cx, double ry, double rx) {
  const int r0 = std::max(0, static_cast<int>(cy - ry) - 1), r1 = std::min(m.rows() - 1, static_cast<int>(cy + ry) + 1);
  const int c0 = std::max(0, static_cast<int>(cx - rx) - 1), c1 = std::min(m.cols() - 1, static_cast<int>(cx + rx) + 1);
  for (int r = r0; r <= r1; ++r) {
    for (int c = c0; c <= c1; ++c) {
      const double dy = (r - cy) / ry, dx = (c - cx) / rx;
      if (dy * dy + dx * dx < 1.0) m(r, c) = core::kLung;
    }
  }
}

core::LungMask fuzz_mask(int size, core::Rng& rng) {
  core::LungMask m(size, size, 0);
  const double s = size;
  auto u = [&](double lo, double hi) { return core::uniform(rng, lo, hi); };
  for (double side : {0.30, 0.70}) {
    fill_ellipse(m, s * u(0.38, 0.50), s * (side + u(-0.05, 0.05)), s * u(0.12, 0.25), s * u(0.06, 0.14));
  }
  // Occasional lobes and extra blobs make the masks non-convex.
  const int extra = static_cast<int>(core::uniform_index(rng, 3));
  for (int k = 0; k < extra; ++k) fill_ellipse(m, s * u(0.3, 0.6), s * u(0.2, 0.8), s * u(0.03, 0.08), s * u(0.03, 0.08));
  return m;
}

// Inclusive prefix sums of lung pixels for O(1) rectangle queries.
struct Integral {
  int rows, cols;
  std::vector<std::int64_t> s;
  explicit Integral(const core::LungMask& m) : rows(m.rows()), cols(m.cols()), s((rows + 1) * (cols + 1), 0) {
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) {
        at(r + 1, c + 1) = (m(r, c) == core::kLung) + at(r, c + 1) + at(r + 1, c) - at(r, c);
      }
    }
  }
  std::int64_t& at(int r, int c) { return s[static_cast<std::size_t>(r) * (cols + 1) + c]; }
  std::int64_t count(int r0, int c0, int r1, int c1) {  // half-open, clipped
    r0 = std::clamp(r0, 0, rows), r1 = std::clamp(r1, 0, rows), c0 = std::clamp(c0, 0, cols), c1 = std::clamp(c1, 0, cols);
    if (r0 >= r1 || c0 >= c1) return 0;
    return at(r1, c1) - at(r0, c1) - at(r1, c0) + at(r0, c0);
  }
};

Outcome patch_provenance() {
  Checks c;
  auto rng = core::make_rng(31337);
  const int trials = 10000;
  const int side = 80, half = side / 2;
  std::size_t centres = 0, tokens = 0;
  for (int trial = 0; trial < trials && c.failed < 5; ++trial) {
    const int size = trial % 50 == 0 ? 1024 : (trial % 2 ? 256 : 384);
    const auto mask = fuzz_mask(size, rng);
    const auto area = lung::compute_draw_area(mask, 0.9, half);
    Integral lung_sum(mask);

    double my = 0, mx = 0, n = 0;
    for (int r = 0; r < size; ++r) {
      for (int col = 0; col < size; ++col) {
        if (mask(r, col) == core::kLung) my += r, mx += col, n += 1;
      }
    }
    my /= n, mx /= n;

    // Corner token at Chebyshev distance >= 41 from every lung pixel.
    std::optional<eval::Box> token;
    for (int attempt = 0; attempt < 40 && !token; ++attempt) {
      const int ts = 8 + static_cast<int>(core::uniform_index(rng, 33));
      const bool bottom = core::bernoulli(rng, 0.5), right = core::bernoulli(rng, 0.5);
      const int span = size / 3;
      const int r0 = bottom ? size - ts - static_cast<int>(core::uniform_index(rng, span)) : static_cast<int>(core::uniform_index(rng, span));
      const int c0 = right ? size - ts - static_cast<int>(core::uniform_index(rng, span)) : static_cast<int>(core::uniform_index(rng, span));
      if (r0 < 0 || c0 < 0) continue;
      if (lung_sum.count(r0 - 40, c0 - 40, r0 + ts + 40, c0 + ts + 40) == 0) token = eval::Box{r0, c0, ts, ts};
    }
    tokens += token.has_value();

    auto check = [&](int row, int col) {
      ++centres;
      const auto s = patch::clamp_spec({row, col, side, size});
      c.expect(s.center_row == row && s.center_col == col, "centre needed clamping");
      c.expect(s.row0() >= 0 && s.col0() >= 0 && s.row0() + side <= size && s.col0() + side <= size, "window out of frame");
      c.expect(area.valid_centers(row, col) == 1, "centre outside draw area");
      c.expect(mask(row, col) == core::kLung, "centre outside lung");
      // Pre-image under the 0.9 scaling about the lung centroid must land on (or beside) lung.
      const int pr = static_cast<int>(std::lround(my + (row - my) / 0.9));
      const int pc = static_cast<int>(std::lround(mx + (col - mx) / 0.9));
      c.expect(lung_sum.count(pr - 1, pc - 1, pr + 2, pc + 2) > 0, "centre outside the 0.9-scaled lung");
      if (token) {
        const bool overlap = s.row0() < token->row0 + token->rows && token->row0 < s.row0() + side &&
                             s.col0() < token->col0 + token->cols && token->col0 < s.col0() + side;
        c.expect(!overlap, "token sampled into a patch");
      }
    };
    if (area.nonzero_count() == 0) continue;
    for (int k = 0; k < 8; ++k) {
      const auto ctr = patch::sample_patch_center(area, rng);
      check(ctr.row, ctr.col);
    }
    for (const auto& s : patch::make_inference_patches(area, 9, patch::Strategy::Grid, rng, side)) check(s.center_row, s.center_col);
  }
  c.expect(tokens > trials / 2, "too few tokens placed (" + std::to_string(tokens) + ")");
  c.expect(centres > static_cast<std::size_t>(trials) * 8, "too few centres checked");
  return c.done(std::to_string(trials) + " masks, " + std::to_string(centres) + " windows, " + std::to_string(tokens) +
                " tokens");
}

// ---------------------------------------------------------------- 4

Outcome model_contract() {
  Checks c;
  torch::manual_seed(4);
  net::ModelConfig full;
  auto model = net::build_model(full);
  {
    model->eval();
    torch::NoGradGuard g;
    auto out = model->forward(torch::rand({2, 1, 224, 224}));
    c.expect(out.class_logits.sizes() == torch::IntArrayRef({2, 3}), "logit shape");
    c.expect(out.seg_map.sizes() == torch::IntArrayRef({2, 1, 224, 224}), "seg map shape");
    c.expect(out.seg_map.min().item<float>() >= 0 && out.seg_map.max().item<float>() <= 1, "seg map range");
  }

  auto small = net::build_model(net::ModelConfig::desk());
  small->train();
  auto x = torch::rand({2, 1, 64, 64});
  auto stem_grad = [&] {
    auto gr = small->encoder()->parameters().front().grad();
    return gr.defined() ? gr.norm().item<double>() : 0.0;
  };
  small->zero_grad();
  torch::nn::functional::cross_entropy(small->forward(x).class_logits, torch::tensor({1, 2})).backward();
  const double via_cls = stem_grad();
  small->zero_grad();
  train::dice_loss(small->forward(x).seg_map, (x > 0.5).to(torch::kFloat32)).backward();
  const double via_seg = stem_grad();
  c.expect(via_cls > 0, "no encoder gradient from the classification head");
  c.expect(via_seg > 0, "no encoder gradient from the segmentation head");

  net::AttentionAggregate gate(8, std::vector<int>{16, 8}, 8, true, std::vector<int>{1, 3, 5, 7}, std::vector<int>{1, 2});
  gate->eval();
  {
    torch::NoGradGuard g;
    auto skip = torch::randn({2, 8, 16, 16});
    std::vector<torch::Tensor> pyr{torch::randn({2, 16, 4, 4}), torch::randn({2, 8, 8, 8})};
    gate->set_override(net::GateOverride::Ones);
    c.expect(torch::equal(gate->forward(skip, pyr), skip), "all-ones attention is not the identity");
    gate->set_override(net::GateOverride::Zeros);
    c.expect(gate->forward(skip, pyr).abs().max().item<float>() == 0.0f, "all-zeros attention leaks");
    gate->set_override(net::GateOverride::None);
    gate->forward(skip, pyr);
    const auto& a = gate->last_coefficients();
    c.expect(a.min().item<float>() >= 0 && a.max().item<float>() <= 1, "attention coefficients outside [0,1]");
  }

  auto v = torch::randn({3, 11, 7, 7});
  const float norm_err = (net::l2_normalize(v).norm(2, 1) - 1).abs().max().item<float>();
  c.expect(norm_err < 1e-5f, "l2 norm error " + std::to_string(norm_err));
  c.expect(!torch::isnan(net::l2_normalize(torch::zeros({1, 4, 2, 2}))).any().item<bool>(), "l2 of zero is NaN");

  auto without = full;
  without.inception_enabled = false;
  const double pa = static_cast<double>(net::count_parameters(*model));
  const double pb = static_cast<double>(net::count_parameters(*net::build_model(without)));
  const double overhead = pa / pb - 1.0;
  c.expect(overhead > 0 && overhead < 0.15, "inception overhead " + fmt(overhead));
  return c.done("shapes ok, grad norms cls " + fmt(via_cls, 4) + " seg " + fmt(via_seg, 4) + ", l2 err " +
                fmt(norm_err, 7) + ", inception overhead " + fmt(100 * overhead, 2) + "%");
}

// ---------------------------------------------------------------- 5

vote::Vote make_vote(int cls, std::array<double, 3> probs = {}) {
  vote::Vote v;
  v.predicted = core::label_from_index(cls);
  if (probs == std::array<double, 3>{}) probs[static_cast<std::size_t>(cls)] = 1.0;
  v.probs = probs;
  return v;
}

Outcome voting() {
  Checks c;
  auto rng = core::make_rng(55);
  std::mt19937 shuffler(55);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<vote::Vote> votes;
    const int n = 1 + trial % 15;
    for (int i = 0; i < n; ++i) {
      std::array<float, 3> l{};
      for (auto& x : l) x = static_cast<float>(core::uniform(rng, -2, 2));
      votes.push_back(vote::vote_from_logits(l));
    }
    const auto base = vote::majority_vote(votes);
    auto shuffled = votes;
    std::shuffle(shuffled.begin(), shuffled.end(), shuffler);
    const auto perm = vote::majority_vote(shuffled);
    c.expect(perm.final == base.final && perm.counts == base.counts && perm.tie == base.tie, "permutation changed result");
    c.expect(vote::to_json(vote::majority_vote(votes)).dump() == vote::to_json(base).dump(), "non-deterministic");
    auto grown = votes;
    const auto winner = *std::find_if(votes.begin(), votes.end(), [&](const auto& v) { return v.predicted == base.final; });
    for (int k = 0; k < 3; ++k) {
      grown.push_back(winner);
      c.expect(vote::majority_vote(grown).final == base.final, "duplicating the winner changed the result");
    }
  }
  // Tie-breaks: mean probability, then lowest index.
  const auto t1 = vote::majority_vote({make_vote(0, {0.5, 0.3, 0.2}), make_vote(2, {0.1, 0.2, 0.7})});
  c.expect(t1.tie && t1.final == core::ClassLabel::Covid19, "mean-probability tie-break");
  const auto t2 = vote::majority_vote({make_vote(2, {0.2, 0.2, 0.6}), make_vote(1, {0.2, 0.6, 0.2})});
  c.expect(t2.tie && t2.final == core::ClassLabel::Pneumonia, "lowest-index tie-break");

  std::vector<vote::Vote> nine(9, make_vote(1));
  for (int i = 0; i < 3; ++i) nine[static_cast<std::size_t>(i * 3)] = make_vote(2, {0.0, 0.0, 1.0});
  const auto f = vote::majority_vote(nine);
  c.expect(f.final == core::ClassLabel::Pneumonia && f.counts[1] == 6, "3 of 9 flipped");
  return c.done("500 random tallies, tie-breaks and the 6-of-9 scenario");
}

// ---------------------------------------------------------------- 6

Outcome bias_audit(const fs::path& work) {
  const auto cfg = eval::AuditConfig::desk();
  std::ostringstream log;
  const auto report = eval::run_bias_audit(cfg, work / "audit", &log);
  std::ostringstream s;
  for (const auto& run : report.runs) {
    s << "rho=" << run.rho << " global clean " << fmt(run.global.clean.accuracy) << " swapped "
      << fmt(run.global.swapped.accuracy) << " retention " << fmt(run.global.retention) << ", patch clean "
      << fmt(run.pother.clean.accuracy) << " swapped " << fmt(run.pother.swapped.accuracy) << " retention "
      << fmt(run.pother.retention) << "; ";
  }
  std::ofstream(work / "audit.log") << log.str();
  return {report.pass, s.str()};
}

// ---------------------------------------------------------------- 7

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

struct CliStep {
  std::string name;
  std::vector<std::string> args;
};

std::vector<CliStep> smoke_steps(const std::string& test_image) {
  return {
      {"synth train", {"synth", "--counts", "12", "12", "12", "--image-size", "256", "--seed", "3", "--out", "data"}},
      {"synth test",
       {"synth", "--counts", "3", "3", "3", "--image-size", "256", "--split", "test", "--prefix", "test", "--seed", "4",
        "--out", "test"}},
      {"pretrain-seg",
       {"pretrain-seg", "--config", "seg.json", "--manifest", "data/manifest.txt", "--image-root", "data", "--mask-root",
        "data/masks", "--out", "seg"}},
      {"gen-masks",
       {"gen-masks", "--segmenter", "seg/segmenter.ckpt", "--manifest", "data/manifest.txt", "--image-root", "data",
        "--out", "masks"}},
      {"train",
       {"train", "--manifest", "data/manifest.txt", "--image-root", "data", "--mask-root", "masks/masks", "--model",
        "desk", "--epochs", "5", "--steps-per-epoch", "20", "--lr", "0.002", "--seed", "11", "--out", "model"}},
      {"infer",
       {"infer", "--checkpoint", "model/model.ckpt", "--manifest", "test/manifest.txt", "--image-root", "test",
        "--segmenter", "seg/segmenter.ckpt", "--strategy", "grid", "--patches", "9", "--seed", "5", "--out", "pred"}},
      {"evaluate", {"evaluate", "--predictions", "pred/predictions.csv", "--out", "eval"}},
      {"gradcam",
       {"gradcam", "--checkpoint", "model/model.ckpt", "--image", test_image, "--segmenter", "seg/segmenter.ckpt",
        "--strategy", "grid", "--patches", "9", "--seed", "5", "--out", "cam"}},
  };
}

// Every vote's box outline carries its class colour (grid windows never overlap).
void check_boxes(Checks& c, const fs::path& png, const json& tally) {
  const cv::Mat img = cv::imread(png.string(), cv::IMREAD_COLOR);
  c.expect(!img.empty(), "cannot read " + png.string());
  if (img.empty()) return;
  const std::map<std::string, cv::Vec3b> colour = {
      {"normal", {0, 255, 0}}, {"pneumonia", {255, 0, 0}}, {"COVID-19", {0, 0, 255}}};
  for (const auto& v : tally.at("votes")) {
    const int side = v.at("side"), r0 = v.at("center_row").get<int>() - side / 2, c0 = v.at("center_col").get<int>() - side / 2;
    const auto want = colour.at(v.at("predicted").get<std::string>());
    for (const auto& [r, col] : {std::pair{r0, c0}, {r0 + side - 1, c0 + side - 1}, {r0, c0 + side / 2}, {r0 + side / 2, c0}}) {
      c.expect(img.at<cv::Vec3b>(r, col) == want, png.filename().string() + " box colour at " + std::to_string(r) + "," +
                                                      std::to_string(col));
    }
  }
}

Outcome smoke_pipeline(const fs::path& work) {
  Checks c;
  const auto start = fs::current_path();
  std::vector<fs::path> roots = {work / "smoke_a", work / "smoke_b"};
  std::string first_image;
  std::ostringstream note;
  for (const auto& root : roots) {
    fs::remove_all(root);
    fs::create_directories(root);
    std::ofstream(root / "seg.json")
        << R"({"seed": 2, "segmenter": {"input_size": 256, "working_size": 64, "base_width": 8, "levels": 2,)"
        << R"( "batch_size": 4, "epochs": 25}})";
    fs::current_path(root);
    bool ok = true;
    for (const auto& step : smoke_steps("test/images/test_0_0.png")) {
      std::ostringstream out, err;
      const auto t0 = std::chrono::steady_clock::now();
      const int code = cli::run_cli(step.args, out, err);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (root == roots[0]) note << step.name << " " << fmt(secs, 0) << "s, ";
      c.expect(code == 0, step.name + " exited " + std::to_string(code) + ": " + err.str());
      if (code != 0) {
        ok = false;
        break;
      }
    }
    fs::current_path(start);
    if (!ok) return c.done("");
  }

  const auto& a = roots[0];
  const auto hist = json::parse(slurp(a / "model" / "history.json"));
  const int decreasing = hist.at("decreasing_epochs");
  c.expect(hist.at("epochs").size() == 5, "expected 5 epochs");
  c.expect(decreasing >= 4, "only " + std::to_string(decreasing) + " of 5 epochs decreased");

  // Overlays: gradcam single image and every batch overlay.
  check_boxes(c, a / "cam" / "overlay.png", json::parse(slurp(a / "cam" / "votes.json")));
  std::ifstream votes(a / "pred" / "votes.jsonl");
  int overlays = 0;
  for (std::string line; std::getline(votes, line);) {
    const auto j = json::parse(line);
    const auto stem = fs::path(j.at("image_path").get<std::string>()).stem().string();
    check_boxes(c, a / "pred" / "overlays" / (stem + ".png"), j);
    ++overlays;
  }
  c.expect(overlays > 0, "no overlays written");
  c.expect(fs::exists(a / "eval" / "metrics.json"), "metrics.json missing");

  // Bit-identical JSON across the two runs.
  int compared = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    const auto ext = e.path().extension();
    if (!e.is_regular_file() || (ext != ".json" && ext != ".jsonl")) continue;
    const auto rel = fs::relative(e.path(), a);
    c.expect(fs::exists(roots[1] / rel) && slurp(e.path()) == slurp(roots[1] / rel), "JSON differs: " + rel.string());
    ++compared;
  }
  c.expect(compared >= 10, "too few JSON files compared");
  const auto metrics = json::parse(slurp(a / "eval" / "metrics.json"));
  note << decreasing << "/5 epochs decreasing, " << overlays + 1 << " overlays checked, " << compared
       << " JSON files identical, test accuracy " << fmt(metrics.at("accuracy").get<double>());
  return c.done(note.str());
}

// ---------------------------------------------------------------- 8

struct LinearReadoutImpl : torch::nn::Module {
  LinearReadoutImpl(torch::Tensor a, torch::Tensor w) : act(std::move(a)), readout(std::move(w)) {}
  net::ClassifierTrace trace(const torch::Tensor&) {
    auto f = act.clone().requires_grad_(true);
    return {f, f.mean({2, 3}).matmul(readout)};
  }
  torch::Tensor act, readout;
};
TORCH_MODULE(LinearReadout);

struct DetachedImpl : torch::nn::Module {
  net::ClassifierTrace trace(const torch::Tensor&) {
    return {torch::rand({1, 3, 5, 5}).requires_grad_(true), torch::tensor({{1.0f, -1.0f, 0.5f}})};
  }
};
TORCH_MODULE(Detached);

Outcome gradcam_sanity() {
  Checks c;
  Detached detached;
  const auto zero = vote::gradcam(detached, core::GrayImage(10, 10, 0.0f), core::ClassLabel::Pneumonia);
  c.expect(std::all_of(zero.heatmap.values().begin(), zero.heatmap.values().end(), [](float v) { return v == 0.0f; }),
           "zero-gradient map is not all zero");

  torch::manual_seed(8);
  double worst = 0;
  for (int trial = 0; trial < 10; ++trial) {
    auto act = torch::randn({1, 1, 6, 6}, torch::kFloat64);
    auto w = torch::randn({1, 3}, torch::kFloat64);
    LinearReadout toy(act, w);
    for (int t = 0; t < 3; ++t) {
      const auto map = vote::gradcam(toy, core::GrayImage(6, 6, 0.0f), core::label_from_index(t));
      // One channel: weight = w_t / 36, cam = relu(weight * A), normalized by its max.
      auto cam = torch::relu(w[0][t] / 36.0 * act[0][0]);
      const double peak = cam.max().item<double>();
      if (peak > 0) cam = cam / peak;
      for (int r = 0; r < 6; ++r) {
        for (int col = 0; col < 6; ++col) worst = std::max(worst, std::abs(map.heatmap(r, col) - cam[r][col].item<double>()));
      }
    }
  }
  c.expect(worst <= 1e-6, "closed-form mismatch " + std::to_string(worst));

  auto model = net::build_model(net::ModelConfig::desk());
  auto rng = core::make_rng(8);
  int nonzero = 0;
  for (int k = 0; k < 6; ++k) {
    core::GrayImage patch(64, 64);
    for (auto& v : patch.values()) v = static_cast<float>(core::uniform(rng, 0, 1));
    const auto map = vote::gradcam(model, patch, core::label_from_index(k % 3));
    const auto [lo, hi] = std::minmax_element(map.heatmap.values().begin(), map.heatmap.values().end());
    c.expect(*lo >= 0.0f && *hi <= 1.0f, "map outside [0,1]");
    if (*hi > 0) {
      ++nonzero;
      c.expect(std::abs(*hi - 1.0f) < 1e-6f, "nonzero map not max-normalized");
    }
  }
  c.expect(nonzero > 0, "every real map was zero");
  std::ostringstream s;
  s << "zero map exact, closed-form max err " << std::scientific << std::setprecision(1) << worst << ", " << nonzero
    << "/6 real maps normalized";
  return c.done(s.str());
}

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(std::max(1, static_cast<int>(std::thread::hardware_concurrency())));
  std::set<int> only;
  fs::path work = fs::temp_directory_path() / "pother_acceptance";
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--work" && i + 1 < argc) {
      work = argv[++i];
    } else {
      only.insert(std::stoi(a));
    }
  }
  fs::create_directories(work);
  work = fs::absolute(work);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"reference table F1 consistency", reference_f1},
      {"loss oracles", loss_oracles},
      {"patch provenance", patch_provenance},
      {"model contract", model_contract},
      {"voting properties", voting},
      {"synthetic bias audit", [&] { return bias_audit(work); }},
      {"end-to-end smoke pipeline", [&] { return smoke_pipeline(work); }},
      {"GradCAM sanity", gradcam_sanity},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << criteria[i].first << ", " << fmt(secs, 1)
              << "s): " << o.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
