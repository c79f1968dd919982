#include "pother/eval/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>

#include "pother/core/error.hpp"
#include "pother/core/image_io.hpp"
#include "pother/core/rng.hpp"

namespace pother::eval {

std::optional<Confounder> parse_confounder(std::string_view s) {
  if (s == "token") return Confounder::Token;
  if (s == "cable") return Confounder::Cable;
  return std::nullopt;
}

std::string_view to_string(Confounder c) { return c == Confounder::Token ? "token" : "cable"; }

void SynthSpec::validate() const {
  if (image_size < 64) throw ConfigError("synthetic image_size must be at least 64");
  for (int c : counts) {
    if (c < 0) throw ConfigError("synthetic class counts must be >= 0");
  }
  if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("rho must lie in [0, 1]");
  if (token_margin < 0 || reference_size < 1) throw ConfigError("invalid token margin");
  if (token_size < 8 || token_size > 64) throw ConfigError("token_size must lie in [8, 64]");
  if (!(haze_scale >= 0.0 && haze_scale <= 2.0)) throw ConfigError("haze_scale must lie in [0, 2]");
  if (!(texture_amplitude >= 0.0 && texture_amplitude <= 0.5)) throw ConfigError("texture_amplitude must lie in [0, 0.5]");
}

void to_json(nlohmann::json& j, const SynthSpec& s) {
  j = nlohmann::json{{"image_size", s.image_size},
                     {"counts", s.counts},
                     {"rho", s.rho},
                     {"confounder", to_string(s.confounder)},
                     {"seed", s.seed},
                     {"split", core::to_string(s.split)},
                     {"prefix", s.prefix},
                     {"token_margin", s.token_margin},
                     {"reference_size", s.reference_size},
                     {"texture_amplitude", s.texture_amplitude},
                     {"token_size", s.token_size},
                     {"haze_scale", s.haze_scale}};
}

void from_json(const nlohmann::json& j, SynthSpec& s) {
  SynthSpec d;
  s.image_size = j.value("image_size", d.image_size);
  s.counts = j.value("counts", d.counts);
  s.rho = j.value("rho", d.rho);
  const auto conf = j.value("confounder", std::string(to_string(d.confounder)));
  const auto parsed = parse_confounder(conf);
  if (!parsed) throw ConfigError("unknown confounder '" + conf + "'");
  s.confounder = *parsed;
  s.seed = j.value("seed", d.seed);
  const auto split = j.value("split", std::string(core::to_string(d.split)));
  const auto sp = core::parse_split(split);
  if (!sp) throw ConfigError("unknown split '" + split + "'");
  s.split = *sp;
  s.prefix = j.value("prefix", d.prefix);
  s.token_margin = j.value("token_margin", d.token_margin);
  s.reference_size = j.value("reference_size", d.reference_size);
  s.texture_amplitude = j.value("texture_amplitude", d.texture_amplitude);
  s.token_size = j.value("token_size", d.token_size);
  s.haze_scale = j.value("haze_scale", d.haze_scale);
}

namespace {

constexpr double kPi = std::numbers::pi;

struct Lung {
  double cy, cx, ry, rx;
  double radius(int r, int c) const {
    const double dy = (r - cy) / ry, dx = (c - cx) / rx;
    return std::sqrt(dy * dy + dx * dx);
  }
};

// Tee, inverted tee, plus: equal ink area, each mirror-symmetric left to right.
cv::Mat make_glyph(int t, int style) {
  cv::Mat g(t, t, CV_32F, cv::Scalar(0.88));
  int w = std::max(1, t / 5);
  if ((t - w) % 2) ++w;
  const int a = t / 5, b = t - a, mid = (t - w) / 2;
  const float ink = 0.12f;
  if (style == 2) {
    g(cv::Rect(a, mid, b - a, w)).setTo(ink);
    g(cv::Rect(mid, a, w, b - a)).setTo(ink);
  } else {
    g(cv::Rect(a, a, b - a, w)).setTo(ink);
    g(cv::Rect(mid, a + w, w, b - a - w)).setTo(ink);
    if (style == 1) cv::flip(g, g, 0);
  }
  return g;
}

std::vector<cv::Point2d> cable_points(int style, double s, core::Rng& rng) {
  auto j = [&] { return core::uniform(rng, -0.03, 0.03) * s; };
  // (x, y) control points in image pixels.
  std::vector<cv::Point2d> ctrl;
  switch (style) {
    case 0: ctrl = {{0.15 * s + j(), 0.12 * s + j()}, {0.85 * s + j(), 0.80 * s + j()}}; break;
    case 1: ctrl = {{0.20 * s + j(), 0.15 * s + j()}, {0.50 * s + j(), 0.85 * s + j()}, {0.80 * s + j(), 0.15 * s + j()}}; break;
    default:
      ctrl = {{0.30 * s + j(), 0.10 * s + j()}, {0.90 * s + j(), 0.40 * s + j()},
              {0.10 * s + j(), 0.60 * s + j()}, {0.70 * s + j(), 0.90 * s + j()}};
  }
  std::vector<cv::Point2d> pts;
  const int steps = 64;
  for (int i = 0; i <= steps; ++i) {
    const double t = static_cast<double>(i) / steps;
    // de Casteljau
    auto p = ctrl;
    for (std::size_t n = p.size(); n > 1; --n) {
      for (std::size_t k = 0; k + 1 < n; ++k) p[k] = (1.0 - t) * p[k] + t * p[k + 1];
    }
    pts.push_back(p[0]);
  }
  return pts;
}

SynthImage render(const SynthSpec& spec, core::ClassLabel label, int k, bool swapped) {
  const int S = spec.image_size;
  const double s = S;
  const double f = S / 256.0;
  const int cls = core::to_index(label);
  auto rng = core::make_rng(spec.seed, (static_cast<std::uint64_t>(cls) << 32) | static_cast<std::uint64_t>(k));

  cv::Mat img(S, S, CV_32F);
  const double body = core::uniform(rng, 0.42, 0.52);
  std::array<Lung, 2> lungs{};
  for (int side = 0; side < 2; ++side) {
    lungs[side].cx = s * (side == 0 ? 0.32 : 0.68) + core::uniform(rng, -0.015, 0.015) * s;
    lungs[side].cy = s * 0.45 + core::uniform(rng, -0.02, 0.02) * s;
    lungs[side].ry = s * core::uniform(rng, 0.22, 0.26);
    lungs[side].rx = s * core::uniform(rng, 0.11, 0.135);
  }
  const double lung_base = core::uniform(rng, 0.20, 0.30);
  const double amp = spec.texture_amplitude * core::uniform(rng, 0.8, 1.2);
  const double haze = spec.haze_scale * (label == core::ClassLabel::Pneumonia ? core::uniform(rng, 0.03, 0.08)
                      : label == core::ClassLabel::Covid19 ? core::uniform(rng, 0.05, 0.12)
                                                          : 0.0);
  const double period = 4.0 * f;
  const double phx = static_cast<double>(core::uniform_index(rng, 4)), phy = static_cast<double>(core::uniform_index(rng, 4));

  core::LungMask mask(S, S);
  for (int r = 0; r < S; ++r) {
    auto* row = img.ptr<float>(r);
    for (int c = 0; c < S; ++c) {
      const double noise = core::uniform(rng, -1.0, 1.0);
      const double dy = (r - 0.45 * s) / (0.40 * s), dx = (c - 0.5 * s) / (0.44 * s);
      const double d_body = std::sqrt(dy * dy + dx * dx);
      const double w_body = std::clamp((1.0 - d_body) / 0.08, 0.0, 1.0);
      double v = 0.06 + (body - 0.06) * w_body + 0.01 * noise;

      int lung = -1;
      for (int i = 0; i < 2; ++i) {
        if (lungs[i].radius(r, c) < 1.0) lung = i;
      }
      if (lung >= 0) {
        mask(r, c) = core::kLung;
        const double d = lungs[lung].radius(r, c);
        const double tex_noise = core::uniform(rng, -1.0, 1.0);
        double tex = 0.0;
        double base = lung_base;
        switch (label) {
          case core::ClassLabel::Normal:
            tex = amp * std::sqrt(3.0) * tex_noise;
            break;
          case core::ClassLabel::Pneumonia:
            base += haze;
            tex = 2.0 * amp * std::cos(2 * kPi * (c + phx) / period) * std::cos(2 * kPi * (r + phy) / period);
            break;
          case core::ClassLabel::Covid19:
            base += haze * d * d;
            tex = std::sqrt(2.0) * amp * (0.6 + 0.4 * d) * std::cos(2 * kPi * (c + r + phx) / period);
            break;
        }
        v = base + tex + 0.02 * noise;
      }
      row[c] = static_cast<float>(v);
    }
  }

  SynthImage out;
  int style = core::bernoulli(rng, spec.rho) ? cls : static_cast<int>(core::uniform_index(rng, 3));
  out.style = swapped ? (style + 1) % 3 : style;

  if (spec.confounder == Confounder::Token) {
    const int t = std::max(8, static_cast<int>(std::lround(spec.token_size * f)));
    const bool right = core::bernoulli(rng, 0.5);
    const int jr = static_cast<int>(core::uniform_index(rng, static_cast<std::uint64_t>(4 * f) + 1));
    const int jc = static_cast<int>(core::uniform_index(rng, static_cast<std::uint64_t>(4 * f) + 1));
    const int pad = static_cast<int>(std::lround(6 * f));
    const int row0 = S - t - pad - jr;
    const int col0 = right ? S - t - pad - jc : pad + jc;
    make_glyph(t, out.style).copyTo(img(cv::Rect(col0, row0, t, t)));
    out.confounder_box = {row0, col0, t, t};
  } else {
    const auto pts = cable_points(out.style, s, rng);
    std::vector<cv::Point> ipts;
    for (const auto& p : pts) ipts.emplace_back(static_cast<int>(std::lround(p.x)), static_cast<int>(std::lround(p.y)));
    const int thick = std::max(1, static_cast<int>(std::lround(2 * f)));
    const int radius = std::max(2, static_cast<int>(std::lround(4 * f)));
    cv::polylines(img, ipts, false, cv::Scalar(0.92), thick, cv::LINE_8);
    cv::circle(img, ipts.back(), radius, cv::Scalar(0.95), cv::FILLED, cv::LINE_8);
    auto rect = cv::boundingRect(ipts);
    const int grow = thick + radius + 1;
    rect = cv::Rect(rect.x - grow, rect.y - grow, rect.width + 2 * grow, rect.height + 2 * grow) & cv::Rect(0, 0, S, S);
    out.confounder_box = {rect.y, rect.x, rect.height, rect.width};
  }

  auto gray = core::gray_from_mat(img);
  out.image = core::from_u8(core::to_u8(gray));
  out.mask = std::move(mask);
  const std::string name = spec.prefix + "_" + std::to_string(cls) + "_" + std::to_string(k);
  out.record = {spec.prefix + "-" + std::to_string(cls) + "-" + std::to_string(k), "images/" + name + ".png", label,
                spec.split, "synthetic"};
  return out;
}

}  // namespace

double token_lung_distance(const SynthImage& item) {
  const auto& b = item.confounder_box;
  double best = std::numeric_limits<double>::infinity();
  for (int r = 0; r < item.mask.rows(); ++r) {
    for (int c = 0; c < item.mask.cols(); ++c) {
      if (item.mask(r, c) != core::kLung) continue;
      const double dy = r < b.row0 ? b.row0 - r : (r >= b.row0 + b.rows ? r - (b.row0 + b.rows - 1) : 0);
      const double dx = c < b.col0 ? b.col0 - c : (c >= b.col0 + b.cols ? c - (b.col0 + b.cols - 1) : 0);
      best = std::min(best, std::sqrt(dy * dy + dx * dx));
    }
  }
  return best;
}

SynthSet synth_generate(const SynthSpec& spec, bool swapped) {
  spec.validate();
  SynthSet set;
  std::vector<core::ImageRecord> records;
  const double min_distance = static_cast<double>(spec.token_margin) * spec.image_size / spec.reference_size;
  for (auto label : core::kAllClasses) {
    for (int k = 0; k < spec.counts[core::to_index(label)]; ++k) {
      auto item = render(spec, label, k, swapped);
      if (spec.confounder == Confounder::Token) {
        const double d = token_lung_distance(item);
        if (d < min_distance) {
          throw ConfigError("token lies " + std::to_string(d) + " px from the lungs, below the required " +
                            std::to_string(min_distance) + " px at image_size " + std::to_string(spec.image_size));
        }
      }
      records.push_back(item.record);
      set.items.push_back(std::move(item));
    }
  }
  set.manifest = core::DatasetManifest(std::move(records));
  return set;
}

void write_synth(const std::filesystem::path& root, const SynthSet& set) {
  std::filesystem::create_directories(root / "images");
  std::filesystem::create_directories(root / "masks");
  std::ofstream conf(root / "confounders.jsonl");
  for (const auto& item : set.items) {
    core::save_image(root / item.record.image_path, item.image);
    core::save_mask(root / "masks" / std::filesystem::path(item.record.image_path).filename(), item.mask);
    const auto& b = item.confounder_box;
    conf << nlohmann::ordered_json{{"image_path", item.record.image_path},
                                   {"label", core::to_string(item.record.label)},
                                   {"style", item.style},
                                   {"box", {b.row0, b.col0, b.rows, b.cols}}}
                .dump()
         << '\n';
  }
  core::save_manifest(root / "manifest.txt", set.manifest);
}

}  // namespace pother::eval
