#include "pother/train/augment.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include <opencv2/imgproc.hpp>

#include "pother/core/error.hpp"
#include "pother/core/image_io.hpp"

namespace pother::train {

namespace {

GrayImage filter3x3(const GrayImage& image, const cv::Matx33f& kernel) {
  cv::Mat out;
  cv::filter2D(core::as_mat(image), out, CV_32F, kernel, cv::Point(-1, -1), 0, cv::BORDER_REFLECT_101);
  return core::gray_from_mat(out);
}

void clip_unit(GrayImage& image) {
  for (auto& v : image.values()) v = std::clamp(v, 0.0f, 1.0f);
}

template <typename T>
core::Grid<T> flip_grid(const core::Grid<T>& g) {
  core::Grid<T> out(g.rows(), g.cols());
  for (int r = 0; r < g.rows(); ++r) {
    for (int c = 0; c < g.cols(); ++c) out(r, c) = g(r, g.cols() - 1 - c);
  }
  return out;
}

cv::Mat random_affine(core::Rng& rng, const AugmentConfig& cfg, int rows, int cols) {
  const double angle = core::uniform(rng, -cfg.max_rotation_deg, cfg.max_rotation_deg) * CV_PI / 180.0;
  const double sx = 1.0 + core::uniform(rng, -cfg.max_scale, cfg.max_scale);
  const double sy = 1.0 + core::uniform(rng, -cfg.max_scale, cfg.max_scale);
  const double tx = core::uniform(rng, -cfg.max_offset, cfg.max_offset) * cols;
  const double ty = core::uniform(rng, -cfg.max_offset, cfg.max_offset) * rows;
  const double cx = (cols - 1) / 2.0, cy = (rows - 1) / 2.0;
  const double ca = std::cos(angle), sa = std::sin(angle);
  // x' = R S (x - c) + c + t
  const double a = ca * sx, b = -sa * sy, d = sa * sx, e = ca * sy;
  return (cv::Mat_<double>(2, 3) << a, b, cx + tx - a * cx - b * cy, d, e, cy + ty - d * cx - e * cy);
}

GrayImage warp(const GrayImage& image, const cv::Mat& m) {
  cv::Mat out;
  cv::warpAffine(core::as_mat(image), out, m, cv::Size(image.cols(), image.rows()), cv::INTER_LINEAR,
                 cv::BORDER_REFLECT_101);
  return core::gray_from_mat(out);
}

GrayImage photometric(GrayImage img, core::Rng& rng, const AugmentConfig& cfg) {
  if (core::bernoulli(rng, cfg.p_sharpen)) {
    img = sharpen(img, core::uniform(rng, 0.2, 0.5), core::uniform(rng, 0.5, 1.0));
  }
  if (core::bernoulli(rng, cfg.p_emboss)) {
    img = emboss(img, core::uniform(rng, 0.2, 0.5), core::uniform(rng, 0.2, 0.7));
  }
  if (core::bernoulli(rng, cfg.p_clahe)) {
    const int grid = cfg.clahe_grid_min +
                     static_cast<int>(core::uniform_index(rng, static_cast<std::uint64_t>(cfg.clahe_grid_max - cfg.clahe_grid_min + 1)));
    img = clahe(img, core::uniform(rng, cfg.clahe_clip_min, cfg.clahe_clip_max), grid);
  }
  if (core::bernoulli(rng, cfg.p_brightness_contrast)) {
    const float alpha = 1.0f + static_cast<float>(core::uniform(rng, -cfg.max_contrast, cfg.max_contrast));
    const float beta = static_cast<float>(core::uniform(rng, -cfg.max_brightness, cfg.max_brightness));
    for (auto& v : img.values()) v = alpha * v + beta;
  }
  clip_unit(img);
  return img;
}

}  // namespace

void AugmentConfig::validate() const {
  for (double p : {p_flip, p_sharpen, p_emboss, p_clahe, p_affine, p_brightness_contrast}) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("augmentation probabilities must lie in [0, 1]");
  }
  if (clahe_grid_min < 1 || clahe_grid_max < clahe_grid_min) throw ConfigError("invalid CLAHE grid range");
  if (clahe_clip_min <= 0.0 || clahe_clip_max < clahe_clip_min) throw ConfigError("invalid CLAHE clip range");
}

AugmentConfig AugmentConfig::none() {
  AugmentConfig c;
  c.p_flip = c.p_sharpen = c.p_emboss = c.p_clahe = c.p_affine = c.p_brightness_contrast = 0.0;
  return c;
}

void to_json(nlohmann::json& j, const AugmentConfig& c) {
  j = nlohmann::json{{"p_flip", c.p_flip},
                     {"p_sharpen", c.p_sharpen},
                     {"p_emboss", c.p_emboss},
                     {"p_clahe", c.p_clahe},
                     {"p_affine", c.p_affine},
                     {"p_brightness_contrast", c.p_brightness_contrast},
                     {"max_offset", c.max_offset},
                     {"max_scale", c.max_scale},
                     {"max_rotation_deg", c.max_rotation_deg},
                     {"max_brightness", c.max_brightness},
                     {"max_contrast", c.max_contrast},
                     {"clahe_clip", {c.clahe_clip_min, c.clahe_clip_max}},
                     {"clahe_grid", {c.clahe_grid_min, c.clahe_grid_max}}};
}

void from_json(const nlohmann::json& j, AugmentConfig& c) {
  AugmentConfig d;
  c.p_flip = j.value("p_flip", d.p_flip);
  c.p_sharpen = j.value("p_sharpen", d.p_sharpen);
  c.p_emboss = j.value("p_emboss", d.p_emboss);
  c.p_clahe = j.value("p_clahe", d.p_clahe);
  c.p_affine = j.value("p_affine", d.p_affine);
  c.p_brightness_contrast = j.value("p_brightness_contrast", d.p_brightness_contrast);
  c.max_offset = j.value("max_offset", d.max_offset);
  c.max_scale = j.value("max_scale", d.max_scale);
  c.max_rotation_deg = j.value("max_rotation_deg", d.max_rotation_deg);
  c.max_brightness = j.value("max_brightness", d.max_brightness);
  c.max_contrast = j.value("max_contrast", d.max_contrast);
  if (j.contains("clahe_clip")) {
    c.clahe_clip_min = j["clahe_clip"].at(0).get<double>();
    c.clahe_clip_max = j["clahe_clip"].at(1).get<double>();
  }
  if (j.contains("clahe_grid")) {
    c.clahe_grid_min = j["clahe_grid"].at(0).get<int>();
    c.clahe_grid_max = j["clahe_grid"].at(1).get<int>();
  }
}

GrayImage horizontal_flip(const GrayImage& image) { return flip_grid(image); }

GrayImage sharpen(const GrayImage& image, double alpha, double lightness) {
  const float a = static_cast<float>(alpha), l = static_cast<float>(lightness);
  // (1 - a) * identity + a * [[-1,-1,-1],[-1,8+l,-1],[-1,-1,-1]]
  cv::Matx33f k(-a, -a, -a, -a, (1 - a) + a * (8 + l), -a, -a, -a, -a);
  auto out = filter3x3(image, k);
  clip_unit(out);
  return out;
}

GrayImage emboss(const GrayImage& image, double alpha, double strength) {
  const float a = static_cast<float>(alpha), s = static_cast<float>(strength);
  // (1 - a) * identity + a * [[-1-s,-s,0],[-s,1,s],[0,s,1+s]]
  cv::Matx33f k(a * (-1 - s), -a * s, 0, -a * s, (1 - a) + a, a * s, 0, a * s, a * (1 + s));
  auto out = filter3x3(image, k);
  clip_unit(out);
  return out;
}

GrayImage clahe(const GrayImage& image, double clip_limit, int grid) {
  auto q = core::to_u8(image);
  auto op = cv::createCLAHE(clip_limit, cv::Size(grid, grid));
  cv::Mat out;
  op->apply(core::as_mat(q), out);
  return core::from_u8(core::u8_from_mat(out));
}

GrayImage histogram_equalize(const GrayImage& image) {
  auto q = core::to_u8(image);
  std::array<std::size_t, 256> hist{};
  for (auto v : q.values()) ++hist[v];
  std::array<float, 256> lut{};
  std::size_t acc = 0;
  const double total = static_cast<double>(q.size());
  for (int v = 0; v < 256; ++v) {
    acc += hist[v];
    lut[v] = static_cast<float>(std::lround(255.0 * static_cast<double>(acc) / total)) / 255.0f;
  }
  GrayImage out(image.rows(), image.cols());
  auto src = q.values();
  auto dst = out.values();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = lut[src[i]];
  return out;
}

GrayImage augment(const GrayImage& image, core::Rng& rng, const AugmentConfig& config) {
  core::Grid<std::uint8_t> unused(image.rows(), image.cols());
  GrayImage out = image;
  augment_pair(out, unused, rng, config);
  return out;
}

void augment_pair(GrayImage& image, core::Grid<std::uint8_t>& mask, core::Rng& rng, const AugmentConfig& config) {
  if (core::bernoulli(rng, config.p_flip)) {
    image = flip_grid(image);
    mask = flip_grid(mask);
  }
  if (core::bernoulli(rng, config.p_affine)) {
    const auto m = random_affine(rng, config, image.rows(), image.cols());
    image = warp(image, m);
    GrayImage indicator(mask.rows(), mask.cols());
    auto mv = mask.values();
    auto iv = indicator.values();
    for (std::size_t i = 0; i < mv.size(); ++i) iv[i] = mv[i] ? 1.0f : 0.0f;
    auto warped = warp(indicator, m);
    auto wv = warped.values();
    for (std::size_t i = 0; i < mv.size(); ++i) mv[i] = wv[i] > 0.5f ? 1 : 0;
  }
  image = photometric(std::move(image), rng, config);
}

}  // namespace pother::train
