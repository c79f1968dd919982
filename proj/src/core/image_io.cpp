#include "pother/core/image_io.hpp"

#include <algorithm>
#include <cmath>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "pother/core/error.hpp"

namespace pother::core {

GrayImage gray_from_mat(const cv::Mat& m) {
  cv::Mat f;
  if (m.type() == CV_32F) {
    f = m.isContinuous() ? m : m.clone();
  } else {
    m.convertTo(f, CV_32F);
  }
  const auto* p = f.ptr<float>(0);
  return GrayImage(f.rows, f.cols, std::vector<float>(p, p + f.total()));
}

Grid<std::uint8_t> u8_from_mat(const cv::Mat& m) {
  cv::Mat c = m.isContinuous() ? m : m.clone();
  if (c.type() != CV_8U) throw std::invalid_argument("u8_from_mat: expected CV_8U");
  const auto* p = c.ptr<std::uint8_t>(0);
  return Grid<std::uint8_t>(c.rows, c.cols, std::vector<std::uint8_t>(p, p + c.total()));
}

GrayImage load_image(const std::filesystem::path& path, int target_size) {
  if (target_size <= 0) throw ConfigError("target_size must be positive");
  cv::Mat raw = cv::imread(path.string(), cv::IMREAD_GRAYSCALE | cv::IMREAD_ANYDEPTH);
  if (raw.empty()) throw DataError("cannot decode image " + path.string());
  if (raw.rows == 0 || raw.cols == 0) throw DataError("zero-area image " + path.string());
  const double scale = raw.depth() == CV_16U ? 1.0 / 65535.0 : 1.0 / 255.0;
  cv::Mat f;
  raw.convertTo(f, CV_32F, scale);
  if (f.rows != target_size || f.cols != target_size) {
    cv::Mat r;
    cv::resize(f, r, cv::Size(target_size, target_size), 0, 0, cv::INTER_LINEAR);
    f = r;
  }
  cv::min(cv::max(f, 0.0), 1.0, f);
  return gray_from_mat(f);
}

Grid<std::uint8_t> to_u8(const GrayImage& image) {
  Grid<std::uint8_t> out(image.rows(), image.cols());
  auto src = image.values();
  auto dst = out.values();
  for (std::size_t i = 0; i < src.size(); ++i) {
    dst[i] = static_cast<std::uint8_t>(std::lround(std::clamp(src[i], 0.0f, 1.0f) * 255.0f));
  }
  return out;
}

GrayImage from_u8(const Grid<std::uint8_t>& image) {
  GrayImage out(image.rows(), image.cols());
  auto src = image.values();
  auto dst = out.values();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<float>(src[i]) / 255.0f;
  return out;
}

void save_image(const std::filesystem::path& path, const GrayImage& image) {
  auto q = to_u8(image);
  if (!cv::imwrite(path.string(), as_mat(q))) throw DataError("cannot write " + path.string());
}

LungMask load_mask(const std::filesystem::path& path) {
  cv::Mat raw = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (raw.empty()) throw DataError("cannot decode mask " + path.string());
  return u8_from_mat(raw);
}

void save_mask(const std::filesystem::path& path, const LungMask& mask) {
  if (!cv::imwrite(path.string(), as_mat(mask))) throw DataError("cannot write " + path.string());
}

GrayImage resize_linear(const GrayImage& image, int rows, int cols) {
  if (image.rows() == rows && image.cols() == cols) return image;
  cv::Mat out;
  cv::resize(as_mat(image), out, cv::Size(cols, rows), 0, 0, cv::INTER_LINEAR);
  return gray_from_mat(out);
}

GrayImage resize_area(const GrayImage& image, int rows, int cols) {
  if (image.rows() == rows && image.cols() == cols) return image;
  cv::Mat out;
  cv::resize(as_mat(image), out, cv::Size(cols, rows), 0, 0, cv::INTER_AREA);
  return gray_from_mat(out);
}

LungMask resize_mask(const LungMask& mask, int rows, int cols) {
  GrayImage indicator(mask.rows(), mask.cols());
  auto src = mask.values();
  auto dst = indicator.values();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] == kLung ? 1.0f : 0.0f;
  GrayImage resized = resize_linear(indicator, rows, cols);
  LungMask out(rows, cols);
  auto r = resized.values();
  auto o = out.values();
  for (std::size_t i = 0; i < r.size(); ++i) o[i] = r[i] > 0.5f ? kLung : kBackground;
  return out;
}

}  // namespace pother::core
