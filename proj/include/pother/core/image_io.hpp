#pragma once

#include <filesystem>

#include <opencv2/core.hpp>

#include "pother/core/grid.hpp"

namespace pother::core {

/// Decodes an 8/16-bit image as grayscale, resizes it to target_size x target_size with linear
/// interpolation (aspect ratio is not preserved) and scales intensities to [0, 1].
GrayImage load_image(const std::filesystem::path& path, int target_size);

/// Writes an 8-bit PNG; values are clamped to [0, 1] and rounded to the nearest level.
void save_image(const std::filesystem::path& path, const GrayImage& image);

/// Reads a label mask without resampling.
LungMask load_mask(const std::filesystem::path& path);
void save_mask(const std::filesystem::path& path, const LungMask& mask);

/// Linear resize with half-pixel centres.
GrayImage resize_linear(const GrayImage& image, int rows, int cols);
/// Area-averaging resize; used for anti-aliased downsampling.
GrayImage resize_area(const GrayImage& image, int rows, int cols);

/// Resamples the lung indicator (code 255) linearly and re-binarizes with a strict > 0.5 rule.
/// Grey codes are treated as background.
LungMask resize_mask(const LungMask& mask, int rows, int cols);

/// Quantizes to 8 bits (round to nearest).
Grid<std::uint8_t> to_u8(const GrayImage& image);
GrayImage from_u8(const Grid<std::uint8_t>& image);

/// Non-owning OpenCV header over grid storage.
inline cv::Mat as_mat(GrayImage& g) { return cv::Mat(g.rows(), g.cols(), CV_32F, g.data()); }
inline cv::Mat as_mat(const GrayImage& g) {
  return cv::Mat(g.rows(), g.cols(), CV_32F, const_cast<float*>(g.data()));
}
inline cv::Mat as_mat(Grid<std::uint8_t>& g) { return cv::Mat(g.rows(), g.cols(), CV_8U, g.data()); }
inline cv::Mat as_mat(const Grid<std::uint8_t>& g) {
  return cv::Mat(g.rows(), g.cols(), CV_8U, const_cast<std::uint8_t*>(g.data()));
}

GrayImage gray_from_mat(const cv::Mat& m);
Grid<std::uint8_t> u8_from_mat(const cv::Mat& m);

}  // namespace pother::core
