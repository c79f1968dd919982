#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>

#include "pother/core/grid.hpp"
#include "pother/core/rng.hpp"

namespace fixtures {

namespace fs = std::filesystem;

// Unique scratch directory, removed on destruction.
struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path = fs::temp_directory_path() / ("pother_" + tag + "_" + std::to_string(rd()));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

inline void fill_ellipse(pother::core::LungMask& m, double cy, double cx, double ry, double rx,
                         std::uint8_t code = pother::core::kLung) {
  for (int r = 0; r < m.rows(); ++r) {
    for (int c = 0; c < m.cols(); ++c) {
      const double dy = (r - cy) / ry, dx = (c - cx) / rx;
      if (dy * dy + dx * dx < 1.0) m(r, c) = code;
    }
  }
}

inline pother::core::LungMask disk(int size, double cy, double cx, double radius) {
  pother::core::LungMask m(size, size, 0);
  fill_ellipse(m, cy, cx, radius, radius);
  return m;
}

// Two lung-like ellipses at frame fractions, optionally jittered.
inline pother::core::LungMask two_lungs(int size, pother::core::Rng* rng = nullptr) {
  auto j = [&](double a) { return rng ? pother::core::uniform(*rng, -a, a) : 0.0; };
  pother::core::LungMask m(size, size, 0);
  const double s = size;
  fill_ellipse(m, s * (0.45 + j(0.05)), s * (0.30 + j(0.04)), s * (0.22 + j(0.04)), s * (0.11 + j(0.03)));
  fill_ellipse(m, s * (0.45 + j(0.05)), s * (0.70 + j(0.04)), s * (0.22 + j(0.04)), s * (0.11 + j(0.03)));
  return m;
}

// Upper-tail probability of a chi-square variate with k degrees of freedom (Wilson-Hilferty).
inline double chi_square_sf(double x, double k) {
  const double z = (std::cbrt(x / k) - (1.0 - 2.0 / (9.0 * k))) / std::sqrt(2.0 / (9.0 * k));
  return 0.5 * std::erfc(z / std::sqrt(2.0));
}

}  // namespace fixtures
