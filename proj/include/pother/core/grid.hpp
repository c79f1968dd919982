#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace pother::core {

/// Dense row-major 2-D grid with value semantics.
template <typename T>
class Grid {
 public:
  using value_type = T;

  Grid() = default;
  Grid(int rows, int cols, T fill = T{}) : rows_(rows), cols_(cols) {
    if (rows < 0 || cols < 0) {
      throw std::invalid_argument("Grid: negative extent");
    }
    data_.assign(static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols), fill);
  }
  Grid(int rows, int cols, std::vector<T> data) : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols)) {
      throw std::invalid_argument("Grid: data size does not match extent");
    }
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(int r, int c) { return data_[index(r, c)]; }
  const T& operator()(int r, int c) const { return data_[index(r, c)]; }

  std::size_t index(int r, int c) const {
    return static_cast<std::size_t>(r) * static_cast<std::size_t>(cols_) + static_cast<std::size_t>(c);
  }
  bool contains(int r, int c) const { return r >= 0 && c >= 0 && r < rows_ && c < cols_; }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  friend bool operator==(const Grid&, const Grid&) = default;

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<T> data_;
};

/// Unit-interval intensities.
using GrayImage = Grid<float>;

/// Label codes: 0 background, 255 lung, 1..254 device greys.
using LungMask = Grid<std::uint8_t>;

inline constexpr std::uint8_t kBackground = 0;
inline constexpr std::uint8_t kLung = 255;

inline bool is_binary(const LungMask& mask) {
  for (auto v : mask.values()) {
    if (v != kBackground && v != kLung) return false;
  }
  return true;
}

inline std::size_t count_lung(const LungMask& mask) {
  std::size_t n = 0;
  for (auto v : mask.values()) n += (v == kLung);
  return n;
}

}  // namespace pother::core
