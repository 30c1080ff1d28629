#pragma once

#include <cstdint>
#include <vector>

#include "mted/error.hpp"

namespace mted {

// Row-major 2-D grid with optional interleaved channels.
template <class T>
struct Grid {
  int rows = 0;
  int cols = 0;
  int channels = 1;
  std::vector<T> data;

  Grid() = default;
  Grid(int r, int c, int ch = 1, T fill = T{})
      : rows(r), cols(c), channels(ch), data(static_cast<size_t>(r) * c * ch, fill) {}

  T& at(int r, int c, int ch = 0) { return data[(static_cast<size_t>(r) * cols + c) * channels + ch]; }
  const T& at(int r, int c, int ch = 0) const {
    return data[(static_cast<size_t>(r) * cols + c) * channels + ch];
  }
  bool contains(int r, int c) const { return r >= 0 && r < rows && c >= 0 && c < cols; }
  bool same_extent(int r, int c) const { return rows == r && cols == c; }
  bool operator==(const Grid&) const = default;
};

using Image = Grid<float>;      // H x W x 3, values in [0, 1]
using DepthMap = Grid<float>;   // H x W, camera-frame z in meters, 0 where empty
using Mask = Grid<uint8_t>;     // values in {0, 1}

}  // namespace mted
