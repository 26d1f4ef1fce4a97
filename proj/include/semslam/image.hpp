#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

namespace semslam {

/// Interleaved RGB image, values in [0,1].
struct ImageRGB {
  int width = 0, height = 0;
  std::vector<double> px;  // 3 per pixel, row-major

  ImageRGB() = default;
  ImageRGB(int w, int h) : width(w), height(h), px(static_cast<std::size_t>(w) * h * 3, 0.0) {}

  double* at(int x, int y) { return px.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
  const double* at(int x, int y) const { return px.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
};

/// Depth image in meters; 0 marks a hole.
struct ImageDepth {
  int width = 0, height = 0;
  std::vector<double> v;

  ImageDepth() = default;
  ImageDepth(int w, int h) : width(w), height(h), v(static_cast<std::size_t>(w) * h, 0.0) {}

  double& at(int x, int y) { return v[static_cast<std::size_t>(y) * width + x]; }
  double at(int x, int y) const { return v[static_cast<std::size_t>(y) * width + x]; }
};

/// Per-pixel semantic class ids.
struct ImageLabel {
  int width = 0, height = 0;
  std::vector<std::uint16_t> v;

  ImageLabel() = default;
  ImageLabel(int w, int h) : width(w), height(h), v(static_cast<std::size_t>(w) * h, 0) {}

  std::uint16_t& at(int x, int y) { return v[static_cast<std::size_t>(y) * width + x]; }
  std::uint16_t at(int x, int y) const { return v[static_cast<std::size_t>(y) * width + x]; }
};

}  // namespace semslam
