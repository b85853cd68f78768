#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Core>

namespace gflow {

/// Linear RGB image, row-major; pixel (r, c) lives at row r * width + c of `rgb`.
struct Image {
  int width = 0;
  int height = 0;
  Eigen::Array<double, Eigen::Dynamic, 3, Eigen::RowMajor> rgb;

  Image() = default;
  Image(int w, int h, const Eigen::Vector3d& fill = Eigen::Vector3d::Zero()) : width(w), height(h), rgb(w * h, 3) {
    rgb.rowwise() = fill.transpose().array();
  }

  int pixels() const { return width * height; }
  bool same_shape(const Image& o) const { return width == o.width && height == o.height; }
};

/// One byte per pixel, nonzero = set.
using Mask = std::vector<std::uint8_t>;

/// Pixel-center convention: pixel (r, c) sits at (c + 0.5, r + 0.5).
inline Eigen::Vector2d pixel_center(int r, int c) { return {c + 0.5, r + 0.5}; }

}  // namespace gflow
