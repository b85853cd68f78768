#pragma once

// Tile-based forward renderer with per-pixel top-K auxiliary buffers, plus a
// brute-force reference renderer with the same output contract.

#include <optional>
#include <vector>

#include <Eigen/Core>

#include "gflow/gaussian.hpp"
#include "gflow/image.hpp"

namespace gflow {

/// Per-contributor alpha is clamped to this before compositing.
inline constexpr double kAlphaClamp = 0.99;

struct RenderConfig {
  int tile_size = 16;
  int top_k = 20;
  double alpha_threshold = 1.0 / 255.0;
  double transmittance_floor = 1e-4;
  Vec3 background = Vec3::Zero();
  double near = kDefaultNear;
  /// Rasterizer workers; 1 = serial, 0 = all hardware threads.
  int threads = 1;

  void validate() const;
};

/// Splats aligned index-for-index with the source GaussianSet; culled
/// Gaussians are empty entries.
struct SplatBatch {
  std::vector<std::optional<Splat2D>> splats;

  std::size_t size() const { return splats.size(); }
};

using RowMatrixXi = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatrixXd = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr int kNoGaussian = -1;

struct RenderOutput {
  int width = 0;
  int height = 0;
  int top_k = 0;
  Image image;
  /// (H*W) x K, Gaussian index per slot or kNoGaussian. Slots are in depth order.
  RowMatrixXi topk_index;
  /// (H*W) x K, T_i alpha_i normalized over the recorded slots.
  RowMatrixXd topk_weight;
  /// (H*W) x 2K, interleaved (dx, dy) = pixel center - splat mean.
  RowMatrixXd topk_offset;
  /// Sum of T_i alpha_i over every composited contributor.
  Eigen::VectorXd coverage;
  /// Transmittance left after the last composited contributor.
  Eigen::VectorXd transmittance;
  /// Number of composited contributors (may exceed K).
  Eigen::VectorXi contributors;

  Eigen::Vector2d offset(int pixel, int slot) const {
    return {topk_offset(pixel, 2 * slot), topk_offset(pixel, 2 * slot + 1)};
  }
};

SplatBatch project_all(const GaussianSet& set, const Camera& cam, double near = kDefaultNear);

/// o * exp(-1/2 (x - mu)^T Sigma^-1 (x - mu)), unclamped.
double alpha_at(const Splat2D& s, const Vec2& x);

/// Conic (inverse covariance) of a 2D covariance. Throws DegenerateInput
/// when the matrix is not positive definite.
Mat2 conic_of(const Mat2& cov);

/// Per-tile splat lists (tile id = ty * tiles_x + tx) sorted by ascending
/// depth, ties by Gaussian index.
std::vector<std::vector<int>> tile_bin(const SplatBatch& splats, const RenderConfig& cfg, const Camera& cam);

/// Number of tiles along x and y for a camera.
Eigen::Vector2i tile_grid(const RenderConfig& cfg, const Camera& cam);

RenderOutput render(const GaussianSet& set, const Camera& cam, const RenderConfig& cfg);
RenderOutput render(const SplatBatch& splats, const Camera& cam, const RenderConfig& cfg);

/// Reference renderer: global depth sort, every pixel visits every splat.
RenderOutput render_bruteforce(const GaussianSet& set, const Camera& cam, const RenderConfig& cfg);
RenderOutput render_bruteforce(const SplatBatch& splats, const Camera& cam, const RenderConfig& cfg);

/// Splat indices sorted by (depth, index), culled entries dropped.
std::vector<int> depth_order(const SplatBatch& splats);

namespace detail {

/// Precomputed per-splat quantities shared by every compositing path.
struct SplatEval {
  Vec2 mean;
  double conic_xx = 0, conic_xy = 0, conic_yy = 0;
  double opacity = 0;

  double power(const Vec2& d) const {
    return -0.5 * (conic_xx * d.x() * d.x() + conic_yy * d.y() * d.y()) - conic_xy * d.x() * d.y();
  }
};

std::vector<std::optional<SplatEval>> prepare(const SplatBatch& splats);

}  // namespace detail

}  // namespace gflow
