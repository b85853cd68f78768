#pragma once

// Gaussian flow: per-Gaussian pixel-shift contributions composited with the
// t1 render's normalized blend weights, and losses/metrics against a
// reference flow.

#include <span>

#include <Eigen/Core>

#include "gflow/image.hpp"
#include "gflow/rasterizer.hpp"

namespace gflow {

/// Dense pixel displacement (+x right, +y down) with a validity mask.
/// Invalid pixels carry zero flow.
struct FlowField {
  int width = 0;
  int height = 0;
  Eigen::Array<double, Eigen::Dynamic, 2, Eigen::RowMajor> flow;
  Mask valid;

  FlowField() = default;
  FlowField(int w, int h) : width(w), height(h), flow(Eigen::Array<double, Eigen::Dynamic, 2, Eigen::RowMajor>::Zero(w * h, 2)), valid(w * h, 0) {}

  int pixels() const { return width * height; }
  bool same_shape(const FlowField& o) const { return width == o.width && height == o.height; }
  Vec2 at(int p) const { return {flow(p, 0), flow(p, 1)}; }
};

enum class FlowNorm { L1, L2 };

/// Default coverage a pixel needs before its flow counts.
inline constexpr double kCoverageThreshold = 0.5;

/// Splats at two timesteps (same Gaussian indexing) plus the t1 render whose
/// top-K buffers address both.
struct DynamicsPair {
  SplatBatch splats_t1;
  SplatBatch splats_t2;
  RenderOutput aux;
};

DynamicsPair make_pair(const GaussianSet& t1, const Camera& cam_t1, const GaussianSet& t2, const Camera& cam_t2,
                       const RenderConfig& cfg);

/// (Sigma_t2 Sigma_t1^-1 - I) offset + (mu_t2 - mu_t1), with offset = x - mu_t1.
Vec2 per_gaussian_flow(const Splat2D& s1, const Splat2D& s2, const Vec2& offset);

/// Sigma_t2 Sigma_t1^-1. Throws DegenerateInput for a singular Sigma_t1.
Mat2 transport(const Mat2& cov_t1, const Mat2& cov_t2);

/// Weighted sum over each pixel's recorded top-K contributors. A pixel is valid
/// when coverage exceeds `coverage_threshold` and every recorded contributor
/// is still projected at t2.
FlowField gaussian_flow(const DynamicsPair& pair, double coverage_threshold = kCoverageThreshold);

/// Translation-only variant: sum_i w_i (mu_t2 - mu_t1).
FlowField gaussian_flow_isotropic(const DynamicsPair& pair, double coverage_threshold = kCoverageThreshold);

/// Mean per-pixel norm of (pred - ref) over pixels valid in both; 0 if none.
double flow_loss(const FlowField& pred, const FlowField& ref, FlowNorm norm = FlowNorm::L1);

/// Mean Euclidean endpoint error over jointly valid pixels, restricted to
/// `mask` when it is non-empty.
double endpoint_error(const FlowField& pred, const FlowField& ref, std::span<const std::uint8_t> mask = {});

/// Pixels whose valid flow magnitude exceeds `threshold` pixels.
Mask dynamic_mask(const FlowField& ref, double threshold = 1.0);

}  // namespace gflow
