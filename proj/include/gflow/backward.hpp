#pragma once

// Analytic gradients of the photometric and flow losses with respect to
// every Gaussian parameter. Discrete structure (depth order, tile and top-K
// membership, the alpha threshold, the coverage mask) is held constant.

#include <vector>

#include "gflow/flow.hpp"
#include "gflow/gaussian.hpp"
#include "gflow/image.hpp"
#include "gflow/rasterizer.hpp"

namespace gflow {

struct GaussianGrad {
  Vec3 mean = Vec3::Zero();
  Quat rotation = Quat::Zero();
  Vec3 log_scale = Vec3::Zero();
  double opacity_logit = 0.0;
  Vec3 color = Vec3::Zero();

  GaussianGrad& operator+=(const GaussianGrad& o);
  GaussianGrad& operator*=(double s);
  bool all_finite() const;
};

/// Aligned with the GaussianSet the gradients belong to.
using ParamGradients = std::vector<GaussianGrad>;

ParamGradients operator+(ParamGradients a, const ParamGradients& b);
ParamGradients operator*(double s, ParamGradients a);

/// Gradient with respect to one projected splat.
struct SplatGrad {
  Vec2 mean2d = Vec2::Zero();
  Mat2 cov2d = Mat2::Zero();
  double opacity = 0.0;  // activated opacity, not the logit
  Vec3 color = Vec3::Zero();
};

using SplatGradients = std::vector<SplatGrad>;

struct ImageLoss {
  double value = 0.0;
  Image grad;
};

/// Mean squared error over pixels and channels (restricted to `mask` if non-empty).
ImageLoss photometric_mse(const Image& rendered, const Image& target, std::span<const std::uint8_t> mask = {});

struct FlowLoss {
  double value = 0.0;
  FlowField grad;  // dL/dflow; zero outside the jointly valid set
};

/// flow_loss plus its (sub)gradient. Per-component L1 residuals with
/// |r| <= kFlowSubgradientDeadzone count as exactly zero.
FlowLoss flow_loss_grad(const FlowField& pred, const FlowField& ref, FlowNorm norm = FlowNorm::L1);

inline constexpr double kFlowSubgradientDeadzone = 1e-9;

SplatGradients backward_render(const SplatBatch& splats, const Camera& cam, const RenderConfig& cfg,
                               const Image& dl_dimage);
ParamGradients backward_render(const GaussianSet& set, const Camera& cam, const RenderConfig& cfg,
                               const Image& dl_dimage);

struct FlowBackwardOptions {
  /// Treat the normalized weights w_i as constants.
  bool detach_weights = false;
  /// Differentiate the translation-only flow instead of the full one.
  bool isotropic = false;
  double coverage_threshold = kCoverageThreshold;
  int threads = 1;
};

struct SplatFlowGradients {
  SplatGradients t1;
  SplatGradients t2;
};

SplatFlowGradients backward_flow(const DynamicsPair& pair, const FlowField& dl_dflow, const FlowBackwardOptions& opts = {});

struct FlowGradients {
  ParamGradients t1;
  ParamGradients t2;
};

/// Rebuilds the pair from (set, camera) at both timesteps and chains the
/// splat gradients back to Gaussian parameters.
FlowGradients backward_flow(const GaussianSet& set_t1, const Camera& cam_t1, const GaussianSet& set_t2,
                            const Camera& cam_t2, const RenderConfig& cfg, const FlowField& dl_dflow,
                            const FlowBackwardOptions& opts = {});

/// Chain rule from splat gradients through projection, covariance
/// construction, the quaternion normalization and the opacity sigmoid.
ParamGradients to_param_gradients(const GaussianSet& set, const Camera& cam, const SplatGradients& grads,
                                  double near = kDefaultNear);

}  // namespace gflow
