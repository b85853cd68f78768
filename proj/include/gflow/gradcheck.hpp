#pragma once

// Central finite-difference validation of the analytic gradients on small
// random two-timestep scenes.

#include <cstdint>
#include <string>
#include <vector>

#include "gflow/backward.hpp"

namespace gflow {

struct GradcheckOptions {
  int gaussians = 6;
  int width = 32;
  int height = 32;
  double step = 1e-4;
  double tolerance = 1e-4;
  double lambda_flow = 1.0;
  FlowNorm norm = FlowNorm::L1;
  bool isotropic = false;
  /// Larger step used for the Richardson (h vs h/2) self-check of the FD oracle.
  double richardson_step = 1e-3;
};

/// Two timesteps of the same Gaussians, their cameras, photometric targets
/// and a reference flow.
struct GradcheckScene {
  GaussianSet t1, t2;
  Camera cam1, cam2;
  Image target1, target2;
  FlowField reference;
  RenderConfig render;
};

GradcheckScene random_gradcheck_scene(std::uint64_t seed, const GradcheckOptions& opts = {});

enum class GradcheckLoss { Photometric, Flow, Combined };

std::string to_string(GradcheckLoss loss);

struct BlockReport {
  GradcheckLoss loss;
  int timestep;       // 1 or 2
  std::string block;  // mean | rotation | log_scale | opacity_logit | color
  double max_rel_error = 0.0;
  int checked = 0;
  int skipped = 0;  // parameters whose perturbation changed discrete structure
};

struct GradcheckReport {
  std::uint64_t seed = 0;
  std::vector<BlockReport> blocks;
  double max_rel_error = 0.0;
  /// |FD(h) - analytic| / |FD(h/2) - analytic| at `richardson_step`; about 4
  /// for a second-order oracle, 0 when no suitable parameter was found.
  double richardson_ratio = 0.0;

  bool passed(double tolerance) const { return max_rel_error < tolerance; }
};

/// Scalar objective of a gradcheck scene; exposed for tests.
double gradcheck_objective(const GradcheckScene& scene, GradcheckLoss loss, const GradcheckOptions& opts);

/// Analytic gradients of the objective at both timesteps.
FlowGradients gradcheck_analytic(const GradcheckScene& scene, GradcheckLoss loss, const GradcheckOptions& opts);

GradcheckReport gradcheck(const GradcheckScene& scene, const GradcheckOptions& opts = {});
GradcheckReport gradcheck(std::uint64_t seed, const GradcheckOptions& opts = {});

/// Relative error |a - f| / max(|a|, |f|, 1e-6).
double relative_error(double analytic, double numeric);

/// Parameter k (0..13) of a Gaussian in the order mean(3), rotation(4),
/// log_scale(3), opacity_logit, color(3).
double& parameter(Gaussian3D& g, int k);
double parameter(const GaussianGrad& g, int k);
const char* parameter_block(int k);
inline constexpr int kParametersPerGaussian = 14;

}  // namespace gflow
