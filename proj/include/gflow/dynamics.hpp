#pragma once

// 4D Gaussian fields (base set plus per-frame deltas), synthetic scenes with
// analytic reference flow, the photometric + flow objective, and an Adam
// fitting loop.

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include <Eigen/Core>

#include "gflow/backward.hpp"
#include "gflow/flow.hpp"
#include "gflow/gaussian.hpp"
#include "gflow/image.hpp"
#include "gflow/rasterizer.hpp"

namespace gflow {

/// Offsets of one Gaussian at one frame relative to the base.
struct FrameDelta {
  Vec3 mean = Vec3::Zero();
  /// Composed as rotation * base.rotation, then renormalized.
  Quat rotation = identity_quat<double>();
  Vec3 log_scale = Vec3::Zero();
};

/// base is frame 0; deltas[k - 1][i] moves Gaussian i to frame k (k = 1..T).
/// Opacity and color are shared by all frames.
struct DynamicField {
  GaussianSet base;
  std::vector<std::vector<FrameDelta>> deltas;

  int frames() const { return static_cast<int>(deltas.size()) + 1; }
  int last_frame() const { return static_cast<int>(deltas.size()); }
  std::size_t size() const { return base.size(); }

  /// Static field over frames 0..last_frame.
  static DynamicField still(GaussianSet base, int last_frame);
  void validate() const;
};

/// Gaussian set at `frame`; frame 0 is the base, bit for bit.
GaussianSet field_at(const DynamicField& field, int frame);

/// Gradient of a scalar with respect to every parameter of a DynamicField.
struct FieldGradient {
  ParamGradients base;
  /// Same layout as DynamicField::deltas.
  std::vector<std::vector<GaussianGrad>> deltas;  // only mean, rotation, log_scale used

  static FieldGradient zeros_like(const DynamicField& field);
  bool all_finite() const;
};

/// One view of a sequence: T + 1 frames and T forward flows (k -> k + 1).
struct SceneSequence {
  std::vector<Image> frames;
  std::vector<FlowField> flows;
  std::vector<Camera> cameras;
  /// Optional per-frame photometric masks; empty means every pixel counts.
  std::vector<Mask> masks;

  int last_frame() const { return static_cast<int>(frames.size()) - 1; }
  void validate() const;
};

/// Closed-form motion of a cluster at frame k about `pivot`:
/// x_k = pivot + exp(scale_rate k) R_z(angular_velocity k) (x_0 - pivot) + velocity k.
struct ClusterMotion {
  Vec3 velocity = Vec3::Zero();  // world units per frame; keep z = 0 for exact affine flow
  double angular_velocity = 0.0;  // radians per frame about the camera axis
  double scale_rate = 0.0;        // log scale change per frame
  std::optional<Vec3> pivot;      // defaults to the cluster center
};

/// Flat (fronto-parallel) cluster of Gaussians.
struct ClusterSpec {
  Vec3 center = Vec3(0, 0, 4);
  int count = 8;
  /// Means are uniform in center +- spread (x, y).
  Vec2 spread = Vec2(0.3, 0.3);
  double scale = 0.08;
  double scale_jitter = 0.3;  // relative, per axis
  double opacity = 0.9;
  Vec3 color = Vec3(0.8, 0.3, 0.2);
  double color_jitter = 0.1;
  ClusterMotion motion;
};

struct SceneSpec {
  int width = 64;
  int height = 64;
  double focal = 64.0;
  int last_frame = 3;
  /// Camera centers; every camera looks along +z with no roll.
  std::vector<Vec3> cameras = {Vec3::Zero()};
  RenderConfig render;
  std::vector<ClusterSpec> clusters;
  /// World-space thickness of every Gaussian along z.
  double thickness = 1e-6;

  void validate() const;
};

struct GeneratedScene {
  DynamicField truth;
  std::vector<SceneSequence> views;  // one per camera
  /// Cluster of every Gaussian.
  std::vector<int> cluster_of;
};

GeneratedScene generate_scene(const SceneSpec& spec, std::uint64_t seed);

/// Maximum distance of any base mean from the mean centroid (at least 1e-3).
double scene_extent(const GaussianSet& set);

struct LearningRates {
  double mean = 1.6e-4;  // multiplied by the scene extent in fit
  double rotation = 1e-3;
  double log_scale = 5e-3;
  double opacity = 5e-2;
  double color = 2.5e-3;
  /// Each block's rate decays exponentially to `final_ratio` times its
  /// initial value at the last iteration.
  double mean_final_ratio = 0.01;
  double final_ratio = 1.0;
};

struct TrainConfig {
  int iterations = 600;
  LearningRates lr;
  bool scale_mean_lr_by_extent = true;
  double lambda_flow = 1.0;
  double lambda_other = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 0;
  FlowNorm norm = FlowNorm::L1;
  bool isotropic = false;
  bool detach_weights = false;
  /// Coverage a fitted pixel needs for its Gaussian flow to enter the loss.
  double flow_coverage_threshold = kCoverageThreshold;
  RenderConfig render;
  /// Views whose flows supervise the flow term. Empty: all views.
  std::vector<int> flow_views;
  /// Views used at all. Empty: all views.
  std::vector<int> train_views;

  void validate() const;
};

struct LossBreakdown {
  double photometric = 0.0;
  double flow = 0.0;
  double other = 0.0;
  double total = 0.0;
};

/// Objective of one view at frame k: MSE(k) + lambda_flow flow(k -> k+1)
/// (omitted at the last frame) + lambda_other |deltas(k)|^2.
LossBreakdown total_loss(const DynamicField& field, const SceneSequence& seq, int frame, const TrainConfig& cfg);

/// Mean of total_loss over the training views and every frame 0..T.
LossBreakdown objective(const DynamicField& field, const std::vector<SceneSequence>& views, const TrainConfig& cfg);

struct ObjectiveGradient {
  LossBreakdown loss;
  FieldGradient grad;
};

ObjectiveGradient objective_gradient(const DynamicField& field, const std::vector<SceneSequence>& views,
                                     const TrainConfig& cfg);

/// Flat parameter vector: per Gaussian mean, rotation, log_scale, opacity
/// logit, color (14), then per frame and Gaussian the delta mean, rotation,
/// log_scale (10).
Eigen::VectorXd pack(const DynamicField& field);
void unpack(const Eigen::VectorXd& x, DynamicField& field);
Eigen::VectorXd pack(const FieldGradient& grad);
/// Per-entry learning rates in the pack() layout at `iteration`.
Eigen::VectorXd learning_rates(const DynamicField& field, const TrainConfig& cfg, int iteration = 0);

class Adam {
 public:
  Adam(Eigen::VectorXd lr, double beta1, double beta2, double epsilon);
  void step(Eigen::VectorXd& x, const Eigen::VectorXd& g);
  void set_learning_rates(Eigen::VectorXd lr);
  int steps() const { return t_; }

 private:
  Eigen::VectorXd lr_, m_, v_;
  double beta1_, beta2_, epsilon_;
  int t_ = 0;
};

struct LossRecord {
  int iteration = 0;
  LossBreakdown loss;
};

struct FitResult {
  DynamicField field;
  /// Loss at the start of every iteration (before its update).
  std::vector<LossRecord> log;
  /// Loss of the returned field.
  LossBreakdown final_loss;
};

/// Called after every update with (iteration, loss before the update, field after it).
using FitCallback = std::function<void(int, const LossBreakdown&, const DynamicField&)>;

/// Full-batch Adam on every parameter block. Throws DivergenceError on a
/// non-finite loss or gradient.
FitResult fit(const std::vector<SceneSequence>& views, DynamicField init, const TrainConfig& cfg,
              const FitCallback& callback = {});

/// Standard deviations of the base perturbation applied by initialize_field.
struct InitNoise {
  double mean = 0.0;
  double rotation = 0.0;   // radians about a random axis
  double log_scale = 0.0;  // x and y axes only
  double opacity_logit = 0.0;
  double color = 0.0;
};

/// Perturbed copy of `truth`'s base with identity deltas over the same frames.
DynamicField initialize_field(const DynamicField& truth, const InitNoise& noise, std::uint64_t seed);

/// Mean over Gaussians and consecutive frame pairs of the difference between
/// the projected mean displacements of `fitted` and `truth` in `cam` (pixels).
/// Gaussians culled in either field are skipped.
double motion_endpoint_error(const DynamicField& fitted, const DynamicField& truth, const Camera& cam,
                             double near = kDefaultNear);

struct EvalReport {
  double psnr = 0.0;
  /// Over pixels whose reference flow exceeds 1 px (frames 0..T-1).
  double psnr_dynamic = 0.0;
  /// Gaussian flow vs reference flow over jointly valid pixels.
  double epe = 0.0;
  double epe_dynamic = 0.0;
  long dynamic_pixels = 0;
};

/// Metrics of `field` on `views` (pooled over views and frames).
EvalReport evaluate(const DynamicField& field, const std::vector<SceneSequence>& views, const RenderConfig& render,
                    bool isotropic = false);

/// 10 log10(1 / mse); +inf for mse == 0.
double psnr_from_mse(double mse);

}  // namespace gflow
