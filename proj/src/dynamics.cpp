#include "gflow/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <string>

#include <Eigen/LU>

#include "gflow/error.hpp"
#include "gflow/parallel.hpp"

namespace gflow {

// ---------------------------------------------------------------------------
// Field representation

DynamicField DynamicField::still(GaussianSet base, int last_frame) {
  if (last_frame < 0) throw ContractError("DynamicField: last frame must be non-negative");
  DynamicField f;
  f.deltas.assign(last_frame, std::vector<FrameDelta>(base.size()));
  f.base = std::move(base);
  return f;
}

void DynamicField::validate() const {
  for (const auto& frame : deltas)
    if (frame.size() != base.size()) throw ContractError("DynamicField: delta count does not match the base");
}

GaussianSet field_at(const DynamicField& field, int frame) {
  if (frame < 0 || frame > field.last_frame())
    throw ContractError("field_at: frame " + std::to_string(frame) + " outside [0, " +
                        std::to_string(field.last_frame()) + "]");
  if (frame == 0) return field.base;
  const auto& deltas = field.deltas[frame - 1];
  if (deltas.size() != field.base.size()) throw ContractError("field_at: delta count does not match the base");
  GaussianSet out = field.base;
  for (std::size_t i = 0; i < out.size(); ++i) {
    Gaussian3D& g = out[i];
    const FrameDelta& d = deltas[i];
    g.mean += d.mean;
    const Quat q = quat_multiply(d.rotation, g.rotation);
    const double n = q.norm();
    if (!(n > 0.0)) throw DegenerateInput("field_at: composed rotation has zero norm");
    g.rotation = q / n;
    g.log_scale += d.log_scale;
  }
  return out;
}

FieldGradient FieldGradient::zeros_like(const DynamicField& field) {
  FieldGradient g;
  g.base.assign(field.size(), GaussianGrad{});
  g.deltas.assign(field.deltas.size(), std::vector<GaussianGrad>(field.size()));
  return g;
}

bool FieldGradient::all_finite() const {
  for (const auto& g : base)
    if (!g.all_finite()) return false;
  for (const auto& frame : deltas)
    for (const auto& g : frame)
      if (!g.all_finite()) return false;
  return true;
}

namespace {

// a * b = left(a) b = right(b) a.
Eigen::Matrix4d left_product(const Quat& a) {
  Eigen::Matrix4d m;
  m << a[0], -a[1], -a[2], -a[3],  //
      a[1], a[0], -a[3], a[2],     //
      a[2], a[3], a[0], -a[1],     //
      a[3], -a[2], a[1], a[0];
  return m;
}

Eigen::Matrix4d right_product(const Quat& b) {
  Eigen::Matrix4d m;
  m << b[0], -b[1], -b[2], -b[3],  //
      b[1], b[0], b[3], -b[2],     //
      b[2], -b[3], b[0], b[1],     //
      b[3], b[2], -b[1], b[0];
  return m;
}

// Adds the gradient with respect to the Gaussians of `frame` into `out`.
void chain_frame(const DynamicField& field, int frame, const ParamGradients& g, FieldGradient& out) {
  for (std::size_t i = 0; i < g.size(); ++i) {
    GaussianGrad& b = out.base[i];
    b.mean += g[i].mean;
    b.log_scale += g[i].log_scale;
    b.opacity_logit += g[i].opacity_logit;
    b.color += g[i].color;
    if (frame == 0) {
      b.rotation += g[i].rotation;
      continue;
    }
    GaussianGrad& d = out.deltas[frame - 1][i];
    d.mean += g[i].mean;
    d.log_scale += g[i].log_scale;
    const Quat& dq = field.deltas[frame - 1][i].rotation;
    const Quat& qb = field.base[i].rotation;
    const Quat raw = quat_multiply(dq, qb);
    const double n = raw.norm();
    const Quat u = raw / n;
    const Quat graw = (g[i].rotation - u * u.dot(g[i].rotation)) / n;
    d.rotation += right_product(qb).transpose() * graw;
    b.rotation += left_product(dq).transpose() * graw;
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Sequences and synthetic scenes

void SceneSequence::validate() const {
  if (frames.empty()) throw ContractError("SceneSequence: no frames");
  if (cameras.size() != frames.size()) throw ContractError("SceneSequence: one camera per frame required");
  if (flows.size() + 1 != frames.size()) throw ContractError("SceneSequence: expected one flow per frame pair");
  if (!masks.empty() && masks.size() != frames.size()) throw ContractError("SceneSequence: mask count mismatch");
  for (std::size_t k = 0; k < frames.size(); ++k) {
    const Image& f = frames[k];
    if (f.width != cameras[k].width || f.height != cameras[k].height)
      throw ContractError("SceneSequence: frame and camera dimensions differ");
    if (!f.same_shape(frames[0])) throw ContractError("SceneSequence: frames have different dimensions");
    if (!masks.empty() && masks[k].size() != static_cast<std::size_t>(f.pixels()))
      throw ContractError("SceneSequence: mask has the wrong size");
  }
  for (const FlowField& fl : flows)
    if (fl.width != frames[0].width || fl.height != frames[0].height)
      throw ContractError("SceneSequence: flow and frame dimensions differ");
}

void SceneSpec::validate() const {
  if (width <= 0 || height <= 0) throw ConfigError("scene: width and height must be positive");
  if (!(focal > 0.0)) throw ConfigError("scene: focal length must be positive");
  if (last_frame < 0) throw ConfigError("scene: last_frame must be non-negative");
  if (cameras.empty()) throw ConfigError("scene: at least one camera is required");
  if (!(thickness > 0.0)) throw ConfigError("scene: thickness must be positive");
  for (const ClusterSpec& c : clusters) {
    if (c.count < 0) throw ConfigError("scene: cluster count must be non-negative");
    if (!(c.scale > 0.0)) throw ConfigError("scene: cluster scale must be positive");
    if (!(c.opacity > 0.0 && c.opacity < 1.0)) throw ConfigError("scene: cluster opacity must lie in (0, 1)");
    if (c.scale_jitter < 0.0 || c.scale_jitter >= 1.0) throw ConfigError("scene: scale_jitter must lie in [0, 1)");
  }
  render.validate();
}

namespace {

struct ClusterPose {
  Vec3 pivot;
  double scale;
  Mat3 rotation;
  Vec3 shift;

  Vec3 apply(const Vec3& x) const { return pivot + scale * (rotation * (x - pivot)) + shift; }
};

ClusterPose pose_at(const ClusterSpec& c, int frame) {
  const double k = frame;
  return {c.motion.pivot.value_or(c.center), std::exp(c.motion.scale_rate * k),
          quat_to_rotation(axis_angle_quat(Vec3(0, 0, 1), c.motion.angular_velocity * k)), c.motion.velocity * k};
}

// Image-space affine map of a cluster between two frames, from three plane points.
struct Affine2 {
  Mat2 a = Mat2::Identity();
  Vec2 b = Vec2::Zero();
};

Vec2 image_of(const Vec3& world, const Camera& cam) { return pinhole(cam.to_camera(world), cam); }

Affine2 cluster_affine(const ClusterSpec& c, int frame, const Camera& cam_a, const Camera& cam_b) {
  const ClusterPose pa = pose_at(c, frame), pb = pose_at(c, frame + 1);
  const Vec3 base[3] = {c.center, c.center + Vec3(1, 0, 0), c.center + Vec3(0, 1, 0)};
  Vec2 from[3], to[3];
  for (int i = 0; i < 3; ++i) {
    from[i] = image_of(pa.apply(base[i]), cam_a);
    to[i] = image_of(pb.apply(base[i]), cam_b);
  }
  Mat2 df, dt;
  df << from[1] - from[0], from[2] - from[0];
  dt << to[1] - to[0], to[2] - to[0];
  Affine2 m;
  m.a = dt * df.inverse();
  m.b = to[0] - m.a * from[0];
  return m;
}

}  // namespace

GeneratedScene generate_scene(const SceneSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> sym(-1.0, 1.0);

  GeneratedScene out;
  GaussianSet base;
  for (std::size_t ci = 0; ci < spec.clusters.size(); ++ci) {
    const ClusterSpec& c = spec.clusters[ci];
    for (int j = 0; j < c.count; ++j) {
      Gaussian3D g;
      g.mean = c.center + Vec3(c.spread.x() * sym(rng), c.spread.y() * sym(rng), 0.0);
      g.rotation = axis_angle_quat(Vec3(0, 0, 1), std::numbers::pi * sym(rng));
      g.log_scale = Vec3(std::log(c.scale * (1.0 + c.scale_jitter * sym(rng))),
                         std::log(c.scale * (1.0 + c.scale_jitter * sym(rng))), std::log(spec.thickness));
      g.opacity_logit = logit(c.opacity);
      for (int ch = 0; ch < 3; ++ch) g.color[ch] = std::clamp(c.color[ch] + c.color_jitter * sym(rng), 0.0, 1.0);
      base.push_back(g);
      out.cluster_of.push_back(static_cast<int>(ci));
    }
  }

  out.truth = DynamicField::still(base, spec.last_frame);
  for (int k = 1; k <= spec.last_frame; ++k) {
    for (std::size_t i = 0; i < base.size(); ++i) {
      const ClusterSpec& c = spec.clusters[out.cluster_of[i]];
      const ClusterPose pose = pose_at(c, k);
      FrameDelta& d = out.truth.deltas[k - 1][i];
      d.mean = pose.apply(base[i].mean) - base[i].mean;
      d.rotation = axis_angle_quat(Vec3(0, 0, 1), c.motion.angular_velocity * k);
      const double ls = c.motion.scale_rate * k;
      d.log_scale = Vec3(ls, ls, 0.0);
    }
  }

  std::vector<GaussianSet> sets;
  for (int k = 0; k <= spec.last_frame; ++k) sets.push_back(field_at(out.truth, k));

  for (const Vec3& center : spec.cameras) {
    const Camera cam = Camera::at(center, Mat3::Identity(), spec.focal, spec.width, spec.height);
    SceneSequence seq;
    std::vector<RenderOutput> renders;
    for (int k = 0; k <= spec.last_frame; ++k) {
      renders.push_back(render(sets[k], cam, spec.render));
      seq.frames.push_back(renders.back().image);
      seq.cameras.push_back(cam);
    }
    for (int k = 0; k < spec.last_frame; ++k) {
      std::vector<Affine2> maps;
      for (const ClusterSpec& c : spec.clusters) maps.push_back(cluster_affine(c, k, cam, cam));
      const RenderOutput& aux = renders[k];
      FlowField flow(spec.width, spec.height);
      for (int p = 0; p < flow.pixels(); ++p) {
        if (!(aux.coverage[p] > kCoverageThreshold)) continue;
        const int r = p / spec.width, col = p % spec.width;
        const Vec2 x = pixel_center(r, col);
        Vec2 f = Vec2::Zero();
        for (int s = 0; s < aux.top_k; ++s) {
          const int id = aux.topk_index(p, s);
          if (id == kNoGaussian) break;
          const Affine2& m = maps[out.cluster_of[id]];
          f += aux.topk_weight(p, s) * (m.a * x + m.b - x);
        }
        flow.flow.row(p) = f.transpose().array();
        flow.valid[p] = 1;
      }
      seq.flows.push_back(std::move(flow));
    }
    out.views.push_back(std::move(seq));
  }
  return out;
}

double scene_extent(const GaussianSet& set) {
  if (set.empty()) return 1e-3;
  Vec3 centroid = Vec3::Zero();
  for (const auto& g : set) centroid += g.mean;
  centroid /= static_cast<double>(set.size());
  double r = 0.0;
  for (const auto& g : set) r = std::max(r, (g.mean - centroid).norm());
  return std::max(r, 1e-3);
}

// ---------------------------------------------------------------------------
// Objective

void TrainConfig::validate() const {
  if (iterations < 0) throw ConfigError("train: iterations must be non-negative");
  if (!(lambda_flow >= 0.0)) throw ConfigError("train: lambda_flow must be non-negative");
  if (!(lambda_other >= 0.0)) throw ConfigError("train: lambda_other must be non-negative");
  for (const double lr_value : {lr.mean, lr.rotation, lr.log_scale, lr.opacity, lr.color, lr.mean_final_ratio,
                                lr.final_ratio})
    if (!(lr_value > 0.0)) throw ConfigError("train: learning rates must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("train: Adam betas must lie in [0, 1)");
  if (!(epsilon > 0.0)) throw ConfigError("train: epsilon must be positive");
  if (!(flow_coverage_threshold >= 0.0 && flow_coverage_threshold < 1.0))
    throw ConfigError("train: flow_coverage_threshold must lie in [0, 1)");
  render.validate();
}

namespace {

std::vector<int> resolve_views(const std::vector<int>& chosen, std::size_t count) {
  std::vector<int> out;
  if (chosen.empty()) {
    for (std::size_t v = 0; v < count; ++v) out.push_back(static_cast<int>(v));
    return out;
  }
  for (const int v : chosen) {
    if (v < 0 || static_cast<std::size_t>(v) >= count) throw ConfigError("train: view index out of range");
    out.push_back(v);
  }
  return out;
}

bool uses_flow(const TrainConfig& cfg, int view) {
  return cfg.flow_views.empty() || std::find(cfg.flow_views.begin(), cfg.flow_views.end(), view) != cfg.flow_views.end();
}

double delta_penalty(const DynamicField& field, int frame) {
  if (frame == 0 || field.size() == 0) return 0.0;
  double sum = 0.0;
  for (const FrameDelta& d : field.deltas[frame - 1])
    sum += d.mean.squaredNorm() + (d.rotation - identity_quat<double>()).squaredNorm() + d.log_scale.squaredNorm();
  return sum / static_cast<double>(field.size());
}

std::span<const std::uint8_t> mask_of(const SceneSequence& seq, int frame) {
  if (seq.masks.empty()) return {};
  return seq.masks[frame];
}

FlowField predict(const DynamicsPair& pair, const TrainConfig& cfg) {
  return cfg.isotropic ? gaussian_flow_isotropic(pair, cfg.flow_coverage_threshold)
                       : gaussian_flow(pair, cfg.flow_coverage_threshold);
}

SplatGradients add(SplatGradients a, const SplatGradients& b) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i].mean2d += b[i].mean2d;
    a[i].cov2d += b[i].cov2d;
    a[i].opacity += b[i].opacity;
    a[i].color += b[i].color;
  }
  return a;
}

struct FrameTerm {
  LossBreakdown loss;
  ParamGradients at_frame;  // gradient w.r.t. Gaussians of frame k
  ParamGradients at_next;   // gradient w.r.t. Gaussians of frame k + 1 (flow term)
};

// One (view, frame) term of the objective with optional gradients.
FrameTerm frame_term(const std::vector<GaussianSet>& sets, const SceneSequence& seq, int k, bool flow_on,
                     const TrainConfig& cfg, const RenderConfig& rc, bool want_grad) {
  FrameTerm out;
  const Camera& cam = seq.cameras[k];
  DynamicsPair pair;
  pair.splats_t1 = project_all(sets[k], cam, rc.near);
  pair.aux = render(pair.splats_t1, cam, rc);
  const ImageLoss photo = photometric_mse(pair.aux.image, seq.frames[k], mask_of(seq, k));
  out.loss.photometric = photo.value;
  if (!want_grad) {
    if (flow_on && k < seq.last_frame()) {
      pair.splats_t2 = project_all(sets[k + 1], seq.cameras[k + 1], rc.near);
      out.loss.flow = flow_loss(predict(pair, cfg), seq.flows[k], cfg.norm);
    }
    return out;
  }
  SplatGradients g1 = backward_render(pair.splats_t1, cam, rc, photo.grad);
  if (flow_on && k < seq.last_frame()) {
    pair.splats_t2 = project_all(sets[k + 1], seq.cameras[k + 1], rc.near);
    const FlowLoss fl = flow_loss_grad(predict(pair, cfg), seq.flows[k], cfg.norm);
    out.loss.flow = fl.value;
    if (cfg.lambda_flow > 0.0) {
      FlowBackwardOptions fo;
      fo.detach_weights = cfg.detach_weights;
      fo.isotropic = cfg.isotropic;
      fo.coverage_threshold = cfg.flow_coverage_threshold;
      fo.threads = rc.threads;
      SplatFlowGradients fg = backward_flow(pair, fl.grad, fo);
      for (auto& s : fg.t1) {
        s.mean2d *= cfg.lambda_flow;
        s.cov2d *= cfg.lambda_flow;
        s.opacity *= cfg.lambda_flow;
        s.color *= cfg.lambda_flow;
      }
      g1 = add(std::move(g1), fg.t1);
      out.at_next = cfg.lambda_flow * to_param_gradients(sets[k + 1], seq.cameras[k + 1], fg.t2, rc.near);
    }
  }
  out.at_frame = to_param_gradients(sets[k], cam, g1, rc.near);
  return out;
}

struct Task {
  int view;
  int frame;
};

std::vector<Task> tasks_for(const std::vector<SceneSequence>& views, const TrainConfig& cfg, int last_frame) {
  std::vector<Task> tasks;
  for (const int v : resolve_views(cfg.train_views, views.size())) {
    views[v].validate();
    if (views[v].last_frame() != last_frame)
      throw ContractError("objective: sequence length does not match the field");
    for (int k = 0; k <= last_frame; ++k) tasks.push_back({v, k});
  }
  return tasks;
}

ObjectiveGradient evaluate_objective(const DynamicField& field, const std::vector<SceneSequence>& views,
                                     const TrainConfig& cfg, bool want_grad) {
  field.validate();
  const std::vector<Task> tasks = tasks_for(views, cfg, field.last_frame());
  std::vector<GaussianSet> sets;
  for (int k = 0; k <= field.last_frame(); ++k) sets.push_back(field_at(field, k));

  // Parallel over terms when that is where the workers go; the reduction
  // order below is fixed either way.
  const int workers = std::min(resolve_threads(cfg.render.threads), static_cast<int>(tasks.size()));
  RenderConfig rc = cfg.render;
  if (workers > 1) rc.threads = 1;
  std::vector<FrameTerm> terms(tasks.size());
  parallel_for(static_cast<int>(tasks.size()), workers, [&](int t) {
    const Task& task = tasks[t];
    terms[t] = frame_term(sets, views[task.view], task.frame, uses_flow(cfg, task.view), cfg, rc, want_grad);
  });

  ObjectiveGradient out;
  if (want_grad) out.grad = FieldGradient::zeros_like(field);
  const double scale = tasks.empty() ? 0.0 : 1.0 / static_cast<double>(tasks.size());
  std::vector<ParamGradients> per_frame(field.frames(), ParamGradients(field.size()));
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const int k = tasks[t].frame;
    FrameTerm& term = terms[t];
    term.loss.other = delta_penalty(field, k);
    out.loss.photometric += term.loss.photometric;
    out.loss.flow += term.loss.flow;
    out.loss.other += term.loss.other;
    if (!want_grad) continue;
    if (!term.at_frame.empty()) per_frame[k] = per_frame[k] + term.at_frame;
    if (!term.at_next.empty()) per_frame[k + 1] = per_frame[k + 1] + term.at_next;
  }
  out.loss.photometric *= scale;
  out.loss.flow *= scale;
  out.loss.other *= scale;
  out.loss.total = out.loss.photometric + cfg.lambda_flow * out.loss.flow + cfg.lambda_other * out.loss.other;
  if (!want_grad) return out;

  for (int k = 0; k < field.frames(); ++k) chain_frame(field, k, scale * per_frame[k], out.grad);
  if (cfg.lambda_other > 0.0 && field.size() > 0) {
    // Each frame's penalty appears once per training view.
    const double views_used = static_cast<double>(tasks.size()) / field.frames();
    const double w = 2.0 * cfg.lambda_other * scale * views_used / static_cast<double>(field.size());
    for (int k = 1; k < field.frames(); ++k)
      for (std::size_t i = 0; i < field.size(); ++i) {
        const FrameDelta& d = field.deltas[k - 1][i];
        GaussianGrad& g = out.grad.deltas[k - 1][i];
        g.mean += w * d.mean;
        g.rotation += w * (d.rotation - identity_quat<double>());
        g.log_scale += w * d.log_scale;
      }
  }
  return out;
}

}  // namespace

LossBreakdown total_loss(const DynamicField& field, const SceneSequence& seq, int frame, const TrainConfig& cfg) {
  seq.validate();
  if (frame < 0 || frame > seq.last_frame() || seq.last_frame() != field.last_frame())
    throw ContractError("total_loss: frame outside the sequence");
  std::vector<GaussianSet> sets(field.frames());
  sets[frame] = field_at(field, frame);
  if (frame < field.last_frame()) sets[frame + 1] = field_at(field, frame + 1);
  FrameTerm t = frame_term(sets, seq, frame, true, cfg, cfg.render, false);
  t.loss.other = delta_penalty(field, frame);
  t.loss.total = t.loss.photometric + cfg.lambda_flow * t.loss.flow + cfg.lambda_other * t.loss.other;
  return t.loss;
}

LossBreakdown objective(const DynamicField& field, const std::vector<SceneSequence>& views, const TrainConfig& cfg) {
  return evaluate_objective(field, views, cfg, false).loss;
}

ObjectiveGradient objective_gradient(const DynamicField& field, const std::vector<SceneSequence>& views,
                                     const TrainConfig& cfg) {
  return evaluate_objective(field, views, cfg, true);
}

// ---------------------------------------------------------------------------
// Packing and optimizer

namespace {

constexpr int kBaseStride = 14;
constexpr int kDeltaStride = 10;

Eigen::Index packed_size(const DynamicField& field) {
  return static_cast<Eigen::Index>(field.size()) * (kBaseStride + kDeltaStride * field.last_frame());
}

}  // namespace

Eigen::VectorXd pack(const DynamicField& field) {
  Eigen::VectorXd x(packed_size(field));
  Eigen::Index o = 0;
  for (const Gaussian3D& g : field.base) {
    x.segment<3>(o) = g.mean;
    x.segment<4>(o + 3) = g.rotation;
    x.segment<3>(o + 7) = g.log_scale;
    x[o + 10] = g.opacity_logit;
    x.segment<3>(o + 11) = g.color;
    o += kBaseStride;
  }
  for (const auto& frame : field.deltas)
    for (const FrameDelta& d : frame) {
      x.segment<3>(o) = d.mean;
      x.segment<4>(o + 3) = d.rotation;
      x.segment<3>(o + 7) = d.log_scale;
      o += kDeltaStride;
    }
  return x;
}

void unpack(const Eigen::VectorXd& x, DynamicField& field) {
  if (x.size() != packed_size(field)) throw ContractError("unpack: vector size does not match the field");
  Eigen::Index o = 0;
  for (Gaussian3D& g : field.base) {
    g.mean = x.segment<3>(o);
    g.rotation = x.segment<4>(o + 3);
    g.log_scale = x.segment<3>(o + 7);
    g.opacity_logit = x[o + 10];
    g.color = x.segment<3>(o + 11);
    o += kBaseStride;
  }
  for (auto& frame : field.deltas)
    for (FrameDelta& d : frame) {
      d.mean = x.segment<3>(o);
      d.rotation = x.segment<4>(o + 3);
      d.log_scale = x.segment<3>(o + 7);
      o += kDeltaStride;
    }
}

Eigen::VectorXd pack(const FieldGradient& grad) {
  const Eigen::Index n = static_cast<Eigen::Index>(grad.base.size());
  Eigen::VectorXd x(n * (kBaseStride + kDeltaStride * static_cast<Eigen::Index>(grad.deltas.size())));
  Eigen::Index o = 0;
  for (const GaussianGrad& g : grad.base) {
    x.segment<3>(o) = g.mean;
    x.segment<4>(o + 3) = g.rotation;
    x.segment<3>(o + 7) = g.log_scale;
    x[o + 10] = g.opacity_logit;
    x.segment<3>(o + 11) = g.color;
    o += kBaseStride;
  }
  for (const auto& frame : grad.deltas)
    for (const GaussianGrad& d : frame) {
      x.segment<3>(o) = d.mean;
      x.segment<4>(o + 3) = d.rotation;
      x.segment<3>(o + 7) = d.log_scale;
      o += kDeltaStride;
    }
  return x;
}

Eigen::VectorXd learning_rates(const DynamicField& field, const TrainConfig& cfg, int iteration) {
  const double progress = cfg.iterations > 1 ? std::clamp(iteration / double(cfg.iterations - 1), 0.0, 1.0) : 0.0;
  const double decay = std::pow(cfg.lr.final_ratio, progress);
  LearningRates r = cfg.lr;
  r.rotation *= decay;
  r.log_scale *= decay;
  r.opacity *= decay;
  r.color *= decay;
  const double mean_lr = r.mean * std::pow(cfg.lr.mean_final_ratio, progress) *
                         (cfg.scale_mean_lr_by_extent ? scene_extent(field.base) : 1.0);
  Eigen::VectorXd lr(packed_size(field));
  Eigen::Index o = 0;
  for (std::size_t i = 0; i < field.size(); ++i) {
    lr.segment<3>(o).setConstant(mean_lr);
    lr.segment<4>(o + 3).setConstant(r.rotation);
    lr.segment<3>(o + 7).setConstant(r.log_scale);
    lr[o + 10] = r.opacity;
    lr.segment<3>(o + 11).setConstant(r.color);
    o += kBaseStride;
  }
  for (int k = 0; k < field.last_frame(); ++k)
    for (std::size_t i = 0; i < field.size(); ++i) {
      lr.segment<3>(o).setConstant(mean_lr);
      lr.segment<4>(o + 3).setConstant(r.rotation);
      lr.segment<3>(o + 7).setConstant(r.log_scale);
      o += kDeltaStride;
    }
  return lr;
}

Adam::Adam(Eigen::VectorXd lr, double beta1, double beta2, double epsilon)
    : lr_(std::move(lr)),
      m_(Eigen::VectorXd::Zero(lr_.size())),
      v_(Eigen::VectorXd::Zero(lr_.size())),
      beta1_(beta1),
      beta2_(beta2),
      epsilon_(epsilon) {}

void Adam::set_learning_rates(Eigen::VectorXd lr) {
  if (lr.size() != lr_.size()) throw ContractError("Adam: size mismatch");
  lr_ = std::move(lr);
}

void Adam::step(Eigen::VectorXd& x, const Eigen::VectorXd& g) {
  if (x.size() != lr_.size() || g.size() != lr_.size()) throw ContractError("Adam: size mismatch");
  ++t_;
  m_ = beta1_ * m_ + (1.0 - beta1_) * g;
  v_ = beta2_ * v_ + (1.0 - beta2_) * g.cwiseAbs2();
  const double c1 = 1.0 - std::pow(beta1_, t_);
  const double c2 = 1.0 - std::pow(beta2_, t_);
  x.array() -= lr_.array() * (m_.array() / c1) / ((v_.array() / c2).sqrt() + epsilon_);
}

FitResult fit(const std::vector<SceneSequence>& views, DynamicField init, const TrainConfig& cfg,
              const FitCallback& callback) {
  cfg.validate();
  init.validate();
  FitResult out;
  out.field = std::move(init);
  Eigen::VectorXd x = pack(out.field);
  // The extent is taken from the initial field so the schedule stays fixed.
  const DynamicField extent_ref = DynamicField::still(out.field.base, out.field.last_frame());
  Adam adam(learning_rates(extent_ref, cfg), cfg.beta1, cfg.beta2, cfg.epsilon);
  out.log.reserve(cfg.iterations);

  auto diverged = [](int it, const std::string& why) {
    return DivergenceError("fit: diverged at iteration " + std::to_string(it) + ": " + why);
  };
  for (int it = 0; it < cfg.iterations; ++it) {
    ObjectiveGradient og;
    try {
      og = objective_gradient(out.field, views, cfg);
    } catch (const DegenerateInput& e) {
      throw diverged(it, e.what());
    }
    if (!std::isfinite(og.loss.total))
      throw diverged(it, "non-finite loss (photometric " + std::to_string(og.loss.photometric) + ", flow " +
                             std::to_string(og.loss.flow) + ")");
    if (!og.grad.all_finite()) throw diverged(it, "non-finite gradient");
    out.log.push_back({it, og.loss});
    if (it > 0) adam.set_learning_rates(learning_rates(extent_ref, cfg, it));
    adam.step(x, pack(og.grad));
    unpack(x, out.field);
    if (callback) callback(it, og.loss, out.field);
  }
  try {
    out.final_loss = objective(out.field, views, cfg);
  } catch (const DegenerateInput& e) {
    throw diverged(cfg.iterations, e.what());
  }
  if (!std::isfinite(out.final_loss.total)) throw diverged(cfg.iterations, "non-finite final loss");
  return out;
}

DynamicField initialize_field(const DynamicField& truth, const InitNoise& noise, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  GaussianSet base = truth.base;
  for (Gaussian3D& g : base) {
    g.mean += noise.mean * Vec3(n01(rng), n01(rng), n01(rng));
    const Vec3 axis(n01(rng), n01(rng), n01(rng));
    const double angle = noise.rotation * n01(rng);
    if (axis.norm() > 0.0) g.rotation = quat_multiply(axis_angle_quat(axis, angle), g.rotation);
    g.log_scale.x() += noise.log_scale * n01(rng);
    g.log_scale.y() += noise.log_scale * n01(rng);
    g.opacity_logit += noise.opacity_logit * n01(rng);
    for (int c = 0; c < 3; ++c) g.color[c] += noise.color * n01(rng);
  }
  return DynamicField::still(std::move(base), truth.last_frame());
}

double motion_endpoint_error(const DynamicField& fitted, const DynamicField& truth, const Camera& cam, double near) {
  if (fitted.size() != truth.size() || fitted.last_frame() != truth.last_frame())
    throw ContractError("motion_endpoint_error: fields differ in shape");
  std::vector<GaussianSet> a, b;
  for (int k = 0; k <= truth.last_frame(); ++k) {
    a.push_back(field_at(fitted, k));
    b.push_back(field_at(truth, k));
  }
  auto pixel = [&](const Gaussian3D& g) -> std::optional<Vec2> {
    const Vec3 p = cam.to_camera(g.mean);
    if (!(p.z() > near)) return std::nullopt;
    return pinhole(p, cam);
  };
  double sum = 0.0;
  long count = 0;
  for (int k = 0; k < truth.last_frame(); ++k)
    for (std::size_t i = 0; i < truth.size(); ++i) {
      const auto a0 = pixel(a[k][i]), a1 = pixel(a[k + 1][i]);
      const auto b0 = pixel(b[k][i]), b1 = pixel(b[k + 1][i]);
      if (!a0 || !a1 || !b0 || !b1) continue;
      sum += ((*a1 - *a0) - (*b1 - *b0)).norm();
      ++count;
    }
  return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

double psnr_from_mse(double mse) {
  if (mse <= 0.0) return std::numeric_limits<double>::infinity();
  return -10.0 * std::log10(mse);
}

EvalReport evaluate(const DynamicField& field, const std::vector<SceneSequence>& views, const RenderConfig& render_cfg,
                    bool isotropic) {
  field.validate();
  double se = 0.0, se_dyn = 0.0, epe = 0.0, epe_dyn = 0.0;
  long n = 0, n_dyn = 0, n_epe = 0, n_epe_dyn = 0;
  std::vector<GaussianSet> sets;
  for (int k = 0; k <= field.last_frame(); ++k) sets.push_back(field_at(field, k));
  for (const SceneSequence& seq : views) {
    seq.validate();
    if (seq.last_frame() != field.last_frame()) throw ContractError("evaluate: sequence length does not match the field");
    for (int k = 0; k <= seq.last_frame(); ++k) {
      DynamicsPair pair;
      pair.splats_t1 = project_all(sets[k], seq.cameras[k], render_cfg.near);
      pair.aux = render(pair.splats_t1, seq.cameras[k], render_cfg);
      const Image& img = pair.aux.image;
      const Image& target = seq.frames[k];
      Mask dyn;
      if (k < seq.last_frame()) dyn = dynamic_mask(seq.flows[k]);
      for (int p = 0; p < img.pixels(); ++p) {
        const double e = (img.rgb.row(p) - target.rgb.row(p)).square().sum();
        se += e;
        n += 3;
        if (!dyn.empty() && dyn[p]) {
          se_dyn += e;
          n_dyn += 3;
        }
      }
      if (k == seq.last_frame()) continue;
      pair.splats_t2 = project_all(sets[k + 1], seq.cameras[k + 1], render_cfg.near);
      const FlowField pred = isotropic ? gaussian_flow_isotropic(pair) : gaussian_flow(pair);
      const FlowField& ref = seq.flows[k];
      for (int p = 0; p < pred.pixels(); ++p) {
        if (!pred.valid[p] || !ref.valid[p]) continue;
        const double d = std::hypot(pred.flow(p, 0) - ref.flow(p, 0), pred.flow(p, 1) - ref.flow(p, 1));
        epe += d;
        ++n_epe;
        if (dyn[p]) {
          epe_dyn += d;
          ++n_epe_dyn;
        }
      }
    }
  }
  EvalReport r;
  r.psnr = n == 0 ? 0.0 : psnr_from_mse(se / n);
  r.psnr_dynamic = n_dyn == 0 ? 0.0 : psnr_from_mse(se_dyn / n_dyn);
  r.epe = n_epe == 0 ? 0.0 : epe / n_epe;
  r.epe_dynamic = n_epe_dyn == 0 ? 0.0 : epe_dyn / n_epe_dyn;
  r.dynamic_pixels = n_dyn / 3;
  return r;
}

}  // namespace gflow
