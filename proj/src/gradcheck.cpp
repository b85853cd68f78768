#include "gflow/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "gflow/error.hpp"

namespace gflow {

std::string to_string(GradcheckLoss loss) {
  switch (loss) {
    case GradcheckLoss::Photometric:
      return "photometric";
    case GradcheckLoss::Flow:
      return "flow";
    case GradcheckLoss::Combined:
      return "combined";
  }
  return "?";
}

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

double& parameter(Gaussian3D& g, int k) {
  if (k < 3) return g.mean[k];
  if (k < 7) return g.rotation[k - 3];
  if (k < 10) return g.log_scale[k - 7];
  if (k == 10) return g.opacity_logit;
  if (k < 14) return g.color[k - 11];
  throw ContractError("parameter index out of range");
}

double parameter(const GaussianGrad& g, int k) {
  if (k < 3) return g.mean[k];
  if (k < 7) return g.rotation[k - 3];
  if (k < 10) return g.log_scale[k - 7];
  if (k == 10) return g.opacity_logit;
  if (k < 14) return g.color[k - 11];
  throw ContractError("parameter index out of range");
}

const char* parameter_block(int k) {
  if (k < 3) return "mean";
  if (k < 7) return "rotation";
  if (k < 10) return "log_scale";
  if (k == 10) return "opacity_logit";
  return "color";
}

GradcheckScene random_gradcheck_scene(std::uint64_t seed, const GradcheckOptions& opts) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto u = [&](double lo, double hi) { return lo + (hi - lo) * uni(rng); };

  GradcheckScene s;
  const double f = 0.9 * opts.width;
  s.cam1 = Camera::at(Vec3::Zero(), Mat3::Identity(), f, opts.width, opts.height);
  s.cam2 = Camera::at(Vec3(u(-0.03, 0.03), u(-0.03, 0.03), 0.0),
                      quat_to_rotation(axis_angle_quat(Vec3(0, 0, 1), u(-0.05, 0.05))), f, opts.width, opts.height);
  for (int i = 0; i < opts.gaussians; ++i) {
    Gaussian3D g;
    const double z = u(3.0, 5.0);
    g.mean = Vec3(u(-0.3, 0.3) * z, u(-0.3, 0.3) * z, z);
    g.rotation = Quat(normal(rng), normal(rng), normal(rng), normal(rng)).normalized();
    g.log_scale = Vec3(std::log(u(0.12, 0.3)), std::log(u(0.12, 0.3)), std::log(u(0.12, 0.3)));
    g.opacity_logit = u(-0.5, 3.0);
    g.color = Vec3(u(0, 1), u(0, 1), u(0, 1));
    s.t1.push_back(g);

    Gaussian3D h = g;
    h.mean += 0.08 * Vec3(normal(rng), normal(rng), normal(rng));
    h.rotation = quat_multiply(axis_angle_quat(Vec3(normal(rng), normal(rng), normal(rng)), u(-0.3, 0.3)), g.rotation);
    h.log_scale += Vec3(u(-0.2, 0.2), u(-0.2, 0.2), u(-0.2, 0.2));
    h.opacity_logit += u(-0.3, 0.3);
    h.color = Vec3(u(0, 1), u(0, 1), u(0, 1));
    s.t2.push_back(h);
  }
  s.render.background = Vec3(u(0, 1), u(0, 1), u(0, 1));
  s.target1 = Image(opts.width, opts.height);
  s.target2 = Image(opts.width, opts.height);
  for (int p = 0; p < s.target1.pixels(); ++p)
    for (int c = 0; c < 3; ++c) {
      s.target1.rgb(p, c) = uni(rng);
      s.target2.rgb(p, c) = uni(rng);
    }
  s.reference = FlowField(opts.width, opts.height);
  for (int p = 0; p < s.reference.pixels(); ++p) {
    s.reference.flow(p, 0) = 2.0 * normal(rng);
    s.reference.flow(p, 1) = 2.0 * normal(rng);
    s.reference.valid[p] = 1;
  }
  return s;
}

namespace {

FlowField predicted_flow(const DynamicsPair& pair, const GradcheckOptions& opts) {
  return opts.isotropic ? gaussian_flow_isotropic(pair) : gaussian_flow(pair);
}

struct Hasher {
  std::uint64_t h = 1469598103934665603ull;
  void add(std::uint64_t v) {
    for (int b = 0; b < 8; ++b) {
      h ^= (v >> (8 * b)) & 0xffu;
      h *= 1099511628211ull;
    }
  }
};

// Contributor sequences (with clamp flags) and termination of every pixel.
void hash_render_structure(const GaussianSet& set, const Camera& cam, const RenderConfig& cfg, Hasher& hash) {
  const SplatBatch splats = project_all(set, cam, cfg.near);
  for (const auto& s : splats.splats) hash.add(s ? 1 : 0);
  const auto evals = detail::prepare(splats);
  const auto bins = tile_bin(splats, cfg, cam);
  const Eigen::Vector2i grid = tile_grid(cfg, cam);
  for (int r = 0; r < cam.height; ++r)
    for (int c = 0; c < cam.width; ++c) {
      const int tile = (r / cfg.tile_size) * grid.x() + c / cfg.tile_size;
      const Vec2 x = pixel_center(r, c);
      double t = 1.0;
      for (const int id : bins[tile]) {
        const double raw = evals[id]->opacity * std::exp(evals[id]->power(x - evals[id]->mean));
        if (raw < cfg.alpha_threshold) continue;
        const double alpha = std::min(raw, kAlphaClamp);
        if (t * (1.0 - alpha) < cfg.transmittance_floor) {
          hash.add(0xdeadu);
          break;
        }
        hash.add(static_cast<std::uint64_t>(id) * 2 + (raw > kAlphaClamp ? 1 : 0));
        t *= 1.0 - alpha;
      }
      hash.add(0xffffu);
    }
}

std::uint64_t structure(const GradcheckScene& s, const GradcheckOptions& opts) {
  Hasher hash;
  hash_render_structure(s.t1, s.cam1, s.render, hash);
  hash_render_structure(s.t2, s.cam2, s.render, hash);
  const DynamicsPair pair = make_pair(s.t1, s.cam1, s.t2, s.cam2, s.render);
  const FlowField pred = predicted_flow(pair, opts);
  for (int p = 0; p < pred.pixels(); ++p) {
    hash.add(pred.valid[p]);
    if (!pred.valid[p] || !s.reference.valid[p]) continue;
    for (int c = 0; c < 2; ++c) {
      const double r = pred.flow(p, c) - s.reference.flow(p, c);
      hash.add(std::abs(r) <= kFlowSubgradientDeadzone ? 0 : (r > 0 ? 1 : 2));
    }
  }
  return hash.h;
}

GaussianSet& timestep(GradcheckScene& s, int t) { return t == 1 ? s.t1 : s.t2; }

double central_difference(const GradcheckScene& scene, int t, int i, int k, double h, GradcheckLoss loss,
                          const GradcheckOptions& opts, bool& stable, std::uint64_t base_structure) {
  GradcheckScene plus = scene, minus = scene;
  parameter(timestep(plus, t)[i], k) += h;
  parameter(timestep(minus, t)[i], k) -= h;
  stable = structure(plus, opts) == base_structure && structure(minus, opts) == base_structure;
  return (gradcheck_objective(plus, loss, opts) - gradcheck_objective(minus, loss, opts)) / (2.0 * h);
}

}  // namespace

double gradcheck_objective(const GradcheckScene& s, GradcheckLoss loss, const GradcheckOptions& opts) {
  double value = 0.0;
  if (loss != GradcheckLoss::Flow) {
    value += photometric_mse(render(s.t1, s.cam1, s.render).image, s.target1).value;
    value += photometric_mse(render(s.t2, s.cam2, s.render).image, s.target2).value;
  }
  if (loss != GradcheckLoss::Photometric) {
    const DynamicsPair pair = make_pair(s.t1, s.cam1, s.t2, s.cam2, s.render);
    const double w = loss == GradcheckLoss::Combined ? opts.lambda_flow : 1.0;
    value += w * flow_loss(predicted_flow(pair, opts), s.reference, opts.norm);
  }
  return value;
}

FlowGradients gradcheck_analytic(const GradcheckScene& s, GradcheckLoss loss, const GradcheckOptions& opts) {
  FlowGradients g{ParamGradients(s.t1.size()), ParamGradients(s.t2.size())};
  if (loss != GradcheckLoss::Flow) {
    const ImageLoss l1 = photometric_mse(render(s.t1, s.cam1, s.render).image, s.target1);
    const ImageLoss l2 = photometric_mse(render(s.t2, s.cam2, s.render).image, s.target2);
    g.t1 = g.t1 + backward_render(s.t1, s.cam1, s.render, l1.grad);
    g.t2 = g.t2 + backward_render(s.t2, s.cam2, s.render, l2.grad);
  }
  if (loss != GradcheckLoss::Photometric) {
    const DynamicsPair pair = make_pair(s.t1, s.cam1, s.t2, s.cam2, s.render);
    const FlowLoss fl = flow_loss_grad(predicted_flow(pair, opts), s.reference, opts.norm);
    const double w = loss == GradcheckLoss::Combined ? opts.lambda_flow : 1.0;
    FlowBackwardOptions fo;
    fo.isotropic = opts.isotropic;
    const SplatFlowGradients sg = backward_flow(pair, fl.grad, fo);
    g.t1 = g.t1 + w * to_param_gradients(s.t1, s.cam1, sg.t1, s.render.near);
    g.t2 = g.t2 + w * to_param_gradients(s.t2, s.cam2, sg.t2, s.render.near);
  }
  return g;
}

GradcheckReport gradcheck(const GradcheckScene& scene, const GradcheckOptions& opts) {
  GradcheckReport report;
  const std::uint64_t base = structure(scene, opts);
  const char* blocks[] = {"mean", "rotation", "log_scale", "opacity_logit", "color"};

  for (const GradcheckLoss loss : {GradcheckLoss::Photometric, GradcheckLoss::Flow, GradcheckLoss::Combined}) {
    const FlowGradients analytic = gradcheck_analytic(scene, loss, opts);
    for (int t = 1; t <= 2; ++t) {
      std::vector<BlockReport> rows;
      for (const char* b : blocks) rows.push_back({loss, t, b});
      const ParamGradients& ga = t == 1 ? analytic.t1 : analytic.t2;
      for (std::size_t i = 0; i < ga.size(); ++i) {
        for (int k = 0; k < kParametersPerGaussian; ++k) {
          auto row = std::find_if(rows.begin(), rows.end(), [&](const BlockReport& r) { return r.block == parameter_block(k); });
          bool stable = true;
          const double fd = central_difference(scene, t, static_cast<int>(i), k, opts.step, loss, opts, stable, base);
          if (!stable) {
            ++row->skipped;
            continue;
          }
          ++row->checked;
          row->max_rel_error = std::max(row->max_rel_error, relative_error(parameter(ga[i], k), fd));
        }
      }
      for (const auto& r : rows) {
        report.max_rel_error = std::max(report.max_rel_error, r.max_rel_error);
        report.blocks.push_back(r);
      }
    }
  }

  // Richardson check of the oracle itself on the combined loss.
  const FlowGradients analytic = gradcheck_analytic(scene, GradcheckLoss::Combined, opts);
  double best = 0.0;
  for (int t = 1; t <= 2; ++t) {
    const ParamGradients& ga = t == 1 ? analytic.t1 : analytic.t2;
    for (std::size_t i = 0; i < ga.size(); ++i)
      for (int k : {0, 1, 2, 7, 8, 9, 10}) {
        bool s1 = true, s2 = true;
        const double h = opts.richardson_step;
        const double f1 = central_difference(scene, t, static_cast<int>(i), k, h, GradcheckLoss::Combined, opts, s1, base);
        const double f2 =
            central_difference(scene, t, static_cast<int>(i), k, 0.5 * h, GradcheckLoss::Combined, opts, s2, base);
        if (!s1 || !s2) continue;
        const double a = parameter(ga[i], k);
        const double e1 = std::abs(f1 - a), e2 = std::abs(f2 - a);
        if (e1 > best && e1 > 1e-9 && e2 > 0.0) {
          best = e1;
          report.richardson_ratio = e1 / e2;
        }
      }
  }
  return report;
}

GradcheckReport gradcheck(std::uint64_t seed, const GradcheckOptions& opts) {
  GradcheckReport r = gradcheck(random_gradcheck_scene(seed, opts), opts);
  r.seed = seed;
  return r;
}

}  // namespace gflow
