#include "gflow/backward.hpp"

#include <algorithm>
#include <cmath>

#include "gflow/error.hpp"
#include "gflow/parallel.hpp"

namespace gflow {

GaussianGrad& GaussianGrad::operator+=(const GaussianGrad& o) {
  mean += o.mean;
  rotation += o.rotation;
  log_scale += o.log_scale;
  opacity_logit += o.opacity_logit;
  color += o.color;
  return *this;
}

GaussianGrad& GaussianGrad::operator*=(double s) {
  mean *= s;
  rotation *= s;
  log_scale *= s;
  opacity_logit *= s;
  color *= s;
  return *this;
}

bool GaussianGrad::all_finite() const {
  return mean.allFinite() && rotation.allFinite() && log_scale.allFinite() && std::isfinite(opacity_logit) &&
         color.allFinite();
}

ParamGradients operator+(ParamGradients a, const ParamGradients& b) {
  if (a.size() != b.size()) throw ContractError("gradient blocks have different sizes");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

ParamGradients operator*(double s, ParamGradients a) {
  for (auto& g : a) g *= s;
  return a;
}

ImageLoss photometric_mse(const Image& rendered, const Image& target, std::span<const std::uint8_t> mask) {
  if (!rendered.same_shape(target)) throw ContractError("photometric_mse: image dimensions differ");
  if (!mask.empty() && mask.size() != static_cast<std::size_t>(rendered.pixels()))
    throw ContractError("photometric_mse: mask has the wrong size");
  ImageLoss out;
  out.grad = Image(rendered.width, rendered.height);
  long count = 0;
  for (int p = 0; p < rendered.pixels(); ++p)
    if (mask.empty() || mask[p]) ++count;
  if (count == 0) return out;
  const double norm = 1.0 / (3.0 * static_cast<double>(count));
  double sum = 0.0;
  for (int p = 0; p < rendered.pixels(); ++p) {
    if (!mask.empty() && !mask[p]) continue;
    const Eigen::Array3d d = rendered.rgb.row(p) - target.rgb.row(p);
    sum += d.square().sum();
    out.grad.rgb.row(p) = 2.0 * norm * d;
  }
  out.value = sum * norm;
  return out;
}

FlowLoss flow_loss_grad(const FlowField& pred, const FlowField& ref, FlowNorm norm) {
  FlowLoss out;
  out.value = flow_loss(pred, ref, norm);
  out.grad = FlowField(pred.width, pred.height);
  long count = 0;
  for (int p = 0; p < pred.pixels(); ++p)
    if (pred.valid[p] && ref.valid[p]) ++count;
  if (count == 0) return out;
  const double scale = 1.0 / static_cast<double>(count);
  auto sign = [](double r) { return std::abs(r) <= kFlowSubgradientDeadzone ? 0.0 : (r > 0 ? 1.0 : -1.0); };
  for (int p = 0; p < pred.pixels(); ++p) {
    if (!pred.valid[p] || !ref.valid[p]) continue;
    const double du = pred.flow(p, 0) - ref.flow(p, 0);
    const double dv = pred.flow(p, 1) - ref.flow(p, 1);
    out.grad.valid[p] = 1;
    if (norm == FlowNorm::L1) {
      out.grad.flow(p, 0) = scale * sign(du);
      out.grad.flow(p, 1) = scale * sign(dv);
    } else {
      const double n = std::sqrt(du * du + dv * dv);
      if (n > kFlowSubgradientDeadzone) {
        out.grad.flow(p, 0) = scale * du / n;
        out.grad.flow(p, 1) = scale * dv / n;
      }
    }
  }
  return out;
}

namespace {

// Per-splat accumulator. Gradients with respect to the conic are kept apart
// and converted to covariance gradients once, after reduction.
struct Accum {
  Vec2 mean = Vec2::Zero();
  Mat2 conic = Mat2::Zero();
  Mat2 cov = Mat2::Zero();
  double opacity = 0.0;
  Vec3 color = Vec3::Zero();

  void add(const Accum& o) {
    mean += o.mean;
    conic += o.conic;
    cov += o.cov;
    opacity += o.opacity;
    color += o.color;
  }
};

struct Contribution {
  int id;
  double alpha;  // clamped value used in compositing
  bool clamped;
  double t;  // transmittance in front of this contributor
  Vec2 offset;
};

// d alpha / d(opacity, mean, conic) for an unclamped contributor.
void accumulate_alpha(const detail::SplatEval& e, const Contribution& c, double dl_dalpha, Accum& acc) {
  if (c.clamped || dl_dalpha == 0.0) return;
  const Vec2& d = c.offset;
  const double g = std::exp(e.power(d));
  const double alpha = e.opacity * g;
  Mat2 conic;
  conic << e.conic_xx, e.conic_xy, e.conic_xy, e.conic_yy;
  acc.opacity += dl_dalpha * g;
  acc.mean += dl_dalpha * alpha * (conic * d);
  acc.conic += dl_dalpha * (-0.5 * alpha) * (d * d.transpose());
}

// Back-to-front pass over one pixel's contributors given dL/d(T_i alpha_i)
// for each contributor and dL/dT_final.
template <typename BlendGrad>
void backward_blend(const std::vector<Contribution>& list, const std::vector<std::optional<detail::SplatEval>>& evals,
                    BlendGrad&& dl_dweight, double dl_dt_final, double t_final, std::vector<Accum>& acc) {
  double tail = dl_dt_final * t_final;
  for (int j = static_cast<int>(list.size()) - 1; j >= 0; --j) {
    const Contribution& c = list[j];
    const double w = c.t * c.alpha;
    const double g = dl_dweight(j);
    const double dl_dalpha = c.t * g - tail / (1.0 - c.alpha);
    tail += g * w;
    accumulate_alpha(*evals[c.id], c, dl_dalpha, acc[c.id]);
  }
}

std::vector<Accum> reduce(const std::vector<std::vector<Accum>>& parts, std::size_t n) {
  std::vector<Accum> total(n);
  for (const auto& part : parts)
    for (std::size_t i = 0; i < n; ++i) total[i].add(part[i]);
  return total;
}

SplatGradients finalize(const std::vector<Accum>& acc, const SplatBatch& splats) {
  SplatGradients out(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) {
    if (!splats.splats[i]) continue;
    const Mat2 conic = conic_of(splats.splats[i]->cov2d);
    Mat2 cov = acc[i].cov - conic * acc[i].conic * conic;
    out[i].mean2d = acc[i].mean;
    out[i].cov2d = 0.5 * (cov + cov.transpose());
    out[i].opacity = acc[i].opacity;
    out[i].color = acc[i].color;
  }
  return out;
}

}  // namespace

SplatGradients backward_render(const SplatBatch& splats, const Camera& cam, const RenderConfig& cfg,
                               const Image& dl_dimage) {
  cfg.validate();
  validate_camera(cam);
  if (dl_dimage.width != cam.width || dl_dimage.height != cam.height)
    throw ContractError("backward_render: gradient image does not match the camera");
  const auto evals = detail::prepare(splats);
  const auto bins = tile_bin(splats, cfg, cam);
  const Eigen::Vector2i grid = tile_grid(cfg, cam);
  std::vector<std::vector<Accum>> parts(bins.size());

  parallel_for(static_cast<int>(bins.size()), cfg.threads, [&](int tile) {
    std::vector<Accum>& acc = parts[tile];
    acc.assign(splats.size(), Accum{});
    const int tx = tile % grid.x(), ty = tile / grid.x();
    const int r_end = std::min(cam.height, (ty + 1) * cfg.tile_size);
    const int c_end = std::min(cam.width, (tx + 1) * cfg.tile_size);
    std::vector<Contribution> list;
    for (int r = ty * cfg.tile_size; r < r_end; ++r) {
      for (int c = tx * cfg.tile_size; c < c_end; ++c) {
        const int p = r * cam.width + c;
        const Vec3 g = dl_dimage.rgb.row(p).transpose().matrix();
        if (g.isZero(0.0)) continue;
        // Replay the forward pass to recover the contributor list.
        const Vec2 x = pixel_center(r, c);
        list.clear();
        double t = 1.0;
        for (const int id : bins[tile]) {
          const detail::SplatEval& e = *evals[id];
          const Vec2 d = x - e.mean;
          const double raw = e.opacity * std::exp(e.power(d));
          if (raw < cfg.alpha_threshold) continue;
          const double alpha = std::min(raw, kAlphaClamp);
          const double next = t * (1.0 - alpha);
          if (next < cfg.transmittance_floor) break;
          list.push_back({id, alpha, raw > kAlphaClamp, t, d});
          acc[id].color += t * alpha * g;
          t = next;
        }
        backward_blend(
            list, evals, [&](int j) { return g.dot(splats.splats[list[j].id]->color); }, g.dot(cfg.background), t,
            acc);
      }
    }
  });
  return finalize(reduce(parts, splats.size()), splats);
}

ParamGradients backward_render(const GaussianSet& set, const Camera& cam, const RenderConfig& cfg,
                               const Image& dl_dimage) {
  const SplatBatch splats = project_all(set, cam, cfg.near);
  return to_param_gradients(set, cam, backward_render(splats, cam, cfg, dl_dimage), cfg.near);
}

SplatFlowGradients backward_flow(const DynamicsPair& pair, const FlowField& dl_dflow, const FlowBackwardOptions& opts) {
  const RenderOutput& aux = pair.aux;
  if (dl_dflow.width != aux.width || dl_dflow.height != aux.height)
    throw ContractError("backward_flow: gradient field does not match the render");
  if (pair.splats_t1.size() != pair.splats_t2.size())
    throw ContractError("backward_flow: splat batches are not index aligned");
  const std::size_t n = pair.splats_t1.size();
  const auto evals = detail::prepare(pair.splats_t1);

  std::vector<Mat2> motion(n, Mat2::Identity());  // Sigma_t2 Sigma_t1^-1
  std::vector<Mat2> conic_t1(n, Mat2::Zero());
  for (std::size_t i = 0; i < n; ++i) {
    if (!pair.splats_t1.splats[i] || !pair.splats_t2.splats[i]) continue;
    conic_t1[i] = conic_of(pair.splats_t1.splats[i]->cov2d);
    motion[i] = pair.splats_t2.splats[i]->cov2d * conic_t1[i];
  }

  // Row bands keep the reduction order fixed regardless of worker count.
  constexpr int kBand = 16;
  const int bands = (aux.height + kBand - 1) / kBand;
  std::vector<std::vector<Accum>> parts1(bands), parts2(bands);

  parallel_for(bands, opts.threads, [&](int band) {
    auto& acc1 = parts1[band];
    auto& acc2 = parts2[band];
    acc1.assign(n, Accum{});
    acc2.assign(n, Accum{});
    std::vector<Contribution> list;
    std::vector<Vec2> contrib;
    const int r_end = std::min(aux.height, (band + 1) * kBand);
    for (int p = band * kBand * aux.width; p < r_end * aux.width; ++p) {
      if (!(aux.coverage[p] > opts.coverage_threshold)) continue;
      const Vec2 h = dl_dflow.at(p);
      if (h.isZero(0.0)) continue;
      list.clear();
      contrib.clear();
      double t = 1.0;
      bool ok = true;
      for (int k = 0; k < aux.top_k; ++k) {
        const int id = aux.topk_index(p, k);
        if (id == kNoGaussian) break;
        if (!pair.splats_t2.splats[id]) {
          ok = false;
          break;
        }
        const detail::SplatEval& e = *evals[id];
        const Vec2 d = aux.offset(p, k);
        const double raw = e.opacity * std::exp(e.power(d));
        const double alpha = std::min(raw, kAlphaClamp);
        list.push_back({id, alpha, raw > kAlphaClamp, t, d});
        t *= 1.0 - alpha;
      }
      if (!ok || list.empty()) continue;

      Vec2 flow = Vec2::Zero();
      for (std::size_t k = 0; k < list.size(); ++k) {
        const int id = list[k].id;
        const Vec2 shift = pair.splats_t2.splats[id]->mean2d - pair.splats_t1.splats[id]->mean2d;
        const Vec2 f = opts.isotropic ? shift : Vec2((motion[id] - Mat2::Identity()) * list[k].offset + shift);
        contrib.push_back(f);
        flow += aux.topk_weight(p, k) * f;
      }

      // Direct dependence of each contribution on the splat parameters.
      for (std::size_t k = 0; k < list.size(); ++k) {
        const int id = list[k].id;
        const Vec2 hk = aux.topk_weight(p, k) * h;
        acc2[id].mean += hk;
        if (opts.isotropic) {
          acc1[id].mean -= hk;
          continue;
        }
        acc1[id].mean -= motion[id].transpose() * hk;
        const Mat2 dl_dmotion = hk * list[k].offset.transpose();
        const Mat2 sigma2 = pair.splats_t2.splats[id]->cov2d;
        acc2[id].cov += dl_dmotion * conic_t1[id];
        acc1[id].conic += sigma2.transpose() * dl_dmotion;
      }

      if (opts.detach_weights) continue;
      // Through w_k = b_k / B with b_k = T_k alpha_k.
      double blend_sum = 0.0;
      for (const auto& c : list) blend_sum += c.t * c.alpha;
      const double hf = h.dot(flow);
      backward_blend(
          list, evals, [&](int j) { return (h.dot(contrib[j]) - hf) / blend_sum; }, 0.0, t, acc1);
    }
  });

  SplatFlowGradients out;
  out.t1 = finalize(reduce(parts1, n), pair.splats_t1);
  out.t2 = finalize(reduce(parts2, n), pair.splats_t2);
  return out;
}

FlowGradients backward_flow(const GaussianSet& set_t1, const Camera& cam_t1, const GaussianSet& set_t2,
                            const Camera& cam_t2, const RenderConfig& cfg, const FlowField& dl_dflow,
                            const FlowBackwardOptions& opts) {
  const DynamicsPair pair = make_pair(set_t1, cam_t1, set_t2, cam_t2, cfg);
  const SplatFlowGradients g = backward_flow(pair, dl_dflow, opts);
  return {to_param_gradients(set_t1, cam_t1, g.t1, cfg.near), to_param_gradients(set_t2, cam_t2, g.t2, cfg.near)};
}

namespace {

// dL/dq for R(q / |q|) given dL/dR.
Quat rotation_backward(const Quat& q, const Mat3& g) {
  const double n = q.norm();
  const Quat u = q / n;
  const double w = u[0], x = u[1], y = u[2], z = u[3];
  Quat du;
  du[0] = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
  du[1] = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0) + w * g(2, 1) -
               2 * x * g(2, 2));
  du[2] = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) + z * g(2, 1) -
               2 * y * g(2, 2));
  du[3] = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1) + y * g(1, 2) +
               x * g(2, 0) + y * g(2, 1));
  return (du - u * u.dot(du)) / n;
}

}  // namespace

ParamGradients to_param_gradients(const GaussianSet& set, const Camera& cam, const SplatGradients& grads, double near) {
  if (grads.size() != set.size()) throw ContractError("to_param_gradients: gradient count does not match the set");
  ParamGradients out(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    const Gaussian3D& g = set[i];
    const Vec3 p = cam.to_camera(g.mean);
    if (!(p.z() > near)) continue;
    const SplatGrad& sg = grads[i];
    const Mat2 gc = 0.5 * (sg.cov2d + sg.cov2d.transpose());
    const Mat3& w = cam.rotation;
    const Eigen::Matrix<double, 2, 3> j = perspective_jacobian(p, cam);
    const Mat3 rot = quat_to_rotation(g.rotation);
    const Vec3 s = g.scale();
    const Mat3 m = rot * s.asDiagonal();
    const Mat3 sigma3 = m * m.transpose();
    const Mat3 v = w * sigma3 * w.transpose();

    // Mean: through the pinhole projection and through J.
    Vec3 dp = j.transpose() * sg.mean2d;
    const Eigen::Matrix<double, 2, 3> dj = 2.0 * gc * j * v;
    const double iz = 1.0 / p.z(), iz2 = iz * iz, iz3 = iz2 * iz;
    dp.x() += dj(0, 2) * (-cam.fx * iz2);
    dp.y() += dj(1, 2) * (-cam.fy * iz2);
    dp.z() += dj(0, 0) * (-cam.fx * iz2) + dj(0, 2) * (2.0 * cam.fx * p.x() * iz3) + dj(1, 1) * (-cam.fy * iz2) +
              dj(1, 2) * (2.0 * cam.fy * p.y() * iz3);
    out[i].mean = w.transpose() * dp;

    // Covariance: Sigma2 = J W (R S)(R S)^T W^T J^T.
    const Mat3 dsigma3 = w.transpose() * (j.transpose() * gc * j) * w;
    const Mat3 dm = 2.0 * dsigma3 * m;
    const Mat3 drot = dm * s.asDiagonal();
    const Vec3 ds = (rot.transpose() * dm).diagonal();
    out[i].log_scale = ds.cwiseProduct(s);
    out[i].rotation = rotation_backward(g.rotation, drot);

    const double o = g.opacity();
    out[i].opacity_logit = sg.opacity * o * (1.0 - o);
    out[i].color = sg.color;
  }
  return out;
}

}  // namespace gflow
