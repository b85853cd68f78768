#include "gflow/flow.hpp"

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "gflow/error.hpp"

namespace gflow {

DynamicsPair make_pair(const GaussianSet& t1, const Camera& cam_t1, const GaussianSet& t2, const Camera& cam_t2,
                       const RenderConfig& cfg) {
  if (t1.size() != t2.size()) throw ContractError("make_pair: Gaussian counts differ between timesteps");
  DynamicsPair pair;
  pair.splats_t1 = project_all(t1, cam_t1, cfg.near);
  pair.splats_t2 = project_all(t2, cam_t2, cfg.near);
  pair.aux = render(pair.splats_t1, cam_t1, cfg);
  return pair;
}

Mat2 transport(const Mat2& cov_t1, const Mat2& cov_t2) { return cov_t2 * conic_of(cov_t1); }

namespace {

// transport - I, written as (S2 - S1) S1^-1 so equal covariances give exactly zero.
Mat2 deformation(const Mat2& cov_t1, const Mat2& cov_t2) { return (cov_t2 - cov_t1) * conic_of(cov_t1); }

}  // namespace

Vec2 per_gaussian_flow(const Splat2D& s1, const Splat2D& s2, const Vec2& offset) {
  return deformation(s1.cov2d, s2.cov2d) * offset + (s2.mean2d - s1.mean2d);
}

namespace {

struct Motion2D {
  Mat2 deform = Mat2::Zero();  // transport - I
  Vec2 shift = Vec2::Zero();
};

FlowField composite(const DynamicsPair& pair, double coverage_threshold, bool isotropic) {
  const RenderOutput& aux = pair.aux;
  if (pair.splats_t1.size() != pair.splats_t2.size())
    throw ContractError("gaussian_flow: splat batches are not index aligned");
  std::vector<std::optional<Motion2D>> motion(pair.splats_t1.size());
  for (std::size_t i = 0; i < motion.size(); ++i) {
    const auto& a = pair.splats_t1.splats[i];
    const auto& b = pair.splats_t2.splats[i];
    if (!a || !b) continue;
    Motion2D m;
    if (!isotropic) m.deform = deformation(a->cov2d, b->cov2d);
    m.shift = b->mean2d - a->mean2d;
    motion[i] = m;
  }

  FlowField out(aux.width, aux.height);
  for (int p = 0; p < out.pixels(); ++p) {
    if (!(aux.coverage[p] > coverage_threshold)) continue;
    Vec2 f = Vec2::Zero();
    bool ok = true;
    for (int k = 0; k < aux.top_k; ++k) {
      const int id = aux.topk_index(p, k);
      if (id == kNoGaussian) break;
      if (!motion[id]) {
        ok = false;
        break;
      }
      f += aux.topk_weight(p, k) * (motion[id]->deform * aux.offset(p, k) + motion[id]->shift);
    }
    if (!ok) continue;
    out.flow.row(p) = f.transpose().array();
    out.valid[p] = 1;
  }
  return out;
}

void require_same_shape(const FlowField& a, const FlowField& b, const char* who) {
  if (!a.same_shape(b) || a.flow.rows() != b.flow.rows() || a.valid.size() != b.valid.size())
    throw ContractError(std::string(who) + ": flow fields have different dimensions");
}

}  // namespace

FlowField gaussian_flow(const DynamicsPair& pair, double coverage_threshold) {
  return composite(pair, coverage_threshold, false);
}

FlowField gaussian_flow_isotropic(const DynamicsPair& pair, double coverage_threshold) {
  return composite(pair, coverage_threshold, true);
}

double flow_loss(const FlowField& pred, const FlowField& ref, FlowNorm norm) {
  require_same_shape(pred, ref, "flow_loss");
  double sum = 0.0;
  long count = 0;
  for (int p = 0; p < pred.pixels(); ++p) {
    if (!pred.valid[p] || !ref.valid[p]) continue;
    const double du = pred.flow(p, 0) - ref.flow(p, 0);
    const double dv = pred.flow(p, 1) - ref.flow(p, 1);
    sum += norm == FlowNorm::L1 ? std::abs(du) + std::abs(dv) : std::sqrt(du * du + dv * dv);
    ++count;
  }
  return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

double endpoint_error(const FlowField& pred, const FlowField& ref, std::span<const std::uint8_t> mask) {
  require_same_shape(pred, ref, "endpoint_error");
  if (!mask.empty() && mask.size() != static_cast<std::size_t>(pred.pixels()))
    throw ContractError("endpoint_error: mask has the wrong size");
  double sum = 0.0;
  long count = 0;
  for (int p = 0; p < pred.pixels(); ++p) {
    if (!pred.valid[p] || !ref.valid[p]) continue;
    if (!mask.empty() && !mask[p]) continue;
    sum += std::hypot(pred.flow(p, 0) - ref.flow(p, 0), pred.flow(p, 1) - ref.flow(p, 1));
    ++count;
  }
  return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

Mask dynamic_mask(const FlowField& ref, double threshold) {
  Mask m(ref.pixels(), 0);
  for (int p = 0; p < ref.pixels(); ++p)
    m[p] = ref.valid[p] && std::hypot(ref.flow(p, 0), ref.flow(p, 1)) > threshold ? 1 : 0;
  return m;
}

}  // namespace gflow
