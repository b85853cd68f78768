#include "gflow/rasterizer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gflow/error.hpp"
#include "gflow/parallel.hpp"

namespace gflow {

void RenderConfig::validate() const {
  if (top_k < 1) throw ContractError("render config: top_k must be >= 1");
  if (!(alpha_threshold > 0.0 && alpha_threshold < 1.0)) throw ContractError("render config: alpha_threshold must lie in (0, 1)");
  if (tile_size < 1) throw ContractError("render config: tile_size must be >= 1");
  if (!(transmittance_floor >= 0.0 && transmittance_floor < 1.0))
    throw ContractError("render config: transmittance_floor must lie in [0, 1)");
}

SplatBatch project_all(const GaussianSet& set, const Camera& cam, double near) {
  SplatBatch batch;
  batch.splats.reserve(set.size());
  for (const auto& g : set) batch.splats.push_back(project(g, cam, near));
  return batch;
}

Mat2 conic_of(const Mat2& cov) {
  const double a = cov(0, 0), b = 0.5 * (cov(0, 1) + cov(1, 0)), d = cov(1, 1);
  const double det = a * d - b * b;
  if (!(det > 0.0) || !(a > 0.0)) throw DegenerateInput("2D covariance is not positive definite");
  Mat2 inv;
  inv << d / det, -b / det, -b / det, a / det;
  return inv;
}

namespace detail {

std::vector<std::optional<SplatEval>> prepare(const SplatBatch& splats) {
  std::vector<std::optional<SplatEval>> out(splats.size());
  for (std::size_t i = 0; i < splats.size(); ++i) {
    if (!splats.splats[i]) continue;
    const Splat2D& s = *splats.splats[i];
    const Mat2 conic = conic_of(s.cov2d);
    out[i] = SplatEval{s.mean2d, conic(0, 0), conic(0, 1), conic(1, 1), s.opacity};
  }
  return out;
}

}  // namespace detail

double alpha_at(const Splat2D& s, const Vec2& x) {
  const Mat2 conic = conic_of(s.cov2d);
  const detail::SplatEval e{s.mean2d, conic(0, 0), conic(0, 1), conic(1, 1), s.opacity};
  return e.opacity * std::exp(e.power(x - e.mean));
}

std::vector<int> depth_order(const SplatBatch& splats) {
  std::vector<int> ids;
  for (std::size_t i = 0; i < splats.size(); ++i)
    if (splats.splats[i]) ids.push_back(static_cast<int>(i));
  std::sort(ids.begin(), ids.end(), [&](int a, int b) {
    const double da = splats.splats[a]->depth, db = splats.splats[b]->depth;
    return da < db || (da == db && a < b);
  });
  return ids;
}

Eigen::Vector2i tile_grid(const RenderConfig& cfg, const Camera& cam) {
  return {(cam.width + cfg.tile_size - 1) / cfg.tile_size, (cam.height + cfg.tile_size - 1) / cfg.tile_size};
}

namespace {

// Range of pixel indices in [0, n) whose centers lie within [lo, hi].
bool pixel_span(double lo, double hi, int n, int& first, int& last) {
  const double f = std::ceil(std::clamp(lo - 0.5, -1.0, static_cast<double>(n)));
  const double l = std::floor(std::clamp(hi - 0.5, -1.0, static_cast<double>(n)));
  first = std::max(0, static_cast<int>(f));
  last = std::min(n - 1, static_cast<int>(l));
  return first <= last;
}

RenderOutput allocate(const Camera& cam, const RenderConfig& cfg) {
  RenderOutput out;
  out.width = cam.width;
  out.height = cam.height;
  out.top_k = cfg.top_k;
  const int n = cam.width * cam.height;
  out.image = Image(cam.width, cam.height);
  out.topk_index = RowMatrixXi::Constant(n, cfg.top_k, kNoGaussian);
  out.topk_weight = RowMatrixXd::Zero(n, cfg.top_k);
  out.topk_offset = RowMatrixXd::Zero(n, 2 * cfg.top_k);
  out.coverage = Eigen::VectorXd::Zero(n);
  out.transmittance = Eigen::VectorXd::Ones(n);
  out.contributors = Eigen::VectorXi::Zero(n);
  return out;
}

// Front-to-back compositing of one pixel over `ids` (already depth sorted).
// Both renderers go through here so their arithmetic is identical.
template <typename Ids>
void composite_pixel(const Ids& ids, const std::vector<std::optional<detail::SplatEval>>& evals,
                     const SplatBatch& splats, const RenderConfig& cfg, int r, int c, RenderOutput& out) {
  const Vec2 x = pixel_center(r, c);
  const int p = r * out.width + c;
  double t = 1.0;
  double coverage = 0.0;
  double weight_sum = 0.0;
  Vec3 color = Vec3::Zero();
  int slot = 0;
  int count = 0;
  for (const int id : ids) {
    const detail::SplatEval& e = *evals[id];
    const Vec2 d = x - e.mean;
    double alpha = e.opacity * std::exp(e.power(d));
    if (alpha < cfg.alpha_threshold) continue;
    alpha = std::min(alpha, kAlphaClamp);
    const double next = t * (1.0 - alpha);
    if (next < cfg.transmittance_floor) break;
    const double w = t * alpha;
    color += w * splats.splats[id]->color;
    coverage += w;
    ++count;
    if (slot < cfg.top_k) {
      out.topk_index(p, slot) = id;
      out.topk_weight(p, slot) = w;
      out.topk_offset(p, 2 * slot) = d.x();
      out.topk_offset(p, 2 * slot + 1) = d.y();
      weight_sum += w;
      ++slot;
    }
    t = next;
  }
  for (int k = 0; k < slot; ++k) out.topk_weight(p, k) /= weight_sum;
  out.image.rgb.row(p) = (color + t * cfg.background).transpose().array();
  out.coverage[p] = coverage;
  out.transmittance[p] = t;
  out.contributors[p] = count;
}

}  // namespace

std::vector<std::vector<int>> tile_bin(const SplatBatch& splats, const RenderConfig& cfg, const Camera& cam) {
  const Eigen::Vector2i grid = tile_grid(cfg, cam);
  std::vector<std::vector<int>> bins(static_cast<std::size_t>(grid.x()) * grid.y());
  for (const int id : depth_order(splats)) {
    const Splat2D& s = *splats.splats[id];
    if (s.opacity < cfg.alpha_threshold) continue;
    // 3 sigma, widened when the opacity keeps alpha above threshold farther out.
    const double reach = std::max(3.0, std::sqrt(2.0 * std::log(s.opacity / cfg.alpha_threshold))) * (1.0 + 1e-9);
    const double ex = reach * std::sqrt(s.cov2d(0, 0));
    const double ey = reach * std::sqrt(s.cov2d(1, 1));
    int c0, c1, r0, r1;
    if (!pixel_span(s.mean2d.x() - ex, s.mean2d.x() + ex, cam.width, c0, c1)) continue;
    if (!pixel_span(s.mean2d.y() - ey, s.mean2d.y() + ey, cam.height, r0, r1)) continue;
    for (int ty = r0 / cfg.tile_size; ty <= r1 / cfg.tile_size; ++ty)
      for (int tx = c0 / cfg.tile_size; tx <= c1 / cfg.tile_size; ++tx) bins[ty * grid.x() + tx].push_back(id);
  }
  return bins;
}

RenderOutput render(const GaussianSet& set, const Camera& cam, const RenderConfig& cfg) {
  return render(project_all(set, cam, cfg.near), cam, cfg);
}

RenderOutput render(const SplatBatch& splats, const Camera& cam, const RenderConfig& cfg) {
  cfg.validate();
  validate_camera(cam);
  RenderOutput out = allocate(cam, cfg);
  const auto evals = detail::prepare(splats);
  const auto bins = tile_bin(splats, cfg, cam);
  const Eigen::Vector2i grid = tile_grid(cfg, cam);
  parallel_for(static_cast<int>(bins.size()), cfg.threads, [&](int tile) {
    const int tx = tile % grid.x(), ty = tile / grid.x();
    const int r_end = std::min(cam.height, (ty + 1) * cfg.tile_size);
    const int c_end = std::min(cam.width, (tx + 1) * cfg.tile_size);
    for (int r = ty * cfg.tile_size; r < r_end; ++r)
      for (int c = tx * cfg.tile_size; c < c_end; ++c) composite_pixel(bins[tile], evals, splats, cfg, r, c, out);
  });
  return out;
}

RenderOutput render_bruteforce(const GaussianSet& set, const Camera& cam, const RenderConfig& cfg) {
  return render_bruteforce(project_all(set, cam, cfg.near), cam, cfg);
}

RenderOutput render_bruteforce(const SplatBatch& splats, const Camera& cam, const RenderConfig& cfg) {
  cfg.validate();
  validate_camera(cam);
  RenderOutput out = allocate(cam, cfg);
  const auto evals = detail::prepare(splats);
  const std::vector<int> order = depth_order(splats);
  for (int r = 0; r < cam.height; ++r)
    for (int c = 0; c < cam.width; ++c) composite_pixel(order, evals, splats, cfg, r, c, out);
  return out;
}

}  // namespace gflow
