#pragma once

// Random scene builders and small independent oracles shared by the tests.

#include <cmath>
#include <cstdint>
#include <random>

#include "gflow/flow.hpp"
#include "gflow/gaussian.hpp"
#include "gflow/rasterizer.hpp"

namespace gflow::testing {

inline Camera front_camera(int w, int h, double f) { return Camera::at(Vec3::Zero(), Mat3::Identity(), f, w, h); }

inline Quat random_quat(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Quat q(n(rng), n(rng), n(rng), n(rng));
  return q / q.norm();
}

struct SceneShape {
  int count = 12;
  double z_min = 2.0, z_max = 6.0;
  double lateral = 0.35;  // half-width of the means as a fraction of depth
  double scale_min = 0.04, scale_max = 0.25;
  double opacity_min = 0.1, opacity_max = 0.95;
};

inline GaussianSet random_set(std::mt19937_64& rng, const SceneShape& s = {}) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto lerp = [&](double a, double b) { return a + (b - a) * u(rng); };
  GaussianSet set(s.count);
  for (auto& g : set) {
    const double z = lerp(s.z_min, s.z_max);
    g.mean = Vec3(lerp(-s.lateral, s.lateral) * z, lerp(-s.lateral, s.lateral) * z, z);
    g.rotation = random_quat(rng);
    for (int a = 0; a < 3; ++a) g.log_scale[a] = std::log(lerp(s.scale_min, s.scale_max));
    g.opacity_logit = logit(lerp(s.opacity_min, s.opacity_max));
    g.color = Vec3(u(rng), u(rng), u(rng));
  }
  return set;
}

/// 2x2 inverse by the adjugate formula.
inline Mat2 inverse2(const Mat2& m) {
  const double det = m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0);
  Mat2 inv;
  inv << m(1, 1), -m(0, 1), -m(1, 0), m(0, 0);
  return inv / det;
}

inline Splat2D make_splat(const Vec2& mean, const Mat2& cov, double depth, double opacity, const Vec3& color) {
  Splat2D s;
  s.mean2d = mean;
  s.cov2d = cov;
  s.depth = depth;
  s.opacity = opacity;
  s.color = color;
  return s;
}

inline Mat2 random_spd(std::mt19937_64& rng, double lo = 1.0, double hi = 9.0) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double th = 2 * M_PI * u(rng);
  Mat2 r;
  r << std::cos(th), -std::sin(th), std::sin(th), std::cos(th);
  const Vec2 ev(lo + (hi - lo) * u(rng), lo + (hi - lo) * u(rng));
  return r * ev.asDiagonal() * r.transpose();
}

}  // namespace gflow::testing
