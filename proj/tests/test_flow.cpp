#include <gtest/gtest.h>

#include "gflow/flow.hpp"
#include "support.hpp"

namespace gflow {
namespace {

using testing::make_splat;

// Scalar reference: sum_i w_i ((S2 S1^-1 - I) off_i + d_mu_i).
Vec2 reference_flow(const DynamicsPair& pair, int p) {
  Vec2 f = Vec2::Zero();
  for (int k = 0; k < pair.aux.top_k; ++k) {
    const int id = pair.aux.topk_index(p, k);
    if (id == kNoGaussian) break;
    const Splat2D& a = *pair.splats_t1.splats[id];
    const Splat2D& b = *pair.splats_t2.splats[id];
    const Mat2 m = b.cov2d * testing::inverse2(a.cov2d) - Mat2::Identity();
    f += pair.aux.topk_weight(p, k) * (m * pair.aux.offset(p, k) + b.mean2d - a.mean2d);
  }
  return f;
}

struct RandomPair {
  GaussianSet t1, t2;
  Camera cam = testing::front_camera(32, 32, 32);
  RenderConfig cfg;
};

RandomPair random_pair(std::uint64_t seed, int count = 15) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0, 1);
  RandomPair rp;
  rp.cfg.top_k = 8;
  rp.t1 = testing::random_set(rng, {.count = count, .opacity_min = 0.5, .opacity_max = 0.95});
  rp.t2 = rp.t1;
  for (auto& g : rp.t2) {
    g.mean += 0.05 * Vec3(n(rng), n(rng), 0.5 * n(rng));
    g.log_scale += 0.1 * Vec3(n(rng), n(rng), n(rng));
    g.rotation = quat_multiply(axis_angle_quat(Vec3(n(rng), n(rng), n(rng)), 0.2 * n(rng)), g.rotation);
  }
  return rp;
}

DynamicsPair pair_of(const RandomPair& rp) { return make_pair(rp.t1, rp.cam, rp.t2, rp.cam, rp.cfg); }

TEST(PerGaussianFlow, IdenticalSplatsGiveZero) {
  const Splat2D s = make_splat(Vec2(5, 5), Vec2(2, 3).asDiagonal(), 1, 0.5, Vec3::Zero());
  EXPECT_EQ(per_gaussian_flow(s, s, Vec2(1.5, -2)), Vec2::Zero());
}

TEST(PerGaussianFlow, PureTranslation) {
  const Splat2D a = make_splat(Vec2(5, 5), Vec2(2, 3).asDiagonal(), 1, 0.5, Vec3::Zero());
  Splat2D b = a;
  b.mean2d += Vec2(3, -2);
  for (const Vec2 off : {Vec2(0, 0), Vec2(4, -1), Vec2(-7, 2)})
    EXPECT_LT((per_gaussian_flow(a, b, off) - Vec2(3, -2)).norm(), 1e-14);
}

TEST(PerGaussianFlow, Scaling) {
  const Splat2D a = make_splat(Vec2::Zero(), Mat2::Identity(), 1, 0.5, Vec3::Zero());
  Splat2D b = a;
  b.cov2d *= 4.0;
  EXPECT_LT((per_gaussian_flow(a, b, Vec2(2, 0)) - Vec2(6, 0)).norm(), 1e-14);
}

TEST(Transport, SingularThrows) {
  Mat2 singular;
  singular << 1, 1, 1, 1;
  EXPECT_THROW(transport(singular, Mat2::Identity()), DegenerateInput);
}

TEST(GaussianFlow, TwoWeightBlend) {
  DynamicsPair pair;
  const Splat2D a = make_splat(Vec2(0.5, 0.5), Mat2::Identity(), 1, 0.5, Vec3::Zero());
  const Splat2D b = make_splat(Vec2(0.5, 0.5), Mat2::Identity(), 2, 0.5, Vec3::Zero());
  pair.splats_t1.splats = {a, b};
  Splat2D a2 = a, b2 = b;
  a2.mean2d += Vec2(1, 0);
  b2.mean2d += Vec2(0, 1);
  b2.cov2d *= 2.0;
  pair.splats_t2.splats = {a2, b2};
  RenderOutput& aux = pair.aux;
  aux.width = aux.height = 1;
  aux.top_k = 2;
  aux.topk_index = RowMatrixXi(1, 2);
  aux.topk_index << 0, 1;
  aux.topk_weight = RowMatrixXd(1, 2);
  aux.topk_weight << 0.7, 0.3;
  aux.topk_offset = RowMatrixXd(1, 4);
  aux.topk_offset << 0.25, -0.5, 1.0, 2.0;
  aux.coverage = Eigen::VectorXd::Constant(1, 0.9);
  const FlowField f = gaussian_flow(pair);
  ASSERT_TRUE(f.valid[0]);
  // 0.7 * (1, 0) + 0.3 * ((2 - 1) * (1, 2) + (0, 1))
  EXPECT_LT((f.at(0) - Vec2(1.0, 0.9)).norm(), 1e-15);
  EXPECT_LT((f.at(0) - reference_flow(pair, 0)).norm(), 1e-15);
  EXPECT_LT((gaussian_flow_isotropic(pair).at(0) - Vec2(0.7, 0.3)).norm(), 1e-15);
}

TEST(GaussianFlow, StaticSceneIsZero) {
  const RandomPair rp = random_pair(1);
  const FlowField f = gaussian_flow(make_pair(rp.t1, rp.cam, rp.t1, rp.cam, rp.cfg));
  int valid = 0;
  for (int p = 0; p < f.pixels(); ++p) {
    valid += f.valid[p];
    EXPECT_EQ(f.at(p), Vec2::Zero());
  }
  EXPECT_GT(valid, 0);
}

TEST(GaussianFlow, SceneTranslation) {
  RandomPair rp = random_pair(2);
  const Vec2 delta(1.75, -0.5);
  DynamicsPair pair = pair_of(rp);
  for (std::size_t i = 0; i < pair.splats_t1.size(); ++i) {
    pair.splats_t2.splats[i] = pair.splats_t1.splats[i];
    if (pair.splats_t2.splats[i]) pair.splats_t2.splats[i]->mean2d += delta;
  }
  const FlowField f = gaussian_flow(pair);
  for (int p = 0; p < f.pixels(); ++p)
    if (f.valid[p]) EXPECT_LT((f.at(p) - delta).norm(), 1e-9);
}

TEST(GaussianFlow, CoverageGatesValidity) {
  const RandomPair rp = random_pair(3);
  const DynamicsPair pair = pair_of(rp);
  for (double thr : {0.0, 0.5, 0.9}) {
    const FlowField f = gaussian_flow(pair, thr);
    for (int p = 0; p < f.pixels(); ++p) {
      EXPECT_EQ(f.valid[p] != 0, pair.aux.coverage[p] > thr);
      if (!f.valid[p]) EXPECT_EQ(f.at(p), Vec2::Zero());
    }
  }
}

TEST(GaussianFlow, CulledAtSecondTimestepIsInvalid) {
  RandomPair rp = random_pair(4, 1);
  rp.t1[0].mean = Vec3(0, 0, 3);
  rp.t1[0].log_scale = Vec3::Constant(std::log(0.5));
  rp.t1[0].opacity_logit = logit(0.9);
  rp.t2 = rp.t1;
  rp.t2[0].mean.z() = -1;
  const FlowField f = gaussian_flow(pair_of(rp));
  for (int p = 0; p < f.pixels(); ++p) EXPECT_FALSE(f.valid[p]);
}

class FlowScenes : public ::testing::TestWithParam<int> {};

TEST_P(FlowScenes, MatchesScalarReference) {
  const DynamicsPair pair = pair_of(random_pair(10 + GetParam()));
  const FlowField f = gaussian_flow(pair);
  for (int p = 0; p < f.pixels(); ++p)
    if (f.valid[p]) EXPECT_LT((f.at(p) - reference_flow(pair, p)).norm(), 1e-12);
}

// Every pixel's flow is a convex combination of its contributors' flows, so
// no direction may push it past the hull.
TEST_P(FlowScenes, InsideContributorHull) {
  const DynamicsPair pair = pair_of(random_pair(30 + GetParam()));
  const FlowField f = gaussian_flow(pair);
  for (int p = 0; p < f.pixels(); ++p) {
    if (!f.valid[p]) continue;
    std::vector<Vec2> pts;
    for (int k = 0; k < pair.aux.top_k && pair.aux.topk_index(p, k) != kNoGaussian; ++k) {
      const int id = pair.aux.topk_index(p, k);
      pts.push_back(per_gaussian_flow(*pair.splats_t1.splats[id], *pair.splats_t2.splats[id], pair.aux.offset(p, k)));
    }
    for (int d = 0; d < 64; ++d) {
      const Vec2 dir(std::cos(d * M_PI / 32), std::sin(d * M_PI / 32));
      double best = -1e300;
      for (const Vec2& q : pts) best = std::max(best, dir.dot(q));
      EXPECT_LE(dir.dot(f.at(p)), best + 1e-9);
    }
  }
}

TEST_P(FlowScenes, IsotropicDifferenceIsDeformationTerm) {
  const DynamicsPair pair = pair_of(random_pair(50 + GetParam()));
  const FlowField full = gaussian_flow(pair);
  const FlowField iso = gaussian_flow_isotropic(pair);
  for (int p = 0; p < full.pixels(); ++p) {
    ASSERT_EQ(full.valid[p], iso.valid[p]);
    if (!full.valid[p]) continue;
    Vec2 deform = Vec2::Zero();
    for (int k = 0; k < pair.aux.top_k && pair.aux.topk_index(p, k) != kNoGaussian; ++k) {
      const int id = pair.aux.topk_index(p, k);
      const Mat2 m = pair.splats_t2.splats[id]->cov2d * testing::inverse2(pair.splats_t1.splats[id]->cov2d);
      deform += pair.aux.topk_weight(p, k) * (m - Mat2::Identity()) * pair.aux.offset(p, k);
    }
    EXPECT_LT((full.at(p) - iso.at(p) - deform).norm(), 1e-12);
  }
}

TEST_P(FlowScenes, FrozenCovariancesDegenerateToTranslation) {
  DynamicsPair pair = pair_of(random_pair(70 + GetParam()));
  for (std::size_t i = 0; i < pair.splats_t1.size(); ++i)
    if (pair.splats_t1.splats[i] && pair.splats_t2.splats[i])
      pair.splats_t2.splats[i]->cov2d = pair.splats_t1.splats[i]->cov2d;
  const FlowField full = gaussian_flow(pair);
  const FlowField iso = gaussian_flow_isotropic(pair);
  for (int p = 0; p < full.pixels(); ++p) EXPECT_LT((full.at(p) - iso.at(p)).norm(), 1e-12);
}

TEST_P(FlowScenes, IdentityIsZero) {
  const RandomPair rp = random_pair(90 + GetParam());
  const FlowField f = gaussian_flow(make_pair(rp.t1, rp.cam, rp.t1, rp.cam, rp.cfg));
  for (int p = 0; p < f.pixels(); ++p) EXPECT_LT(f.at(p).norm(), 1e-9);
}

// Recompute every pixel's contributors from scratch over all splats and
// blend their flows with freshly normalized weights.
TEST_P(FlowScenes, MatchesDenseBruteForce) {
  RandomPair rp = random_pair(110 + GetParam(), 6);
  rp.cfg.top_k = 6;
  const DynamicsPair pair = pair_of(rp);
  const FlowField f = gaussian_flow(pair);
  const SplatBatch& s1 = pair.splats_t1;
  std::vector<int> order;
  for (std::size_t i = 0; i < s1.size(); ++i)
    if (s1.splats[i]) order.push_back(static_cast<int>(i));
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return s1.splats[a]->depth < s1.splats[b]->depth; });
  for (int r = 0; r < rp.cam.height; ++r)
    for (int c = 0; c < rp.cam.width; ++c) {
      const int p = r * rp.cam.width + c;
      if (!f.valid[p]) continue;
      double t = 1, wsum = 0;
      Vec2 acc = Vec2::Zero();
      for (int id : order) {
        const Splat2D& a = *s1.splats[id];
        const Vec2 off = pixel_center(r, c) - a.mean2d;
        const double alpha = std::min(0.99, a.opacity * std::exp(-0.5 * off.dot(testing::inverse2(a.cov2d) * off)));
        if (alpha < rp.cfg.alpha_threshold) continue;
        if (t * (1 - alpha) < rp.cfg.transmittance_floor) break;
        const Splat2D& b = *pair.splats_t2.splats[id];
        acc += t * alpha * ((b.cov2d * testing::inverse2(a.cov2d) - Mat2::Identity()) * off + b.mean2d - a.mean2d);
        wsum += t * alpha;
        t *= 1 - alpha;
      }
      EXPECT_LT((f.at(p) - acc / wsum).norm(), 1e-6);
    }
}

INSTANTIATE_TEST_SUITE_P(Seeds, FlowScenes, ::testing::Range(0, 6));

FlowField constant_field(int w, int h, const Vec2& v) {
  FlowField f(w, h);
  for (int p = 0; p < f.pixels(); ++p) {
    f.flow.row(p) = v.transpose().array();
    f.valid[p] = 1;
  }
  return f;
}

TEST(FlowLoss, Examples) {
  const FlowField a = constant_field(4, 3, Vec2(2, 2));
  EXPECT_EQ(flow_loss(a, a), 0.0);
  EXPECT_DOUBLE_EQ(flow_loss(constant_field(4, 3, Vec2(1, 1)), constant_field(4, 3, Vec2(0, 0))), 2.0);
  EXPECT_DOUBLE_EQ(flow_loss(constant_field(4, 3, Vec2(3, 4)), constant_field(4, 3, Vec2(0, 0)), FlowNorm::L2), 5.0);
  EXPECT_DOUBLE_EQ(endpoint_error(constant_field(2, 2, Vec2(3, 4)), constant_field(2, 2, Vec2(0, 0))), 5.0);
}

TEST(FlowLoss, NoJointlyValidPixelsIsZero) {
  FlowField a = constant_field(3, 3, Vec2(1, 0));
  FlowField b(3, 3);
  EXPECT_EQ(flow_loss(a, b), 0.0);
  EXPECT_EQ(endpoint_error(a, b), 0.0);
}

TEST(FlowLoss, ShapeMismatchThrows) {
  EXPECT_THROW(flow_loss(FlowField(3, 3), FlowField(3, 4)), ContractError);
  EXPECT_THROW(endpoint_error(FlowField(3, 3), FlowField(3, 3), Mask(5, 1)), ContractError);
}

TEST(FlowLoss, MatchesScalarLoop) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n(0, 2);
  std::bernoulli_distribution keep(0.7);
  FlowField a(9, 7), b(9, 7);
  for (int p = 0; p < a.pixels(); ++p) {
    a.flow.row(p) << n(rng), n(rng);
    b.flow.row(p) << n(rng), n(rng);
    a.valid[p] = keep(rng);
    b.valid[p] = keep(rng);
  }
  Mask mask(a.pixels());
  for (auto& m : mask) m = keep(rng);
  double l1 = 0, l2 = 0, epe = 0;
  int n_joint = 0, n_masked = 0;
  for (int p = 0; p < a.pixels(); ++p) {
    if (!a.valid[p] || !b.valid[p]) continue;
    const double du = a.flow(p, 0) - b.flow(p, 0), dv = a.flow(p, 1) - b.flow(p, 1);
    l1 += std::abs(du) + std::abs(dv);
    l2 += std::sqrt(du * du + dv * dv);
    ++n_joint;
    if (mask[p]) {
      epe += std::sqrt(du * du + dv * dv);
      ++n_masked;
    }
  }
  EXPECT_NEAR(flow_loss(a, b), l1 / n_joint, 1e-12);
  EXPECT_NEAR(flow_loss(a, b, FlowNorm::L2), l2 / n_joint, 1e-12);
  EXPECT_NEAR(endpoint_error(a, b), l2 / n_joint, 1e-12);
  EXPECT_NEAR(endpoint_error(a, b, mask), epe / n_masked, 1e-12);
}

TEST(DynamicMask, ThresholdsMagnitude) {
  FlowField f(3, 1);
  f.flow.row(0) << 0.5, 0.5;
  f.flow.row(1) << 3, 0;
  f.flow.row(2) << 3, 0;
  f.valid = {1, 1, 0};
  EXPECT_EQ(dynamic_mask(f), (Mask{0, 1, 0}));
}

}  // namespace
}  // namespace gflow
