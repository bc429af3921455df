#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "incarpose/synthgen.hpp"
#include "test_support.hpp"

using namespace incarpose;

namespace {

// Intensity-weighted centroid of an image.
std::array<double, 2> centroid(const ImageF& img) {
  double s = 0, sx = 0, sy = 0;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const double v = img.at(y, x, 0);
      s += v;
      sx += v * x;
      sy += v * y;
    }
  return {sx / s, sy / s};
}

Scene single_point(const Vec3& p, double intensity = 0.5, double radius = 0.01) {
  return {{{p, intensity, radius}}, 0};
}

}  // namespace

TEST(Scene, PointsInsideCabinBox) {
  const Scene s = make_scene(3);
  ASSERT_EQ(s.points.size(), 400u);
  for (const ScenePoint& p : s.points) {
    EXPECT_LE(std::abs(p.position.x()), 0.8 + 1e-12);
    EXPECT_LE(std::abs(p.position.y()), 0.6 + 1e-12);
    EXPECT_GE(p.position.z(), -1.2 - 1e-12);
    EXPECT_LE(p.position.z(), 1.0 + 1e-12);
    EXPECT_GT(p.intensity, 0.0);
    EXPECT_LE(p.intensity, 0.9);
    EXPECT_GE(p.radius, 0.02);
    EXPECT_LE(p.radius, 0.06);
  }
  EXPECT_THROW(make_scene(1, 0), InvalidArgument);
}

TEST(Fisheye, OnAxisPointLandsAtPrincipalPoint) {
  const FisheyeCamera cam = FisheyeCamera::square(33, 10.0);
  const auto uv = cam.project({0, 0, 2});
  ASSERT_TRUE(uv.has_value());
  EXPECT_EQ((*uv)[0], 16.0);
  EXPECT_EQ((*uv)[1], 16.0);
  const ImageF img = render_fisheye(single_point({0, 0, 2}), cam, PoseSE3::identity());
  const auto c = centroid(img);
  EXPECT_NEAR(c[0], 16.0, 1e-9);
  EXPECT_NEAR(c[1], 16.0, 1e-9);
  double peak = 0;
  for (double v : img.data) peak = std::max(peak, v);
  EXPECT_EQ(img.at(16, 16, 0), peak);
}

TEST(Fisheye, EquidistantRadiusAt45Degrees) {
  FisheyeCamera cam = FisheyeCamera::square(256, 100.0);
  const double phi = 0.7;
  const Vec3 p(std::cos(phi), std::sin(phi), 1.0);  // θ = 45°
  const auto uv = cam.project(p);
  ASSERT_TRUE(uv.has_value());
  const double du = (*uv)[0] - cam.cx, dv = (*uv)[1] - cam.cy;
  EXPECT_NEAR(std::hypot(du, dv), 100.0 * kPi / 4.0, 1e-12);
  EXPECT_NEAR(std::hypot(du, dv), 78.54, 5e-3);
  EXPECT_NEAR(std::atan2(dv, du), phi, 1e-12);
}

TEST(Fisheye, RadiallyMonotone) {
  const FisheyeCamera cam = FisheyeCamera::square(64, 20.0);
  double prev = -1.0;
  for (int i = 0; i < 1000; ++i) {
    const double theta = (kPi / 2) * i / 1000.0;
    const auto uv = cam.project({std::sin(theta), 0.0, std::cos(theta)});
    ASSERT_TRUE(uv.has_value());
    const double r = std::hypot((*uv)[0] - cam.cx, (*uv)[1] - cam.cy);
    ASSERT_GT(r, prev);
    prev = r;
  }
}

TEST(Fisheye, CullsBehindHalfFov) {
  const FisheyeCamera cam = FisheyeCamera::square(32, 10.0);
  EXPECT_FALSE(cam.project({1, 0, 0}).has_value());
  EXPECT_FALSE(cam.project({0, 0, -1}).has_value());
  EXPECT_TRUE(cam.project({1, 0, 1e-3}).has_value());
  const ImageF img = render_fisheye(single_point({0, 0, -1}), cam, PoseSE3::identity());
  for (double v : img.data) EXPECT_EQ(v, 0.0);
}

TEST(Fisheye, RenderDeterministicAndClamped) {
  const Scene s = make_scene(4);
  const FisheyeCamera cam = FisheyeCamera::square(32, 10.0);
  std::mt19937_64 g(1);
  const PoseSE3 pose = incarpose::testing::random_pose(g, 0.2);
  const ImageF a = render_fisheye(s, cam, pose), b = render_fisheye(s, cam, pose);
  EXPECT_EQ(a, b);
  for (double v : a.data) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Fisheye, InvalidCameraThrows) {
  FisheyeCamera cam;
  cam.focal = 0.0;
  EXPECT_THROW(render_fisheye(make_scene(1), cam, PoseSE3::identity()), InvalidArgument);
}

TEST(SamplePosePair, ZeroRangesGiveSameView) {
  std::mt19937_64 g(2);
  const PoseSE3 ref = incarpose::testing::random_pose(g);
  const PosePair p = sample_pose_pair({0, 0, 0, 0}, ref, g);
  EXPECT_EQ(p.second_view.homogeneous(), ref.homogeneous());
  EXPECT_THROW(sample_pose_pair({-1, 0, 0, 0}, ref, g), InvalidArgument);
}

TEST(SamplePosePair, DefaultsStayInRanges) {
  std::mt19937_64 g(3);
  const SamplingRanges r;
  EXPECT_EQ(r.rot_x_deg, 80.0);
  EXPECT_EQ(r.rot_y_deg, 80.0);
  EXPECT_EQ(r.rot_z_deg, 50.0);
  EXPECT_EQ(r.trans_m, 0.2);
  for (int i = 0; i < 10000; ++i) {
    const PosePair p = sample_pose_pair(r, PoseSE3::identity(), g);
    const EulerExtrinsicXYZ e = matrix_to_euler_extrinsic(p.second_view.rotation);
    ASSERT_LE(std::abs(rad2deg(e.gamma)), 80.0 + 1e-9);
    ASSERT_LE(std::abs(rad2deg(e.beta)), 80.0 + 1e-9);
    ASSERT_LE(std::abs(rad2deg(e.alpha)), 50.0 + 1e-9);
    for (int k = 0; k < 3; ++k) ASSERT_LE(std::abs(p.second_view.translation[k]), 0.2);
  }
}

TEST(SamplePosePair, UniformStatistics) {
  std::mt19937_64 g(4);
  const SamplingRanges r;
  constexpr int n = 100000;
  std::array<double, 6> s{}, s2{};
  for (int i = 0; i < n; ++i) {
    const PosePair p = sample_pose_pair(r, PoseSE3::identity(), g);
    const EulerExtrinsicXYZ e = matrix_to_euler_extrinsic(p.second_view.rotation);
    const std::array<double, 6> v{rad2deg(e.gamma), rad2deg(e.beta), rad2deg(e.alpha), p.second_view.translation.x(),
                                  p.second_view.translation.y(), p.second_view.translation.z()};
    for (int k = 0; k < 6; ++k) {
      s[k] += v[k];
      s2[k] += v[k] * v[k];
    }
  }
  const std::array<double, 6> half{80, 80, 50, 0.2, 0.2, 0.2};
  for (int k = 0; k < 6; ++k) {
    const double sigma = half[k] / std::sqrt(3.0);
    EXPECT_LT(std::abs(s[k] / n), 3.0 * sigma / std::sqrt(n)) << k;
    EXPECT_NEAR(s2[k] / n, sigma * sigma, 0.02 * sigma * sigma) << k;
  }
}

TEST(SamplePosePair, PerturbationInCameraFrame) {
  std::mt19937_64 g(5), g2(5);
  const PoseSE3 ref{RotationMatrix::from_matrix(incarpose::testing::Ry(0.5)), Translation(1, 2, 3)};
  const PosePair p = sample_pose_pair({}, ref, g);
  const PosePair at_origin = sample_pose_pair({}, PoseSE3::identity(), g2);
  const PoseSE3 rel = relative_pose(ref, p.second_view);
  EXPECT_LT((rel.homogeneous() - at_origin.second_view.homogeneous()).norm(), 1e-12);
}

TEST(Dataset, SinglePairWithZeroRangesHasIdentityTarget) {
  const SyntheticDataset d = make_dataset(1, {7}, {0, 0, 0, 0}, FisheyeCamera::square(32, 10.0), 1);
  ASSERT_EQ(d.samples.size(), 1u);
  EXPECT_EQ(d.samples[0].target.homogeneous(), Mat4::Identity());
  EXPECT_EQ(d.samples[0].img_ref, d.samples[0].img_2);
}

TEST(Dataset, RegenerationOracle) {
  const FisheyeCamera cam = FisheyeCamera::square(32, 10.0);
  const std::vector<std::uint64_t> seeds{11, 12, 13};
  const SyntheticDataset d = make_dataset(20, seeds, {}, cam, 9);
  ASSERT_EQ(d.samples.size(), 20u);
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    const Scene s = make_scene(seeds[d.scene_index[i]]);
    EXPECT_EQ(d.scene_index[i], i % 3);
    EXPECT_EQ(render_fisheye(s, cam, d.views[i].ref_view), d.samples[i].img_ref);
    EXPECT_EQ(render_fisheye(s, cam, d.views[i].second_view), d.samples[i].img_2);
    const PoseSE3 rel = relative_pose(d.views[i].ref_view, d.views[i].second_view);
    EXPECT_LT((rel.homogeneous() - d.samples[i].target.homogeneous()).norm(), 1e-12);
    const PoseSE3 back = compose(d.views[i].ref_view, d.samples[i].target);
    EXPECT_LT((back.homogeneous() - d.views[i].second_view.homogeneous()).norm(), 1e-12);
  }
}

TEST(Dataset, PureFunctionOfInputs) {
  const FisheyeCamera cam = FisheyeCamera::square(32, 10.0);
  const SyntheticDataset a = make_dataset(6, {1, 2}, {}, cam, 4), b = make_dataset(6, {1, 2}, {}, cam, 4);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(a.samples[i].img_2, b.samples[i].img_2);
    EXPECT_EQ(a.samples[i].target.homogeneous(), b.samples[i].target.homogeneous());
  }
  // A prefix of a longer dataset is the shorter dataset.
  const SyntheticDataset c = make_dataset(9, {1, 2}, {}, cam, 4);
  EXPECT_EQ(c.samples[5].img_2, a.samples[5].img_2);
  EXPECT_THROW(make_dataset(0, {1}, {}, cam, 4), InvalidArgument);
  EXPECT_THROW(make_dataset(1, {}, {}, cam, 4), InvalidArgument);
}

TEST(Dataset, SplitUsesDisjointScenes) {
  const TrainValSplit s = make_train_val_split(16, 6, 3);
  EXPECT_EQ(s.train.samples.size(), 16u);
  EXPECT_EQ(s.val.samples.size(), 6u);
  EXPECT_EQ(s.train.scene_seeds.size(), 8u);
  EXPECT_EQ(s.val.scene_seeds.size(), 3u);
  for (std::uint64_t a : s.train.scene_seeds)
    for (std::uint64_t b : s.val.scene_seeds) EXPECT_NE(a, b);
}
