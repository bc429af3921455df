#pragma once

// Procedural cabin-like point scenes rendered through an equidistant
// fisheye camera from randomly perturbed pose pairs.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "incarpose/errors.hpp"
#include "incarpose/geom3.hpp"
#include "incarpose/imageproc.hpp"
#include "incarpose/labels.hpp"
#include "incarpose/model.hpp"
#include "incarpose/tensor.hpp"

namespace incarpose {

struct ScenePoint {
  Vec3 position;  // meters, scene frame
  double intensity = 0.0;
  double radius = 0.0;  // meters
};

struct Scene {
  std::vector<ScenePoint> points;
  std::uint64_t seed = 0;
};

/// Box-shaped cabin around the origin: front wall at z = 1.0, back wall at
/// z = -1.2, side walls at x = ±0.8, floor and ceiling at y = ±0.6. Each
/// surface has its own base brightness.
struct CabinLayout {
  double half_x = 0.8;
  double half_y = 0.6;
  double z_front = 1.0;
  double z_back = -1.2;
  std::array<double, 6> face_brightness{0.9, 0.3, 0.6, 0.5, 0.2, 0.7};
  double min_radius = 0.02;
  double max_radius = 0.06;
};

inline Scene make_scene(std::uint64_t seed, int n_points = 400, const CabinLayout& box = {}) {
  if (n_points < 1) throw InvalidArgument("scene needs at least one point");
  std::mt19937_64 g(seed);
  const auto uni = [&g](double lo, double hi) { return lo + (hi - lo) * detail::unit_uniform(g); };
  Scene s;
  s.seed = seed;
  const double depth = box.z_front - box.z_back;
  for (int i = 0; i < n_points; ++i) {
    const int face = static_cast<int>(g() % 6);
    const double u = uni(-1.0, 1.0), v = uni(-1.0, 1.0);
    const double zu = (u + 1.0) / 2.0 * depth + box.z_back, zv = (v + 1.0) / 2.0 * depth + box.z_back;
    Vec3 p;
    switch (face) {
      case 0: p = {u * box.half_x, v * box.half_y, box.z_front}; break;
      case 1: p = {u * box.half_x, v * box.half_y, box.z_back}; break;
      case 2: p = {box.half_x, v * box.half_y, zu}; break;
      case 3: p = {-box.half_x, v * box.half_y, zu}; break;
      case 4: p = {u * box.half_x, box.half_y, zv}; break;
      default: p = {u * box.half_x, -box.half_y, zv}; break;
    }
    const double intensity = box.face_brightness[face] * uni(0.5, 1.0);
    s.points.push_back({p, intensity, uni(box.min_radius, box.max_radius)});
  }
  return s;
}

/// Uniform half-ranges of the view perturbation, in degrees and meters.
struct SamplingRanges {
  double rot_x_deg = 80.0;
  double rot_y_deg = 80.0;
  double rot_z_deg = 50.0;
  double trans_m = 0.2;

  void validate() const {
    if (!(rot_x_deg >= 0 && rot_y_deg >= 0 && rot_z_deg >= 0 && trans_m >= 0)) {
      throw InvalidArgument("sampling ranges must be >= 0");
    }
  }
};

/// Equidistant fisheye: a ray at angle θ from the optical axis (+z) lands
/// at radius focal·θ from the principal point, along its azimuth.
struct FisheyeCamera {
  double focal = 10.0;  // pixels per radian
  double cx = 15.5;
  double cy = 15.5;
  int width = 32;
  int height = 32;
  double fov_deg = 180.0;

  static FisheyeCamera square(int size, double focal) {
    const double c = (size - 1) / 2.0;
    return {focal, c, c, size, size, 180.0};
  }

  void validate() const {
    if (!(focal > 0.0)) throw InvalidArgument("fisheye focal must be > 0");
    if (width < 1 || height < 1) throw InvalidArgument("fisheye resolution must be >= 1");
    if (!(fov_deg > 0.0 && fov_deg <= 360.0)) throw InvalidArgument("fisheye fov must be in (0, 360]");
  }

  /// Pixel (u, v) of a camera-frame point, or nothing outside the field of view.
  std::optional<std::array<double, 2>> project(const Vec3& pc) const {
    const double theta = std::atan2(std::hypot(pc.x(), pc.y()), pc.z());
    if (theta >= deg2rad(fov_deg) / 2.0) return std::nullopt;
    const double phi = std::atan2(pc.y(), pc.x()), r = focal * theta;
    return std::array<double, 2>{cx + r * std::cos(phi), cy + r * std::sin(phi)};
  }
};

inline constexpr double kSplatCutoffSigmas = 5.0;

/// Grayscale render of a scene seen by a camera at `pose` (camera to scene).
/// Each visible point adds a Gaussian sprite whose width follows its
/// projected radius (at least half a pixel); the sum is clamped to [0, 1].
inline ImageF render_fisheye(const Scene& scene, const FisheyeCamera& cam, const PoseSE3& pose) {
  cam.validate();
  ImageF img(cam.height, cam.width, 1);
  const Mat3 rt = pose.rotation.matrix().transpose();
  for (const ScenePoint& p : scene.points) {
    const Vec3 pc = rt * (p.position - pose.translation);
    const auto uv = cam.project(pc);
    if (!uv) continue;
    const double dist = pc.norm();
    const double sigma = std::max(0.5, cam.focal * p.radius / dist);
    const double reach = kSplatCutoffSigmas * sigma;
    const int x0 = std::max(0, static_cast<int>(std::floor((*uv)[0] - reach)));
    const int x1 = std::min(cam.width - 1, static_cast<int>(std::ceil((*uv)[0] + reach)));
    const int y0 = std::max(0, static_cast<int>(std::floor((*uv)[1] - reach)));
    const int y1 = std::min(cam.height - 1, static_cast<int>(std::ceil((*uv)[1] + reach)));
    const double inv = 1.0 / (2.0 * sigma * sigma);
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double dx = x - (*uv)[0], dy = y - (*uv)[1];
        img.data[static_cast<std::size_t>(y) * cam.width + x] += p.intensity * std::exp(-(dx * dx + dy * dy) * inv);
      }
  }
  for (double& v : img.data) v = std::clamp(v, 0.0, 1.0);
  return img;
}

struct PosePair {
  PoseSE3 ref_view;
  PoseSE3 second_view;
};

/// Perturbation R = Rz(a)·Ry(b)·Rx(c) with uniform angles and a uniform
/// per-axis translation, applied in the reference camera frame.
inline PosePair sample_pose_pair(const SamplingRanges& ranges, const PoseSE3& reference, std::mt19937_64& rng) {
  ranges.validate();
  const auto uni = [&rng](double half) { return half * (2.0 * detail::unit_uniform(rng) - 1.0); };
  const double gx = deg2rad(uni(ranges.rot_x_deg));
  const double by = deg2rad(uni(ranges.rot_y_deg));
  const double az = deg2rad(uni(ranges.rot_z_deg));
  const double tx = uni(ranges.trans_m), ty = uni(ranges.trans_m), tz = uni(ranges.trans_m);
  const PoseSE3 pert{euler_extrinsic_to_matrix({gx, by, az}), Translation(tx, ty, tz)};
  return {reference, compose(reference, pert)};
}

struct SyntheticDataset {
  std::vector<PairSample> samples;
  std::vector<PosePair> views;
  std::vector<std::size_t> scene_index;
  std::vector<std::uint64_t> scene_seeds;
};

/// Seed of pair i derived from the dataset seed.
inline std::uint64_t pair_seed(std::uint64_t seed, std::size_t i) {
  return detail::splitmix64(detail::splitmix64(seed) ^ static_cast<std::uint64_t>(i));
}

/// n_pairs pairs cycling through the scenes; pair i draws its perturbation
/// from its own derived seed, so datasets are a pure function of the inputs.
inline SyntheticDataset make_dataset(std::size_t n_pairs, const std::vector<std::uint64_t>& scene_seeds,
                                     const SamplingRanges& ranges, const FisheyeCamera& cam, std::uint64_t seed,
                                     const PoseSE3& reference = PoseSE3::identity()) {
  if (n_pairs < 1) throw InvalidArgument("make_dataset: n_pairs must be >= 1");
  if (scene_seeds.empty()) throw InvalidArgument("make_dataset: need at least one scene seed");
  ranges.validate();
  cam.validate();
  std::vector<Scene> scenes;
  std::vector<ImageF> ref_images;
  for (std::uint64_t s : scene_seeds) {
    scenes.push_back(make_scene(s));
    ref_images.push_back(render_fisheye(scenes.back(), cam, reference));
  }
  SyntheticDataset d;
  d.scene_seeds = scene_seeds;
  for (std::size_t i = 0; i < n_pairs; ++i) {
    const std::size_t k = i % scenes.size();
    std::mt19937_64 rng(pair_seed(seed, i));
    const PosePair views = sample_pose_pair(ranges, reference, rng);
    d.samples.push_back({ref_images[k], render_fisheye(scenes[k], cam, views.second_view),
                         make_relative_target(views.ref_view, views.second_view)});
    d.views.push_back(views);
    d.scene_index.push_back(k);
  }
  return d;
}

struct TrainValSplit {
  SyntheticDataset train;
  SyntheticDataset val;
};

/// Scene seeds of the training and validation splits; never equal.
inline std::pair<std::vector<std::uint64_t>, std::vector<std::uint64_t>> split_scene_seeds(std::uint64_t seed,
                                                                                           int train_scenes,
                                                                                           int val_scenes) {
  if (train_scenes < 1 || val_scenes < 1) throw InvalidArgument("need at least one scene per split");
  const std::uint64_t base = detail::splitmix64(seed);
  std::vector<std::uint64_t> ts, vs;
  for (int i = 0; i < train_scenes; ++i) ts.push_back(base + 2 * static_cast<std::uint64_t>(i));
  for (int i = 0; i < val_scenes; ++i) vs.push_back(base + 2 * static_cast<std::uint64_t>(i) + 1);
  return {ts, vs};
}

/// Seed for drawing the validation pairs of a split.
inline std::uint64_t val_pair_seed(std::uint64_t seed) { return detail::splitmix64(seed ^ 0x5A17ULL); }

/// Training and validation sets drawn from disjoint scene seeds.
inline TrainValSplit make_train_val_split(std::size_t train_pairs, std::size_t val_pairs, std::uint64_t seed,
                                          const SamplingRanges& ranges = {},
                                          const FisheyeCamera& cam = FisheyeCamera::square(32, 10.0),
                                          int train_scenes = 8, int val_scenes = 3) {
  const auto [ts, vs] = split_scene_seeds(seed, train_scenes, val_scenes);
  return {make_dataset(train_pairs, ts, ranges, cam, seed), make_dataset(val_pairs, vs, ranges, cam, val_pair_seed(seed))};
}

}  // namespace incarpose
