#pragma once

// Training targets relative to a reference view, relative camera poses from
// fiducial marker observations, and comparison of two trajectories that
// share a reference view.

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "incarpose/errors.hpp"
#include "incarpose/geom3.hpp"
#include "incarpose/losses.hpp"

namespace incarpose {

struct MarkerObservation {
  std::string image_id;
  std::string marker_id;
  PoseSE3 pose_cam_from_marker;
  double marker_size = 0.07;  // edge length, meters
};

struct Trajectory {
  std::vector<std::pair<std::string, PoseSE3>> entries;
  std::string frame_label = "standard_view";
};

struct GtComparisonRow {
  std::string image_id;
  double rotation_error_deg = 0.0;
  std::optional<double> direction_error_deg;
  double displacement_m = 0.0;
  // Above the gate, but the other trajectory's translation was ~0.
  bool direction_undefined = false;
};

struct ColumnSummary {
  std::size_t count = 0;
  double max = 0.0;
  double mean = 0.0;
  double median = 0.0;
};

struct GtComparison {
  std::vector<GtComparisonRow> rows;
  ColumnSummary rotation_deg;
  ColumnSummary direction_deg;
  ColumnSummary displacement_m;
};

inline constexpr double kDefaultDisplacementThreshold = 0.1;

/// Second view expressed in the reference view's frame.
inline PoseSE3 make_relative_target(const PoseSE3& ref, const PoseSE3& view2) { return relative_pose(ref, view2); }

/// T_{c_j <- c_r} = T_{c_j <- m} T_{c_r <- m}⁻¹ for one marker seen from the
/// reference camera r and the query camera j.
inline PoseSE3 marker_relative_pose(const MarkerObservation& ref_obs, const MarkerObservation& query_obs) {
  if (ref_obs.marker_id != query_obs.marker_id) {
    throw InvalidArgument("marker ids differ: '" + ref_obs.marker_id + "' vs '" + query_obs.marker_id + "'");
  }
  if (!(ref_obs.marker_size > 0.0) || !(query_obs.marker_size > 0.0)) {
    throw InvalidArgument("marker size must be > 0");
  }
  return compose(query_obs.pose_cam_from_marker, inverse(ref_obs.pose_cam_from_marker));
}

struct MarkerRelativeRecord {
  std::string marker_id;
  double marker_size = 0.0;
  PoseSE3 pose;
};

inline MarkerRelativeRecord marker_relative_record(const MarkerObservation& ref_obs,
                                                   const MarkerObservation& query_obs) {
  return {ref_obs.marker_id, ref_obs.marker_size, marker_relative_pose(ref_obs, query_obs)};
}

namespace detail {

inline std::array<double, 7> pose_sort_key(const PoseSE3& p) {
  const UnitQuaternion q = matrix_to_quat(p.rotation);
  return {q.w, q.x, q.y, q.z, p.translation[0], p.translation[1], p.translation[2]};
}

}  // namespace detail

/// Fuses per-marker estimates of one relative pose: rotation is the
/// principal eigenvector of Σ q qᵀ (sign-free chordal mean), translation the
/// arithmetic mean. Inputs are sorted first so the result does not depend
/// on their order.
inline PoseSE3 aggregate_marker_poses(const std::vector<PoseSE3>& per_marker) {
  if (per_marker.empty()) throw InvalidArgument("aggregate_marker_poses: empty list");
  if (per_marker.size() == 1) return per_marker.front();

  std::vector<std::array<double, 7>> keys;
  keys.reserve(per_marker.size());
  for (const PoseSE3& p : per_marker) keys.push_back(detail::pose_sort_key(p));
  std::sort(keys.begin(), keys.end());

  Eigen::Matrix4d m = Eigen::Matrix4d::Zero();
  Vec3 t = Vec3::Zero();
  for (const auto& k : keys) {
    const Vec4 q(k[0], k[1], k[2], k[3]);
    m += q * q.transpose();
    t += Vec3(k[4], k[5], k[6]);
  }
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d> es(m);
  const Vec4 q = es.eigenvectors().col(3).normalized();
  return {quat_to_matrix(canonicalize(UnitQuaternion::from_coeffs(q))), t / static_cast<double>(keys.size())};
}

namespace detail {

inline ColumnSummary summarize(std::vector<double> v) {
  ColumnSummary s;
  s.count = v.size();
  if (v.empty()) return s;
  std::sort(v.begin(), v.end());
  double sum = 0.0;
  for (double x : v) sum += x;
  s.max = v.back();
  s.mean = sum / static_cast<double>(v.size());
  const std::size_t n = v.size();
  s.median = n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  return s;
}

inline void require_unique_ids(const Trajectory& t) {
  std::unordered_set<std::string> seen;
  for (const auto& [id, pose] : t.entries)
    if (!seen.insert(id).second) throw InvalidArgument("duplicate image id '" + id + "' in trajectory");
}

inline double rms_norm(const std::vector<Vec3>& ts) {
  double s = 0.0;
  for (const Vec3& t : ts) s += t.squaredNorm();
  return std::sqrt(s / static_cast<double>(ts.size()));
}

}  // namespace detail

/// Per-image rotation and translation-direction agreement between a metric
/// trajectory `a` (e.g. from markers) and an up-to-scale trajectory `b`.
/// Rows follow the order of `a`. The displacement gate uses ‖t_a‖ in meters;
/// directions are compared after scaling each trajectory by its RMS
/// translation norm over the shared images.
inline GtComparison compare_trajectories(const Trajectory& a, const Trajectory& b,
                                         double displacement_threshold_m = kDefaultDisplacementThreshold) {
  if (!(displacement_threshold_m >= 0.0)) throw InvalidArgument("displacement threshold must be >= 0");
  detail::require_unique_ids(a);
  detail::require_unique_ids(b);

  std::unordered_map<std::string, const PoseSE3*> index;
  for (const auto& [id, pose] : b.entries) index.emplace(id, &pose);

  std::vector<std::pair<const std::string*, std::pair<const PoseSE3*, const PoseSE3*>>> shared;
  for (const auto& [id, pose] : a.entries)
    if (auto it = index.find(id); it != index.end()) shared.push_back({&id, {&pose, it->second}});
  if (shared.empty()) throw EmptyOverlap("trajectories share no image ids");

  std::vector<Vec3> ta, tb;
  for (const auto& s : shared) {
    ta.push_back(s.second.first->translation);
    tb.push_back(s.second.second->translation);
  }
  const double sa = detail::rms_norm(ta), sb = detail::rms_norm(tb);

  GtComparison out;
  std::vector<double> rot, dir, disp;
  for (std::size_t i = 0; i < shared.size(); ++i) {
    const PoseSE3& pa = *shared[i].second.first;
    const PoseSE3& pb = *shared[i].second.second;
    GtComparisonRow row;
    row.image_id = *shared[i].first;
    row.rotation_error_deg = rad2deg(geodesic_distance(pa.rotation, pb.rotation));
    row.displacement_m = pa.translation.norm();
    if (row.displacement_m > displacement_threshold_m) {
      const Vec3 na = sa > 0.0 ? Vec3(pa.translation / sa) : pa.translation;
      const Vec3 nb = sb > 0.0 ? Vec3(pb.translation / sb) : pb.translation;
      try {
        row.direction_error_deg = rad2deg(translation_direction_error(na, nb));
        dir.push_back(*row.direction_error_deg);
      } catch (const UndefinedDirection&) {
        row.direction_undefined = true;
      }
    }
    rot.push_back(row.rotation_error_deg);
    disp.push_back(row.displacement_m);
    out.rows.push_back(std::move(row));
  }
  out.rotation_deg = detail::summarize(std::move(rot));
  out.direction_deg = detail::summarize(std::move(dir));
  out.displacement_m = detail::summarize(std::move(disp));
  return out;
}

}  // namespace incarpose
