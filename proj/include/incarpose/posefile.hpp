#pragma once

// Pose files (JSON lists of poses keyed by image id, optionally with
// reference/query pairs) and per-pair error reports.

#include <array>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "incarpose/errors.hpp"
#include "incarpose/geom3.hpp"
#include "incarpose/labels.hpp"
#include "incarpose/losses.hpp"

namespace incarpose {

inline constexpr double kQuatReadTolerance = 1e-6;
inline constexpr double kQuatRenormTolerance = 1e-9;

/// One pose: quaternion [w, x, y, z] and translation in meters.
struct PoseEntry {
  std::string image_id;
  std::array<double, 4> q{1, 0, 0, 0};
  std::array<double, 3> t_m{0, 0, 0};

  static PoseEntry from_pose(std::string id, const PoseSE3& p) {
    const UnitQuaternion u = matrix_to_quat(p.rotation);
    return {std::move(id), {u.w, u.x, u.y, u.z}, {p.translation.x(), p.translation.y(), p.translation.z()}};
  }

  PoseSE3 pose() const {
    return {quat_to_matrix({q[0], q[1], q[2], q[3]}), Translation(t_m[0], t_m[1], t_m[2])};
  }
};

struct PairRef {
  std::string ref_id;
  std::string query_id;
};

struct PoseFile {
  std::string frame;
  std::vector<PoseEntry> entries;
  std::optional<std::vector<PairRef>> pairs;

  const PoseEntry& find(const std::string& id) const {
    for (const PoseEntry& e : entries)
      if (e.image_id == id) return e;
    throw DataError("pose file has no entry '" + id + "'");
  }

  /// Relative poses keyed by query id: ref⁻¹·query for each pair when the
  /// file lists pairs, otherwise the entries themselves.
  std::vector<std::pair<std::string, PoseSE3>> relative_poses() const {
    std::vector<std::pair<std::string, PoseSE3>> out;
    if (!pairs) {
      for (const PoseEntry& e : entries) out.push_back({e.image_id, e.pose()});
      return out;
    }
    for (const PairRef& p : *pairs) out.push_back({p.query_id, relative_pose(find(p.ref_id).pose(), find(p.query_id).pose())});
    return out;
  }

  Trajectory trajectory() const {
    Trajectory t;
    t.frame_label = frame;
    for (const PoseEntry& e : entries) t.entries.push_back({e.image_id, e.pose()});
    return t;
  }
};

inline nlohmann::json pose_file_to_json(const PoseFile& f) {
  nlohmann::json entries = nlohmann::json::array();
  for (const PoseEntry& e : f.entries) entries.push_back({{"image_id", e.image_id}, {"q", e.q}, {"t_m", e.t_m}});
  nlohmann::json j = {{"frame", f.frame}, {"entries", entries}};
  if (f.pairs) {
    nlohmann::json pairs = nlohmann::json::array();
    for (const PairRef& p : *f.pairs) pairs.push_back({{"ref_id", p.ref_id}, {"query_id", p.query_id}});
    j["pairs"] = pairs;
  }
  return j;
}

/// Quaternions off unit norm by more than 1e-6 are rejected; those off by
/// more than 1e-9 are renormalized with a warning.
inline PoseFile pose_file_from_json(const nlohmann::json& j, std::vector<std::string>* warnings = nullptr) {
  PoseFile f;
  try {
    f.frame = j.at("frame").get<std::string>();
    std::set<std::string> seen;
    for (const auto& e : j.at("entries")) {
      PoseEntry p;
      p.image_id = e.at("image_id").get<std::string>();
      p.q = e.at("q").get<std::array<double, 4>>();
      p.t_m = e.at("t_m").get<std::array<double, 3>>();
      if (!seen.insert(p.image_id).second) throw DataError("duplicate image_id '" + p.image_id + "'");
      for (double v : p.q)
        if (!std::isfinite(v)) throw DataError("non-finite quaternion for '" + p.image_id + "'");
      for (double v : p.t_m)
        if (!std::isfinite(v)) throw DataError("non-finite translation for '" + p.image_id + "'");
      const double n = std::sqrt(p.q[0] * p.q[0] + p.q[1] * p.q[1] + p.q[2] * p.q[2] + p.q[3] * p.q[3]);
      if (std::abs(n - 1.0) > kQuatReadTolerance) {
        throw DataError("quaternion of '" + p.image_id + "' has norm " + std::to_string(n));
      }
      if (std::abs(n - 1.0) > kQuatRenormTolerance) {
        for (double& v : p.q) v /= n;
        if (warnings) warnings->push_back("renormalized quaternion of '" + p.image_id + "'");
      }
      f.entries.push_back(std::move(p));
    }
    if (j.contains("pairs")) {
      f.pairs.emplace();
      for (const auto& p : j.at("pairs")) {
        PairRef r{p.at("ref_id").get<std::string>(), p.at("query_id").get<std::string>()};
        if (!seen.count(r.ref_id) || !seen.count(r.query_id)) {
          throw DataError("pair (" + r.ref_id + ", " + r.query_id + ") references a missing entry");
        }
        f.pairs->push_back(std::move(r));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed pose file: ") + e.what());
  }
  return f;
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("'" + path + "' is not valid JSON: " + e.what());
  }
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << text;
  if (!out) throw DataError("failed writing '" + path + "'");
}

inline PoseFile read_pose_file(const std::string& path, std::vector<std::string>* warnings = nullptr) {
  return pose_file_from_json(read_json_file(path), warnings);
}

inline void write_pose_file(const std::string& path, const PoseFile& f) {
  write_text_file(path, pose_file_to_json(f).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Error reports

inline constexpr double kMinGtTranslationForDirection = 1e-6;

struct ErrorRow {
  std::string pair;
  double rot_deg = 0.0;
  double trans_m = 0.0;
  std::optional<double> dir_deg;
};

struct ErrorReport {
  std::vector<ErrorRow> rows;
  ColumnSummary rot_deg;
  ColumnSummary trans_m;
  ColumnSummary dir_deg;
  std::vector<std::string> missing_in_pred;
  std::vector<std::string> missing_in_gt;

  bool ids_match() const { return missing_in_pred.empty() && missing_in_gt.empty(); }
};

/// Per-pair rotation (degrees), translation (meters) and direction
/// (degrees) errors of predicted relative poses against ground truth,
/// rows in ground-truth order. Direction is left out when the ground-truth
/// translation is shorter than 1e-6 m or the prediction has none.
inline ErrorReport evaluate_pose_files(const PoseFile& pred, const PoseFile& gt) {
  const auto p = pred.relative_poses(), g = gt.relative_poses();
  std::map<std::string, PoseSE3> pm;
  for (const auto& [id, pose] : p) {
    if (!pm.emplace(id, pose).second) throw DataError("duplicate prediction id '" + id + "'");
  }
  ErrorReport r;
  std::set<std::string> gt_ids;
  std::vector<double> rot, trans, dir;
  for (const auto& [id, gpose] : g) {
    if (!gt_ids.insert(id).second) throw DataError("duplicate ground-truth id '" + id + "'");
    const auto it = pm.find(id);
    if (it == pm.end()) {
      r.missing_in_pred.push_back(id);
      continue;
    }
    ErrorRow row{id, rad2deg(geodesic_distance(it->second.rotation, gpose.rotation)),
                 euclidean_translation_error(it->second.translation, gpose.translation), std::nullopt};
    if (gpose.translation.norm() >= kMinGtTranslationForDirection && it->second.translation.norm() > kMinDirectionNorm) {
      row.dir_deg = rad2deg(translation_direction_error(it->second.translation, gpose.translation));
      dir.push_back(*row.dir_deg);
    }
    rot.push_back(row.rot_deg);
    trans.push_back(row.trans_m);
    r.rows.push_back(std::move(row));
  }
  for (const auto& [id, pose] : p)
    if (!gt_ids.count(id)) r.missing_in_gt.push_back(id);
  r.rot_deg = detail::summarize(std::move(rot));
  r.trans_m = detail::summarize(std::move(trans));
  r.dir_deg = detail::summarize(std::move(dir));
  return r;
}

/// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

/// CSV `pair,rot_deg,trans_m,dir_deg` with `#mean` and `#median` footers.
inline std::string report_csv(const ErrorReport& r) {
  std::ostringstream out;
  out << "pair,rot_deg,trans_m,dir_deg\n";
  for (const ErrorRow& row : r.rows) {
    out << row.pair << ',' << format_double(row.rot_deg) << ',' << format_double(row.trans_m) << ','
        << (row.dir_deg ? format_double(*row.dir_deg) : "") << '\n';
  }
  const auto cell = [](const ColumnSummary& s, double v) { return s.count ? format_double(v) : std::string(); };
  out << "#mean," << cell(r.rot_deg, r.rot_deg.mean) << ',' << cell(r.trans_m, r.trans_m.mean) << ','
      << cell(r.dir_deg, r.dir_deg.mean) << '\n';
  out << "#median," << cell(r.rot_deg, r.rot_deg.median) << ',' << cell(r.trans_m, r.trans_m.median) << ','
      << cell(r.dir_deg, r.dir_deg.median) << '\n';
  return out.str();
}

}  // namespace incarpose
