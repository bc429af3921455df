#pragma once

// Mapping from a raw network output vector to a valid SE(3) pose.

#include <span>
#include <string>

#include "incarpose/errors.hpp"
#include "incarpose/geom3.hpp"

namespace incarpose {

/// Quaternions are normalized, matrices projected onto SO(3) (with the
/// det = +1 correction), rotation vectors and Euler angles converted
/// directly. The translation is passed through unchanged.
inline PoseSE3 postprocess_output(std::span<const double> raw, ReprTag tag) {
  if (raw.size() != pose_dim(tag)) {
    throw ShapeError("raw output has length " + std::to_string(raw.size()) + ", expected " +
                     std::to_string(pose_dim(tag)));
  }
  for (double v : raw)
    if (!std::isfinite(v)) throw DegenerateOutput("raw output has non-finite components");
  const std::size_t k = rotation_dim(tag);
  const Translation t(raw[k], raw[k + 1], raw[k + 2]);
  try {
    switch (tag) {
      case ReprTag::quat:
        return {quat_to_matrix(normalize_quat(std::span<const double, 4>(raw.data(), 4))), t};
      case ReprTag::matrix: {
        Mat3 m;
        m << raw[0], raw[1], raw[2], raw[3], raw[4], raw[5], raw[6], raw[7], raw[8];
        return {project_to_so3(m), t};
      }
      case ReprTag::rotvec: return {rodrigues_to_matrix({raw[0], raw[1], raw[2]}), t};
      case ReprTag::euler_int: return {euler_intrinsic_to_matrix({raw[0], raw[1], raw[2]}), t};
      case ReprTag::euler_ext: return {euler_extrinsic_to_matrix({raw[0], raw[1], raw[2]}), t};
    }
  } catch (const DegenerateOutput&) {
    throw;
  } catch (const DegenerateInput& e) {
    throw DegenerateOutput(e.what());
  }
  throw InvalidArgument("unknown representation tag");
}

}  // namespace incarpose
