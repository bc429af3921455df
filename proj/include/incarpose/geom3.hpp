#pragma once

// SO(3)/SE(3) value types, the five rotation parameterizations and the
// conversions among them. Everything here is a pure function on values.

#include <Eigen/Core>
#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "incarpose/errors.hpp"

namespace incarpose {

using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

// Translation in meters.
using Translation = Vec3;

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kSo3Tolerance = 1e-9;
inline constexpr double kRotvecSmallAngle = 1e-6;
inline constexpr double kGimbalTolerance = 1e-7;

inline double deg2rad(double d) { return d * kPi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / kPi; }

inline bool all_finite(const auto& m) { return m.allFinite(); }

inline bool is_so3(const Mat3& m, double tol = kSo3Tolerance) {
  if (!m.allFinite()) return false;
  const double ortho = (m.transpose() * m - Mat3::Identity()).norm();
  return ortho <= tol && std::abs(m.determinant() - 1.0) <= tol;
}

/// Proper rotation matrix. Construction through from_matrix() enforces
/// mᵀm = I and det(m) = +1 to 1e-9.
class RotationMatrix {
 public:
  RotationMatrix() : m_(Mat3::Identity()) {}

  static RotationMatrix from_matrix(const Mat3& m, double tol = kSo3Tolerance) {
    if (!is_so3(m, tol)) {
      throw DomainError("matrix is not in SO(3)");
    }
    return RotationMatrix(m);
  }

  // For matrices that are rotations by construction (products of rotations,
  // closed-form conversions).
  static RotationMatrix unchecked(const Mat3& m) { return RotationMatrix(m); }

  static RotationMatrix identity() { return {}; }

  const Mat3& matrix() const { return m_; }
  double operator()(int r, int c) const { return m_(r, c); }

  RotationMatrix transpose() const { return RotationMatrix(m_.transpose()); }
  RotationMatrix operator*(const RotationMatrix& o) const { return RotationMatrix(m_ * o.m_); }
  Vec3 operator*(const Vec3& v) const { return m_ * v; }

 private:
  explicit RotationMatrix(const Mat3& m) : m_(m) {}
  Mat3 m_;
};

struct UnitQuaternion {
  double w = 1.0;
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  Vec4 coeffs() const { return {w, x, y, z}; }
  static UnitQuaternion from_coeffs(const Vec4& c) { return {c[0], c[1], c[2], c[3]}; }
  UnitQuaternion operator-() const { return {-w, -x, -y, -z}; }
  double norm() const { return coeffs().norm(); }
  bool operator==(const UnitQuaternion&) const = default;
};

// Axis scaled by angle, radians.
struct RotationVector {
  double wx = 0.0;
  double wy = 0.0;
  double wz = 0.0;

  Vec3 vec() const { return {wx, wy, wz}; }
  static RotationVector from_vec(const Vec3& v) { return {v[0], v[1], v[2]}; }
};

// R = R_z(alpha) R_y'(beta) R_x''(gamma); flattened as [alpha, beta, gamma].
struct EulerIntrinsicZYX {
  double alpha = 0.0;
  double beta = 0.0;
  double gamma = 0.0;
};

// Fixed-axis x, then y, then z; flattened as [gamma, beta, alpha].
struct EulerExtrinsicXYZ {
  double gamma = 0.0;
  double beta = 0.0;
  double alpha = 0.0;
};

struct PoseSE3 {
  RotationMatrix rotation;
  Translation translation = Translation::Zero();

  static PoseSE3 identity() { return {}; }

  Mat4 homogeneous() const {
    Mat4 h = Mat4::Identity();
    h.topLeftCorner<3, 3>() = rotation.matrix();
    h.topRightCorner<3, 1>() = translation;
    return h;
  }
};

enum class ReprTag { rotvec, euler_int, euler_ext, quat, matrix };

inline constexpr std::array<ReprTag, 5> kAllReprTags = {
    ReprTag::rotvec, ReprTag::euler_int, ReprTag::euler_ext, ReprTag::quat, ReprTag::matrix};

// Alternative order matches ReprTag.
using RotationRepr =
    std::variant<RotationVector, EulerIntrinsicZYX, EulerExtrinsicXYZ, UnitQuaternion, RotationMatrix>;

inline ReprTag repr_tag(const RotationRepr& r) { return static_cast<ReprTag>(r.index()); }

inline std::string_view to_string(ReprTag t) {
  switch (t) {
    case ReprTag::rotvec: return "rotvec";
    case ReprTag::euler_int: return "euler_int";
    case ReprTag::euler_ext: return "euler_ext";
    case ReprTag::quat: return "quat";
    case ReprTag::matrix: return "matrix";
  }
  throw InvalidArgument("unknown representation tag");
}

inline ReprTag parse_repr_tag(std::string_view s) {
  for (ReprTag t : kAllReprTags) {
    if (to_string(t) == s) return t;
  }
  throw InvalidArgument("unknown representation tag '" + std::string(s) + "'");
}

/// Number of rotation components in the flattened output vector.
inline std::size_t rotation_dim(ReprTag t) {
  switch (t) {
    case ReprTag::rotvec:
    case ReprTag::euler_int:
    case ReprTag::euler_ext: return 3;
    case ReprTag::quat: return 4;
    case ReprTag::matrix: return 9;
  }
  throw InvalidArgument("unknown representation tag");
}

/// Rotation components plus the appended translation.
inline std::size_t pose_dim(ReprTag t) { return rotation_dim(t) + 3; }

// ---------------------------------------------------------------------------
// Elementary rotations and helpers

inline Mat3 rot_x(double a) {
  const double c = std::cos(a), s = std::sin(a);
  Mat3 m;
  m << 1, 0, 0, 0, c, -s, 0, s, c;
  return m;
}

inline Mat3 rot_y(double a) {
  const double c = std::cos(a), s = std::sin(a);
  Mat3 m;
  m << c, 0, s, 0, 1, 0, -s, 0, c;
  return m;
}

inline Mat3 rot_z(double a) {
  const double c = std::cos(a), s = std::sin(a);
  Mat3 m;
  m << c, -s, 0, s, c, 0, 0, 0, 1;
  return m;
}

inline Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0, -v[2], v[1], v[2], 0, -v[0], -v[1], v[0], 0;
  return m;
}

inline Vec3 vee(const Mat3& m) { return {m(2, 1) - m(1, 2), m(0, 2) - m(2, 0), m(1, 0) - m(0, 1)}; }

// Canonical sign: w > 0, or w == 0 and the first nonzero of (x, y, z) > 0.
inline UnitQuaternion canonicalize(const UnitQuaternion& q) {
  if (q.w > 0.0) return q;
  if (q.w < 0.0) return -q;
  for (double c : {q.x, q.y, q.z}) {
    if (c > 0.0) return q;
    if (c < 0.0) return -q;
  }
  return q;
}

inline bool is_canonical(const UnitQuaternion& q) {
  const UnitQuaternion c = canonicalize(q);
  return c == q;
}

namespace detail {

inline void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw InvalidArgument(std::string(what) + " must be finite");
}

inline const Mat3& require_so3(const Mat3& m) {
  if (!is_so3(m)) throw DomainError("matrix is not in SO(3)");
  return m;
}

// Principal angle in (-pi, pi].
inline double wrap_angle(double a) {
  if (a <= -kPi) return a + 2.0 * kPi;
  if (a > kPi) return a - 2.0 * kPi;
  return a;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Rotation vector

/// Rodrigues' formula, with second-order Taylor coefficients below 1e-6 rad.
inline RotationMatrix rodrigues_to_matrix(const RotationVector& v) {
  detail::require_finite(v.wx, "rotation vector");
  detail::require_finite(v.wy, "rotation vector");
  detail::require_finite(v.wz, "rotation vector");
  const Vec3 w = v.vec();
  const double theta2 = w.squaredNorm();
  const double theta = std::sqrt(theta2);
  double a, b;
  if (theta < kRotvecSmallAngle) {
    a = 1.0 - theta2 / 6.0;
    b = 0.5 - theta2 / 24.0;
  } else {
    a = std::sin(theta) / theta;
    b = (1.0 - std::cos(theta)) / theta2;
  }
  const Mat3 k = skew(w);
  return RotationMatrix::unchecked(Mat3::Identity() + a * k + b * k * k);
}

inline RotationVector matrix_to_rotvec(const RotationMatrix& rot) {
  const Mat3& r = detail::require_so3(rot.matrix());
  const Vec3 v = vee(r);
  const double s = 0.5 * v.norm();
  const double c = std::clamp(0.5 * (r.trace() - 1.0), -1.0, 1.0);
  const double theta = std::atan2(s, c);

  if (theta < kRotvecSmallAngle) {
    // sin(theta)/theta ~ 1 - theta^2/6
    return RotationVector::from_vec(0.5 * v * (1.0 + theta * theta / 6.0));
  }
  if (c > -0.99) {
    return RotationVector::from_vec(v * (theta / (2.0 * std::sin(theta))));
  }

  // Near pi the antisymmetric part vanishes; read the axis from the
  // symmetric part (R + Rᵀ)/2 - cI = (1 - c) u uᵀ instead.
  const Mat3 b = 0.5 * (r + r.transpose()) - c * Mat3::Identity();
  int k = 0;
  b.diagonal().maxCoeff(&k);
  Vec3 axis = b.col(k).normalized();
  if (v.norm() > 1e-12) {
    if (axis.dot(v) < 0.0) axis = -axis;
  } else {
    for (int i = 0; i < 3; ++i) {
      if (axis[i] != 0.0) {
        if (axis[i] < 0.0) axis = -axis;
        break;
      }
    }
  }
  return RotationVector::from_vec(axis * theta);
}

// ---------------------------------------------------------------------------
// Quaternion

inline RotationMatrix quat_to_matrix(const UnitQuaternion& q) {
  if (!q.coeffs().allFinite() || std::abs(q.norm() - 1.0) > kSo3Tolerance) {
    throw DomainError("quaternion is not unit norm");
  }
  const double w = q.w, x = q.x, y = q.y, z = q.z;
  Mat3 m;
  m << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),  //
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),   //
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return RotationMatrix::unchecked(m);
}

/// Shepperd-style extraction: the branch with the largest of
/// {1+tr, 1+2r11-tr, 1+2r22-tr, 1+2r33-tr} is used.
inline UnitQuaternion matrix_to_quat(const RotationMatrix& rot) {
  const Mat3& r = detail::require_so3(rot.matrix());
  const double tr = r.trace();
  const std::array<double, 4> cand = {1 + tr, 1 + 2 * r(0, 0) - tr, 1 + 2 * r(1, 1) - tr,
                                      1 + 2 * r(2, 2) - tr};
  const auto k = std::distance(cand.begin(), std::max_element(cand.begin(), cand.end()));
  const double s = 0.5 * std::sqrt(cand[k]);
  const double f = 0.25 / s;
  UnitQuaternion q;
  switch (k) {
    case 0:
      q = {s, (r(2, 1) - r(1, 2)) * f, (r(0, 2) - r(2, 0)) * f, (r(1, 0) - r(0, 1)) * f};
      break;
    case 1:
      q = {(r(2, 1) - r(1, 2)) * f, s, (r(0, 1) + r(1, 0)) * f, (r(0, 2) + r(2, 0)) * f};
      break;
    case 2:
      q = {(r(0, 2) - r(2, 0)) * f, (r(0, 1) + r(1, 0)) * f, s, (r(1, 2) + r(2, 1)) * f};
      break;
    default:
      q = {(r(1, 0) - r(0, 1)) * f, (r(0, 2) + r(2, 0)) * f, (r(1, 2) + r(2, 1)) * f, s};
      break;
  }
  return canonicalize(UnitQuaternion::from_coeffs(q.coeffs().normalized()));
}

inline UnitQuaternion normalize_quat(std::span<const double, 4> raw) {
  const Vec4 v(raw[0], raw[1], raw[2], raw[3]);
  if (!v.allFinite()) throw DegenerateInput("quaternion has non-finite components");
  const double n = v.norm();
  if (n <= 1e-12) throw DegenerateInput("quaternion norm is near zero");
  return canonicalize(UnitQuaternion::from_coeffs(v / n));
}

inline UnitQuaternion normalize_quat(const Vec4& v) {
  return normalize_quat(std::span<const double, 4>(v.data(), 4));
}

/// Exponential map of a rotation vector straight to a quaternion.
inline UnitQuaternion rotvec_to_quat(const RotationVector& v) {
  const Vec3 w = v.vec();
  const double theta = w.norm();
  const double half = 0.5 * theta;
  const double k = theta < kRotvecSmallAngle ? 0.5 - theta * theta / 48.0 : std::sin(half) / theta;
  return canonicalize({std::cos(half), k * w[0], k * w[1], k * w[2]});
}

// ---------------------------------------------------------------------------
// Euler angles

inline RotationMatrix euler_intrinsic_to_matrix(const EulerIntrinsicZYX& e) {
  detail::require_finite(e.alpha, "euler angle");
  detail::require_finite(e.beta, "euler angle");
  detail::require_finite(e.gamma, "euler angle");
  return RotationMatrix::unchecked(rot_z(e.alpha) * rot_y(e.beta) * rot_x(e.gamma));
}

inline RotationMatrix euler_extrinsic_to_matrix(const EulerExtrinsicXYZ& e) {
  return euler_intrinsic_to_matrix({e.alpha, e.beta, e.gamma});
}

/// Inverse of euler_intrinsic_to_matrix. At gimbal lock (|beta| within
/// 1e-7 of pi/2) gamma is pinned to 0.
inline EulerIntrinsicZYX matrix_to_euler_intrinsic(const RotationMatrix& rot) {
  const Mat3& r = detail::require_so3(rot.matrix());
  const double cb = std::hypot(r(0, 0), r(1, 0));
  const double beta = std::atan2(-r(2, 0), cb);
  EulerIntrinsicZYX e;
  e.beta = beta;
  if (std::abs(std::abs(beta) - 0.5 * kPi) <= kGimbalTolerance) {
    e.gamma = 0.0;
    e.alpha = detail::wrap_angle(std::atan2(-r(0, 1), r(1, 1)));
  } else {
    e.alpha = detail::wrap_angle(std::atan2(r(1, 0), r(0, 0)));
    e.gamma = detail::wrap_angle(std::atan2(r(2, 1), r(2, 2)));
  }
  return e;
}

inline EulerExtrinsicXYZ matrix_to_euler_extrinsic(const RotationMatrix& rot) {
  const EulerIntrinsicZYX e = matrix_to_euler_intrinsic(rot);
  return {e.gamma, e.beta, e.alpha};
}

enum class EulerConvention { intrinsic_zyx, extrinsic_xyz };

inline std::variant<EulerIntrinsicZYX, EulerExtrinsicXYZ> matrix_to_euler(const RotationMatrix& r,
                                                                          EulerConvention conv) {
  if (conv == EulerConvention::intrinsic_zyx) return matrix_to_euler_intrinsic(r);
  return matrix_to_euler_extrinsic(r);
}

// ---------------------------------------------------------------------------
// Projection onto SO(3)

/// Nearest rotation in Frobenius norm: U diag(1, 1, det(UVᵀ)) Vᵀ.
inline RotationMatrix project_to_so3(const Mat3& m) {
  if (!m.allFinite()) throw DegenerateInput("matrix has non-finite entries");
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 s = svd.singularValues();
  if (!(s[0] > 0.0) || s[2] <= 1e-12 * s[0]) {
    throw DegenerateInput("matrix is rank deficient");
  }
  const Mat3& u = svd.matrixU();
  const Mat3& v = svd.matrixV();
  const double d = (u * v.transpose()).determinant() < 0.0 ? -1.0 : 1.0;
  return RotationMatrix::unchecked(u * Vec3(1.0, 1.0, d).asDiagonal() * v.transpose());
}

// ---------------------------------------------------------------------------
// SE(3)

inline PoseSE3 compose(const PoseSE3& a, const PoseSE3& b) {
  return {a.rotation * b.rotation, a.rotation * b.translation + a.translation};
}

inline PoseSE3 inverse(const PoseSE3& a) {
  const RotationMatrix rt = a.rotation.transpose();
  return {rt, -(rt * a.translation)};
}

/// T_rel = T_ref⁻¹ T_view2: the second view expressed in the reference frame.
inline PoseSE3 relative_pose(const PoseSE3& ref, const PoseSE3& view2) {
  const RotationMatrix rt = ref.rotation.transpose();
  return {rt * view2.rotation, rt * (view2.translation - ref.translation)};
}

// ---------------------------------------------------------------------------
// Tagged representations

inline RotationMatrix repr_to_matrix(const RotationRepr& r) {
  return std::visit(
      [](const auto& p) -> RotationMatrix {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, RotationVector>) return rodrigues_to_matrix(p);
        if constexpr (std::is_same_v<T, EulerIntrinsicZYX>) return euler_intrinsic_to_matrix(p);
        if constexpr (std::is_same_v<T, EulerExtrinsicXYZ>) return euler_extrinsic_to_matrix(p);
        if constexpr (std::is_same_v<T, UnitQuaternion>) return quat_to_matrix(p);
        if constexpr (std::is_same_v<T, RotationMatrix>) return RotationMatrix::from_matrix(p.matrix());
      },
      r);
}

inline PoseSE3 repr_to_pose(const RotationRepr& r, const Translation& t) {
  if (!t.allFinite()) throw InvalidArgument("translation must be finite");
  return {repr_to_matrix(r), t};
}

inline RotationRepr pose_to_repr(const PoseSE3& p, ReprTag tag) {
  switch (tag) {
    case ReprTag::rotvec: return matrix_to_rotvec(p.rotation);
    case ReprTag::euler_int: return matrix_to_euler_intrinsic(p.rotation);
    case ReprTag::euler_ext: return matrix_to_euler_extrinsic(p.rotation);
    case ReprTag::quat: return matrix_to_quat(p.rotation);
    case ReprTag::matrix: return RotationMatrix::from_matrix(p.rotation.matrix());
  }
  throw InvalidArgument("unknown representation tag");
}

/// Rotation components in output-vector order (matrix is row-major r11..r33).
inline std::vector<double> flatten(const RotationRepr& r) {
  return std::visit(
      [](const auto& p) -> std::vector<double> {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, RotationVector>) return {p.wx, p.wy, p.wz};
        if constexpr (std::is_same_v<T, EulerIntrinsicZYX>) return {p.alpha, p.beta, p.gamma};
        if constexpr (std::is_same_v<T, EulerExtrinsicXYZ>) return {p.gamma, p.beta, p.alpha};
        if constexpr (std::is_same_v<T, UnitQuaternion>) return {p.w, p.x, p.y, p.z};
        if constexpr (std::is_same_v<T, RotationMatrix>) {
          std::vector<double> out(9);
          for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) out[3 * i + j] = p(i, j);
          return out;
        }
      },
      r);
}

/// Reads a payload back from its flattened components without any
/// projection; the result is validated when converted to a matrix.
inline RotationRepr unflatten(ReprTag tag, std::span<const double> v) {
  if (v.size() != rotation_dim(tag)) {
    throw ShapeError("expected " + std::to_string(rotation_dim(tag)) + " rotation components for " +
                     std::string(to_string(tag)) + ", got " + std::to_string(v.size()));
  }
  switch (tag) {
    case ReprTag::rotvec: return RotationVector{v[0], v[1], v[2]};
    case ReprTag::euler_int: return EulerIntrinsicZYX{v[0], v[1], v[2]};
    case ReprTag::euler_ext: return EulerExtrinsicXYZ{v[0], v[1], v[2]};
    case ReprTag::quat: return UnitQuaternion{v[0], v[1], v[2], v[3]};
    case ReprTag::matrix: {
      Mat3 m;
      m << v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8];
      return RotationMatrix::from_matrix(m);
    }
  }
  throw InvalidArgument("unknown representation tag");
}

/// Flat output vector y = [rotation components, tx, ty, tz].
inline std::vector<double> pose_to_vector(const PoseSE3& p, ReprTag tag) {
  std::vector<double> y = flatten(pose_to_repr(p, tag));
  y.insert(y.end(), p.translation.data(), p.translation.data() + 3);
  return y;
}

inline PoseSE3 vector_to_pose(ReprTag tag, std::span<const double> y) {
  if (y.size() != pose_dim(tag)) {
    throw ShapeError("expected flat vector of length " + std::to_string(pose_dim(tag)) + ", got " +
                     std::to_string(y.size()));
  }
  const std::size_t k = rotation_dim(tag);
  return repr_to_pose(unflatten(tag, y.first(k)), Translation(y[k], y[k + 1], y[k + 2]));
}

}  // namespace incarpose
