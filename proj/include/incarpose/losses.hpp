#pragma once

// Rotation/translation error metrics, the composite training losses built
// from them, and analytic gradients of those losses with respect to the raw
// network output vector.
//
// Angles are computed with atan2 of a (sin, cos) pair rather than acos of
// the clamped cosine. The two are the same function on valid inputs; the
// atan2 form keeps full precision near 0 and pi, where acos loses half the
// significant digits.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "incarpose/errors.hpp"
#include "incarpose/geom3.hpp"
#include "incarpose/postprocess.hpp"

namespace incarpose {

enum class TranslationMode { euclidean_m, direction_rad };

struct LossConfig {
  double alpha = 1.0;
  TranslationMode translation_mode = TranslationMode::euclidean_m;

  void validate() const {
    if (!(alpha > 0.0) || !std::isfinite(alpha)) throw InvalidArgument("loss alpha must be > 0");
  }
};

enum class LossId { universal, reloc3r, mse, quat_pose_metric, quat_pose_direction };

inline constexpr std::array<LossId, 5> kAllLossIds = {LossId::universal, LossId::reloc3r, LossId::mse,
                                                      LossId::quat_pose_metric, LossId::quat_pose_direction};

inline std::string_view to_string(LossId id) {
  switch (id) {
    case LossId::universal: return "universal";
    case LossId::reloc3r: return "reloc3r";
    case LossId::mse: return "mse";
    case LossId::quat_pose_metric: return "quat_pose_metric";
    case LossId::quat_pose_direction: return "quat_pose_direction";
  }
  throw InvalidArgument("unknown loss id");
}

inline LossId parse_loss_id(std::string_view s) {
  for (LossId id : kAllLossIds)
    if (to_string(id) == s) return id;
  throw InvalidArgument("unknown loss id '" + std::string(s) + "'");
}

// Width of the band next to an arccos endpoint where the gradient is
// defined as zero.
inline constexpr double kArccosGuard = 1e-7;
inline constexpr double kMinDirectionNorm = 1e-9;

// ---------------------------------------------------------------------------
// Individual metrics

/// Minimum rotation angle aligning r_est with r_gt, in [0, pi].
inline double geodesic_distance(const Mat3& r_est, const Mat3& r_gt) {
  if (!is_so3(r_est) || !is_so3(r_gt)) throw DomainError("geodesic_distance: input is not in SO(3)");
  const Mat3 d = r_est.transpose() * r_gt;
  const double c = std::clamp(0.5 * (d.trace() - 1.0), -1.0, 1.0);
  return std::atan2(0.5 * vee(d).norm(), c);
}

inline double geodesic_distance(const RotationMatrix& r_est, const RotationMatrix& r_gt) {
  return geodesic_distance(r_est.matrix(), r_gt.matrix());
}

namespace detail {

// Angle between unit vectors a and b, robust at 0 and pi.
template <typename V>
double unit_vector_angle(const V& a, const V& b) {
  return 2.0 * std::atan2((a - b).norm(), (a + b).norm());
}

}  // namespace detail

/// 2 arccos(|q_estᵀ q_gt|): rotation angle between the quaternions,
/// insensitive to the sign of either.
inline double quaternion_error(const UnitQuaternion& q_est, const UnitQuaternion& q_gt) {
  const Vec4 a = q_est.coeffs(), b = q_gt.coeffs();
  if (!a.allFinite() || !b.allFinite() || std::abs(a.norm() - 1.0) > kSo3Tolerance ||
      std::abs(b.norm() - 1.0) > kSo3Tolerance) {
    throw DomainError("quaternion_error: input is not a unit quaternion");
  }
  const Vec4 bs = a.dot(b) < 0.0 ? Vec4(-b) : b;
  return 2.0 * detail::unit_vector_angle(a, bs);
}

inline double euclidean_translation_error(const Translation& t_est, const Translation& t_gt) {
  return (t_est - t_gt).norm();
}

/// Angle between translation vectors; scale invariant. Throws
/// UndefinedDirection when either vector has norm <= 1e-9.
inline double translation_direction_error(const Translation& t_est, const Translation& t_gt) {
  const double ne = t_est.norm(), ng = t_gt.norm();
  if (!(ne > kMinDirectionNorm) || !(ng > kMinDirectionNorm)) {
    throw UndefinedDirection("translation direction undefined for near-zero vector");
  }
  return detail::unit_vector_angle(Vec3(t_est / ne), Vec3(t_gt / ng));
}

// ---------------------------------------------------------------------------
// Composite losses. Batch expectations are arithmetic means.

namespace detail {

template <typename T>
void require_same_batch(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) {
    throw ShapeError("batch size mismatch: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  }
  if (a.empty()) throw InvalidArgument("empty batch");
}

}  // namespace detail

inline double universal_loss(const PoseSE3& pred, const PoseSE3& gt, const LossConfig& cfg) {
  cfg.validate();
  return geodesic_distance(pred.rotation, gt.rotation) +
         cfg.alpha * euclidean_translation_error(pred.translation, gt.translation);
}

/// E[e_rot_geo] + alpha E[e_trans_eucl].
inline double universal_loss(std::span<const PoseSE3> pred, std::span<const PoseSE3> gt, const LossConfig& cfg) {
  detail::require_same_batch(pred, gt);
  cfg.validate();
  double rot = 0.0, trans = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    rot += geodesic_distance(pred[i].rotation, gt[i].rotation);
    trans += euclidean_translation_error(pred[i].translation, gt[i].translation);
  }
  const double n = static_cast<double>(pred.size());
  return rot / n + cfg.alpha * trans / n;
}

inline double reloc3r_loss(const PoseSE3& pred, const PoseSE3& gt, const LossConfig& cfg) {
  cfg.validate();
  return geodesic_distance(pred.rotation, gt.rotation) +
         cfg.alpha * translation_direction_error(pred.translation, gt.translation);
}

/// E[e_rot_geo + alpha e_trans_dir].
inline double reloc3r_loss(std::span<const PoseSE3> pred, std::span<const PoseSE3> gt, const LossConfig& cfg) {
  detail::require_same_batch(pred, gt);
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) sum += reloc3r_loss(pred[i], gt[i], cfg);
  return sum / static_cast<double>(pred.size());
}

/// (1/d) ‖y_est - y_gt‖².
inline double mse_loss(std::span<const double> y_est, std::span<const double> y_gt) {
  if (y_est.size() != y_gt.size()) {
    throw ShapeError("mse_loss length mismatch: " + std::to_string(y_est.size()) + " vs " +
                     std::to_string(y_gt.size()));
  }
  if (y_est.empty()) throw InvalidArgument("mse_loss on empty vectors");
  double s = 0.0;
  for (std::size_t i = 0; i < y_est.size(); ++i) s += (y_est[i] - y_gt[i]) * (y_est[i] - y_gt[i]);
  return s / static_cast<double>(y_est.size());
}

inline double translation_term(const Translation& t_est, const Translation& t_gt, TranslationMode mode) {
  return mode == TranslationMode::euclidean_m ? euclidean_translation_error(t_est, t_gt)
                                              : translation_direction_error(t_est, t_gt);
}

inline double quaternion_pose_loss(const UnitQuaternion& q_est, const Translation& t_est,
                                   const UnitQuaternion& q_gt, const Translation& t_gt, const LossConfig& cfg) {
  cfg.validate();
  return quaternion_error(q_est, q_gt) + cfg.alpha * translation_term(t_est, t_gt, cfg.translation_mode);
}

/// E[e_rot_quat] + alpha E[e_trans], e_trans chosen by cfg.translation_mode.
inline double quaternion_pose_loss(std::span<const UnitQuaternion> q_est, std::span<const Translation> t_est,
                                   std::span<const UnitQuaternion> q_gt, std::span<const Translation> t_gt,
                                   const LossConfig& cfg) {
  detail::require_same_batch(q_est, q_gt);
  detail::require_same_batch(t_est, t_gt);
  detail::require_same_batch(q_est, std::span<const UnitQuaternion>(q_est.data(), t_est.size()));
  cfg.validate();
  double rot = 0.0, trans = 0.0;
  for (std::size_t i = 0; i < q_est.size(); ++i) {
    rot += quaternion_error(q_est[i], q_gt[i]);
    trans += translation_term(t_est[i], t_gt[i], cfg.translation_mode);
  }
  const double n = static_cast<double>(q_est.size());
  return rot / n + cfg.alpha * trans / n;
}

enum class BidirectionalReduction { sum, mean };

inline double reduce_bidirectional(double forward_loss, double inverse_loss, BidirectionalReduction r) {
  const double s = forward_loss + inverse_loss;
  return r == BidirectionalReduction::sum ? s : 0.5 * s;
}

// ---------------------------------------------------------------------------
// Losses on raw network outputs and their gradients

struct LossEvaluation {
  double value = 0.0;
  std::vector<double> gradient;  // d value / d raw
  // Set when a term sat at a non-differentiable point (arccos endpoint,
  // zero translation residual); that term contributes a zero gradient.
  bool at_boundary = false;
};

namespace detail {

inline void require_quat_tag(LossId id, ReprTag tag) {
  if ((id == LossId::quat_pose_metric || id == LossId::quat_pose_direction) && tag != ReprTag::quat) {
    throw InvalidArgument(std::string(to_string(id)) + " requires the quat representation");
  }
}

inline Translation raw_translation(ReprTag tag, std::span<const double> raw) {
  const std::size_t k = rotation_dim(tag);
  return {raw[k], raw[k + 1], raw[k + 2]};
}

inline Mat3 drz(double a) {
  Mat3 m;
  m << -std::sin(a), -std::cos(a), 0, std::cos(a), -std::sin(a), 0, 0, 0, 0;
  return m;
}
inline Mat3 dry(double a) {
  Mat3 m;
  m << -std::sin(a), 0, std::cos(a), 0, 0, 0, -std::cos(a), 0, -std::sin(a);
  return m;
}
inline Mat3 drx(double a) {
  Mat3 m;
  m << 0, 0, 0, 0, -std::sin(a), -std::cos(a), 0, std::cos(a), -std::sin(a);
  return m;
}

inline double frob(const Mat3& a, const Mat3& b) { return (a.array() * b.array()).sum(); }

/// Pulls a gradient g = d f / d R back through the raw -> rotation map of
/// the given representation. Returns d f / d raw_rotation.
inline std::vector<double> rotation_vjp(ReprTag tag, std::span<const double> raw, const Mat3& g) {
  switch (tag) {
    case ReprTag::quat: {
      const Vec4 r(raw[0], raw[1], raw[2], raw[3]);
      const double n = r.norm();
      const Vec4 q = r / n;
      const double w = q[0], x = q[1], y = q[2], z = q[3];
      // d R_ij / d (w, x, y, z) for the unit-quaternion matrix.
      Vec4 dq = Vec4::Zero();
      const auto acc = [&](int i, int j, double a, double b, double c, double d) {
        dq += g(i, j) * Vec4(a, b, c, d);
      };
      acc(0, 0, 0, 0, -4 * y, -4 * z);
      acc(0, 1, -2 * z, 2 * y, 2 * x, -2 * w);
      acc(0, 2, 2 * y, 2 * z, 2 * w, 2 * x);
      acc(1, 0, 2 * z, 2 * y, 2 * x, 2 * w);
      acc(1, 1, 0, -4 * x, 0, -4 * z);
      acc(1, 2, -2 * x, -2 * w, 2 * z, 2 * y);
      acc(2, 0, -2 * y, 2 * z, -2 * w, 2 * x);
      acc(2, 1, 2 * x, 2 * w, 2 * z, 2 * y);
      acc(2, 2, 0, -4 * x, -4 * y, 0);
      const Vec4 dr = (dq - q * q.dot(dq)) / n;
      return {dr[0], dr[1], dr[2], dr[3]};
    }
    case ReprTag::matrix: {
      // R = U Vᵀ with the det correction folded into U and S. For
      // dR = U Ω Vᵀ, Ω_ij = (X_ij - X_ji) / (s_i + s_j), X = Uᵀ dM V, so the
      // pullback is U K Vᵀ with K_ij = (H_ij - H_ji) / (s_i + s_j), H = Uᵀ g V.
      Mat3 m;
      m << raw[0], raw[1], raw[2], raw[3], raw[4], raw[5], raw[6], raw[7], raw[8];
      Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
      Mat3 u = svd.matrixU();
      const Mat3& v = svd.matrixV();
      Vec3 s = svd.singularValues();
      if ((u * v.transpose()).determinant() < 0.0) {
        u.col(2) = -u.col(2);
        s[2] = -s[2];
      }
      const Mat3 h = u.transpose() * g * v;
      Mat3 k = Mat3::Zero();
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
          if (i != j) {
            const double denom = s[i] + s[j];
            if (std::abs(denom) <= 1e-12 * std::abs(s[0])) {
              throw DegenerateOutput("rotation projection is not differentiable at this matrix");
            }
            k(i, j) = (h(i, j) - h(j, i)) / denom;
          }
      const Mat3 dm = u * k * v.transpose();
      std::vector<double> out(9);
      for (int i = 0; i < 9; ++i) out[i] = dm(i / 3, i % 3);
      return out;
    }
    case ReprTag::rotvec: {
      // R = I + A(θ) K + B(θ) K², K = [ω]×.
      const Vec3 w(raw[0], raw[1], raw[2]);
      const double th2 = w.squaredNorm();
      const double th = std::sqrt(th2);
      double a, b, da, db;  // da = A'(θ)/θ, db = B'(θ)/θ
      if (th < 1e-2) {
        a = 1.0 - th2 / 6.0 + th2 * th2 / 120.0;
        b = 0.5 - th2 / 24.0 + th2 * th2 / 720.0;
        da = -1.0 / 3.0 + th2 / 30.0 - th2 * th2 / 840.0;
        db = -1.0 / 12.0 + th2 / 180.0 - th2 * th2 / 6720.0;
      } else {
        const double sn = std::sin(th), cs = std::cos(th);
        a = sn / th;
        b = (1.0 - cs) / th2;
        da = (th * cs - sn) / (th2 * th);
        db = (th * sn - 2.0 * (1.0 - cs)) / (th2 * th2);
      }
      const Mat3 k = skew(w);
      const Mat3 k2 = k * k;
      const double gk = frob(g, k), gk2 = frob(g, k2);
      std::vector<double> out(3);
      for (int i = 0; i < 3; ++i) {
        const Mat3 e = skew(Vec3::Unit(i));
        out[i] = da * w[i] * gk + a * frob(g, e) + db * w[i] * gk2 + b * frob(g, e * k + k * e);
      }
      return out;
    }
    case ReprTag::euler_int:
    case ReprTag::euler_ext: {
      const bool ext = tag == ReprTag::euler_ext;
      const double alpha = ext ? raw[2] : raw[0];
      const double beta = raw[1];
      const double gamma = ext ? raw[0] : raw[2];
      const Mat3 rz = rot_z(alpha), ry = rot_y(beta), rx = rot_x(gamma);
      const double ga = frob(g, drz(alpha) * ry * rx);
      const double gb = frob(g, rz * dry(beta) * rx);
      const double gg = frob(g, rz * ry * drx(gamma));
      if (ext) return {gg, gb, ga};
      return {ga, gb, gg};
    }
  }
  throw InvalidArgument("unknown representation tag");
}

struct TermGrad {
  double value = 0.0;
  bool boundary = false;
};

// Geodesic term and its gradient with respect to R_est.
inline TermGrad geodesic_term(const Mat3& r_est, const Mat3& r_gt, Mat3& grad_r) {
  TermGrad t;
  t.value = geodesic_distance(r_est, r_gt);
  const double c = 0.5 * ((r_est.transpose() * r_gt).trace() - 1.0);
  if (c >= 1.0 - kArccosGuard || c <= -1.0 + kArccosGuard) {
    grad_r.setZero();
    t.boundary = true;
  } else {
    grad_r = (-0.5 / std::sqrt(1.0 - c * c)) * r_gt;
  }
  return t;
}

inline TermGrad euclidean_term(const Translation& t_est, const Translation& t_gt, Vec3& grad_t) {
  TermGrad t;
  const Vec3 d = t_est - t_gt;
  t.value = d.norm();
  if (t.value <= 1e-12) {
    grad_t.setZero();
    t.boundary = true;
  } else {
    grad_t = d / t.value;
  }
  return t;
}

inline TermGrad direction_term(const Translation& t_est, const Translation& t_gt, Vec3& grad_t) {
  TermGrad t;
  t.value = translation_direction_error(t_est, t_gt);
  const double n = t_est.norm();
  const Vec3 u = t_est / n, v = t_gt.normalized();
  const double c = u.dot(v);
  if (c >= 1.0 - kArccosGuard || c <= -1.0 + kArccosGuard) {
    grad_t.setZero();
    t.boundary = true;
  } else {
    grad_t = (-1.0 / std::sqrt(1.0 - c * c)) * (v - c * u) / n;
  }
  return t;
}

}  // namespace detail

/// Value of a training loss evaluated on one raw output vector (rotation
/// components followed by translation) against a ground-truth pose.
inline double loss_value(LossId id, ReprTag tag, std::span<const double> raw, const PoseSE3& gt,
                         const LossConfig& cfg) {
  detail::require_quat_tag(id, tag);
  cfg.validate();
  if (raw.size() != pose_dim(tag)) {
    throw ShapeError("raw output has length " + std::to_string(raw.size()) + ", expected " +
                     std::to_string(pose_dim(tag)));
  }
  if (id == LossId::mse) {
    const std::vector<double> y_gt = pose_to_vector(gt, tag);
    return mse_loss(raw, y_gt);
  }
  const PoseSE3 pred = postprocess_output(raw, tag);
  switch (id) {
    case LossId::universal: return universal_loss(pred, gt, cfg);
    case LossId::reloc3r: return reloc3r_loss(pred, gt, cfg);
    case LossId::quat_pose_metric:
    case LossId::quat_pose_direction: {
      LossConfig c = cfg;
      c.translation_mode =
          id == LossId::quat_pose_metric ? TranslationMode::euclidean_m : TranslationMode::direction_rad;
      return quaternion_pose_loss(matrix_to_quat(pred.rotation), pred.translation, matrix_to_quat(gt.rotation),
                                  gt.translation, c);
    }
    case LossId::mse: break;
  }
  throw InvalidArgument("unknown loss id");
}

/// Analytic gradient of loss_value with respect to the raw output vector.
inline LossEvaluation loss_gradient(LossId id, ReprTag tag, std::span<const double> raw, const PoseSE3& gt,
                                    const LossConfig& cfg) {
  detail::require_quat_tag(id, tag);
  cfg.validate();
  const std::size_t d = pose_dim(tag);
  if (raw.size() != d) {
    throw ShapeError("raw output has length " + std::to_string(raw.size()) + ", expected " + std::to_string(d));
  }
  LossEvaluation out;
  out.gradient.assign(d, 0.0);

  if (id == LossId::mse) {
    const std::vector<double> y_gt = pose_to_vector(gt, tag);
    out.value = mse_loss(raw, y_gt);
    for (std::size_t i = 0; i < d; ++i) out.gradient[i] = 2.0 * (raw[i] - y_gt[i]) / static_cast<double>(d);
    return out;
  }

  const std::size_t k = rotation_dim(tag);
  const PoseSE3 pred = postprocess_output(raw, tag);
  const Translation t_est = detail::raw_translation(tag, raw);
  Vec3 grad_t = Vec3::Zero();
  detail::TermGrad rot, trans;

  const bool direction = id == LossId::reloc3r || id == LossId::quat_pose_direction;
  trans = direction ? detail::direction_term(t_est, gt.translation, grad_t)
                    : detail::euclidean_term(t_est, gt.translation, grad_t);

  if (id == LossId::universal || id == LossId::reloc3r) {
    Mat3 grad_r;
    rot = detail::geodesic_term(pred.rotation.matrix(), gt.rotation.matrix(), grad_r);
    const std::vector<double> gr = detail::rotation_vjp(tag, raw.first(k), grad_r);
    std::copy(gr.begin(), gr.end(), out.gradient.begin());
  } else {
    // e = 2 acos(|q̂ · q_gt|) through q̂ = raw / ‖raw‖.
    const Vec4 r(raw[0], raw[1], raw[2], raw[3]);
    const double n = r.norm();
    const Vec4 q = r / n;
    const UnitQuaternion q_gt = matrix_to_quat(gt.rotation);
    rot.value = quaternion_error(UnitQuaternion::from_coeffs(q), q_gt);
    const double dot = q.dot(q_gt.coeffs());
    if (std::abs(dot) >= 1.0 - kArccosGuard) {
      rot.boundary = true;
    } else {
      const double sgn = dot < 0.0 ? -1.0 : 1.0;
      const Vec4 dq = (-2.0 * sgn / std::sqrt(1.0 - dot * dot)) * q_gt.coeffs();
      const Vec4 dr = (dq - q * q.dot(dq)) / n;
      for (int i = 0; i < 4; ++i) out.gradient[i] = dr[i];
    }
  }

  out.value = rot.value + cfg.alpha * trans.value;
  for (int i = 0; i < 3; ++i) out.gradient[k + i] = cfg.alpha * grad_t[i];
  out.at_boundary = rot.boundary || trans.boundary;
  return out;
}

}  // namespace incarpose
