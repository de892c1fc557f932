/*
 *  Copyright (C) 2026 The magcal Authors
 *
 *  SPDX-License-Identifier: Apache-2.0
 *  See the file LICENSE for more information.
 */

#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Core>
#include <Eigen/Dense>

#include "magcal/error.hpp"

namespace magcal
{

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

namespace so3
{

// Below this angle the closed forms switch to their Taylor expansions.
inline constexpr double kSmallAngle = 1e-5;

// Rotation chains longer than this are re-orthonormalized.
inline constexpr int kRenormalizeInterval = 100;

} // namespace so3

/// Element of SO(3), stored as a 3x3 rotation matrix.
///
/// The constructor does not project its argument; use Rotation::project() for
/// matrices that are only approximately orthonormal.
class Rotation
{
public:
  Rotation() : m_matrix(Mat3::Identity()) {}
  explicit Rotation(const Mat3& matrix) : m_matrix(matrix) {}

  static Rotation identity() { return Rotation(); }

  /// Closest rotation in Frobenius norm (SVD projection).
  static Rotation project(const Mat3& matrix)
  {
    Eigen::JacobiSVD<Mat3> svd(matrix, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 u = svd.matrixU();
    const Mat3 v = svd.matrixV();
    if ((u * v.transpose()).determinant() < 0.0)
      u.col(2) *= -1.0;
    return Rotation(u * v.transpose());
  }

  const Mat3& matrix() const { return m_matrix; }
  Rotation transpose() const { return Rotation(m_matrix.transpose()); }
  Rotation inverse() const { return transpose(); }

  Rotation operator*(const Rotation& other) const { return Rotation(m_matrix * other.m_matrix); }
  Vec3 operator*(const Vec3& v) const { return m_matrix * v; }

  /// One Newton step of the polar decomposition, R (3I - R^T R) / 2.
  Rotation orthonormalized() const
  {
    return Rotation(0.5 * m_matrix * (3.0 * Mat3::Identity() - m_matrix.transpose() * m_matrix));
  }

  double orthogonality_error() const
  {
    return (m_matrix * m_matrix.transpose() - Mat3::Identity()).norm();
  }

  bool is_valid(double tol = 1e-9) const
  {
    return m_matrix.allFinite() && orthogonality_error() <= tol &&
           std::abs(m_matrix.determinant() - 1.0) <= tol;
  }

  bool operator==(const Rotation& other) const { return m_matrix == other.m_matrix; }

private:
  Mat3 m_matrix;
};

/// Skew-symmetric matrix with hat(v) * w == v.cross(w).
inline Mat3 hat(const Vec3& v)
{
  Mat3 m;
  m << 0.0, -v.z(), v.y(), //
      v.z(), 0.0, -v.x(),  //
      -v.y(), v.x(), 0.0;
  return m;
}

/// Inverse of hat() on the skew part of m.
inline Vec3 vee(const Mat3& m)
{
  return {0.5 * (m(2, 1) - m(1, 2)), 0.5 * (m(0, 2) - m(2, 0)), 0.5 * (m(1, 0) - m(0, 1))};
}

/// Rodrigues formula; Taylor series below so3::kSmallAngle.
inline Rotation exp_map(const Vec3& v)
{
  const double theta2 = v.squaredNorm();
  const double theta = std::sqrt(theta2);
  const Mat3 k = hat(v);
  double a = 0.0;
  double b = 0.0;
  if (theta < so3::kSmallAngle)
  {
    a = 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0;
    b = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0;
  }
  else
  {
    a = std::sin(theta) / theta;
    const double half = std::sin(0.5 * theta);
    b = 2.0 * half * half / theta2;
  }
  return Rotation(Mat3::Identity() + a * k + b * k * k);
}

/// Axis-angle vector of R with norm in [0, pi].
///
/// The angle comes from atan2 of the skew and trace parts, which keeps full
/// precision at both ends of the range. Close to pi the axis is read from the
/// symmetric part R + R^T instead of the vanishing skew part.
inline Vec3 log_map(const Rotation& rotation)
{
  const Mat3& r = rotation.matrix();
  const Vec3 skew = vee(r); // sin(theta) * axis
  const double sin_theta = skew.norm();
  const double cos_theta = 0.5 * (r.trace() - 1.0);
  const double theta = std::atan2(sin_theta, cos_theta);

  if (theta < so3::kSmallAngle)
  {
    // theta / sin(theta) = 1 + theta^2 / 6 + 7 theta^4 / 360
    const double t2 = theta * theta;
    return (1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0) * skew;
  }

  if (cos_theta > -0.9)
    return (theta / sin_theta) * skew;

  // R + R^T = 2 cos(theta) I + 2 (1 - cos(theta)) a a^T
  const Mat3 outer = (0.5 * (r + r.transpose()) - cos_theta * Mat3::Identity()) / (1.0 - cos_theta);
  Eigen::Index col = 0;
  outer.diagonal().maxCoeff(&col);
  Vec3 axis = outer.col(col) / std::sqrt(std::max(outer(col, col), 0.0));
  axis.normalize();
  if (axis.dot(skew) < 0.0)
    axis = -axis;
  return theta * axis;
}

/// Right Jacobian J_r(v) = I - (1 - cos t)/t^2 v^ + (t - sin t)/t^3 (v^)^2.
inline Mat3 right_jacobian(const Vec3& v)
{
  const double theta2 = v.squaredNorm();
  const double theta = std::sqrt(theta2);
  const Mat3 k = hat(v);
  double a = 0.0;
  double b = 0.0;
  if (theta < so3::kSmallAngle)
  {
    a = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0;
    b = 1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0;
  }
  else
  {
    const double half = std::sin(0.5 * theta);
    a = 2.0 * half * half / theta2;
    b = (theta - std::sin(theta)) / (theta2 * theta);
  }
  return Mat3::Identity() - a * k + b * k * k;
}

/// Closed-form inverse of right_jacobian(); defined for |v| < pi.
inline Mat3 right_jacobian_inv(const Vec3& v)
{
  const double theta2 = v.squaredNorm();
  const double theta = std::sqrt(theta2);
  if (!(theta < std::numbers::pi))
    throw Error(ErrorCode::kDomain, "right_jacobian_inv: rotation angle must be below pi");

  const Mat3 k = hat(v);
  double c = 0.0;
  if (theta < so3::kSmallAngle)
    c = 1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0;
  else
    c = 1.0 / theta2 - (1.0 + std::cos(theta)) / (2.0 * theta * std::sin(theta));
  return Mat3::Identity() + 0.5 * k + c * k * k;
}

/// Angle in radians of the relative rotation a^T b.
inline double angular_distance(const Rotation& a, const Rotation& b)
{
  return log_map(a.transpose() * b).norm();
}

/// Z-Y-X Euler composition Rz(yaw) Ry(pitch) Rx(roll), active rotations.
inline Rotation from_euler(double roll, double pitch, double yaw)
{
  const Eigen::AngleAxisd rx(roll, Vec3::UnitX());
  const Eigen::AngleAxisd ry(pitch, Vec3::UnitY());
  const Eigen::AngleAxisd rz(yaw, Vec3::UnitZ());
  return Rotation((rz * ry * rx).toRotationMatrix());
}

} // namespace magcal
