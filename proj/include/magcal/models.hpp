/*
 *  Copyright (C) 2026 The magcal Authors
 *
 *  SPDX-License-Identifier: Apache-2.0
 *  See the file LICENSE for more information.
 */

#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Dense>

#include "magcal/error.hpp"
#include "magcal/so3.hpp"

namespace magcal
{

using RotationTrajectory = std::vector<Rotation>;

inline constexpr double kDegToRad = std::numbers::pi / 180.0;
inline constexpr double kRadToDeg = 180.0 / std::numbers::pi;

/// Unknown calibration parameters.
///
/// Units: accel_bias m/s^2, gyro_bias rad/s, mag_bias in magnetometer units
/// (the reference field has unit norm), dip_angle rad.
struct CalibrationParams
{
  Vec3 accel_bias = Vec3::Zero();
  Vec3 gyro_bias = Vec3::Zero();
  Mat3 mag_distortion = Mat3::Identity();
  Vec3 mag_bias = Vec3::Zero();
  double dip_angle = 0.0;

  bool operator==(const CalibrationParams&) const = default;

  void validate() const
  {
    if (!accel_bias.allFinite() || !gyro_bias.allFinite() || !mag_distortion.allFinite() ||
        !mag_bias.allFinite() || !std::isfinite(dip_angle))
      throw Error(ErrorCode::kNonFinite, "calibration parameters contain non-finite values");
    if (std::abs(dip_angle) >= 0.5 * std::numbers::pi)
      throw Error(ErrorCode::kDomain, "dip angle must lie in (-pi/2, pi/2)");
    Eigen::JacobiSVD<Mat3> svd(mag_distortion);
    const auto& s = svd.singularValues();
    if (s(2) <= 0.0 || s(0) / s(2) >= 1e3)
      throw Error(ErrorCode::kDomain, "magnetometer distortion matrix is ill-conditioned");
  }
};

/// Factored magnetometer distortion D = D_diag * D_skew * R_D.
struct DistortionFactors
{
  Vec3 scales = Vec3::Ones();
  Vec3 skew_angles = Vec3::Zero(); // zeta, eta, rho
  Rotation alignment;              // magnetometer -> IMU frame
};

inline Mat3 skew_matrix(const Vec3& skew_angles)
{
  const double zeta = skew_angles(0);
  const double eta = skew_angles(1);
  const double rho = skew_angles(2);
  Mat3 m;
  m << 1.0, 0.0, 0.0,                                                  //
      std::sin(zeta), std::cos(zeta), 0.0,                             //
      -std::sin(eta), std::cos(eta) * std::sin(rho), std::cos(eta) * std::cos(rho);
  return m;
}

inline Mat3 compose_distortion(const DistortionFactors& f)
{
  if ((f.scales.array() <= 0.0).any())
    throw Error(ErrorCode::kDomain, "distortion scale factors must be positive");
  return f.scales.asDiagonal() * skew_matrix(f.skew_angles) * f.alignment.matrix();
}

/// Gravity and normalized magnetic field in the reference frame.
struct ReferenceField
{
  double gravity = 9.81;

  Vec3 gravity_vector() const { return {0.0, 0.0, gravity}; }

  static Vec3 magnetic_direction(double dip_angle)
  {
    return {0.0, std::cos(dip_angle), -std::sin(dip_angle)};
  }
};

/// Per-sample noise standard deviations, per axis.
struct NoiseConfig
{
  Vec3 sigma_accel = Vec3::Constant(0.1);
  Vec3 sigma_gyro = Vec3::Constant(1e-3);
  Vec3 sigma_mag = Vec3::Constant(0.01);

  Mat3 accel_covariance() const { return sigma_accel.cwiseAbs2().asDiagonal(); }
  Mat3 gyro_covariance() const { return sigma_gyro.cwiseAbs2().asDiagonal(); }
  Mat3 mag_covariance() const { return sigma_mag.cwiseAbs2().asDiagonal(); }
};

/// Sensor noise densities per sqrt(Hz): accel m/s^2, gyro rad/s, mag field units.
struct NoiseDensity
{
  double accel = 0.02;
  double gyro = 0.05 * kDegToRad;
  double mag = 0.003;

  /// Per-sample deviations for an IMU at imu_rate_hz whose accelerometer and
  /// magnetometer aiding samples arrive at imu_rate_hz / aiding_ratio.
  NoiseConfig at_rate(double imu_rate_hz, int aiding_ratio = 1) const
  {
    const double aiding_rate = imu_rate_hz / static_cast<double>(aiding_ratio);
    NoiseConfig n;
    n.sigma_accel = Vec3::Constant(accel * std::sqrt(aiding_rate));
    n.sigma_gyro = Vec3::Constant(gyro * std::sqrt(imu_rate_hz));
    n.sigma_mag = Vec3::Constant(mag * std::sqrt(aiding_rate));
    return n;
  }
};

/// Time-stamped IMU/magnetometer streams on a uniform grid.
///
/// Row k holds the gyroscope sample that drives the rotation from epoch k to
/// k + 1. Magnetometer samples exist exactly on keyframe rows (k % rate_ratio
/// == 0); accelerometer samples exist at least there.
struct Dataset
{
  double dt = 0.0;
  double start_time = 0.0;
  int rate_ratio = 1;
  std::vector<Vec3> gyro;
  std::vector<std::optional<Vec3>> accel;
  std::vector<std::optional<Vec3>> mag;

  std::size_t size() const { return gyro.size(); }
  double rate_hz() const { return 1.0 / dt; }
  double time(std::size_t k) const { return start_time + static_cast<double>(k) * dt; }
  bool is_keyframe(std::size_t k) const { return k % static_cast<std::size_t>(rate_ratio) == 0; }
  std::size_t keyframe_count() const
  {
    return size() == 0 ? 0 : (size() - 1) / static_cast<std::size_t>(rate_ratio) + 1;
  }
  std::size_t keyframe_row(std::size_t l) const { return l * static_cast<std::size_t>(rate_ratio); }
  const Vec3& keyframe_accel(std::size_t l) const { return *accel[keyframe_row(l)]; }
  const Vec3& keyframe_mag(std::size_t l) const { return *mag[keyframe_row(l)]; }

  bool operator==(const Dataset&) const = default;

  void validate() const
  {
    if (!(dt > 0.0) || !std::isfinite(dt))
      throw Error(ErrorCode::kInvalidArgument, "dataset sample interval must be positive");
    if (rate_ratio < 1)
      throw Error(ErrorCode::kInconsistentRateRatio, "rate ratio must be at least 1");
    if (accel.size() != size() || mag.size() != size())
      throw Error(ErrorCode::kInvalidArgument, "dataset streams have different lengths");
    if (size() < 2)
      throw Error(ErrorCode::kInvalidArgument, "dataset needs at least two samples");
    for (std::size_t k = 0; k < size(); ++k)
    {
      if (!gyro[k].allFinite() || (accel[k] && !accel[k]->allFinite()) ||
          (mag[k] && !mag[k]->allFinite()))
        throw Error(ErrorCode::kNonFiniteField, "non-finite sample at row " + std::to_string(k));
      if (mag[k].has_value() != is_keyframe(k))
        throw Error(ErrorCode::kInconsistentRateRatio,
                    "magnetometer samples do not match rate ratio at row " + std::to_string(k));
      if (is_keyframe(k) && !accel[k])
        throw Error(ErrorCode::kInconsistentRateRatio,
                    "missing accelerometer sample on keyframe row " + std::to_string(k));
    }
  }
};

/// Keeps every factor-th magnetometer sample; the IMU streams are untouched.
inline Dataset downsample(const Dataset& data, int factor)
{
  if (factor < 1)
    throw Error(ErrorCode::kInvalidArgument, "downsample factor must be at least 1");
  Dataset out = data;
  out.rate_ratio = data.rate_ratio * factor;
  for (std::size_t k = 0; k < out.size(); ++k)
  {
    if (!out.is_keyframe(k))
      out.mag[k].reset();
  }
  return out;
}

/// Noise-free state transition R_k Exp((u - b) dt).
inline Rotation propagate(const Rotation& rotation, const Vec3& gyro, const Vec3& gyro_bias, double dt)
{
  if (!(dt > 0.0))
    throw Error(ErrorCode::kInvalidArgument, "propagate: dt must be positive");
  return rotation * exp_map((gyro - gyro_bias) * dt);
}

/// Specific force in the IMU frame: -R^T g + o_a.
inline Vec3 accel_model(const Rotation& rotation, const CalibrationParams& params,
                        const ReferenceField& field = {})
{
  return -(rotation.matrix().transpose() * field.gravity_vector()) + params.accel_bias;
}

/// Magnetometer reading: D R^T m(alpha) + o_m.
inline Vec3 mag_model(const Rotation& rotation, const CalibrationParams& params)
{
  return params.mag_distortion * (rotation.matrix().transpose() *
                                  ReferenceField::magnetic_direction(params.dip_angle)) +
         params.mag_bias;
}

/// Gyro-rate mismatch u - Log(R_k^T R_k1) / dt - o_w implied by two states.
inline Vec3 transition_deviation(const Rotation& r_k, const Rotation& r_k1, const Vec3& gyro,
                                 const Vec3& gyro_bias, double dt)
{
  return gyro - log_map(r_k.transpose() * r_k1) / dt - gyro_bias;
}

/// Log of the small-noise transition density p(R_k1 | R_k, u, theta).
inline double transition_log_density(const Rotation& r_k, const Rotation& r_k1, const Vec3& gyro,
                                     const CalibrationParams& params, const NoiseConfig& noise,
                                     double dt)
{
  if (!(dt > 0.0))
    throw Error(ErrorCode::kInvalidArgument, "transition_log_density: dt must be positive");
  const Vec3 deviation = transition_deviation(r_k, r_k1, gyro, params.gyro_bias, dt);
  const Mat3 cov = noise.gyro_covariance();
  const double mahalanobis = deviation.dot(cov.ldlt().solve(deviation));
  const double log_det = std::log((2.0 * std::numbers::pi * cov).determinant());
  return -0.5 * mahalanobis - 0.5 * log_det;
}

} // namespace magcal
