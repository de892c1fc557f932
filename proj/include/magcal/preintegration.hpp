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
#include <span>
#include <utility>

#include "magcal/error.hpp"
#include "magcal/residuals.hpp"
#include "magcal/so3.hpp"

namespace magcal
{

/// Gyroscope increments compounded over one keyframe interval.
struct PreintegratedRotation
{
  Rotation delta_rotation;             // product at the nominal bias
  Mat3 bias_jacobian = Mat3::Zero();   // d(delta_rotation) / d(gyro bias)
  Mat3 covariance = Mat3::Identity();
  std::pair<std::size_t, std::size_t> span{0, 0};
  Vec3 nominal_bias = Vec3::Zero();
  Mat3 whitening = Mat3::Identity();   // L with L L^T = covariance^-1
};

/// Isotropic covariance N sigma^2 dt^2 I obtained with J_r ~ I.
inline Mat3 covariance_approx(int count, double sigma_gyro, double dt)
{
  if (count < 1)
    throw Error(ErrorCode::kInvalidArgument, "covariance_approx: count must be at least 1");
  return static_cast<double>(count) * sigma_gyro * sigma_gyro * dt * dt * Mat3::Identity();
}

/// Preintegrates gyro samples [first, first + N) at the nominal bias.
inline PreintegratedRotation integrate(std::span<const Vec3> gyro, const Vec3& nominal_bias,
                                       double dt, double sigma_gyro, std::size_t first = 0)
{
  if (gyro.empty())
    throw Error(ErrorCode::kInvalidArgument, "integrate: empty gyro slice");
  if (!(dt > 0.0))
    throw Error(ErrorCode::kInvalidArgument, "integrate: dt must be positive");

  PreintegratedRotation pre;
  pre.nominal_bias = nominal_bias;
  pre.span = {first, first + gyro.size()};

  // Recursion: J_{k+1} = Exp(phi_k)^T J_k - J_r(phi_k) dt.
  Mat3 delta = Mat3::Identity();
  Mat3 jac = Mat3::Zero();
  int since_renormalize = 0;
  for (const Vec3& sample : gyro)
  {
    const Vec3 phi = (sample - nominal_bias) * dt;
    const Mat3 step = exp_map(phi).matrix();
    jac = step.transpose() * jac - right_jacobian(phi) * dt;
    delta = delta * step;
    if (++since_renormalize >= so3::kRenormalizeInterval)
    {
      delta = Rotation(delta).orthonormalized().matrix();
      since_renormalize = 0;
    }
  }
  pre.delta_rotation = Rotation(delta);
  pre.bias_jacobian = jac;
  pre.covariance = covariance_approx(static_cast<int>(gyro.size()), sigma_gyro, dt);
  pre.whitening = WhiteningFactors::from_covariance(pre.covariance);
  return pre;
}

/// First-order bias correction delta_rotation * Exp(J_b * bias_delta).
inline Rotation corrected_delta(const PreintegratedRotation& pre, const Vec3& bias_delta)
{
  return pre.delta_rotation * exp_map(pre.bias_jacobian * bias_delta);
}

/// r = L_p^T Log(dR^T R_a^T R_b) with Jacobians for both keyframes and the
/// gyro bias increment. `first_state` indexes R_a; R_b is first_state + 1.
inline ResidualBlock residual_preint(const Rotation& r_a, const Rotation& r_b, std::size_t first_state,
                                     const PreintegratedRotation& pre, const Vec3& bias_delta)
{
  const Vec3 bias_step = pre.bias_jacobian * bias_delta;
  const Rotation corrected = pre.delta_rotation * exp_map(bias_step);
  const Rotation q = corrected.transpose() * r_a.transpose() * r_b;
  const Vec3 log_q = log_map(q);
  if (!(log_q.norm() < std::numbers::pi))
    throw Error(ErrorCode::kDomain, "residual_preint: relative rotation reaches pi");

  const Mat3 lt = pre.whitening.transpose();
  const Mat3 jr_inv = right_jacobian_inv(log_q);
  const Mat3 d_state = lt * jr_inv * r_b.matrix().transpose();

  ResidualBlock block;
  block.value = lt * log_q;
  block.add(Variable::state(first_state), -d_state);
  block.add(Variable::state(first_state + 1), d_state);
  block.add(Variable::param(ParamBlock::kGyroBias),
            -lt * jr_inv * q.matrix().transpose() * right_jacobian(bias_step) * pre.bias_jacobian);
  return block;
}

} // namespace magcal
