/*
 *  Copyright (C) 2026 The magcal Authors
 *
 *  SPDX-License-Identifier: Apache-2.0
 *  See the file LICENSE for more information.
 */

#pragma once

#include <array>
#include <cstddef>
#include <numbers>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "magcal/error.hpp"
#include "magcal/models.hpp"
#include "magcal/so3.hpp"

namespace magcal
{

/// Sub-blocks of the calibration parameter vector, in tangent-space order.
enum class ParamBlock
{
  kAccelBias,
  kGyroBias,
  kMagDistortion,
  kMagBias,
  kDipAngle,
};

inline constexpr int kParamDim = 19;

constexpr int param_offset(ParamBlock block)
{
  switch (block)
  {
    case ParamBlock::kAccelBias: return 0;
    case ParamBlock::kGyroBias: return 3;
    case ParamBlock::kMagDistortion: return 6;
    case ParamBlock::kMagBias: return 15;
    case ParamBlock::kDipAngle: return 18;
  }
  return 0;
}

constexpr int param_dim(ParamBlock block)
{
  switch (block)
  {
    case ParamBlock::kMagDistortion: return 9;
    case ParamBlock::kDipAngle: return 1;
    default: return 3;
  }
}

/// A column range of the problem Jacobian: either a slice of the dense
/// parameter vector or one of the per-epoch states.
struct Variable
{
  enum class Kind
  {
    kParam,
    kState,
  };

  Kind kind = Kind::kParam;
  int index = 0; // parameter offset, or state index
  int dim = 0;

  static Variable param(ParamBlock block) { return {Kind::kParam, param_offset(block), param_dim(block)}; }
  static Variable param(int offset, int dim) { return {Kind::kParam, offset, dim}; }
  static Variable state(std::size_t index, int dim = 3)
  {
    return {Kind::kState, static_cast<int>(index), dim};
  }

  bool is_state() const { return kind == Kind::kState; }
};

/// Whitened 3-vector residual with its Jacobian blocks (at most four).
struct ResidualBlock
{
  static constexpr int kMaxTerms = 4;
  using Jacobian = Eigen::Matrix<double, 3, 9>;

  struct Term
  {
    Variable var;
    Jacobian jacobian = Jacobian::Zero();
  };

  Vec3 value = Vec3::Zero();
  std::array<Term, kMaxTerms> terms{};
  int term_count = 0;

  template <typename Derived>
  void add(const Variable& var, const Eigen::MatrixBase<Derived>& jacobian)
  {
    Term& term = terms[static_cast<std::size_t>(term_count++)];
    term.var = var;
    term.jacobian.setZero();
    term.jacobian.leftCols(var.dim) = jacobian;
  }

  const Term* find(const Variable& var) const
  {
    for (int i = 0; i < term_count; ++i)
    {
      const Term& t = terms[static_cast<std::size_t>(i)];
      if (t.var.kind == var.kind && t.var.index == var.index)
        return &t;
    }
    return nullptr;
  }
};

/// Transposed Cholesky factors of the inverse noise covariances: residuals
/// are L^T e, so that ||L^T e||^2 = e^T Sigma^-1 e.
struct WhiteningFactors
{
  Mat3 accel = Mat3::Identity();
  Mat3 mag = Mat3::Identity();
  Mat3 gyro = Mat3::Identity();

  static Mat3 from_covariance(const Mat3& covariance)
  {
    Eigen::LLT<Mat3> llt(covariance.inverse());
    if (llt.info() != Eigen::Success)
      throw Error(ErrorCode::kDomain, "noise covariance is not positive definite");
    return llt.matrixL();
  }

  static WhiteningFactors from_noise(const NoiseConfig& noise)
  {
    WhiteningFactors w;
    w.accel = from_covariance(noise.accel_covariance());
    w.mag = from_covariance(noise.mag_covariance());
    w.gyro = from_covariance(noise.gyro_covariance());
    return w;
  }
};

/// r = L_a^T (s + R^T g - o_a).
inline ResidualBlock residual_accel(const Rotation& rotation, std::size_t state, const Vec3& accel,
                                    const CalibrationParams& params, const WhiteningFactors& whiten,
                                    const ReferenceField& field = {})
{
  const Mat3 rt = rotation.matrix().transpose();
  const Vec3 gravity_body = rt * field.gravity_vector();
  const Mat3 lt = whiten.accel.transpose();

  ResidualBlock block;
  block.value = lt * (accel + gravity_body - params.accel_bias);
  block.add(Variable::state(state), lt * hat(gravity_body) * rt);
  block.add(Variable::param(ParamBlock::kAccelBias), -lt);
  return block;
}

/// r = L_m^T (m - D R^T m(alpha) - o_m); D enters column-major.
inline ResidualBlock residual_mag(const Rotation& rotation, std::size_t state, const Vec3& mag,
                                  const CalibrationParams& params, const WhiteningFactors& whiten)
{
  const Mat3 rt = rotation.matrix().transpose();
  const Vec3 field_body = rt * ReferenceField::magnetic_direction(params.dip_angle);
  const Mat3& d = params.mag_distortion;
  const Mat3 lt = whiten.mag.transpose();

  ResidualBlock block;
  block.value = lt * (mag - d * field_body - params.mag_bias);
  block.add(Variable::state(state), -lt * d * hat(field_body) * rt);

  // (x^T kron I3) vec(D) = D x
  Eigen::Matrix<double, 3, 9> kron;
  for (int j = 0; j < 3; ++j)
    kron.block<3, 3>(0, 3 * j) = field_body(j) * Mat3::Identity();
  block.add(Variable::param(ParamBlock::kMagDistortion), -lt * kron);

  const Vec3 dfield(0.0, std::sin(params.dip_angle), std::cos(params.dip_angle));
  block.add(Variable::param(ParamBlock::kDipAngle), lt * d * rt * dfield);
  block.add(Variable::param(ParamBlock::kMagBias), -lt);
  return block;
}

/// r = L_w^T (u - Log(R_k^T R_k1) / dt - o_w).
inline ResidualBlock residual_gyro(const Rotation& r_k, const Rotation& r_k1, std::size_t state,
                                   const Vec3& gyro, const CalibrationParams& params,
                                   const WhiteningFactors& whiten, double dt)
{
  const Vec3 delta = log_map(r_k.transpose() * r_k1);
  if (!(delta.norm() < std::numbers::pi))
    throw Error(ErrorCode::kDomain, "residual_gyro: relative rotation reaches pi");

  const Mat3 lt = whiten.gyro.transpose();
  const Mat3 d_state = (1.0 / dt) * lt * right_jacobian_inv(delta) * r_k1.matrix().transpose();

  ResidualBlock block;
  block.value = lt * (gyro - delta / dt - params.gyro_bias);
  block.add(Variable::state(state), d_state);
  block.add(Variable::state(state + 1), -d_state);
  block.add(Variable::param(ParamBlock::kGyroBias), -lt);
  return block;
}

/// Applies a tangent-space increment to the parameters (Euclidean update).
inline CalibrationParams retract_params(const CalibrationParams& params,
                                        const Eigen::Ref<const Eigen::VectorXd>& step)
{
  CalibrationParams out = params;
  out.accel_bias += step.segment<3>(param_offset(ParamBlock::kAccelBias));
  out.gyro_bias += step.segment<3>(param_offset(ParamBlock::kGyroBias));
  for (int j = 0; j < 3; ++j)
    out.mag_distortion.col(j) += step.segment<3>(param_offset(ParamBlock::kMagDistortion) + 3 * j);
  out.mag_bias += step.segment<3>(param_offset(ParamBlock::kMagBias));
  out.dip_angle += step(param_offset(ParamBlock::kDipAngle));
  return out;
}

} // namespace magcal
