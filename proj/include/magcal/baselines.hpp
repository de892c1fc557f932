/*
 *  Copyright (C) 2026 The magcal Authors
 *
 *  SPDX-License-Identifier: Apache-2.0
 *  See the file LICENSE for more information.
 */

#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "magcal/error.hpp"
#include "magcal/init.hpp"
#include "magcal/models.hpp"
#include "magcal/parallel.hpp"
#include "magcal/residuals.hpp"
#include "magcal/so3.hpp"

namespace magcal
{

inline constexpr int kAugmentedDim = 3 + kParamDim;

using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat6 = Eigen::Matrix<double, 6, 6>;
using ParamVector = Eigen::Matrix<double, kParamDim, 1>;
using AugmentedCovariance = Eigen::Matrix<double, kAugmentedDim, kAugmentedDim>;

/// Prior standard deviations for the filter baselines. Bias and distortion
/// defaults are the standard deviations of the simulation's uniform ranges.
struct FilterPrior
{
  double rotation_std = 5.0 * kDegToRad;
  double accel_bias_std = 1.0 / std::sqrt(12.0);
  double gyro_bias_std = 0.2 * kDegToRad / std::sqrt(12.0);
  double mag_distortion_diag_std = 0.2 / std::sqrt(12.0);
  double mag_distortion_offdiag_std = 2.0 * std::sin(15.0 * kDegToRad) / std::sqrt(12.0);
  double mag_bias_std = 4.0 / std::sqrt(12.0);
  double dip_angle_std = 5.0 * kDegToRad;

  /// Standard deviation per theta coordinate (theta layout of residuals.hpp).
  ParamVector param_std() const
  {
    ParamVector s;
    s.segment<3>(param_offset(ParamBlock::kAccelBias)).setConstant(accel_bias_std);
    s.segment<3>(param_offset(ParamBlock::kGyroBias)).setConstant(gyro_bias_std);
    for (int j = 0; j < 3; ++j)
    {
      for (int i = 0; i < 3; ++i)
        s(param_offset(ParamBlock::kMagDistortion) + 3 * j + i) =
            i == j ? mag_distortion_diag_std : mag_distortion_offdiag_std;
    }
    s.segment<3>(param_offset(ParamBlock::kMagBias)).setConstant(mag_bias_std);
    s(param_offset(ParamBlock::kDipAngle)) = dip_angle_std;
    return s;
  }
};

namespace detail
{

struct StackedMeasurement
{
  Vec6 innovation = Vec6::Zero();
  Eigen::Matrix<double, 6, kAugmentedDim> jacobian = Eigen::Matrix<double, 6, kAugmentedDim>::Zero();
};

/// Unwhitened accelerometer and magnetometer residuals (measured minus
/// predicted) and their Jacobian with respect to (dR, dtheta).
inline StackedMeasurement stacked_measurement(const Rotation& rotation, const Vec3& accel,
                                              const Vec3& mag, const CalibrationParams& params,
                                              const ReferenceField& field)
{
  const WhiteningFactors identity;
  const ResidualBlock blocks[2] = {residual_accel(rotation, 0, accel, params, identity, field),
                                   residual_mag(rotation, 0, mag, params, identity)};
  StackedMeasurement out;
  for (int b = 0; b < 2; ++b)
  {
    out.innovation.segment<3>(3 * b) = blocks[b].value;
    for (int t = 0; t < blocks[b].term_count; ++t)
    {
      const auto& term = blocks[b].terms[static_cast<std::size_t>(t)];
      const int col = term.var.is_state() ? 0 : 3 + term.var.index;
      out.jacobian.block(3 * b, col, 3, term.var.dim) = term.jacobian.leftCols(term.var.dim);
    }
  }
  return out;
}

/// Tangent-space map of one gyro interval: dR_{k+1} = dR_k + G (dt w) with
/// G = R_{k+1} J_r(phi).
inline Mat3 process_noise_map(const Rotation& next, const Vec3& phi)
{
  return next.matrix() * right_jacobian(phi);
}

inline Mat6 measurement_covariance(const NoiseConfig& noise)
{
  Mat6 r = Mat6::Zero();
  r.topLeftCorner<3, 3>() = noise.accel_covariance();
  r.bottomRightCorner<3, 3>() = noise.mag_covariance();
  return r;
}

} // namespace detail

struct AugmentedState
{
  Rotation rotation;
  CalibrationParams params;
  AugmentedCovariance covariance = AugmentedCovariance::Identity();
};

struct WuOptions
{
  FilterPrior prior;
  bool record_innovations = false;
  double divergence_tolerance = 1e-12; // allowed negative diagonal after symmetrization
};

struct WuResult
{
  CalibrationParams params;
  AugmentedState state;
  std::size_t updates = 0;
  std::vector<Vec6> innovations;
  double wall_time_s = 0.0;
};

/// Error-state EKF over (orientation, theta) with theta held constant in the
/// process model; accelerometer and magnetometer updates on keyframe rows.
inline WuResult wu_ekf(const Dataset& data, const InitBundle& init, const NoiseConfig& noise,
                       const WuOptions& options = {}, const ReferenceField& field = {})
{
  const auto start = std::chrono::steady_clock::now();
  data.validate();
  if (init.trajectory.empty())
    throw Error(ErrorCode::kInvalidArgument, "wu_ekf: initialization has no trajectory");

  AugmentedState x;
  x.rotation = init.trajectory.front();
  x.params = init.params;
  x.covariance.setZero();
  x.covariance.topLeftCorner<3, 3>() =
      Mat3::Identity() * options.prior.rotation_std * options.prior.rotation_std;
  x.covariance.bottomRightCorner<kParamDim, kParamDim>() =
      options.prior.param_std().cwiseAbs2().asDiagonal();

  const Mat6 meas_cov = detail::measurement_covariance(noise);
  const Mat3 gyro_cov = noise.gyro_covariance();
  constexpr int kBiasCol = 3 + param_offset(ParamBlock::kGyroBias);

  WuResult result;
  auto check = [&](const char* where) {
    const auto diag = x.covariance.diagonal();
    if (!x.covariance.allFinite() || (diag.array() < -options.divergence_tolerance).any())
      throw Error(ErrorCode::kFilterDivergence, std::string("wu_ekf: covariance lost definiteness in ") + where);
  };

  int since_renormalize = 0;
  for (std::size_t k = 0; k < data.size(); ++k)
  {
    if (data.is_keyframe(k))
    {
      const auto m = detail::stacked_measurement(x.rotation, *data.accel[k], *data.mag[k], x.params, field);
      const Eigen::Matrix<double, 6, kAugmentedDim> h = -m.jacobian;
      const Eigen::Matrix<double, kAugmentedDim, 6> pht = x.covariance * h.transpose();
      const Mat6 s = h * pht + meas_cov;
      Eigen::LLT<Mat6> llt(s);
      if (llt.info() != Eigen::Success)
        throw Error(ErrorCode::kFilterDivergence, "wu_ekf: innovation covariance not positive definite");
      const Eigen::Matrix<double, kAugmentedDim, 6> gain = llt.solve(pht.transpose()).transpose();
      const Eigen::Matrix<double, kAugmentedDim, 1> dx = gain * m.innovation;

      const AugmentedCovariance ikh = AugmentedCovariance::Identity() - gain * h;
      x.covariance = ikh * x.covariance * ikh.transpose() + gain * meas_cov * gain.transpose();
      x.covariance = 0.5 * (x.covariance + x.covariance.transpose()).eval();
      x.rotation = (exp_map(dx.head<3>()) * x.rotation).orthonormalized();
      x.params = retract_params(x.params, dx.tail<kParamDim>());
      check("update");
      ++result.updates;
      if (options.record_innovations)
        result.innovations.push_back(m.innovation);
    }
    if (k + 1 < data.size())
    {
      const Vec3 phi = (data.gyro[k] - x.params.gyro_bias) * data.dt;
      x.rotation = x.rotation * exp_map(phi);
      if (++since_renormalize >= so3::kRenormalizeInterval)
      {
        x.rotation = x.rotation.orthonormalized();
        since_renormalize = 0;
      }
      const Mat3 g = detail::process_noise_map(x.rotation, phi) * data.dt;
      // F = I except dR/d(o_w) = -G; apply F P F^T blockwise.
      AugmentedCovariance& p = x.covariance;
      const Eigen::Matrix<double, 3, kAugmentedDim> rows = p.topRows<3>() - g * p.middleRows<3>(kBiasCol);
      p.topRows<3>() = rows;
      const Eigen::Matrix<double, kAugmentedDim, 3> cols = p.leftCols<3>() - p.middleCols<3>(kBiasCol) * g.transpose();
      p.leftCols<3>() = cols;
      p.topLeftCorner<3, 3>() += g * gyro_cov * g.transpose();
      p = 0.5 * (p + p.transpose()).eval();
      check("prediction");
    }
  }
  result.params = x.params;
  result.state = x;
  result.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

struct LikelihoodEvaluation
{
  CalibrationParams theta;
  double neg_log_likelihood = 0.0;
  std::vector<Vec6> innovations;
  std::vector<Mat6> innovation_covariances;
};

/// Negative log of the one-step-ahead prediction density from an
/// orientation-only EKF conditioned on theta:
/// sum over keyframes of 0.5 (ln det(2 pi S) + nu^T S^-1 nu).
/// Returns +inf when the filter diverges.
inline LikelihoodEvaluation neg_log_likelihood(const Dataset& data, const CalibrationParams& theta,
                                               const NoiseConfig& noise, const Rotation& r0,
                                               double rotation_std = 5.0 * kDegToRad,
                                               bool record = false, const ReferenceField& field = {})
{
  LikelihoodEvaluation out;
  out.theta = theta;
  const Mat6 meas_cov = detail::measurement_covariance(noise);
  const Mat3 gyro_cov = noise.gyro_covariance();
  const double log_two_pi = std::log(2.0 * std::numbers::pi);

  Rotation r = r0;
  Mat3 p = Mat3::Identity() * rotation_std * rotation_std;
  double nll = 0.0;
  int since_renormalize = 0;
  for (std::size_t k = 0; k < data.size(); ++k)
  {
    if (data.is_keyframe(k))
    {
      const auto m = detail::stacked_measurement(r, *data.accel[k], *data.mag[k], theta, field);
      const Eigen::Matrix<double, 6, 3> h = -m.jacobian.leftCols<3>();
      const Eigen::Matrix<double, 3, 6> pht = p * h.transpose();
      const Mat6 s = h * pht + meas_cov;
      Eigen::LLT<Mat6> llt(s);
      if (llt.info() != Eigen::Success || !m.innovation.allFinite())
      {
        out.neg_log_likelihood = std::numeric_limits<double>::infinity();
        return out;
      }
      const Mat6 l = llt.matrixL();
      const double log_det = 2.0 * l.diagonal().array().log().sum();
      nll += 0.5 * (6.0 * log_two_pi + log_det + m.innovation.dot(llt.solve(m.innovation)));
      if (record)
      {
        out.innovations.push_back(m.innovation);
        out.innovation_covariances.push_back(s);
      }
      const Eigen::Matrix<double, 3, 6> gain = llt.solve(pht.transpose()).transpose();
      const Mat3 ikh = Mat3::Identity() - gain * h;
      p = ikh * p * ikh.transpose() + gain * meas_cov * gain.transpose();
      p = 0.5 * (p + p.transpose()).eval();
      r = (exp_map(gain * m.innovation) * r).orthonormalized();
    }
    if (k + 1 < data.size())
    {
      const Vec3 phi = (data.gyro[k] - theta.gyro_bias) * data.dt;
      r = r * exp_map(phi);
      if (++since_renormalize >= so3::kRenormalizeInterval)
      {
        r = r.orthonormalized();
        since_renormalize = 0;
      }
      const Mat3 g = detail::process_noise_map(r, phi) * data.dt;
      p += g * gyro_cov * g.transpose();
    }
    if (!std::isfinite(nll) || !p.allFinite())
    {
      out.neg_log_likelihood = std::numeric_limits<double>::infinity();
      return out;
    }
  }
  out.neg_log_likelihood = nll;
  return out;
}

struct KokOptions
{
  int max_iter = 100;
  double step_tol = 1e-6;
  // Central-difference step in units of the prior standard deviation.
  double relative_fd_step = 1e-4;
  int max_line_search = 40;
  double armijo = 1e-4;
  unsigned threads = 1;
  FilterPrior prior;
};

enum class KokTermination
{
  kStepTolerance,
  kMaxIterations,
  kLineSearchFailed,
};

inline std::string to_string(KokTermination t)
{
  switch (t)
  {
    case KokTermination::kStepTolerance: return "step_tolerance";
    case KokTermination::kMaxIterations: return "max_iterations";
    case KokTermination::kLineSearchFailed: return "line_search_failed";
  }
  return "unknown";
}

struct KokResult
{
  CalibrationParams params;
  double neg_log_likelihood = 0.0;
  int iterations = 0;
  std::size_t filter_passes = 0;
  KokTermination termination = KokTermination::kMaxIterations;
  double wall_time_s = 0.0;

  bool converged() const { return termination == KokTermination::kStepTolerance; }
};

/// Negative log-likelihood in scaled coordinates theta = theta0 + diag(scale) z.
class ScaledLikelihood
{
public:
  ScaledLikelihood(const Dataset& data, const CalibrationParams& theta0, const ParamVector& scale,
                   const NoiseConfig& noise, const Rotation& r0, double rotation_std)
    : m_data(data), m_theta0(theta0), m_scale(scale), m_noise(noise), m_r0(r0), m_rotation_std(rotation_std)
  {
  }

  CalibrationParams theta(const ParamVector& z) const
  {
    return retract_params(m_theta0, m_scale.cwiseProduct(z));
  }

  double operator()(const ParamVector& z) const { return evaluate(z, false).neg_log_likelihood; }

  LikelihoodEvaluation evaluate(const ParamVector& z, bool record) const
  {
    ++m_passes;
    return neg_log_likelihood(m_data, theta(z), m_noise, m_r0, m_rotation_std, record);
  }

  /// Central differences; exactly 2 * kParamDim filter passes.
  ParamVector gradient(const ParamVector& z, double h, unsigned threads) const
  {
    ParamVector g;
    parallel_for(static_cast<std::size_t>(kParamDim), threads, [&](std::size_t i) {
      const auto idx = static_cast<Eigen::Index>(i);
      ParamVector zp = z;
      ParamVector zm = z;
      zp(idx) += h;
      zm(idx) -= h;
      g(idx) = ((*this)(zp) - (*this)(zm)) / (2.0 * h);
    });
    return g;
  }

  /// Central-difference gradient plus the Fisher information
  /// sum_k J_k^T S_k^-1 J_k, J_k = d(nu_k)/dz, from the same 2 * kParamDim
  /// passes. `base` must be a recorded evaluation at z.
  std::pair<ParamVector, Eigen::Matrix<double, kParamDim, kParamDim>>
  gradient_and_fisher(const ParamVector& z, const LikelihoodEvaluation& base, double h, unsigned threads) const
  {
    const std::size_t m = base.innovations.size();
    std::vector<Eigen::Matrix<double, 6, kParamDim>> jac(m);
    ParamVector g;
    bool finite = true;
    parallel_for(static_cast<std::size_t>(kParamDim), threads, [&](std::size_t i) {
      const auto idx = static_cast<Eigen::Index>(i);
      ParamVector zp = z;
      ParamVector zm = z;
      zp(idx) += h;
      zm(idx) -= h;
      const LikelihoodEvaluation ep = evaluate(zp, true);
      const LikelihoodEvaluation em = evaluate(zm, true);
      g(idx) = (ep.neg_log_likelihood - em.neg_log_likelihood) / (2.0 * h);
      if (ep.innovations.size() != m || em.innovations.size() != m)
      {
        finite = false;
        return;
      }
      for (std::size_t k = 0; k < m; ++k)
        jac[k].col(idx) = (ep.innovations[k] - em.innovations[k]) / (2.0 * h);
    });
    Eigen::Matrix<double, kParamDim, kParamDim> fisher = Eigen::Matrix<double, kParamDim, kParamDim>::Zero();
    if (finite)
    {
      for (std::size_t k = 0; k < m; ++k)
        fisher += jac[k].transpose() * base.innovation_covariances[k].ldlt().solve(jac[k]);
    }
    else
      fisher.setConstant(std::numeric_limits<double>::quiet_NaN());
    return {g, fisher};
  }

  std::size_t passes() const { return m_passes.load(); }
  const ParamVector& scale() const { return m_scale; }

private:
  const Dataset& m_data;
  CalibrationParams m_theta0;
  ParamVector m_scale;
  NoiseConfig m_noise;
  Rotation m_r0;
  double m_rotation_std;
  mutable std::atomic<std::size_t> m_passes{0};
};

/// Maximum-likelihood calibration: BFGS on the EKF prediction-error
/// likelihood with finite-difference gradients and a backtracking line
/// search using quadratic/cubic interpolation.
inline KokResult kok_ml(const Dataset& data, const InitBundle& init, const NoiseConfig& noise,
                        const KokOptions& options = {})
{
  const auto start = std::chrono::steady_clock::now();
  data.validate();
  if (init.trajectory.empty())
    throw Error(ErrorCode::kInvalidArgument, "kok_ml: initialization has no trajectory");

  const ParamVector scale = options.prior.param_std();
  ScaledLikelihood f(data, init.params, scale, noise, init.trajectory.front(), options.prior.rotation_std);

  KokResult result;
  ParamVector z = ParamVector::Zero();
  const LikelihoodEvaluation base = f.evaluate(z, true);
  double fz = base.neg_log_likelihood;
  if (!std::isfinite(fz))
    throw Error(ErrorCode::kFilterDivergence, "kok_ml: filter diverges at the initial value");
  auto [g, fisher] = f.gradient_and_fisher(z, base, options.relative_fd_step, options.threads);

  // The initial inverse Hessian comes from the Fisher information of the
  // innovations; identity if that is unusable.
  Eigen::Matrix<double, kParamDim, kParamDim> hinv = Eigen::Matrix<double, kParamDim, kParamDim>::Identity();
  bool scaled = false;
  if (fisher.allFinite())
  {
    const double ridge = 1e-9 * fisher.trace() / kParamDim;
    Eigen::LLT<Eigen::Matrix<double, kParamDim, kParamDim>> llt(
        fisher + ridge * Eigen::Matrix<double, kParamDim, kParamDim>::Identity());
    if (llt.info() == Eigen::Success)
    {
      hinv = llt.solve(Eigen::Matrix<double, kParamDim, kParamDim>::Identity());
      scaled = true;
    }
  }

  while (result.iterations < options.max_iter)
  {
    ++result.iterations;
    ParamVector p = -hinv * g;
    double slope = g.dot(p);
    if (!(slope < 0.0))
    {
      hinv.setIdentity();
      scaled = false;
      p = -g;
      slope = g.dot(p);
    }
    // Until curvature information exists, cap the first trial at one prior
    // standard deviation.
    double alpha = scaled ? 1.0 : std::min(1.0, 1.0 / p.norm());

    double alpha_prev = 0.0;
    double f_prev = fz;
    bool found = false;
    ParamVector z_new;
    double f_new = 0.0;
    for (int trial = 0; trial < options.max_line_search; ++trial)
    {
      z_new = z + alpha * p;
      f_new = f(z_new);
      if (std::isfinite(f_new) && f_new <= fz + options.armijo * alpha * slope)
      {
        found = true;
        break;
      }
      double next;
      if (!std::isfinite(f_new))
        next = 0.1 * alpha;
      else if (trial == 0 || !std::isfinite(f_prev))
        next = -slope * alpha * alpha / (2.0 * (f_new - fz - slope * alpha));
      else
      {
        // Cubic through f(0), f'(0), f(alpha), f(alpha_prev).
        const double r1 = f_new - fz - slope * alpha;
        const double r2 = f_prev - fz - slope * alpha_prev;
        const double denom = alpha - alpha_prev;
        const double a = (r1 / (alpha * alpha) - r2 / (alpha_prev * alpha_prev)) / denom;
        const double b = (-alpha_prev * r1 / (alpha * alpha) + alpha * r2 / (alpha_prev * alpha_prev)) / denom;
        if (a == 0.0)
          next = -slope / (2.0 * b);
        else
        {
          const double disc = b * b - 3.0 * a * slope;
          next = disc < 0.0 ? 0.5 * alpha : (-b + std::sqrt(disc)) / (3.0 * a);
        }
      }
      if (!std::isfinite(next))
        next = 0.5 * alpha;
      alpha_prev = alpha;
      f_prev = f_new;
      alpha = std::clamp(next, 0.1 * alpha, 0.5 * alpha);
    }
    if (!found)
    {
      result.termination = KokTermination::kLineSearchFailed;
      break;
    }

    const ParamVector s = z_new - z;
    z = z_new;
    fz = f_new;
    if (scale.cwiseProduct(s).norm() < options.step_tol)
    {
      result.termination = KokTermination::kStepTolerance;
      break;
    }
    const ParamVector g_new = f.gradient(z, options.relative_fd_step, options.threads);
    const ParamVector y = g_new - g;
    g = g_new;
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm())
    {
      if (!scaled)
      {
        hinv = Eigen::Matrix<double, kParamDim, kParamDim>::Identity() * (sy / y.squaredNorm());
        scaled = true;
      }
      const double rho = 1.0 / sy;
      const auto eye = Eigen::Matrix<double, kParamDim, kParamDim>::Identity();
      hinv = (eye - rho * s * y.transpose()) * hinv * (eye - rho * y * s.transpose()) + rho * s * s.transpose();
    }
  }

  result.params = f.theta(z);
  result.neg_log_likelihood = fz;
  result.filter_passes = f.passes();
  result.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

} // namespace magcal
