/*
 *  Copyright (C) 2026 The magcal Authors
 *
 *  SPDX-License-Identifier: Apache-2.0
 *  See the file LICENSE for more information.
 */

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include <Eigen/Core>

#include "magcal/models.hpp"
#include "magcal/residuals.hpp"
#include "magcal/sim.hpp"
#include "magcal/so3.hpp"

namespace magcal::test
{

inline Vec3 random_vec(std::mt19937_64& rng, double scale = 1.0)
{
  std::normal_distribution<double> n;
  const double x = n(rng);
  const double y = n(rng);
  const double z = n(rng);
  return scale * Vec3(x, y, z);
}

/// Uniform angle in [0, max_angle) about a uniform axis.
inline Vec3 random_tangent(std::mt19937_64& rng, double max_angle)
{
  const Vec3 axis = random_vec(rng).normalized();
  return std::uniform_real_distribution<double>(0.0, max_angle)(rng) * axis;
}

inline Rotation random_rotation(std::mt19937_64& rng)
{
  return exp_map(random_tangent(rng, 3.0));
}

inline CalibrationParams random_params(std::mt19937_64& rng)
{
  return sim::sample_params(rng).params;
}

/// Evaluates one residual block at (states, params).
using BlockFunction = std::function<ResidualBlock(const std::vector<Rotation>&, const CalibrationParams&)>;

/// Central-difference Jacobian of the block value with respect to `var`,
/// using Exp(d) R for states and retract_params for parameters.
inline Eigen::MatrixXd numeric_jacobian(const BlockFunction& f, const std::vector<Rotation>& states,
                                        const CalibrationParams& params, const Variable& var, double h = 1e-6)
{
  Eigen::MatrixXd jac(3, var.dim);
  for (int i = 0; i < var.dim; ++i)
  {
    auto eval = [&](double s) {
      std::vector<Rotation> x = states;
      CalibrationParams p = params;
      if (var.is_state())
        x[static_cast<std::size_t>(var.index)] =
            exp_map(s * Vec3::Unit(i)) * x[static_cast<std::size_t>(var.index)];
      else
      {
        Eigen::VectorXd step = Eigen::VectorXd::Zero(kParamDim);
        step(var.index + i) = s;
        p = retract_params(p, step);
      }
      return f(x, p).value;
    };
    jac.col(i) = (eval(h) - eval(-h)) / (2.0 * h);
  }
  return jac;
}

/// Largest relative Frobenius error between analytic and numeric Jacobians
/// over the block's terms (optionally only terms accepted by `filter`).
inline double max_jacobian_error(const BlockFunction& f, const std::vector<Rotation>& states,
                                 const CalibrationParams& params,
                                 const std::function<bool(const Variable&)>& filter = {})
{
  const ResidualBlock block = f(states, params);
  double worst = 0.0;
  for (int t = 0; t < block.term_count; ++t)
  {
    const auto& term = block.terms[static_cast<std::size_t>(t)];
    if (filter && !filter(term.var))
      continue;
    const Eigen::MatrixXd numeric = numeric_jacobian(f, states, params, term.var);
    const Eigen::MatrixXd analytic = term.jacobian.leftCols(term.var.dim);
    const double err = (analytic - numeric).norm() / std::max(numeric.norm(), 1e-8);
    worst = std::max(worst, err);
  }
  return worst;
}

inline double standard_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

/// Kolmogorov-Smirnov distance of samples against N(0, 1).
inline double ks_distance_normal(std::vector<double> samples)
{
  std::sort(samples.begin(), samples.end());
  const double n = static_cast<double>(samples.size());
  double d = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i)
  {
    const double cdf = standard_normal_cdf(samples[i]);
    d = std::max({d, std::abs(cdf - static_cast<double>(i) / n), std::abs(static_cast<double>(i + 1) / n - cdf)});
  }
  return d;
}

/// Sum over k of A_k Sigma_w A_k^T with A_k = dR_{k+1,j}^T J_r(phi_k) dt.
inline Mat3 exact_preint_covariance(const std::vector<Vec3>& gyro, const Vec3& bias, double dt, double sigma)
{
  const std::size_t n = gyro.size();
  Mat3 cov = Mat3::Zero();
  for (std::size_t k = 0; k < n; ++k)
  {
    Mat3 tail = Mat3::Identity();
    for (std::size_t i = k + 1; i < n; ++i)
      tail = tail * exp_map((gyro[i] - bias) * dt).matrix();
    const Mat3 a = tail.transpose() * right_jacobian((gyro[k] - bias) * dt) * dt;
    cov += sigma * sigma * a * a.transpose();
  }
  return cov;
}

} // namespace magcal::test
