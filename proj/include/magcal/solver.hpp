/*
 *  Copyright (C) 2026 The magcal Authors
 *
 *  SPDX-License-Identifier: Apache-2.0
 *  See the file LICENSE for more information.
 */

#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "magcal/arrow_system.hpp"
#include "magcal/error.hpp"
#include "magcal/models.hpp"
#include "magcal/preintegration.hpp"
#include "magcal/residuals.hpp"
#include "magcal/so3.hpp"

namespace magcal
{

struct SolverOptions
{
  int max_iter = 100;
  double step_tol = 1e-6;
  double initial_lambda = 1e-4;
  double lambda_floor = 1e-12;
  double lambda_max = 1e8;
  double lambda_factor = 10.0;
  std::vector<ParamBlock> frozen;
  // Preintegration: re-linearize once when |o_w - nominal| exceeds this.
  double relinearize_threshold = 0.01;
};

enum class Termination
{
  kStepTolerance,
  kMaxIterations,
  kLambdaExceeded,
};

inline std::string to_string(Termination t)
{
  switch (t)
  {
    case Termination::kStepTolerance: return "step_tolerance";
    case Termination::kMaxIterations: return "max_iterations";
    case Termination::kLambdaExceeded: return "lambda_exceeded";
  }
  return "unknown";
}

struct SolveReport
{
  int iterations = 0;
  double initial_cost = 0.0;
  double final_cost = 0.0;
  std::vector<double> costs;      // cost after each accepted step, starting with the initial cost
  std::vector<double> step_norms; // norm of each accepted step
  Termination termination = Termination::kMaxIterations;
  double wall_time_s = 0.0;
  int relinearizations = 0;
  // Smallest eigenvalue of the parameter Schur complement at the solution;
  // near zero means the motion did not excite every parameter.
  std::optional<double> min_schur_eigenvalue;

  bool converged() const { return termination == Termination::kStepTolerance; }
};

/// Levenberg-Marquardt on a product manifold with arrow-structured normal
/// equations.
///
/// Problem provides: Estimate, System (an ArrowSystem), linearize(x, sys),
/// cost(x), retract(x, step) and num_states().
template <typename Problem>
SolveReport levenberg_marquardt(const Problem& problem, typename Problem::Estimate& estimate,
                                const SolverOptions& options)
{
  using System = typename Problem::System;
  const auto start = std::chrono::steady_clock::now();

  SolveReport report;
  System system(problem.num_states());
  problem.linearize(estimate, system);
  double cost = system.cost();
  report.initial_cost = cost;
  report.costs.push_back(cost);

  double lambda = options.initial_lambda;
  bool done = false;
  while (!done && report.iterations < options.max_iter)
  {
    ++report.iterations;
    bool accepted = false;
    while (!accepted)
    {
      const std::optional<Eigen::VectorXd> step = system.solve(lambda);
      if (step)
      {
        const double norm = step->norm();
        std::optional<typename Problem::Estimate> candidate;
        double candidate_cost = 0.0;
        try
        {
          candidate = problem.retract(estimate, *step);
          candidate_cost = problem.cost(*candidate);
        }
        catch (const Error&)
        {
          candidate.reset();
        }

        if (norm < options.step_tol)
        {
          if (candidate && candidate_cost < cost)
          {
            estimate = std::move(*candidate);
            cost = candidate_cost;
            report.costs.push_back(cost);
            report.step_norms.push_back(norm);
          }
          report.termination = Termination::kStepTolerance;
          done = true;
          break;
        }
        if (candidate && std::isfinite(candidate_cost) && candidate_cost < cost)
        {
          estimate = std::move(*candidate);
          cost = candidate_cost;
          report.costs.push_back(cost);
          report.step_norms.push_back(norm);
          lambda = std::max(lambda / options.lambda_factor, options.lambda_floor);
          accepted = true;
          break;
        }
      }
      lambda *= options.lambda_factor;
      if (lambda > options.lambda_max)
      {
        report.termination = Termination::kLambdaExceeded;
        done = true;
        break;
      }
    }
    if (accepted)
      problem.linearize(estimate, system);
  }
  if (!done)
    report.termination = Termination::kMaxIterations;

  report.final_cost = cost;
  if (const auto eig = system.schur_eigenvalues())
    report.min_schur_eigenvalue = eig->minCoeff();
  report.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

/// Calibration parameters plus one rotation per keyframe.
struct JointEstimate
{
  CalibrationParams params;
  RotationTrajectory states;
};

/// Joint MAP problem over (theta, R_0..R_{M-1}).
///
/// With rate_ratio 1 every epoch is a state and consecutive states are tied by
/// gyro residuals. With rate_ratio N > 1 states sit on keyframes (every N-th
/// epoch) and are tied by preintegrated rotations linearized at a nominal
/// gyro bias; the gyro-bias slot then carries o_w = nominal + delta.
class JointProblem
{
public:
  using Estimate = JointEstimate;
  using System = ArrowSystem<3, kParamDim>;

  JointProblem(const Dataset& data, const NoiseConfig& noise, const ReferenceField& field,
               const Vec3& nominal_gyro_bias, std::vector<ParamBlock> frozen = {})
    : m_field(field),
      m_whitening(WhiteningFactors::from_noise(noise)),
      m_dt(data.dt),
      m_sigma_gyro(noise.sigma_gyro.mean()),
      m_frozen(std::move(frozen))
  {
    data.validate();
    const std::size_t m = data.keyframe_count();
    m_accel.reserve(m);
    m_mag.reserve(m);
    for (std::size_t l = 0; l < m; ++l)
    {
      m_accel.push_back(data.keyframe_accel(l));
      m_mag.push_back(data.keyframe_mag(l));
    }
    m_rate_ratio = data.rate_ratio;
    if (m_rate_ratio == 1)
      m_gyro.assign(data.gyro.begin(), data.gyro.end() - 1);
    else
      m_raw_gyro = data.gyro;
    relinearize_bias(nominal_gyro_bias);
  }

  std::size_t num_states() const { return m_accel.size(); }
  int rate_ratio() const { return m_rate_ratio; }
  bool uses_preintegration() const { return m_rate_ratio > 1; }
  const Vec3& nominal_bias() const { return m_nominal_bias; }
  const std::vector<PreintegratedRotation>& preintegrated() const { return m_preint; }
  const std::vector<ParamBlock>& frozen() const { return m_frozen; }

  /// Rebuilds the preintegrated factors at a new nominal gyro bias.
  void relinearize_bias(const Vec3& nominal)
  {
    m_nominal_bias = nominal;
    if (!uses_preintegration())
      return;
    m_preint.clear();
    const auto n = static_cast<std::size_t>(m_rate_ratio);
    const std::span<const Vec3> gyro(m_raw_gyro);
    for (std::size_t l = 0; l + 1 < num_states(); ++l)
      m_preint.push_back(integrate(gyro.subspan(l * n, n), nominal, m_dt, m_sigma_gyro, l * n));
  }

  /// Visits every residual block in a fixed order.
  template <typename Visitor>
  void for_each_block(const Estimate& x, Visitor&& visit) const
  {
    if (x.states.size() != num_states())
      throw Error(ErrorCode::kInvalidArgument, "estimate has the wrong number of states");
    for (std::size_t l = 0; l < num_states(); ++l)
    {
      visit(residual_accel(x.states[l], l, m_accel[l], x.params, m_whitening, m_field));
      visit(residual_mag(x.states[l], l, m_mag[l], x.params, m_whitening));
    }
    if (uses_preintegration())
    {
      const Vec3 delta = x.params.gyro_bias - m_nominal_bias;
      for (std::size_t l = 0; l < m_preint.size(); ++l)
        visit(residual_preint(x.states[l], x.states[l + 1], l, m_preint[l], delta));
    }
    else
    {
      for (std::size_t k = 0; k < m_gyro.size(); ++k)
        visit(residual_gyro(x.states[k], x.states[k + 1], k, m_gyro[k], x.params, m_whitening, m_dt));
    }
  }

  void linearize(const Estimate& x, System& system) const
  {
    system.reset(num_states());
    for_each_block(x, [&system](const ResidualBlock& block) { system.add(block); });
    for (ParamBlock block : m_frozen)
      system.freeze(param_offset(block), param_dim(block));
  }

  double cost(const Estimate& x) const
  {
    double total = 0.0;
    for_each_block(x, [&total](const ResidualBlock& block) { total += block.value.squaredNorm(); });
    return total;
  }

  Estimate retract(const Estimate& x, const Eigen::VectorXd& step) const
  {
    return retract_estimate(x, step);
  }

  /// theta + d_theta for the parameters, Exp(d_i) R_i for each state.
  static Estimate retract_estimate(const Estimate& x, const Eigen::VectorXd& step)
  {
    const auto expected = static_cast<Eigen::Index>(kParamDim + 3 * x.states.size());
    if (step.size() != expected)
      throw Error(ErrorCode::kInvalidArgument, "retract: step has the wrong length");
    Estimate out;
    out.params = retract_params(x.params, step.head<kParamDim>());
    out.states.resize(x.states.size());
    for (std::size_t i = 0; i < x.states.size(); ++i)
    {
      const Vec3 d = step.segment<3>(kParamDim + 3 * static_cast<Eigen::Index>(i));
      out.states[i] = (exp_map(d) * x.states[i]).orthonormalized();
    }
    return out;
  }

private:
  ReferenceField m_field;
  WhiteningFactors m_whitening;
  double m_dt = 0.0;
  double m_sigma_gyro = 0.0;
  int m_rate_ratio = 1;
  std::vector<ParamBlock> m_frozen;
  std::vector<Vec3> m_accel;
  std::vector<Vec3> m_mag;
  std::vector<Vec3> m_gyro;
  std::vector<Vec3> m_raw_gyro;
  std::vector<PreintegratedRotation> m_preint;
  Vec3 m_nominal_bias = Vec3::Zero();
};

/// Builds H = J^T J, b = -J^T r and the cost at an estimate.
inline JointProblem::System assemble_normal_equations(const JointProblem& problem,
                                                      const JointEstimate& estimate)
{
  JointProblem::System system(problem.num_states());
  problem.linearize(estimate, system);
  return system;
}

/// Runs LM on the joint problem. With preintegration, the factors are
/// re-linearized at the estimated gyro bias once if it drifted past
/// options.relinearize_threshold, and the solve is repeated.
inline std::pair<JointEstimate, SolveReport> optimize(JointProblem& problem, JointEstimate initial,
                                                      const SolverOptions& options)
{
  SolveReport report = levenberg_marquardt(problem, initial, options);
  if (problem.uses_preintegration() &&
      (initial.params.gyro_bias - problem.nominal_bias()).norm() > options.relinearize_threshold)
  {
    problem.relinearize_bias(initial.params.gyro_bias);
    SolveReport second = levenberg_marquardt(problem, initial, options);
    second.iterations += report.iterations;
    second.wall_time_s += report.wall_time_s;
    second.initial_cost = report.initial_cost;
    second.costs.insert(second.costs.begin(), report.costs.begin(), report.costs.end());
    second.step_norms.insert(second.step_norms.begin(), report.step_norms.begin(),
                             report.step_norms.end());
    second.relinearizations = report.relinearizations + 1;
    report = std::move(second);
  }
  return {std::move(initial), std::move(report)};
}

} // namespace magcal
