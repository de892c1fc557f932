/*
 *  Copyright (C) 2026 The magcal Authors
 *
 *  SPDX-License-Identifier: Apache-2.0
 *  See the file LICENSE for more information.
 */

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Dense>

#include "magcal/arrow_system.hpp"
#include "magcal/error.hpp"
#include "magcal/models.hpp"
#include "magcal/residuals.hpp"
#include "magcal/so3.hpp"
#include "magcal/solver.hpp"

namespace magcal
{

struct StationaryOptions
{
  double window_s = 1.0;
  double gyro_std_factor = 3.0;  // per-axis gyro std < factor * sigma_gyro
  double accel_std_factor = 3.0; // per-axis accel std < factor * sigma_accel
  double max_gyro_mean = 2.0 * kDegToRad; // |window mean rate| (rad/s)
  double max_accel_norm_deviation = 1.0;  // | |mean accel| - g0 | (m/s^2)
};

struct StationarySpan
{
  std::size_t first = 0;
  std::size_t last = 0; // one past the end

  std::size_t size() const { return last - first; }
};

struct GyroBiasEstimate
{
  Vec3 bias = Vec3::Zero();
  StationarySpan span;
};

/// Mean gyro rate over the leading run of stationary windows.
///
/// A window is stationary when the gyro and keyframe accelerometer samples
/// scatter no more than their noise allows, the mean rate is below
/// max_gyro_mean and the mean specific force is close to g0.
inline GyroBiasEstimate estimate_gyro_bias(const Dataset& data, const NoiseConfig& noise,
                                           const ReferenceField& field = {},
                                           const StationaryOptions& options = {})
{
  const auto window = static_cast<std::size_t>(std::llround(options.window_s / data.dt));
  if (window < 2)
    throw Error(ErrorCode::kInvalidArgument, "stationary window shorter than two samples");

  auto is_stationary = [&](std::size_t first) {
    Eigen::Matrix<double, 3, Eigen::Dynamic> g(3, static_cast<Eigen::Index>(window));
    std::vector<Vec3> a;
    for (std::size_t k = 0; k < window; ++k)
    {
      g.col(static_cast<Eigen::Index>(k)) = data.gyro[first + k];
      if (data.is_keyframe(first + k) && data.accel[first + k])
        a.push_back(*data.accel[first + k]);
    }
    const Vec3 g_mean = g.rowwise().mean();
    const Vec3 g_std =
        ((g.colwise() - g_mean).cwiseAbs2().rowwise().sum() / static_cast<double>(window - 1)).cwiseSqrt();
    if ((g_std.array() >= options.gyro_std_factor * noise.sigma_gyro.array()).any())
      return false;
    if (g_mean.norm() >= options.max_gyro_mean)
      return false;
    if (a.empty())
      return true;
    Vec3 a_mean = Vec3::Zero();
    for (const Vec3& v : a)
      a_mean += v;
    a_mean /= static_cast<double>(a.size());
    if (std::abs(a_mean.norm() - field.gravity) >= options.max_accel_norm_deviation)
      return false;
    if (a.size() > 1)
    {
      Vec3 var = Vec3::Zero();
      for (const Vec3& v : a)
        var += (v - a_mean).cwiseAbs2();
      const Vec3 a_std = (var / static_cast<double>(a.size() - 1)).cwiseSqrt();
      if ((a_std.array() >= options.accel_std_factor * noise.sigma_accel.array()).any())
        return false;
    }
    return true;
  };

  StationarySpan span;
  while (span.last + window <= data.size() && is_stationary(span.last))
    span.last += window;
  if (span.size() == 0)
    throw Error(ErrorCode::kNoStationarySpan, "no stationary span at the start of the dataset");

  Vec3 sum = Vec3::Zero();
  for (std::size_t k = span.first; k < span.last; ++k)
    sum += data.gyro[k];
  return {sum / static_cast<double>(span.size()), span};
}

/// Integrates bias-corrected gyro rates from r0; one rotation per epoch.
inline RotationTrajectory dead_reckon(std::span<const Vec3> gyro, const Vec3& bias, double dt,
                                      const Rotation& r0 = Rotation::identity())
{
  RotationTrajectory out;
  out.reserve(gyro.size());
  if (gyro.empty())
    return out;
  out.push_back(r0);
  int since_renormalize = 0;
  for (std::size_t k = 0; k + 1 < gyro.size(); ++k)
  {
    Rotation next = propagate(out.back(), gyro[k], bias, dt);
    if (++since_renormalize >= so3::kRenormalizeInterval)
    {
      next = next.orthonormalized();
      since_renormalize = 0;
    }
    out.push_back(next);
  }
  return out;
}

struct EllipsoidFit
{
  Mat3 intrinsic = Mat3::Identity(); // lower triangular, positive diagonal
  Vec3 center = Vec3::Zero();
};

/// Algebraic least-squares quadric fit x^T A x + b^T x + c = 0.
///
/// The fit runs on centred, scaled coordinates. The shape matrix returned is
/// the Cholesky factor L of the ellipsoid's quadric so that the ellipsoid is
/// {center + L u : |u| = 1}; L L^T equals D D^T for any D mapping the unit
/// sphere onto the same ellipsoid.
inline EllipsoidFit ellipsoid_fit(std::span<const Vec3> samples)
{
  if (samples.size() < 100)
    throw Error(ErrorCode::kDegenerateEllipsoid, "ellipsoid fit needs at least 100 samples");

  Vec3 mean = Vec3::Zero();
  for (const Vec3& s : samples)
    mean += s;
  mean /= static_cast<double>(samples.size());
  double scale = 0.0;
  for (const Vec3& s : samples)
    scale += (s - mean).squaredNorm();
  scale = std::sqrt(scale / static_cast<double>(samples.size()));
  if (!(scale > 0.0))
    throw Error(ErrorCode::kDegenerateEllipsoid, "magnetometer samples are all identical");

  Eigen::MatrixXd design(static_cast<Eigen::Index>(samples.size()), 10);
  for (std::size_t i = 0; i < samples.size(); ++i)
  {
    const Vec3 p = (samples[i] - mean) / scale;
    const auto r = static_cast<Eigen::Index>(i);
    design.row(r) << p.x() * p.x(), p.y() * p.y(), p.z() * p.z(), 2.0 * p.x() * p.y(),
        2.0 * p.x() * p.z(), 2.0 * p.y() * p.z(), p.x(), p.y(), p.z(), 1.0;
  }
  // Null vector of the design matrix via the 10x10 normal matrix.
  const Eigen::Matrix<double, 10, 10> normal = design.transpose() * design;
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, 10, 10>> eig(normal);
  const auto& ev = eig.eigenvalues();
  if (!(ev(1) > 1e-10 * ev(9)))
    throw Error(ErrorCode::kDegenerateEllipsoid, "quadric fit is not unique (poor direction coverage)");
  const Eigen::Matrix<double, 10, 1> v = eig.eigenvectors().col(0);

  Mat3 a;
  a << v(0), v(3), v(4), //
      v(3), v(1), v(5),  //
      v(4), v(5), v(2);
  const Vec3 b = v.segment<3>(6);
  const double c = v(9);

  Eigen::LDLT<Mat3> a_ldlt(a);
  const Vec3 center_n = -0.5 * a_ldlt.solve(b);
  const double k = center_n.dot(a * center_n) - c;
  Mat3 shape = a / k; // (p - c)^T shape (p - c) = 1
  Eigen::SelfAdjointEigenSolver<Mat3> shape_eig(shape);
  if (!(shape_eig.eigenvalues().minCoeff() > 0.0) || !std::isfinite(k))
    throw Error(ErrorCode::kDegenerateEllipsoid, "fitted quadric is not an ellipsoid");

  EllipsoidFit fit;
  fit.center = mean + scale * center_n;
  const Mat3 dd = scale * scale * shape.inverse(); // D D^T in sensor units
  Eigen::LLT<Mat3> llt(0.5 * (dd + dd.transpose()));
  if (llt.info() != Eigen::Success)
    throw Error(ErrorCode::kDegenerateEllipsoid, "fitted quadric is not an ellipsoid");
  fit.intrinsic = llt.matrixL();
  return fit;
}

/// Unit field direction R_x(roll) R_y(pitch) e_z.
inline Vec3 roll_pitch_direction(double roll, double pitch)
{
  return {-std::sin(pitch), std::sin(roll) * std::cos(pitch), std::cos(roll) * std::cos(pitch)};
}

/// (roll, pitch) with roll_pitch_direction(roll, pitch) == u / |u|.
inline Eigen::Vector2d roll_pitch_from_direction(const Vec3& u)
{
  const Vec3 n = u.normalized();
  return {std::atan2(n.y(), n.z()), -std::asin(std::clamp(n.x(), -1.0, 1.0))};
}

struct IntrinsicResult
{
  Mat3 intrinsic = Mat3::Identity();
  Vec3 mag_bias = Vec3::Zero();
  std::vector<Eigen::Vector2d> roll_pitch;
  double residual_rms = 0.0;
  SolveReport report;
};

/// Magnetometer-only problem over (lower-triangular D_I, o_m, per-sample roll
/// and pitch): sum_k |m_k - D_I R_x(roll_k) R_y(pitch_k) e_z - o_m|^2.
class IntrinsicProblem
{
public:
  struct Estimate
  {
    Mat3 intrinsic = Mat3::Identity();
    Vec3 bias = Vec3::Zero();
    std::vector<Eigen::Vector2d> angles;
  };
  using System = ArrowSystem<2, 9>;

  static constexpr std::array<std::pair<int, int>, 6> kLowerEntries{
      {{0, 0}, {1, 0}, {1, 1}, {2, 0}, {2, 1}, {2, 2}}};

  explicit IntrinsicProblem(std::vector<Vec3> samples) : m_samples(std::move(samples)) {}

  std::size_t num_states() const { return m_samples.size(); }

  template <typename Visitor>
  void for_each_block(const Estimate& x, Visitor&& visit) const
  {
    for (std::size_t k = 0; k < m_samples.size(); ++k)
    {
      const double roll = x.angles[k](0);
      const double pitch = x.angles[k](1);
      const Vec3 u = roll_pitch_direction(roll, pitch);
      const Vec3 du_droll(0.0, std::cos(roll) * std::cos(pitch), -std::sin(roll) * std::cos(pitch));
      const Vec3 du_dpitch(-std::cos(pitch), -std::sin(roll) * std::sin(pitch),
                           -std::cos(roll) * std::sin(pitch));

      ResidualBlock block;
      block.value = m_samples[k] - x.intrinsic * u - x.bias;
      Eigen::Matrix<double, 3, 2> d_angles;
      d_angles.col(0) = -x.intrinsic * du_droll;
      d_angles.col(1) = -x.intrinsic * du_dpitch;
      block.add(Variable::state(k, 2), d_angles);
      Eigen::Matrix<double, 3, 6> d_matrix = Eigen::Matrix<double, 3, 6>::Zero();
      for (std::size_t e = 0; e < kLowerEntries.size(); ++e)
      {
        const auto [i, j] = kLowerEntries[e];
        d_matrix(i, static_cast<Eigen::Index>(e)) = -u(j);
      }
      block.add(Variable::param(0, 6), d_matrix);
      block.add(Variable::param(6, 3), -Mat3::Identity());
      visit(block);
    }
  }

  void linearize(const Estimate& x, System& system) const
  {
    system.reset(num_states());
    for_each_block(x, [&system](const ResidualBlock& b) { system.add(b); });
  }

  double cost(const Estimate& x) const
  {
    double total = 0.0;
    for_each_block(x, [&total](const ResidualBlock& b) { total += b.value.squaredNorm(); });
    return total;
  }

  Estimate retract(const Estimate& x, const Eigen::VectorXd& step) const
  {
    Estimate out = x;
    for (std::size_t e = 0; e < kLowerEntries.size(); ++e)
    {
      const auto [i, j] = kLowerEntries[e];
      out.intrinsic(i, j) += step(static_cast<Eigen::Index>(e));
    }
    out.bias += step.segment<3>(6);
    for (std::size_t k = 0; k < out.angles.size(); ++k)
      out.angles[k] += step.segment<2>(9 + 2 * static_cast<Eigen::Index>(k));
    return out;
  }

private:
  std::vector<Vec3> m_samples;
};

/// Refines an ellipsoid-fit seed by LM on the roll/pitch parameterization.
/// Per-sample angles start from the direction of D_I0^-1 (m_k - o_m0).
inline IntrinsicResult intrinsic_refine(std::span<const Vec3> samples, const EllipsoidFit& seed,
                                        const SolverOptions& options = {})
{
  IntrinsicProblem problem(std::vector<Vec3>(samples.begin(), samples.end()));
  IntrinsicProblem::Estimate x;
  // Any factor F with F F^T = D D^T describes the same ellipsoid; start from
  // the lower-triangular one so the seed already sits in the solved gauge.
  Eigen::LLT<Mat3> llt(seed.intrinsic * seed.intrinsic.transpose());
  if (llt.info() != Eigen::Success)
    throw Error(ErrorCode::kDegenerateEllipsoid, "intrinsic seed is singular");
  x.intrinsic = llt.matrixL();
  x.bias = seed.center;
  const Mat3 inv = x.intrinsic.inverse();
  x.angles.reserve(samples.size());
  for (const Vec3& m : samples)
    x.angles.push_back(roll_pitch_from_direction(inv * (m - seed.center)));

  IntrinsicResult result;
  result.report = levenberg_marquardt(problem, x, options);
  if (result.report.termination == Termination::kLambdaExceeded)
    throw Error(ErrorCode::kNonConvergence, "intrinsic calibration did not converge");

  // D_I -> D_I S with S = diag(+-1) leaves the model unchanged when the
  // directions are reflected too; use it to keep the diagonal positive.
  Vec3 sign = Vec3::Ones();
  for (int i = 0; i < 3; ++i)
  {
    if (x.intrinsic(i, i) < 0.0)
      sign(i) = -1.0;
  }
  result.intrinsic = x.intrinsic * sign.asDiagonal();
  result.mag_bias = x.bias;
  result.roll_pitch.reserve(x.angles.size());
  for (const auto& a : x.angles)
  {
    const Vec3 u = sign.asDiagonal() * roll_pitch_direction(a(0), a(1));
    result.roll_pitch.push_back(roll_pitch_from_direction(u));
  }
  const double dof = std::max(1.0, static_cast<double>(samples.size()) - 9.0);
  result.residual_rms = std::sqrt(result.report.final_cost / dof);
  return result;
}

struct AlignmentOptions
{
  // rad/s; well above the rms of gyro white noise averaged over two samples
  double min_rms_rate = 2.0 * kDegToRad;
  double min_relative_eigenvalue = 1e-8;
};

/// Magnetometer-to-IMU rotation R_D from homogeneous-field kinematics.
///
/// With h_k = D_I^-1 (m_k - o_m) = R_D R_k^T m_n, the field seen by the
/// magnetometer obeys dh/dt = -(R_D w) x h. Stacking central differences of
/// h against the bias-corrected rates gives a linear least-squares problem
/// in the nine entries of R_D; the solution is projected onto SO(3).
inline Rotation extrinsic_align(const Dataset& data, const Vec3& gyro_bias, const Mat3& intrinsic,
                                const Vec3& mag_bias, const AlignmentOptions& options = {})
{
  const std::size_t m = data.keyframe_count();
  const auto n = static_cast<std::size_t>(data.rate_ratio);
  if (m < 3)
    throw Error(ErrorCode::kInsufficientExcitation, "too few magnetometer samples for alignment");

  const Mat3 inv = intrinsic.inverse();
  std::vector<Vec3> h(m);
  for (std::size_t l = 0; l < m; ++l)
    h[l] = inv * (data.keyframe_mag(l) - mag_bias);

  Eigen::Matrix<double, 9, 9> normal = Eigen::Matrix<double, 9, 9>::Zero();
  Eigen::Matrix<double, 9, 1> rhs = Eigen::Matrix<double, 9, 1>::Zero();
  double rate_sq = 0.0;
  const double span = 2.0 * static_cast<double>(n) * data.dt;
  for (std::size_t l = 1; l + 1 < m; ++l)
  {
    const Vec3 h_dot = (h[l + 1] - h[l - 1]) / span;
    Vec3 w = Vec3::Zero();
    for (std::size_t k = (l - 1) * n; k < (l + 1) * n; ++k)
      w += data.gyro[k] - gyro_bias;
    w /= static_cast<double>(2 * n);
    rate_sq += w.squaredNorm();

    // h_dot = hat(h) A w = hat(h) (w^T kron I3) vec(A)
    Eigen::Matrix<double, 3, 9> row;
    const Mat3 hh = hat(h[l]);
    for (int j = 0; j < 3; ++j)
      row.block<3, 3>(0, 3 * j) = w(j) * hh;
    normal += row.transpose() * row;
    rhs += row.transpose() * h_dot;
  }
  const double rms_rate = std::sqrt(rate_sq / static_cast<double>(m - 2));
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, 9, 9>> eig(normal);
  const auto& ev = eig.eigenvalues();
  if (!(rms_rate > options.min_rms_rate) || !(ev(0) > options.min_relative_eigenvalue * ev(8)))
    throw Error(ErrorCode::kInsufficientExcitation, "insufficient angular excitation for alignment");

  const Eigen::Matrix<double, 9, 1> vec_a = normal.ldlt().solve(rhs);
  Mat3 a;
  for (int j = 0; j < 3; ++j)
    a.col(j) = vec_a.segment<3>(3 * j);
  return Rotation::project(a);
}

struct InitConfig
{
  double dip_angle_deg = 72.0;
  double gravity = 9.81;
  StationaryOptions stationary;
  AlignmentOptions alignment;
  SolverOptions intrinsic_solver;
};

struct InitBundle
{
  CalibrationParams params;
  RotationTrajectory trajectory; // one rotation per keyframe
  StationarySpan stationary_span;
  IntrinsicResult intrinsic;
  Rotation alignment;
};

/// Initial values for the joint problem: zero accelerometer bias, stationary
/// gyro bias, dead-reckoned keyframe orientations from identity, intrinsic
/// magnetometer calibration followed by extrinsic alignment
/// (D_m = D_I R_D), and the configured dip angle.
inline InitBundle build_init(const Dataset& data, const NoiseConfig& noise, const InitConfig& config)
{
  data.validate();
  ReferenceField field;
  field.gravity = config.gravity;

  InitBundle out;
  const GyroBiasEstimate bias = estimate_gyro_bias(data, noise, field, config.stationary);
  out.stationary_span = bias.span;
  out.params.accel_bias = Vec3::Zero();
  out.params.gyro_bias = bias.bias;
  out.params.dip_angle = config.dip_angle_deg * kDegToRad;

  const RotationTrajectory full = dead_reckon(data.gyro, bias.bias, data.dt);
  out.trajectory.reserve(data.keyframe_count());
  for (std::size_t l = 0; l < data.keyframe_count(); ++l)
    out.trajectory.push_back(full[data.keyframe_row(l)]);

  std::vector<Vec3> mags;
  mags.reserve(data.keyframe_count());
  for (std::size_t l = 0; l < data.keyframe_count(); ++l)
    mags.push_back(data.keyframe_mag(l));
  const EllipsoidFit seed = ellipsoid_fit(mags);
  out.intrinsic = intrinsic_refine(mags, seed, config.intrinsic_solver);
  out.alignment = extrinsic_align(data, bias.bias, out.intrinsic.intrinsic, out.intrinsic.mag_bias,
                                  config.alignment);
  out.params.mag_distortion = out.intrinsic.intrinsic * out.alignment.matrix();
  out.params.mag_bias = out.intrinsic.mag_bias;
  return out;
}

} // namespace magcal
