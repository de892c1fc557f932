/*
 *  Copyright (C) 2026 The magcal Authors
 *
 *  SPDX-License-Identifier: Apache-2.0
 *  See the file LICENSE for more information.
 */

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <utility>
#include <vector>

#include "magcal/error.hpp"
#include "magcal/models.hpp"
#include "magcal/so3.hpp"

namespace magcal::sim
{

/// Fixed values that replace the corresponding random draws.
struct ParamOverrides
{
  std::optional<Vec3> accel_bias;
  std::optional<Vec3> gyro_bias;
  std::optional<Vec3> mag_bias;
  std::optional<DistortionFactors> distortion;
  std::optional<double> dip_angle;
};

struct SimConfig
{
  std::uint64_t seed = 1;
  double rate_hz = 80.0;
  int rate_ratio = 1;
  double duration_s = 300.0;
  int num_axes = 6;
  double angular_rate_dps = 7.0;
  double stationary_lead_s = 2.0;
  bool noiseless = false;
  double gravity = 9.81;
  NoiseDensity noise;
  ParamOverrides overrides;

  void validate() const
  {
    if (!(rate_hz > 0.0) || rate_ratio < 1 || !(duration_s > 0.0) || num_axes < 1 ||
        stationary_lead_s < 0.0)
      throw Error(ErrorCode::kInvalidArgument, "invalid simulation config");
  }

  /// Per-sample noise the estimators should assume for this dataset.
  NoiseConfig noise_config() const { return noise.at_rate(rate_hz, rate_ratio); }
};

struct GroundTruth
{
  CalibrationParams params;
  DistortionFactors factors;
  RotationTrajectory trajectory;
  std::vector<Vec3> angular_rates; // true body rate over [k, k + 1)
};

/// Independent random streams so that, e.g., changing the rate ratio does
/// not change the parameter draw.
enum class Stream : std::uint64_t
{
  kParams = 1,
  kTrajectory = 2,
  kGyroNoise = 3,
  kAccelNoise = 4,
  kMagNoise = 5,
};

inline std::mt19937_64 make_rng(std::uint64_t seed, Stream stream)
{
  // splitmix64 finalizer over (seed, stream)
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(stream) + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  z ^= z >> 31;
  return std::mt19937_64(z);
}

/// Draws calibration parameters from the simulation distributions:
/// scales U(0.9, 1.1), skew angles U(-10, 10) deg, alignment Euler angles
/// U(-5, 5) deg, o_a U(-0.5, 0.5) m/s^2, o_w U(0.47, 0.67) deg/s,
/// o_m U(-2, 2), dip U(67, 77) deg.
inline GroundTruth sample_params(std::mt19937_64& rng, const ParamOverrides& overrides = {})
{
  auto uniform = [&rng](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto uniform3 = [&](double lo, double hi) {
    const double x = uniform(lo, hi);
    const double y = uniform(lo, hi);
    const double z = uniform(lo, hi);
    return Vec3(x, y, z);
  };

  GroundTruth truth;
  truth.factors.scales = uniform3(0.9, 1.1);
  truth.factors.skew_angles = uniform3(-10.0, 10.0) * kDegToRad;
  const Vec3 euler = uniform3(-5.0, 5.0) * kDegToRad;
  truth.factors.alignment = from_euler(euler(0), euler(1), euler(2));
  truth.params.accel_bias = uniform3(-0.5, 0.5);
  truth.params.gyro_bias = uniform3(0.47, 0.67) * kDegToRad;
  truth.params.mag_bias = uniform3(-2.0, 2.0);
  truth.params.dip_angle = uniform(67.0, 77.0) * kDegToRad;

  if (overrides.accel_bias)
    truth.params.accel_bias = *overrides.accel_bias;
  if (overrides.gyro_bias)
    truth.params.gyro_bias = *overrides.gyro_bias;
  if (overrides.mag_bias)
    truth.params.mag_bias = *overrides.mag_bias;
  if (overrides.distortion)
    truth.factors = *overrides.distortion;
  if (overrides.dip_angle)
    truth.params.dip_angle = *overrides.dip_angle;
  truth.params.mag_distortion = compose_distortion(truth.factors);
  return truth;
}

inline std::size_t total_samples(const SimConfig& cfg)
{
  return static_cast<std::size_t>(std::llround(cfg.rate_hz * (cfg.duration_s + cfg.stationary_lead_s)));
}

inline std::size_t lead_samples(const SimConfig& cfg)
{
  return static_cast<std::size_t>(std::llround(cfg.rate_hz * cfg.stationary_lead_s));
}

/// Nominal rotation axes; cycled when num_axes > 6.
inline Vec3 nominal_axis(int i)
{
  switch (i % 6)
  {
    case 0: return Vec3::UnitX();
    case 1: return -Vec3::UnitX();
    case 2: return Vec3::UnitY();
    case 3: return -Vec3::UnitY();
    case 4: return Vec3::UnitZ();
    default: return Vec3::Ones().normalized();
  }
}

struct Segment
{
  std::size_t first_interval = 0;
  std::size_t interval_count = 0;
  Vec3 rate = Vec3::Zero(); // rad/s, body frame
};

/// Stationary lead-in followed by num_axes constant-rate segments, each about
/// a jittered axis (direction tilted by up to 3 deg, rate scaled by up to
/// +-10 %). Segment rotations are evaluated in closed form from the segment
/// start, so the trajectory carries no integration drift.
inline std::vector<Segment> plan_segments(const SimConfig& cfg, std::mt19937_64& rng)
{
  cfg.validate();
  auto uniform = [&rng](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  std::normal_distribution<double> normal;

  const std::size_t total = total_samples(cfg);
  const std::size_t lead = std::min(lead_samples(cfg), total > 0 ? total - 1 : 0);
  const std::size_t moving = total > lead + 1 ? total - 1 - lead : 0;
  const auto axes = static_cast<std::size_t>(cfg.num_axes);

  std::vector<Segment> segments;
  std::size_t first = lead;
  for (std::size_t s = 0; s < axes; ++s)
  {
    const Vec3 axis = nominal_axis(static_cast<int>(s));
    Vec3 perp(normal(rng), normal(rng), normal(rng));
    perp -= perp.dot(axis) * axis;
    perp.normalize();
    const double tilt = uniform(-3.0, 3.0) * kDegToRad;
    const Vec3 jittered = (exp_map(tilt * perp) * axis).normalized();
    const double rate = cfg.angular_rate_dps * kDegToRad * (1.0 + uniform(-0.1, 0.1));

    Segment seg;
    seg.first_interval = first;
    seg.interval_count = (s + 1 == axes) ? lead + moving - first : moving / axes;
    seg.rate = rate * jittered;
    segments.push_back(seg);
    first += seg.interval_count;
  }
  return segments;
}

/// Returns the trajectory and the true body rate on each interval [k, k + 1).
inline std::pair<RotationTrajectory, std::vector<Vec3>> generate_trajectory(const SimConfig& cfg,
                                                                             std::mt19937_64& rng)
{
  const std::size_t total = total_samples(cfg);
  const std::vector<Segment> segments = plan_segments(cfg, rng);

  RotationTrajectory trajectory(total);
  std::vector<Vec3> rates(total, Vec3::Zero());
  if (total == 0)
    return {trajectory, rates};

  const std::size_t lead = segments.empty() ? total - 1 : segments.front().first_interval;
  for (std::size_t k = 0; k <= lead && k < total; ++k)
    trajectory[k] = Rotation::identity();

  for (const Segment& seg : segments)
  {
    const Rotation start = trajectory[seg.first_interval];
    for (std::size_t j = 1; j <= seg.interval_count; ++j)
    {
      const std::size_t k = seg.first_interval + j;
      trajectory[k] = (start * exp_map(seg.rate * (static_cast<double>(j) / cfg.rate_hz))).orthonormalized();
      rates[k - 1] = seg.rate;
    }
  }
  if (total >= 2)
    rates[total - 1] = rates[total - 2];
  return {trajectory, rates};
}

/// Sensor streams from the measurement models plus white Gaussian noise.
///
/// Gyro noise uses the IMU rate. The accelerometer and magnetometer samples
/// on keyframe rows form the aiding stream at rate_hz / rate_ratio and carry
/// noise for that rate; accelerometer samples between keyframes use the IMU
/// rate.
inline Dataset synthesize_measurements(const GroundTruth& truth, const SimConfig& cfg)
{
  cfg.validate();
  const std::size_t total = truth.trajectory.size();
  const NoiseConfig aiding = cfg.noise.at_rate(cfg.rate_hz, cfg.rate_ratio);
  const NoiseConfig imu = cfg.noise.at_rate(cfg.rate_hz, 1);
  const double scale = cfg.noiseless ? 0.0 : 1.0;

  std::mt19937_64 gyro_rng = make_rng(cfg.seed, Stream::kGyroNoise);
  std::mt19937_64 accel_rng = make_rng(cfg.seed, Stream::kAccelNoise);
  std::mt19937_64 mag_rng = make_rng(cfg.seed, Stream::kMagNoise);
  std::normal_distribution<double> normal;
  auto noise3 = [&normal](std::mt19937_64& rng, const Vec3& sigma) {
    const double x = normal(rng);
    const double y = normal(rng);
    const double z = normal(rng);
    return Vec3(sigma.x() * x, sigma.y() * y, sigma.z() * z);
  };

  ReferenceField field;
  field.gravity = cfg.gravity;

  Dataset data;
  data.dt = 1.0 / cfg.rate_hz;
  data.rate_ratio = cfg.rate_ratio;
  data.gyro.resize(total);
  data.accel.resize(total);
  data.mag.resize(total);
  for (std::size_t k = 0; k < total; ++k)
  {
    const Rotation& r = truth.trajectory[k];
    data.gyro[k] = truth.angular_rates[k] + truth.params.gyro_bias + scale * noise3(gyro_rng, imu.sigma_gyro);
    const bool keyframe = data.is_keyframe(k);
    const Vec3& sigma_accel = keyframe ? aiding.sigma_accel : imu.sigma_accel;
    data.accel[k] = accel_model(r, truth.params, field) + scale * noise3(accel_rng, sigma_accel);
    if (keyframe)
      data.mag[k] = mag_model(r, truth.params) + scale * noise3(mag_rng, aiding.sigma_mag);
  }
  return data;
}

struct Simulation
{
  Dataset data;
  GroundTruth truth;
};

inline Simulation simulate(const SimConfig& cfg)
{
  std::mt19937_64 param_rng = make_rng(cfg.seed, Stream::kParams);
  std::mt19937_64 traj_rng = make_rng(cfg.seed, Stream::kTrajectory);
  Simulation out;
  out.truth = sample_params(param_rng, cfg.overrides);
  auto [trajectory, rates] = generate_trajectory(cfg, traj_rng);
  out.truth.trajectory = std::move(trajectory);
  out.truth.angular_rates = std::move(rates);
  out.data = synthesize_measurements(out.truth, cfg);
  return out;
}

} // namespace magcal::sim
