/*
 *  Copyright (C) 2026 The magcal Authors
 *
 *  SPDX-License-Identifier: Apache-2.0
 *  See the file LICENSE for more information.
 */

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "magcal/magcal.hpp"
#include "test_support.hpp"

using namespace magcal;
namespace fs = std::filesystem;

namespace
{

sim::SimConfig short_config(double duration_s, bool noiseless, int rate_ratio = 1, std::uint64_t seed = 3)
{
  sim::SimConfig cfg;
  cfg.seed = seed;
  cfg.duration_s = duration_s;
  cfg.noiseless = noiseless;
  cfg.rate_ratio = rate_ratio;
  return cfg;
}

// Z-Y-X angles of a rotation built by from_euler().
Vec3 euler_angles(const Rotation& r)
{
  const Mat3& m = r.matrix();
  return {std::atan2(m(2, 1), m(2, 2)), -std::asin(m(2, 0)), std::atan2(m(1, 0), m(0, 0))};
}

class TempDir
{
public:
  explicit TempDir(const std::string& name)
    : m_path(fs::temp_directory_path() / ("magcal_test_" + name + "_" + std::to_string(::getpid())))
  {
    fs::remove_all(m_path);
    fs::create_directories(m_path);
  }
  ~TempDir() { fs::remove_all(m_path); }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return m_path; }
  fs::path operator/(const std::string& name) const { return m_path / name; }

private:
  fs::path m_path;
};

int run_cli(const std::string& args)
{
  const std::string cmd = std::string(MAGCAL_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

io::CalibrationReport report_for(const io::DatasetMeta& meta, const CalibrationParams& params)
{
  io::CalibrationReport r;
  r.params = params;
  r.method = "joint_map";
  r.converged = true;
  r.termination_reason = "step";
  r.dataset_digest = meta.digest;
  return r;
}

} // namespace

// ---------------------------------------------------------------------------
// Simulator

TEST(Sim, ParameterDrawsStayInRanges)
{
  std::mt19937_64 rng(1);
  const double tol = 1e-12;
  for (int i = 0; i < 10000; ++i)
  {
    const sim::GroundTruth t = sim::sample_params(rng);
    const auto& f = t.factors;
    EXPECT_TRUE((f.scales.array() >= 0.9 && f.scales.array() <= 1.1).all());
    EXPECT_LE(f.skew_angles.cwiseAbs().maxCoeff(), 10.0 * kDegToRad + tol);
    EXPECT_LE(euler_angles(f.alignment).cwiseAbs().maxCoeff(), 5.0 * kDegToRad + 1e-9);
    EXPECT_LE(t.params.accel_bias.cwiseAbs().maxCoeff(), 0.5);
    EXPECT_GE(t.params.gyro_bias.minCoeff(), 0.47 * kDegToRad - tol);
    EXPECT_LE(t.params.gyro_bias.maxCoeff(), 0.67 * kDegToRad + tol);
    EXPECT_LE(t.params.mag_bias.cwiseAbs().maxCoeff(), 2.0);
    EXPECT_GE(t.params.dip_angle, 67.0 * kDegToRad - tol);
    EXPECT_LE(t.params.dip_angle, 77.0 * kDegToRad + tol);
    EXPECT_TRUE(t.params.mag_distortion.isApprox(compose_distortion(f), 1e-14));
    EXPECT_NO_THROW(t.params.validate());
  }
}

TEST(Sim, EulerExtractionInvertsComposition)
{
  const Vec3 angles(0.03, -0.07, 0.05);
  EXPECT_LT((euler_angles(from_euler(angles(0), angles(1), angles(2))) - angles).norm(), 1e-14);
}

TEST(Sim, OverridesReplaceDraws)
{
  sim::ParamOverrides o;
  o.mag_bias = Vec3(0.1, 0.2, 0.3);
  o.dip_angle = 1.0;
  DistortionFactors f;
  f.scales = Vec3(1.0, 1.05, 0.95);
  o.distortion = f;
  std::mt19937_64 a(7);
  std::mt19937_64 b(7);
  const auto drawn = sim::sample_params(a);
  const auto t = sim::sample_params(b, o);
  EXPECT_EQ(t.params.mag_bias, *o.mag_bias);
  EXPECT_EQ(t.params.dip_angle, 1.0);
  EXPECT_TRUE(t.params.mag_distortion.isApprox(Mat3(f.scales.asDiagonal()), 1e-15));
  EXPECT_EQ(t.params.accel_bias, drawn.params.accel_bias);
  EXPECT_EQ(t.params.gyro_bias, drawn.params.gyro_bias);
}

TEST(Sim, SeedDeterminesOutput)
{
  const auto a = sim::simulate(short_config(20.0, false, 1, 9));
  const auto b = sim::simulate(short_config(20.0, false, 1, 9));
  const auto c = sim::simulate(short_config(20.0, false, 1, 10));
  EXPECT_TRUE(a.data == b.data);
  EXPECT_TRUE(a.truth.params == b.truth.params);
  EXPECT_FALSE(a.data == c.data);
  EXPECT_EQ(io::dataset_to_csv(a.data), io::dataset_to_csv(b.data));
}

TEST(Sim, RateRatioDoesNotChangeParameterDraw)
{
  const auto a = sim::simulate(short_config(10.0, false, 1));
  const auto b = sim::simulate(short_config(10.0, false, 4));
  EXPECT_TRUE(a.truth.params == b.truth.params);
  for (std::size_t k = 0; k < a.truth.trajectory.size(); ++k)
    ASSERT_TRUE(a.truth.trajectory[k] == b.truth.trajectory[k]);
}

TEST(Sim, SampleCountsAndLeadIn)
{
  sim::SimConfig cfg = short_config(60.0, true);
  cfg.stationary_lead_s = 2.0;
  const auto s = sim::simulate(cfg);
  EXPECT_EQ(s.data.size(), static_cast<std::size_t>(std::llround(80.0 * 62.0)));
  EXPECT_EQ(s.truth.trajectory.size(), s.data.size());
  EXPECT_EQ(s.data.dt, 1.0 / 80.0);
  const std::size_t lead = sim::lead_samples(cfg);
  EXPECT_EQ(lead, 160u);
  for (std::size_t k = 0; k <= lead; ++k)
    ASSERT_TRUE(s.truth.trajectory[k] == Rotation::identity());
  for (std::size_t k = 0; k < lead; ++k)
    ASSERT_EQ(s.truth.angular_rates[k], Vec3::Zero());
  EXPECT_GT(angular_distance(s.truth.trajectory[lead], s.truth.trajectory[lead + 1]), 0.0);
}

TEST(Sim, SegmentsRotateByRateTimesDuration)
{
  sim::SimConfig cfg = short_config(60.0, true);
  std::mt19937_64 plan_rng = sim::make_rng(cfg.seed, sim::Stream::kTrajectory);
  const auto segments = sim::plan_segments(cfg, plan_rng);
  std::mt19937_64 traj_rng = sim::make_rng(cfg.seed, sim::Stream::kTrajectory);
  const auto [trajectory, rates] = sim::generate_trajectory(cfg, traj_rng);

  ASSERT_EQ(segments.size(), 6u);
  std::size_t covered = 0;
  for (std::size_t i = 0; i < segments.size(); ++i)
  {
    const auto& seg = segments[i];
    const double rate = seg.rate.norm();
    EXPECT_GE(rate, 0.9 * 7.0 * kDegToRad - 1e-12);
    EXPECT_LE(rate, 1.1 * 7.0 * kDegToRad + 1e-12);
    const Vec3 nominal = sim::nominal_axis(static_cast<int>(i));
    EXPECT_LE(std::acos(std::clamp(seg.rate.normalized().dot(nominal), -1.0, 1.0)), 3.0 * kDegToRad + 1e-9);

    const double expected = rate * static_cast<double>(seg.interval_count) / cfg.rate_hz;
    ASSERT_LT(expected, 3.0);
    const double net = angular_distance(trajectory[seg.first_interval],
                                        trajectory[seg.first_interval + seg.interval_count]);
    EXPECT_NEAR(net, expected, 1e-9);
    covered += seg.interval_count;
  }
  EXPECT_EQ(sim::lead_samples(cfg) + covered + 1, trajectory.size());
}

TEST(Sim, NoiselessIdentityCalibrationGivesIdealReadings)
{
  sim::SimConfig cfg = short_config(20.0, true, 2);
  cfg.overrides.accel_bias = Vec3::Zero();
  cfg.overrides.gyro_bias = Vec3::Zero();
  cfg.overrides.mag_bias = Vec3::Zero();
  cfg.overrides.distortion = DistortionFactors{};
  cfg.overrides.dip_angle = 70.0 * kDegToRad;
  const auto s = sim::simulate(cfg);
  const Vec3 g(0.0, 0.0, cfg.gravity);
  const Vec3 m = ReferenceField::magnetic_direction(70.0 * kDegToRad);
  for (std::size_t k = 0; k < s.data.size(); ++k)
  {
    const Mat3 rt = s.truth.trajectory[k].matrix().transpose();
    ASSERT_EQ(s.data.gyro[k], s.truth.angular_rates[k]);
    ASSERT_TRUE(s.data.accel[k].has_value());
    ASSERT_LT((*s.data.accel[k] + rt * g).norm(), 1e-14);
    ASSERT_EQ(s.data.mag[k].has_value(), k % 2 == 0);
    if (s.data.mag[k])
      ASSERT_LT((*s.data.mag[k] - rt * m).norm(), 1e-15);
  }
}

TEST(Sim, NoiseVarianceMatchesConfiguredDensity)
{
  for (int ratio : {1, 4})
  {
    const auto noisy = sim::simulate(short_config(300.0, false, ratio, 21));
    const auto clean = sim::simulate(short_config(300.0, true, ratio, 21));
    const NoiseDensity density;
    const double gyro_sigma = density.gyro * std::sqrt(80.0);
    const double aiding_rate = 80.0 / ratio;
    const double accel_sigma = density.accel * std::sqrt(aiding_rate);
    const double mag_sigma = density.mag * std::sqrt(aiding_rate);

    double gyro = 0.0;
    double accel = 0.0;
    double mag = 0.0;
    std::size_t mag_rows = 0;
    for (std::size_t k = 0; k < noisy.data.size(); ++k)
    {
      gyro += (noisy.data.gyro[k] - clean.data.gyro[k]).squaredNorm();
      if (noisy.data.is_keyframe(k))
      {
        accel += (*noisy.data.accel[k] - *clean.data.accel[k]).squaredNorm();
        mag += (*noisy.data.mag[k] - *clean.data.mag[k]).squaredNorm();
        ++mag_rows;
      }
      else
      {
        ASSERT_FALSE(noisy.data.mag[k].has_value());
      }
    }
    const double n = static_cast<double>(noisy.data.size());
    const double total = n;
    EXPECT_EQ(mag_rows, static_cast<std::size_t>(std::ceil(total / ratio)));
    EXPECT_NEAR(gyro / (3.0 * n) / (gyro_sigma * gyro_sigma), 1.0, 0.05) << "ratio " << ratio;
    EXPECT_NEAR(accel / (3.0 * mag_rows) / (accel_sigma * accel_sigma), 1.0, 0.05) << "ratio " << ratio;
    EXPECT_NEAR(mag / (3.0 * mag_rows) / (mag_sigma * mag_sigma), 1.0, 0.05) << "ratio " << ratio;
  }
}

TEST(Sim, TruthIsTheOnlyZeroCostPoint)
{
  const auto cfg = short_config(30.0, true, 2);
  const auto s = sim::simulate(cfg);
  JointEstimate truth;
  truth.params = s.truth.params;
  for (std::size_t l = 0; l < s.data.keyframe_count(); ++l)
    truth.states.push_back(s.truth.trajectory[s.data.keyframe_row(l)]);
  const JointProblem problem(s.data, cfg.noise_config(), ReferenceField{}, truth.params.gyro_bias);
  EXPECT_LT(problem.cost(truth), 1e-16);

  std::mt19937_64 rng(4);
  std::normal_distribution<double> normal;
  for (int i = 0; i < 100; ++i)
  {
    Eigen::VectorXd step = Eigen::VectorXd::Zero(kParamDim + 3 * static_cast<Eigen::Index>(truth.states.size()));
    const auto idx = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(step.size()));
    step(idx) = 1e-3 * (normal(rng) > 0 ? 1.0 : -1.0);
    EXPECT_GT(problem.cost(JointProblem::retract_estimate(truth, step)), 1e-12) << "coordinate " << idx;
  }
}

// ---------------------------------------------------------------------------
// Dataset and report IO

TEST(Io, CsvRoundTripIsExact)
{
  TempDir dir("csv");
  for (int ratio : {1, 4})
  {
    const auto s = sim::simulate(short_config(10.0, false, ratio));
    fs::create_directories(dir.path() / std::to_string(ratio));
    const fs::path nested = dir.path() / std::to_string(ratio) / "data.csv";
    const io::DatasetMeta meta = io::write_dataset(s.data, nested, s.truth.params);
    const Dataset back = io::read_dataset(nested);
    EXPECT_TRUE(back == s.data) << "ratio " << ratio;
    EXPECT_EQ(back.rate_ratio, ratio);
    EXPECT_EQ(io::read_meta(io::meta_path(nested)), meta);
    EXPECT_EQ(io::dataset_to_csv(back), io::read_file(nested));

    // Without a sidecar the interval comes from the time stamps.
    const Dataset bare = io::dataset_from_csv(io::read_file(nested));
    EXPECT_NEAR(bare.dt, s.data.dt, 1e-15);
    EXPECT_EQ(bare.gyro, s.data.gyro);
    EXPECT_EQ(bare.mag, s.data.mag);
  }
}

TEST(Io, EmptyMagnetometerFieldsDefineRateRatio)
{
  const std::string text = std::string(io::kCsvHeader) +
                           "\n0,0,0,0,0,0,-9.81,0,1,0\n"
                           "0.25,0,0,0,,,,,,\n0.5,0,0,0,0,0,-9.81,0,1,0\n0.75,0,0,0,0,0,-9.81,,,\n";
  const Dataset d = io::dataset_from_csv(text);
  EXPECT_EQ(d.rate_ratio, 2);
  EXPECT_EQ(d.size(), 4u);
  EXPECT_FALSE(d.accel[1].has_value());
  EXPECT_TRUE(d.accel[3].has_value());
  EXPECT_DOUBLE_EQ(d.dt, 0.25);
}

TEST(Io, RejectsMalformedInput)
{
  const auto s = sim::simulate(short_config(2.0, false));
  const std::string good = io::dataset_to_csv(s.data);

  auto code_of = [](const std::string& text) {
    try
    {
      io::dataset_from_csv(text);
    }
    catch (const Error& e)
    {
      return e.code();
    }
    return ErrorCode::kInvalidArgument;
  };

  std::string bad_header = good;
  bad_header.replace(0, 1, "time");
  EXPECT_EQ(code_of(bad_header), ErrorCode::kBadHeader);

  // Swap two data rows.
  std::vector<std::string> lines;
  std::size_t pos = 0;
  while (pos < good.size())
  {
    const std::size_t next = good.find('\n', pos);
    lines.push_back(good.substr(pos, next - pos));
    pos = next + 1;
  }
  std::swap(lines[5], lines[6]);
  std::string shuffled;
  for (const auto& l : lines)
    shuffled += l + "\n";
  EXPECT_EQ(code_of(shuffled), ErrorCode::kNonMonotoneTime);

  std::string nan = good;
  const std::size_t row = nan.find('\n', nan.find('\n') + 1) + 1;
  const std::size_t comma = nan.find(',', row);
  nan.replace(comma + 1, nan.find(',', comma + 1) - comma - 1, "nan");
  EXPECT_EQ(code_of(nan), ErrorCode::kNonFiniteField);

  Dataset gap = s.data;
  gap.rate_ratio = 1;
  gap.mag[2].reset();
  EXPECT_EQ(code_of(io::dataset_to_csv(gap)), ErrorCode::kInconsistentRateRatio);
}

TEST(Io, SidecarMismatchesAreDetected)
{
  TempDir dir("meta");
  const auto s = sim::simulate(short_config(5.0, false, 2));
  const fs::path csv = dir / "data.csv";
  io::DatasetMeta meta = io::write_dataset(s.data, csv);

  auto code_of = [&csv]() {
    try
    {
      io::read_dataset(csv);
    }
    catch (const Error& e)
    {
      return e.code();
    }
    return ErrorCode::kInvalidArgument;
  };

  io::DatasetMeta wrong_ratio = meta;
  wrong_ratio.rate_ratio = 4;
  io::write_file(io::meta_path(csv), io::meta_to_json(wrong_ratio).dump());
  EXPECT_EQ(code_of(), ErrorCode::kMetaMismatch);

  io::DatasetMeta wrong_rate = meta;
  wrong_rate.rate_hz = 100.0;
  wrong_rate.dt = 0.01;
  io::write_file(io::meta_path(csv), io::meta_to_json(wrong_rate).dump());
  EXPECT_EQ(code_of(), ErrorCode::kMetaMismatch);

  io::DatasetMeta wrong_digest = meta;
  wrong_digest.digest = io::digest("something else");
  io::write_file(io::meta_path(csv), io::meta_to_json(wrong_digest).dump());
  EXPECT_EQ(code_of(), ErrorCode::kDigestMismatch);

  io::write_file(io::meta_path(csv), "{not json");
  EXPECT_EQ(code_of(), ErrorCode::kMetaMismatch);
}

TEST(Io, ReportRoundTrip)
{
  TempDir dir("report");
  std::mt19937_64 rng(2);
  io::CalibrationReport r;
  r.params = test::random_params(rng);
  r.method = "kok_ml";
  r.converged = false;
  r.termination_reason = "max_iter";
  r.solve = {{"iterations", 12}, {"costs", {3.0, 2.0, 1.5}}};
  r.config = run_config_to_json(RunConfig{});
  r.dataset_digest = io::digest("abc");
  io::write_report(r, dir / "report.json");
  EXPECT_EQ(io::read_report(dir / "report.json"), r);
  EXPECT_TRUE(io::params_from_json(io::params_to_json(r.params)) == r.params);
}

TEST(Io, RunConfigRoundTrip)
{
  RunConfig c;
  c.init.dip_angle_deg = 65.5;
  c.init.gravity = 9.79;
  c.noise.accel = 0.03;
  c.noise.gyro = 1e-4;
  c.noise.mag = 0.004;
  c.solver.max_iter = 17;
  c.solver.step_tol = 1e-7;
  c.solver.frozen = {ParamBlock::kDipAngle, ParamBlock::kAccelBias};
  c.kok.max_iter = 9;
  const RunConfig back = run_config_from_json(run_config_to_json(c));
  EXPECT_EQ(run_config_to_json(back), run_config_to_json(c));
  EXPECT_EQ(back.solver.frozen, c.solver.frozen);
  EXPECT_EQ(back.noise.gyro, 1e-4);
  EXPECT_THROW(parse_param_block("beta"), Error);
  EXPECT_EQ(parse_param_block("dip_angle"), ParamBlock::kDipAngle);
  EXPECT_THROW(parse_method("ekf"), Error);
}

// ---------------------------------------------------------------------------
// Evaluation

TEST(Evaluate, ErrorsAgainstTruth)
{
  std::mt19937_64 rng(8);
  io::DatasetMeta meta;
  meta.digest = io::digest("data");
  meta.truth = test::random_params(rng);

  const ParamErrors zero = evaluate(report_for(meta, *meta.truth), meta);
  EXPECT_EQ(zero.mag_bias, Vec3::Zero());
  EXPECT_EQ(zero.mag_distortion, 0.0);
  EXPECT_EQ(zero.accel_bias, Vec3::Zero());
  EXPECT_EQ(zero.gyro_bias, Vec3::Zero());
  EXPECT_EQ(zero.dip_angle, 0.0);

  CalibrationParams shifted = *meta.truth;
  shifted.mag_bias.x() += 0.5;
  const ParamErrors e = evaluate(report_for(meta, shifted), meta);
  EXPECT_NEAR(e.mag_bias.x(), 0.5, 1e-15);
  EXPECT_EQ(e.mag_bias.y(), 0.0);
  EXPECT_EQ(e.mag_bias.z(), 0.0);
  EXPECT_EQ(e.mag_distortion, 0.0);
  EXPECT_EQ(e.accel_bias, Vec3::Zero());

  io::CalibrationReport other = report_for(meta, shifted);
  other.dataset_digest = io::digest("other");
  EXPECT_THROW(evaluate(other, meta), Error);
  io::DatasetMeta no_truth = meta;
  no_truth.truth.reset();
  EXPECT_THROW(evaluate(report_for(no_truth, shifted), no_truth), Error);
}

TEST(Evaluate, BatchRmseMatchesDefinition)
{
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<ParamErrors> errors(7);
  for (auto& e : errors)
  {
    e.mag_bias = Vec3(u(rng), u(rng), u(rng)).cwiseAbs();
    e.accel_bias = Vec3(u(rng), u(rng), u(rng)).cwiseAbs();
    e.gyro_bias = Vec3(u(rng), u(rng), u(rng)).cwiseAbs();
    e.mag_distortion = std::abs(u(rng));
    e.dip_angle = std::abs(u(rng));
  }
  double mb = 0.0;
  double md = 0.0;
  double ab = 0.0;
  double gb = 0.0;
  double dip = 0.0;
  for (const auto& e : errors)
  {
    for (int i = 0; i < 3; ++i)
    {
      mb += e.mag_bias(i) * e.mag_bias(i);
      ab += e.accel_bias(i) * e.accel_bias(i);
      gb += e.gyro_bias(i) * e.gyro_bias(i);
    }
    md += e.mag_distortion * e.mag_distortion;
    dip += e.dip_angle * e.dip_angle;
  }
  const GroupRmse r = batch_rmse(errors);
  EXPECT_NEAR(r.mag_bias, std::sqrt(mb / 7.0), 1e-15);
  EXPECT_NEAR(r.mag_distortion, std::sqrt(md / 7.0), 1e-15);
  EXPECT_NEAR(r.accel_bias, std::sqrt(ab / 7.0), 1e-15);
  EXPECT_NEAR(r.gyro_bias, std::sqrt(gb / 7.0), 1e-15);
  EXPECT_NEAR(r.dip_angle, std::sqrt(dip / 7.0), 1e-15);
  EXPECT_EQ(batch_rmse({}), GroupRmse{});
}

// ---------------------------------------------------------------------------
// Command-line tool

TEST(Cli, NoiselessCalibrationRecoversTruth)
{
  TempDir dir("cli_cal");
  const std::string data = (dir / "sim").string();
  ASSERT_EQ(run_cli("simulate --out " + data + " --seed 4 --duration 60 --noiseless"), 0);
  const fs::path csv = dir / "sim/data.csv";
  const io::DatasetMeta meta = io::read_meta(dir / "sim/meta.json");
  ASSERT_TRUE(meta.truth.has_value());

  ASSERT_EQ(run_cli("calibrate " + csv.string() + " --out " + (dir / "a.json").string()), 0);
  const io::CalibrationReport a = io::read_report(dir / "a.json");
  EXPECT_TRUE(a.converged);
  EXPECT_EQ(a.dataset_digest, meta.digest);
  const CalibrationParams& t = *meta.truth;
  EXPECT_LT((a.params.mag_bias - t.mag_bias).norm(), 1e-6 * t.mag_bias.norm());
  EXPECT_LT((a.params.mag_distortion - t.mag_distortion).norm(), 1e-6 * t.mag_distortion.norm());
  EXPECT_LT((a.params.accel_bias - t.accel_bias).norm(), 1e-6 * t.accel_bias.norm());
  EXPECT_LT((a.params.gyro_bias - t.gyro_bias).norm(), 1e-6 * t.gyro_bias.norm());
  EXPECT_LT(std::abs(a.params.dip_angle - t.dip_angle), 1e-6 * t.dip_angle);

  // Same input, same output.
  ASSERT_EQ(run_cli("calibrate " + csv.string() + " --out " + (dir / "b.json").string()), 0);
  EXPECT_TRUE(io::read_report(dir / "b.json").params == a.params);

  ASSERT_EQ(run_cli("evaluate --report " + (dir / "a.json").string() + " --truth " +
                    (dir / "sim/meta.json").string() + " --out " + (dir / "eval.json").string()),
            0);
  const auto eval = io::Json::parse(io::read_file(dir / "eval.json"));
  EXPECT_LT(eval.at("runs").at(0).at("errors").at("dip_angle_rad").get<double>(), 1e-6);
}

TEST(Cli, FreezeAndDownsample)
{
  TempDir dir("cli_opts");
  ASSERT_EQ(run_cli("simulate --out " + (dir / "sim").string() + " --seed 6"), 0);
  const std::string csv = (dir / "sim/data.csv").string();

  ASSERT_EQ(run_cli("calibrate " + csv + " --freeze alpha --out " + (dir / "f.json").string()), 0);
  const io::CalibrationReport frozen = io::read_report(dir / "f.json");
  EXPECT_EQ(frozen.params.dip_angle, InitConfig{}.dip_angle_deg * kDegToRad);

  ASSERT_EQ(run_cli("calibrate " + csv + " --downsample 3 --out " + (dir / "d.json").string()), 0);
  const io::CalibrationReport down = io::read_report(dir / "d.json");
  EXPECT_EQ(down.config.at("downsample").get<int>(), 3);
  EXPECT_EQ(down.solve.at("rate_ratio").get<int>(), 3);
}

TEST(Cli, ExitCodes)
{
  TempDir dir("cli_exit");
  ASSERT_EQ(run_cli("simulate --out " + (dir / "sim").string() + " --seed 2 --duration 20"), 0);
  const std::string csv = (dir / "sim/data.csv").string();
  const std::string out = " --out " + (dir / "r.json").string();

  EXPECT_EQ(run_cli("calibrate " + csv + " --method ekf" + out), 2);
  EXPECT_EQ(run_cli("calibrate " + csv + " --freeze beta" + out), 2);

  const std::string text = io::read_file(csv);
  io::write_file(dir / "sim/data.csv", text + "\n");
  EXPECT_EQ(run_cli("calibrate " + csv + out), 16);

  fs::create_directories(dir / "bad");
  io::write_file(dir / "bad/data.csv", "time,a,b\n0,1,2\n");
  EXPECT_EQ(run_cli("calibrate " + (dir / "bad/data.csv").string() + out), 11);

  fs::create_directories(dir / "still");
  // Gyro noise alone must not pass as rotation.
  ASSERT_EQ(run_cli("simulate --out " + (dir / "still").string() + " --duration 10 --rate-dps 0"), 0);
  EXPECT_EQ(run_cli("calibrate " + (dir / "still/data.csv").string() + out), 22);
  // A failed run still leaves a report.
  EXPECT_NE(io::read_report(dir / "r.json").termination_reason.find("error"), std::string::npos);
}
