/*
 *  Copyright (C) 2026 The magcal Authors
 *
 *  SPDX-License-Identifier: Apache-2.0
 *  See the file LICENSE for more information.
 */

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "magcal/baselines.hpp"
#include "magcal/error.hpp"
#include "magcal/init.hpp"
#include "magcal/io.hpp"
#include "magcal/models.hpp"
#include "magcal/parallel.hpp"
#include "magcal/sim.hpp"
#include "magcal/solver.hpp"

namespace magcal
{

using io::Json;

enum class Method
{
  kJointMap,
  kWuEkf,
  kKokMl,
};

inline std::string to_string(Method m)
{
  switch (m)
  {
    case Method::kJointMap: return "joint_map";
    case Method::kWuEkf: return "wu_ekf";
    case Method::kKokMl: return "kok_ml";
  }
  return "unknown";
}

inline Method parse_method(const std::string& name)
{
  if (name == "joint_map")
    return Method::kJointMap;
  if (name == "wu_ekf")
    return Method::kWuEkf;
  if (name == "kok_ml")
    return Method::kKokMl;
  throw Error(ErrorCode::kInvalidArgument, "unknown method '" + name + "'");
}

/// Accepts the short symbols (o_a, o_w, D_m, o_m, alpha) and the field names.
inline ParamBlock parse_param_block(const std::string& name)
{
  if (name == "o_a" || name == "accel_bias")
    return ParamBlock::kAccelBias;
  if (name == "o_w" || name == "gyro_bias")
    return ParamBlock::kGyroBias;
  if (name == "D_m" || name == "mag_distortion")
    return ParamBlock::kMagDistortion;
  if (name == "o_m" || name == "mag_bias")
    return ParamBlock::kMagBias;
  if (name == "alpha" || name == "dip_angle")
    return ParamBlock::kDipAngle;
  throw Error(ErrorCode::kInvalidArgument, "unknown parameter block '" + name + "'");
}

/// Everything an estimator run needs besides the data.
struct RunConfig
{
  InitConfig init;
  NoiseDensity noise;
  SolverOptions solver;
  KokOptions kok;
  WuOptions wu;
};

inline Json run_config_to_json(const RunConfig& c)
{
  Json frozen = Json::array();
  for (ParamBlock b : c.solver.frozen)
  {
    static const char* names[] = {"o_a", "o_w", "D_m", "o_m", "alpha"};
    frozen.push_back(names[static_cast<int>(b)]);
  }
  return {{"dip_angle_deg", c.init.dip_angle_deg},
          {"gravity", c.init.gravity},
          {"noise_density", {{"accel", c.noise.accel}, {"gyro", c.noise.gyro}, {"mag", c.noise.mag}}},
          {"stationary",
           {{"window_s", c.init.stationary.window_s},
            {"gyro_std_factor", c.init.stationary.gyro_std_factor},
            {"accel_std_factor", c.init.stationary.accel_std_factor},
            {"max_gyro_mean", c.init.stationary.max_gyro_mean},
            {"max_accel_norm_deviation", c.init.stationary.max_accel_norm_deviation}}},
          {"solver",
           {{"max_iter", c.solver.max_iter},
            {"step_tol", c.solver.step_tol},
            {"initial_lambda", c.solver.initial_lambda},
            {"frozen", frozen}}},
          {"kok", {{"max_iter", c.kok.max_iter}, {"step_tol", c.kok.step_tol}}}};
}

/// Missing keys keep their defaults.
inline RunConfig run_config_from_json(const Json& j)
{
  RunConfig c;
  try
  {
    c.init.dip_angle_deg = j.value("dip_angle_deg", c.init.dip_angle_deg);
    c.init.gravity = j.value("gravity", c.init.gravity);
    if (j.contains("noise_density"))
    {
      const Json& n = j.at("noise_density");
      c.noise.accel = n.value("accel", c.noise.accel);
      c.noise.gyro = n.value("gyro", c.noise.gyro);
      c.noise.mag = n.value("mag", c.noise.mag);
    }
    if (j.contains("stationary"))
    {
      const Json& s = j.at("stationary");
      auto& o = c.init.stationary;
      o.window_s = s.value("window_s", o.window_s);
      o.gyro_std_factor = s.value("gyro_std_factor", o.gyro_std_factor);
      o.accel_std_factor = s.value("accel_std_factor", o.accel_std_factor);
      o.max_gyro_mean = s.value("max_gyro_mean", o.max_gyro_mean);
      o.max_accel_norm_deviation = s.value("max_accel_norm_deviation", o.max_accel_norm_deviation);
    }
    if (j.contains("solver"))
    {
      const Json& s = j.at("solver");
      c.solver.max_iter = s.value("max_iter", c.solver.max_iter);
      c.solver.step_tol = s.value("step_tol", c.solver.step_tol);
      c.solver.initial_lambda = s.value("initial_lambda", c.solver.initial_lambda);
      for (const auto& name : s.value("frozen", std::vector<std::string>{}))
        c.solver.frozen.push_back(parse_param_block(name));
    }
    if (j.contains("kok"))
    {
      const Json& k = j.at("kok");
      c.kok.max_iter = k.value("max_iter", c.kok.max_iter);
      c.kok.step_tol = k.value("step_tol", c.kok.step_tol);
    }
  }
  catch (const Json::exception& e)
  {
    throw Error(ErrorCode::kInvalidArgument, std::string("malformed config: ") + e.what());
  }
  // Unless set explicitly, both estimators share the termination threshold.
  if (!(j.contains("kok") && j.at("kok").contains("step_tol")))
    c.kok.step_tol = c.solver.step_tol;
  return c;
}

struct CalibrationOutcome
{
  Method method = Method::kJointMap;
  CalibrationParams params;
  bool converged = false;
  std::string termination;
  Json stats = Json::object();
  double wall_time_s = 0.0; // initialization plus estimator
  InitBundle init;
};

/// build_init followed by the selected estimator.
inline CalibrationOutcome calibrate(const Dataset& data, const NoiseConfig& noise, const RunConfig& config,
                                    Method method)
{
  const auto start = std::chrono::steady_clock::now();
  if (method != Method::kJointMap && !config.solver.frozen.empty())
    throw Error(ErrorCode::kInvalidArgument, "freezing parameters is only supported by joint_map");

  ReferenceField field;
  field.gravity = config.init.gravity;

  CalibrationOutcome out;
  out.method = method;
  out.init = build_init(data, noise, config.init);
  switch (method)
  {
    case Method::kJointMap:
    {
      JointProblem problem(data, noise, field, out.init.params.gyro_bias, config.solver.frozen);
      auto [estimate, report] = optimize(problem, JointEstimate{out.init.params, out.init.trajectory}, config.solver);
      out.params = estimate.params;
      out.converged = report.converged();
      out.termination = to_string(report.termination);
      out.stats = {{"iterations", report.iterations},
                   {"initial_cost", report.initial_cost},
                   {"final_cost", report.final_cost},
                   {"relinearizations", report.relinearizations},
                   {"solver_wall_time_s", report.wall_time_s}};
      if (report.min_schur_eigenvalue)
        out.stats["min_schur_eigenvalue"] = *report.min_schur_eigenvalue;
      break;
    }
    case Method::kWuEkf:
    {
      const WuResult r = wu_ekf(data, out.init, noise, config.wu, field);
      out.params = r.params;
      out.converged = true;
      out.termination = "filter_complete";
      out.stats = {{"updates", r.updates}, {"filter_wall_time_s", r.wall_time_s}};
      break;
    }
    case Method::kKokMl:
    {
      const KokResult r = kok_ml(data, out.init, noise, config.kok);
      out.params = r.params;
      out.converged = r.converged();
      out.termination = to_string(r.termination);
      out.stats = {{"iterations", r.iterations},
                   {"neg_log_likelihood", r.neg_log_likelihood},
                   {"filter_passes", r.filter_passes},
                   {"optimizer_wall_time_s", r.wall_time_s}};
      break;
    }
  }
  out.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  out.stats["wall_time_s"] = out.wall_time_s;
  out.stats["samples"] = data.size();
  out.stats["rate_ratio"] = data.rate_ratio;
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

/// Absolute per-parameter errors: |estimate - truth| componentwise for the
/// vectors, Frobenius norm of the difference for D_m.
struct ParamErrors
{
  Vec3 mag_bias = Vec3::Zero();
  double mag_distortion = 0.0;
  Vec3 accel_bias = Vec3::Zero();
  Vec3 gyro_bias = Vec3::Zero();
  double dip_angle = 0.0;
};

inline ParamErrors parameter_errors(const CalibrationParams& estimate, const CalibrationParams& truth)
{
  ParamErrors e;
  e.mag_bias = (estimate.mag_bias - truth.mag_bias).cwiseAbs();
  e.mag_distortion = (estimate.mag_distortion - truth.mag_distortion).norm();
  e.accel_bias = (estimate.accel_bias - truth.accel_bias).cwiseAbs();
  e.gyro_bias = (estimate.gyro_bias - truth.gyro_bias).cwiseAbs();
  e.dip_angle = std::abs(estimate.dip_angle - truth.dip_angle);
  return e;
}

inline Json errors_to_json(const ParamErrors& e)
{
  return {{"mag_bias", io::vec_to_json(e.mag_bias)},
          {"mag_distortion_frobenius", e.mag_distortion},
          {"accel_bias", io::vec_to_json(e.accel_bias)},
          {"gyro_bias", io::vec_to_json(e.gyro_bias)},
          {"dip_angle_rad", e.dip_angle}};
}

/// Per-group RMSE over runs: sqrt(mean over runs of |error|^2), where |.| is
/// the Euclidean norm of the group's error.
struct GroupRmse
{
  double mag_bias = 0.0;
  double mag_distortion = 0.0;
  double accel_bias = 0.0;
  double gyro_bias = 0.0;
  double dip_angle = 0.0;

  bool operator==(const GroupRmse&) const = default;
};

inline GroupRmse batch_rmse(std::span<const ParamErrors> errors)
{
  GroupRmse r;
  if (errors.empty())
    return r;
  for (const ParamErrors& e : errors)
  {
    r.mag_bias += e.mag_bias.squaredNorm();
    r.mag_distortion += e.mag_distortion * e.mag_distortion;
    r.accel_bias += e.accel_bias.squaredNorm();
    r.gyro_bias += e.gyro_bias.squaredNorm();
    r.dip_angle += e.dip_angle * e.dip_angle;
  }
  const double n = static_cast<double>(errors.size());
  r.mag_bias = std::sqrt(r.mag_bias / n);
  r.mag_distortion = std::sqrt(r.mag_distortion / n);
  r.accel_bias = std::sqrt(r.accel_bias / n);
  r.gyro_bias = std::sqrt(r.gyro_bias / n);
  r.dip_angle = std::sqrt(r.dip_angle / n);
  return r;
}

inline Json rmse_to_json(const GroupRmse& r)
{
  return {{"mag_bias", r.mag_bias},
          {"mag_distortion", r.mag_distortion},
          {"accel_bias", r.accel_bias},
          {"gyro_bias", r.gyro_bias},
          {"dip_angle_rad", r.dip_angle}};
}

/// Errors of one report against the truth in a dataset sidecar. The dataset
/// digests must agree.
inline ParamErrors evaluate(const io::CalibrationReport& report, const io::DatasetMeta& truth)
{
  if (!truth.truth)
    throw Error(ErrorCode::kInvalidArgument, "truth file has no ground-truth parameters");
  if (report.dataset_digest != truth.digest)
    throw Error(ErrorCode::kDigestMismatch,
                "report digest " + report.dataset_digest + " does not match truth digest " + truth.digest);
  return parameter_errors(report.params, *truth.truth);
}

// ---------------------------------------------------------------------------
// Monte Carlo comparison

enum class Sweep
{
  kRatio,     // values are rate ratios N at sim.rate_hz
  kFrequency, // values are IMU rates at sim.rate_ratio
};

struct CompareConfig
{
  Sweep sweep = Sweep::kRatio;
  std::vector<double> values{1, 2, 4, 8};
  int num_runs = 10;
  std::uint64_t seed = 1; // run r uses seed + r
  sim::SimConfig sim;
  RunConfig run;
  std::vector<Method> methods{Method::kJointMap, Method::kWuEkf, Method::kKokMl};
  unsigned threads = 0; // 0: default_thread_count()
};

inline CompareConfig compare_config_from_json(const Json& j)
{
  CompareConfig c;
  try
  {
    const std::string sweep = j.value("sweep", std::string("ratio"));
    if (sweep == "ratio")
      c.sweep = Sweep::kRatio;
    else if (sweep == "frequency")
      c.sweep = Sweep::kFrequency;
    else
      throw Error(ErrorCode::kInvalidArgument, "sweep must be 'ratio' or 'frequency'");
    c.values = j.value("values", c.values);
    c.num_runs = j.value("num_runs", c.num_runs);
    c.seed = j.value("seed", c.seed);
    if (j.contains("methods"))
    {
      c.methods.clear();
      for (const auto& name : j.at("methods").get<std::vector<std::string>>())
        c.methods.push_back(parse_method(name));
    }
    if (j.contains("sim"))
    {
      const Json& s = j.at("sim");
      c.sim.rate_hz = s.value("rate_hz", c.sim.rate_hz);
      c.sim.rate_ratio = s.value("rate_ratio", c.sim.rate_ratio);
      c.sim.duration_s = s.value("duration_s", c.sim.duration_s);
      c.sim.num_axes = s.value("num_axes", c.sim.num_axes);
      c.sim.angular_rate_dps = s.value("angular_rate_dps", c.sim.angular_rate_dps);
      c.sim.stationary_lead_s = s.value("stationary_lead_s", c.sim.stationary_lead_s);
      c.sim.noiseless = s.value("noiseless", c.sim.noiseless);
    }
    if (j.contains("run"))
      c.run = run_config_from_json(j.at("run"));
  }
  catch (const Json::exception& e)
  {
    throw Error(ErrorCode::kInvalidArgument, std::string("malformed compare config: ") + e.what());
  }
  if (c.num_runs < 1 || c.values.empty() || c.methods.empty())
    throw Error(ErrorCode::kInvalidArgument, "compare needs runs, sweep values and methods");
  c.sim.noise = c.run.noise;
  return c;
}

struct ComparisonRow
{
  double sweep_value = 0.0;
  Method method = Method::kJointMap;
  int runs_ok = 0;
  int runs_failed = 0;
  int runs_not_converged = 0;
  GroupRmse rmse;
  double mean_wall_time_s = 0.0;
  std::vector<std::string> failures;
};

struct ComparisonTable
{
  Sweep sweep = Sweep::kRatio;
  std::vector<ComparisonRow> rows; // sorted by (sweep value, method)

  const ComparisonRow* find(double value, Method method) const
  {
    for (const auto& r : rows)
    {
      if (r.sweep_value == value && r.method == method)
        return &r;
    }
    return nullptr;
  }
};

inline sim::SimConfig sweep_point(const CompareConfig& config, double value, int run)
{
  sim::SimConfig s = config.sim;
  s.seed = config.seed + static_cast<std::uint64_t>(run);
  if (config.sweep == Sweep::kRatio)
    s.rate_ratio = static_cast<int>(std::lround(value));
  else
    s.rate_hz = value;
  return s;
}

/// Runs every method on num_runs simulated datasets per sweep value. Cells
/// run in parallel; results are assembled in (value, method, run) order so
/// the table does not depend on scheduling.
inline ComparisonTable compare(const CompareConfig& config)
{
  const std::size_t points = config.values.size();
  const std::size_t methods = config.methods.size();
  const auto runs = static_cast<std::size_t>(config.num_runs);
  const unsigned threads = config.threads > 0 ? config.threads : default_thread_count();

  struct Cell
  {
    std::optional<ParamErrors> errors;
    bool converged = false;
    double wall_time_s = 0.0;
    std::string failure;
  };
  std::vector<Cell> cells(points * methods * runs);

  // One dataset per (value, run), shared by all methods.
  std::vector<sim::Simulation> datasets(points * runs);
  parallel_for(points * runs, threads, [&](std::size_t i) {
    datasets[i] = sim::simulate(sweep_point(config, config.values[i / runs], static_cast<int>(i % runs)));
  });

  parallel_for(cells.size(), threads, [&](std::size_t i) {
    const std::size_t p = i / (methods * runs);
    const std::size_t m = (i / runs) % methods;
    const std::size_t r = i % runs;
    const sim::SimConfig s = sweep_point(config, config.values[p], static_cast<int>(r));
    const sim::Simulation& ds = datasets[p * runs + r];
    Cell& cell = cells[i];
    try
    {
      const NoiseConfig noise = config.run.noise.at_rate(s.rate_hz, s.rate_ratio);
      const CalibrationOutcome out = calibrate(ds.data, noise, config.run, config.methods[m]);
      cell.errors = parameter_errors(out.params, ds.truth.params);
      cell.converged = out.converged;
      cell.wall_time_s = out.wall_time_s;
    }
    catch (const Error& e)
    {
      cell.failure = "seed " + std::to_string(s.seed) + ": " + e.what();
    }
  });

  ComparisonTable table;
  table.sweep = config.sweep;
  std::ostringstream diagnostics;
  for (std::size_t p = 0; p < points; ++p)
  {
    for (std::size_t m = 0; m < methods; ++m)
    {
      ComparisonRow row;
      row.sweep_value = config.values[p];
      row.method = config.methods[m];
      std::vector<ParamErrors> errs;
      double wall = 0.0;
      for (std::size_t r = 0; r < runs; ++r)
      {
        const Cell& c = cells[(p * methods + m) * runs + r];
        if (c.errors)
        {
          errs.push_back(*c.errors);
          wall += c.wall_time_s;
          ++row.runs_ok;
          if (!c.converged)
            ++row.runs_not_converged;
        }
        else
        {
          ++row.runs_failed;
          row.failures.push_back(c.failure);
        }
      }
      row.rmse = batch_rmse(errs);
      row.mean_wall_time_s = row.runs_ok > 0 ? wall / row.runs_ok : 0.0;
      if (2 * row.runs_failed > config.num_runs)
      {
        diagnostics << to_string(row.method) << " failed " << row.runs_failed << "/" << config.num_runs
                    << " runs at sweep value " << row.sweep_value << ":";
        for (const auto& f : row.failures)
          diagnostics << "\n  " << f;
        diagnostics << "\n";
      }
      table.rows.push_back(std::move(row));
    }
  }
  std::sort(table.rows.begin(), table.rows.end(), [](const ComparisonRow& a, const ComparisonRow& b) {
    return a.sweep_value != b.sweep_value ? a.sweep_value < b.sweep_value : a.method < b.method;
  });
  if (!diagnostics.str().empty())
    throw Error(ErrorCode::kComparisonAborted, diagnostics.str());
  return table;
}

inline Json table_to_json(const ComparisonTable& table, bool include_timing = true)
{
  Json rows = Json::array();
  for (const auto& r : table.rows)
  {
    Json row = {{"sweep_value", r.sweep_value},
                {"method", to_string(r.method)},
                {"runs_ok", r.runs_ok},
                {"runs_failed", r.runs_failed},
                {"runs_not_converged", r.runs_not_converged},
                {"rmse", rmse_to_json(r.rmse)}};
    if (include_timing)
      row["mean_wall_time_s"] = r.mean_wall_time_s;
    rows.push_back(row);
  }
  return {{"sweep", table.sweep == Sweep::kRatio ? "ratio" : "frequency"}, {"rows", rows}};
}

/// One line per (value, method); plot-ready.
inline std::string table_to_csv(const ComparisonTable& table, bool include_timing = true)
{
  std::ostringstream out;
  out << (table.sweep == Sweep::kRatio ? "rate_ratio" : "rate_hz")
      << ",method,runs_ok,runs_failed,rmse_mag_bias,rmse_mag_distortion,rmse_accel_bias,rmse_gyro_bias,"
         "rmse_dip_angle_rad";
  if (include_timing)
    out << ",mean_wall_time_s";
  out << "\n";
  for (const auto& r : table.rows)
  {
    out << io::format_double(r.sweep_value) << ',' << to_string(r.method) << ',' << r.runs_ok << ','
        << r.runs_failed << ',' << io::format_double(r.rmse.mag_bias) << ','
        << io::format_double(r.rmse.mag_distortion) << ',' << io::format_double(r.rmse.accel_bias) << ','
        << io::format_double(r.rmse.gyro_bias) << ',' << io::format_double(r.rmse.dip_angle);
    if (include_timing)
      out << ',' << io::format_double(r.mean_wall_time_s);
    out << "\n";
  }
  return out.str();
}

} // namespace magcal
