/*
 *  Copyright (C) 2026 The magcal Authors
 *
 *  SPDX-License-Identifier: Apache-2.0
 *  See the file LICENSE for more information.
 */

// Command-line front end: simulate, calibrate, compare, evaluate.
// Machine-readable results go to files or stdout; logs go to stderr.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "magcal/magcal.hpp"

namespace fs = std::filesystem;
using magcal::io::Json;

namespace
{

magcal::RunConfig load_run_config(const std::string& path)
{
  if (path.empty())
    return {};
  try
  {
    return magcal::run_config_from_json(Json::parse(magcal::io::read_file(path)));
  }
  catch (const Json::parse_error& e)
  {
    throw magcal::Error(magcal::ErrorCode::kInvalidArgument, "cannot parse " + path + ": " + e.what());
  }
}

void log(const std::string& msg) { std::cerr << "magcal: " << msg << "\n"; }

struct SimulateArgs
{
  std::string out;
  std::string config;
  std::uint64_t seed = 1;
  double rate_hz = 80.0;
  int rate_ratio = 1;
  double duration_s = 300.0;
  int num_axes = 6;
  double angular_rate_dps = 7.0;
  double lead_s = 2.0;
  bool noiseless = false;
};

int run_simulate(const SimulateArgs& a)
{
  const magcal::RunConfig run = load_run_config(a.config);
  magcal::sim::SimConfig cfg;
  cfg.seed = a.seed;
  cfg.rate_hz = a.rate_hz;
  cfg.rate_ratio = a.rate_ratio;
  cfg.duration_s = a.duration_s;
  cfg.num_axes = a.num_axes;
  cfg.angular_rate_dps = a.angular_rate_dps;
  cfg.stationary_lead_s = a.lead_s;
  cfg.noiseless = a.noiseless;
  cfg.gravity = run.init.gravity;
  cfg.noise = run.noise;
  cfg.validate();

  const magcal::sim::Simulation s = magcal::sim::simulate(cfg);
  const fs::path csv = fs::path(a.out) / "data.csv";
  const Json extra = {{"seed", cfg.seed},
                      {"duration_s", cfg.duration_s},
                      {"num_axes", cfg.num_axes},
                      {"angular_rate_dps", cfg.angular_rate_dps},
                      {"stationary_lead_s", cfg.stationary_lead_s},
                      {"noiseless", cfg.noiseless},
                      {"noise_density", {{"accel", cfg.noise.accel}, {"gyro", cfg.noise.gyro}, {"mag", cfg.noise.mag}}}};
  const magcal::io::DatasetMeta meta = magcal::io::write_dataset(s.data, csv, s.truth.params, extra);
  log("wrote " + std::to_string(s.data.size()) + " samples to " + csv.string());
  std::cout << Json{{"dataset", csv.string()}, {"meta", magcal::io::meta_path(csv).string()}, {"digest", meta.digest}}.dump()
            << "\n";
  return 0;
}

struct CalibrateArgs
{
  std::string dataset;
  std::string config;
  std::string method = "joint_map";
  std::string out;
  int downsample = 1;
  std::vector<std::string> freeze;
  std::optional<int> max_iter;
  std::optional<double> step_tol;
};

int run_calibrate(const CalibrateArgs& a)
{
  magcal::RunConfig run = load_run_config(a.config);
  for (const auto& name : a.freeze)
    run.solver.frozen.push_back(magcal::parse_param_block(name));
  if (a.max_iter)
  {
    run.solver.max_iter = *a.max_iter;
    run.kok.max_iter = *a.max_iter;
  }
  if (a.step_tol)
  {
    run.solver.step_tol = *a.step_tol;
    run.kok.step_tol = *a.step_tol;
  }
  const magcal::Method method = magcal::parse_method(a.method);

  const std::string text = magcal::io::read_file(a.dataset);
  magcal::Dataset data = magcal::io::read_dataset(a.dataset);
  // Decimation keeps the per-sample noise of the native aiding rate.
  const magcal::NoiseConfig noise = run.noise.at_rate(data.rate_hz(), data.rate_ratio);
  if (a.downsample > 1)
    data = magcal::downsample(data, a.downsample);
  log("calibrating " + std::to_string(data.size()) + " samples, rate ratio " + std::to_string(data.rate_ratio) +
      ", method " + a.method);

  magcal::io::CalibrationReport report;
  report.method = a.method;
  report.dataset_digest = magcal::io::digest(text);
  report.config = magcal::run_config_to_json(run);
  report.config["downsample"] = a.downsample;

  std::optional<magcal::CalibrationOutcome> result;
  try
  {
    result = magcal::calibrate(data, noise, run, method);
  }
  catch (const magcal::Error& e)
  {
    // Still leave a report behind so batch drivers can see what failed.
    report.termination_reason = std::string("error: ") + e.what();
    magcal::io::write_report(report, a.out);
    throw;
  }
  const magcal::CalibrationOutcome& outcome = *result;
  report.params = outcome.params;
  report.converged = outcome.converged;
  report.termination_reason = outcome.termination;
  report.solve = outcome.stats;
  magcal::io::write_report(report, a.out);
  log("report written to " + a.out + " (" + outcome.termination + ")");
  return outcome.converged ? 0 : static_cast<int>(magcal::ErrorCode::kNonConvergence);
}

struct CompareArgs
{
  std::string config;
  std::optional<int> runs;
  std::string out;
  std::string csv;
};

int run_compare(const CompareArgs& a)
{
  Json j = Json::object();
  if (!a.config.empty())
  {
    try
    {
      j = Json::parse(magcal::io::read_file(a.config));
    }
    catch (const Json::parse_error& e)
    {
      throw magcal::Error(magcal::ErrorCode::kInvalidArgument, "cannot parse " + a.config + ": " + e.what());
    }
  }
  magcal::CompareConfig cfg = magcal::compare_config_from_json(j);
  if (a.runs)
    cfg.num_runs = *a.runs;
  log("comparing " + std::to_string(cfg.methods.size()) + " methods over " + std::to_string(cfg.values.size()) +
      " sweep values x " + std::to_string(cfg.num_runs) + " runs");
  const magcal::ComparisonTable table = magcal::compare(cfg);
  const std::string json = magcal::table_to_json(table).dump(2) + "\n";
  if (a.out.empty())
    std::cout << json;
  else
    magcal::io::write_file(a.out, json);
  if (!a.csv.empty())
    magcal::io::write_file(a.csv, magcal::table_to_csv(table));
  return 0;
}

struct EvaluateArgs
{
  std::vector<std::string> reports;
  std::vector<std::string> truths;
  std::string out;
};

int run_evaluate(const EvaluateArgs& a)
{
  if (a.reports.size() != a.truths.size())
    throw magcal::Error(magcal::ErrorCode::kInvalidArgument, "need one --truth per --report");
  std::vector<magcal::ParamErrors> errors;
  Json runs = Json::array();
  for (std::size_t i = 0; i < a.reports.size(); ++i)
  {
    const auto report = magcal::io::read_report(a.reports[i]);
    const auto truth = magcal::io::read_meta(a.truths[i]);
    errors.push_back(magcal::evaluate(report, truth));
    runs.push_back({{"report", a.reports[i]}, {"errors", magcal::errors_to_json(errors.back())}});
  }
  Json out = {{"runs", runs}};
  if (errors.size() > 1)
    out["rmse"] = magcal::rmse_to_json(magcal::batch_rmse(errors));
  const std::string text = out.dump(2) + "\n";
  if (a.out.empty())
    std::cout << text;
  else
    magcal::io::write_file(a.out, text);
  return 0;
}

} // namespace

int main(int argc, char** argv)
{
  CLI::App app{"Joint magnetometer and IMU calibration"};
  app.require_subcommand(1);

  SimulateArgs sim_args;
  auto* sim = app.add_subcommand("simulate", "Generate a simulated dataset (data.csv + meta.json)");
  sim->add_option("--out", sim_args.out, "Output directory")->required();
  sim->add_option("--config", sim_args.config, "Run config JSON (noise densities, gravity)");
  sim->add_option("--seed", sim_args.seed, "Random seed");
  sim->add_option("--rate-hz", sim_args.rate_hz, "IMU sample rate");
  sim->add_option("--rate-ratio", sim_args.rate_ratio, "IMU-to-magnetometer rate ratio");
  sim->add_option("--duration", sim_args.duration_s, "Motion duration in seconds");
  sim->add_option("--axes", sim_args.num_axes, "Number of rotation segments");
  sim->add_option("--rate-dps", sim_args.angular_rate_dps, "Nominal angular rate in deg/s");
  sim->add_option("--lead", sim_args.lead_s, "Stationary lead-in in seconds");
  sim->add_flag("--noiseless", sim_args.noiseless, "Disable sensor noise");

  CalibrateArgs cal_args;
  auto* cal = app.add_subcommand("calibrate", "Calibrate a dataset and write a JSON report");
  cal->add_option("dataset", cal_args.dataset, "Dataset CSV")->required()->check(CLI::ExistingFile);
  cal->add_option("--config", cal_args.config, "Run config JSON");
  cal->add_option("--method", cal_args.method, "joint_map | wu_ekf | kok_ml");
  cal->add_option("--out", cal_args.out, "Report path")->required();
  cal->add_option("--downsample", cal_args.downsample, "Keep every N-th magnetometer sample")
      ->check(CLI::PositiveNumber);
  cal->add_option("--freeze", cal_args.freeze, "Parameter blocks to hold fixed (o_a,o_w,D_m,o_m,alpha)")
      ->delimiter(',');
  cal->add_option("--max-iter", cal_args.max_iter, "Iteration limit");
  cal->add_option("--step-tol", cal_args.step_tol, "Step-norm termination threshold");

  CompareArgs cmp_args;
  auto* cmp = app.add_subcommand("compare", "Monte Carlo comparison of all methods");
  cmp->add_option("--config", cmp_args.config, "Compare config JSON");
  cmp->add_option("--runs", cmp_args.runs, "Datasets per sweep value");
  cmp->add_option("--out", cmp_args.out, "Table JSON (stdout if omitted)");
  cmp->add_option("--csv", cmp_args.csv, "Plot-ready CSV table");

  EvaluateArgs eval_args;
  auto* ev = app.add_subcommand("evaluate", "Errors of calibration reports against ground truth");
  ev->add_option("--report", eval_args.reports, "Report JSON (repeatable)")->required();
  ev->add_option("--truth", eval_args.truths, "meta.json with ground truth (repeatable)")->required();
  ev->add_option("--out", eval_args.out, "Output JSON (stdout if omitted)");

  try
  {
    app.parse(argc, argv);
  }
  catch (const CLI::ParseError& e)
  {
    return app.exit(e);
  }

  try
  {
    if (*sim)
      return run_simulate(sim_args);
    if (*cal)
      return run_calibrate(cal_args);
    if (*cmp)
      return run_compare(cmp_args);
    if (*ev)
      return run_evaluate(eval_args);
  }
  catch (const magcal::Error& e)
  {
    log(std::string("error: ") + e.what());
    return e.exit_code();
  }
  catch (const std::exception& e)
  {
    log(std::string("error: ") + e.what());
    return 1;
  }
  return 0;
}
