/*
 *  Copyright (C) 2026 The magcal Authors
 *
 *  SPDX-License-Identifier: Apache-2.0
 *  See the file LICENSE for more information.
 */

#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "magcal/error.hpp"
#include "magcal/models.hpp"

namespace magcal::io
{

using Json = nlohmann::json;

inline constexpr const char* kVersion = "0.1.0";
inline constexpr const char* kCsvHeader = "t,gx,gy,gz,ax,ay,az,mx,my,mz";
inline constexpr double kTimeTolerance = 1e-6; // s

inline std::string read_file(const std::filesystem::path& path)
{
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw Error(ErrorCode::kIo, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::string_view content)
{
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out)
    throw Error(ErrorCode::kIo, "write failed for " + path.string());
}

/// 64-bit FNV-1a of the bytes, as 16 lowercase hex digits.
inline std::string digest(std::string_view bytes)
{
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes)
  {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Parameters

inline Json vec_to_json(const Vec3& v) { return Json::array({v.x(), v.y(), v.z()}); }

inline Vec3 vec_from_json(const Json& j, const char* key)
{
  if (!j.is_array() || j.size() != 3)
    throw Error(ErrorCode::kInvalidArgument, std::string("expected a 3-vector for ") + key);
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

inline Json params_to_json(const CalibrationParams& p)
{
  Json d = Json::array();
  for (int i = 0; i < 3; ++i)
  {
    for (int j = 0; j < 3; ++j)
      d.push_back(p.mag_distortion(i, j));
  }
  return {{"accel_bias", vec_to_json(p.accel_bias)},
          {"gyro_bias", vec_to_json(p.gyro_bias)},
          {"mag_distortion", {{"layout", "row-major"}, {"values", d}}},
          {"mag_bias", vec_to_json(p.mag_bias)},
          {"dip_angle_rad", p.dip_angle}};
}

inline CalibrationParams params_from_json(const Json& j)
{
  try
  {
    CalibrationParams p;
    p.accel_bias = vec_from_json(j.at("accel_bias"), "accel_bias");
    p.gyro_bias = vec_from_json(j.at("gyro_bias"), "gyro_bias");
    const Json& d = j.at("mag_distortion");
    if (d.at("layout").get<std::string>() != "row-major")
      throw Error(ErrorCode::kInvalidArgument, "mag_distortion layout must be row-major");
    const Json& values = d.at("values");
    if (!values.is_array() || values.size() != 9)
      throw Error(ErrorCode::kInvalidArgument, "mag_distortion needs 9 values");
    for (int i = 0; i < 3; ++i)
    {
      for (int c = 0; c < 3; ++c)
        p.mag_distortion(i, c) = values[static_cast<std::size_t>(3 * i + c)].get<double>();
    }
    p.mag_bias = vec_from_json(j.at("mag_bias"), "mag_bias");
    p.dip_angle = j.at("dip_angle_rad").get<double>();
    return p;
  }
  catch (const Json::exception& e)
  {
    throw Error(ErrorCode::kInvalidArgument, std::string("malformed parameter record: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Dataset CSV and sidecar

struct DatasetMeta
{
  double rate_hz = 0.0;
  double dt = 0.0;
  int rate_ratio = 1;
  std::size_t samples = 0;
  std::string digest;
  std::optional<CalibrationParams> truth;
  Json extra = Json::object(); // e.g. simulation settings

  bool operator==(const DatasetMeta&) const = default;
};

inline Json meta_to_json(const DatasetMeta& m)
{
  Json j = {{"rate_hz", m.rate_hz},   {"dt", m.dt},         {"rate_ratio", m.rate_ratio},
            {"samples", m.samples},   {"digest", m.digest}, {"extra", m.extra}};
  if (m.truth)
    j["truth"] = params_to_json(*m.truth);
  return j;
}

inline DatasetMeta meta_from_json(const Json& j)
{
  try
  {
    DatasetMeta m;
    m.rate_hz = j.at("rate_hz").get<double>();
    m.dt = j.contains("dt") ? j.at("dt").get<double>() : 1.0 / m.rate_hz;
    m.rate_ratio = j.at("rate_ratio").get<int>();
    m.samples = j.value("samples", std::size_t{0});
    m.digest = j.value("digest", std::string());
    if (j.contains("truth"))
      m.truth = params_from_json(j.at("truth"));
    m.extra = j.value("extra", Json::object());
    return m;
  }
  catch (const Json::exception& e)
  {
    throw Error(ErrorCode::kMetaMismatch, std::string("malformed meta.json: ") + e.what());
  }
}

/// The sidecar lives next to the CSV as meta.json.
inline std::filesystem::path meta_path(const std::filesystem::path& csv)
{
  return csv.parent_path() / "meta.json";
}

inline DatasetMeta read_meta(const std::filesystem::path& path)
{
  Json j;
  try
  {
    j = Json::parse(read_file(path));
  }
  catch (const Json::parse_error& e)
  {
    throw Error(ErrorCode::kMetaMismatch, "cannot parse " + path.string() + ": " + e.what());
  }
  return meta_from_json(j);
}

inline std::string format_double(double v)
{
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

/// CSV text for a dataset; missing samples are empty fields.
inline std::string dataset_to_csv(const Dataset& data)
{
  std::string out = kCsvHeader;
  out += '\n';
  auto append3 = [&out](const std::optional<Vec3>& v) {
    for (int i = 0; i < 3; ++i)
    {
      out += ',';
      if (v)
        out += format_double((*v)(i));
    }
  };
  for (std::size_t k = 0; k < data.size(); ++k)
  {
    out += format_double(data.time(k));
    append3(data.gyro[k]);
    append3(data.accel[k]);
    append3(data.mag[k]);
    out += '\n';
  }
  return out;
}

namespace detail
{

inline std::vector<std::string_view> split(std::string_view line, char sep)
{
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true)
  {
    const std::size_t pos = line.find(sep, start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos)
      break;
    start = pos + 1;
  }
  return out;
}

inline double parse_double(std::string_view field, std::size_t line)
{
  const std::string s(field);
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size())
    throw Error(ErrorCode::kIo, "malformed number '" + s + "' on line " + std::to_string(line));
  if (!std::isfinite(v))
    throw Error(ErrorCode::kNonFiniteField, "non-finite value on line " + std::to_string(line));
  return v;
}

inline std::optional<Vec3> parse_triple(const std::vector<std::string_view>& f, std::size_t first,
                                        std::size_t line)
{
  const bool empty0 = f[first].empty();
  if (empty0 && f[first + 1].empty() && f[first + 2].empty())
    return std::nullopt;
  return Vec3(parse_double(f[first], line), parse_double(f[first + 1], line), parse_double(f[first + 2], line));
}

} // namespace detail

/// Parses CSV text. dt is the mean sample interval and the rate ratio is the
/// spacing of the magnetometer rows.
inline Dataset dataset_from_csv(std::string_view text)
{
  std::vector<std::string_view> lines = detail::split(text, '\n');
  while (!lines.empty() && lines.back().empty())
    lines.pop_back();
  for (auto& l : lines)
  {
    if (!l.empty() && l.back() == '\r')
      l.remove_suffix(1);
  }
  if (lines.empty() || lines.front() != kCsvHeader)
    throw Error(ErrorCode::kBadHeader, std::string("expected header '") + kCsvHeader + "'");

  Dataset data;
  std::vector<double> times;
  for (std::size_t i = 1; i < lines.size(); ++i)
  {
    const auto f = detail::split(lines[i], ',');
    if (f.size() != 10)
      throw Error(ErrorCode::kIo, "expected 10 fields on line " + std::to_string(i + 1));
    times.push_back(detail::parse_double(f[0], i + 1));
    const auto gyro = detail::parse_triple(f, 1, i + 1);
    if (!gyro)
      throw Error(ErrorCode::kIo, "missing gyro sample on line " + std::to_string(i + 1));
    data.gyro.push_back(*gyro);
    data.accel.push_back(detail::parse_triple(f, 4, i + 1));
    data.mag.push_back(detail::parse_triple(f, 7, i + 1));
  }
  if (times.size() < 2)
    throw Error(ErrorCode::kInvalidArgument, "dataset needs at least two samples");

  for (std::size_t k = 1; k < times.size(); ++k)
  {
    if (!(times[k] > times[k - 1]))
      throw Error(ErrorCode::kNonMonotoneTime, "time stamps not increasing at row " + std::to_string(k));
  }
  data.start_time = times.front();
  data.dt = (times.back() - times.front()) / static_cast<double>(times.size() - 1);
  for (std::size_t k = 0; k < times.size(); ++k)
  {
    if (std::abs(times[k] - data.time(k)) > kTimeTolerance)
      throw Error(ErrorCode::kNonMonotoneTime, "time stamps not uniform at row " + std::to_string(k));
  }

  if (!data.mag.front())
    throw Error(ErrorCode::kInconsistentRateRatio, "first row must carry a magnetometer sample");
  std::size_t second = 0;
  for (std::size_t k = 1; k < data.mag.size() && second == 0; ++k)
  {
    if (data.mag[k])
      second = k;
  }
  data.rate_ratio = second == 0 ? static_cast<int>(data.size()) : static_cast<int>(second);
  data.validate();
  return data;
}

/// Reads a dataset CSV and, when present, cross-checks it against meta.json
/// (rate, ratio, sample count, digest). The sidecar dt is used when it agrees.
inline Dataset read_dataset(const std::filesystem::path& csv)
{
  const std::string text = read_file(csv);
  Dataset data = dataset_from_csv(text);
  const auto mp = meta_path(csv);
  if (std::filesystem::exists(mp))
  {
    const DatasetMeta meta = read_meta(mp);
    if (meta.rate_ratio != data.rate_ratio)
      throw Error(ErrorCode::kMetaMismatch, "rate ratio differs from meta.json");
    if (std::abs(meta.dt - data.dt) * static_cast<double>(data.size()) > kTimeTolerance ||
        std::abs(meta.rate_hz * meta.dt - 1.0) > 1e-9)
      throw Error(ErrorCode::kMetaMismatch, "sample rate differs from meta.json");
    if (meta.samples != 0 && meta.samples != data.size())
      throw Error(ErrorCode::kMetaMismatch, "sample count differs from meta.json");
    if (!meta.digest.empty() && meta.digest != digest(text))
      throw Error(ErrorCode::kDigestMismatch, "dataset digest differs from meta.json");
    data.dt = meta.dt;
  }
  return data;
}

/// Writes the CSV and its meta.json; returns the sidecar that was written.
inline DatasetMeta write_dataset(const Dataset& data, const std::filesystem::path& csv,
                                 std::optional<CalibrationParams> truth = std::nullopt,
                                 const Json& extra = Json::object())
{
  data.validate();
  const std::string text = dataset_to_csv(data);
  write_file(csv, text);
  DatasetMeta meta;
  meta.rate_hz = data.rate_hz();
  meta.dt = data.dt;
  meta.rate_ratio = data.rate_ratio;
  meta.samples = data.size();
  meta.digest = digest(text);
  meta.truth = std::move(truth);
  meta.extra = extra;
  write_file(meta_path(csv), meta_to_json(meta).dump(2) + "\n");
  return meta;
}

// ---------------------------------------------------------------------------
// Calibration report

struct CalibrationReport
{
  CalibrationParams params;
  std::string method;
  bool converged = false;
  std::string termination_reason;
  Json solve = Json::object();  // estimator statistics
  Json config = Json::object(); // config echo
  std::string version = kVersion;
  std::string dataset_digest;

  bool operator==(const CalibrationReport&) const = default;
};

inline Json report_to_json(const CalibrationReport& r)
{
  return {{"params", params_to_json(r.params)},
          {"method", r.method},
          {"converged", r.converged},
          {"termination_reason", r.termination_reason},
          {"solve", r.solve},
          {"config", r.config},
          {"version", r.version},
          {"dataset_digest", r.dataset_digest}};
}

inline CalibrationReport report_from_json(const Json& j)
{
  try
  {
    CalibrationReport r;
    r.params = params_from_json(j.at("params"));
    r.method = j.at("method").get<std::string>();
    r.converged = j.at("converged").get<bool>();
    r.termination_reason = j.at("termination_reason").get<std::string>();
    r.solve = j.value("solve", Json::object());
    r.config = j.value("config", Json::object());
    r.version = j.value("version", std::string());
    r.dataset_digest = j.value("dataset_digest", std::string());
    return r;
  }
  catch (const Json::exception& e)
  {
    throw Error(ErrorCode::kInvalidArgument, std::string("malformed report: ") + e.what());
  }
}

inline void write_report(const CalibrationReport& r, const std::filesystem::path& path)
{
  write_file(path, report_to_json(r).dump(2) + "\n");
}

inline CalibrationReport read_report(const std::filesystem::path& path)
{
  try
  {
    return report_from_json(Json::parse(read_file(path)));
  }
  catch (const Json::parse_error& e)
  {
    throw Error(ErrorCode::kInvalidArgument, "cannot parse " + path.string() + ": " + e.what());
  }
}

} // namespace magcal::io
