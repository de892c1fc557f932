/*
 *  Copyright (C) 2026 The magcal Authors
 *
 *  SPDX-License-Identifier: Apache-2.0
 *  See the file LICENSE for more information.
 */

#pragma once

#include <stdexcept>
#include <string>

namespace magcal
{

/// Error classes. The numeric values double as CLI exit codes.
enum class ErrorCode : int
{
  kInvalidArgument = 2,
  kDomain = 3,
  kIo = 10,
  kBadHeader = 11,
  kNonMonotoneTime = 12,
  kInconsistentRateRatio = 13,
  kNonFiniteField = 14,
  kMetaMismatch = 15,
  kDigestMismatch = 16,
  kNoStationarySpan = 20,
  kDegenerateEllipsoid = 21,
  kInsufficientExcitation = 22,
  kNonConvergence = 30,
  kNonFinite = 31,
  kSingularSystem = 32,
  kFilterDivergence = 33,
  kComparisonAborted = 40,
};

class Error : public std::runtime_error
{
public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), m_code(code) {}

  ErrorCode code() const noexcept { return m_code; }
  int exit_code() const noexcept { return static_cast<int>(m_code); }

private:
  ErrorCode m_code;
};

} // namespace magcal
