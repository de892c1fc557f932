/*
 *  Copyright (C) 2026 The magcal Authors
 *
 *  SPDX-License-Identifier: Apache-2.0
 *  See the file LICENSE for more information.
 */

#pragma once

#include "magcal/arrow_system.hpp"
#include "magcal/baselines.hpp"
#include "magcal/error.hpp"
#include "magcal/init.hpp"
#include "magcal/io.hpp"
#include "magcal/models.hpp"
#include "magcal/parallel.hpp"
#include "magcal/pipeline.hpp"
#include "magcal/preintegration.hpp"
#include "magcal/residuals.hpp"
#include "magcal/sim.hpp"
#include "magcal/so3.hpp"
#include "magcal/solver.hpp"
