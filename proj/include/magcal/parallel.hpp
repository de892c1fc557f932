/*
 *  Copyright (C) 2026 The magcal Authors
 *
 *  SPDX-License-Identifier: Apache-2.0
 *  See the file LICENSE for more information.
 */

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace magcal
{

/// Worker count: MAGCAL_THREADS if set to a positive integer, else the
/// hardware concurrency (at least 1).
inline unsigned default_thread_count()
{
  if (const char* env = std::getenv("MAGCAL_THREADS"))
  {
    try
    {
      const long n = std::stol(env);
      if (n > 0)
        return static_cast<unsigned>(n);
    }
    catch (const std::exception&)
    {
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Calls body(i) for i in [0, count) on up to `threads` workers. Items are
/// handed out round-robin by index, so which worker runs an item never
/// affects its result. The first exception thrown by any item is rethrown.
template <typename Body>
void parallel_for(std::size_t count, unsigned threads, Body&& body)
{
  const std::size_t workers = std::min<std::size_t>(std::max(1u, threads), count);
  if (workers <= 1)
  {
    for (std::size_t i = 0; i < count; ++i)
      body(i);
    return;
  }
  std::vector<std::exception_ptr> errors(count);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w)
  {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < count; i += workers)
      {
        try
        {
          body(i);
        }
        catch (...)
        {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool)
    t.join();
  for (const auto& e : errors)
  {
    if (e)
      std::rethrow_exception(e);
  }
}

} // namespace magcal
