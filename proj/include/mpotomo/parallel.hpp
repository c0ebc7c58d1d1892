// Copyright 2026 The mpo-tomo Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cstdint>
#include <exception>
#include <thread>
#include <vector>

namespace mpotomo {

/// Run fn(i) for i in [0, n) on up to `threads` workers. Work is split into
/// contiguous blocks so results never depend on scheduling. The first
/// exception thrown by a worker is rethrown on the caller.
template <class Fn>
void parallel_for(std::int64_t n, int threads, Fn &&fn) {
  if (n <= 0) return;
  const int t = static_cast<int>(std::clamp<std::int64_t>(threads, 1, n));
  if (t == 1) {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(t);
  for (int w = 0; w < t; ++w) {
    pool.emplace_back([&, w] {
      const std::int64_t lo = n * w / t, hi = n * (w + 1) / t;
      try {
        for (std::int64_t i = lo; i < hi; ++i) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto &th : pool) th.join();
  for (auto &e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace mpotomo
