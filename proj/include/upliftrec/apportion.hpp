// Copyright 2026 The UpliftRec Authors
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
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "upliftrec/common.hpp"

namespace upliftrec {

// Largest-remainder (Hamilton) apportionment: integer parts that sum to
// `total`, each within one of its real quota. Leftover units go to the
// largest fractional parts; ties go to the lower index. Quotas within 1e-9
// of an integer are snapped to it.
inline std::vector<int> apportion_largest_remainder(std::span<const double> quotas,
                                                    int total) {
  constexpr double kSnap = 1e-9;
  if (total < 0) throw DomainError("apportion: negative total");
  if (quotas.empty() && total > 0) throw DomainError("apportion: no parts to fill");
  std::vector<int> parts(quotas.size());
  std::vector<double> remainder(quotas.size());
  long assigned = 0;
  for (std::size_t i = 0; i < quotas.size(); ++i) {
    const double q = quotas[i];
    if (!(q >= -kSnap) || !std::isfinite(q)) {
      throw DomainError("apportion: quota must be finite and non-negative");
    }
    const double whole = std::floor(q + kSnap);
    parts[i] = static_cast<int>(whole);
    remainder[i] = std::max(0.0, q - whole);
    assigned += parts[i];
  }
  std::vector<std::size_t> order(quotas.size());
  std::iota(order.begin(), order.end(), 0);
  if (assigned < total) {
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return remainder[a] > remainder[b];
    });
    for (std::size_t k = 0; assigned < total; ++k, ++assigned) {
      ++parts[order[k % order.size()]];
    }
  } else if (assigned > total) {
    // Only reachable when quotas sum above `total`; trim the smallest remainders.
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return remainder[a] < remainder[b];
    });
    for (std::size_t k = 0; assigned > total; ++k) {
      auto& p = parts[order[k % order.size()]];
      if (p > 0) {
        --p;
        --assigned;
      }
    }
  }
  return parts;
}

}  // namespace upliftrec
