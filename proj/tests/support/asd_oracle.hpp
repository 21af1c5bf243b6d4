// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

// Independent all-pairs surface distance: boundary test and distances written
// out from scratch, shared by the unit and acceptance suites.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "contseg/metrics.hpp"

namespace contseg::testing {

inline std::optional<double> oracle_asd(const Mask& a, const Mask& b, const Spacing& sp) {
  auto pts = [&](const Mask& m) {
    std::vector<std::array<double, 3>> out;
    const Dims3 d = m.dims;
    for (int z = 0; z < d.d; ++z)
      for (int y = 0; y < d.h; ++y)
        for (int x = 0; x < d.w; ++x) {
          if (!m.data[m.index(z, y, x)]) continue;
          const int nb[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};
          bool edge = false;
          for (const auto& o : nb) {
            const int zz = z + o[0], yy = y + o[1], xx = x + o[2];
            if (zz < 0 || yy < 0 || xx < 0 || zz >= d.d || yy >= d.h || xx >= d.w || !m.data[m.index(zz, yy, xx)])
              edge = true;
          }
          if (edge) out.push_back({z * sp[0], y * sp[1], x * sp[2]});
        }
    return out;
  };
  const auto pa = pts(a), pb = pts(b);
  if (pa.empty() || pb.empty()) return std::nullopt;
  auto dir = [](const auto& from, const auto& to) {
    double s = 0;
    for (const auto& p : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : to) best = std::min(best, std::hypot(p[0] - q[0], p[1] - q[1], p[2] - q[2]));
      s += best;
    }
    return s / from.size();
  };
  return (dir(pa, pb) + dir(pb, pa)) / 2;
}

}  // namespace contseg::testing
