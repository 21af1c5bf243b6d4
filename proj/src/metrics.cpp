// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

#include "contseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "contseg/error.hpp"

namespace contseg {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_same(const Mask& a, const Mask& b) {
  if (!(a.dims == b.dims)) throw ShapeError("mask extents differ");
}

// Lower envelope of parabolas along one line: f[q] + (s (p - q))^2.
void edt_1d(const double* f, double* out, int n, double s, std::vector<int>& v, std::vector<double>& z) {
  v.assign(n, 0);
  z.assign(n + 1, 0);
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    const double pq = s * q;
    while (k >= 0) {
      const double pv = s * v[k];
      const double x = ((f[q] + pq * pq) - (f[v[k]] + pv * pv)) / (2 * (pq - pv));
      if (x <= z[k]) {
        --k;
      } else {
        break;
      }
    }
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
    } else {
      const double pv = s * v[k];
      const double x = ((f[q] + pq * pq) - (f[v[k]] + pv * pv)) / (2 * (pq - pv));
      ++k;
      v[k] = q;
      z[k] = x;
      z[k + 1] = kInf;
    }
  }
  if (k < 0) {
    std::fill(out, out + n, kInf);
    return;
  }
  int j = 0;
  for (int p = 0; p < n; ++p) {
    const double pp = s * p;
    while (z[j + 1] < pp) ++j;
    const double d = pp - s * v[j];
    out[p] = d * d + f[v[j]];
  }
}

double directed_mean(const Mask& from_surface, const std::vector<double>& dist_sq) {
  double sum = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < from_surface.data.size(); ++i)
    if (from_surface.data[i]) {
      sum += std::sqrt(dist_sq[i]);
      ++n;
    }
  return sum / static_cast<double>(n);
}

bool any(const Mask& m) {
  return std::any_of(m.data.begin(), m.data.end(), [](std::uint8_t v) { return v != 0; });
}

}  // namespace

Mask binarize(const LabelMap& labels, int class_id) {
  Mask m(labels.dims);
  for (std::size_t i = 0; i < labels.data.size(); ++i) m.data[i] = labels.data[i] == class_id;
  return m;
}

double dsc(const Mask& a, const Mask& b) {
  check_same(a, b);
  std::size_t na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const bool x = a.data[i] != 0, y = b.data[i] != 0;
    na += x;
    nb += y;
    both += x && y;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

Mask surface(const Mask& m) {
  const Dims3 d = m.dims;
  Mask s(d);
  auto fg = [&](int z, int y, int x) {
    if (z < 0 || y < 0 || x < 0 || z >= d.d || y >= d.h || x >= d.w) return false;
    return m.at(z, y, x) != 0;
  };
  for (int z = 0; z < d.d; ++z)
    for (int y = 0; y < d.h; ++y)
      for (int x = 0; x < d.w; ++x) {
        if (!m.at(z, y, x)) continue;
        s.at(z, y, x) = !(fg(z - 1, y, x) && fg(z + 1, y, x) && fg(z, y - 1, x) && fg(z, y + 1, x) &&
                          fg(z, y, x - 1) && fg(z, y, x + 1));
      }
  return s;
}

std::vector<double> squared_distance_transform(const Mask& m, const Spacing& spacing) {
  const Dims3 d = m.dims;
  std::vector<double> f(m.data.size());
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = m.data[i] ? 0.0 : kInf;
  std::vector<int> v;
  std::vector<double> z;
  const int longest = std::max({d.d, d.h, d.w});
  std::vector<double> line(longest), out(longest);
  // x axis
  for (int a = 0; a < d.d; ++a)
    for (int b = 0; b < d.h; ++b) {
      double* row = f.data() + (static_cast<std::size_t>(a) * d.h + b) * d.w;
      edt_1d(row, out.data(), d.w, spacing[2], v, z);
      std::copy(out.begin(), out.begin() + d.w, row);
    }
  // y axis
  for (int a = 0; a < d.d; ++a)
    for (int c = 0; c < d.w; ++c) {
      for (int b = 0; b < d.h; ++b) line[b] = f[(static_cast<std::size_t>(a) * d.h + b) * d.w + c];
      edt_1d(line.data(), out.data(), d.h, spacing[1], v, z);
      for (int b = 0; b < d.h; ++b) f[(static_cast<std::size_t>(a) * d.h + b) * d.w + c] = out[b];
    }
  // axial
  for (int b = 0; b < d.h; ++b)
    for (int c = 0; c < d.w; ++c) {
      for (int a = 0; a < d.d; ++a) line[a] = f[(static_cast<std::size_t>(a) * d.h + b) * d.w + c];
      edt_1d(line.data(), out.data(), d.d, spacing[0], v, z);
      for (int a = 0; a < d.d; ++a) f[(static_cast<std::size_t>(a) * d.h + b) * d.w + c] = out[a];
    }
  return f;
}

std::optional<double> asd(const Mask& a, const Mask& b, const Spacing& spacing) {
  check_same(a, b);
  if (!any(a) || !any(b)) return std::nullopt;
  const Mask sa = surface(a), sb = surface(b);
  const auto da = squared_distance_transform(sa, spacing);
  const auto db = squared_distance_transform(sb, spacing);
  return 0.5 * (directed_mean(sa, db) + directed_mean(sb, da));
}

std::optional<double> asd_brute_force(const Mask& a, const Mask& b, const Spacing& spacing) {
  check_same(a, b);
  if (!any(a) || !any(b)) return std::nullopt;
  struct P {
    double z, y, x;
  };
  auto points = [&](const Mask& m) {
    std::vector<P> p;
    const Mask s = surface(m);
    for (int z = 0; z < s.dims.d; ++z)
      for (int y = 0; y < s.dims.h; ++y)
        for (int x = 0; x < s.dims.w; ++x)
          if (s.at(z, y, x)) p.push_back({z * spacing[0], y * spacing[1], x * spacing[2]});
    return p;
  };
  const auto pa = points(a), pb = points(b);
  auto directed = [](const std::vector<P>& from, const std::vector<P>& to) {
    double sum = 0;
    for (const P& p : from) {
      double best = kInf;
      for (const P& q : to) {
        const double dz = p.z - q.z, dy = p.y - q.y, dx = p.x - q.x;
        best = std::min(best, dz * dz + dy * dy + dx * dx);
      }
      sum += std::sqrt(best);
    }
    return sum / static_cast<double>(from.size());
  };
  return 0.5 * (directed(pa, pb) + directed(pb, pa));
}

double percentile(std::vector<double> v, double p) {
  if (v.empty()) throw InvalidArgument("percentile of an empty sample");
  if (p < 0 || p > 100) throw InvalidArgument("percentile outside [0, 100]");
  std::sort(v.begin(), v.end());
  const double pos = p / 100.0 * static_cast<double>(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

double percentile_mean(const std::vector<double>& v) {
  if (v.empty()) throw InvalidArgument("percentile_mean of an empty sample");
  const double lo = percentile(v, 5), hi = percentile(v, 95);
  double sum = 0;
  std::size_t n = 0;
  for (double x : v)
    if (x >= lo && x <= hi) {
      sum += x;
      ++n;
    }
  // Two distinct cases put both outside the interpolated band.
  if (n == 0) return mean(v);
  return sum / static_cast<double>(n);
}

double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) throw InvalidArgument("sample standard deviation needs at least 2 values");
  const double m = mean(v);
  double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

double mean(const std::vector<double>& v) {
  if (v.empty()) throw InvalidArgument("mean of an empty sample");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double ClassScore::mean_dsc() const {
  std::vector<double> v;
  for (const auto& c : cases) v.push_back(c.dsc);
  return mean(v);
}

std::optional<double> ClassScore::mean_asd() const {
  std::vector<double> v;
  for (const auto& c : cases)
    if (c.asd) v.push_back(*c.asd);
  if (v.empty()) return std::nullopt;
  return mean(v);
}

std::optional<double> StepSnapshot::dataset_dsc(const std::string& id) const {
  std::vector<double> v;
  for (const auto& s : scores)
    if (s.dataset_id == id) v.push_back(s.mean_dsc());
  if (v.empty()) return std::nullopt;
  return mean(v);
}

std::vector<CurvePoint> forgetting_curve(const std::vector<StepSnapshot>& snapshots, const std::string& dataset_id) {
  std::vector<CurvePoint> out;
  for (const auto& s : snapshots)
    if (auto d = s.dataset_dsc(dataset_id)) out.push_back({s.step, *d});
  if (out.empty()) throw InvalidArgument("dataset " + dataset_id + " was never introduced");
  return out;
}

double mean_class_dsc(const std::vector<ClassScore>& scores) {
  std::vector<double> v;
  for (const auto& s : scores) v.push_back(s.mean_dsc());
  return mean(v);
}

std::optional<double> mean_class_asd(const std::vector<ClassScore>& scores) {
  std::vector<double> v;
  for (const auto& s : scores)
    if (auto a = s.mean_asd()) v.push_back(*a);
  if (v.empty()) return std::nullopt;
  return mean(v);
}

}  // namespace contseg
