// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

// Central finite differences in double precision, shared by the unit and
// acceptance suites.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "contseg/losses.hpp"

namespace contseg::testing {

inline constexpr double kFdStep = 1e-4;

/// ||a - f|| / max(||a||, ||f||), with 0 when both vanish.
inline double relative_error(std::span<const double> analytic, std::span<const double> numeric) {
  double d = 0, na = 0, nf = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    d += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nf += numeric[i] * numeric[i];
  }
  const double scale = std::sqrt(std::max(na, nf));
  return scale == 0 ? 0 : std::sqrt(d) / scale;
}

/// Numeric gradient of f at x.
inline std::vector<double> numeric_gradient(const std::function<double(std::span<const double>)>& f,
                                            std::vector<double> x, double h = kFdStep) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double fp = f(x);
    x[i] = orig - h;
    const double fm = f(x);
    x[i] = orig;
    g[i] = (fp - fm) / (2 * h);
  }
  return g;
}

/// Random probability field with every entry at least `floor`.
inline losses::Field random_simplex(int channels, Dims3 d, std::mt19937_64& rng, double floor = 0.02) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  losses::Field q(channels, d);
  const std::size_t n = q.voxels();
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (int c = 0; c < channels; ++c) s += (q.data()[c * n + i] = floor + u(rng));
    for (int c = 0; c < channels; ++c) q.data()[c * n + i] /= s;
  }
  return q;
}

inline losses::Field softmax(const losses::Field& z) {
  const std::size_t n = z.voxels();
  losses::Field q(z.channels(), z.dims());
  for (std::size_t i = 0; i < n; ++i) {
    double m = -1e300, s = 0;
    for (int c = 0; c < z.channels(); ++c) m = std::max(m, z.data()[c * n + i]);
    for (int c = 0; c < z.channels(); ++c) s += std::exp(z.data()[c * n + i] - m);
    for (int c = 0; c < z.channels(); ++c) q.data()[c * n + i] = std::exp(z.data()[c * n + i] - m) / s;
  }
  return q;
}

inline losses::Field with_values(const losses::Field& shape, std::span<const double> v) {
  losses::Field f(shape.channels(), shape.dims());
  std::copy(v.begin(), v.end(), f.data());
  return f;
}

inline std::vector<double> values(const losses::Field& f) { return {f.data(), f.data() + f.size()}; }

/// Worst relative gradient error over `instances` random problems for each
/// differentiable loss, keyed by loss name.
struct GradReport {
  double ce_dice = 0, ce_dice_logits = 0, unce = 0, unkd = 0, pod = 0, pod_two_axis = 0, neg_cos = 0;
};

inline GradReport gradient_report(int instances, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  GradReport rep;
  std::uniform_int_distribution<int> ext(1, 3);
  for (int t = 0; t < instances; ++t) {
    const Dims3 d{ext(rng), ext(rng), ext(rng) + 1};
    const std::size_t n = d.voxels();
    const int K1 = 3;
    std::uniform_int_distribution<int> lab(0, K1 - 1);
    std::vector<int> labels(n);
    for (auto& l : labels) l = lab(rng);

    {
      const auto q = random_simplex(K1, d, rng);
      const auto r = losses::ce_dice(q, labels);
      auto f = [&](std::span<const double> v) { return losses::ce_dice(with_values(q, v), labels).value; };
      rep.ce_dice = std::max(rep.ce_dice, relative_error(values(r.grad), numeric_gradient(f, values(q))));
    }
    {
      std::normal_distribution<double> nz(0, 1);
      losses::Field z(K1, d);
      for (auto& v : z.storage()) v = nz(rng);
      const auto q = softmax(z);
      const auto r = losses::ce_dice(q, labels);
      const auto gz = losses::softmax_backward(q, r.grad);
      auto f = [&](std::span<const double> v) { return losses::ce_dice(softmax(with_values(z, v)), labels).value; };
      rep.ce_dice_logits = std::max(rep.ce_dice_logits, relative_error(values(gz), numeric_gradient(f, values(z))));
    }
    {
      // channels: b, old1, shared, new1 ; old = {b, old1, shared}, current = {shared, new1}
      losses::ClassContext ctx{0, {0, 1, 2}, {2, 3}, {0, 1, 2, 3}, false};
      const auto q = random_simplex(4, d, rng);
      std::vector<int> lab_ids(n);
      std::uniform_int_distribution<int> pick(0, 2);
      for (auto& l : lab_ids) l = std::array<int, 3>{0, 2, 3}[pick(rng)];
      const auto r = losses::unce(q, lab_ids, ctx);
      auto f = [&](std::span<const double> v) { return losses::unce(with_values(q, v), lab_ids, ctx).value; };
      rep.unce = std::max(rep.unce, relative_error(values(r.grad), numeric_gradient(f, values(q))));

      const auto q_old = random_simplex(3, d, rng);
      const std::vector<int> old_map{0, 1, 2};
      const auto k = losses::unkd(q, q_old, old_map, ctx);
      auto fk = [&](std::span<const double> v) { return losses::unkd(with_values(q, v), q_old, old_map, ctx).value; };
      rep.unkd = std::max(rep.unkd, relative_error(values(k.grad), numeric_gradient(fk, values(q))));
    }
    for (const auto mode : {losses::PodPooling::single_axis, losses::PodPooling::two_axis}) {
      std::normal_distribution<double> nz(0, 1);
      std::vector<losses::Field> a, b;
      for (int s = 0; s < 2; ++s) {
        const Dims3 ds{std::max(1, d.d >> s), std::max(1, d.h >> s), std::max(1, d.w >> s)};
        losses::Field fa(2, ds), fb(2, ds);
        for (auto& v : fa.storage()) v = nz(rng);
        for (auto& v : fb.storage()) v = nz(rng);
        a.push_back(std::move(fa));
        b.push_back(std::move(fb));
      }
      const auto r = losses::pod3d_loss(a, b, 0.5, mode);
      for (std::size_t s = 0; s < a.size(); ++s) {
        auto f = [&](std::span<const double> v) {
          auto aa = a;
          aa[s] = with_values(a[s], v);
          return losses::pod3d_loss(aa, b, 0.5, mode).value;
        };
        const double e = relative_error(values(r.grad[s]), numeric_gradient(f, values(a[s])));
        double& slot = mode == losses::PodPooling::single_axis ? rep.pod : rep.pod_two_axis;
        slot = std::max(slot, e);
      }
    }
    {
      std::normal_distribution<double> nz(0, 1);
      std::vector<double> p(8), z(8);
      for (auto& v : p) v = nz(rng);
      for (auto& v : z) v = nz(rng);
      const auto r = losses::neg_cos(p, z);
      auto f = [&](std::span<const double> v) { return losses::neg_cos(v, z).value; };
      rep.neg_cos = std::max(rep.neg_cos, relative_error(r.grad, numeric_gradient(f, p)));
    }
  }
  return rep;
}

}  // namespace contseg::testing
