// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <limits>
#include <random>

#include "contseg/error.hpp"
#include "contseg/metrics.hpp"
#include "doctest.h"
#include "support/asd_oracle.hpp"

using namespace contseg;
using testing::oracle_asd;

namespace {

Mask cube(Dims3 d, int z0, int y0, int x0, int n) {
  Mask m(d);
  for (int z = z0; z < z0 + n; ++z)
    for (int y = y0; y < y0 + n; ++y)
      for (int x = x0; x < x0 + n; ++x) m.at(z, y, x) = 1;
  return m;
}

}  // namespace

TEST_CASE("dsc examples and conventions") {
  const Dims3 d{1, 1, 6};
  Mask a(d), b(d), e(d);
  for (int i : {0, 1, 2, 3}) a.data[i] = 1;
  for (int i : {2, 3, 4, 5}) b.data[i] = 1;
  CHECK(dsc(a, a) == 1.0);
  CHECK(dsc(a, b) == 0.5);
  Mask c(d);
  c.data[5] = 1;
  Mask f(d);
  f.data[0] = 1;
  CHECK(dsc(c, f) == 0.0);
  CHECK(dsc(e, e) == 1.0);
  CHECK(dsc(e, a) == 0.0);
  CHECK_THROWS_AS(dsc(a, Mask({1, 2, 3})), ShapeError);
}

TEST_CASE("dsc is symmetric and bounded") {
  std::mt19937_64 rng(11);
  std::bernoulli_distribution coin(0.4);
  for (int t = 0; t < 500; ++t) {
    const Dims3 d{1 + static_cast<int>(rng() % 5), 1 + static_cast<int>(rng() % 5), 1 + static_cast<int>(rng() % 5)};
    Mask a(d), b(d);
    for (auto& v : a.data) v = coin(rng);
    for (auto& v : b.data) v = coin(rng);
    const double ab = dsc(a, b);
    CHECK(ab == dsc(b, a));
    CHECK(ab >= 0.0);
    CHECK(ab <= 1.0);
  }
}

TEST_CASE("asd basics") {
  const Dims3 d{6, 6, 6};
  const Mask a = cube(d, 1, 1, 1, 3);
  CHECK(*asd(a, a, {1, 1, 1}) == 0.0);
  CHECK_FALSE(asd(a, Mask(d), {1, 1, 1}).has_value());
  CHECK_FALSE(asd(Mask(d), Mask(d), {1, 1, 1}).has_value());

  // Unit cubes two voxels apart: the directed distance is 2 in both directions.
  const Mask p = cube(d, 0, 0, 0, 1), q = cube(d, 0, 0, 2, 1);
  CHECK(std::abs(*asd(p, q, {1, 1, 1}) - 2.0) < 1e-12);
  CHECK(std::abs(*asd(p, q, {1, 1, 1}) - *oracle_asd(p, q, {1, 1, 1})) < 1e-12);

  // An axial offset scales with the axial spacing.
  const Mask r = cube(d, 2, 0, 0, 1);
  CHECK(std::abs(*asd(p, r, {1.5, 1, 1}) - 3.0) < 1e-12);
  CHECK(std::abs(*asd(p, r, {1.5, 1, 1}) - 1.5 * *asd(p, r, {1, 1, 1})) < 1e-12);
}

TEST_CASE("surface keeps only boundary voxels") {
  const Dims3 d{5, 5, 5};
  const Mask full = cube(d, 0, 0, 0, 5);
  const Mask s = surface(full);
  int n = 0;
  for (auto v : s.data) n += v;
  CHECK(n == 125 - 27);
  CHECK(s.at(2, 2, 2) == 0);
  CHECK(s.at(0, 2, 2) == 1);
}

TEST_CASE("asd fast path equals the all-pairs oracle on exhaustive 2x2x2 masks") {
  const Dims3 d{2, 2, 2};
  const Spacing sp{1.5, 1.0, 0.75};
  double worst = 0;
  for (int ma = 1; ma < 256; ++ma)
    for (int mb = 1; mb < 256; ++mb) {
      Mask a(d), b(d);
      for (int i = 0; i < 8; ++i) {
        a.data[i] = (ma >> i) & 1;
        b.data[i] = (mb >> i) & 1;
      }
      worst = std::max(worst, std::abs(*asd(a, b, sp) - *oracle_asd(a, b, sp)));
    }
  CHECK(worst <= 1e-9);
}

TEST_CASE("asd fast path equals the all-pairs oracle on random masks up to 6^3") {
  std::mt19937_64 rng(2026);
  std::uniform_real_distribution<double> u(0.5, 2.0);
  double worst = 0;
  int compared = 0;
  for (int t = 0; t < 3000; ++t) {
    const Dims3 d{1 + static_cast<int>(rng() % 6), 1 + static_cast<int>(rng() % 6), 1 + static_cast<int>(rng() % 6)};
    std::bernoulli_distribution coin(0.05 + 0.9 * (t % 10) / 9.0);
    Mask a(d), b(d);
    for (auto& v : a.data) v = coin(rng);
    for (auto& v : b.data) v = coin(rng);
    const Spacing sp = t % 2 ? Spacing{1, 1, 1} : Spacing{u(rng), u(rng), u(rng)};
    const auto fast = asd(a, b, sp);
    const auto slow = oracle_asd(a, b, sp);
    REQUIRE(fast.has_value() == slow.has_value());
    if (fast) {
      CHECK(*fast >= 0.0);
      worst = std::max(worst, std::abs(*fast - *slow));
      ++compared;
    }
    const auto lib = asd_brute_force(a, b, sp);
    if (lib) CHECK(std::abs(*lib - *slow) < 1e-12);
  }
  CHECK(compared > 2000);
  CHECK(worst <= 1e-9);
}

TEST_CASE("percentiles and percentile mean") {
  CHECK(percentile({1, 2, 3, 4, 5}, 50) == 3);
  CHECK(std::abs(percentile({1, 2, 3, 4}, 5) - 1.15) < 1e-12);
  CHECK(std::abs(percentile({10, 0}, 25) - 2.5) < 1e-12);
  CHECK_THROWS_AS(percentile({}, 50), InvalidArgument);
  // 21 values 0..20: P5 = 1, P95 = 19, so the two extremes drop out.
  std::vector<double> v;
  for (int i = 0; i <= 20; ++i) v.push_back(i);
  CHECK(std::abs(percentile_mean(v) - 10.0) < 1e-12);
  v.back() = 1000;
  CHECK(std::abs(percentile_mean(v) - 10.0) < 1e-12);
  CHECK(percentile_mean({0.2, 0.6}) == doctest::Approx(0.4).epsilon(1e-15));
  CHECK(percentile_mean({0.7}) == 0.7);
  CHECK(std::abs(sample_std({1, 2, 3, 4}) - std::sqrt(5.0 / 3.0)) < 1e-12);
}

TEST_CASE("aggregate means and forgetting curves") {
  ClassScore a{"head", 1, {{"c0", 0.8, 1.0}, {"c1", 0.6, std::nullopt}}};
  ClassScore b{"chest", 2, {{"c0", 0.9, 2.0}, {"c1", 0.7, 4.0}}};
  CHECK(std::abs(a.mean_dsc() - 0.7) < 1e-12);
  CHECK(*a.mean_asd() == 1.0);
  CHECK(std::abs(mean_class_dsc({a, b}) - 0.75) < 1e-12);
  CHECK(std::abs(*mean_class_asd({a, b}) - 2.0) < 1e-12);

  StepSnapshot s0{0, "head", {"head"}, {a}, 0, 0, {}};
  ClassScore a2 = a;
  a2.cases[0].dsc = 0.4;
  StepSnapshot s1{1, "chest", {"head", "chest"}, {a2, b}, 0, 0, {}};
  const auto head = forgetting_curve({s0, s1}, "head");
  REQUIRE(head.size() == 2);
  CHECK(std::abs(head[0].dsc - 0.7) < 1e-12);
  CHECK(std::abs(head[1].dsc - 0.5) < 1e-12);
  const auto chest = forgetting_curve({s0, s1}, "chest");
  REQUIRE(chest.size() == 1);
  CHECK(chest[0].step == 1);
  CHECK_THROWS_AS(forgetting_curve({s0, s1}, "abdomen"), InvalidArgument);
}
