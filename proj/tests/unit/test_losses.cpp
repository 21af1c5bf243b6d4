// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <random>

#include "contseg/error.hpp"
#include "contseg/losses.hpp"
#include "doctest.h"
#include "support/gradcheck.hpp"

using namespace contseg;
using namespace contseg::losses;

namespace {

Field field(int channels, Dims3 d, std::initializer_list<double> v) {
  Field f(channels, d);
  std::copy(v.begin(), v.end(), f.data());
  return f;
}

}  // namespace

TEST_CASE("ce_dice reference values") {
  // Two voxels, classes {b, 1}: exact one-hot prediction.
  const auto onehot = field(2, {1, 1, 2}, {1, 0, 0, 1});
  const std::vector<int> lab{0, 1};
  CHECK(std::abs(ce_dice(onehot, lab).value) < 1e-6);

  // Uniform over K + 1 = 4 classes.
  Field uni(4, {2, 2, 2});
  uni.fill(0.25);
  std::vector<int> lab4(8);
  for (int i = 0; i < 8; ++i) lab4[i] = i % 4;
  CHECK(std::abs(ce(uni, lab4).value - std::log(4.0)) < 1e-12);

  // Single foreground voxel predicted 0.5.
  const auto half = field(2, {1, 1, 1}, {0.5, 0.5});
  const double expect = std::log(2.0) + 1.0 - (2 * 0.5 + 1e-5) / (0.25 + 1.0 + 1e-5);
  CHECK(std::abs(ce_dice(half, std::vector<int>{1}).value - expect) < 1e-12);

  CHECK_THROWS_AS(ce_dice(half, std::vector<int>{2}), InvalidArgument);
}

TEST_CASE("unce reference values") {
  // channels b, old1, new1; one background voxel q = (0.5, 0.3, 0.2).
  ClassContext ctx{0, {0, 1}, {2}, {0, 1, 2}, false};
  const auto q = field(3, {1, 1, 1}, {0.5, 0.3, 0.2});
  CHECK(std::abs(unce(q, std::vector<int>{0}, ctx).value - 0.22314355131420976) < 1e-6);
  CHECK(std::abs(unce(q, std::vector<int>{2}, ctx).value + std::log(0.2)) < 1e-12);
  CHECK_THROWS_AS(unce(q, std::vector<int>{1}, ctx), InvalidArgument);

  // Overlap class 2 is excluded from the background merge.
  ClassContext ov{0, {0, 1, 2}, {2, 3}, {0, 1, 2, 3}, false};
  CHECK(ov.overlap() == std::vector<int>{2});
  ClassContext no_ov{0, {0, 1, 2}, {3}, {0, 1, 2, 3}, false};
  const auto q4 = field(4, {1, 1, 1}, {0.4, 0.1, 0.3, 0.2});
  const double with = unce(q4, std::vector<int>{0}, ov).value;
  const double without = unce(q4, std::vector<int>{0}, no_ov).value;
  CHECK(std::abs((with - without) - std::log(0.8 / 0.5)) < 1e-12);

  // Union reading leaves only the background in the merge.
  ClassContext uni = ov;
  uni.union_overlap = true;
  CHECK(std::abs(unce(q4, std::vector<int>{0}, uni).value + std::log(0.4)) < 1e-12);
}

TEST_CASE("unce equals cross-entropy on the first step") {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 20; ++t) {
    const auto q = testing::random_simplex(3, {2, 3, 2}, rng, 0.0);
    std::vector<int> lab(q.voxels());
    for (std::size_t i = 0; i < lab.size(); ++i) lab[i] = int(i % 3);
    ClassContext ctx{0, {0}, {1, 2}, {0, 1, 2}, false};
    const auto a = unce(q, lab, ctx);
    const auto b = ce(q, lab);
    CHECK(a.value == b.value);
    CHECK(a.grad == b.grad);
  }
}

TEST_CASE("unkd reference values") {
  ClassContext ctx{0, {0, 1}, {2}, {0, 1, 2}, false};
  const std::vector<int> old_map{0, 1};
  // Old model certain of c1, new model certain of c1.
  CHECK(unkd(field(3, {1, 1, 1}, {0, 1, 0}), field(2, {1, 1, 1}, {0, 1}), old_map, ctx).value == 0.0);
  // Mass 0.5 on C^t (with b) and 0.5 on c1.
  const auto q = field(3, {1, 1, 1}, {0.25, 0.5, 0.25});
  const auto q_old = field(2, {1, 1, 1}, {0.3, 0.7});
  CHECK(std::abs(unkd(q, q_old, old_map, ctx).value - (-0.3 * std::log(0.5) - 0.7 * std::log(0.5))) < 1e-12);
  // Old model channels all inside the overlap: the sum is empty.
  ClassContext ov{0, {0, 2}, {2}, {0, 2}, false};
  const std::vector<int> only_shared{2};
  CHECK(unkd(field(2, {1, 1, 1}, {0.5, 0.5}), field(1, {1, 1, 1}, {1.0}), only_shared, ov).value == 0.0);
  CHECK_THROWS_AS(unkd(q, Field{}, old_map, ctx), InvalidArgument);
}

TEST_CASE("unkd is non-negative") {
  std::mt19937_64 rng(9);
  ClassContext ctx{0, {0, 1, 2}, {2, 3}, {0, 1, 2, 3}, false};
  const std::vector<int> old_map{0, 1, 2};
  for (int t = 0; t < 50; ++t) {
    const auto q = testing::random_simplex(4, {2, 2, 2}, rng, 0.0);
    const auto qo = testing::random_simplex(3, {2, 2, 2}, rng, 0.0);
    CHECK(unkd(q, qo, old_map, ctx).value >= 0.0);
  }
}

TEST_CASE("pod3d pooling") {
  Field x(2, {4, 4, 4});
  x.fill(3.5);
  const auto p = pod3d_pool(x);
  CHECK(p.rows == 48);
  CHECK(p.channels == 2);
  for (double v : p.v) CHECK(v == 3.5);

  // Single nonzero cell checked against brute-force means.
  const Dims3 d{2, 3, 5};
  Field s(1, d);
  s.at(0, 1, 2, 3) = 6.0;
  const auto ps = pod3d_pool(s);
  CHECK(ps.rows == d.w * d.d + d.h * d.d + d.h * d.w);
  std::vector<double> expect;
  for (int z = 0; z < d.d; ++z)
    for (int xx = 0; xx < d.w; ++xx) {
      double m = 0;
      for (int y = 0; y < d.h; ++y) m += s.at(0, z, y, xx);
      expect.push_back(m / d.h);
    }
  for (int z = 0; z < d.d; ++z)
    for (int y = 0; y < d.h; ++y) {
      double m = 0;
      for (int xx = 0; xx < d.w; ++xx) m += s.at(0, z, y, xx);
      expect.push_back(m / d.w);
    }
  for (int y = 0; y < d.h; ++y)
    for (int xx = 0; xx < d.w; ++xx) {
      double m = 0;
      for (int z = 0; z < d.d; ++z) m += s.at(0, z, y, xx);
      expect.push_back(m / d.d);
    }
  REQUIRE(expect.size() == ps.v.size());
  for (std::size_t i = 0; i < expect.size(); ++i) CHECK(std::abs(ps.v[i] - expect[i]) < 1e-15);

  const auto p2 = pod3d_pool(s, PodPooling::two_axis);
  CHECK(p2.rows == d.d + d.h + d.w);
  CHECK(p2.v[0] == 0.0);
  CHECK(std::abs(p2.v[1] - 6.0 / 15) < 1e-15);

  CHECK_THROWS_AS(pod3d_pool(Field(1, {0, 2, 2})), ShapeError);
}

TEST_CASE("pod3d pooling is linear") {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0, 1);
  Field a(3, {3, 4, 2}), b(3, {3, 4, 2}), c(3, {3, 4, 2});
  for (auto& v : a.storage()) v = n(rng);
  for (auto& v : b.storage()) v = n(rng);
  for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] = 2.5 * a.data()[i] - 0.75 * b.data()[i];
  const auto pa = pod3d_pool(a), pb = pod3d_pool(b), pc = pod3d_pool(c);
  for (std::size_t i = 0; i < pc.v.size(); ++i) CHECK(std::abs(pc.v[i] - (2.5 * pa.v[i] - 0.75 * pb.v[i])) < 1e-12);
}

TEST_CASE("pod3d loss reference values") {
  std::vector<Field> a{Field(1, {2, 2, 2}), Field(1, {1, 1, 1})};
  auto b = a;
  CHECK(pod3d_loss(a, b, 0.001).value == 0.0);
  // One voxel of the 1x1x1 stage differs by delta: each of its 3 pooled cells differs by delta.
  const double delta = 0.3;
  b[1].data()[0] = delta;
  CHECK(std::abs(pod3d_loss(a, b, 0.001).value - 0.001 * 3 * delta * delta / 2) < 1e-15);
  CHECK(pod3d_loss(a, b, 0.0).value == 0.0);
  b.pop_back();
  CHECK_THROWS_AS(pod3d_loss(a, b, 0.001), ShapeError);
}

TEST_CASE("negative cosine") {
  const std::vector<double> p{1, 0}, z{1, 1}, o{0, 2};
  CHECK(std::abs(neg_cos(p, z).value + 1 / std::sqrt(2.0)) < 1e-6);
  CHECK(std::abs(neg_cos(z, z).value + 1) < 1e-15);
  CHECK(neg_cos(p, o).value == 0.0);
  CHECK_THROWS_AS(neg_cos(p, std::vector<double>{0, 0}), InvalidArgument);
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0, 1);
  std::uniform_real_distribution<double> sc(0.01, 100);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> a(6), b(6);
    for (auto& v : a) v = n(rng);
    for (auto& v : b) v = n(rng);
    const double al = sc(rng), be = sc(rng);
    auto as = a, bs = b;
    for (auto& v : as) v *= al;
    for (auto& v : bs) v *= be;
    CHECK(std::abs(neg_cos(as, bs).value - neg_cos(a, b).value) < 1e-12);
  }
}

TEST_CASE("analytic gradients match central differences") {
  const auto rep = testing::gradient_report(100, 1234);
  CHECK(rep.ce_dice < 1e-4);
  CHECK(rep.ce_dice_logits < 1e-4);
  CHECK(rep.unce < 1e-4);
  CHECK(rep.unkd < 1e-4);
  CHECK(rep.pod < 1e-4);
  CHECK(rep.pod_two_axis < 1e-4);
  CHECK(rep.neg_cos < 1e-4);
}

TEST_CASE("deep supervision weights halve per stage") {
  const auto w = deep_supervision_weights(3);
  CHECK(std::abs(w[0] - 4.0 / 7) < 1e-15);
  CHECK(std::abs(w[1] - 2.0 / 7) < 1e-15);
  CHECK(std::abs(w[2] - 1.0 / 7) < 1e-15);
}
