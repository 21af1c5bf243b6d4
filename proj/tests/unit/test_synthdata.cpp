// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <cstring>
#include <filesystem>
#include <set>

#include "contseg/error.hpp"
#include "contseg/synthdata.hpp"
#include "contseg/volume_io.hpp"
#include "doctest.h"

using namespace contseg;

namespace {

TaskRegistry small_registry() { return default_registry({24, 16, 16}, 2, 1, 1, 3); }

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("contseg_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("body-part scores are slice centres of the covered interval") {
  DatasetDescriptor full;
  full.bpr_range = {0.0, 1.0};
  const auto s = bpr_oracle({10, 4, 4}, full);
  REQUIRE(s.size() == 10);
  for (int k = 0; k < 10; ++k) CHECK(std::abs(s[k] - (0.05 + 0.1 * k)) < 1e-12);

  DatasetDescriptor chest;
  chest.bpr_range = {0.4, 0.7};
  const auto c = bpr_oracle({3, 4, 4}, chest);
  CHECK(std::abs(c[0] - 0.45) < 1e-12);
  CHECK(std::abs(c[1] - 0.55) < 1e-12);
  CHECK(std::abs(c[2] - 0.65) < 1e-12);
  CHECK(std::abs(bpr_oracle({1, 4, 4}, chest)[0] - 0.55) < 1e-12);
  CHECK_THROWS_AS(bpr_oracle({0, 4, 4}, chest), InvalidArgument);
}

TEST_CASE("generated labels respect the class set and scores increase") {
  const auto reg = small_registry();
  for (const auto& d : reg.datasets) {
    const auto samples = generate_dataset(d, reg);
    CHECK(samples.size() == static_cast<std::size_t>(d.n_cases()));
    std::set<int> allowed(d.class_set.begin(), d.class_set.end());
    allowed.insert(0);
    std::set<int> seen;
    for (const auto& s : samples) {
      for (int v : s.labels.data) {
        CHECK(allowed.count(v) == 1);
        seen.insert(v);
      }
      for (std::size_t k = 1; k < s.bpr_scores.size(); ++k) CHECK(s.bpr_scores[k] > s.bpr_scores[k - 1]);
      CHECK(s.bpr_scores.front() >= 0.0);
      CHECK(s.bpr_scores.back() <= 1.0);
    }
    for (int c : d.class_set) CHECK_MESSAGE(seen.count(c) == 1, d.dataset_id << " never shows class " << c);
  }
}

TEST_CASE("generation is deterministic") {
  const auto reg = small_registry();
  const auto& d = reg.dataset("chest");
  const auto a = generate_dataset(d, reg);
  const auto b = generate_dataset(d, reg);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].image == b[i].image);
    CHECK(a[i].labels == b[i].labels);
  }
  auto other = d;
  other.seed += 1;
  CHECK_FALSE(generate_case(other, reg, 0).image == a[0].image);
}

TEST_CASE("lesion voxels lie inside the host organ") {
  const auto reg = small_registry();
  const auto gtv = reg.dataset("gtv");
  auto host_only = gtv;
  host_only.class_set = {4};
  for (int i = 0; i < gtv.n_cases(); ++i) {
    const auto with = generate_case(gtv, reg, i);
    const auto host = generate_case(host_only, reg, i);
    int lesion = 0;
    for (std::size_t v = 0; v < with.labels.data.size(); ++v)
      if (with.labels.data[v] == 6) {
        ++lesion;
        CHECK(host.labels.data[v] == 4);
      }
    CHECK(lesion > 0);
  }
}

TEST_CASE("unlabelled anatomies still appear in the image") {
  const auto reg = small_registry();
  const auto abd = reg.dataset("abdomen");
  auto liver_only = abd;
  liver_only.class_set = {4};
  const auto& kidney = reg.anatomy(5);
  const auto full = generate_case(abd, reg, 0);
  const auto partial = generate_case(liver_only, reg, 0);
  int n = 0;
  for (std::size_t v = 0; v < full.labels.data.size(); ++v)
    if (full.labels.data[v] == 5) {
      ++n;
      CHECK(partial.labels.data[v] == 0);
      CHECK(partial.image.data[v] > kidney.intensity_band.first - 120);
      CHECK(partial.image.data[v] < kidney.intensity_band.second + 120);
    }
  CHECK(n > 0);
}

TEST_CASE("single sphere at mid-body lands in the middle axial third") {
  TaskRegistry reg;
  AnatomySpec a;
  a.class_id = 1;
  a.name = "blob";
  a.bpr_center = 0.5;
  a.bpr_extent = 0.2;
  a.intensity_band = {100, 100};
  reg.anatomies.push_back(a);
  DatasetDescriptor d;
  d.dataset_id = "one";
  d.class_set = {1};
  d.n_train = 1;
  d.volume_shape = {30, 16, 16};
  reg.datasets.push_back(d);
  const auto s = generate_case(d, reg, 0);
  int fg = 0;
  for (int z = 0; z < 30; ++z)
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x)
        if (s.labels.at(z, y, x)) {
          ++fg;
          CHECK(s.labels.at(z, y, x) == 1);
          CHECK(z >= 10);
          CHECK(z < 20);
        }
  CHECK(fg > 0);
}

TEST_CASE("overlapping anatomies in one dataset are rejected") {
  auto reg = small_registry();
  auto clash = reg.anatomy(5);
  clash.class_id = 7;
  clash.name = "kidney_copy";
  reg.anatomies.push_back(clash);
  auto d = reg.dataset("abdomen");
  d.class_set = {5, 7};
  CHECK_THROWS_AS(generate_case(d, reg, 0), InvalidArgument);

  AnatomySpec bad = reg.anatomy(1);
  bad.radius_y = bad.radius_x * 2;
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
}

TEST_CASE("continual orders") {
  TaskRegistry reg = small_registry();
  reg.datasets.resize(3);
  const auto o = make_orders(reg, {{"id", {0, 1, 2}}, {"rev", {2, 1, 0}}});
  CHECK(o[0].dataset_ids == std::vector<std::string>{"comprehensive", "head", "chest"});
  CHECK(o[1].dataset_ids == std::vector<std::string>{"chest", "head", "comprehensive"});
  CHECK_THROWS_AS(make_orders(reg, {{"dup", {0, 0, 1}}}), InvalidArgument);
  CHECK_THROWS_AS(make_orders(reg, {{"range", {0, 3}}}), InvalidArgument);
  const auto defaults = default_orders(small_registry());
  CHECK(defaults.size() == 4);
  CHECK(find_order(defaults, "order1").dataset_ids == std::vector<std::string>{"head", "chest", "abdomen"});
}

TEST_CASE("raw volumes and manifests round-trip bit-exactly") {
  const auto reg = small_registry();
  const auto& d = reg.dataset("head");
  const auto samples = generate_dataset(d, reg);
  const auto dir = temp_dir("manifest");
  write_dataset(dir, d, reg, samples);
  const auto back = read_dataset(dir);
  CHECK(back.descriptor.dataset_id == "head");
  CHECK(back.descriptor.volume_shape == d.volume_shape);
  CHECK(back.anatomies.size() == reg.anatomies.size());
  REQUIRE(back.samples.size() == samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    CHECK(back.samples[i].image == samples[i].image);
    CHECK(back.samples[i].labels == samples[i].labels);
    CHECK(back.samples[i].bpr_scores == samples[i].bpr_scores);
    CHECK(back.samples[i].split == samples[i].split);
  }
  // Header layout: magic, then x, y, z extents.
  const std::string raw = read_text(dir / (samples[0].case_id + "_image.raw"));
  CHECK(raw.size() == 8 + 12 + 4 * samples[0].image.data.size());
  CHECK(raw.substr(0, 7) == "CSEGF32");
  std::uint32_t dims[3];
  std::memcpy(dims, raw.data() + 8, 12);
  CHECK(dims[0] == 16);
  CHECK(dims[2] == 24);
  CHECK_THROWS_AS(read_labels(dir / (samples[0].case_id + "_image.raw")), IoError);
}
