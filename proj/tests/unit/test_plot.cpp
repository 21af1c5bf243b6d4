// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <fstream>
#include <iterator>

#include "contseg/plot.hpp"
#include "doctest.h"

using namespace contseg;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

PlotSpec sample() {
  PlotSpec s{"curves", "step", "dsc", {}, std::pair{0.0, 1.0}, true, true};
  s.series.push_back({"a", {0, 1, 2}, {0.9, 0.9, 0.9}});
  s.series.push_back({"b", {0, 1, 2}, {0.9, 0.5, 0.2}});
  return s;
}

}  // namespace

TEST_CASE("plot: canvas primitives stay in bounds") {
  Canvas c(10, 8);
  CHECK(c.rgb.size() == 10u * 8u * 3u);
  c.set(-1, 3, 0xff0000);
  c.set(10, 3, 0xff0000);
  c.line(-5, -5, 20, 20, 0x00ff00, 3);
  c.fill_rect(2, 2, 4, 4, 0x0000ff);
  CHECK(c.rgb[(3 * 10 + 3) * 3 + 2] == 0xff);
  CHECK(Canvas::text_width("abc", 2) == 36);
}

TEST_CASE("plot: rendering is deterministic and writes a PNG") {
  const Canvas a = render_plot(sample());
  const Canvas b = render_plot(sample());
  CHECK(a.rgb == b.rgb);
  const fs::path p = fs::temp_directory_path() / "contseg_plot_test.png";
  write_plot(p, sample());
  const std::string bytes = slurp(p);
  REQUIRE(bytes.size() > 8);
  CHECK(bytes.substr(1, 3) == "PNG");
  write_plot(p, sample());
  CHECK(slurp(p) == bytes);
  fs::remove(p);
}

TEST_CASE("plot: different data draws different pixels") {
  PlotSpec s = sample();
  s.series[1].y = {0.9, 0.8, 0.7};
  CHECK(render_plot(s).rgb != render_plot(sample()).rgb);
}
