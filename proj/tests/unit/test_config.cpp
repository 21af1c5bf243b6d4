// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <fstream>

#include "contseg/config.hpp"
#include "contseg/error.hpp"
#include "doctest.h"

using namespace contseg;
namespace fs = std::filesystem;

namespace {

RunConfig parse(const char* text) { return run_config_from_json(nlohmann::json::parse(text)); }

fs::path source_dir() { return fs::path(__FILE__).parent_path().parent_path().parent_path(); }

}  // namespace

TEST_CASE("config: empty document gives defaults without a seed") {
  const RunConfig c = parse("{}");
  CHECK_FALSE(c.seed.has_value());
  CHECK_THROWS_AS(c.require_seed(), ConfigError);
  CHECK(c.engine.lth.schedule.rates.size() == 12);
  CHECK(c.merge.binarize);
}

TEST_CASE("config: unknown keys are rejected at every level") {
  CHECK_THROWS_AS(parse(R"({"seed":1,"bogus":0})"), ConfigError);
  CHECK_THROWS_AS(parse(R"({"seed":1,"decoder":{"epoch":3}})"), ConfigError);
  CHECK_THROWS_AS(parse(R"({"seed":1,"ssl":{"augmentation":{"trigger":{"flip":0.1}}}})"), ConfigError);
}

TEST_CASE("config: type and range violations") {
  CHECK_THROWS_AS(parse(R"({"seed":-1})"), ConfigError);
  CHECK_THROWS_AS(parse(R"({"seed":"x"})"), ConfigError);
  CHECK_THROWS_AS(parse(R"({"seed":1,"prune":{"schedule":[0.5,0.4]}})").validate(false), ConfigError);
  CHECK_THROWS_AS(parse(R"({"seed":1,"decoder":{"lr":-0.1}})").validate(false), ConfigError);
}

TEST_CASE("config: to_json round trip") {
  RunConfig c = parse(R"({"seed":9,"registry":{"volume":[12,12,12]},"decoder":{"epochs":3},
                          "orders":[{"name":"o","datasets":["head","chest"]}]})");
  const RunConfig d = run_config_from_json(nlohmann::json::parse(to_json(c).dump()));
  CHECK(to_json(d).dump() == to_json(c).dump());
  CHECK(*d.seed == 9);
  CHECK(d.engine.train.epochs == 3);
  const auto orders = run_orders(d, load_registry(d));
  REQUIRE(orders.size() == 1);
  CHECK(orders[0].name == "o");
}

TEST_CASE("config: unknown order dataset is a config error") {
  const RunConfig c = parse(R"({"seed":1,"orders":[{"name":"o","datasets":["nowhere"]}]})");
  CHECK_THROWS_AS(run_orders(c, load_registry(c)), ConfigError);
}

TEST_CASE("config: full scale widens the network and budgets") {
  RunConfig c = parse(R"({"seed":1})");
  apply_paper_scale(c);
  CHECK(c.paper_scale);
  CHECK(c.encoder.base_features > EncoderConfig{}.base_features);
  CHECK(c.engine.train.epochs == 300);
  CHECK(c.baseline.epochs == 500);
  CHECK(c.baseline.iterations_per_epoch == 250);
}

TEST_CASE("config: missing file and malformed JSON") {
  CHECK_THROWS_AS(load_run_config("/nonexistent/contseg.json"), ConfigError);
  const fs::path p = fs::temp_directory_path() / "contseg_bad_config.json";
  std::ofstream(p) << "{ not json";
  CHECK_THROWS_AS(load_run_config(p), ConfigError);
  fs::remove(p);
}

TEST_CASE("config: shipped configurations load and validate") {
  for (const char* name : {"default.json", "smoke.json"}) {
    const RunConfig c = load_run_config(source_dir() / "config" / name);
    CHECK_NOTHROW(c.validate(false));
    CHECK(c.seed.has_value());
  }
}
