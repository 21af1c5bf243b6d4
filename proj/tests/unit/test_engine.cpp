// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstring>
#include <filesystem>
#include <set>

#include "contseg/engine.hpp"
#include "contseg/error.hpp"
#include "doctest.h"

using namespace contseg;

namespace {

const Corpus& small_corpus() {
  static const Corpus c = Corpus::generate(default_registry({12, 12, 12}, 2, 1, 1, 3));
  return c;
}

Encoder frozen_encoder() {
  Rng rng(2);
  Encoder e(EncoderConfig{3, 4, 8, 1, 1}, rng);
  e.set_frozen(true);
  return e;
}

EngineConfig quick_config() {
  EngineConfig cfg;
  cfg.decoder_base = 2;
  cfg.prune = false;
  cfg.train.epochs = 2;
  cfg.train.warmup_epochs = 1;
  cfg.continual.epochs = 1;
  cfg.seed = 5;
  return cfg;
}

LearnerStrategy quick_baseline(StrategyKind k) {
  LearnerStrategy s;
  s.kind = k;
  s.baseline.epochs = 1;
  s.baseline.iterations_per_epoch = 2;
  return s;
}

const ContinualOrder& order1() {
  static const auto orders = default_orders(small_corpus().registry);
  return find_order(orders, "order1");
}

bool same_bytes(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("strategy names and baseline validation") {
  for (auto k : {StrategyKind::clnet, StrategyKind::naive, StrategyKind::mib, StrategyKind::plop})
    CHECK(strategy_from_string(to_string(k)) == k);
  CHECK_THROWS_AS(strategy_from_string("ewc"), ConfigError);
  BaselineConfig b;
  CHECK_NOTHROW(b.validate());
  b.lr = -1;
  CHECK_THROWS_AS(b.validate(), ConfigError);
}

TEST_CASE("fnv1a of a float buffer") {
  // Offset basis for an empty buffer.
  CHECK(fnv1a({}) == 0xcbf29ce484222325ULL);
  CHECK(fnv1a({1.f}) != fnv1a({-1.f}));
}

TEST_CASE("continual runs need a frozen encoder") {
  Rng rng(1);
  Encoder e(EncoderConfig{3, 4, 8, 1, 1}, rng);
  CHECK_THROWS(run_continual(small_corpus(), e, order1(), {}, quick_config()));
}

TEST_CASE("clnet: earlier classes keep their posterior bytes") {
  const Corpus& corpus = small_corpus();
  std::vector<int> calls;
  const auto res = run_continual(corpus, frozen_encoder(), order1(), {}, quick_config(),
                                 [&](const StepResult& r, const Model&) { calls.push_back(r.snapshot.step); });
  REQUIRE(res.steps.size() == order1().dataset_ids.size());
  CHECK(calls == std::vector<int>{0, 1, 2});
  const auto& first = corpus.registry.dataset(order1().dataset_ids[0]);
  for (int c : first.class_set) {
    const auto& ref = res.steps[0].probe.at(c);
    for (std::size_t t = 1; t < res.steps.size(); ++t) CHECK(same_bytes(res.steps[t].probe.at(c), ref));
  }
  // Scores cover every seen (dataset, class) pair.
  for (const auto& step : res.steps) {
    std::set<std::pair<std::string, int>> seen;
    for (const auto& cs : step.snapshot.scores) seen.insert({cs.dataset_id, cs.class_id});
    for (const auto& id : step.snapshot.seen_datasets)
      for (int c : corpus.registry.dataset(id).class_set) CHECK(seen.count({id, c}) == 1);
    CHECK(step.snapshot.dataset_dsc(step.snapshot.dataset_id).has_value());
  }
  CHECK(res.model.heads.size() == res.model.bounds.size());
}

TEST_CASE("baselines grow one shared head") {
  const Corpus& corpus = small_corpus();
  for (auto k : {StrategyKind::naive, StrategyKind::mib, StrategyKind::plop}) {
    CAPTURE(to_string(k));
    const auto res = run_continual(corpus, frozen_encoder(), order1(), quick_baseline(k), quick_config());
    REQUIRE(res.model.heads.size() == 1);
    CHECK(res.model.heads[0].head_id == "shared");
    std::set<int> classes;
    for (const auto& id : order1().dataset_ids)
      for (int c : corpus.registry.dataset(id).class_set) classes.insert(c);
    CHECK(res.model.heads[0].class_ids.size() == classes.size());
    CHECK(res.steps.back().snapshot.seen_datasets.size() == 3);
  }
}

TEST_CASE("metrics.csv is reproducible and snapshots round-trip") {
  const Corpus& corpus = small_corpus();
  auto run = [&] {
    std::vector<StepSnapshot> snaps;
    const auto res = run_continual(corpus, frozen_encoder(), order1(), {}, quick_config());
    for (const auto& s : res.steps) snaps.push_back(s.snapshot);
    return std::make_pair(metrics_csv("clnet", snaps), snaps);
  };
  const auto [a, snaps] = run();
  const auto [b, unused] = run();
  CHECK(a == b);
  CHECK(a.rfind("run,step,dataset,class,case,dsc,asd\n", 0) == 0);
  CHECK(metrics_csv("clnet", snaps, false).find("run,step") == std::string::npos);
  for (const auto& s : snaps) {
    const auto j = to_json(s);
    CHECK(to_json(snapshot_from_json(nlohmann::json::parse(j.dump()))).dump() == j.dump());
  }
}

TEST_CASE("write_step lays out a step directory") {
  const Corpus& corpus = small_corpus();
  const auto dir = std::filesystem::temp_directory_path() / "contseg_engine_step";
  std::filesystem::remove_all(dir);
  run_continual(corpus, frozen_encoder(), order1(), {}, quick_config(),
                [&](const StepResult& r, const Model& m) { write_step(dir, r, m); });
  for (int t = 0; t < 3; ++t) {
    const auto s = dir / ("step_" + std::to_string(t));
    CHECK(std::filesystem::is_directory(s / "checkpoint"));
    CHECK(std::filesystem::exists(s / "snapshot.json"));
    CHECK(std::filesystem::exists(s / "prune_records.json"));
    CHECK(std::filesystem::exists(s / "train_log.csv"));
  }
  const Model m = load_checkpoint(dir / "step_2" / "checkpoint");
  CHECK(m.heads.size() == 5);
  std::filesystem::remove_all(dir);
}

TEST_CASE("partial label: one head per anatomy, lesion heads take FLS input") {
  EngineConfig cfg = quick_config();
  const auto pl = run_partial_label(small_corpus(), frozen_encoder(), cfg, true);
  CHECK(pl.model.heads.size() == small_corpus().registry.anatomies.size());
  bool saw_gtv = false;
  for (const auto& h : pl.model.heads)
    if (h.is_gtv) {
      saw_gtv = true;
      CHECK_FALSE(h.fls_sources.empty());
      CHECK(pl.fls_ablation.count(h.head_id) == 1);
    }
  CHECK(saw_gtv);
}
