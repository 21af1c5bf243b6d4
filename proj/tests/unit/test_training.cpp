// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>

#include "contseg/checkpoint.hpp"
#include "contseg/ema.hpp"
#include "contseg/error.hpp"
#include "contseg/lth.hpp"
#include "contseg/optim.hpp"
#include "contseg/trainer.hpp"
#include "doctest.h"

using namespace contseg;

namespace {

EncoderConfig tiny_encoder() { return {3, 4, 8, 1, 1}; }

DecoderHead tiny_head(Rng& rng, const std::string& id = "h", int decoder_base = 2) {
  HeadSpec spec{id, {1}, {}, false, false, decoder_base};
  return make_head(spec, tiny_encoder(), {}, rng);
}

std::vector<float> flat_values(const DecoderNet& net) {
  std::vector<float> v;
  for (const ParamArray* p : net.params()) v.insert(v.end(), p->value.begin(), p->value.end());
  return v;
}

bool bytes_equal(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

// Single-array head-like parameter list for mask tests.
struct Arrays {
  std::vector<ParamArray> store;
  ConstParamRefs refs() const {
    ConstParamRefs r;
    for (const auto& p : store) r.push_back(&p);
    return r;
  }
};

Arrays arrays(std::vector<std::pair<std::string, std::vector<float>>> spec) {
  Arrays a;
  for (auto& [name, vals] : spec) {
    ParamArray p(name, {static_cast<int>(vals.size())}, true);
    p.value = vals;
    a.store.push_back(p);
  }
  return a;
}

double sparsity(const DecoderHead& h) {
  const auto [n, dropped] = prunable_counts(std::as_const(h.net).params(), h.mask);
  return static_cast<double>(dropped) / static_cast<double>(n);
}

Sample blob_sample(Dims3 d, int case_index, std::mt19937_64& rng) {
  Sample s;
  s.case_id = "case" + std::to_string(case_index);
  s.image = Image(d, -500.f);
  s.labels = LabelMap(d, 0);
  std::normal_distribution<float> noise(0, 20);
  const int cz = d.d / 2 + static_cast<int>(rng() % 3) - 1, cy = d.h / 2, cx = d.w / 2;
  for (int z = 0; z < d.d; ++z)
    for (int y = 0; y < d.h; ++y)
      for (int x = 0; x < d.w; ++x) {
        const bool in = (z - cz) * (z - cz) + (y - cy) * (y - cy) + (x - cx) * (x - cx) <= 9;
        if (in) {
          s.image.at(z, y, x) = 300.f;
          s.labels.at(z, y, x) = 1;
        }
        s.image.at(z, y, x) += noise(rng);
      }
  for (int z = 0; z < d.d; ++z) s.bpr_scores.push_back((z + 0.5) / d.d);
  return s;
}

}  // namespace

TEST_CASE("poly schedule") {
  CHECK(poly_lr(0.01, 0, 10) == 0.01);
  CHECK(poly_lr(0.01, 10, 10) == 0.0);
  CHECK(poly_lr(0.01, 10, 10) <= 1e-6 * 0.01);
  CHECK(std::abs(poly_lr(1.0, 5, 10) - std::pow(0.5, 0.9)) < 1e-15);
  CHECK_THROWS_AS(poly_lr(0.01, 0, 0), InvalidArgument);
}

TEST_CASE("sgd momentum update") {
  ParamArray p("p", {1}, false);
  p.value = {1.f};
  p.grad = {1.f};
  Sgd opt({&p}, 0.5);
  opt.step(0.1);  // v = 1, p = 0.9
  CHECK(p.value[0] == doctest::Approx(0.9f));
  opt.step(0.1);  // v = 1.5, p = 0.75
  CHECK(p.value[0] == doctest::Approx(0.75f));
  opt.reset_momentum();
  opt.step(0.1);  // v = 1
  CHECK(p.value[0] == doctest::Approx(0.65f));
}

TEST_CASE("ema update examples") {
  Rng rng(3);
  DecoderHead h = tiny_head(rng);
  ema_update(h);  // inactive: no-op
  CHECK_FALSE(h.ema.active);
  CHECK(h.ema.accum.empty());

  sync_after_prune(h);
  CHECK(h.ema.active);
  CHECK(bytes_equal(flat_values(h.ema.shadow), flat_values(h.net)));

  for (auto& a : h.ema.accum) std::fill(a.begin(), a.end(), 2.0);
  for (ParamArray* p : h.net.params()) std::fill(p->value.begin(), p->value.end(), 1.0f);
  ema_update(h);
  CHECK(std::abs(h.ema.accum[0][0] - 1.999) < 1e-12);

  // Fixed point.
  for (auto& a : h.ema.accum) std::fill(a.begin(), a.end(), 1.0);
  ema_update(h);
  CHECK(h.ema.accum[0][0] == 1.0);

  h.ema.accum.pop_back();
  CHECK_THROWS_AS(ema_update(h), ShapeError);
}

TEST_CASE("ema geometric convergence and linearity") {
  Rng rng(4);
  for (double alpha : {0.9, 0.99, 0.999}) {
    DecoderHead h = tiny_head(rng);
    sync_after_prune(h);
    h.ema.decay = alpha;
    std::uniform_real_distribution<double> u(-2, 2);
    std::vector<std::vector<double>> start;
    for (auto& a : h.ema.accum) {
      for (auto& v : a) v = u(rng);
      start.push_back(a);
    }
    const auto target = flat_values(h.net);
    const int n = 200;
    for (int k = 0; k < n; ++k) ema_update(h);
    double worst = 0;
    std::size_t idx = 0;
    for (std::size_t i = 0; i < start.size(); ++i)
      for (std::size_t j = 0; j < start[i].size(); ++j, ++idx) {
        const double expect = std::pow(alpha, n) * std::abs(start[i][j] - target[idx]);
        worst = std::max(worst, std::abs(std::abs(h.ema.accum[i][j] - target[idx]) - expect));
      }
    CHECK(worst < 1e-9);
  }

  // Scaling both the shadow and the parameters scales the result.
  DecoderHead a = tiny_head(rng), b = a;
  sync_after_prune(a);
  for (auto& v : a.ema.accum)
    for (auto& x : v) x = 0.25;
  b = a;
  for (ParamArray* p : b.net.params())
    for (auto& x : p->value) x *= 2.f;
  for (auto& v : b.ema.accum)
    for (auto& x : v) x *= 2.0;
  ema_update(a);
  ema_update(b);
  for (std::size_t i = 0; i < a.ema.accum.size(); ++i)
    for (std::size_t j = 0; j < a.ema.accum[i].size(); ++j) CHECK(b.ema.accum[i][j] == 2.0 * a.ema.accum[i][j]);
}

TEST_CASE("ema respects the prune mask") {
  Rng rng(5);
  DecoderHead h = tiny_head(rng);
  h.prune_state = PruneState::pruning;
  CHECK_THROWS_AS(sync_after_prune(h), InvalidArgument);
  h.mask = global_l1_mask(h, 0.5);
  h.apply_mask();
  h.prune_state = PruneState::pruned;
  sync_after_prune(h);
  CHECK(bytes_equal(flat_values(h.ema.shadow), flat_values(h.net)));
  std::normal_distribution<float> nd(0, 1);
  for (int k = 0; k < 100; ++k) {
    for (ParamArray* p : h.net.params())
      for (auto& v : p->value) v = nd(rng);
    ema_update(h);
  }
  const ConstParamRefs sp = std::as_const(h.ema.shadow).params();
  std::size_t masked = 0;
  for (std::size_t i = 0; i < sp.size(); ++i)
    for (std::size_t j = 0; j < sp[i]->size(); ++j)
      if (!h.mask.keep[i][j]) {
        ++masked;
        CHECK(sp[i]->value[j] == 0.f);
        CHECK(h.ema.accum[i][j] == 0.0);
      }
  CHECK(masked > 0);
}

TEST_CASE("prune schedule") {
  const auto s = default_schedule();
  REQUIRE(s.rates.size() == 12);
  CHECK(s.rates.front() == 0.80);
  CHECK(s.rates.back() == 0.997);
  CHECK_NOTHROW(s.validate());
  CHECK_NOTHROW((PruneSchedule{{0.5, 0.9}}).validate());
  CHECK_THROWS_AS((PruneSchedule{{0.9, 0.5}}).validate(), InvalidArgument);
  CHECK_THROWS_AS((PruneSchedule{{0.5, 1.0}}).validate(), InvalidArgument);
}

TEST_CASE("global L1 mask examples") {
  auto a = arrays({{"w", {1, -2, 3, -4}}});
  auto m = l1_mask(a.refs(), {}, 0.5);
  CHECK(m.keep[0] == std::vector<std::uint8_t>{0, 0, 1, 1});

  auto t = arrays({{"w", {1, 1, 1, 1}}});
  m = l1_mask(t.refs(), {}, 0.5);
  CHECK(m.keep[0] == std::vector<std::uint8_t>{0, 0, 1, 1});

  auto g = arrays({{"b", {5, 5}}, {"a", {0.1f, 0.1f}}});
  m = l1_mask(g.refs(), {}, 0.5);
  CHECK(m.keep[0] == std::vector<std::uint8_t>{1, 1});
  CHECK(m.keep[1] == std::vector<std::uint8_t>{0, 0});

  CHECK_THROWS_AS(l1_mask(a.refs(), {}, 0.0), InvalidArgument);
  CHECK_THROWS_AS(l1_mask(a.refs(), {}, 1.0), InvalidArgument);
}

TEST_CASE("global L1 mask properties on a decoder") {
  Rng rng(6);
  const DecoderHead h = tiny_head(rng);
  const ConstParamRefs ps = h.net.params();
  for (double rate : default_schedule().rates) {
    const PruneMask m = global_l1_mask(h, rate);
    const auto [n, dropped] = prunable_counts(ps, m);
    CHECK(std::abs(static_cast<double>(dropped) - rate * n) <= 1.0);
    float max_dropped = 0, min_kept = 1e30f;
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (!ps[i]->prunable) {
        CHECK(std::count(m.keep[i].begin(), m.keep[i].end(), 0) == 0);
        continue;
      }
      for (std::size_t j = 0; j < ps[i]->size(); ++j) {
        const float v = std::abs(ps[i]->value[j]);
        if (m.keep[i][j]) min_kept = std::min(min_kept, v);
        else max_dropped = std::max(max_dropped, v);
      }
    }
    CHECK(max_dropped <= min_kept);
  }
}

TEST_CASE("minibatch ramp") {
  CHECK(minibatch_ramp(0.0, 256) == 256);
  CHECK(minibatch_ramp(1.0, 256) == 512);
  CHECK(minibatch_ramp(0.5, 256) == 384);
  CHECK(minibatch_ramp(0.5, 8, 16) == 12);
  CHECK_THROWS_AS(minibatch_ramp(1.5, 256), InvalidArgument);
}

TEST_CASE("lth stops at the last surviving rate and rewinds exactly") {
  Rng rng(7);
  DecoderHead h = tiny_head(rng);
  std::vector<int> ramp;
  LthHooks hooks;
  hooks.items = 8;
  hooks.train = [&](DecoderHead& head, int, int iters) {
    ramp.push_back(iters);
    for (ParamArray* p : head.net.params())
      for (auto& v : p->value) v *= 1.01f;
    head.apply_mask();
  };
  // The task survives up to 92 % sparsity.
  hooks.validate = [](const DecoderHead& head) { return sparsity(head) <= 0.9201 ? 0.95 : 0.5; };
  LthConfig cfg;
  cfg.recovery_epochs = 0;

  std::vector<float> at_092;
  PruneMask mask_092;
  auto probe = hooks.train;
  hooks.train = [&](DecoderHead& head, int e, int it) {
    probe(head, e, it);
    if (std::abs(sparsity(head) - 0.92) < 1e-3) {
      at_092 = flat_values(head.net);
      mask_092 = head.mask;
    }
  };
  const PruneRecord rec = lth_prune(h, hooks, cfg);
  CHECK(rec.final_rate == 0.92);
  REQUIRE(rec.rewound_to.has_value());
  CHECK(*rec.rewound_to == 0.92);
  CHECK(rec.attempted_rate == 0.93);
  CHECK_FALSE(rec.accepted);
  CHECK(rec.rewind_verified);
  REQUIRE(rec.stages.size() == 5);
  for (int i = 0; i < 4; ++i) CHECK(rec.stages[i].accepted);
  CHECK_FALSE(rec.stages[4].accepted);
  CHECK(bytes_equal(flat_values(h.net), at_092));
  CHECK(h.mask == mask_092);
  CHECK(h.prune_state == PruneState::pruned);
  for (const auto& st : rec.stages) CHECK(std::abs(static_cast<double>(st.pruned) - static_cast<double>(st.target)) <= 1);
  CHECK(ramp.front() == minibatch_ramp(0.80, 8, 16));

  const auto back = PruneRecord::from_json(nlohmann::json::parse(rec.to_json().dump()));
  CHECK(back.to_json() == rec.to_json());
}

TEST_CASE("lth accepts the full schedule when nothing degrades") {
  Rng rng(8);
  DecoderHead h = tiny_head(rng);
  LthHooks hooks;
  hooks.items = 4;
  hooks.train = [](DecoderHead&, int, int) {};
  hooks.validate = [](const DecoderHead&) { return 0.9; };
  const PruneRecord rec = lth_prune(h, hooks, LthConfig{});
  CHECK(rec.final_rate == 0.997);
  CHECK_FALSE(rec.rewound_to.has_value());
  CHECK(rec.stages.size() == 12);
  CHECK(std::abs(sparsity(h) - 0.997) < 1.0 / rec.prunable + 1e-12);
}

TEST_CASE("training reduces the loss, keeps masked entries at zero and logs the warm-up") {
  std::mt19937_64 gen(9);
  const Dims3 d{8, 8, 8};
  std::vector<Sample> samples;
  for (int i = 0; i < 3; ++i) samples.push_back(blob_sample(d, i, gen));
  Rng rng(10);
  Encoder enc(tiny_encoder(), rng);
  freeze_encoder(enc);
  DecoderHead h = tiny_head(rng, "blob", 4);
  const auto enc_before = flat_values(h.net);
  std::vector<DecoderHead> none;
  const auto items = make_items(enc, none, h, samples);
  TrainConfig cfg;
  cfg.epochs = 20;
  cfg.seed = 3;
  const auto log = train_decoder(h, items, cfg);
  REQUIRE(log.rows.size() == 25);
  for (int e = 0; e < 5; ++e) CHECK(log.rows[e].lr == 1e-3);
  CHECK(log.rows[5].lr == 1e-2);
  CHECK(log.rows.back().loss < log.rows.front().loss);
  CHECK(validation_dsc(h, items) > 0.8);
  CHECK_FALSE(bytes_equal(flat_values(h.net), enc_before));

  h.mask = global_l1_mask(h, 0.8);
  h.apply_mask();
  retrain_decoder(h, items, cfg, 3, 1e-2, 0, 100);
  const ConstParamRefs ps = std::as_const(h.net).params();
  for (std::size_t i = 0; i < ps.size(); ++i)
    for (std::size_t j = 0; j < ps[i]->size(); ++j)
      if (!h.mask.keep[i][j]) CHECK(ps[i]->value[j] == 0.f);

  // Continual update at a small rate keeps the mask and moves the shadow.
  h.prune_state = PruneState::pruned;
  sync_after_prune(h);
  const PruneMask before = h.mask;
  ContinualConfig cc;
  cc.epochs = 2;
  cc.train = cfg;
  continual_update(h, items, items, cc);
  CHECK(h.mask == before);
  CHECK_FALSE(bytes_equal(flat_values(h.ema.shadow), flat_values(h.net)));

  Encoder frozen_copy = enc;
  CHECK_THROWS_AS(frozen_copy.trainable_params(), FrozenError);

  HeadSpec other{"other", {7}, {}, false, false, 4};
  DecoderHead wrong = make_head(other, tiny_encoder(), {}, rng);
  CHECK_THROWS_AS(train_decoder(wrong, items, cfg), InvalidArgument);
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  Rng rng(11);
  Model m;
  m.encoder = Encoder(tiny_encoder(), rng);
  freeze_encoder(m.encoder);
  m.heads.push_back(tiny_head(rng, "organ"));
  HeadSpec gtv{"lesion", {6}, {"organ"}, true, true, 2};
  m.heads.push_back(make_head(gtv, tiny_encoder(), m.heads, rng));
  DecoderHead& h = m.heads[0];
  h.mask = global_l1_mask(h, 0.9);
  h.apply_mask();
  h.prune_state = PruneState::pruned;
  sync_after_prune(h);
  for (int k = 0; k < 3; ++k) {
    for (ParamArray* p : h.net.params())
      for (auto& v : p->value) v *= 1.1f;
    h.apply_mask();
    ema_update(h);
  }
  h.ema.mask = global_l1_mask(h, 0.95);
  m.bounds["organ"] = {0.1, 0.6, 0.05, 0.2, 0.5};

  const auto dir = std::filesystem::temp_directory_path() / "contseg_test_ckpt";
  std::filesystem::remove_all(dir);
  save_checkpoint(dir, m);
  const Model back = load_checkpoint(dir);
  CHECK(back.encoder.frozen());
  REQUIRE(back.heads.size() == 2);
  const auto ea = m.encoder.params(), eb = back.encoder.params();
  for (std::size_t i = 0; i < ea.size(); ++i) CHECK(ea[i]->value == eb[i]->value);
  for (std::size_t k = 0; k < 2; ++k) {
    CHECK(bytes_equal(flat_values(back.heads[k].net), flat_values(m.heads[k].net)));
    CHECK(back.heads[k].mask == m.heads[k].mask);
    CHECK(back.heads[k].fls_sources == m.heads[k].fls_sources);
    CHECK(back.heads[k].prune_state == m.heads[k].prune_state);
  }
  CHECK(back.heads[0].ema.accum == h.ema.accum);
  CHECK(back.heads[0].ema.mask == h.ema.mask);
  CHECK(bytes_equal(flat_values(back.heads[0].ema.shadow), flat_values(h.ema.shadow)));
  CHECK(back.bounds.at("organ").upper == 0.6);
  CHECK(back.heads[1].net.config().aux_bpr);

  const std::vector<std::uint8_t> bits{1, 0, 1, 1, 0, 0, 0, 0, 1};
  const auto packed = pack_bits(bits);
  CHECK(packed.size() == 2);
  CHECK(packed[0] == 0b00001101);
  CHECK(unpack_bits(packed, bits.size()) == bits);
}
