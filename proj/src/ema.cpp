// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

#include "contseg/ema.hpp"

#include "contseg/error.hpp"
#include "contseg/lth.hpp"
#include "contseg/metrics.hpp"

namespace contseg {

namespace {

void refresh_shadow(EmaState& state) {
  ParamRefs ps = state.shadow.params();
  for (std::size_t i = 0; i < ps.size(); ++i)
    for (std::size_t j = 0; j < ps[i]->size(); ++j) ps[i]->value[j] = static_cast<float>(state.accum[i][j]);
}

}  // namespace

void ema_update(EmaState& state, const DecoderNet& params, const PruneMask& mask) {
  if (!state.active) return;
  const ConstParamRefs src = params.params();
  if (src.size() != state.accum.size()) throw ShapeError("EMA shadow does not match the parameter list");
  const PruneMask& m = state.mask.empty() ? mask : state.mask;
  const double a = state.decay;
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto& acc = state.accum[i];
    if (acc.size() != src[i]->size()) throw ShapeError("EMA shadow shape mismatch: " + src[i]->name);
    const bool masked = !m.empty();
    for (std::size_t j = 0; j < acc.size(); ++j) {
      if (masked && !m.keep[i][j]) {
        acc[j] = 0.0;
        continue;
      }
      acc[j] = a * acc[j] + (1.0 - a) * static_cast<double>(src[i]->value[j]);
    }
  }
  refresh_shadow(state);
}

void ema_update(DecoderHead& head) { ema_update(head.ema, head.net, head.mask); }

void sync_after_prune(DecoderHead& head) {
  if (head.prune_state == PruneState::pruning) throw InvalidArgument("sync_after_prune called while pruning");
  head.ema.shadow = head.net;
  head.ema.accum.clear();
  for (const ParamArray* p : std::as_const(head.net).params())
    head.ema.accum.emplace_back(p->value.begin(), p->value.end());
  head.ema.mask = PruneMask{};
  head.ema.active = true;
}

ContinualReport continual_update(DecoderHead& head, std::span<const Item> items, std::span<const Item> val,
                                 const ContinualConfig& cfg) {
  if (cfg.refresh_mask && head.prune_state != PruneState::pruned)
    throw InvalidArgument("mask refresh requires a pruned head");
  if (!head.ema.active) sync_after_prune(head);
  ContinualReport rep;
  Rng rng(cfg.train.seed ^ 0x9e3779b97f4a7c15ULL);
  EpochPlan plan;
  plan.epochs = cfg.epochs;
  plan.lr = cfg.lr;
  plan.poly = false;
  plan.momentum = cfg.train.momentum;
  plan.iterations_per_epoch = cfg.iterations_per_epoch;
  rep.log = run_epochs(head.net, items, segmentation_loss(head, items, cfg.train), plan, rng, &head.mask, &head.ema);

  if (cfg.refresh_mask) {
    if (val.empty()) throw InvalidArgument("mask refresh needs validation items");
    auto shadow_dsc = [&](const DecoderHead& h) { return percentile_mean(case_dsc(h, h.ema.shadow, val)); };
    const double baseline = shadow_dsc(head);
    const std::size_t total = PruneMask::all_kept(std::as_const(head.net).params()).total();
    double rate = 1.0 - static_cast<double>(head.mask.kept()) / static_cast<double>(total);
    PruneMask accepted = head.ema.mask;
    std::vector<std::vector<double>> accepted_acc = head.ema.accum;
    while (rate + cfg.refresh_step < 1.0) {
      const double next = rate + cfg.refresh_step;
      head.ema.mask = l1_mask(std::as_const(head.ema.shadow).params(),
                              head.ema.mask.empty() ? head.mask : head.ema.mask, next);
      head.apply_mask();
      if (baseline - shadow_dsc(head) > cfg.delta) {
        head.ema.mask = accepted;
        head.ema.accum = accepted_acc;
        refresh_shadow(head.ema);
        break;
      }
      accepted = head.ema.mask;
      accepted_acc = head.ema.accum;
      rate = next;
    }
    rep.refreshed_rate = rate;
  }
  return rep;
}

}  // namespace contseg
