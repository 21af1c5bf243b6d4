// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <span>

#include "contseg/arch.hpp"
#include "contseg/trainer.hpp"

namespace contseg {

/// shadow <- a * shadow + (1 - a) * params on unmasked entries; masked entries
/// stay 0. A no-op while the state is inactive.
void ema_update(EmaState& state, const DecoderNet& params, const PruneMask& mask);
void ema_update(DecoderHead& head);

/// Copies the pruned parameters into the shadow and activates it.
/// Throws InvalidArgument while pruning is in progress.
void sync_after_prune(DecoderHead& head);

struct ContinualConfig {
  double lr = 1e-4;
  int epochs = 10;
  int iterations_per_epoch = 0;
  TrainConfig train;            // loss settings and seed
  bool refresh_mask = false;    // re-prune the shadow in small steps
  double refresh_step = 0.001;
  double delta = 0.01;
};

struct ContinualReport {
  TrainLog log;
  std::optional<double> refreshed_rate;  // shadow sparsity after a mask refresh
};

/// Fine-tunes the live parameters on new data with the shadow tracking them.
/// The prune mask is left as is unless refresh_mask is set, in which case only
/// the shadow's mask is refined (validated on `val`).
ContinualReport continual_update(DecoderHead& head, std::span<const Item> items, std::span<const Item> val,
                                 const ContinualConfig& cfg);

}  // namespace contseg
