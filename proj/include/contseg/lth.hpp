// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

// Iterative global magnitude pruning with retraining and rewind on failure.

#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "contseg/arch.hpp"
#include "json.hpp"

namespace contseg {

struct PruneSchedule {
  std::vector<double> rates;
  /// Strictly increasing, each rate in (0, 1).
  void validate() const;
};

/// 0.80 .. 0.92 by 0.04, 0.93 .. 0.99 by 0.02, 0.991 .. 0.997 by 0.002.
PruneSchedule default_schedule();

/// Global L1 mask over the prunable arrays: the round(rate * N) smallest |value|
/// entries are dropped. Entries already dropped by `previous` go first; ties
/// break by (array name, flat index). Non-prunable arrays are kept in full.
PruneMask l1_mask(const ConstParamRefs& params, const PruneMask& previous, double rate);
PruneMask global_l1_mask(const DecoderHead& head, double rate);

/// Number of prunable entries and number of them dropped by `mask`.
std::pair<std::size_t, std::size_t> prunable_counts(const ConstParamRefs& params, const PruneMask& mask);

struct PruneStage {
  double rate = 0;
  double val_dsc = 0;
  std::size_t pruned = 0;  // dropped prunable entries
  std::size_t target = 0;  // round(rate * prunable)
  bool accepted = false;
};

struct PruneRecord {
  std::string head_id;
  double attempted_rate = 0;  // last rate tried
  double val_dsc_before = 0;  // unpruned baseline
  double val_dsc_after = 0;   // after recovery
  bool accepted = false;      // last attempted stage accepted
  std::optional<double> rewound_to;
  double final_rate = 0;  // T
  double complement = 1;  // T' = 1 - T
  std::size_t prunable = 0;
  std::size_t dense_params = 0;
  std::size_t sparse_params = 0;
  bool rewind_verified = true;  // byte equality after a rewind
  std::vector<PruneStage> stages;

  nlohmann::ordered_json to_json() const;
  static PruneRecord from_json(const nlohmann::json& j);
};

struct LthConfig {
  PruneSchedule schedule = default_schedule();
  double delta = 0.01;
  int retrain_epochs = 10;
  int recovery_epochs = 20;
  int base_iterations = 0;   // per epoch; 0 = one pass over the data
  int max_iterations = 0;    // ramp ceiling; 0 = twice the base
  bool per_stage_baseline = false;
};

struct LthHooks {
  /// Train the head for the given number of epochs and iterations per epoch.
  std::function<void(DecoderHead&, int epochs, int iterations)> train;
  /// Percentile-restricted validation DSC of the live parameters.
  std::function<double(const DecoderHead&)> validate;
  int items = 0;  // training set size, for the iteration ramp
};

/// Prunes through the schedule until a stage drops validation DSC by more than
/// delta, rewinds that stage, then runs the recovery epochs.
PruneRecord lth_prune(DecoderHead& head, const LthHooks& hooks, const LthConfig& cfg);

/// base + rate * (cap - base), rounded to nearest.
int minibatch_ramp(double rate, int base, int cap = 512);

}  // namespace contseg
