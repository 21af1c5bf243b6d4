// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

// Partial-label and continual training runs, the three baseline learners and
// per-step evaluation snapshots.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "contseg/arch.hpp"
#include "contseg/checkpoint.hpp"
#include "contseg/ema.hpp"
#include "contseg/lth.hpp"
#include "contseg/merge.hpp"
#include "contseg/metrics.hpp"
#include "contseg/synthdata.hpp"
#include "contseg/trainer.hpp"

namespace contseg {

/// Every dataset of a registry with its generated (or loaded) cases.
struct Corpus {
  TaskRegistry registry;
  std::map<std::string, std::vector<Sample>> samples;

  static Corpus generate(const TaskRegistry& registry);
  std::vector<Sample> split(const std::string& dataset_id, Split s) const;
  /// Split cases of every dataset whose class set contains `class_id`.
  std::vector<Sample> with_class(int class_id, Split s) const;
  /// The fixed probe volume: first test case of the first dataset.
  const Sample& probe() const;
};

enum class StrategyKind { clnet, naive, mib, plop };
std::string to_string(StrategyKind k);
StrategyKind strategy_from_string(const std::string& s);

struct BaselineConfig {
  double lr = 0.005;
  int epochs = 50;
  int iterations_per_epoch = 25;
  double momentum = 0.9;
  double poly_exponent = 0.9;
  double unkd_weight = 10.0;
  double pod_factor = 0.001;
  double pseudo_threshold = 0.5;
  bool deep_supervision = true;

  void validate() const;
};

struct LearnerStrategy {
  StrategyKind kind = StrategyKind::clnet;
  BaselineConfig baseline;

  void validate() const;
};

struct EngineConfig {
  int decoder_base = 4;
  bool aux_bpr = false;
  bool fls = true;
  bool prune = true;
  TrainConfig train;
  LthConfig lth;
  ContinualConfig continual;
  std::uint64_t seed = 0;
};

/// Per-class posterior bytes of the probe volume (channel of the class in its head).
using ProbePosteriors = std::map<int, std::vector<float>>;

struct StepResult {
  StepSnapshot snapshot;
  std::vector<PruneRecord> prune_records;
  std::map<std::string, double> val_dsc;  // per trained head, on inference weights
  TrainLog log;
  ProbePosteriors probe;
};

/// Called after each step with the model as it stands.
using StepCallback = std::function<void(const StepResult&, const Model&)>;

struct ContinualResult {
  Model model;
  std::vector<StepResult> steps;
};

struct PartialLabelResult {
  Model model;
  StepResult result;
  /// Unpruned validation DSC of each lesion head with and without FLS input.
  std::map<std::string, std::pair<double, double>> fls_ablation;
};

/// Every registry anatomy gets its own head, trained on all cases labelling it.
PartialLabelResult run_partial_label(const Corpus& corpus, const Encoder& encoder, const EngineConfig& cfg,
                                     bool fls_ablation = false);

ContinualResult run_continual(const Corpus& corpus, const Encoder& encoder, const ContinualOrder& order,
                              const LearnerStrategy& strategy, const EngineConfig& cfg,
                              const StepCallback& on_step = {});

/// Lottery-ticket pruning of one unpruned head of a stored model, on every
/// case labelling the head's classes; the head is synced afterwards.
PruneRecord prune_head(Model& model, const std::string& head_id, const Corpus& corpus, const EngineConfig& cfg);

struct PredictionMaps {
  std::map<std::string, LabelMap> heads;  // class ids of each head's bounded argmax
  LabelMap merged;
};

/// Per-head and merged label maps for one volume. Empty slice scores disable
/// the body-part bounds.
PredictionMaps predict_volume(const Model& model, const Image& image, std::span<const double> slice_scores,
                              const MergeOptions& opts = {});

/// Per (dataset, class) scores on test cases. A class is scored from the head
/// that owns it: posterior bounded by the head's body-part range, then argmax.
std::vector<ClassScore> evaluate(const Model& model, const Corpus& corpus, const std::vector<std::string>& datasets);

StepSnapshot make_snapshot(const Model& model, const Corpus& corpus, int step,
                           const std::vector<std::string>& seen_datasets);

ProbePosteriors probe_posteriors(const Model& model, const Corpus& corpus);

/// FNV-1a over the bytes of a float buffer.
std::uint64_t fnv1a(const std::vector<float>& v);

/// Scores recorded slice-wise where the class is present in the samples.
std::vector<double> class_slice_scores(const std::vector<Sample>& samples, int class_id);

nlohmann::ordered_json to_json(const StepSnapshot& s);
StepSnapshot snapshot_from_json(const nlohmann::json& j);

/// Snapshot plus per-head bounds and probe digests, as written to snapshot.json.
nlohmann::ordered_json snapshot_document(const StepSnapshot& s, const Model& model, const ProbePosteriors& probe);

/// Rows (run, step, dataset, class, case, dsc, asd); doubles printed with %.9g.
std::string metrics_csv(const std::string& run, const std::vector<StepSnapshot>& snapshots, bool header = true);

/// step_<t>/{checkpoint/, snapshot.json, prune_records.json, train_log.csv}.
void write_step(const std::filesystem::path& run_dir, const StepResult& step, const Model& model);

}  // namespace contseg
