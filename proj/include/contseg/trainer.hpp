// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

// Decoder training on a frozen encoder. Encoder pyramids (and FLS source
// features, whose heads are fixed) are computed once per sample and reused
// across epochs.

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "contseg/arch.hpp"
#include "contseg/losses.hpp"
#include "contseg/synthdata.hpp"

namespace contseg {

struct Item {
  std::string case_id;
  FeaturePyramid enc;
  std::vector<FeaturePyramid> fls;       // one per FLS source of the head being trained
  std::vector<LabelMap> labels;          // class ids, one per decoding stage (stage 0 = full resolution)
  std::vector<double> slice_scores;
};

/// Channel softmax in double precision.
losses::Field softmax_field(const Tensor4& logits);
/// scale * f, narrowed to float.
Tensor4 to_float(const losses::Field& f, double scale = 1.0);

/// Nearest-neighbour label subsampling matching the stride-2 pyramid.
std::vector<LabelMap> label_pyramid(const LabelMap& labels, int n_stages);

/// Features of every head needed (transitively) by `consumer`'s FLS sources, in source order.
std::vector<FeaturePyramid> source_features(std::span<const DecoderHead> heads, const DecoderHead& consumer,
                                            const FeaturePyramid& enc);

/// Encodes samples once for training `head` (whose sources must be in `heads`).
std::vector<Item> make_items(const Encoder& encoder, std::span<const DecoderHead> heads, const DecoderHead& head,
                             std::span<const Sample> samples);

struct TrainConfig {
  int warmup_epochs = 5;
  double warmup_lr = 1e-3;
  int epochs = 60;
  double lr = 1e-2;
  double momentum = 0.9;
  double poly_exponent = 0.9;
  int iterations_per_epoch = 0;  // 0 = one pass over the items
  bool deep_supervision = true;
  double aux_weight = 0.1;
  std::uint64_t seed = 0;
};

struct LogRow {
  int epoch = 0;
  double loss = 0;
  double lr = 0;
  double wall_seconds = 0;
};

struct TrainLog {
  std::vector<LogRow> rows;
  void append(const TrainLog& other);
  std::string csv() const;
};

struct StepLoss {
  double value = 0;
  DecoderNet::Grads grads;
};

using LossFn = std::function<StepLoss(const DecoderNet::Output& out, std::size_t item)>;

struct EpochPlan {
  int epochs = 1;
  double lr = 1e-2;
  bool poly = true;
  double poly_exponent = 0.9;
  double momentum = 0.9;
  int iterations_per_epoch = 0;
  int epoch_offset = 0;  // for log numbering
};

/// Runs SGD epochs over items. Masked entries are held at zero; an active EMA
/// shadow is updated after every step.
TrainLog run_epochs(DecoderNet& net, std::span<const Item> items, const LossFn& loss, const EpochPlan& plan, Rng& rng,
                    const PruneMask* mask = nullptr, EmaState* ema = nullptr);

/// Deep-supervised CE + Dice against the head's classes, plus the optional axial-score term.
LossFn segmentation_loss(const DecoderHead& head, std::span<const Item> items, const TrainConfig& cfg);

/// Warm-up then main phase with poly decay. Throws InvalidArgument when no item shows a head class.
TrainLog train_decoder(DecoderHead& head, std::span<const Item> items, const TrainConfig& cfg);

/// Trains for `epochs` at `lr` with poly decay, no warm-up (pruning retrain and recovery).
TrainLog retrain_decoder(DecoderHead& head, std::span<const Item> items, const TrainConfig& cfg, int epochs,
                         double lr, int iterations_per_epoch, int epoch_offset);

/// Per-case mean (over the head's classes) DSC of the argmax prediction; uses `net`.
std::vector<double> case_dsc(const DecoderHead& head, const DecoderNet& net, std::span<const Item> items);

/// Mean of per-case DSC inside [P5, P95], evaluated on the live parameters.
double validation_dsc(const DecoderHead& head, std::span<const Item> items);

/// Softmax posterior of the full-resolution logits.
Tensor4 head_posterior(const DecoderNet& net, const Item& item);

}  // namespace contseg
