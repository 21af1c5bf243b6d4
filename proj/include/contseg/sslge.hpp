// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

// General-encoder training: augmentation, SimSiam pretraining, supervised
// multi-decoder training and momentum-queue fine-tuning.

#pragma once

#include <deque>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "contseg/arch.hpp"
#include "contseg/synthdata.hpp"
#include "contseg/trainer.hpp"

namespace contseg {

using Range = std::pair<double, double>;

struct TriggerProbs {
  double spatial = 0.2;
  double noise = 0.1;
  double blur = 0.2;
  double intensity = 0.15;
  double lowres = 0.25;
  double gamma = 0.3;
  double mirror = 0.5;  // per axis
};

struct AugmentationScheme {
  Range rotation_range{-45.0, 45.0};  // degrees, in-plane
  Range scale_range{0.7, 1.4};        // in-plane
  Range noise_sigma_range{0.0, 0.1};  // normalized intensity units (x1024 HU)
  Range blur_sigma_range{0.5, 1.5};   // voxels
  Range intensity_scale_range{0.65, 1.5};
  Range lowres_axial_factor{2.0, 4.0};
  Range lowres_inplane_factor{2.0, 4.0};
  bool gamma_enabled = true;
  Range gamma_range{0.7, 1.5};
  double gamma_invert_prob = 0.1;
  std::vector<int> mirror_axes{1, 2};  // 1 = y, 2 = x; the axial axis is never mirrored
  TriggerProbs trigger;

  void validate() const;
  /// Every trigger probability zero.
  static AugmentationScheme identity();
};

/// One random view. Images are clipped to [-1024, 1024] HU; labels follow the
/// spatial transforms with nearest-neighbour sampling.
Sample augment_view(const Sample& sample, const AugmentationScheme& scheme, Rng& rng);

/// Global average pool of the deepest encoder stage.
std::vector<double> embed(const FeaturePyramid& features);

/// Gradient of the pooled embedding spread back over the deepest stage.
Tensor4 embed_backward(const FeaturePyramid& features, std::span<const double> grad);

/// Linear -> ReLU -> Linear with hidden width equal to the embedding width.
class Predictor {
 public:
  struct Cache {
    std::vector<double> x;
    std::vector<double> h;
  };

  Predictor() = default;
  Predictor(int dim, Rng& rng);

  std::vector<double> forward(std::span<const double> x, Cache* cache) const;
  /// Accumulates parameter gradients; returns dL/dx.
  std::vector<double> backward(const Cache& cache, std::span<const double> grad);

  ParamRefs params();
  int dim() const { return dim_; }

 private:
  int dim_ = 0;
  ParamArray w1_, b1_, w2_, b2_;
};

struct SimSiamLoss {
  double value = 0;
  std::vector<double> grad_p1, grad_p2;
  std::vector<double> grad_z1, grad_z2;  // identically zero: stop-gradient
};

/// 1/2 negcos(p1, z2) + 1/2 negcos(p2, z1).
SimSiamLoss simsiam_loss(std::span<const double> p1, std::span<const double> p2, std::span<const double> z1,
                         std::span<const double> z2);

struct SslConfig {
  int epochs = 200;
  int batches_per_epoch = 32;
  double lr = 1e-3;  // cosine-annealed
  double momentum = 0.9;
  AugmentationScheme augmentation;
  std::uint64_t seed = 0;
};

/// Trains the encoder (and predictor) in place. Throws on empty data.
TrainLog simsiam_pretrain(std::span<const Sample> data, Encoder& encoder, Predictor& predictor, const SslConfig& cfg);

struct GeConfig {
  int epochs = 30;
  double lr = 1e-2;
  double momentum = 0.9;
  double poly_exponent = 0.9;
  int iterations_per_epoch = 0;
  int decoder_base = 4;
  bool deep_supervision = true;
  std::uint64_t seed = 0;
};

struct GeResult {
  Encoder encoder;  // frozen
  std::vector<DecoderHead> heads;
  std::map<int, double> val_dsc;  // per class, percentile mean
  std::vector<std::string> warnings;
  TrainLog log;
};

/// Joint training of the encoder and one decoder per labelled class of the
/// comprehensive dataset. `encoder` is the starting point (random or pretrained).
GeResult train_ge_supervised(const Encoder& encoder, const TaskRegistry& registry,
                             const DatasetDescriptor& comprehensive, std::span<const Sample> train,
                             std::span<const Sample> val, const GeConfig& cfg);

/// FIFO ring of feature vectors.
class MomentumQueue {
 public:
  explicit MomentumQueue(std::size_t capacity = 1024);
  void push(std::vector<double> v);
  std::size_t size() const { return entries_.size(); }
  std::size_t capacity() const { return capacity_; }
  const std::deque<std::vector<double>>& entries() const { return entries_; }

 private:
  std::size_t capacity_;
  std::deque<std::vector<double>> entries_;
};

struct InfoNceResult {
  double value = 0;
  std::vector<double> grad_q;  // with respect to the raw (unnormalized) query
};

/// -log softmax over [q.k, q.n_1, ...] / tau with q, k, n_i L2-normalized and
/// the queue entries as negatives; k is a constant.
InfoNceResult info_nce(std::span<const double> q, std::span<const double> k, const MomentumQueue& queue, double tau);

struct FinetuneSet {
  std::string dataset_id;
  std::vector<int> classes;
  std::vector<Sample> samples;
};

struct FinetuneConfig {
  int epochs = 5;
  int iterations_per_epoch = 0;
  double lr = 1e-4;
  double momentum = 0.9;
  bool use_queue = true;
  double queue_weight = 0.1;
  double temperature = 0.07;
  int decoder_base = 4;
  bool ema_encoder = false;  // ablation: return an EMA of the encoder weights
  double ema_decay = 0.999;
  AugmentationScheme augmentation;
  std::uint64_t seed = 0;
};

struct FinetuneReport {
  TrainLog log;  // one row per epoch, datasets in sequence
  std::vector<std::uint64_t> decoder_init_digests;  // one per dataset
  std::vector<double> step_losses;
};

/// Sequential per-dataset fine-tuning with a fresh paired decoder per dataset.
/// Returns the updated (unfrozen) encoder.
Encoder momentum_finetune(const Encoder& encoder, const std::vector<FinetuneSet>& datasets, MomentumQueue& queue,
                          const FinetuneConfig& cfg, FinetuneReport* report = nullptr);

}  // namespace contseg
