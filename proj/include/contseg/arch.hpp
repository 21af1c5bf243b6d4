// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "contseg/nn.hpp"
#include "contseg/tensor.hpp"

namespace contseg {

/// Features at stage s are min(base_features * 2^s, feature_cap).
struct EncoderConfig {
  int n_blocks = 4;
  int base_features = 8;
  int feature_cap = 64;
  int convs_per_block = 2;
  int in_channels = 1;

  std::vector<int> stage_channels() const;
  void validate() const;
  /// 6 blocks, 32 base features capped at 320, two convolutions per block.
  static EncoderConfig paper_scale();
};

class Encoder {
 public:
  struct Cache {
    std::vector<std::vector<ConvBlock::Cache>> blocks;
  };

  Encoder() = default;
  Encoder(const EncoderConfig& cfg, Rng& rng);

  /// One feature map per stage; stage s has spatial extent ceil(input / 2^s).
  FeaturePyramid forward(const Tensor4& x, Cache* cache) const;

  /// Accumulates parameter gradients from per-stage output gradients (empty = zero).
  void backward(const Cache& cache, FeaturePyramid stage_grads);

  const EncoderConfig& config() const { return cfg_; }
  int embedding_dim() const { return cfg_.stage_channels().back(); }

  bool frozen() const { return frozen_; }
  void set_frozen(bool f) { frozen_ = f; }

  /// Parameters an optimizer may update. Throws FrozenError on a frozen encoder.
  ParamRefs trainable_params();
  /// Every parameter regardless of the frozen flag; for checkpoint restore only.
  ParamRefs storage_params();
  ConstParamRefs params() const;

 private:
  EncoderConfig cfg_;
  std::vector<std::vector<ConvBlock>> stages_;
  bool frozen_ = false;
};

struct DecoderConfig {
  std::vector<int> enc_channels;  // one per encoder stage
  std::vector<int> dec_channels;  // one per decoding stage, 0 = full resolution
  int out_channels = 2;           // foreground classes + background
  std::vector<std::vector<int>> fls_channels;  // [source][decoding stage]
  bool aux_bpr = false;

  int n_stages() const { return static_cast<int>(dec_channels.size()); }
  /// Decoder widths min(decoder_base * 2^s, cap) over n_blocks - 1 stages.
  static DecoderConfig make(const EncoderConfig& enc, int n_foreground, int decoder_base);
};

class DecoderNet {
 public:
  struct StageCache {
    Tensor4 prev;
    std::vector<Tensor4> fls_in;
    ConvBlock::Cache c1;
    ConvBlock::Cache c2;
  };
  struct Cache {
    std::vector<StageCache> stages;
  };
  struct Output {
    std::vector<Tensor4> logits;  // deep-supervision logits per stage
    FeaturePyramid features;      // block outputs per stage
    Tensor4 aux;                  // per-voxel axial score, when enabled
  };
  struct Grads {
    std::vector<Tensor4> logits;
    FeaturePyramid features;
    Tensor4 aux;
  };

  DecoderNet() = default;
  DecoderNet(const std::string& prefix, const DecoderConfig& cfg, Rng& rng);

  Output forward(const FeaturePyramid& enc, std::span<const FeaturePyramid* const> fls, Cache* cache) const;

  /// Accumulates parameter gradients. Returns encoder-stage gradients when requested.
  FeaturePyramid backward(const Cache& cache, const Grads& grads, bool need_encoder_grad);

  ParamRefs params();
  ConstParamRefs params() const;
  const DecoderConfig& config() const { return cfg_; }

  struct Stage {
    ConvTranspose2 up;
    std::vector<Conv3d> fls_proj;
    ConvBlock c1;
    ConvBlock c2;
    Conv3d seg;
  };
  std::vector<Stage>& stages() { return stages_; }
  const std::vector<Stage>& stages() const { return stages_; }

 private:
  DecoderConfig cfg_;
  std::vector<Stage> stages_;
  std::optional<Conv3d> aux_;
};

/// keep[i][j] == 1 retains entry j of parameter array i (aligned with DecoderNet::params()).
struct PruneMask {
  std::vector<std::vector<std::uint8_t>> keep;

  bool empty() const { return keep.empty(); }
  std::size_t total() const;
  std::size_t kept() const;
  static PruneMask all_kept(const ConstParamRefs& params);
  bool operator==(const PruneMask&) const = default;
};

enum class PruneState { unpruned, pruning, pruned };

/// Shadow decoder maintained by exponential moving average. The running
/// average lives in `accum` (double, aligned with DecoderNet::params());
/// `shadow` holds its float32 image used for inference.
struct EmaState {
  double decay = 0.999;
  bool active = false;
  DecoderNet shadow;
  std::vector<std::vector<double>> accum;
  PruneMask mask;  // refreshed shadow-only mask; empty = head mask
};

struct DecoderHead {
  std::string head_id;
  std::vector<int> class_ids;  // foreground class of channel i + 1
  DecoderNet net;
  PruneMask mask;
  PruneState prune_state = PruneState::unpruned;
  EmaState ema;
  std::vector<std::string> fls_sources;
  bool is_gtv = false;

  /// Channel of a class id, or -1. Background is channel 0.
  int channel_of(int class_id) const;
  int n_channels() const { return static_cast<int>(class_ids.size()) + 1; }
  /// Inference loads the EMA shadow once it is active.
  const DecoderNet& inference_net() const { return ema.active ? ema.shadow : net; }
  /// Zeroes masked entries of the live parameters (and the shadow when active).
  void apply_mask();
};

struct HeadSpec {
  std::string head_id;
  std::vector<int> class_ids;
  std::vector<std::string> fls_sources;
  bool is_gtv = false;
  bool aux_bpr = false;
  int decoder_base = 0;  // 0 = follow the encoder's base width
};

/// Builds a head; FLS source heads must already exist in `existing`.
DecoderHead make_head(const HeadSpec& spec, const EncoderConfig& enc, std::span<const DecoderHead> existing, Rng& rng);

/// Evaluation order with every FLS source before its consumers.
/// Throws InvalidArgument on unknown sources or dependency cycles.
std::vector<std::size_t> fls_order(std::span<const DecoderHead> heads);

/// Maps HU to network input: clip to [-1024, 1024] then scale by 1/1024.
Tensor4 normalize_image(const Image& image);

struct HeadOutput {
  Tensor4 posteriors;  // classes x D x H x W, softmax over channels
  FeaturePyramid features;
  Tensor4 aux;
};

/// Evaluates every head on one image, sources first. Heads use their inference weights.
std::map<std::string, HeadOutput> forward_heads(const Encoder& encoder, std::span<const DecoderHead> heads,
                                                 const Image& image);

/// Posteriors only, keyed by head id.
std::map<std::string, Tensor4> forward(const Encoder& encoder, std::span<const DecoderHead> heads, const Image& image);

/// Sets the frozen flag; idempotent.
Encoder& freeze_encoder(Encoder& encoder);

/// Encoder parameters plus decoder parameters; sparse counts only unmasked decoder entries.
std::size_t count_params(const Encoder& encoder, std::span<const DecoderHead> heads, bool sparse);

/// Decoder-only counts (dense, sparse).
std::pair<std::size_t, std::size_t> decoder_param_counts(std::span<const DecoderHead> heads);

}  // namespace contseg
