// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

// Training objectives over per-voxel probability fields (channels x D x H x W,
// double precision). Each returns the value and dL/dq with the input's shape.

#pragma once

#include <span>
#include <vector>

#include "contseg/tensor.hpp"

namespace contseg::losses {

using Field = BasicTensor4<double>;

inline constexpr double kProbFloor = 1e-12;
inline constexpr double kDiceEps = 1e-5;

struct Result {
  double value = 0;
  Field grad;
};

Field to_field(const Tensor4& t);

/// Mean cross-entropy plus (1 - mean soft Dice over channels 1..K).
/// `labels` holds a channel index per voxel.
Result ce_dice(const Field& q, std::span<const int> labels);

/// Mean cross-entropy only.
Result ce(const Field& q, std::span<const int> labels);

/// Old classes Y^{t-1} (containing the background), current classes C^t, and the
/// class id carried by each channel of the model.
struct ClassContext {
  int background = 0;
  std::vector<int> old_classes;
  std::vector<int> current_classes;
  std::vector<int> channel_classes;
  /// false: overlap = (Y^{t-1} n C^t) \ {b}; true: the (Y^{t-1} u C^t) \ {b} reading.
  bool union_overlap = false;

  std::vector<int> overlap() const;
  /// Channels of Y^{t-1} \ C^t_p.
  std::vector<int> retained_old_channels() const;
  int channel_of(int class_id) const;
  void validate() const;
};

/// Unbiased cross-entropy: a background label scores the summed probability of
/// Y^{t-1} \ C^t_p. `labels` holds class ids.
Result unce(const Field& q, std::span<const int> labels, const ClassContext& ctx);

/// Unbiased distillation over c in Y^{t-1} \ C^t_p with the background of the
/// current model absorbing every class of C^t. `q_old` covers the old model's
/// channels, whose class ids are `old_channel_classes`.
Result unkd(const Field& q, const Field& q_old, std::span<const int> old_channel_classes, const ClassContext& ctx);

enum class PodPooling {
  single_axis,  // three 2D projections, (WD + HD + HW) rows
  two_axis,     // three 1D projections, (H + W + D) rows
};

/// Pooled descriptor, row-major (rows x C).
struct Pooled {
  int rows = 0;
  int channels = 0;
  std::vector<double> v;
};

Pooled pod3d_pool(const Field& x, PodPooling mode = PodPooling::single_axis);

/// factor x mean over stages of the squared L2 distance between pooled
/// descriptors. Gradients are with respect to `pyr_new`.
struct PodResult {
  double value = 0;
  std::vector<Field> grad;
};
PodResult pod3d_loss(const std::vector<Field>& pyr_new, const std::vector<Field>& pyr_old, double factor,
                     PodPooling mode = PodPooling::single_axis);

/// -<p,z>/(|p||z|); gradient with respect to p only (z is a constant).
struct VecResult {
  double value = 0;
  std::vector<double> grad;
};
VecResult neg_cos(std::span<const double> p, std::span<const double> z);

/// Chains dL/dq through a channel softmax: dL/dz = q * (g - sum_k q_k g_k).
Field softmax_backward(const Field& q, const Field& grad_q);

/// Per-stage weights halving with depth, normalised to sum to one.
std::vector<double> deep_supervision_weights(int n_stages);

}  // namespace contseg::losses
