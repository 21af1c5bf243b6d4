// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

// Body-part bounding of per-head posteriors and entropy-based merging into a
// single label map.

#pragma once

#include <optional>
#include <span>
#include <vector>

#include "contseg/tensor.hpp"

namespace contseg {

struct BprBounds {
  double lower = 0;
  double upper = 1;
  double sigma = 0;
  double p5 = 0;
  double p95 = 1;

  bool contains(double score) const { return score >= lower && score <= upper; }
};

/// U = min(z, P95 + 2 sigma), L = max(0, P5 - 2 sigma); needs >= 2 scores.
BprBounds decoder_bounds(std::span<const double> scores, double z_extent = 1.0);

/// Bounds covering the whole image.
BprBounds full_bounds();

/// B: 1 on axial slices whose score lies in [L, U].
Mask bound_mask(const Dims3& dims, const BprBounds& b, std::span<const double> slice_scores);

/// Zeroes foreground channels (1..K) on out-of-bound slices; channel 0 is left as is.
Tensor4 apply_bound(const Tensor4& posterior, const BprBounds& b, std::span<const double> slice_scores);

/// M = J - (J - B + E * B) / 2 with binary B and E.
Volume<float> gtv_weight_map(const Mask& bound, const Mask& gtv);

struct HeadPrediction {
  std::vector<int> class_ids;   // class of posterior channel i + 1
  Tensor4 posterior;            // bounded, K + 1 channels
  Mask bound;                   // B
  std::optional<Mask> gtv;      // binarized lesion prediction when this head hosts a lesion head
};

struct MergeOptions {
  bool binarize = true;   // raw mode evaluates H on the posterior itself
  double threshold = 0.5;
};

/// Per voxel, the class of the candidate with the smallest H = -(M Y) ln(M Y);
/// candidates are channels with nonzero (binarized) prediction. Ties go to the
/// higher raw posterior, then to the earlier head and channel.
LabelMap merge_predictions(const std::vector<HeadPrediction>& heads, const MergeOptions& opts = {});

/// Binarized foreground channel of a posterior.
Mask binarize_channel(const Tensor4& posterior, int channel, double threshold = 0.5);

}  // namespace contseg
