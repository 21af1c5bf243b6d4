// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

#include "contseg/merge.hpp"

#include <algorithm>
#include <cmath>

#include "contseg/error.hpp"
#include "contseg/metrics.hpp"

namespace contseg {

namespace {

double entropy_term(double v) { return v > 0 ? -v * std::log(v) : 0.0; }

void check_scores(int depth, std::span<const double> scores) {
  if (static_cast<int>(scores.size()) != depth) throw ShapeError("slice score count differs from axial extent");
}

}  // namespace

BprBounds decoder_bounds(std::span<const double> scores, double z_extent) {
  if (scores.size() < 2) throw InvalidArgument("decoder_bounds needs at least 2 scores");
  std::vector<double> v(scores.begin(), scores.end());
  BprBounds b;
  b.sigma = sample_std(v);
  b.p5 = percentile(v, 5);
  b.p95 = percentile(v, 95);
  b.upper = std::min(z_extent, b.p95 + 2 * b.sigma);
  b.lower = std::max(0.0, b.p5 - 2 * b.sigma);
  return b;
}

BprBounds full_bounds() { return {0.0, 1.0, 0.0, 0.0, 1.0}; }

Mask bound_mask(const Dims3& dims, const BprBounds& b, std::span<const double> slice_scores) {
  check_scores(dims.d, slice_scores);
  Mask m(dims);
  const std::size_t plane = static_cast<std::size_t>(dims.h) * dims.w;
  for (int z = 0; z < dims.d; ++z)
    if (b.contains(slice_scores[z])) std::fill_n(m.data.begin() + z * plane, plane, std::uint8_t{1});
  return m;
}

Tensor4 apply_bound(const Tensor4& posterior, const BprBounds& b, std::span<const double> slice_scores) {
  const Dims3 d = posterior.dims();
  check_scores(d.d, slice_scores);
  Tensor4 out = posterior;
  for (int c = 1; c < posterior.channels(); ++c)
    for (int z = 0; z < d.d; ++z) {
      if (b.contains(slice_scores[z])) continue;
      for (int y = 0; y < d.h; ++y)
        for (int x = 0; x < d.w; ++x) out.at(c, z, y, x) = 0.0f;
    }
  return out;
}

Volume<float> gtv_weight_map(const Mask& bound, const Mask& gtv) {
  if (!(bound.dims == gtv.dims)) throw ShapeError("bound and lesion masks differ in extent");
  Volume<float> m(bound.dims);
  for (std::size_t i = 0; i < m.data.size(); ++i) {
    const float b = bound.data[i] ? 1.0f : 0.0f;
    const float e = gtv.data[i] ? 1.0f : 0.0f;
    m.data[i] = 1.0f - 0.5f * (1.0f - b + e * b);
  }
  return m;
}

Mask binarize_channel(const Tensor4& posterior, int channel, double threshold) {
  const Dims3 d = posterior.dims();
  Mask m(d);
  const float* p = posterior.data() + static_cast<std::size_t>(channel) * d.voxels();
  for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = p[i] >= threshold;
  return m;
}

LabelMap merge_predictions(const std::vector<HeadPrediction>& heads, const MergeOptions& opts) {
  if (heads.empty()) throw InvalidArgument("merge_predictions needs at least one head");
  const Dims3 d = heads[0].posterior.dims();
  std::vector<Volume<float>> weights;
  weights.reserve(heads.size());
  for (const auto& h : heads) {
    if (!(h.posterior.dims() == d) || !(h.bound.dims == d)) throw ShapeError("head predictions differ in extent");
    if (h.posterior.channels() != static_cast<int>(h.class_ids.size()) + 1)
      throw ShapeError("posterior channels do not match class ids");
    weights.push_back(gtv_weight_map(h.bound, h.gtv ? *h.gtv : Mask(d)));
  }
  LabelMap out(d);
  const std::size_t n = d.voxels();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(n); ++ii) {
    const std::size_t i = static_cast<std::size_t>(ii);
    int best_class = 0;
    double best_h = 0, best_raw = 0;
    bool found = false;
    for (std::size_t k = 0; k < heads.size(); ++k) {
      const auto& h = heads[k];
      for (std::size_t c = 0; c < h.class_ids.size(); ++c) {
        const double raw = h.posterior.data()[(c + 1) * n + i];
        const double y = opts.binarize ? (raw >= opts.threshold ? 1.0 : 0.0) : raw;
        if (y == 0.0) continue;
        const double hv = entropy_term(weights[k].data[i] * y);
        if (!found || hv < best_h || (hv == best_h && raw > best_raw)) {
          found = true;
          best_h = hv;
          best_raw = raw;
          best_class = h.class_ids[c];
        }
      }
    }
    out.data[i] = best_class;
  }
  return out;
}

}  // namespace contseg
