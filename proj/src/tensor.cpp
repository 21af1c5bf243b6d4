// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

#include "contseg/tensor.hpp"

#include <algorithm>
#include <numeric>

namespace contseg {

Tensor4 concat_channels(std::span<const Tensor4* const> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const Dims3 d = parts.front()->dims();
  int total = 0;
  for (const Tensor4* p : parts) {
    if (!(p->dims() == d)) throw ShapeError("concat_channels: spatial extents differ");
    total += p->channels();
  }
  Tensor4 out(total, d);
  float* dst = out.data();
  for (const Tensor4* p : parts) dst = std::copy(p->data(), p->data() + p->size(), dst);
  return out;
}

std::vector<Tensor4> split_channels(const Tensor4& t, std::span<const int> widths) {
  if (std::accumulate(widths.begin(), widths.end(), 0) != t.channels())
    throw ShapeError("split_channels: widths do not sum to channel count");
  std::vector<Tensor4> out;
  out.reserve(widths.size());
  const float* src = t.data();
  for (const int w : widths) {
    Tensor4 part(w, t.dims());
    std::copy(src, src + part.size(), part.data());
    src += part.size();
    out.push_back(std::move(part));
  }
  return out;
}

}  // namespace contseg
