// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "contseg/error.hpp"

namespace contseg {

/// Spatial extent of a volume, axial axis first (depth = z slices).
struct Dims3 {
  int d = 0;
  int h = 0;
  int w = 0;

  std::size_t voxels() const {
    return static_cast<std::size_t>(d) * static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  }
  bool operator==(const Dims3&) const = default;
};

/// Output extent of a stride-s convolution with kernel k and padding k/2.
inline int conv_out_extent(int in, int k, int stride) { return (in + 2 * (k / 2) - k) / stride + 1; }

inline Dims3 conv_out_dims(Dims3 in, int k, int stride) {
  return {conv_out_extent(in.d, k, stride), conv_out_extent(in.h, k, stride), conv_out_extent(in.w, k, stride)};
}

/// Dense C x D x H x W array, W fastest.
template <class T>
class BasicTensor4 {
 public:
  BasicTensor4() = default;
  BasicTensor4(int channels, Dims3 dims, T fill = T{})
      : channels_(channels), dims_(dims), data_(static_cast<std::size_t>(channels) * dims.voxels(), fill) {
    if (channels < 0 || dims.d < 0 || dims.h < 0 || dims.w < 0) throw ShapeError("negative tensor extent");
  }

  int channels() const { return channels_; }
  Dims3 dims() const { return dims_; }
  std::size_t voxels() const { return dims_.voxels(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  std::span<T> channel(int c) { return {data_.data() + static_cast<std::size_t>(c) * voxels(), voxels()}; }
  std::span<const T> channel(int c) const {
    return {data_.data() + static_cast<std::size_t>(c) * voxels(), voxels()};
  }

  std::size_t index(int c, int z, int y, int x) const {
    return ((static_cast<std::size_t>(c) * dims_.d + z) * dims_.h + y) * dims_.w + x;
  }
  T& at(int c, int z, int y, int x) { return data_[index(c, z, y, x)]; }
  const T& at(int c, int z, int y, int x) const { return data_[index(c, z, y, x)]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const BasicTensor4& o) const { return channels_ == o.channels_ && dims_ == o.dims_; }
  bool operator==(const BasicTensor4&) const = default;

 private:
  int channels_ = 0;
  Dims3 dims_{};
  std::vector<T> data_;
};

using Tensor4 = BasicTensor4<float>;

/// Per-stage feature maps; index 0 is full resolution.
using FeaturePyramid = std::vector<Tensor4>;

/// Single-channel volume (image, label map or binary mask).
template <class T>
struct Volume {
  Dims3 dims{};
  std::vector<T> data;

  Volume() = default;
  explicit Volume(Dims3 d, T fill = T{}) : dims(d), data(d.voxels(), fill) {}

  std::size_t index(int z, int y, int x) const {
    return (static_cast<std::size_t>(z) * dims.h + y) * dims.w + x;
  }
  T& at(int z, int y, int x) { return data[index(z, y, x)]; }
  const T& at(int z, int y, int x) const { return data[index(z, y, x)]; }
  bool operator==(const Volume&) const = default;
};

using Image = Volume<float>;
using LabelMap = Volume<std::int32_t>;
using Mask = Volume<std::uint8_t>;

/// Concatenates tensors of equal spatial extent along the channel axis.
Tensor4 concat_channels(std::span<const Tensor4* const> parts);

/// Splits a gradient tensor back into channel blocks of the given widths.
std::vector<Tensor4> split_channels(const Tensor4& t, std::span<const int> widths);

}  // namespace contseg
