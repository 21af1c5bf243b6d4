// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

// Layer building blocks with explicit forward/backward. Forward is const and
// re-entrant; training passes a cache that backward consumes. Backward
// accumulates parameter gradients into ParamArray::grad.

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "contseg/kernels.hpp"
#include "contseg/tensor.hpp"

namespace contseg {

using Rng = std::mt19937_64;

inline constexpr float kLeakySlope = 0.01f;
inline constexpr float kNormEps = 1e-5f;

struct ParamArray {
  std::string name;
  std::vector<int> shape;
  std::vector<float> value;
  std::vector<float> grad;
  /// Conv weights and biases are prunable; normalization affine terms are not.
  bool prunable = false;

  ParamArray() = default;
  ParamArray(std::string n, std::vector<int> s, bool is_prunable);

  std::size_t size() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.f); }
};

using ParamRefs = std::vector<ParamArray*>;
using ConstParamRefs = std::vector<const ParamArray*>;

/// He-normal initialisation for a leaky-ReLU network.
void init_he_normal(ParamArray& w, int fan_in, Rng& rng);

class Conv3d {
 public:
  Conv3d() = default;
  Conv3d(const std::string& name, int in_c, int out_c, int k, int stride, Rng& rng);

  Tensor4 forward(const Tensor4& x) const;
  /// Accumulates weight/bias gradients; returns dL/dx when need_dx is set.
  Tensor4 backward(const Tensor4& x, const Tensor4& gy, bool need_dx);

  void collect(ParamRefs& out) { out.push_back(&weight); out.push_back(&bias); }
  void collect(ConstParamRefs& out) const { out.push_back(&weight); out.push_back(&bias); }

  int in_channels() const { return in_c_; }
  int out_channels() const { return out_c_; }

  ParamArray weight;
  ParamArray bias;

 private:
  int in_c_ = 0, out_c_ = 0, k_ = 3, stride_ = 1;
};

/// Kernel-2 stride-2 transposed convolution; output cropped to a requested extent.
class ConvTranspose2 {
 public:
  ConvTranspose2() = default;
  ConvTranspose2(const std::string& name, int in_c, int out_c, Rng& rng);

  Tensor4 forward(const Tensor4& x, Dims3 out_dims) const;
  Tensor4 backward(const Tensor4& x, const Tensor4& gy, bool need_dx);

  void collect(ParamRefs& out) { out.push_back(&weight); out.push_back(&bias); }
  void collect(ConstParamRefs& out) const { out.push_back(&weight); out.push_back(&bias); }

  ParamArray weight;
  ParamArray bias;

 private:
  int in_c_ = 0, out_c_ = 0;
};

class InstanceNorm {
 public:
  InstanceNorm() = default;
  InstanceNorm(const std::string& name, int channels);

  void collect(ParamRefs& out) { out.push_back(&gamma); out.push_back(&beta); }
  void collect(ConstParamRefs& out) const { out.push_back(&gamma); out.push_back(&beta); }

  ParamArray gamma;
  ParamArray beta;
};

/// conv 3^3 -> instance norm -> leaky ReLU.
class ConvBlock {
 public:
  struct Cache {
    Tensor4 x;
    Tensor4 conv_out;
    kernels::NormStats stats;
    Tensor4 y;
  };

  ConvBlock() = default;
  ConvBlock(const std::string& name, int in_c, int out_c, int stride, Rng& rng);

  Tensor4 forward(const Tensor4& x, Cache* cache) const;
  Tensor4 backward(const Cache& cache, Tensor4 gy, bool need_dx);

  void collect(ParamRefs& out) { conv.collect(out); norm.collect(out); }
  void collect(ConstParamRefs& out) const { conv.collect(out); norm.collect(out); }

  Conv3d conv;
  InstanceNorm norm;
};

/// Adds `src` into `dst`, treating an empty dst as zero.
void accumulate(Tensor4& dst, const Tensor4& src);

}  // namespace contseg
