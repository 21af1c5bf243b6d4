// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

// OpenMP kernels for the float32 training path. Each output element is owned
// by exactly one thread, so results do not depend on the thread count.
// Semantics match the serial loops in kernels_ref.hpp.

#pragma once

#include <span>
#include <vector>

#include "contseg/tensor.hpp"

namespace contseg::kernels {

void conv3d_forward(const Tensor4& in, std::span<const float> weight, std::span<const float> bias, int out_c, int k,
                    int stride, Tensor4& out);

/// `grad_in` is resized to (in_c, in_dims) and overwritten.
void conv3d_backward_data(const Tensor4& grad_out, std::span<const float> weight, int in_c, int k, int stride,
                          Dims3 in_dims, Tensor4& grad_in);

/// Accumulates into grad_w / grad_b (grad_b may be empty).
void conv3d_backward_params(const Tensor4& in, const Tensor4& grad_out, int k, int stride, std::span<float> grad_w,
                            std::span<float> grad_b);

void conv_transpose2_forward(const Tensor4& in, std::span<const float> weight, std::span<const float> bias, int out_c,
                             Dims3 out_dims, Tensor4& out);
void conv_transpose2_backward_data(const Tensor4& grad_out, std::span<const float> weight, int in_c, Dims3 in_dims,
                                   Tensor4& grad_in);
void conv_transpose2_backward_params(const Tensor4& in, const Tensor4& grad_out, std::span<float> grad_w,
                                     std::span<float> grad_b);

struct NormStats {
  std::vector<float> mean;
  std::vector<float> inv_std;
};

void instance_norm_forward(const Tensor4& in, std::span<const float> gamma, std::span<const float> beta, float eps,
                           Tensor4& out, NormStats& stats);
void instance_norm_backward(const Tensor4& in, const NormStats& stats, std::span<const float> gamma,
                            const Tensor4& grad_out, Tensor4& grad_in, std::span<float> grad_gamma,
                            std::span<float> grad_beta);

void leaky_relu_forward(Tensor4& x, float slope);
void leaky_relu_backward(const Tensor4& y, Tensor4& grad, float slope);

void softmax_channels(const Tensor4& logits, Tensor4& probs);

/// Number of OpenMP threads the kernels will use (1 without OpenMP).
int max_threads();

}  // namespace contseg::kernels
