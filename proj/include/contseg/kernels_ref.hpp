// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

// Serial reference kernels. Straight loop nests over the definitions; the
// OpenMP kernels in kernels.hpp are tested and benchmarked against these.

#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "contseg/tensor.hpp"

namespace contseg::ref {

// Weight layout [out_c][in_c][k][k][k]; padding k/2 on every side.
template <class T>
BasicTensor4<T> conv3d_forward(const BasicTensor4<T>& in, std::span<const T> weight, std::span<const T> bias,
                               int out_c, int k, int stride) {
  const int in_c = in.channels();
  const Dims3 id = in.dims();
  const Dims3 od = conv_out_dims(id, k, stride);
  const int p = k / 2;
  BasicTensor4<T> out(out_c, od);
  for (int o = 0; o < out_c; ++o)
    for (int z = 0; z < od.d; ++z)
      for (int y = 0; y < od.h; ++y)
        for (int x = 0; x < od.w; ++x) {
          T acc = bias.empty() ? T{} : bias[o];
          for (int c = 0; c < in_c; ++c)
            for (int kd = 0; kd < k; ++kd)
              for (int kh = 0; kh < k; ++kh)
                for (int kw = 0; kw < k; ++kw) {
                  const int iz = z * stride + kd - p, iy = y * stride + kh - p, ix = x * stride + kw - p;
                  if (iz < 0 || iz >= id.d || iy < 0 || iy >= id.h || ix < 0 || ix >= id.w) continue;
                  acc += weight[(((static_cast<std::size_t>(o) * in_c + c) * k + kd) * k + kh) * k + kw] *
                         in.at(c, iz, iy, ix);
                }
          out.at(o, z, y, x) = acc;
        }
  return out;
}

template <class T>
BasicTensor4<T> conv3d_backward_data(const BasicTensor4<T>& grad_out, std::span<const T> weight, int in_c, int k,
                                     int stride, Dims3 in_dims) {
  const int out_c = grad_out.channels();
  const Dims3 od = grad_out.dims();
  const int p = k / 2;
  BasicTensor4<T> gin(in_c, in_dims);
  for (int o = 0; o < out_c; ++o)
    for (int z = 0; z < od.d; ++z)
      for (int y = 0; y < od.h; ++y)
        for (int x = 0; x < od.w; ++x) {
          const T g = grad_out.at(o, z, y, x);
          for (int c = 0; c < in_c; ++c)
            for (int kd = 0; kd < k; ++kd)
              for (int kh = 0; kh < k; ++kh)
                for (int kw = 0; kw < k; ++kw) {
                  const int iz = z * stride + kd - p, iy = y * stride + kh - p, ix = x * stride + kw - p;
                  if (iz < 0 || iz >= in_dims.d || iy < 0 || iy >= in_dims.h || ix < 0 || ix >= in_dims.w) continue;
                  gin.at(c, iz, iy, ix) +=
                      g * weight[(((static_cast<std::size_t>(o) * in_c + c) * k + kd) * k + kh) * k + kw];
                }
        }
  return gin;
}

/// Accumulates into grad_w / grad_b.
template <class T>
void conv3d_backward_params(const BasicTensor4<T>& in, const BasicTensor4<T>& grad_out, int k, int stride,
                            std::span<T> grad_w, std::span<T> grad_b) {
  const int in_c = in.channels(), out_c = grad_out.channels();
  const Dims3 id = in.dims(), od = grad_out.dims();
  const int p = k / 2;
  for (int o = 0; o < out_c; ++o)
    for (int z = 0; z < od.d; ++z)
      for (int y = 0; y < od.h; ++y)
        for (int x = 0; x < od.w; ++x) {
          const T g = grad_out.at(o, z, y, x);
          if (!grad_b.empty()) grad_b[o] += g;
          for (int c = 0; c < in_c; ++c)
            for (int kd = 0; kd < k; ++kd)
              for (int kh = 0; kh < k; ++kh)
                for (int kw = 0; kw < k; ++kw) {
                  const int iz = z * stride + kd - p, iy = y * stride + kh - p, ix = x * stride + kw - p;
                  if (iz < 0 || iz >= id.d || iy < 0 || iy >= id.h || ix < 0 || ix >= id.w) continue;
                  grad_w[(((static_cast<std::size_t>(o) * in_c + c) * k + kd) * k + kh) * k + kw] +=
                      g * in.at(c, iz, iy, ix);
                }
        }
}

// Transposed convolution, kernel 2, stride 2, weight layout [in_c][out_c][2][2][2].
// The doubled output is cropped to out_dims.
template <class T>
BasicTensor4<T> conv_transpose2_forward(const BasicTensor4<T>& in, std::span<const T> weight, std::span<const T> bias,
                                        int out_c, Dims3 out_dims) {
  const int in_c = in.channels();
  const Dims3 id = in.dims();
  BasicTensor4<T> out(out_c, out_dims);
  for (int o = 0; o < out_c; ++o)
    for (int z = 0; z < out_dims.d; ++z)
      for (int y = 0; y < out_dims.h; ++y)
        for (int x = 0; x < out_dims.w; ++x) out.at(o, z, y, x) = bias.empty() ? T{} : bias[o];
  for (int c = 0; c < in_c; ++c)
    for (int z = 0; z < id.d; ++z)
      for (int y = 0; y < id.h; ++y)
        for (int x = 0; x < id.w; ++x)
          for (int o = 0; o < out_c; ++o)
            for (int a = 0; a < 2; ++a)
              for (int b = 0; b < 2; ++b)
                for (int e = 0; e < 2; ++e) {
                  const int oz = 2 * z + a, oy = 2 * y + b, ox = 2 * x + e;
                  if (oz >= out_dims.d || oy >= out_dims.h || ox >= out_dims.w) continue;
                  out.at(o, oz, oy, ox) +=
                      in.at(c, z, y, x) * weight[((static_cast<std::size_t>(c) * out_c + o) * 8) + a * 4 + b * 2 + e];
                }
  return out;
}

template <class T>
BasicTensor4<T> conv_transpose2_backward_data(const BasicTensor4<T>& grad_out, std::span<const T> weight, int in_c,
                                              Dims3 in_dims) {
  const int out_c = grad_out.channels();
  const Dims3 od = grad_out.dims();
  BasicTensor4<T> gin(in_c, in_dims);
  for (int c = 0; c < in_c; ++c)
    for (int z = 0; z < in_dims.d; ++z)
      for (int y = 0; y < in_dims.h; ++y)
        for (int x = 0; x < in_dims.w; ++x) {
          T acc{};
          for (int o = 0; o < out_c; ++o)
            for (int a = 0; a < 2; ++a)
              for (int b = 0; b < 2; ++b)
                for (int e = 0; e < 2; ++e) {
                  const int oz = 2 * z + a, oy = 2 * y + b, ox = 2 * x + e;
                  if (oz >= od.d || oy >= od.h || ox >= od.w) continue;
                  acc += grad_out.at(o, oz, oy, ox) *
                         weight[((static_cast<std::size_t>(c) * out_c + o) * 8) + a * 4 + b * 2 + e];
                }
          gin.at(c, z, y, x) = acc;
        }
  return gin;
}

template <class T>
void conv_transpose2_backward_params(const BasicTensor4<T>& in, const BasicTensor4<T>& grad_out, std::span<T> grad_w,
                                     std::span<T> grad_b) {
  const int in_c = in.channels(), out_c = grad_out.channels();
  const Dims3 id = in.dims(), od = grad_out.dims();
  if (!grad_b.empty())
    for (int o = 0; o < out_c; ++o)
      for (const T g : grad_out.channel(o)) grad_b[o] += g;
  for (int c = 0; c < in_c; ++c)
    for (int z = 0; z < id.d; ++z)
      for (int y = 0; y < id.h; ++y)
        for (int x = 0; x < id.w; ++x)
          for (int o = 0; o < out_c; ++o)
            for (int a = 0; a < 2; ++a)
              for (int b = 0; b < 2; ++b)
                for (int e = 0; e < 2; ++e) {
                  const int oz = 2 * z + a, oy = 2 * y + b, ox = 2 * x + e;
                  if (oz >= od.d || oy >= od.h || ox >= od.w) continue;
                  grad_w[((static_cast<std::size_t>(c) * out_c + o) * 8) + a * 4 + b * 2 + e] +=
                      in.at(c, z, y, x) * grad_out.at(o, oz, oy, ox);
                }
}

template <class T>
struct NormStatsT {
  std::vector<T> mean;
  std::vector<T> inv_std;
};

// Per-channel normalization over all voxels (biased variance) with affine gamma/beta.
template <class T>
BasicTensor4<T> instance_norm_forward(const BasicTensor4<T>& in, std::span<const T> gamma, std::span<const T> beta,
                                      T eps, NormStatsT<T>& stats) {
  const int C = in.channels();
  const double n = static_cast<double>(in.voxels());
  BasicTensor4<T> out(C, in.dims());
  stats.mean.assign(C, T{});
  stats.inv_std.assign(C, T{});
  for (int c = 0; c < C; ++c) {
    double s = 0;
    for (const T v : in.channel(c)) s += v;
    const double mu = s / n;
    double ss = 0;
    for (const T v : in.channel(c)) ss += (v - mu) * (v - mu);
    const double istd = 1.0 / std::sqrt(ss / n + static_cast<double>(eps));
    stats.mean[c] = static_cast<T>(mu);
    stats.inv_std[c] = static_cast<T>(istd);
    auto src = in.channel(c);
    auto dst = out.channel(c);
    for (std::size_t i = 0; i < src.size(); ++i)
      dst[i] = static_cast<T>(gamma[c] * ((src[i] - mu) * istd) + beta[c]);
  }
  return out;
}

template <class T>
BasicTensor4<T> instance_norm_backward(const BasicTensor4<T>& in, const NormStatsT<T>& stats, std::span<const T> gamma,
                                       const BasicTensor4<T>& grad_out, std::span<T> grad_gamma,
                                       std::span<T> grad_beta) {
  const int C = in.channels();
  const double n = static_cast<double>(in.voxels());
  BasicTensor4<T> gin(C, in.dims());
  for (int c = 0; c < C; ++c) {
    auto x = in.channel(c);
    auto gy = grad_out.channel(c);
    const double mu = stats.mean[c], istd = stats.inv_std[c];
    double sg = 0, sgx = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double xh = (x[i] - mu) * istd;
      sg += gy[i];
      sgx += gy[i] * xh;
    }
    grad_gamma[c] += static_cast<T>(sgx);
    grad_beta[c] += static_cast<T>(sg);
    auto gx = gin.channel(c);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double xh = (x[i] - mu) * istd;
      gx[i] = static_cast<T>(gamma[c] * istd * (gy[i] - sg / n - xh * sgx / n));
    }
  }
  return gin;
}

template <class T>
void leaky_relu_forward(BasicTensor4<T>& x, T slope) {
  for (auto& v : x.storage()) v = v > T{} ? v : v * slope;
}

/// `y` is the activation output; with slope > 0 its sign matches the input's.
template <class T>
void leaky_relu_backward(const BasicTensor4<T>& y, BasicTensor4<T>& grad, T slope) {
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (!(y.data()[i] > T{})) grad.data()[i] *= slope;
}

template <class T>
BasicTensor4<T> softmax_channels(const BasicTensor4<T>& logits) {
  const int C = logits.channels();
  const std::size_t n = logits.voxels();
  BasicTensor4<T> out(C, logits.dims());
  for (std::size_t i = 0; i < n; ++i) {
    T m = logits.data()[i];
    for (int c = 1; c < C; ++c) m = std::max(m, logits.data()[c * n + i]);
    double s = 0;
    for (int c = 0; c < C; ++c) s += std::exp(static_cast<double>(logits.data()[c * n + i] - m));
    for (int c = 0; c < C; ++c)
      out.data()[c * n + i] = static_cast<T>(std::exp(static_cast<double>(logits.data()[c * n + i] - m)) / s);
  }
  return out;
}

}  // namespace contseg::ref
