// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

#include "contseg/nn.hpp"

#include <cmath>
#include <numeric>

namespace contseg {

ParamArray::ParamArray(std::string n, std::vector<int> s, bool is_prunable)
    : name(std::move(n)), shape(std::move(s)), prunable(is_prunable) {
  const std::size_t count =
      std::accumulate(shape.begin(), shape.end(), std::size_t{1}, [](std::size_t a, int b) { return a * b; });
  value.assign(count, 0.f);
  grad.assign(count, 0.f);
}

void init_he_normal(ParamArray& w, int fan_in, Rng& rng) {
  const double gain = 2.0 / (1.0 + kLeakySlope * kLeakySlope);
  std::normal_distribution<float> dist(0.f, static_cast<float>(std::sqrt(gain / fan_in)));
  for (auto& v : w.value) v = dist(rng);
}

Conv3d::Conv3d(const std::string& name, int in_c, int out_c, int k, int stride, Rng& rng)
    : weight(name + ".weight", {out_c, in_c, k, k, k}, true),
      bias(name + ".bias", {out_c}, true),
      in_c_(in_c),
      out_c_(out_c),
      k_(k),
      stride_(stride) {
  init_he_normal(weight, in_c * k * k * k, rng);
}

Tensor4 Conv3d::forward(const Tensor4& x) const {
  if (x.channels() != in_c_) throw ShapeError(weight.name + ": input channel mismatch");
  Tensor4 y;
  kernels::conv3d_forward(x, weight.value, bias.value, out_c_, k_, stride_, y);
  return y;
}

Tensor4 Conv3d::backward(const Tensor4& x, const Tensor4& gy, bool need_dx) {
  kernels::conv3d_backward_params(x, gy, k_, stride_, weight.grad, bias.grad);
  Tensor4 gx;
  if (need_dx) kernels::conv3d_backward_data(gy, weight.value, in_c_, k_, stride_, x.dims(), gx);
  return gx;
}

ConvTranspose2::ConvTranspose2(const std::string& name, int in_c, int out_c, Rng& rng)
    : weight(name + ".weight", {in_c, out_c, 2, 2, 2}, true),
      bias(name + ".bias", {out_c}, true),
      in_c_(in_c),
      out_c_(out_c) {
  init_he_normal(weight, in_c * 8, rng);
}

Tensor4 ConvTranspose2::forward(const Tensor4& x, Dims3 out_dims) const {
  if (x.channels() != in_c_) throw ShapeError(weight.name + ": input channel mismatch");
  Tensor4 y;
  kernels::conv_transpose2_forward(x, weight.value, bias.value, out_c_, out_dims, y);
  return y;
}

Tensor4 ConvTranspose2::backward(const Tensor4& x, const Tensor4& gy, bool need_dx) {
  kernels::conv_transpose2_backward_params(x, gy, weight.grad, bias.grad);
  Tensor4 gx;
  if (need_dx) kernels::conv_transpose2_backward_data(gy, weight.value, in_c_, x.dims(), gx);
  return gx;
}

InstanceNorm::InstanceNorm(const std::string& name, int channels)
    : gamma(name + ".gamma", {channels}, false), beta(name + ".beta", {channels}, false) {
  std::fill(gamma.value.begin(), gamma.value.end(), 1.f);
}

ConvBlock::ConvBlock(const std::string& name, int in_c, int out_c, int stride, Rng& rng)
    : conv(name + ".conv", in_c, out_c, 3, stride, rng), norm(name + ".norm", out_c) {}

Tensor4 ConvBlock::forward(const Tensor4& x, Cache* cache) const {
  Tensor4 c = conv.forward(x);
  Tensor4 y;
  kernels::NormStats stats;
  kernels::instance_norm_forward(c, norm.gamma.value, norm.beta.value, kNormEps, y, stats);
  kernels::leaky_relu_forward(y, kLeakySlope);
  if (cache) {
    cache->x = x;
    cache->conv_out = std::move(c);
    cache->stats = std::move(stats);
    cache->y = y;
  }
  return y;
}

Tensor4 ConvBlock::backward(const Cache& cache, Tensor4 gy, bool need_dx) {
  kernels::leaky_relu_backward(cache.y, gy, kLeakySlope);
  Tensor4 gc;
  kernels::instance_norm_backward(cache.conv_out, cache.stats, norm.gamma.value, gy, gc, norm.gamma.grad,
                                  norm.beta.grad);
  return conv.backward(cache.x, gc, need_dx);
}

void accumulate(Tensor4& dst, const Tensor4& src) {
  if (src.empty()) return;
  if (dst.empty()) {
    dst = src;
    return;
  }
  if (!dst.same_shape(src)) throw ShapeError("accumulate: shape mismatch");
  float* d = dst.data();
  const float* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

}  // namespace contseg
