// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

#include "contseg/kernels.hpp"

#include <algorithm>
#include <cmath>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace contseg::kernels {
namespace {

// Output indices i in [lo, hi) such that 0 <= i * s + off < n_in.
struct Range {
  int lo;
  int hi;
};

Range valid_range(int n_out, int n_in, int s, int off) {
  const int lo = off >= 0 ? 0 : (-off + s - 1) / s;
  const int top = n_in - 1 - off;
  int hi = top < 0 ? 0 : top / s + 1;
  hi = std::min(hi, n_out);
  return {lo, std::max(lo, hi)};
}

void reshape(Tensor4& t, int c, Dims3 d) {
  if (t.channels() != c || !(t.dims() == d)) t = Tensor4(c, d);
}

}  // namespace

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void conv3d_forward(const Tensor4& in, std::span<const float> weight, std::span<const float> bias, int out_c, int k,
                    int stride, Tensor4& out) {
  const int in_c = in.channels();
  const Dims3 id = in.dims();
  const Dims3 od = conv_out_dims(id, k, stride);
  if (weight.size() != static_cast<std::size_t>(out_c) * in_c * k * k * k)
    throw ShapeError("conv3d_forward: weight size does not match channels and kernel");
  reshape(out, out_c, od);
  const int p = k / 2;
  const int s = stride;

#pragma omp parallel for schedule(static)
  for (int o = 0; o < out_c; ++o) {
    float* op = out.channel(o).data();
    std::fill(op, op + od.voxels(), bias.empty() ? 0.f : bias[o]);
    for (int c = 0; c < in_c; ++c) {
      const float* ip = in.channel(c).data();
      for (int kd = 0; kd < k; ++kd) {
        const Range rz = valid_range(od.d, id.d, s, kd - p);
        for (int kh = 0; kh < k; ++kh) {
          const Range ry = valid_range(od.h, id.h, s, kh - p);
          for (int kw = 0; kw < k; ++kw) {
            const float wv = weight[(((static_cast<std::size_t>(o) * in_c + c) * k + kd) * k + kh) * k + kw];
            if (wv == 0.f) continue;
            const Range rx = valid_range(od.w, id.w, s, kw - p);
            for (int z = rz.lo; z < rz.hi; ++z) {
              for (int y = ry.lo; y < ry.hi; ++y) {
                float* orow = op + (static_cast<std::size_t>(z) * od.h + y) * od.w;
                const float* irow =
                    ip + (static_cast<std::size_t>(z * s + kd - p) * id.h + (y * s + kh - p)) * id.w + (kw - p);
                if (s == 1) {
                  for (int x = rx.lo; x < rx.hi; ++x) orow[x] += wv * irow[x];
                } else {
                  for (int x = rx.lo; x < rx.hi; ++x) orow[x] += wv * irow[x * s];
                }
              }
            }
          }
        }
      }
    }
  }
}

void conv3d_backward_data(const Tensor4& grad_out, std::span<const float> weight, int in_c, int k, int stride,
                          Dims3 in_dims, Tensor4& grad_in) {
  const int out_c = grad_out.channels();
  const Dims3 od = grad_out.dims();
  reshape(grad_in, in_c, in_dims);
  grad_in.fill(0.f);
  const int p = k / 2;
  const int s = stride;

#pragma omp parallel for schedule(static)
  for (int c = 0; c < in_c; ++c) {
    float* gp = grad_in.channel(c).data();
    for (int o = 0; o < out_c; ++o) {
      const float* go = grad_out.channel(o).data();
      for (int kd = 0; kd < k; ++kd) {
        const Range rz = valid_range(od.d, in_dims.d, s, kd - p);
        for (int kh = 0; kh < k; ++kh) {
          const Range ry = valid_range(od.h, in_dims.h, s, kh - p);
          for (int kw = 0; kw < k; ++kw) {
            const float wv = weight[(((static_cast<std::size_t>(o) * in_c + c) * k + kd) * k + kh) * k + kw];
            if (wv == 0.f) continue;
            const Range rx = valid_range(od.w, in_dims.w, s, kw - p);
            for (int z = rz.lo; z < rz.hi; ++z) {
              for (int y = ry.lo; y < ry.hi; ++y) {
                const float* gorow = go + (static_cast<std::size_t>(z) * od.h + y) * od.w;
                float* girow = gp + (static_cast<std::size_t>(z * s + kd - p) * in_dims.h + (y * s + kh - p)) *
                                        in_dims.w +
                               (kw - p);
                if (s == 1) {
                  for (int x = rx.lo; x < rx.hi; ++x) girow[x] += wv * gorow[x];
                } else {
                  for (int x = rx.lo; x < rx.hi; ++x) girow[x * s] += wv * gorow[x];
                }
              }
            }
          }
        }
      }
    }
  }
}

void conv3d_backward_params(const Tensor4& in, const Tensor4& grad_out, int k, int stride, std::span<float> grad_w,
                            std::span<float> grad_b) {
  const int in_c = in.channels(), out_c = grad_out.channels();
  const Dims3 id = in.dims(), od = grad_out.dims();
  const int p = k / 2;
  const int s = stride;

#pragma omp parallel for schedule(static)
  for (int o = 0; o < out_c; ++o) {
    const float* go = grad_out.channel(o).data();
    if (!grad_b.empty()) {
      double acc = 0;
      for (std::size_t i = 0; i < od.voxels(); ++i) acc += go[i];
      grad_b[o] += static_cast<float>(acc);
    }
    for (int c = 0; c < in_c; ++c) {
      const float* ip = in.channel(c).data();
      for (int kd = 0; kd < k; ++kd) {
        const Range rz = valid_range(od.d, id.d, s, kd - p);
        for (int kh = 0; kh < k; ++kh) {
          const Range ry = valid_range(od.h, id.h, s, kh - p);
          for (int kw = 0; kw < k; ++kw) {
            const Range rx = valid_range(od.w, id.w, s, kw - p);
            double acc = 0;
            for (int z = rz.lo; z < rz.hi; ++z) {
              for (int y = ry.lo; y < ry.hi; ++y) {
                const float* gorow = go + (static_cast<std::size_t>(z) * od.h + y) * od.w;
                const float* irow =
                    ip + (static_cast<std::size_t>(z * s + kd - p) * id.h + (y * s + kh - p)) * id.w + (kw - p);
                float racc = 0.f;
                if (s == 1) {
                  for (int x = rx.lo; x < rx.hi; ++x) racc += gorow[x] * irow[x];
                } else {
                  for (int x = rx.lo; x < rx.hi; ++x) racc += gorow[x] * irow[x * s];
                }
                acc += racc;
              }
            }
            grad_w[(((static_cast<std::size_t>(o) * in_c + c) * k + kd) * k + kh) * k + kw] += static_cast<float>(acc);
          }
        }
      }
    }
  }
}

void conv_transpose2_forward(const Tensor4& in, std::span<const float> weight, std::span<const float> bias, int out_c,
                             Dims3 out_dims, Tensor4& out) {
  const int in_c = in.channels();
  const Dims3 id = in.dims();
  if (weight.size() != static_cast<std::size_t>(in_c) * out_c * 8)
    throw ShapeError("conv_transpose2_forward: weight size does not match channels");
  if (out_dims.d > 2 * id.d || out_dims.h > 2 * id.h || out_dims.w > 2 * id.w)
    throw ShapeError("conv_transpose2_forward: output larger than twice the input");
  reshape(out, out_c, out_dims);
  const Dims3 od = out_dims;

#pragma omp parallel for schedule(static)
  for (int o = 0; o < out_c; ++o) {
    float* op = out.channel(o).data();
    std::fill(op, op + od.voxels(), bias.empty() ? 0.f : bias[o]);
    for (int c = 0; c < in_c; ++c) {
      const float* ip = in.channel(c).data();
      for (int a = 0; a < 2; ++a) {
        const int zn = std::min(id.d, (od.d - a + 1) / 2);
        for (int b = 0; b < 2; ++b) {
          const int yn = std::min(id.h, (od.h - b + 1) / 2);
          for (int e = 0; e < 2; ++e) {
            const float wv = weight[((static_cast<std::size_t>(c) * out_c + o) * 8) + a * 4 + b * 2 + e];
            if (wv == 0.f) continue;
            const int xn = std::min(id.w, (od.w - e + 1) / 2);
            for (int z = 0; z < zn; ++z) {
              for (int y = 0; y < yn; ++y) {
                float* orow = op + (static_cast<std::size_t>(2 * z + a) * od.h + (2 * y + b)) * od.w + e;
                const float* irow = ip + (static_cast<std::size_t>(z) * id.h + y) * id.w;
                for (int x = 0; x < xn; ++x) orow[2 * x] += wv * irow[x];
              }
            }
          }
        }
      }
    }
  }
}

void conv_transpose2_backward_data(const Tensor4& grad_out, std::span<const float> weight, int in_c, Dims3 in_dims,
                                   Tensor4& grad_in) {
  const int out_c = grad_out.channels();
  const Dims3 od = grad_out.dims();
  reshape(grad_in, in_c, in_dims);
  grad_in.fill(0.f);
  const Dims3 id = in_dims;

#pragma omp parallel for schedule(static)
  for (int c = 0; c < in_c; ++c) {
    float* gp = grad_in.channel(c).data();
    for (int o = 0; o < out_c; ++o) {
      const float* go = grad_out.channel(o).data();
      for (int a = 0; a < 2; ++a) {
        const int zn = std::min(id.d, (od.d - a + 1) / 2);
        for (int b = 0; b < 2; ++b) {
          const int yn = std::min(id.h, (od.h - b + 1) / 2);
          for (int e = 0; e < 2; ++e) {
            const float wv = weight[((static_cast<std::size_t>(c) * out_c + o) * 8) + a * 4 + b * 2 + e];
            if (wv == 0.f) continue;
            const int xn = std::min(id.w, (od.w - e + 1) / 2);
            for (int z = 0; z < zn; ++z) {
              for (int y = 0; y < yn; ++y) {
                const float* gorow = go + (static_cast<std::size_t>(2 * z + a) * od.h + (2 * y + b)) * od.w + e;
                float* girow = gp + (static_cast<std::size_t>(z) * id.h + y) * id.w;
                for (int x = 0; x < xn; ++x) girow[x] += wv * gorow[2 * x];
              }
            }
          }
        }
      }
    }
  }
}

void conv_transpose2_backward_params(const Tensor4& in, const Tensor4& grad_out, std::span<float> grad_w,
                                     std::span<float> grad_b) {
  const int in_c = in.channels(), out_c = grad_out.channels();
  const Dims3 id = in.dims(), od = grad_out.dims();

  if (!grad_b.empty()) {
#pragma omp parallel for schedule(static)
    for (int o = 0; o < out_c; ++o) {
      double acc = 0;
      for (const float g : grad_out.channel(o)) acc += g;
      grad_b[o] += static_cast<float>(acc);
    }
  }

#pragma omp parallel for schedule(static)
  for (int c = 0; c < in_c; ++c) {
    const float* ip = in.channel(c).data();
    for (int o = 0; o < out_c; ++o) {
      const float* go = grad_out.channel(o).data();
      for (int a = 0; a < 2; ++a) {
        const int zn = std::min(id.d, (od.d - a + 1) / 2);
        for (int b = 0; b < 2; ++b) {
          const int yn = std::min(id.h, (od.h - b + 1) / 2);
          for (int e = 0; e < 2; ++e) {
            const int xn = std::min(id.w, (od.w - e + 1) / 2);
            double acc = 0;
            for (int z = 0; z < zn; ++z) {
              for (int y = 0; y < yn; ++y) {
                const float* gorow = go + (static_cast<std::size_t>(2 * z + a) * od.h + (2 * y + b)) * od.w + e;
                const float* irow = ip + (static_cast<std::size_t>(z) * id.h + y) * id.w;
                float racc = 0.f;
                for (int x = 0; x < xn; ++x) racc += irow[x] * gorow[2 * x];
                acc += racc;
              }
            }
            grad_w[((static_cast<std::size_t>(c) * out_c + o) * 8) + a * 4 + b * 2 + e] += static_cast<float>(acc);
          }
        }
      }
    }
  }
}

void instance_norm_forward(const Tensor4& in, std::span<const float> gamma, std::span<const float> beta, float eps,
                           Tensor4& out, NormStats& stats) {
  const int C = in.channels();
  const std::size_t n = in.voxels();
  reshape(out, C, in.dims());
  stats.mean.assign(C, 0.f);
  stats.inv_std.assign(C, 0.f);

#pragma omp parallel for schedule(static)
  for (int c = 0; c < C; ++c) {
    const float* x = in.channel(c).data();
    float* y = out.channel(c).data();
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) s += x[i];
    const double mu = s / static_cast<double>(n);
    double ss = 0;
    for (std::size_t i = 0; i < n; ++i) ss += (x[i] - mu) * (x[i] - mu);
    const double istd = 1.0 / std::sqrt(ss / static_cast<double>(n) + eps);
    stats.mean[c] = static_cast<float>(mu);
    stats.inv_std[c] = static_cast<float>(istd);
    const float scale = static_cast<float>(gamma[c] * istd);
    const float shift = static_cast<float>(beta[c] - gamma[c] * istd * mu);
    for (std::size_t i = 0; i < n; ++i) y[i] = x[i] * scale + shift;
  }
}

void instance_norm_backward(const Tensor4& in, const NormStats& stats, std::span<const float> gamma,
                            const Tensor4& grad_out, Tensor4& grad_in, std::span<float> grad_gamma,
                            std::span<float> grad_beta) {
  const int C = in.channels();
  const std::size_t n = in.voxels();
  reshape(grad_in, C, in.dims());

#pragma omp parallel for schedule(static)
  for (int c = 0; c < C; ++c) {
    const float* x = in.channel(c).data();
    const float* gy = grad_out.channel(c).data();
    float* gx = grad_in.channel(c).data();
    const double mu = stats.mean[c], istd = stats.inv_std[c];
    double sg = 0, sgx = 0;
    for (std::size_t i = 0; i < n; ++i) {
      sg += gy[i];
      sgx += gy[i] * ((x[i] - mu) * istd);
    }
    grad_gamma[c] += static_cast<float>(sgx);
    grad_beta[c] += static_cast<float>(sg);
    const double dn = static_cast<double>(n);
    const float a = static_cast<float>(gamma[c] * istd);
    const float mg = static_cast<float>(sg / dn);
    const float mgx = static_cast<float>(sgx / dn);
    const float fmu = static_cast<float>(mu), fistd = static_cast<float>(istd);
    for (std::size_t i = 0; i < n; ++i) gx[i] = a * (gy[i] - mg - (x[i] - fmu) * fistd * mgx);
  }
}

void leaky_relu_forward(Tensor4& x, float slope) {
  float* p = x.data();
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(x.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) p[i] = p[i] > 0.f ? p[i] : p[i] * slope;
}

void leaky_relu_backward(const Tensor4& y, Tensor4& grad, float slope) {
  const float* yp = y.data();
  float* g = grad.data();
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(grad.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i)
    if (!(yp[i] > 0.f)) g[i] *= slope;
}

void softmax_channels(const Tensor4& logits, Tensor4& probs) {
  const int C = logits.channels();
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(logits.voxels());
  reshape(probs, C, logits.dims());
  const float* l = logits.data();
  float* p = probs.data();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    float m = l[i];
    for (int c = 1; c < C; ++c) m = std::max(m, l[c * n + i]);
    double s = 0;
    for (int c = 0; c < C; ++c) s += std::exp(static_cast<double>(l[c * n + i] - m));
    for (int c = 0; c < C; ++c) p[c * n + i] = static_cast<float>(std::exp(static_cast<double>(l[c * n + i] - m)) / s);
  }
}

}  // namespace contseg::kernels
