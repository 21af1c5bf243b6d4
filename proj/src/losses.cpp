// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

#include "contseg/losses.hpp"

#include <algorithm>
#include <cmath>

#include "contseg/error.hpp"

namespace contseg::losses {

namespace {

bool contains(const std::vector<int>& v, int x) { return std::find(v.begin(), v.end(), x) != v.end(); }

void check_labels(const Field& q, std::span<const int> labels) {
  if (labels.size() != q.voxels()) throw ShapeError("label count does not match the probability field");
}

// -ln(clamp(p)) and its derivative (zero where the clamp is active).
inline double nll(double p, double* dp) {
  if (p < kProbFloor) {
    *dp = 0;
    return -std::log(kProbFloor);
  }
  if (p > 1.0) {
    *dp = 0;
    return 0;
  }
  *dp = -1.0 / p;
  return -std::log(p);
}

}  // namespace

Field to_field(const Tensor4& t) {
  Field f(t.channels(), t.dims());
  std::copy(t.data(), t.data() + t.size(), f.data());
  return f;
}

Result ce(const Field& q, std::span<const int> labels) {
  check_labels(q, labels);
  const std::size_t n = q.voxels();
  const int K1 = q.channels();
  Result r{0, Field(K1, q.dims())};
  double sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || y >= K1) throw InvalidArgument("label " + std::to_string(y) + " outside the head's classes");
    double d;
    sum += nll(q.data()[y * n + i], &d);
    r.grad.data()[y * n + i] = d / static_cast<double>(n);
  }
  r.value = sum / static_cast<double>(n);
  return r;
}

Result ce_dice(const Field& q, std::span<const int> labels) {
  Result r = ce(q, labels);
  const std::size_t n = q.voxels();
  const int K = q.channels() - 1;
  if (K < 1) return r;
  double dice_sum = 0;
  for (int c = 1; c <= K; ++c) {
    const double* qc = q.data() + c * n;
    double inter = 0, sq = 0, cnt = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double y = labels[i] == c ? 1.0 : 0.0;
      inter += qc[i] * y;
      sq += qc[i] * qc[i];
      cnt += y;
    }
    const double num = 2 * inter + kDiceEps;
    const double den = sq + cnt + kDiceEps;
    dice_sum += num / den;
    double* g = r.grad.data() + c * n;
    for (std::size_t i = 0; i < n; ++i) {
      const double y = labels[i] == c ? 1.0 : 0.0;
      const double dd = 2 * y / den - num * 2 * qc[i] / (den * den);
      g[i] -= dd / K;
    }
  }
  r.value += 1.0 - dice_sum / K;
  return r;
}

std::vector<int> ClassContext::overlap() const {
  std::vector<int> out;
  if (union_overlap) {
    for (int c : old_classes)
      if (c != background && !contains(out, c)) out.push_back(c);
    for (int c : current_classes)
      if (c != background && !contains(out, c)) out.push_back(c);
  } else {
    for (int c : old_classes)
      if (c != background && contains(current_classes, c)) out.push_back(c);
  }
  std::sort(out.begin(), out.end());
  return out;
}

int ClassContext::channel_of(int class_id) const {
  for (std::size_t i = 0; i < channel_classes.size(); ++i)
    if (channel_classes[i] == class_id) return static_cast<int>(i);
  return -1;
}

std::vector<int> ClassContext::retained_old_channels() const {
  const auto ov = overlap();
  std::vector<int> out;
  for (int c : old_classes)
    if (!contains(ov, c)) out.push_back(channel_of(c));
  return out;
}

void ClassContext::validate() const {
  if (!contains(old_classes, background)) throw InvalidArgument("old class set must contain the background");
  for (int c : old_classes)
    if (channel_of(c) < 0) throw InvalidArgument("old class " + std::to_string(c) + " has no channel");
  for (int c : current_classes)
    if (channel_of(c) < 0) throw InvalidArgument("current class " + std::to_string(c) + " has no channel");
}

Result unce(const Field& q, std::span<const int> labels, const ClassContext& ctx) {
  check_labels(q, labels);
  ctx.validate();
  if (static_cast<int>(ctx.channel_classes.size()) != q.channels())
    throw ShapeError("unce: channel map does not match the probability field");
  const std::size_t n = q.voxels();
  const auto merged = ctx.retained_old_channels();
  Result r{0, Field(q.channels(), q.dims())};
  double sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    double d;
    if (y == ctx.background) {
      double s = 0;
      for (int ch : merged) s += q.data()[ch * n + i];
      sum += nll(s, &d);
      for (int ch : merged) r.grad.data()[ch * n + i] = d / static_cast<double>(n);
    } else {
      if (!contains(ctx.current_classes, y))
        throw InvalidArgument("label " + std::to_string(y) + " is not a current class or background");
      const int ch = ctx.channel_of(y);
      sum += nll(q.data()[ch * n + i], &d);
      r.grad.data()[ch * n + i] = d / static_cast<double>(n);
    }
  }
  r.value = sum / static_cast<double>(n);
  return r;
}

Result unkd(const Field& q, const Field& q_old, std::span<const int> old_channel_classes, const ClassContext& ctx) {
  if (q_old.empty()) throw InvalidArgument("unkd requires the previous model's probabilities");
  if (!(q_old.dims() == q.dims())) throw ShapeError("unkd: old and new fields differ in extent");
  if (static_cast<int>(old_channel_classes.size()) != q_old.channels())
    throw ShapeError("unkd: old channel map does not match the old field");
  ctx.validate();
  const std::size_t n = q.voxels();
  const auto ov = ctx.overlap();
  // Pairs (old channel, new channel) for c in Y^{t-1} \ C^t_p.
  std::vector<std::pair<int, int>> terms;
  for (std::size_t oc = 0; oc < old_channel_classes.size(); ++oc) {
    const int c = old_channel_classes[oc];
    if (!contains(ctx.old_classes, c) || contains(ov, c)) continue;
    terms.emplace_back(static_cast<int>(oc), ctx.channel_of(c));
  }
  const int bg = ctx.channel_of(ctx.background);
  std::vector<int> bg_group{bg};
  for (int c : ctx.current_classes)
    if (c != ctx.background) bg_group.push_back(ctx.channel_of(c));

  Result r{0, Field(q.channels(), q.dims())};
  if (terms.empty()) return r;
  double sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (const auto& [oc, nc] : terms) {
      const double w = q_old.data()[oc * n + i];
      if (w == 0) continue;
      double d;
      if (nc == bg) {
        double s = 0;
        for (int ch : bg_group) s += q.data()[ch * n + i];
        sum += w * nll(s, &d);
        for (int ch : bg_group) r.grad.data()[ch * n + i] += w * d / static_cast<double>(n);
      } else {
        sum += w * nll(q.data()[nc * n + i], &d);
        r.grad.data()[nc * n + i] += w * d / static_cast<double>(n);
      }
    }
  }
  r.value = sum / static_cast<double>(n);
  return r;
}

namespace {

// Calls f(row, channel, flat voxel index, 1 / pooled length) for every voxel's contribution.
template <class F>
void for_each_pool_term(const Field& x, PodPooling mode, F&& f) {
  const Dims3 d = x.dims();
  const int C = x.channels();
  const std::size_t n = x.voxels();
  for (int c = 0; c < C; ++c) {
    for (int z = 0; z < d.d; ++z)
      for (int y = 0; y < d.h; ++y)
        for (int xx = 0; xx < d.w; ++xx) {
          const std::size_t idx = c * n + (static_cast<std::size_t>(z) * d.h + y) * d.w + xx;
          if (mode == PodPooling::single_axis) {
            // mean over H -> (D, W); mean over W -> (D, H); mean over D -> (H, W)
            f(z * d.w + xx, c, idx, 1.0 / d.h);
            f(d.d * d.w + z * d.h + y, c, idx, 1.0 / d.w);
            f(d.d * d.w + d.d * d.h + y * d.w + xx, c, idx, 1.0 / d.d);
          } else {
            // mean over (H, W) -> D; over (W, D) -> H; over (H, D) -> W
            f(z, c, idx, 1.0 / (double(d.h) * d.w));
            f(d.d + y, c, idx, 1.0 / (double(d.w) * d.d));
            f(d.d + d.h + xx, c, idx, 1.0 / (double(d.h) * d.d));
          }
        }
  }
}

int pooled_rows(Dims3 d, PodPooling mode) {
  return mode == PodPooling::single_axis ? d.w * d.d + d.h * d.d + d.h * d.w : d.h + d.w + d.d;
}

}  // namespace

Pooled pod3d_pool(const Field& x, PodPooling mode) {
  const Dims3 d = x.dims();
  if (d.d < 1 || d.h < 1 || d.w < 1 || x.channels() < 1) throw ShapeError("pod3d_pool: zero-sized axis");
  Pooled p{pooled_rows(d, mode), x.channels(), {}};
  p.v.assign(static_cast<std::size_t>(p.rows) * p.channels, 0.0);
  for_each_pool_term(x, mode, [&](int row, int c, std::size_t idx, double w) {
    p.v[static_cast<std::size_t>(row) * p.channels + c] += w * x.data()[idx];
  });
  return p;
}

PodResult pod3d_loss(const std::vector<Field>& pyr_new, const std::vector<Field>& pyr_old, double factor,
                     PodPooling mode) {
  if (pyr_new.size() != pyr_old.size() || pyr_new.empty()) throw ShapeError("pod3d_loss: stage mismatch");
  PodResult r;
  const double S = static_cast<double>(pyr_new.size());
  for (std::size_t s = 0; s < pyr_new.size(); ++s) {
    if (!pyr_new[s].same_shape(pyr_old[s])) throw ShapeError("pod3d_loss: stage " + std::to_string(s) + " shape mismatch");
    const Pooled a = pod3d_pool(pyr_new[s], mode);
    const Pooled b = pod3d_pool(pyr_old[s], mode);
    std::vector<double> diff(a.v.size());
    double dist = 0;
    for (std::size_t i = 0; i < diff.size(); ++i) {
      diff[i] = a.v[i] - b.v[i];
      dist += diff[i] * diff[i];
    }
    r.value += factor * dist / S;
    Field g(pyr_new[s].channels(), pyr_new[s].dims());
    for_each_pool_term(pyr_new[s], mode, [&](int row, int c, std::size_t idx, double w) {
      g.data()[idx] += factor / S * 2.0 * diff[static_cast<std::size_t>(row) * a.channels + c] * w;
    });
    r.grad.push_back(std::move(g));
  }
  return r;
}

VecResult neg_cos(std::span<const double> p, std::span<const double> z) {
  if (p.size() != z.size()) throw ShapeError("neg_cos: length mismatch");
  double pz = 0, pp = 0, zz = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    pz += p[i] * z[i];
    pp += p[i] * p[i];
    zz += z[i] * z[i];
  }
  if (pp == 0 || zz == 0) throw InvalidArgument("neg_cos: zero vector");
  const double np = std::sqrt(pp), nz = std::sqrt(zz);
  VecResult r;
  r.value = -pz / (np * nz);
  r.grad.resize(p.size());
  // d/dp of -<p,z>/(|p||z|) = -z/(|p||z|) + <p,z> p / (|p|^3 |z|)
  for (std::size_t i = 0; i < p.size(); ++i) r.grad[i] = -z[i] / (np * nz) + pz * p[i] / (pp * np * nz);
  return r;
}

Field softmax_backward(const Field& q, const Field& grad_q) {
  if (!q.same_shape(grad_q)) throw ShapeError("softmax_backward: shape mismatch");
  const std::size_t n = q.voxels();
  const int C = q.channels();
  Field g(C, q.dims());
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (int c = 0; c < C; ++c) s += q.data()[c * n + i] * grad_q.data()[c * n + i];
    for (int c = 0; c < C; ++c) g.data()[c * n + i] = q.data()[c * n + i] * (grad_q.data()[c * n + i] - s);
  }
  return g;
}

std::vector<double> deep_supervision_weights(int n_stages) {
  std::vector<double> w(n_stages);
  double s = 0;
  for (int i = 0; i < n_stages; ++i) s += (w[i] = std::ldexp(1.0, -i));
  for (auto& x : w) x /= s;
  return w;
}

}  // namespace contseg::losses
