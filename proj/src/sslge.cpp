// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

#include "contseg/sslge.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <numbers>
#include <numeric>

#include "contseg/error.hpp"
#include "contseg/losses.hpp"
#include "contseg/metrics.hpp"
#include "contseg/optim.hpp"

namespace contseg {

namespace {

constexpr float kHuMin = -1024.f;
constexpr float kHuMax = 1024.f;

bool valid_range(const Range& r) { return std::isfinite(r.first) && std::isfinite(r.second) && r.first <= r.second; }
bool valid_prob(double p) { return p >= 0 && p <= 1; }

double draw(const Range& r, Rng& rng) {
  if (r.first == r.second) return r.first;
  return std::uniform_real_distribution<double>(r.first, r.second)(rng);
}

bool trigger(double p, Rng& rng) { return p > 0 && std::uniform_real_distribution<double>(0, 1)(rng) < p; }

void spatial(Sample& s, double angle_deg, double scale) {
  const Dims3 d = s.image.dims;
  const double th = angle_deg * std::numbers::pi / 180.0;
  const double c = std::cos(th), sn = std::sin(th);
  const double cy = (d.h - 1) / 2.0, cx = (d.w - 1) / 2.0;
  Image img(d, kHuMin);
  LabelMap lab(d, 0);
  for (int y = 0; y < d.h; ++y)
    for (int x = 0; x < d.w; ++x) {
      const double dy = y - cy, dx = x - cx;
      const double sy = (c * dy + sn * dx) / scale + cy;
      const double sx = (-sn * dy + c * dx) / scale + cx;
      const int ny = static_cast<int>(std::lround(sy)), nx = static_cast<int>(std::lround(sx));
      const bool nearest_in = ny >= 0 && ny < d.h && nx >= 0 && nx < d.w;
      const int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
      const double fy = sy - y0, fx = sx - x0;
      for (int z = 0; z < d.d; ++z) {
        if (nearest_in) lab.at(z, y, x) = s.labels.at(z, ny, nx);
        double acc = 0;
        for (int a = 0; a < 2; ++a)
          for (int b = 0; b < 2; ++b) {
            const int yy = y0 + a, xx = x0 + b;
            const double w = (a ? fy : 1 - fy) * (b ? fx : 1 - fx);
            const double v = (yy >= 0 && yy < d.h && xx >= 0 && xx < d.w) ? s.image.at(z, yy, xx) : kHuMin;
            acc += w * v;
          }
        img.at(z, y, x) = static_cast<float>(acc);
      }
    }
  s.image = std::move(img);
  if (!s.labels.data.empty()) s.labels = std::move(lab);
}

// Applies f to every 1D line along `axis` (0 = z, 1 = y, 2 = x).
template <class F>
void for_lines(Image& img, int axis, F&& f) {
  const Dims3 d = img.dims;
  const int n = axis == 0 ? d.d : axis == 1 ? d.h : d.w;
  std::vector<double> line(n);
  auto idx = [&](int a, int b, int k) {
    if (axis == 0) return img.index(k, a, b);
    if (axis == 1) return img.index(a, k, b);
    return img.index(a, b, k);
  };
  const int na = axis == 0 ? d.h : d.d;
  const int nb = axis == 2 ? d.h : d.w;
  for (int a = 0; a < na; ++a)
    for (int b = 0; b < nb; ++b) {
      for (int k = 0; k < n; ++k) line[k] = img.data[idx(a, b, k)];
      f(line);
      for (int k = 0; k < n; ++k) img.data[idx(a, b, k)] = static_cast<float>(line[k]);
    }
}

void blur(Image& img, double sigma) {
  const int r = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
  std::vector<double> k(2 * r + 1);
  double sum = 0;
  for (int i = -r; i <= r; ++i) sum += (k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma)));
  for (auto& v : k) v /= sum;
  for (int axis = 0; axis < 3; ++axis)
    for_lines(img, axis, [&](std::vector<double>& line) {
      const int n = static_cast<int>(line.size());
      std::vector<double> out(n, 0);
      for (int i = 0; i < n; ++i)
        for (int j = -r; j <= r; ++j) out[i] += k[j + r] * line[std::clamp(i + j, 0, n - 1)];
      line = std::move(out);
    });
}

// Nearest downsampling by `factor` followed by linear upsampling.
void lowres(Image& img, int axis, double factor) {
  for_lines(img, axis, [&](std::vector<double>& line) {
    const int n = static_cast<int>(line.size());
    const int m = std::max(1, static_cast<int>(std::lround(n / factor)));
    if (m >= n) return;
    std::vector<double> low(m);
    for (int i = 0; i < m; ++i) low[i] = line[std::min(n - 1, static_cast<int>((i + 0.5) * n / m))];
    for (int o = 0; o < n; ++o) {
      const double u = std::clamp((o + 0.5) * m / n - 0.5, 0.0, static_cast<double>(m - 1));
      const int i0 = static_cast<int>(std::floor(u));
      const int i1 = std::min(m - 1, i0 + 1);
      line[o] = low[i0] + (u - i0) * (low[i1] - low[i0]);
    }
  });
}

void gamma(Image& img, double g, bool invert) {
  if (invert)
    for (auto& v : img.data) v = -v;
  const auto [lo, hi] = std::minmax_element(img.data.begin(), img.data.end());
  const double mn = *lo, span = *hi - *lo + 1e-7;
  for (auto& v : img.data) v = static_cast<float>(std::pow((v - mn) / span, g) * span + mn);
  if (invert)
    for (auto& v : img.data) v = -v;
}

template <class T>
void mirror(Volume<T>& v, int axis) {
  if (v.data.empty()) return;
  const Dims3 d = v.dims;
  Volume<T> out(d);
  for (int z = 0; z < d.d; ++z)
    for (int y = 0; y < d.h; ++y)
      for (int x = 0; x < d.w; ++x)
        out.at(z, y, x) = axis == 1 ? v.at(z, d.h - 1 - y, x) : v.at(z, y, d.w - 1 - x);
  v = std::move(out);
}

void sgd_cosine_step(Sgd& opt, double base, int epoch, int epochs) {
  opt.step(0.5 * base * (1 + std::cos(std::numbers::pi * epoch / epochs)));
}

std::vector<double> normalized(std::span<const double> v) {
  double n = 0;
  for (double x : v) n += x * x;
  n = std::sqrt(std::max(n, 1e-24));
  std::vector<double> out(v.begin(), v.end());
  for (auto& x : out) x /= n;
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Augmentation

void AugmentationScheme::validate() const {
  for (const Range* r : {&rotation_range, &scale_range, &noise_sigma_range, &blur_sigma_range, &intensity_scale_range,
                         &lowres_axial_factor, &lowres_inplane_factor, &gamma_range})
    if (!valid_range(*r)) throw ConfigError("augmentation range is not a valid interval");
  if (scale_range.first <= 0 || gamma_range.first <= 0 || intensity_scale_range.first < 0)
    throw ConfigError("augmentation scale and gamma ranges must be positive");
  if (noise_sigma_range.first < 0 || blur_sigma_range.first < 0) throw ConfigError("sigma ranges must be non-negative");
  if (lowres_axial_factor.first < 1 || lowres_inplane_factor.first < 1) throw ConfigError("low-res factors must be >= 1");
  for (double p : {trigger.spatial, trigger.noise, trigger.blur, trigger.intensity, trigger.lowres, trigger.gamma,
                   trigger.mirror, gamma_invert_prob})
    if (!valid_prob(p)) throw ConfigError("augmentation probability outside [0, 1]");
  for (int a : mirror_axes)
    if (a != 1 && a != 2) throw ConfigError("mirror axes must be 1 (y) or 2 (x); the axial axis is never flipped");
}

AugmentationScheme AugmentationScheme::identity() {
  AugmentationScheme s;
  s.trigger = {0, 0, 0, 0, 0, 0, 0};
  s.gamma_invert_prob = 0;
  return s;
}

Sample augment_view(const Sample& sample, const AugmentationScheme& scheme, Rng& rng) {
  scheme.validate();
  Sample s = sample;
  const TriggerProbs& p = scheme.trigger;
  if (trigger(p.spatial, rng)) {
    const double angle = draw(scheme.rotation_range, rng);
    const double scale = draw(scheme.scale_range, rng);
    if (angle != 0 || scale != 1) spatial(s, angle, scale);
  }
  if (trigger(p.noise, rng)) {
    const double sigma = draw(scheme.noise_sigma_range, rng) * 1024.0;
    if (sigma > 0) {
      std::normal_distribution<double> nd(0, sigma);
      for (auto& v : s.image.data) v = static_cast<float>(v + nd(rng));
    }
  }
  if (trigger(p.blur, rng)) {
    const double sigma = draw(scheme.blur_sigma_range, rng);
    if (sigma > 0) blur(s.image, sigma);
  }
  if (trigger(p.intensity, rng)) {
    const double f = draw(scheme.intensity_scale_range, rng);
    for (auto& v : s.image.data) v = static_cast<float>(v * f);
  }
  if (trigger(p.lowres, rng)) {
    const double fa = draw(scheme.lowres_axial_factor, rng);
    const double fi = draw(scheme.lowres_inplane_factor, rng);
    lowres(s.image, 0, fa);
    lowres(s.image, 1, fi);
    lowres(s.image, 2, fi);
  }
  if (scheme.gamma_enabled && trigger(p.gamma, rng)) {
    const bool invert = trigger(scheme.gamma_invert_prob, rng);
    gamma(s.image, draw(scheme.gamma_range, rng), invert);
  }
  for (int axis : scheme.mirror_axes)
    if (trigger(p.mirror, rng)) {
      mirror(s.image, axis);
      mirror(s.labels, axis);
    }
  for (auto& v : s.image.data) v = std::clamp(v, kHuMin, kHuMax);
  return s;
}

// ---------------------------------------------------------------------------
// Embedding and predictor

std::vector<double> embed(const FeaturePyramid& features) {
  const Tensor4& t = features.back();
  const std::size_t n = t.voxels();
  std::vector<double> e(t.channels(), 0);
  for (int c = 0; c < t.channels(); ++c) {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) s += t.data()[c * n + i];
    e[c] = s / static_cast<double>(n);
  }
  return e;
}

Tensor4 embed_backward(const FeaturePyramid& features, std::span<const double> grad) {
  const Tensor4& t = features.back();
  if (static_cast<int>(grad.size()) != t.channels()) throw ShapeError("embedding gradient width mismatch");
  Tensor4 g(t.channels(), t.dims());
  const std::size_t n = t.voxels();
  for (int c = 0; c < t.channels(); ++c)
    std::fill(g.data() + c * n, g.data() + (c + 1) * n, static_cast<float>(grad[c] / static_cast<double>(n)));
  return g;
}

Predictor::Predictor(int dim, Rng& rng)
    : dim_(dim),
      w1_("pred.l1.weight", {dim, dim}, false),
      b1_("pred.l1.bias", {dim}, false),
      w2_("pred.l2.weight", {dim, dim}, false),
      b2_("pred.l2.bias", {dim}, false) {
  if (dim < 1) throw InvalidArgument("predictor width must be positive");
  init_he_normal(w1_, dim, rng);
  init_he_normal(w2_, dim, rng);
}

std::vector<double> Predictor::forward(std::span<const double> x, Cache* cache) const {
  if (static_cast<int>(x.size()) != dim_) throw ShapeError("predictor input width mismatch");
  std::vector<double> h(dim_), y(dim_);
  for (int i = 0; i < dim_; ++i) {
    double s = b1_.value[i];
    for (int j = 0; j < dim_; ++j) s += w1_.value[i * dim_ + j] * x[j];
    h[i] = std::max(0.0, s);
  }
  for (int i = 0; i < dim_; ++i) {
    double s = b2_.value[i];
    for (int j = 0; j < dim_; ++j) s += w2_.value[i * dim_ + j] * h[j];
    y[i] = s;
  }
  if (cache) {
    cache->x.assign(x.begin(), x.end());
    cache->h = h;
  }
  return y;
}

std::vector<double> Predictor::backward(const Cache& cache, std::span<const double> grad) {
  std::vector<double> gh(dim_, 0), gx(dim_, 0);
  for (int i = 0; i < dim_; ++i) {
    b2_.grad[i] += static_cast<float>(grad[i]);
    for (int j = 0; j < dim_; ++j) {
      w2_.grad[i * dim_ + j] += static_cast<float>(grad[i] * cache.h[j]);
      gh[j] += grad[i] * w2_.value[i * dim_ + j];
    }
  }
  for (int i = 0; i < dim_; ++i) {
    if (cache.h[i] <= 0) continue;
    b1_.grad[i] += static_cast<float>(gh[i]);
    for (int j = 0; j < dim_; ++j) {
      w1_.grad[i * dim_ + j] += static_cast<float>(gh[i] * cache.x[j]);
      gx[j] += gh[i] * w1_.value[i * dim_ + j];
    }
  }
  return gx;
}

ParamRefs Predictor::params() { return {&w1_, &b1_, &w2_, &b2_}; }

SimSiamLoss simsiam_loss(std::span<const double> p1, std::span<const double> p2, std::span<const double> z1,
                         std::span<const double> z2) {
  const auto a = losses::neg_cos(p1, z2);
  const auto b = losses::neg_cos(p2, z1);
  SimSiamLoss r;
  r.value = 0.5 * a.value + 0.5 * b.value;
  r.grad_p1 = a.grad;
  r.grad_p2 = b.grad;
  for (auto& g : r.grad_p1) g *= 0.5;
  for (auto& g : r.grad_p2) g *= 0.5;
  r.grad_z1.assign(z1.size(), 0.0);
  r.grad_z2.assign(z2.size(), 0.0);
  return r;
}

TrainLog simsiam_pretrain(std::span<const Sample> data, Encoder& encoder, Predictor& predictor, const SslConfig& cfg) {
  if (data.empty()) throw InvalidArgument("simsiam_pretrain: no data");
  if (predictor.dim() != encoder.embedding_dim()) throw ShapeError("predictor width differs from the embedding width");
  if (cfg.epochs < 1 || cfg.batches_per_epoch < 1) throw ConfigError("SSL budget must be positive");
  Rng rng(cfg.seed);
  ParamRefs params = encoder.trainable_params();
  for (ParamArray* p : predictor.params()) params.push_back(p);
  Sgd opt(params, cfg.momentum);
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  TrainLog log;
  const auto t0 = std::chrono::steady_clock::now();
  for (int e = 0; e < cfg.epochs; ++e) {
    double total = 0;
    for (int b = 0; b < cfg.batches_per_epoch; ++b) {
      const Sample& s = data[pick(rng)];
      const Sample v1 = augment_view(s, cfg.augmentation, rng);
      const Sample v2 = augment_view(s, cfg.augmentation, rng);
      Encoder::Cache c1, c2;
      const FeaturePyramid f1 = encoder.forward(normalize_image(v1.image), &c1);
      const FeaturePyramid f2 = encoder.forward(normalize_image(v2.image), &c2);
      const auto z1 = embed(f1), z2 = embed(f2);
      Predictor::Cache pc1, pc2;
      const auto p1 = predictor.forward(z1, &pc1);
      const auto p2 = predictor.forward(z2, &pc2);
      const auto loss = simsiam_loss(p1, p2, z1, z2);
      total += loss.value;
      opt.zero_grad();
      const auto g1 = predictor.backward(pc1, loss.grad_p1);
      const auto g2 = predictor.backward(pc2, loss.grad_p2);
      FeaturePyramid s1(f1.size()), s2(f2.size());
      s1.back() = embed_backward(f1, g1);
      s2.back() = embed_backward(f2, g2);
      encoder.backward(c1, std::move(s1));
      encoder.backward(c2, std::move(s2));
      sgd_cosine_step(opt, cfg.lr, e, cfg.epochs);
    }
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.rows.push_back({e, total / cfg.batches_per_epoch, 0.5 * cfg.lr * (1 + std::cos(std::numbers::pi * e / cfg.epochs)),
                        wall});
  }
  return log;
}

// ---------------------------------------------------------------------------
// Supervised general encoder

GeResult train_ge_supervised(const Encoder& encoder, const TaskRegistry& registry,
                             const DatasetDescriptor& comprehensive, std::span<const Sample> train,
                             std::span<const Sample> val, const GeConfig& cfg) {
  if (train.empty()) throw InvalidArgument("train_ge_supervised: no training cases");
  if (cfg.epochs < 1) throw ConfigError("GE epochs must be positive");
  GeResult r;
  r.encoder = encoder;
  r.encoder.set_frozen(false);
  for (int c : registry.all_classes())
    if (std::find(comprehensive.class_set.begin(), comprehensive.class_set.end(), c) ==
        comprehensive.class_set.end())
      r.warnings.push_back("comprehensive dataset does not label " + registry.anatomy(c).name);

  Rng rng(cfg.seed);
  for (int c : comprehensive.class_set) {
    HeadSpec spec{"ge." + registry.anatomy(c).name, {c}, {}, false, false, cfg.decoder_base};
    r.heads.push_back(make_head(spec, r.encoder.config(), {}, rng));
  }
  const int n_stages = r.heads.front().net.config().n_stages();
  std::vector<Item> label_items;
  std::vector<Tensor4> inputs;
  for (const Sample& s : train) {
    Item it;
    it.case_id = s.case_id;
    it.labels = label_pyramid(s.labels, n_stages);
    it.slice_scores = s.bpr_scores;
    label_items.push_back(std::move(it));
    inputs.push_back(normalize_image(s.image));
  }
  TrainConfig tc;
  tc.deep_supervision = cfg.deep_supervision;
  tc.aux_weight = 0;
  std::vector<LossFn> losses_fn;
  for (const auto& h : r.heads) losses_fn.push_back(segmentation_loss(h, label_items, tc));

  ParamRefs params = r.encoder.trainable_params();
  for (auto& h : r.heads)
    for (ParamArray* p : h.net.params()) params.push_back(p);
  Sgd opt(params, cfg.momentum);
  const int iters = cfg.iterations_per_epoch > 0 ? cfg.iterations_per_epoch : static_cast<int>(train.size());
  std::vector<std::size_t> order(train.size());
  std::size_t cursor = order.size();
  const auto t0 = std::chrono::steady_clock::now();
  for (int e = 0; e < cfg.epochs; ++e) {
    const double lr = poly_lr(cfg.lr, e, cfg.epochs, cfg.poly_exponent);
    double total = 0;
    for (int it = 0; it < iters; ++it) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const std::size_t k = order[cursor++];
      opt.zero_grad();
      Encoder::Cache ec;
      const FeaturePyramid f = r.encoder.forward(inputs[k], &ec);
      FeaturePyramid eg(f.size());
      for (std::size_t h = 0; h < r.heads.size(); ++h) {
        DecoderNet::Cache hc;
        const auto out = r.heads[h].net.forward(f, {}, &hc);
        const StepLoss sl = losses_fn[h](out, k);
        total += sl.value;
        const FeaturePyramid g = r.heads[h].net.backward(hc, sl.grads, true);
        for (std::size_t s = 0; s < g.size(); ++s) accumulate(eg[s], g[s]);
      }
      r.encoder.backward(ec, std::move(eg));
      opt.step(lr);
    }
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.log.rows.push_back({e, total / iters, lr, wall});
  }
  freeze_encoder(r.encoder);
  if (!val.empty())
    for (const auto& h : r.heads) {
      const auto vitems = make_items(r.encoder, {}, h, val);
      r.val_dsc[h.class_ids.front()] = validation_dsc(h, vitems);
    }
  return r;
}

// ---------------------------------------------------------------------------
// Momentum queue

MomentumQueue::MomentumQueue(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw InvalidArgument("queue capacity must be positive");
}

void MomentumQueue::push(std::vector<double> v) {
  if (entries_.size() == capacity_) entries_.pop_front();
  entries_.push_back(std::move(v));
}

InfoNceResult info_nce(std::span<const double> q, std::span<const double> k, const MomentumQueue& queue, double tau) {
  if (q.size() != k.size()) throw ShapeError("info_nce: query and key widths differ");
  if (!(tau > 0)) throw InvalidArgument("info_nce: temperature must be positive");
  const std::size_t d = q.size();
  double qn = 0;
  for (double x : q) qn += x * x;
  qn = std::sqrt(std::max(qn, 1e-24));
  const auto qh = normalized(q);
  std::vector<std::vector<double>> keys{normalized(k)};
  for (const auto& n : queue.entries()) {
    if (n.size() != d) throw ShapeError("info_nce: queue entry width differs");
    keys.push_back(normalized(n));
  }
  std::vector<double> logits(keys.size());
  for (std::size_t j = 0; j < keys.size(); ++j)
    logits[j] = std::inner_product(qh.begin(), qh.end(), keys[j].begin(), 0.0) / tau;
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0;
  for (double l : logits) z += std::exp(l - m);
  InfoNceResult r;
  r.value = -(logits[0] - m - std::log(z));
  // dL/dq_hat = (sum_j softmax_j key_j - key_0) / tau.
  std::vector<double> g(d, 0);
  for (std::size_t j = 0; j < keys.size(); ++j) {
    const double w = std::exp(logits[j] - m) / z - (j == 0 ? 1.0 : 0.0);
    for (std::size_t i = 0; i < d; ++i) g[i] += w * keys[j][i] / tau;
  }
  const double dot = std::inner_product(qh.begin(), qh.end(), g.begin(), 0.0);
  r.grad_q.resize(d);
  for (std::size_t i = 0; i < d; ++i) r.grad_q[i] = (g[i] - qh[i] * dot) / qn;
  return r;
}

// ---------------------------------------------------------------------------
// Momentum-queue fine-tuning

Encoder momentum_finetune(const Encoder& encoder, const std::vector<FinetuneSet>& datasets, MomentumQueue& queue,
                          const FinetuneConfig& cfg, FinetuneReport* report) {
  if (datasets.empty()) throw InvalidArgument("momentum_finetune: no datasets");
  if (cfg.epochs < 1) throw ConfigError("fine-tune epochs must be positive");
  Encoder enc = encoder;
  enc.set_frozen(false);
  Rng rng(cfg.seed);
  FinetuneReport local;
  FinetuneReport& rep = report ? *report : local;
  std::vector<std::vector<double>> ema;
  if (cfg.ema_encoder)
    for (const ParamArray* p : std::as_const(enc).params()) ema.emplace_back(p->value.begin(), p->value.end());
  TrainConfig tc;
  tc.aux_weight = 0;
  int epoch_counter = 0;
  const auto t0 = std::chrono::steady_clock::now();
  for (const FinetuneSet& set : datasets) {
    if (set.samples.empty()) throw InvalidArgument("momentum_finetune: dataset " + set.dataset_id + " is empty");
    HeadSpec spec{"ft." + set.dataset_id, set.classes, {}, false, false, cfg.decoder_base};
    DecoderHead head = make_head(spec, enc.config(), {}, rng);
    {
      std::uint64_t h = 0xcbf29ce484222325ULL;
      for (const ParamArray* p : std::as_const(head.net).params()) {
        const auto* b = reinterpret_cast<const unsigned char*>(p->value.data());
        for (std::size_t i = 0; i < p->size() * sizeof(float); ++i) h = (h ^ b[i]) * 0x100000001b3ULL;
      }
      rep.decoder_init_digests.push_back(h);
    }
    ParamRefs params = enc.trainable_params();
    for (ParamArray* p : head.net.params()) params.push_back(p);
    Sgd opt(params, cfg.momentum);
    const int n_stages = head.net.config().n_stages();
    const int iters = cfg.iterations_per_epoch > 0 ? cfg.iterations_per_epoch : static_cast<int>(set.samples.size());
    std::vector<std::size_t> order(set.samples.size());
    std::size_t cursor = order.size();
    for (int e = 0; e < cfg.epochs; ++e, ++epoch_counter) {
      double total = 0;
      for (int it = 0; it < iters; ++it) {
        if (cursor == order.size()) {
          std::iota(order.begin(), order.end(), std::size_t{0});
          std::shuffle(order.begin(), order.end(), rng);
          cursor = 0;
        }
        const Sample& s = set.samples[order[cursor++]];
        const Sample v1 = augment_view(s, cfg.augmentation, rng);
        const Sample v2 = augment_view(s, cfg.augmentation, rng);
        Item item;
        item.labels = label_pyramid(v1.labels, n_stages);
        item.slice_scores = v1.bpr_scores;
        const LossFn loss = segmentation_loss(head, std::span<const Item>(&item, 1), tc);
        Encoder::Cache ec;
        const FeaturePyramid f = enc.forward(normalize_image(v1.image), &ec);
        DecoderNet::Cache hc;
        const auto out = head.net.forward(f, {}, &hc);
        const StepLoss sl = loss(out, 0);
        double step_loss = sl.value;
        opt.zero_grad();
        FeaturePyramid eg = head.net.backward(hc, sl.grads, true);
        if (cfg.use_queue) {
          const auto key = normalized(embed(enc.forward(normalize_image(v2.image), nullptr)));
          if (cfg.queue_weight > 0) {
            const auto nce = info_nce(embed(f), key, queue, cfg.temperature);
            step_loss += cfg.queue_weight * nce.value;
            std::vector<double> g = nce.grad_q;
            for (auto& x : g) x *= cfg.queue_weight;
            accumulate(eg.back(), embed_backward(f, g));
          }
          queue.push(key);
        }
        enc.backward(ec, std::move(eg));
        opt.step(cfg.lr);
        if (cfg.ema_encoder) {
          const ConstParamRefs ps = std::as_const(enc).params();
          for (std::size_t i = 0; i < ps.size(); ++i)
            for (std::size_t j = 0; j < ps[i]->size(); ++j)
              ema[i][j] = cfg.ema_decay * ema[i][j] + (1 - cfg.ema_decay) * ps[i]->value[j];
        }
        rep.step_losses.push_back(step_loss);
        total += step_loss;
      }
      const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      rep.log.rows.push_back({epoch_counter, total / iters, cfg.lr, wall});
    }
  }
  if (cfg.ema_encoder) {
    ParamRefs ps = enc.storage_params();
    for (std::size_t i = 0; i < ps.size(); ++i)
      for (std::size_t j = 0; j < ps[i]->size(); ++j) ps[i]->value[j] = static_cast<float>(ema[i][j]);
  }
  return enc;
}

}  // namespace contseg
