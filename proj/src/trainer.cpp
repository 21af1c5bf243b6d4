// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

#include "contseg/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>

#include "contseg/ema.hpp"
#include "contseg/error.hpp"
#include "contseg/losses.hpp"
#include "contseg/metrics.hpp"
#include "contseg/optim.hpp"

namespace contseg {

losses::Field softmax_field(const Tensor4& logits) {
  losses::Field q(logits.channels(), logits.dims());
  const std::size_t n = logits.voxels();
  const int c = logits.channels();
  for (std::size_t i = 0; i < n; ++i) {
    double m = logits.data()[i];
    for (int k = 1; k < c; ++k) m = std::max(m, static_cast<double>(logits.data()[k * n + i]));
    double s = 0;
    for (int k = 0; k < c; ++k) s += (q.data()[k * n + i] = std::exp(logits.data()[k * n + i] - m));
    for (int k = 0; k < c; ++k) q.data()[k * n + i] /= s;
  }
  return q;
}

Tensor4 to_float(const losses::Field& f, double scale) {
  Tensor4 t(f.channels(), f.dims());
  for (std::size_t i = 0; i < f.size(); ++i) t.data()[i] = static_cast<float>(scale * f.data()[i]);
  return t;
}

std::vector<LabelMap> label_pyramid(const LabelMap& labels, int n_stages) {
  std::vector<LabelMap> out;
  out.push_back(labels);
  Dims3 d = labels.dims;
  for (int s = 1; s < n_stages; ++s) {
    d = conv_out_dims(d, 3, 2);
    LabelMap m(d);
    const int f = 1 << s;
    for (int z = 0; z < d.d; ++z)
      for (int y = 0; y < d.h; ++y)
        for (int x = 0; x < d.w; ++x) m.at(z, y, x) = labels.at(z * f, y * f, x * f);
    out.push_back(std::move(m));
  }
  return out;
}

std::vector<FeaturePyramid> source_features(std::span<const DecoderHead> heads, const DecoderHead& consumer,
                                            const FeaturePyramid& enc) {
  std::map<std::string, FeaturePyramid> memo;
  std::function<const FeaturePyramid&(const std::string&)> features = [&](const std::string& id) -> const FeaturePyramid& {
    if (auto it = memo.find(id); it != memo.end()) return it->second;
    auto h = std::find_if(heads.begin(), heads.end(), [&](const DecoderHead& x) { return x.head_id == id; });
    if (h == heads.end()) throw InvalidArgument("unknown FLS source head: " + id);
    std::vector<const FeaturePyramid*> src;
    for (const auto& s : h->fls_sources) src.push_back(&features(s));
    auto res = h->inference_net().forward(enc, src, nullptr);
    return memo.emplace(id, std::move(res.features)).first->second;
  };
  std::vector<FeaturePyramid> out;
  for (const auto& s : consumer.fls_sources) out.push_back(features(s));
  return out;
}

std::vector<Item> make_items(const Encoder& encoder, std::span<const DecoderHead> heads, const DecoderHead& head,
                             std::span<const Sample> samples) {
  std::vector<Item> items;
  items.reserve(samples.size());
  const int n = head.net.config().n_stages();
  for (const Sample& s : samples) {
    Item it;
    it.case_id = s.case_id;
    it.enc = encoder.forward(normalize_image(s.image), nullptr);
    it.fls = source_features(heads, head, it.enc);
    it.labels = label_pyramid(s.labels, n);
    it.slice_scores = s.bpr_scores;
    items.push_back(std::move(it));
  }
  return items;
}

void TrainLog::append(const TrainLog& other) { rows.insert(rows.end(), other.rows.begin(), other.rows.end()); }

std::string TrainLog::csv() const {
  std::ostringstream os;
  os << "epoch,loss,lr,wall_seconds\n";
  os.precision(9);
  for (const auto& r : rows) os << r.epoch << ',' << r.loss << ',' << r.lr << ',' << r.wall_seconds << '\n';
  return os.str();
}

TrainLog run_epochs(DecoderNet& net, std::span<const Item> items, const LossFn& loss, const EpochPlan& plan, Rng& rng,
                    const PruneMask* mask, EmaState* ema) {
  if (items.empty()) throw InvalidArgument("training set is empty");
  TrainLog log;
  ParamRefs params = net.params();
  Sgd opt(params, plan.momentum);
  const int iters = plan.iterations_per_epoch > 0 ? plan.iterations_per_epoch : static_cast<int>(items.size());
  std::vector<std::size_t> order(items.size());
  std::size_t cursor = order.size();
  const auto t0 = std::chrono::steady_clock::now();
  for (int e = 0; e < plan.epochs; ++e) {
    const double lr = plan.poly ? poly_lr(plan.lr, e, plan.epochs, plan.poly_exponent) : plan.lr;
    double total = 0;
    for (int it = 0; it < iters; ++it) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const std::size_t k = order[cursor++];
      const Item& item = items[k];
      std::vector<const FeaturePyramid*> fls;
      for (const auto& f : item.fls) fls.push_back(&f);
      DecoderNet::Cache cache;
      const auto out = net.forward(item.enc, fls, &cache);
      StepLoss sl = loss(out, k);
      total += sl.value;
      opt.zero_grad();
      net.backward(cache, sl.grads, false);
      if (mask && !mask->empty())
        for (std::size_t i = 0; i < params.size(); ++i)
          for (std::size_t j = 0; j < params[i]->size(); ++j)
            if (!mask->keep[i][j]) params[i]->grad[j] = 0.f;
      opt.step(lr);
      if (mask && !mask->empty())
        for (std::size_t i = 0; i < params.size(); ++i)
          for (std::size_t j = 0; j < params[i]->size(); ++j)
            if (!mask->keep[i][j]) params[i]->value[j] = 0.f;
      if (ema) ema_update(*ema, net, mask ? *mask : PruneMask{});
    }
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.rows.push_back({plan.epoch_offset + e, total / iters, lr, wall});
  }
  return log;
}

LossFn segmentation_loss(const DecoderHead& head, std::span<const Item> items, const TrainConfig& cfg) {
  // Channel labels per item and stage, computed once.
  auto targets = std::make_shared<std::vector<std::vector<std::vector<int>>>>();
  for (const Item& it : items) {
    std::vector<std::vector<int>> per_stage;
    for (const LabelMap& l : it.labels) {
      std::vector<int> ch(l.data.size());
      for (std::size_t i = 0; i < ch.size(); ++i) ch[i] = std::max(0, head.channel_of(l.data[i]));
      per_stage.push_back(std::move(ch));
    }
    targets->push_back(std::move(per_stage));
  }
  const int n = head.net.config().n_stages();
  auto weights = cfg.deep_supervision ? losses::deep_supervision_weights(n) : std::vector<double>{1.0};
  const bool aux = head.net.config().aux_bpr && cfg.aux_weight > 0;
  const double aux_w = cfg.aux_weight;
  return [targets, weights, aux, aux_w, items](const DecoderNet::Output& out, std::size_t k) {
    StepLoss sl;
    sl.grads.logits.resize(out.logits.size());
    for (std::size_t s = 0; s < weights.size(); ++s) {
      const losses::Field q = softmax_field(out.logits[s]);
      const auto r = losses::ce_dice(q, (*targets)[k][s]);
      sl.value += weights[s] * r.value;
      sl.grads.logits[s] = to_float(losses::softmax_backward(q, r.grad), weights[s]);
    }
    if (aux) {
      const Tensor4& a = out.aux;
      const Dims3 d = a.dims();
      const auto& sc = items[k].slice_scores;
      Tensor4 g(1, d);
      const double nv = static_cast<double>(d.voxels());
      double l = 0;
      for (int z = 0; z < d.d; ++z)
        for (int y = 0; y < d.h; ++y)
          for (int x = 0; x < d.w; ++x) {
            const double diff = a.at(0, z, y, x) - sc[z];
            l += diff * diff / nv;
            g.at(0, z, y, x) = static_cast<float>(aux_w * 2 * diff / nv);
          }
      sl.value += aux_w * l;
      sl.grads.aux = std::move(g);
    }
    return sl;
  };
}

TrainLog train_decoder(DecoderHead& head, std::span<const Item> items, const TrainConfig& cfg) {
  if (items.empty()) throw InvalidArgument("train_decoder: no training items");
  bool any = false;
  for (const Item& it : items)
    for (int v : it.labels[0].data)
      if (head.channel_of(v) > 0) {
        any = true;
        break;
      }
  if (!any) throw InvalidArgument("train_decoder: no item contains a class of head " + head.head_id);
  Rng rng(cfg.seed);
  const LossFn loss = segmentation_loss(head, items, cfg);
  TrainLog log;
  if (cfg.warmup_epochs > 0) {
    EpochPlan warm{cfg.warmup_epochs, cfg.warmup_lr, false, cfg.poly_exponent, cfg.momentum, cfg.iterations_per_epoch, 0};
    log.append(run_epochs(head.net, items, loss, warm, rng, &head.mask));
  }
  // Fresh optimizer: momentum starts from zero for the main phase.
  EpochPlan main{cfg.epochs, cfg.lr, true, cfg.poly_exponent, cfg.momentum, cfg.iterations_per_epoch, cfg.warmup_epochs};
  log.append(run_epochs(head.net, items, loss, main, rng, &head.mask));
  return log;
}

TrainLog retrain_decoder(DecoderHead& head, std::span<const Item> items, const TrainConfig& cfg, int epochs,
                         double lr, int iterations_per_epoch, int epoch_offset) {
  Rng rng(cfg.seed + 0x51ed270b27a6f3ULL * static_cast<std::uint64_t>(epoch_offset + 1));
  EpochPlan plan{epochs, lr, true, cfg.poly_exponent, cfg.momentum, iterations_per_epoch, epoch_offset};
  return run_epochs(head.net, items, segmentation_loss(head, items, cfg), plan, rng, &head.mask);
}

Tensor4 head_posterior(const DecoderNet& net, const Item& item) {
  std::vector<const FeaturePyramid*> fls;
  for (const auto& f : item.fls) fls.push_back(&f);
  auto out = net.forward(item.enc, fls, nullptr);
  Tensor4 p;
  kernels::softmax_channels(out.logits[0], p);
  return p;
}

std::vector<double> case_dsc(const DecoderHead& head, const DecoderNet& net, std::span<const Item> items) {
  std::vector<double> out;
  for (const Item& it : items) {
    const Tensor4 p = head_posterior(net, it);
    const std::size_t n = p.voxels();
    double sum = 0;
    for (std::size_t c = 0; c < head.class_ids.size(); ++c) {
      Mask pred(p.dims()), gt(p.dims());
      const int ch = static_cast<int>(c) + 1;
      for (std::size_t i = 0; i < n; ++i) {
        int best = 0;
        for (int k = 1; k < p.channels(); ++k)
          if (p.data()[k * n + i] > p.data()[best * n + i]) best = k;
        pred.data[i] = best == ch;
        gt.data[i] = it.labels[0].data[i] == head.class_ids[c];
      }
      sum += dsc(pred, gt);
    }
    out.push_back(sum / static_cast<double>(head.class_ids.size()));
  }
  return out;
}

double validation_dsc(const DecoderHead& head, std::span<const Item> items) {
  if (items.empty()) throw InvalidArgument("validation set is empty");
  return percentile_mean(case_dsc(head, head.net, items));
}

}  // namespace contseg
