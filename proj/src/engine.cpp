// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

#include "contseg/engine.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "contseg/error.hpp"
#include "contseg/losses.hpp"
#include "contseg/volume_io.hpp"

namespace contseg {

namespace fs = std::filesystem;
using OJson = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Corpus

Corpus Corpus::generate(const TaskRegistry& registry) {
  Corpus c;
  c.registry = registry;
  for (const auto& d : registry.datasets) c.samples[d.dataset_id] = generate_dataset(d, registry);
  return c;
}

std::vector<Sample> Corpus::split(const std::string& dataset_id, Split s) const {
  auto it = samples.find(dataset_id);
  if (it == samples.end()) throw InvalidArgument("corpus has no dataset " + dataset_id);
  std::vector<Sample> out;
  for (const Sample& x : it->second)
    if (x.split == s) out.push_back(x);
  return out;
}

std::vector<Sample> Corpus::with_class(int class_id, Split s) const {
  std::vector<Sample> out;
  for (const auto& d : registry.datasets) {
    if (std::find(d.class_set.begin(), d.class_set.end(), class_id) == d.class_set.end()) continue;
    for (auto& x : split(d.dataset_id, s)) out.push_back(std::move(x));
  }
  return out;
}

const Sample& Corpus::probe() const {
  const auto& first = samples.at(registry.datasets.at(0).dataset_id);
  for (const Sample& s : first)
    if (s.split == Split::test) return s;
  throw InvalidArgument("probe dataset has no test case");
}

// ---------------------------------------------------------------------------
// Strategy

std::string to_string(StrategyKind k) {
  switch (k) {
    case StrategyKind::clnet: return "clnet";
    case StrategyKind::naive: return "naive";
    case StrategyKind::mib: return "mib";
    case StrategyKind::plop: return "plop";
  }
  return "clnet";
}

StrategyKind strategy_from_string(const std::string& s) {
  if (s == "clnet") return StrategyKind::clnet;
  if (s == "naive") return StrategyKind::naive;
  if (s == "mib") return StrategyKind::mib;
  if (s == "plop") return StrategyKind::plop;
  throw ConfigError("unknown strategy: " + s);
}

void BaselineConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("baseline lr must be positive");
  if (epochs < 1 || iterations_per_epoch < 1) throw ConfigError("baseline budget must be positive");
  if (momentum < 0 || momentum >= 1) throw ConfigError("baseline momentum outside [0, 1)");
  if (!(unkd_weight >= 0) || !(pod_factor >= 0)) throw ConfigError("baseline loss weights must be non-negative");
  if (!(pseudo_threshold > 0 && pseudo_threshold <= 1)) throw ConfigError("pseudo-label threshold outside (0, 1]");
}

void LearnerStrategy::validate() const {
  if (kind != StrategyKind::clnet) baseline.validate();
}

// ---------------------------------------------------------------------------
// Helpers

namespace {

std::uint64_t fnv1a_bytes(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t seed_for(std::uint64_t seed, const std::string& tag) {
  return fnv1a_bytes(tag.data(), tag.size(), 0xcbf29ce484222325ULL ^ (seed * 0x9e3779b97f4a7c15ULL));
}

std::optional<std::size_t> owner(const std::vector<DecoderHead>& heads, int class_id) {
  for (std::size_t i = 0; i < heads.size(); ++i)
    if (heads[i].channel_of(class_id) > 0) return i;
  return std::nullopt;
}

double inference_val_dsc(const DecoderHead& h, std::span<const Item> val) {
  return percentile_mean(case_dsc(h, h.inference_net(), val));
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
  return buf;
}

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

struct NewHead {
  double unpruned_val = 0;
};

// Creates, trains, prunes and syncs one head, then registers it in the model.
NewHead add_head(Model& m, const HeadSpec& spec, const std::vector<Sample>& train, const std::vector<Sample>& val,
                 const EngineConfig& cfg, StepResult& out) {
  if (train.empty()) throw InvalidArgument("no labelled training cases for head " + spec.head_id);
  if (val.empty()) throw InvalidArgument("no validation cases for head " + spec.head_id);
  Rng rng(seed_for(cfg.seed, "init/" + spec.head_id));
  DecoderHead h = make_head(spec, m.encoder.config(), m.heads, rng);
  const auto items = make_items(m.encoder, m.heads, h, train);
  const auto vitems = make_items(m.encoder, m.heads, h, val);
  TrainConfig tc = cfg.train;
  tc.seed = seed_for(cfg.seed, "train/" + spec.head_id);
  TrainLog log = train_decoder(h, items, tc);
  NewHead res;
  res.unpruned_val = validation_dsc(h, vitems);
  if (cfg.prune) {
    int offset = static_cast<int>(log.rows.size());
    LthHooks hooks;
    hooks.items = static_cast<int>(items.size());
    hooks.train = [&](DecoderHead& hh, int epochs, int iters) {
      log.append(retrain_decoder(hh, items, tc, epochs, tc.lr, iters, offset));
      offset += epochs;
    };
    hooks.validate = [&](const DecoderHead& hh) { return validation_dsc(hh, vitems); };
    out.prune_records.push_back(lth_prune(h, hooks, cfg.lth));
  }
  sync_after_prune(h);
  out.val_dsc[h.head_id] = inference_val_dsc(h, vitems);
  out.log.append(log);

  BprBounds b = full_bounds();
  if (spec.is_gtv) {
    if (!spec.fls_sources.empty() && m.bounds.count(spec.fls_sources.front())) b = m.bounds.at(spec.fls_sources.front());
  } else {
    b = decoder_bounds(class_slice_scores(train, spec.class_ids.front()));
  }
  m.bounds[h.head_id] = b;
  m.heads.push_back(std::move(h));
  return res;
}

HeadSpec spec_for(const Model& m, const AnatomySpec& a, const EngineConfig& cfg) {
  HeadSpec spec{a.name, {a.class_id}, {}, a.is_gtv, cfg.aux_bpr, cfg.decoder_base};
  if (a.is_gtv && cfg.fls && a.host_class)
    if (auto host = owner(m.heads, *a.host_class)) spec.fls_sources = {m.heads[*host].head_id};
  return spec;
}

// Non-lesion anatomies first so lesion heads find their host.
std::vector<int> head_order(const TaskRegistry& reg, std::vector<int> classes) {
  std::stable_sort(classes.begin(), classes.end(), [&](int a, int b) {
    const bool ga = reg.anatomy(a).is_gtv, gb = reg.anatomy(b).is_gtv;
    if (ga != gb) return !ga;
    return a < b;
  });
  return classes;
}

void clnet_step(Model& m, const Corpus& corpus, const DatasetDescriptor& ds, const EngineConfig& cfg,
                StepResult& out) {
  const auto train = corpus.split(ds.dataset_id, Split::train);
  const auto val = corpus.split(ds.dataset_id, Split::val);
  const auto classes = head_order(corpus.registry, ds.class_set);
  // Existing classes: EMA fine-tuning on the new data only.
  std::vector<std::size_t> updated;
  for (int c : classes) {
    const auto idx = owner(m.heads, c);
    if (!idx || std::find(updated.begin(), updated.end(), *idx) != updated.end()) continue;
    updated.push_back(*idx);
    const auto items = make_items(m.encoder, m.heads, m.heads[*idx], train);
    const auto vitems = make_items(m.encoder, m.heads, m.heads[*idx], val);
    DecoderHead& h = m.heads[*idx];
    ContinualConfig cc = cfg.continual;
    cc.train.seed = seed_for(cfg.seed, "ema/" + ds.dataset_id + "/" + h.head_id);
    out.log.append(continual_update(h, items, vitems, cc).log);
    out.val_dsc[h.head_id] = inference_val_dsc(h, vitems);
  }
  for (int c : classes) {
    if (owner(m.heads, c)) continue;
    add_head(m, spec_for(m, corpus.registry.anatomy(c), cfg), train, val, cfg, out);
  }
}

// --- Baselines -------------------------------------------------------------

constexpr const char* kSharedHead = "shared";

DecoderHead grow_head(const DecoderHead& old, const std::vector<int>& add, bool balanced, const EncoderConfig& enc,
                      const EngineConfig& cfg, Rng& rng) {
  HeadSpec spec{old.head_id, old.class_ids, {}, false, false, cfg.decoder_base};
  spec.class_ids.insert(spec.class_ids.end(), add.begin(), add.end());
  DecoderHead h = make_head(spec, enc, {}, rng);
  ParamRefs np = h.net.params();
  const ConstParamRefs op = old.net.params();
  const int old_out = old.n_channels();
  const double shift = std::log(static_cast<double>(add.size()) + 1.0);
  for (std::size_t i = 0; i < np.size(); ++i) {
    if (np[i]->shape == op[i]->shape) {
      np[i]->value = op[i]->value;
      continue;
    }
    // Output-channel-major seg weights or biases.
    const std::size_t row = np[i]->size() / static_cast<std::size_t>(np[i]->shape[0]);
    std::copy(op[i]->value.begin(), op[i]->value.end(), np[i]->value.begin());
    if (!balanced) continue;
    const bool is_bias = np[i]->shape.size() == 1;
    for (int r = old_out; r < np[i]->shape[0]; ++r)
      for (std::size_t k = 0; k < row; ++k) np[i]->value[r * row + k] = op[i]->value[k];
    if (is_bias) {
      const float b = static_cast<float>(op[i]->value[0] - shift);
      np[i]->value[0] = b;
      for (int r = old_out; r < np[i]->shape[0]; ++r) np[i]->value[r] = b;
    }
  }
  return h;
}

struct OldOutputs {
  std::vector<std::vector<losses::Field>> probs;     // [item][stage]
  std::vector<std::vector<losses::Field>> features;  // [item][stage]
};

OldOutputs old_outputs(const DecoderNet& net, std::span<const Item> items, bool features) {
  OldOutputs o;
  for (const Item& it : items) {
    auto out = net.forward(it.enc, {}, nullptr);
    std::vector<losses::Field> p, f;
    for (const auto& l : out.logits) p.push_back(softmax_field(l));
    if (features)
      for (const auto& x : out.features) f.push_back(losses::to_field(x));
    o.probs.push_back(std::move(p));
    o.features.push_back(std::move(f));
  }
  return o;
}

LossFn mib_loss(const DecoderHead& head, std::span<const Item> items, const DecoderHead& old,
                const DatasetDescriptor& ds, const BaselineConfig& bc) {
  auto prev = std::make_shared<OldOutputs>(old_outputs(old.net, items, false));
  losses::ClassContext ctx;
  ctx.old_classes = {0};
  ctx.old_classes.insert(ctx.old_classes.end(), old.class_ids.begin(), old.class_ids.end());
  ctx.current_classes = ds.class_set;
  ctx.channel_classes = {0};
  ctx.channel_classes.insert(ctx.channel_classes.end(), head.class_ids.begin(), head.class_ids.end());
  const std::vector<int> old_channels = ctx.old_classes;
  const int n = head.net.config().n_stages();
  const auto weights = bc.deep_supervision ? losses::deep_supervision_weights(n) : std::vector<double>{1.0};
  const double lambda = bc.unkd_weight;
  return [=](const DecoderNet::Output& out, std::size_t k) {
    StepLoss sl;
    sl.grads.logits.resize(out.logits.size());
    for (std::size_t s = 0; s < weights.size(); ++s) {
      const losses::Field q = softmax_field(out.logits[s]);
      const auto& labels = items[k].labels[s].data;
      auto ce = losses::unce(q, labels, ctx);
      const auto kd = losses::unkd(q, prev->probs[k][s], old_channels, ctx);
      sl.value += weights[s] * (ce.value + lambda * kd.value);
      for (std::size_t i = 0; i < ce.grad.size(); ++i) ce.grad.data()[i] += lambda * kd.grad.data()[i];
      sl.grads.logits[s] = to_float(losses::softmax_backward(q, ce.grad), weights[s]);
    }
    return sl;
  };
}

LossFn plop_loss(const DecoderHead& head, std::span<const Item> items, const DecoderHead& old,
                 const BaselineConfig& bc) {
  auto prev = std::make_shared<OldOutputs>(old_outputs(old.net, items, true));
  const int n = head.net.config().n_stages();
  const auto weights = bc.deep_supervision ? losses::deep_supervision_weights(n) : std::vector<double>{1.0};
  // Pseudo-labelled channel targets per item and stage.
  auto targets = std::make_shared<std::vector<std::vector<std::vector<int>>>>();
  for (std::size_t k = 0; k < items.size(); ++k) {
    std::vector<std::vector<int>> per_stage;
    for (int s = 0; s < static_cast<int>(items[k].labels.size()); ++s) {
      const auto& lab = items[k].labels[s].data;
      const losses::Field& qo = prev->probs[k][s];
      const std::size_t nv = lab.size();
      std::vector<int> t(nv, 0);
      for (std::size_t i = 0; i < nv; ++i) {
        if (lab[i] != 0) {
          t[i] = std::max(0, head.channel_of(lab[i]));
          continue;
        }
        int best = 0;
        double best_p = bc.pseudo_threshold;
        for (int oc = 1; oc < qo.channels(); ++oc)
          if (qo.data()[oc * nv + i] >= best_p) {
            best_p = qo.data()[oc * nv + i];
            best = oc;
          }
        if (best > 0) t[i] = head.channel_of(old.class_ids[best - 1]);
      }
      per_stage.push_back(std::move(t));
    }
    targets->push_back(std::move(per_stage));
  }
  const double factor = bc.pod_factor;
  return [=](const DecoderNet::Output& out, std::size_t k) {
    StepLoss sl;
    sl.grads.logits.resize(out.logits.size());
    for (std::size_t s = 0; s < weights.size(); ++s) {
      const losses::Field q = softmax_field(out.logits[s]);
      const auto ce = losses::ce(q, (*targets)[k][s]);
      sl.value += weights[s] * ce.value;
      sl.grads.logits[s] = to_float(losses::softmax_backward(q, ce.grad), weights[s]);
    }
    std::vector<losses::Field> feats;
    for (const auto& f : out.features) feats.push_back(losses::to_field(f));
    const auto pod = losses::pod3d_loss(feats, prev->features[k], factor);
    sl.value += pod.value;
    for (const auto& g : pod.grad) sl.grads.features.push_back(to_float(g));
    return sl;
  };
}

void baseline_step(Model& m, const Corpus& corpus, const DatasetDescriptor& ds, const LearnerStrategy& st,
                   const EngineConfig& cfg, Rng& rng, StepResult& out) {
  const auto train = corpus.split(ds.dataset_id, Split::train);
  if (train.empty()) throw InvalidArgument("no training cases in " + ds.dataset_id);
  const BaselineConfig& bc = st.baseline;
  TrainConfig tc = cfg.train;
  tc.deep_supervision = bc.deep_supervision;
  tc.aux_weight = 0;

  std::optional<DecoderHead> old;
  if (m.heads.empty()) {
    HeadSpec spec{kSharedHead, ds.class_set, {}, false, false, cfg.decoder_base};
    m.heads.push_back(make_head(spec, m.encoder.config(), {}, rng));
  } else {
    old = m.heads.front();
    std::vector<int> add;
    for (int c : ds.class_set)
      if (old->channel_of(c) < 0) add.push_back(c);
    m.heads.front() = grow_head(*old, add, st.kind != StrategyKind::naive, m.encoder.config(), cfg, rng);
  }
  DecoderHead& h = m.heads.front();
  const auto items = make_items(m.encoder, {}, h, train);
  LossFn loss;
  if (!old || st.kind == StrategyKind::naive) loss = segmentation_loss(h, items, tc);
  else if (st.kind == StrategyKind::mib) loss = mib_loss(h, items, *old, ds, bc);
  else loss = plop_loss(h, items, *old, bc);
  const EpochPlan plan{bc.epochs, bc.lr, true, bc.poly_exponent, bc.momentum, bc.iterations_per_epoch, 0};
  out.log.append(run_epochs(h.net, items, loss, plan, rng));
}

}  // namespace

// ---------------------------------------------------------------------------
// Runs

std::vector<double> class_slice_scores(const std::vector<Sample>& samples, int class_id) {
  std::vector<double> out;
  for (const Sample& s : samples) {
    const Dims3 d = s.labels.dims;
    const std::size_t plane = static_cast<std::size_t>(d.h) * d.w;
    for (int z = 0; z < d.d; ++z) {
      const auto* row = s.labels.data.data() + z * plane;
      if (std::find(row, row + plane, class_id) != row + plane) out.push_back(s.bpr_scores[z]);
    }
  }
  return out;
}

PartialLabelResult run_partial_label(const Corpus& corpus, const Encoder& encoder, const EngineConfig& cfg,
                                     bool fls_ablation) {
  if (!encoder.frozen()) throw InvalidArgument("run_partial_label needs a frozen encoder");
  PartialLabelResult res;
  res.model.encoder = encoder;
  StepResult& out = res.result;
  for (int c : head_order(corpus.registry, corpus.registry.all_classes())) {
    const AnatomySpec& a = corpus.registry.anatomy(c);
    const auto train = corpus.with_class(c, Split::train);
    const auto val = corpus.with_class(c, Split::val);
    if (train.empty()) throw InvalidArgument("class " + a.name + " has no labelled samples");
    const HeadSpec spec = spec_for(res.model, a, cfg);
    const NewHead nh = add_head(res.model, spec, train, val, cfg, out);
    if (fls_ablation && a.is_gtv && !spec.fls_sources.empty()) {
      // Same seed and budget, no supporting features.
      HeadSpec plain = spec;
      plain.fls_sources.clear();
      Rng rng(seed_for(cfg.seed, "init/" + spec.head_id));
      DecoderHead h = make_head(plain, encoder.config(), {}, rng);
      const auto items = make_items(encoder, {}, h, train);
      const auto vitems = make_items(encoder, {}, h, val);
      TrainConfig tc = cfg.train;
      tc.seed = seed_for(cfg.seed, "train/" + spec.head_id);
      train_decoder(h, items, tc);
      res.fls_ablation[spec.head_id] = {nh.unpruned_val, validation_dsc(h, vitems)};
    }
  }
  std::vector<std::string> all;
  for (const auto& d : corpus.registry.datasets) all.push_back(d.dataset_id);
  out.snapshot = make_snapshot(res.model, corpus, 0, all);
  out.probe = probe_posteriors(res.model, corpus);
  return res;
}

ContinualResult run_continual(const Corpus& corpus, const Encoder& encoder, const ContinualOrder& order,
                              const LearnerStrategy& strategy, const EngineConfig& cfg, const StepCallback& on_step) {
  strategy.validate();
  if (!encoder.frozen()) throw InvalidArgument("run_continual needs a frozen encoder");
  if (order.dataset_ids.empty()) throw InvalidArgument("continual order is empty");
  ContinualResult res;
  res.model.encoder = encoder;
  Rng rng(seed_for(cfg.seed, "baseline/" + to_string(strategy.kind)));
  std::vector<std::string> seen;
  for (std::size_t t = 0; t < order.dataset_ids.size(); ++t) {
    const DatasetDescriptor& ds = corpus.registry.dataset(order.dataset_ids[t]);
    StepResult step;
    if (strategy.kind == StrategyKind::clnet) clnet_step(res.model, corpus, ds, cfg, step);
    else baseline_step(res.model, corpus, ds, strategy, cfg, rng, step);
    seen.push_back(ds.dataset_id);
    step.snapshot = make_snapshot(res.model, corpus, static_cast<int>(t), seen);
    step.probe = probe_posteriors(res.model, corpus);
    if (on_step) on_step(step, res.model);
    res.steps.push_back(std::move(step));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Evaluation

std::vector<ClassScore> evaluate(const Model& model, const Corpus& corpus, const std::vector<std::string>& datasets) {
  std::vector<ClassScore> scores;
  for (const std::string& id : datasets) {
    const DatasetDescriptor& ds = corpus.registry.dataset(id);
    const Spacing spacing{ds.voxel_spacing[0], ds.voxel_spacing[1], ds.voxel_spacing[2]};
    const std::size_t first = scores.size();
    for (int c : ds.class_set) {
      if (!owner(model.heads, c)) throw InvalidArgument("no head owns class " + std::to_string(c));
      scores.push_back({id, c, {}});
    }
    for (const Sample& s : corpus.split(id, Split::test)) {
      const auto post = forward(model.encoder, model.heads, s.image);
      for (std::size_t k = 0; k < ds.class_set.size(); ++k) {
        const int c = ds.class_set[k];
        const DecoderHead& h = model.heads[*owner(model.heads, c)];
        Tensor4 p = post.at(h.head_id);
        if (auto b = model.bounds.find(h.head_id); b != model.bounds.end()) p = apply_bound(p, b->second, s.bpr_scores);
        const int ch = h.channel_of(c);
        const std::size_t n = p.voxels();
        Mask pred(p.dims()), gt(p.dims());
        for (std::size_t i = 0; i < n; ++i) {
          int best = 0;
          for (int q = 1; q < p.channels(); ++q)
            if (p.data()[q * n + i] > p.data()[best * n + i]) best = q;
          pred.data[i] = best == ch;
          gt.data[i] = s.labels.data[i] == c;
        }
        scores[first + k].cases.push_back({s.case_id, dsc(pred, gt), asd(pred, gt, spacing)});
      }
    }
  }
  return scores;
}

StepSnapshot make_snapshot(const Model& model, const Corpus& corpus, int step,
                           const std::vector<std::string>& seen_datasets) {
  StepSnapshot s;
  s.step = step;
  s.dataset_id = seen_datasets.empty() ? "" : seen_datasets.back();
  s.seen_datasets = seen_datasets;
  s.scores = evaluate(model, corpus, seen_datasets);
  s.dense_params = count_params(model.encoder, model.heads, false);
  s.sparse_params = count_params(model.encoder, model.heads, true);
  for (const auto& h : model.heads) s.heads.push_back(h.head_id);
  return s;
}

PruneRecord prune_head(Model& model, const std::string& head_id, const Corpus& corpus, const EngineConfig& cfg) {
  if (!model.encoder.frozen()) throw FrozenError("prune_head needs a frozen encoder");
  auto it = std::find_if(model.heads.begin(), model.heads.end(), [&](const DecoderHead& h) { return h.head_id == head_id; });
  if (it == model.heads.end()) throw InvalidArgument("model has no head " + head_id);
  if (it->prune_state != PruneState::unpruned) throw InvalidArgument("head " + head_id + " is already pruned");
  std::vector<Sample> train, val;
  for (int c : it->class_ids) {
    for (auto& s : corpus.with_class(c, Split::train)) train.push_back(std::move(s));
    for (auto& s : corpus.with_class(c, Split::val)) val.push_back(std::move(s));
  }
  if (train.empty() || val.empty()) throw InvalidArgument("no labelled cases for head " + head_id);
  const auto items = make_items(model.encoder, model.heads, *it, train);
  const auto vitems = make_items(model.encoder, model.heads, *it, val);
  TrainConfig tc = cfg.train;
  tc.seed = seed_for(cfg.seed, "prune/" + head_id);
  int offset = 0;
  LthHooks hooks;
  hooks.items = static_cast<int>(items.size());
  hooks.train = [&](DecoderHead& hh, int epochs, int iters) {
    retrain_decoder(hh, items, tc, epochs, tc.lr, iters, offset);
    offset += epochs;
  };
  hooks.validate = [&](const DecoderHead& hh) { return validation_dsc(hh, vitems); };
  PruneRecord rec = lth_prune(*it, hooks, cfg.lth);
  sync_after_prune(*it);
  return rec;
}

PredictionMaps predict_volume(const Model& model, const Image& image, std::span<const double> slice_scores,
                              const MergeOptions& opts) {
  if (!slice_scores.empty() && static_cast<int>(slice_scores.size()) != image.dims.d)
    throw ShapeError("predict_volume: one slice score per axial slice expected");
  const auto post = forward(model.encoder, model.heads, image);
  PredictionMaps out;
  std::vector<HeadPrediction> preds;
  std::map<std::string, std::size_t> index;
  for (const DecoderHead& h : model.heads) {
    HeadPrediction p;
    p.class_ids = h.class_ids;
    p.posterior = post.at(h.head_id);
    BprBounds b = full_bounds();
    if (auto it = model.bounds.find(h.head_id); it != model.bounds.end() && !slice_scores.empty()) b = it->second;
    if (slice_scores.empty()) {
      p.bound = Mask(image.dims, 1);
    } else {
      p.posterior = apply_bound(p.posterior, b, slice_scores);
      p.bound = bound_mask(image.dims, b, slice_scores);
    }
    const std::size_t n = p.posterior.voxels();
    LabelMap lm(image.dims, 0);
    for (std::size_t i = 0; i < n; ++i) {
      int best = 0;
      for (int q = 1; q < p.posterior.channels(); ++q)
        if (p.posterior.data()[q * n + i] > p.posterior.data()[best * n + i]) best = q;
      lm.data[i] = best == 0 ? 0 : h.class_ids[best - 1];
    }
    out.heads[h.head_id] = std::move(lm);
    index[h.head_id] = preds.size();
    preds.push_back(std::move(p));
  }
  // A lesion head's binarized prediction is handed to its host.
  for (const DecoderHead& h : model.heads) {
    if (!h.is_gtv || h.fls_sources.empty()) continue;
    HeadPrediction& host = preds[index.at(h.fls_sources.front())];
    const Mask g = binarize_channel(preds[index.at(h.head_id)].posterior, 1, opts.threshold);
    if (!host.gtv) {
      host.gtv = g;
    } else {
      for (std::size_t i = 0; i < g.data.size(); ++i) host.gtv->data[i] |= g.data[i];
    }
  }
  out.merged = merge_predictions(preds, opts);
  return out;
}

ProbePosteriors probe_posteriors(const Model& model, const Corpus& corpus) {
  ProbePosteriors out;
  const auto post = forward(model.encoder, model.heads, corpus.probe().image);
  for (const auto& h : model.heads) {
    const Tensor4& p = post.at(h.head_id);
    const std::size_t n = p.voxels();
    for (std::size_t k = 0; k < h.class_ids.size(); ++k) {
      const float* begin = p.data() + (k + 1) * n;
      out[h.class_ids[k]] = std::vector<float>(begin, begin + n);
    }
  }
  return out;
}

std::uint64_t fnv1a(const std::vector<float>& v) { return fnv1a_bytes(v.data(), v.size() * sizeof(float)); }

// ---------------------------------------------------------------------------
// Serialization

OJson to_json(const StepSnapshot& s) {
  OJson j;
  j["step"] = s.step;
  j["dataset"] = s.dataset_id;
  j["seen_datasets"] = s.seen_datasets;
  j["heads"] = s.heads;
  j["dense_params"] = s.dense_params;
  j["sparse_params"] = s.sparse_params;
  OJson scores = OJson::array();
  for (const auto& cs : s.scores) {
    OJson c;
    c["dataset"] = cs.dataset_id;
    c["class"] = cs.class_id;
    c["mean_dsc"] = cs.mean_dsc();
    const auto ma = cs.mean_asd();
    c["mean_asd"] = ma ? OJson(*ma) : OJson(nullptr);
    OJson cases = OJson::array();
    for (const auto& k : cs.cases)
      cases.push_back({{"case", k.case_id}, {"dsc", k.dsc}, {"asd", k.asd ? OJson(*k.asd) : OJson(nullptr)}});
    c["cases"] = cases;
    scores.push_back(c);
  }
  j["scores"] = scores;
  return j;
}

StepSnapshot snapshot_from_json(const nlohmann::json& j) {
  try {
    StepSnapshot s;
    s.step = j.at("step").get<int>();
    s.dataset_id = j.at("dataset").get<std::string>();
    s.seen_datasets = j.at("seen_datasets").get<std::vector<std::string>>();
    s.heads = j.at("heads").get<std::vector<std::string>>();
    s.dense_params = j.at("dense_params").get<std::size_t>();
    s.sparse_params = j.at("sparse_params").get<std::size_t>();
    for (const auto& c : j.at("scores")) {
      ClassScore cs{c.at("dataset").get<std::string>(), c.at("class").get<int>(), {}};
      for (const auto& k : c.at("cases")) {
        CaseScore sc{k.at("case").get<std::string>(), k.at("dsc").get<double>(), std::nullopt};
        if (!k.at("asd").is_null()) sc.asd = k.at("asd").get<double>();
        cs.cases.push_back(sc);
      }
      s.scores.push_back(std::move(cs));
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("snapshot: ") + e.what());
  }
}

OJson snapshot_document(const StepSnapshot& s, const Model& model, const ProbePosteriors& probe) {
  OJson j = to_json(s);
  OJson bounds = OJson::object();
  for (const auto& [id, b] : model.bounds) bounds[id] = to_json(b);
  j["bounds"] = bounds;
  OJson digest = OJson::object();
  for (const auto& [c, v] : probe) digest[std::to_string(c)] = hex64(fnv1a(v));
  j["probe_digest"] = digest;
  return j;
}

std::string metrics_csv(const std::string& run, const std::vector<StepSnapshot>& snapshots, bool header) {
  std::ostringstream os;
  if (header) os << "run,step,dataset,class,case,dsc,asd\n";
  for (const auto& s : snapshots)
    for (const auto& cs : s.scores)
      for (const auto& k : cs.cases)
        os << run << ',' << s.step << ',' << cs.dataset_id << ',' << cs.class_id << ',' << k.case_id << ','
           << fmt_double(k.dsc) << ',' << (k.asd ? fmt_double(*k.asd) : std::string()) << '\n';
  return os.str();
}

void write_step(const fs::path& run_dir, const StepResult& step, const Model& model) {
  const fs::path dir = run_dir / ("step_" + std::to_string(step.snapshot.step));
  fs::create_directories(dir);
  save_checkpoint(dir / "checkpoint", model);
  write_text(dir / "snapshot.json", snapshot_document(step.snapshot, model, step.probe).dump(2) + "\n");
  OJson recs = OJson::array();
  for (const auto& r : step.prune_records) recs.push_back(r.to_json());
  write_text(dir / "prune_records.json", recs.dump(2) + "\n");
  write_text(dir / "train_log.csv", step.log.csv());
}

}  // namespace contseg
