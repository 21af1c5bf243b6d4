// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

#include "contseg/arch.hpp"

#include <algorithm>
#include <numeric>

namespace contseg {

std::vector<int> EncoderConfig::stage_channels() const {
  std::vector<int> ch;
  long long f = base_features;
  for (int s = 0; s < n_blocks; ++s) {
    ch.push_back(static_cast<int>(std::min<long long>(f, feature_cap)));
    f *= 2;
  }
  return ch;
}

void EncoderConfig::validate() const {
  if (n_blocks < 2) throw ConfigError("encoder needs at least 2 blocks");
  if (base_features < 1 || feature_cap < base_features) throw ConfigError("invalid encoder feature widths");
  if (convs_per_block < 1) throw ConfigError("convs_per_block must be >= 1");
  if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
}

EncoderConfig EncoderConfig::paper_scale() { return {6, 32, 320, 2, 1}; }

Encoder::Encoder(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const auto ch = cfg_.stage_channels();
  int in_c = cfg_.in_channels;
  for (int s = 0; s < cfg_.n_blocks; ++s) {
    std::vector<ConvBlock> blocks;
    for (int j = 0; j < cfg_.convs_per_block; ++j) {
      const int stride = (s > 0 && j == 0) ? 2 : 1;
      blocks.emplace_back("enc.s" + std::to_string(s) + ".b" + std::to_string(j), j == 0 ? in_c : ch[s], ch[s],
                          stride, rng);
    }
    stages_.push_back(std::move(blocks));
    in_c = ch[s];
  }
}

FeaturePyramid Encoder::forward(const Tensor4& x, Cache* cache) const {
  if (x.channels() != cfg_.in_channels) throw ShapeError("encoder input channel mismatch");
  FeaturePyramid out;
  if (cache) cache->blocks.assign(stages_.size(), {});
  Tensor4 h = x;
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    if (cache) cache->blocks[s].resize(stages_[s].size());
    for (std::size_t j = 0; j < stages_[s].size(); ++j)
      h = stages_[s][j].forward(h, cache ? &cache->blocks[s][j] : nullptr);
    out.push_back(h);
  }
  return out;
}

void Encoder::backward(const Cache& cache, FeaturePyramid stage_grads) {
  if (frozen_) throw FrozenError("encoder is frozen; gradient application rejected");
  stage_grads.resize(stages_.size());
  Tensor4 carry;
  for (int s = static_cast<int>(stages_.size()) - 1; s >= 0; --s) {
    Tensor4 g = std::move(stage_grads[s]);
    accumulate(g, carry);
    if (g.empty()) {
      carry = Tensor4{};
      continue;
    }
    for (int j = static_cast<int>(stages_[s].size()) - 1; j >= 0; --j) {
      const bool need_dx = !(s == 0 && j == 0);
      g = stages_[s][j].backward(cache.blocks[s][j], std::move(g), need_dx);
    }
    carry = std::move(g);
  }
}

ParamRefs Encoder::trainable_params() {
  if (frozen_) throw FrozenError("encoder is frozen; parameters are not trainable");
  return storage_params();
}

ParamRefs Encoder::storage_params() {
  ParamRefs out;
  for (auto& st : stages_)
    for (auto& b : st) b.collect(out);
  return out;
}

ConstParamRefs Encoder::params() const {
  ConstParamRefs out;
  for (const auto& st : stages_)
    for (const auto& b : st) b.collect(out);
  return out;
}

DecoderConfig DecoderConfig::make(const EncoderConfig& enc, int n_foreground, int decoder_base) {
  DecoderConfig cfg;
  cfg.enc_channels = enc.stage_channels();
  const int base = decoder_base > 0 ? decoder_base : enc.base_features;
  long long f = base;
  for (int s = 0; s + 1 < enc.n_blocks; ++s) {
    cfg.dec_channels.push_back(static_cast<int>(std::min<long long>(f, enc.feature_cap)));
    f *= 2;
  }
  cfg.out_channels = n_foreground + 1;
  return cfg;
}

DecoderNet::DecoderNet(const std::string& prefix, const DecoderConfig& cfg, Rng& rng) : cfg_(cfg) {
  const int n = cfg_.n_stages();
  if (n < 1 || static_cast<int>(cfg_.enc_channels.size()) != n + 1)
    throw ShapeError("decoder stages must be one fewer than encoder stages");
  for (const auto& src : cfg_.fls_channels)
    if (static_cast<int>(src.size()) != n) throw ShapeError("FLS source stage count mismatch");
  stages_.resize(n);
  // Build deepest first so initialisation order follows the forward pass.
  for (int s = n - 1; s >= 0; --s) {
    const std::string p = prefix + ".s" + std::to_string(s);
    const int prev_c = (s == n - 1) ? cfg_.enc_channels[n] : cfg_.dec_channels[s + 1];
    const int own = cfg_.dec_channels[s];
    Stage st;
    st.up = ConvTranspose2(p + ".up", prev_c, own, rng);
    const int base_c = own + cfg_.enc_channels[s];
    st.c1 = ConvBlock(p + ".c1", base_c, own, 1, rng);
    if (!cfg_.fls_channels.empty()) {
      // FLS-only weights come from a side stream, so the main draws match the
      // unsupported counterpart of this head.
      std::uint64_t h = 1469598103934665603ull;
      for (unsigned char ch : p) h = (h ^ ch) * 1099511628211ull;
      Rng side(h);
      int cat_c = base_c;
      for (std::size_t j = 0; j < cfg_.fls_channels.size(); ++j) {
        const int fc = cfg_.fls_channels[j][s];
        st.fls_proj.emplace_back(p + ".fls" + std::to_string(j), fc, fc, 1, 1, side);
        // Zero start: the projected features are 0 until trained.
        std::fill(st.fls_proj.back().weight.value.begin(), st.fls_proj.back().weight.value.end(), 0.f);
        cat_c += fc;
      }
      ConvBlock wide(p + ".c1", cat_c, own, 1, side);
      const auto& src = st.c1.conv.weight.value;
      auto& dst = wide.conv.weight.value;
      const std::size_t per = src.size() / (static_cast<std::size_t>(own) * base_c);
      for (int o = 0; o < own; ++o)
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * base_c * per), base_c * per,
                    dst.begin() + static_cast<std::ptrdiff_t>(o * cat_c * per));
      wide.conv.bias.value = st.c1.conv.bias.value;
      st.c1 = std::move(wide);
    }
    st.c2 = ConvBlock(p + ".c2", own, own, 1, rng);
    st.seg = Conv3d(p + ".seg", own, cfg_.out_channels, 1, 1, rng);
    stages_[s] = std::move(st);
  }
  if (cfg_.aux_bpr) aux_.emplace(prefix + ".aux", cfg_.dec_channels[0], 1, 1, 1, rng);
}

DecoderNet::Output DecoderNet::forward(const FeaturePyramid& enc, std::span<const FeaturePyramid* const> fls,
                                       Cache* cache) const {
  const int n = cfg_.n_stages();
  if (static_cast<int>(enc.size()) != n + 1) throw ShapeError("decoder: encoder pyramid stage count mismatch");
  if (fls.size() != cfg_.fls_channels.size()) throw ShapeError("decoder: FLS source count mismatch");
  Output out;
  out.logits.resize(n);
  out.features.resize(n);
  if (cache) cache->stages.assign(n, {});
  for (int s = n - 1; s >= 0; --s) {
    const Stage& st = stages_[s];
    const Tensor4& prev = (s == n - 1) ? enc[n] : out.features[s + 1];
    Tensor4 up = st.up.forward(prev, enc[s].dims());
    std::vector<Tensor4> proj;
    std::vector<const Tensor4*> parts{&up, &enc[s]};
    proj.reserve(fls.size());
    for (std::size_t j = 0; j < fls.size(); ++j) {
      const FeaturePyramid& src = *fls[j];
      if (static_cast<int>(src.size()) != n) throw ShapeError("decoder: FLS source pyramid mismatch");
      proj.push_back(st.fls_proj[j].forward(src[s]));
    }
    for (const auto& p : proj) parts.push_back(&p);
    Tensor4 cat = concat_channels(parts);
    StageCache* sc = cache ? &cache->stages[s] : nullptr;
    if (sc) {
      sc->prev = prev;
      sc->fls_in.clear();
      for (std::size_t j = 0; j < fls.size(); ++j) sc->fls_in.push_back((*fls[j])[s]);
    }
    Tensor4 h = st.c1.forward(cat, sc ? &sc->c1 : nullptr);
    h = st.c2.forward(h, sc ? &sc->c2 : nullptr);
    out.logits[s] = st.seg.forward(h);
    out.features[s] = std::move(h);
  }
  if (aux_) out.aux = aux_->forward(out.features[0]);
  return out;
}

FeaturePyramid DecoderNet::backward(const Cache& cache, const Grads& grads, bool need_encoder_grad) {
  const int n = cfg_.n_stages();
  FeaturePyramid enc_grads;
  if (need_encoder_grad) enc_grads.resize(n + 1);
  std::vector<Tensor4> from_shallower(n + 1);
  for (int s = 0; s < n; ++s) {
    Stage& st = stages_[s];
    const StageCache& sc = cache.stages[s];
    const Tensor4& feat = sc.c2.y;
    Tensor4 g;
    if (s < static_cast<int>(grads.features.size())) accumulate(g, grads.features[s]);
    accumulate(g, from_shallower[s]);
    if (s < static_cast<int>(grads.logits.size()) && !grads.logits[s].empty())
      accumulate(g, st.seg.backward(feat, grads.logits[s], true));
    if (s == 0 && aux_ && !grads.aux.empty()) accumulate(g, aux_->backward(feat, grads.aux, true));
    if (g.empty()) continue;
    g = st.c2.backward(sc.c2, std::move(g), true);
    g = st.c1.backward(sc.c1, std::move(g), true);
    std::vector<int> widths{cfg_.dec_channels[s], cfg_.enc_channels[s]};
    for (const auto& f : cfg_.fls_channels) widths.push_back(f[s]);
    auto parts = split_channels(g, widths);
    for (std::size_t j = 0; j < st.fls_proj.size(); ++j) st.fls_proj[j].backward(sc.fls_in[j], parts[2 + j], false);
    if (need_encoder_grad) accumulate(enc_grads[s], parts[1]);
    const bool deepest = (s == n - 1);
    const bool need_prev = !deepest || need_encoder_grad;
    Tensor4 gprev = st.up.backward(sc.prev, parts[0], need_prev);
    if (deepest) {
      if (need_encoder_grad) accumulate(enc_grads[n], gprev);
    } else {
      from_shallower[s + 1] = std::move(gprev);
    }
  }
  return enc_grads;
}

ParamRefs DecoderNet::params() {
  ParamRefs out;
  for (int s = static_cast<int>(stages_.size()) - 1; s >= 0; --s) {
    Stage& st = stages_[s];
    st.up.collect(out);
    for (auto& f : st.fls_proj) f.collect(out);
    st.c1.collect(out);
    st.c2.collect(out);
    st.seg.collect(out);
  }
  if (aux_) aux_->collect(out);
  return out;
}

ConstParamRefs DecoderNet::params() const {
  ConstParamRefs out;
  for (int s = static_cast<int>(stages_.size()) - 1; s >= 0; --s) {
    const Stage& st = stages_[s];
    st.up.collect(out);
    for (const auto& f : st.fls_proj) f.collect(out);
    st.c1.collect(out);
    st.c2.collect(out);
    st.seg.collect(out);
  }
  if (aux_) aux_->collect(out);
  return out;
}

std::size_t PruneMask::total() const {
  std::size_t t = 0;
  for (const auto& k : keep) t += k.size();
  return t;
}

std::size_t PruneMask::kept() const {
  std::size_t t = 0;
  for (const auto& k : keep) t += static_cast<std::size_t>(std::count(k.begin(), k.end(), std::uint8_t{1}));
  return t;
}

PruneMask PruneMask::all_kept(const ConstParamRefs& params) {
  PruneMask m;
  for (const ParamArray* p : params) m.keep.emplace_back(p->size(), std::uint8_t{1});
  return m;
}

int DecoderHead::channel_of(int class_id) const {
  for (std::size_t i = 0; i < class_ids.size(); ++i)
    if (class_ids[i] == class_id) return static_cast<int>(i) + 1;
  return -1;
}

void DecoderHead::apply_mask() {
  auto zero = [](ParamRefs ps, const PruneMask& m, std::vector<std::vector<double>>* acc) {
    if (ps.size() != m.keep.size()) throw ShapeError("prune mask does not match parameter list");
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (ps[i]->size() != m.keep[i].size()) throw ShapeError("prune mask shape mismatch: " + ps[i]->name);
      for (std::size_t j = 0; j < ps[i]->size(); ++j)
        if (!m.keep[i][j]) {
          ps[i]->value[j] = 0.f;
          if (acc && i < acc->size() && j < (*acc)[i].size()) (*acc)[i][j] = 0.0;
        }
    }
  };
  if (!mask.empty()) zero(net.params(), mask, nullptr);
  if (ema.active) {
    const PruneMask& m = ema.mask.empty() ? mask : ema.mask;
    if (!m.empty()) zero(ema.shadow.params(), m, &ema.accum);
  }
}

DecoderHead make_head(const HeadSpec& spec, const EncoderConfig& enc, std::span<const DecoderHead> existing, Rng& rng) {
  if (spec.class_ids.empty()) throw InvalidArgument("head " + spec.head_id + " has no classes");
  DecoderConfig cfg = DecoderConfig::make(enc, static_cast<int>(spec.class_ids.size()), spec.decoder_base);
  cfg.aux_bpr = spec.aux_bpr;
  for (const auto& src : spec.fls_sources) {
    auto it = std::find_if(existing.begin(), existing.end(), [&](const DecoderHead& h) { return h.head_id == src; });
    if (it == existing.end()) throw InvalidArgument("unknown FLS source head: " + src);
    cfg.fls_channels.push_back(it->net.config().dec_channels);
  }
  DecoderHead head;
  head.head_id = spec.head_id;
  head.class_ids = spec.class_ids;
  head.fls_sources = spec.fls_sources;
  head.is_gtv = spec.is_gtv;
  head.net = DecoderNet("dec", cfg, rng);
  head.mask = PruneMask::all_kept(std::as_const(head.net).params());
  return head;
}

std::vector<std::size_t> fls_order(std::span<const DecoderHead> heads) {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < heads.size(); ++i) index[heads[i].head_id] = i;
  std::vector<int> pending(heads.size(), 0);
  std::vector<std::vector<std::size_t>> consumers(heads.size());
  for (std::size_t i = 0; i < heads.size(); ++i)
    for (const auto& src : heads[i].fls_sources) {
      auto it = index.find(src);
      if (it == index.end()) throw InvalidArgument("unknown FLS source head: " + src);
      consumers[it->second].push_back(i);
      ++pending[i];
    }
  std::vector<std::size_t> order;
  std::vector<bool> done(heads.size(), false);
  while (order.size() < heads.size()) {
    bool progressed = false;
    for (std::size_t i = 0; i < heads.size(); ++i) {
      if (done[i] || pending[i] != 0) continue;
      done[i] = true;
      order.push_back(i);
      for (const auto c : consumers[i]) --pending[c];
      progressed = true;
      break;
    }
    if (!progressed) throw InvalidArgument("FLS dependency cycle among decoder heads");
  }
  return order;
}

Tensor4 normalize_image(const Image& image) {
  Tensor4 t(1, image.dims);
  for (std::size_t i = 0; i < image.data.size(); ++i)
    t.data()[i] = std::clamp(image.data[i], -1024.f, 1024.f) / 1024.f;
  return t;
}

std::map<std::string, HeadOutput> forward_heads(const Encoder& encoder, std::span<const DecoderHead> heads,
                                                 const Image& image) {
  const auto order = fls_order(heads);
  const FeaturePyramid enc = encoder.forward(normalize_image(image), nullptr);
  std::map<std::string, HeadOutput> out;
  for (const auto i : order) {
    const DecoderHead& h = heads[i];
    std::vector<const FeaturePyramid*> fls;
    for (const auto& src : h.fls_sources) fls.push_back(&out.at(src).features);
    auto res = h.inference_net().forward(enc, fls, nullptr);
    HeadOutput ho;
    kernels::softmax_channels(res.logits[0], ho.posteriors);
    ho.features = std::move(res.features);
    ho.aux = std::move(res.aux);
    out.emplace(h.head_id, std::move(ho));
  }
  return out;
}

std::map<std::string, Tensor4> forward(const Encoder& encoder, std::span<const DecoderHead> heads, const Image& image) {
  std::map<std::string, Tensor4> out;
  for (auto& [id, ho] : forward_heads(encoder, heads, image)) out.emplace(id, std::move(ho.posteriors));
  return out;
}

Encoder& freeze_encoder(Encoder& encoder) {
  encoder.set_frozen(true);
  return encoder;
}

namespace {
std::size_t total_size(const ConstParamRefs& ps) {
  std::size_t t = 0;
  for (const auto* p : ps) t += p->size();
  return t;
}
}  // namespace

std::pair<std::size_t, std::size_t> decoder_param_counts(std::span<const DecoderHead> heads) {
  std::size_t dense = 0, sparse = 0;
  for (const auto& h : heads) {
    const std::size_t d = total_size(h.net.params());
    dense += d;
    sparse += h.mask.empty() ? d : h.mask.kept();
  }
  return {dense, sparse};
}

std::size_t count_params(const Encoder& encoder, std::span<const DecoderHead> heads, bool sparse) {
  const auto [dense, kept] = decoder_param_counts(heads);
  return total_size(encoder.params()) + (sparse ? kept : dense);
}

}  // namespace contseg
