// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

#include "contseg/config.hpp"

#include <cmath>
#include <set>

#include "contseg/error.hpp"
#include "contseg/serialize.hpp"
#include "contseg/volume_io.hpp"

namespace contseg {

namespace fs = std::filesystem;
using OJson = nlohmann::ordered_json;

namespace {

// Strict object reader: every key must be consumed.
class Obj {
 public:
  Obj(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    used_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(where_ + "." + key + ": wrong type");
    }
  }

  void range(const char* key, Range& r) {
    std::vector<double> v{r.first, r.second};
    get(key, v);
    if (v.size() != 2) throw ConfigError(where_ + "." + key + ": expected [lo, hi]");
    r = {v[0], v[1]};
  }

  /// Nested object, or an empty one when absent.
  Obj sub(const char* key) {
    used_.insert(key);
    auto it = j_.find(key);
    return Obj(it == j_.end() ? empty() : *it, where_ + "." + key);
  }

  bool has(const char* key) const { return j_.contains(key); }
  void mark(const char* key) { used_.insert(key); }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!used_.count(it.key())) throw ConfigError(where_ + ": unknown key '" + it.key() + "'");
  }

 private:
  static const nlohmann::json& empty() {
    static const nlohmann::json e = nlohmann::json::object();
    return e;
  }
  const nlohmann::json& j_;
  std::string where_;
  std::set<std::string> used_;
};

void read_augmentation(Obj o, AugmentationScheme& a) {
  o.range("rotation", a.rotation_range);
  o.range("scale", a.scale_range);
  o.range("noise_sigma", a.noise_sigma_range);
  o.range("blur_sigma", a.blur_sigma_range);
  o.range("intensity_scale", a.intensity_scale_range);
  o.range("lowres_axial", a.lowres_axial_factor);
  o.range("lowres_inplane", a.lowres_inplane_factor);
  o.get("gamma_enabled", a.gamma_enabled);
  o.range("gamma", a.gamma_range);
  o.get("gamma_invert_prob", a.gamma_invert_prob);
  o.get("mirror_axes", a.mirror_axes);
  Obj t = o.sub("trigger");
  t.get("spatial", a.trigger.spatial);
  t.get("noise", a.trigger.noise);
  t.get("blur", a.trigger.blur);
  t.get("intensity", a.trigger.intensity);
  t.get("lowres", a.trigger.lowres);
  t.get("gamma", a.trigger.gamma);
  t.get("mirror", a.trigger.mirror);
  t.finish();
  o.finish();
}

OJson augmentation_json(const AugmentationScheme& a) {
  auto r = [](const Range& x) { return OJson::array({x.first, x.second}); };
  OJson j;
  j["rotation"] = r(a.rotation_range);
  j["scale"] = r(a.scale_range);
  j["noise_sigma"] = r(a.noise_sigma_range);
  j["blur_sigma"] = r(a.blur_sigma_range);
  j["intensity_scale"] = r(a.intensity_scale_range);
  j["lowres_axial"] = r(a.lowres_axial_factor);
  j["lowres_inplane"] = r(a.lowres_inplane_factor);
  j["gamma_enabled"] = a.gamma_enabled;
  j["gamma"] = r(a.gamma_range);
  j["gamma_invert_prob"] = a.gamma_invert_prob;
  j["mirror_axes"] = a.mirror_axes;
  j["trigger"] = {{"spatial", a.trigger.spatial}, {"noise", a.trigger.noise},         {"blur", a.trigger.blur},
                  {"intensity", a.trigger.intensity}, {"lowres", a.trigger.lowres}, {"gamma", a.trigger.gamma},
                  {"mirror", a.trigger.mirror}};
  return j;
}

void positive(int v, const char* what) {
  if (v < 1) throw ConfigError(std::string(what) + " must be >= 1");
}
void non_negative(int v, const char* what) {
  if (v < 0) throw ConfigError(std::string(what) + " must be >= 0");
}
void positive(double v, const char* what) {
  if (!(v > 0) || !std::isfinite(v)) throw ConfigError(std::string(what) + " must be positive");
}
void unit_interval(double v, const char* what) {
  if (!(v >= 0 && v <= 1)) throw ConfigError(std::string(what) + " must lie in [0, 1]");
}

void validate_train(const TrainConfig& t, const char* where) {
  const std::string w = where;
  non_negative(t.warmup_epochs, (w + ".warmup_epochs").c_str());
  positive(t.epochs, (w + ".epochs").c_str());
  positive(t.lr, (w + ".lr").c_str());
  positive(t.warmup_lr, (w + ".warmup_lr").c_str());
  unit_interval(t.momentum, (w + ".momentum").c_str());
  non_negative(t.iterations_per_epoch, (w + ".iterations_per_epoch").c_str());
  if (t.aux_weight < 0) throw ConfigError(w + ".aux_weight must be >= 0");
}

}  // namespace

void RunConfig::validate(bool check_paths) const {
  if (output_root.empty()) throw ConfigError("output_root must not be empty");
  if (registry.volume.d < 8 || registry.volume.h < 8 || registry.volume.w < 8)
    throw ConfigError("registry.volume: every extent must be >= 8");
  positive(registry.n_train, "registry.n_train");
  positive(registry.n_val, "registry.n_val");
  positive(registry.n_test, "registry.n_test");
  if (check_paths) {
    if (!registry.path.empty() && !fs::exists(registry.path))
      throw ConfigError("registry.path does not exist: " + registry.path);
    if (!data_dir.empty() && !fs::is_directory(data_dir)) throw ConfigError("data_dir does not exist: " + data_dir);
  }
  for (const auto& o : orders) {
    if (o.name.empty() || o.datasets.empty()) throw ConfigError("orders: every order needs a name and datasets");
  }
  encoder.validate();
  positive(ssl.epochs, "ssl.epochs");
  positive(ssl.batches_per_epoch, "ssl.batches_per_epoch");
  positive(ssl.lr, "ssl.lr");
  ssl.augmentation.validate();
  positive(ge.epochs, "ge.epochs");
  positive(ge.lr, "ge.lr");
  non_negative(ge.decoder_base, "ge.decoder_base");
  positive(finetune.epochs, "ge.finetune.epochs");
  positive(finetune.lr, "ge.finetune.lr");
  positive(finetune.temperature, "ge.finetune.temperature");
  if (finetune.queue_weight < 0) throw ConfigError("ge.finetune.queue_weight must be >= 0");
  unit_interval(finetune.ema_decay, "ge.finetune.ema_decay");
  finetune.augmentation.validate();
  non_negative(engine.decoder_base, "decoder.base");
  validate_train(engine.train, "decoder");
  try {
    engine.lth.schedule.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string("prune.schedule: ") + e.what());
  }
  unit_interval(engine.lth.delta, "prune.delta");
  non_negative(engine.lth.retrain_epochs, "prune.retrain_epochs");
  non_negative(engine.lth.recovery_epochs, "prune.recovery_epochs");
  positive(engine.continual.lr, "ema.lr");
  positive(engine.continual.epochs, "ema.epochs");
  positive(engine.continual.refresh_step, "ema.refresh_step");
  unit_interval(engine.continual.delta, "ema.delta");
  baseline.validate();
  unit_interval(merge.threshold, "merge.threshold");
}

std::uint64_t RunConfig::require_seed() const {
  if (!seed) throw ConfigError("seed is mandatory (config key 'seed' or --seed)");
  return *seed;
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  Obj root(j, "config");
  if (root.has("seed")) {
    if (!j.at("seed").is_number_unsigned()) throw ConfigError("config.seed: expected a non-negative integer");
    std::uint64_t s = 0;
    root.get("seed", s);
    c.seed = s;
  }
  root.get("output_root", c.output_root);
  root.get("data_dir", c.data_dir);
  root.get("paper_scale", c.paper_scale);
  {
    Obj r = root.sub("registry");
    r.get("path", c.registry.path);
    std::vector<int> v{c.registry.volume.d, c.registry.volume.h, c.registry.volume.w};
    r.get("volume", v);
    if (v.size() != 3) throw ConfigError("config.registry.volume: expected [d, h, w]");
    c.registry.volume = {v[0], v[1], v[2]};
    r.get("n_train", c.registry.n_train);
    r.get("n_val", c.registry.n_val);
    r.get("n_test", c.registry.n_test);
    r.get("seed", c.registry.seed);
    r.finish();
  }
  root.mark("orders");
  if (auto it = j.find("orders"); it != j.end()) {
    if (!it->is_array()) throw ConfigError("config.orders: expected an array");
    for (const auto& o : *it) {
      Obj oo(o, "config.orders[]");
      OrderSpec s;
      oo.get("name", s.name);
      oo.get("datasets", s.datasets);
      oo.finish();
      c.orders.push_back(std::move(s));
    }
  }
  {
    Obj e = root.sub("encoder");
    e.get("n_blocks", c.encoder.n_blocks);
    e.get("base_features", c.encoder.base_features);
    e.get("feature_cap", c.encoder.feature_cap);
    e.get("convs_per_block", c.encoder.convs_per_block);
    e.get("in_channels", c.encoder.in_channels);
    e.finish();
  }
  {
    Obj s = root.sub("ssl");
    s.get("enabled", c.ssl_enabled);
    s.get("epochs", c.ssl.epochs);
    s.get("batches_per_epoch", c.ssl.batches_per_epoch);
    s.get("lr", c.ssl.lr);
    s.get("momentum", c.ssl.momentum);
    read_augmentation(s.sub("augmentation"), c.ssl.augmentation);
    s.finish();
  }
  {
    Obj g = root.sub("ge");
    g.get("epochs", c.ge.epochs);
    g.get("lr", c.ge.lr);
    g.get("momentum", c.ge.momentum);
    g.get("poly_exponent", c.ge.poly_exponent);
    g.get("iterations_per_epoch", c.ge.iterations_per_epoch);
    g.get("decoder_base", c.ge.decoder_base);
    g.get("deep_supervision", c.ge.deep_supervision);
    Obj f = g.sub("finetune");
    f.get("enabled", c.finetune_enabled);
    f.get("epochs", c.finetune.epochs);
    f.get("iterations_per_epoch", c.finetune.iterations_per_epoch);
    f.get("lr", c.finetune.lr);
    f.get("momentum", c.finetune.momentum);
    f.get("use_queue", c.finetune.use_queue);
    f.get("queue_weight", c.finetune.queue_weight);
    f.get("temperature", c.finetune.temperature);
    f.get("decoder_base", c.finetune.decoder_base);
    f.get("ema_encoder", c.finetune.ema_encoder);
    f.get("ema_decay", c.finetune.ema_decay);
    read_augmentation(f.sub("augmentation"), c.finetune.augmentation);
    f.finish();
    g.finish();
  }
  {
    Obj d = root.sub("decoder");
    d.get("base", c.engine.decoder_base);
    d.get("aux_bpr", c.engine.aux_bpr);
    d.get("fls", c.engine.fls);
    TrainConfig& t = c.engine.train;
    d.get("warmup_epochs", t.warmup_epochs);
    d.get("warmup_lr", t.warmup_lr);
    d.get("epochs", t.epochs);
    d.get("lr", t.lr);
    d.get("momentum", t.momentum);
    d.get("poly_exponent", t.poly_exponent);
    d.get("iterations_per_epoch", t.iterations_per_epoch);
    d.get("deep_supervision", t.deep_supervision);
    d.get("aux_weight", t.aux_weight);
    d.finish();
  }
  {
    Obj p = root.sub("prune");
    p.get("enabled", c.engine.prune);
    LthConfig& l = c.engine.lth;
    p.get("schedule", l.schedule.rates);
    p.get("delta", l.delta);
    p.get("retrain_epochs", l.retrain_epochs);
    p.get("recovery_epochs", l.recovery_epochs);
    p.get("base_iterations", l.base_iterations);
    p.get("max_iterations", l.max_iterations);
    p.get("per_stage_baseline", l.per_stage_baseline);
    p.finish();
  }
  {
    Obj e = root.sub("ema");
    ContinualConfig& k = c.engine.continual;
    e.get("lr", k.lr);
    e.get("epochs", k.epochs);
    e.get("iterations_per_epoch", k.iterations_per_epoch);
    e.get("refresh_mask", k.refresh_mask);
    e.get("refresh_step", k.refresh_step);
    e.get("delta", k.delta);
    e.finish();
  }
  {
    Obj b = root.sub("baseline");
    BaselineConfig& x = c.baseline;
    b.get("lr", x.lr);
    b.get("epochs", x.epochs);
    b.get("iterations_per_epoch", x.iterations_per_epoch);
    b.get("momentum", x.momentum);
    b.get("poly_exponent", x.poly_exponent);
    b.get("unkd_weight", x.unkd_weight);
    b.get("pod_factor", x.pod_factor);
    b.get("pseudo_threshold", x.pseudo_threshold);
    b.get("deep_supervision", x.deep_supervision);
    b.finish();
  }
  {
    Obj m = root.sub("merge");
    m.get("binarize", c.merge.binarize);
    m.get("threshold", c.merge.threshold);
    m.finish();
  }
  root.finish();
  if (c.paper_scale) apply_paper_scale(c);
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file does not exist: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config is not valid JSON: " + std::string(e.what()));
  }
  return run_config_from_json(j);
}

OJson to_json(const RunConfig& c) {
  OJson j;
  if (c.seed) j["seed"] = *c.seed;
  j["output_root"] = c.output_root;
  j["paper_scale"] = c.paper_scale;
  j["registry"] = {{"path", c.registry.path},
                   {"volume", {c.registry.volume.d, c.registry.volume.h, c.registry.volume.w}},
                   {"n_train", c.registry.n_train},
                   {"n_val", c.registry.n_val},
                   {"n_test", c.registry.n_test},
                   {"seed", c.registry.seed}};
  j["data_dir"] = c.data_dir;
  OJson orders = OJson::array();
  for (const auto& o : c.orders) orders.push_back({{"name", o.name}, {"datasets", o.datasets}});
  j["orders"] = orders;
  j["encoder"] = {{"n_blocks", c.encoder.n_blocks},
                  {"base_features", c.encoder.base_features},
                  {"feature_cap", c.encoder.feature_cap},
                  {"convs_per_block", c.encoder.convs_per_block},
                  {"in_channels", c.encoder.in_channels}};
  j["ssl"] = {{"enabled", c.ssl_enabled},
              {"epochs", c.ssl.epochs},
              {"batches_per_epoch", c.ssl.batches_per_epoch},
              {"lr", c.ssl.lr},
              {"momentum", c.ssl.momentum},
              {"augmentation", augmentation_json(c.ssl.augmentation)}};
  const FinetuneConfig& f = c.finetune;
  j["ge"] = {{"epochs", c.ge.epochs},
             {"lr", c.ge.lr},
             {"momentum", c.ge.momentum},
             {"poly_exponent", c.ge.poly_exponent},
             {"iterations_per_epoch", c.ge.iterations_per_epoch},
             {"decoder_base", c.ge.decoder_base},
             {"deep_supervision", c.ge.deep_supervision},
             {"finetune",
              {{"enabled", c.finetune_enabled},
               {"epochs", f.epochs},
               {"iterations_per_epoch", f.iterations_per_epoch},
               {"lr", f.lr},
               {"momentum", f.momentum},
               {"use_queue", f.use_queue},
               {"queue_weight", f.queue_weight},
               {"temperature", f.temperature},
               {"decoder_base", f.decoder_base},
               {"ema_encoder", f.ema_encoder},
               {"ema_decay", f.ema_decay},
               {"augmentation", augmentation_json(f.augmentation)}}}};
  const TrainConfig& t = c.engine.train;
  j["decoder"] = {{"base", c.engine.decoder_base},
                  {"aux_bpr", c.engine.aux_bpr},
                  {"fls", c.engine.fls},
                  {"warmup_epochs", t.warmup_epochs},
                  {"warmup_lr", t.warmup_lr},
                  {"epochs", t.epochs},
                  {"lr", t.lr},
                  {"momentum", t.momentum},
                  {"poly_exponent", t.poly_exponent},
                  {"iterations_per_epoch", t.iterations_per_epoch},
                  {"deep_supervision", t.deep_supervision},
                  {"aux_weight", t.aux_weight}};
  const LthConfig& l = c.engine.lth;
  j["prune"] = {{"enabled", c.engine.prune},
                {"schedule", l.schedule.rates},
                {"delta", l.delta},
                {"retrain_epochs", l.retrain_epochs},
                {"recovery_epochs", l.recovery_epochs},
                {"base_iterations", l.base_iterations},
                {"max_iterations", l.max_iterations},
                {"per_stage_baseline", l.per_stage_baseline}};
  const ContinualConfig& k = c.engine.continual;
  j["ema"] = {{"lr", k.lr},
              {"epochs", k.epochs},
              {"iterations_per_epoch", k.iterations_per_epoch},
              {"refresh_mask", k.refresh_mask},
              {"refresh_step", k.refresh_step},
              {"delta", k.delta}};
  const BaselineConfig& b = c.baseline;
  j["baseline"] = {{"lr", b.lr},
                   {"epochs", b.epochs},
                   {"iterations_per_epoch", b.iterations_per_epoch},
                   {"momentum", b.momentum},
                   {"poly_exponent", b.poly_exponent},
                   {"unkd_weight", b.unkd_weight},
                   {"pod_factor", b.pod_factor},
                   {"pseudo_threshold", b.pseudo_threshold},
                   {"deep_supervision", b.deep_supervision}};
  j["merge"] = {{"binarize", c.merge.binarize}, {"threshold", c.merge.threshold}};
  return j;
}

void apply_paper_scale(RunConfig& c) {
  c.paper_scale = true;
  c.encoder = EncoderConfig::paper_scale();
  c.engine.decoder_base = 0;  // decoder widths follow the encoder
  c.ge.decoder_base = 0;
  c.finetune.decoder_base = 0;
  c.ssl.epochs = 5000;
  c.ssl.batches_per_epoch = 256;
  c.engine.train.epochs = 300;
  c.baseline.epochs = 500;
  c.baseline.iterations_per_epoch = 250;
}

TaskRegistry load_registry(const RunConfig& c) {
  TaskRegistry r;
  if (!c.registry.path.empty()) {
    try {
      r = registry_from_json(nlohmann::json::parse(read_text(c.registry.path)));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("registry file is invalid: " + std::string(e.what()));
    }
  } else {
    r = default_registry(c.registry.volume, c.registry.n_train, c.registry.n_val, c.registry.n_test, c.registry.seed);
  }
  r.validate();
  return r;
}

Corpus load_corpus(const RunConfig& c) {
  const TaskRegistry reg = load_registry(c);
  if (c.data_dir.empty()) return Corpus::generate(reg);
  Corpus corpus;
  corpus.registry = reg;
  for (const auto& d : reg.datasets) {
    const fs::path dir = fs::path(c.data_dir) / d.dataset_id;
    if (!fs::is_directory(dir)) throw ConfigError("data_dir has no dataset " + d.dataset_id);
    corpus.samples[d.dataset_id] = read_dataset(dir).samples;
  }
  return corpus;
}

std::vector<ContinualOrder> run_orders(const RunConfig& c, const TaskRegistry& registry) {
  if (c.orders.empty()) return default_orders(registry);
  std::vector<std::pair<std::string, std::vector<int>>> specs;
  for (const auto& o : c.orders) {
    std::vector<int> idx;
    for (const auto& id : o.datasets) {
      try {
        idx.push_back(registry.dataset_index(id));
      } catch (const InvalidArgument&) {
        throw ConfigError("order " + o.name + ": unknown dataset " + id);
      }
    }
    specs.emplace_back(o.name, std::move(idx));
  }
  try {
    return make_orders(registry, specs);
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace contseg
