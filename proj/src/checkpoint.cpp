// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

#include "contseg/checkpoint.hpp"

#include <cstring>

#include "contseg/error.hpp"
#include "contseg/volume_io.hpp"

namespace contseg {

namespace fs = std::filesystem;
using OJson = nlohmann::ordered_json;

namespace {

template <class T>
void write_raw(const fs::path& path, const std::vector<T>& v) {
  std::string bytes(v.size() * sizeof(T), '\0');
  if (!v.empty()) std::memcpy(bytes.data(), v.data(), bytes.size());
  write_text(path, bytes);
}

template <class T>
std::vector<T> read_raw(const fs::path& path, std::size_t n) {
  const std::string bytes = read_text(path);
  if (bytes.size() != n * sizeof(T)) throw IoError(path.string() + ": unexpected size");
  std::vector<T> v(n);
  if (n) std::memcpy(v.data(), bytes.data(), bytes.size());
  return v;
}

OJson param_entry(const ParamArray& p, const std::string& name, const std::string& dtype, const std::string& file) {
  OJson j;
  j["name"] = name;
  j["shape"] = p.shape;
  j["dtype"] = dtype;
  j["prunable"] = p.prunable;
  j["file"] = file;
  return j;
}

OJson save_params(const fs::path& root, const std::string& sub, const ConstParamRefs& ps) {
  OJson arr = OJson::array();
  for (const ParamArray* p : ps) {
    const std::string file = sub + "/" + p->name + ".f32";
    write_raw(root / file, p->value);
    arr.push_back(param_entry(*p, p->name, "float32", file));
  }
  return arr;
}

void load_params(const fs::path& root, const nlohmann::json& arr, const ParamRefs& ps) {
  if (arr.size() != ps.size()) throw IoError("checkpoint parameter count mismatch");
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto& e = arr[i];
    if (e.at("name").get<std::string>() != ps[i]->name) throw IoError("checkpoint parameter order mismatch");
    if (e.at("shape").get<std::vector<int>>() != ps[i]->shape) throw IoError("shape mismatch: " + ps[i]->name);
    ps[i]->value = read_raw<float>(root / e.at("file").get<std::string>(), ps[i]->size());
  }
}

OJson save_mask(const fs::path& root, const std::string& sub, const std::string& prefix, const ConstParamRefs& ps,
                const PruneMask& m) {
  OJson arr = OJson::array();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const std::string file = sub + "/" + prefix + ps[i]->name + ".mask";
    write_raw(root / file, pack_bits(m.keep[i]));
    arr.push_back({{"name", prefix + ps[i]->name}, {"bits", m.keep[i].size()}, {"file", file}});
  }
  return arr;
}

PruneMask load_mask(const fs::path& root, const nlohmann::json& arr) {
  PruneMask m;
  for (const auto& e : arr) {
    const auto n = e.at("bits").get<std::size_t>();
    m.keep.push_back(unpack_bits(read_raw<std::uint8_t>(root / e.at("file").get<std::string>(), (n + 7) / 8), n));
  }
  return m;
}

std::string to_string(PruneState s) {
  switch (s) {
    case PruneState::unpruned: return "unpruned";
    case PruneState::pruning: return "pruning";
    case PruneState::pruned: return "pruned";
  }
  return "unpruned";
}

PruneState prune_state_from_string(const std::string& s) {
  if (s == "unpruned") return PruneState::unpruned;
  if (s == "pruning") return PruneState::pruning;
  if (s == "pruned") return PruneState::pruned;
  throw IoError("unknown prune state: " + s);
}

OJson to_json(const DecoderConfig& c) {
  OJson j;
  j["enc_channels"] = c.enc_channels;
  j["dec_channels"] = c.dec_channels;
  j["out_channels"] = c.out_channels;
  j["fls_channels"] = c.fls_channels;
  j["aux_bpr"] = c.aux_bpr;
  return j;
}

DecoderConfig decoder_config_from_json(const nlohmann::json& j) {
  DecoderConfig c;
  c.enc_channels = j.at("enc_channels").get<std::vector<int>>();
  c.dec_channels = j.at("dec_channels").get<std::vector<int>>();
  c.out_channels = j.at("out_channels").get<int>();
  c.fls_channels = j.at("fls_channels").get<std::vector<std::vector<int>>>();
  c.aux_bpr = j.at("aux_bpr").get<bool>();
  return c;
}

}  // namespace

std::vector<std::uint8_t> pack_bits(const std::vector<std::uint8_t>& keep) {
  std::vector<std::uint8_t> out((keep.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < keep.size(); ++i)
    if (keep[i]) out[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
  return out;
}

std::vector<std::uint8_t> unpack_bits(const std::vector<std::uint8_t>& packed, std::size_t n) {
  if (packed.size() != (n + 7) / 8) throw IoError("packed mask has the wrong length");
  std::vector<std::uint8_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = (packed[i / 8] >> (i % 8)) & 1u;
  return out;
}

OJson to_json(const EncoderConfig& c) {
  OJson j;
  j["n_blocks"] = c.n_blocks;
  j["base_features"] = c.base_features;
  j["feature_cap"] = c.feature_cap;
  j["convs_per_block"] = c.convs_per_block;
  j["in_channels"] = c.in_channels;
  return j;
}

EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  try {
    EncoderConfig c;
    c.n_blocks = j.value("n_blocks", c.n_blocks);
    c.base_features = j.value("base_features", c.base_features);
    c.feature_cap = j.value("feature_cap", c.feature_cap);
    c.convs_per_block = j.value("convs_per_block", c.convs_per_block);
    c.in_channels = j.value("in_channels", c.in_channels);
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("encoder config: ") + e.what());
  }
}

OJson to_json(const BprBounds& b) {
  OJson j;
  j["lower"] = b.lower;
  j["upper"] = b.upper;
  j["sigma"] = b.sigma;
  j["p5"] = b.p5;
  j["p95"] = b.p95;
  return j;
}

BprBounds bounds_from_json(const nlohmann::json& j) {
  return {j.at("lower").get<double>(), j.at("upper").get<double>(), j.at("sigma").get<double>(),
          j.at("p5").get<double>(), j.at("p95").get<double>()};
}

void save_checkpoint(const fs::path& dir, const Model& model) {
  fs::create_directories(dir / "encoder");
  OJson man;
  man["format"] = "contseg-checkpoint";
  man["version"] = 1;
  OJson enc;
  enc["config"] = to_json(model.encoder.config());
  enc["frozen"] = model.encoder.frozen();
  enc["params"] = save_params(dir, "encoder", model.encoder.params());
  man["encoder"] = enc;

  OJson heads = OJson::array();
  OJson graph = OJson::object();
  for (const DecoderHead& h : model.heads) {
    const std::string sub = "heads/" + h.head_id;
    fs::create_directories(dir / sub);
    OJson j;
    j["head_id"] = h.head_id;
    j["class_ids"] = h.class_ids;
    j["fls_sources"] = h.fls_sources;
    j["is_gtv"] = h.is_gtv;
    j["prune_state"] = to_string(h.prune_state);
    j["decoder"] = to_json(h.net.config());
    const ConstParamRefs ps = h.net.params();
    j["params"] = save_params(dir, sub, ps);
    j["masks"] = h.prune_state == PruneState::unpruned || h.mask.empty() ? OJson::array()
                                                                          : save_mask(dir, sub, "", ps, h.mask);
    OJson ema;
    ema["active"] = h.ema.active;
    ema["decay"] = h.ema.decay;
    OJson shadow = OJson::array();
    if (h.ema.active) {
      for (std::size_t i = 0; i < ps.size(); ++i) {
        const std::string name = "ema." + ps[i]->name;
        const std::string file = sub + "/" + name + ".f64";
        write_raw(dir / file, h.ema.accum[i]);
        shadow.push_back(param_entry(*ps[i], name, "float64", file));
      }
    }
    ema["params"] = shadow;
    ema["masks"] = h.ema.active && !h.ema.mask.empty() ? save_mask(dir, sub, "ema.", ps, h.ema.mask) : OJson::array();
    j["ema"] = ema;
    heads.push_back(j);
    graph[h.head_id] = h.fls_sources;
  }
  man["heads"] = heads;
  man["fls_graph"] = graph;
  OJson bounds = OJson::object();
  for (const auto& [id, b] : model.bounds) bounds[id] = to_json(b);
  man["bounds"] = bounds;
  write_text(dir / "manifest.json", man.dump(2) + "\n");
}

Model load_checkpoint(const fs::path& dir) {
  nlohmann::json man;
  try {
    man = nlohmann::json::parse(read_text(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(dir.string() + ": bad checkpoint manifest: " + e.what());
  }
  try {
    if (man.at("format").get<std::string>() != "contseg-checkpoint") throw IoError("not a contseg checkpoint");
    Model m;
    Rng rng(0);
    const auto& enc = man.at("encoder");
    m.encoder = Encoder(encoder_config_from_json(enc.at("config")), rng);
    load_params(dir, enc.at("params"), m.encoder.storage_params());
    m.encoder.set_frozen(enc.at("frozen").get<bool>());
    for (const auto& j : man.at("heads")) {
      DecoderHead h;
      h.head_id = j.at("head_id").get<std::string>();
      h.class_ids = j.at("class_ids").get<std::vector<int>>();
      h.fls_sources = j.at("fls_sources").get<std::vector<std::string>>();
      h.is_gtv = j.at("is_gtv").get<bool>();
      h.prune_state = prune_state_from_string(j.at("prune_state").get<std::string>());
      h.net = DecoderNet("dec", decoder_config_from_json(j.at("decoder")), rng);
      load_params(dir, j.at("params"), h.net.params());
      const ConstParamRefs ps = std::as_const(h.net).params();
      h.mask = j.at("masks").empty() ? PruneMask::all_kept(ps) : load_mask(dir, j.at("masks"));
      const auto& ema = j.at("ema");
      h.ema.decay = ema.at("decay").get<double>();
      h.ema.active = ema.at("active").get<bool>();
      if (h.ema.active) {
        h.ema.shadow = h.net;
        const auto& arr = ema.at("params");
        if (arr.size() != ps.size()) throw IoError("EMA parameter count mismatch");
        ParamRefs sp = h.ema.shadow.params();
        for (std::size_t i = 0; i < ps.size(); ++i) {
          h.ema.accum.push_back(read_raw<double>(dir / arr[i].at("file").get<std::string>(), ps[i]->size()));
          for (std::size_t k = 0; k < sp[i]->size(); ++k) sp[i]->value[k] = static_cast<float>(h.ema.accum[i][k]);
        }
        if (!ema.at("masks").empty()) h.ema.mask = load_mask(dir, ema.at("masks"));
      }
      m.heads.push_back(std::move(h));
    }
    for (const auto& [id, b] : man.at("bounds").items()) m.bounds[id] = bounds_from_json(b);
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(dir.string() + ": bad checkpoint manifest: " + e.what());
  }
}

}  // namespace contseg
