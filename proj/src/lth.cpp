// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

#include "contseg/lth.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "contseg/error.hpp"

namespace contseg {

void PruneSchedule::validate() const {
  if (rates.empty()) throw InvalidArgument("prune schedule is empty");
  for (std::size_t i = 0; i < rates.size(); ++i) {
    if (!(rates[i] > 0 && rates[i] < 1)) throw InvalidArgument("prune rate outside (0, 1)");
    if (i > 0 && !(rates[i] > rates[i - 1])) throw InvalidArgument("prune schedule is not strictly increasing");
  }
}

PruneSchedule default_schedule() {
  return {{0.80, 0.84, 0.88, 0.92, 0.93, 0.95, 0.97, 0.99, 0.991, 0.993, 0.995, 0.997}};
}

std::pair<std::size_t, std::size_t> prunable_counts(const ConstParamRefs& params, const PruneMask& mask) {
  std::size_t n = 0, dropped = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->prunable) continue;
    n += params[i]->size();
    if (!mask.empty())
      dropped += static_cast<std::size_t>(std::count(mask.keep[i].begin(), mask.keep[i].end(), std::uint8_t{0}));
  }
  return {n, dropped};
}

PruneMask l1_mask(const ConstParamRefs& params, const PruneMask& previous, double rate) {
  if (!(rate > 0 && rate < 1)) throw InvalidArgument("prune rate outside (0, 1)");
  if (!previous.empty() && previous.keep.size() != params.size())
    throw ShapeError("previous mask does not match parameter list");
  struct Entry {
    bool kept;
    float mag;
    const std::string* name;
    std::uint32_t array;
    std::uint32_t index;
  };
  std::vector<Entry> entries;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->prunable) continue;
    for (std::size_t j = 0; j < params[i]->size(); ++j) {
      const bool kept = previous.empty() || previous.keep[i][j];
      entries.push_back({kept, std::abs(params[i]->value[j]), &params[i]->name, static_cast<std::uint32_t>(i),
                         static_cast<std::uint32_t>(j)});
    }
  }
  const auto n_drop = static_cast<std::size_t>(std::llround(rate * static_cast<double>(entries.size())));
  auto less = [](const Entry& a, const Entry& b) {
    if (a.kept != b.kept) return !a.kept;
    if (a.mag != b.mag) return a.mag < b.mag;
    if (*a.name != *b.name) return *a.name < *b.name;
    if (a.array != b.array) return a.array < b.array;
    return a.index < b.index;
  };
  if (n_drop < entries.size())
    std::nth_element(entries.begin(), entries.begin() + static_cast<std::ptrdiff_t>(n_drop), entries.end(), less);
  PruneMask m = PruneMask::all_kept(params);
  for (std::size_t k = 0; k < n_drop && k < entries.size(); ++k) m.keep[entries[k].array][entries[k].index] = 0;
  return m;
}

PruneMask global_l1_mask(const DecoderHead& head, double rate) {
  return l1_mask(head.net.params(), head.mask, rate);
}

int minibatch_ramp(double rate, int base, int cap) {
  if (rate < 0 || rate > 1) throw InvalidArgument("ramp rate outside [0, 1]");
  return static_cast<int>(std::lround(base + rate * (cap - base)));
}

namespace {

std::vector<std::uint8_t> param_bytes(const DecoderNet& net) {
  std::vector<std::uint8_t> out;
  for (const ParamArray* p : net.params()) {
    const auto* b = reinterpret_cast<const std::uint8_t*>(p->value.data());
    out.insert(out.end(), b, b + p->size() * sizeof(float));
  }
  return out;
}

void restore_bytes(DecoderNet& net, const std::vector<std::uint8_t>& bytes) {
  std::size_t off = 0;
  for (ParamArray* p : net.params()) {
    const std::size_t n = p->size() * sizeof(float);
    std::memcpy(p->value.data(), bytes.data() + off, n);
    off += n;
  }
}

}  // namespace

PruneRecord lth_prune(DecoderHead& head, const LthHooks& hooks, const LthConfig& cfg) {
  cfg.schedule.validate();
  if (!hooks.train || !hooks.validate) throw InvalidArgument("lth_prune needs train and validate hooks");
  if (hooks.items <= 0) throw InvalidArgument("lth_prune needs a non-empty training set");
  PruneRecord rec;
  rec.head_id = head.head_id;
  head.prune_state = PruneState::pruning;
  if (head.mask.empty()) head.mask = PruneMask::all_kept(std::as_const(head.net).params());

  const int base = cfg.base_iterations > 0 ? cfg.base_iterations : hooks.items;
  const int cap = cfg.max_iterations > 0 ? cfg.max_iterations : 2 * base;
  rec.val_dsc_before = hooks.validate(head);
  double reference = rec.val_dsc_before;

  std::vector<std::uint8_t> kept_bytes = param_bytes(head.net);
  PruneMask kept_mask = head.mask;
  double kept_rate = 0;

  for (const double rate : cfg.schedule.rates) {
    rec.attempted_rate = rate;
    head.mask = global_l1_mask(head, rate);
    head.apply_mask();
    hooks.train(head, cfg.retrain_epochs, minibatch_ramp(rate, base, cap));
    head.apply_mask();
    PruneStage st;
    st.rate = rate;
    st.val_dsc = hooks.validate(head);
    const auto counts = prunable_counts(std::as_const(head.net).params(), head.mask);
    st.pruned = counts.second;
    st.target = static_cast<std::size_t>(std::llround(rate * static_cast<double>(counts.first)));
    st.accepted = reference - st.val_dsc <= cfg.delta;
    rec.stages.push_back(st);
    rec.accepted = st.accepted;
    if (!st.accepted) {
      restore_bytes(head.net, kept_bytes);
      head.mask = kept_mask;
      rec.rewind_verified = param_bytes(head.net) == kept_bytes && head.mask == kept_mask;
      rec.rewound_to = kept_rate;
      break;
    }
    kept_bytes = param_bytes(head.net);
    kept_mask = head.mask;
    kept_rate = rate;
    if (cfg.per_stage_baseline) reference = st.val_dsc;
  }

  if (cfg.recovery_epochs > 0) hooks.train(head, cfg.recovery_epochs, base);
  head.apply_mask();
  rec.val_dsc_after = hooks.validate(head);
  rec.final_rate = kept_rate;
  rec.complement = 1.0 - kept_rate;
  const auto counts = prunable_counts(std::as_const(head.net).params(), head.mask);
  rec.prunable = counts.first;
  rec.dense_params = head.mask.total();
  rec.sparse_params = head.mask.kept();
  head.prune_state = PruneState::pruned;
  return rec;
}

nlohmann::ordered_json PruneRecord::to_json() const {
  nlohmann::ordered_json j;
  j["head_id"] = head_id;
  j["attempted_rate"] = attempted_rate;
  j["val_dsc_before"] = val_dsc_before;
  j["val_dsc_after"] = val_dsc_after;
  j["accepted"] = accepted;
  j["rewound_to"] = rewound_to ? nlohmann::ordered_json(*rewound_to) : nlohmann::ordered_json(nullptr);
  j["final_rate"] = final_rate;
  j["complement"] = complement;
  j["prunable"] = prunable;
  j["dense_params"] = dense_params;
  j["sparse_params"] = sparse_params;
  j["rewind_verified"] = rewind_verified;
  auto st = nlohmann::ordered_json::array();
  for (const auto& s : stages)
    st.push_back({{"rate", s.rate}, {"val_dsc", s.val_dsc}, {"pruned", s.pruned}, {"target", s.target},
                  {"accepted", s.accepted}});
  j["stages"] = st;
  return j;
}

PruneRecord PruneRecord::from_json(const nlohmann::json& j) {
  try {
    PruneRecord r;
    r.head_id = j.at("head_id").get<std::string>();
    r.attempted_rate = j.at("attempted_rate").get<double>();
    r.val_dsc_before = j.at("val_dsc_before").get<double>();
    r.val_dsc_after = j.at("val_dsc_after").get<double>();
    r.accepted = j.at("accepted").get<bool>();
    if (!j.at("rewound_to").is_null()) r.rewound_to = j["rewound_to"].get<double>();
    r.final_rate = j.at("final_rate").get<double>();
    r.complement = j.at("complement").get<double>();
    r.prunable = j.at("prunable").get<std::size_t>();
    r.dense_params = j.at("dense_params").get<std::size_t>();
    r.sparse_params = j.at("sparse_params").get<std::size_t>();
    r.rewind_verified = j.at("rewind_verified").get<bool>();
    for (const auto& s : j.at("stages"))
      r.stages.push_back({s.at("rate").get<double>(), s.at("val_dsc").get<double>(), s.at("pruned").get<std::size_t>(),
                          s.at("target").get<std::size_t>(), s.at("accepted").get<bool>()});
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("prune record: ") + e.what());
  }
}

}  // namespace contseg
