// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

// Run configuration: one JSON document (config/schema.json) read strictly.
// Unknown keys and out-of-range values raise ConfigError.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "contseg/arch.hpp"
#include "contseg/engine.hpp"
#include "contseg/merge.hpp"
#include "contseg/sslge.hpp"
#include "json.hpp"

namespace contseg {

struct RegistryConfig {
  std::string path;  // registry JSON; empty = built-in suite
  Dims3 volume{48, 32, 32};
  int n_train = 8;
  int n_val = 4;
  int n_test = 4;
  std::uint64_t seed = 1;
};

struct OrderSpec {
  std::string name;
  std::vector<std::string> datasets;
};

struct RunConfig {
  std::optional<std::uint64_t> seed;
  std::string output_root = "runs";
  RegistryConfig registry;
  std::string data_dir;          // datasets written by `synth`; empty = generate in memory
  std::vector<OrderSpec> orders;  // empty = built-in orders
  EncoderConfig encoder;
  bool ssl_enabled = false;
  SslConfig ssl;
  GeConfig ge;
  bool finetune_enabled = false;
  FinetuneConfig finetune;
  EngineConfig engine;
  BaselineConfig baseline;
  MergeOptions merge;
  bool paper_scale = false;

  /// Throws ConfigError; `check_paths` also requires referenced files to exist.
  void validate(bool check_paths = true) const;
  std::uint64_t require_seed() const;
};

RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::ordered_json to_json(const RunConfig& c);

/// Full-scale hyperparameters: encoder widths and depth, epochs and baseline budget.
void apply_paper_scale(RunConfig& c);

/// Registry named by the config (file or built-in suite).
TaskRegistry load_registry(const RunConfig& c);

/// Corpus from data_dir when set, else generated from the registry.
Corpus load_corpus(const RunConfig& c);

std::vector<ContinualOrder> run_orders(const RunConfig& c, const TaskRegistry& registry);

}  // namespace contseg
