// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

// Checkpoint directory: manifest.json, one raw little-endian file per
// parameter array (float32; EMA accumulators float64 under an "ema." prefix)
// and one bit-packed mask file (LSB first) per array of a pruned head.

#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "contseg/arch.hpp"
#include "contseg/merge.hpp"
#include "json.hpp"

namespace contseg {

/// Encoder, decoder heads and per-head body-part bounds.
struct Model {
  Encoder encoder;
  std::vector<DecoderHead> heads;
  std::map<std::string, BprBounds> bounds;
};

void save_checkpoint(const std::filesystem::path& dir, const Model& model);
Model load_checkpoint(const std::filesystem::path& dir);

std::vector<std::uint8_t> pack_bits(const std::vector<std::uint8_t>& keep);
std::vector<std::uint8_t> unpack_bits(const std::vector<std::uint8_t>& packed, std::size_t n);

nlohmann::ordered_json to_json(const EncoderConfig& c);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);
nlohmann::ordered_json to_json(const BprBounds& b);
BprBounds bounds_from_json(const nlohmann::json& j);

}  // namespace contseg
