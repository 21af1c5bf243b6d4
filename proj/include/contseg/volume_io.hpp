// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

// Raw volume files: 8-byte magic, three little-endian uint32 dims (x, y, z),
// then x-fastest little-endian payload (float32 images, int32 label maps).

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "contseg/synthdata.hpp"
#include "contseg/tensor.hpp"

namespace contseg {

inline constexpr char kImageMagic[8] = {'C', 'S', 'E', 'G', 'F', '3', '2', '\0'};
inline constexpr char kLabelMagic[8] = {'C', 'S', 'E', 'G', 'I', '3', '2', '\0'};

void write_image(const std::filesystem::path& path, const Image& image);
void write_labels(const std::filesystem::path& path, const LabelMap& labels);
Image read_image(const std::filesystem::path& path);
LabelMap read_labels(const std::filesystem::path& path);

/// Writes <dir>/manifest.json plus one image and one label file per case.
void write_dataset(const std::filesystem::path& dir, const DatasetDescriptor& descriptor, const TaskRegistry& registry,
                   const std::vector<Sample>& samples);

struct LoadedDataset {
  DatasetDescriptor descriptor;
  std::vector<AnatomySpec> anatomies;
  std::vector<Sample> samples;
};
LoadedDataset read_dataset(const std::filesystem::path& dir);

/// Whole-file helpers used by every writer that must be byte-reproducible.
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace contseg
