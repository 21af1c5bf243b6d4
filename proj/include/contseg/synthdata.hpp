// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

// Synthetic partially labeled CT-like volumes. Every scan covers an axial
// interval of the normalized body axis (0 = pelvis bottom, 1 = head top);
// anatomies sit at fixed body-axis bands with small per-case jitter.

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "contseg/tensor.hpp"

namespace contseg {

enum class ShapeKind { sphere, box, ellipsoid };

std::string to_string(ShapeKind k);
ShapeKind shape_kind_from_string(const std::string& s);

struct AnatomySpec {
  int class_id = 0;
  std::string name;
  ShapeKind shape_kind = ShapeKind::sphere;
  double bpr_center = 0.5;
  double bpr_extent = 0.1;
  std::pair<double, double> intensity_band{0.0, 0.0};
  bool is_gtv = false;
  std::optional<int> host_class;
  // In-plane placement in normalized [0,1] coordinates (x = left-right, y = anterior-posterior).
  double center_x = 0.5;
  double center_y = 0.5;
  double radius_x = 0.2;
  double radius_y = 0.2;

  void validate() const;
};

struct DatasetDescriptor {
  std::string dataset_id;
  std::vector<int> class_set;
  int n_train = 0;
  int n_val = 0;
  int n_test = 0;
  Dims3 volume_shape{48, 32, 32};            // (axial, y, x) voxels
  std::array<double, 3> voxel_spacing{1.5, 1.0, 1.0};  // mm, same order
  std::uint64_t seed = 0;
  std::pair<double, double> bpr_range{0.0, 1.0};  // body-axis interval the scan covers

  int n_cases() const { return n_train + n_val + n_test; }
  void validate() const;
};

struct TaskRegistry {
  std::vector<DatasetDescriptor> datasets;
  std::vector<AnatomySpec> anatomies;

  /// M = |union of class sets|, background excluded.
  int total_classes() const;
  std::vector<int> all_classes() const;
  const DatasetDescriptor& dataset(const std::string& id) const;
  const AnatomySpec& anatomy(int class_id) const;
  int dataset_index(const std::string& id) const;
  void validate() const;
};

enum class Split { train, val, test };
std::string to_string(Split s);

struct Sample {
  std::string case_id;
  std::string dataset_id;
  Split split = Split::train;
  Image image;
  LabelMap labels;
  std::vector<double> bpr_scores;  // one per axial slice, strictly increasing
};

/// Default five-dataset suite: comprehensive, head, chest, abdomen, gtv.
TaskRegistry default_registry(Dims3 volume_shape = {48, 32, 32}, int n_train = 8, int n_val = 4, int n_test = 4,
                              std::uint64_t seed = 1);

/// Affine slice-centre scores over the descriptor's body-axis interval.
std::vector<double> bpr_oracle(Dims3 volume_shape, const DatasetDescriptor& meta);

/// Deterministic in (descriptor, registry). Throws on overlapping non-GTV anatomies.
std::vector<Sample> generate_dataset(const DatasetDescriptor& descriptor, const TaskRegistry& registry);

/// One case; `index` counts train, then val, then test.
Sample generate_case(const DatasetDescriptor& descriptor, const TaskRegistry& registry, int index);

struct ContinualOrder {
  std::string name;
  std::vector<std::string> dataset_ids;
};

/// Each permutation must be a bijection over dataset indices.
std::vector<ContinualOrder> make_orders(const TaskRegistry& registry,
                                        const std::vector<std::pair<std::string, std::vector<int>>>& order_specs);

/// The four named orders of the default suite (order1..order4).
std::vector<ContinualOrder> default_orders(const TaskRegistry& registry);
const ContinualOrder& find_order(const std::vector<ContinualOrder>& orders, const std::string& name);

}  // namespace contseg
