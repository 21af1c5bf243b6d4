// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "contseg/tensor.hpp"

namespace contseg {

using Spacing = std::array<double, 3>;  // mm along (axial, y, x)

Mask binarize(const LabelMap& labels, int class_id);

/// 2|A n B| / (|A| + |B|); both empty -> 1.
double dsc(const Mask& a, const Mask& b);

/// Foreground voxels with a face neighbour in the background (outside the volume counts as background).
Mask surface(const Mask& m);

/// Mean of the two directed mean surface distances in mm; nullopt when either mask is empty.
std::optional<double> asd(const Mask& a, const Mask& b, const Spacing& spacing);

/// All-pairs reference for asd.
std::optional<double> asd_brute_force(const Mask& a, const Mask& b, const Spacing& spacing);

/// Exact squared Euclidean distance (mm^2) from each voxel to the nearest set voxel; +inf if none.
std::vector<double> squared_distance_transform(const Mask& m, const Spacing& spacing);

/// Linear-interpolation percentile (p in [0, 100]) of a non-empty sample.
double percentile(std::vector<double> v, double p);

/// Mean of the cases inside [P5, P95]; the plain mean when none are.
double percentile_mean(const std::vector<double>& v);

/// Sample (n - 1) standard deviation.
double sample_std(const std::vector<double>& v);

double mean(const std::vector<double>& v);

struct CaseScore {
  std::string case_id;
  double dsc = 0;
  std::optional<double> asd;
};

struct ClassScore {
  std::string dataset_id;
  int class_id = 0;
  std::vector<CaseScore> cases;

  double mean_dsc() const;
  /// Mean over cases with a defined ASD; nullopt when none.
  std::optional<double> mean_asd() const;
};

struct StepSnapshot {
  int step = 0;
  std::string dataset_id;                  // dataset introduced at this step
  std::vector<std::string> seen_datasets;  // in order of introduction
  std::vector<ClassScore> scores;          // every (dataset, class) learned so far
  std::size_t dense_params = 0;
  std::size_t sparse_params = 0;
  std::vector<std::string> heads;

  /// Mean DSC over a dataset's classes, or nullopt if the dataset is not covered.
  std::optional<double> dataset_dsc(const std::string& id) const;
};

struct CurvePoint {
  int step = 0;
  double dsc = 0;
};

/// Mean DSC of the dataset's classes at each step from its introduction on.
std::vector<CurvePoint> forgetting_curve(const std::vector<StepSnapshot>& snapshots, const std::string& dataset_id);

/// Mean over classes of per-class mean DSC / ASD.
double mean_class_dsc(const std::vector<ClassScore>& scores);
std::optional<double> mean_class_asd(const std::vector<ClassScore>& scores);

}  // namespace contseg
