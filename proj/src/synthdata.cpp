// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

#include "contseg/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "contseg/error.hpp"

namespace contseg {

namespace {

constexpr double kBackgroundHu = -500.0;
constexpr double kNoiseSigma = 20.0;

bool contains(const std::vector<int>& v, int x) { return std::find(v.begin(), v.end(), x) != v.end(); }

}  // namespace

std::string to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::sphere: return "sphere";
    case ShapeKind::box: return "box";
    case ShapeKind::ellipsoid: return "ellipsoid";
  }
  return "?";
}

ShapeKind shape_kind_from_string(const std::string& s) {
  if (s == "sphere") return ShapeKind::sphere;
  if (s == "box") return ShapeKind::box;
  if (s == "ellipsoid") return ShapeKind::ellipsoid;
  throw InvalidArgument("unknown shape kind: " + s);
}

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

void AnatomySpec::validate() const {
  if (class_id <= 0) throw InvalidArgument(name + ": class_id must be positive");
  if (bpr_extent <= 0 || bpr_extent > 1) throw InvalidArgument(name + ": bpr_extent must be in (0, 1]");
  if (bpr_center - bpr_extent / 2 < 0 || bpr_center + bpr_extent / 2 > 1)
    throw InvalidArgument(name + ": body-axis band leaves [0, 1]");
  if (intensity_band.first > intensity_band.second || intensity_band.first < -1024 || intensity_band.second > 1024)
    throw InvalidArgument(name + ": invalid intensity band");
  if (is_gtv && !host_class) throw InvalidArgument(name + ": GTV anatomy needs a host class");
  if (radius_x <= 0 || radius_y <= 0) throw InvalidArgument(name + ": radii must be positive");
  if (shape_kind == ShapeKind::sphere && radius_x != radius_y)
    throw InvalidArgument(name + ": sphere needs equal in-plane radii");
}

void DatasetDescriptor::validate() const {
  if (class_set.empty()) throw InvalidArgument(dataset_id + ": empty class set");
  if (n_train < 0 || n_val < 0 || n_test < 0) throw InvalidArgument(dataset_id + ": negative split size");
  if (volume_shape.d < 1 || volume_shape.h < 1 || volume_shape.w < 1)
    throw InvalidArgument(dataset_id + ": empty volume shape");
  if (!(bpr_range.first >= 0 && bpr_range.first < bpr_range.second && bpr_range.second <= 1))
    throw InvalidArgument(dataset_id + ": invalid body-axis range");
}

int TaskRegistry::total_classes() const { return static_cast<int>(all_classes().size()); }

std::vector<int> TaskRegistry::all_classes() const {
  std::set<int> s;
  for (const auto& d : datasets) s.insert(d.class_set.begin(), d.class_set.end());
  s.erase(0);
  return {s.begin(), s.end()};
}

const DatasetDescriptor& TaskRegistry::dataset(const std::string& id) const {
  for (const auto& d : datasets)
    if (d.dataset_id == id) return d;
  throw InvalidArgument("unknown dataset: " + id);
}

int TaskRegistry::dataset_index(const std::string& id) const {
  for (std::size_t i = 0; i < datasets.size(); ++i)
    if (datasets[i].dataset_id == id) return static_cast<int>(i);
  throw InvalidArgument("unknown dataset: " + id);
}

const AnatomySpec& TaskRegistry::anatomy(int class_id) const {
  for (const auto& a : anatomies)
    if (a.class_id == class_id) return a;
  throw InvalidArgument("unknown class id: " + std::to_string(class_id));
}

void TaskRegistry::validate() const {
  std::set<int> ids;
  for (const auto& a : anatomies) {
    a.validate();
    if (!ids.insert(a.class_id).second) throw InvalidArgument("duplicate class id " + std::to_string(a.class_id));
  }
  for (const auto& a : anatomies)
    if (a.is_gtv && !ids.count(*a.host_class)) throw InvalidArgument(a.name + ": host class not in registry");
  std::set<std::string> names;
  for (const auto& d : datasets) {
    d.validate();
    if (!names.insert(d.dataset_id).second) throw InvalidArgument("duplicate dataset id " + d.dataset_id);
    for (int c : d.class_set)
      if (!ids.count(c)) throw InvalidArgument(d.dataset_id + ": class " + std::to_string(c) + " not in registry");
  }
}

TaskRegistry default_registry(Dims3 volume_shape, int n_train, int n_val, int n_test, std::uint64_t seed) {
  TaskRegistry r;
  auto anat = [&](int id, std::string name, ShapeKind k, double c, double e, double hu, double cx, double cy,
                  double rx, double ry) {
    AnatomySpec a;
    a.class_id = id;
    a.name = std::move(name);
    a.shape_kind = k;
    a.bpr_center = c;
    a.bpr_extent = e;
    a.intensity_band = {hu - 20, hu + 20};
    a.center_x = cx;
    a.center_y = cy;
    a.radius_x = rx;
    a.radius_y = ry;
    return a;
  };
  r.anatomies.push_back(anat(1, "brain", ShapeKind::sphere, 0.88, 0.16, 40, 0.5, 0.5, 0.24, 0.24));
  r.anatomies.push_back(anat(2, "lung", ShapeKind::ellipsoid, 0.66, 0.18, -200, 0.28, 0.5, 0.15, 0.28));
  r.anatomies.push_back(anat(3, "heart", ShapeKind::sphere, 0.66, 0.16, 150, 0.72, 0.5, 0.15, 0.15));
  r.anatomies.push_back(anat(4, "liver", ShapeKind::box, 0.42, 0.16, 350, 0.31, 0.5, 0.17, 0.26));
  r.anatomies.push_back(anat(5, "kidney", ShapeKind::ellipsoid, 0.37, 0.16, 550, 0.72, 0.55, 0.13, 0.15));
  AnatomySpec tumor = anat(6, "liver_tumor", ShapeKind::ellipsoid, 0.42, 0.14, 800, 0.31, 0.5, 0.16, 0.22);
  tumor.is_gtv = true;
  tumor.host_class = 4;
  r.anatomies.push_back(tumor);

  auto ds = [&](std::string id, std::vector<int> classes, double lo, double hi, std::uint64_t k) {
    DatasetDescriptor d;
    d.dataset_id = std::move(id);
    d.class_set = std::move(classes);
    d.n_train = n_train;
    d.n_val = n_val;
    d.n_test = n_test;
    d.volume_shape = volume_shape;
    d.seed = seed * 1000 + k;
    d.bpr_range = {lo, hi};
    return d;
  };
  r.datasets.push_back(ds("comprehensive", {1, 2, 3, 4, 5}, 0.0, 1.0, 1));
  r.datasets.push_back(ds("head", {1}, 0.70, 1.0, 2));
  r.datasets.push_back(ds("chest", {2, 3}, 0.50, 0.80, 3));
  r.datasets.push_back(ds("abdomen", {4, 5}, 0.25, 0.60, 4));
  r.datasets.push_back(ds("gtv", {4, 6}, 0.30, 0.58, 5));
  r.validate();
  return r;
}

std::vector<double> bpr_oracle(Dims3 volume_shape, const DatasetDescriptor& meta) {
  const int z = volume_shape.d;
  if (z < 1) throw InvalidArgument("bpr_oracle: axial extent must be at least 1");
  const auto [lo, hi] = meta.bpr_range;
  std::vector<double> s(z);
  for (int k = 0; k < z; ++k) s[k] = lo + (k + 0.5) * (hi - lo) / z;
  return s;
}

Sample generate_case(const DatasetDescriptor& descriptor, const TaskRegistry& registry, int index) {
  descriptor.validate();
  if (index < 0 || index >= descriptor.n_cases()) throw InvalidArgument("case index out of range");
  for (int c : descriptor.class_set) registry.anatomy(c);

  std::seed_seq seq{static_cast<std::uint32_t>(descriptor.seed), static_cast<std::uint32_t>(descriptor.seed >> 32),
                    static_cast<std::uint32_t>(index)};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> u(0.0, 1.0);

  const Dims3 d = descriptor.volume_shape;
  Sample s;
  char buf[32];
  std::snprintf(buf, sizeof buf, "_%04d", index);
  s.case_id = descriptor.dataset_id + buf;
  s.dataset_id = descriptor.dataset_id;
  s.split = index < descriptor.n_train                        ? Split::train
            : index < descriptor.n_train + descriptor.n_val ? Split::val
                                                               : Split::test;
  s.bpr_scores = bpr_oracle(d, descriptor);
  s.image = Image(d, static_cast<float>(kBackgroundHu));
  s.labels = LabelMap(d, 0);

  // Which class currently occupies each voxel (0 = none), for overlap checks and GTV hosting.
  std::vector<int> owner(d.voxels(), 0);
  for (const AnatomySpec& a : registry.anatomies) {
    // Draw every anatomy's jitter so the stream does not depend on the class set.
    const double dc = (u(rng) - 0.5) * 0.03;
    const double dx = (u(rng) - 0.5) * 0.06;
    const double dy = (u(rng) - 0.5) * 0.06;
    const double scale = 0.9 + 0.2 * u(rng);
    const double level = a.intensity_band.first + u(rng) * (a.intensity_band.second - a.intensity_band.first);
    const bool labeled = contains(descriptor.class_set, a.class_id);
    if (a.is_gtv && !labeled) continue;  // lesions only exist in the datasets that annotate them

    const double c = a.bpr_center + dc;
    const double half = a.bpr_extent / 2 * scale;
    const double cx = a.center_x + dx, cy = a.center_y + dy;
    const double rx = a.radius_x * scale, ry = a.radius_y * scale;
    for (int z = 0; z < d.d; ++z) {
      const double az = (s.bpr_scores[z] - c) / half;
      if (std::abs(az) > 1) continue;
      for (int y = 0; y < d.h; ++y) {
        const double ay = ((y + 0.5) / d.h - cy) / ry;
        for (int x = 0; x < d.w; ++x) {
          const double ax = ((x + 0.5) / d.w - cx) / rx;
          const bool inside = a.shape_kind == ShapeKind::box
                                  ? (std::abs(ax) <= 1 && std::abs(ay) <= 1)
                                  : (az * az + ax * ax + ay * ay <= 1);
          if (!inside) continue;
          const std::size_t i = s.image.index(z, y, x);
          if (a.is_gtv) {
            if (owner[i] != *a.host_class) continue;
          } else if (owner[i] != 0) {
            if (labeled && contains(descriptor.class_set, owner[i]))
              throw InvalidArgument(descriptor.dataset_id + ": anatomies " + std::to_string(owner[i]) + " and " +
                                    std::to_string(a.class_id) + " overlap");
            continue;
          }
          owner[i] = a.class_id;
          s.image.data[i] = static_cast<float>(level);
          if (labeled) s.labels.data[i] = a.class_id;
        }
      }
    }
  }
  std::normal_distribution<double> noise(0.0, kNoiseSigma);
  for (auto& v : s.image.data) v = static_cast<float>(v + noise(rng));
  return s;
}

std::vector<Sample> generate_dataset(const DatasetDescriptor& descriptor, const TaskRegistry& registry) {
  std::vector<Sample> out;
  out.reserve(descriptor.n_cases());
  for (int i = 0; i < descriptor.n_cases(); ++i) out.push_back(generate_case(descriptor, registry, i));
  return out;
}

std::vector<ContinualOrder> make_orders(const TaskRegistry& registry,
                                        const std::vector<std::pair<std::string, std::vector<int>>>& order_specs) {
  std::vector<ContinualOrder> out;
  for (const auto& [name, perm] : order_specs) {
    std::vector<bool> seen(registry.datasets.size(), false);
    ContinualOrder o{name, {}};
    for (int i : perm) {
      if (i < 0 || i >= static_cast<int>(seen.size())) throw InvalidArgument(name + ": dataset index out of range");
      if (seen[i]) throw InvalidArgument(name + ": repeated dataset index " + std::to_string(i));
      seen[i] = true;
      o.dataset_ids.push_back(registry.datasets[i].dataset_id);
    }
    if (o.dataset_ids.empty()) throw InvalidArgument(name + ": empty order");
    out.push_back(std::move(o));
  }
  return out;
}

std::vector<ContinualOrder> default_orders(const TaskRegistry& registry) {
  auto idx = [&](const char* id) { return registry.dataset_index(id); };
  return make_orders(registry, {
                                   {"order1", {idx("head"), idx("chest"), idx("abdomen")}},
                                   {"order2", {idx("abdomen"), idx("chest"), idx("head")}},
                                   {"order3", {idx("chest"), idx("abdomen"), idx("gtv")}},
                                   {"order4", {idx("head"), idx("abdomen"), idx("gtv")}},
                               });
}

const ContinualOrder& find_order(const std::vector<ContinualOrder>& orders, const std::string& name) {
  for (const auto& o : orders)
    if (o.name == name) return o;
  throw ConfigError("unknown order: " + name);
}

}  // namespace contseg
