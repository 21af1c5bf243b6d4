// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

#include "contseg/serialize.hpp"

#include "contseg/error.hpp"

namespace contseg {

Json to_json(const AnatomySpec& a) {
  Json j;
  j["class_id"] = a.class_id;
  j["name"] = a.name;
  j["shape_kind"] = to_string(a.shape_kind);
  j["bpr_center"] = a.bpr_center;
  j["bpr_extent"] = a.bpr_extent;
  j["intensity_band"] = {a.intensity_band.first, a.intensity_band.second};
  j["is_gtv"] = a.is_gtv;
  j["host_class"] = a.host_class ? Json(*a.host_class) : Json(nullptr);
  j["center"] = {a.center_x, a.center_y};
  j["radius"] = {a.radius_x, a.radius_y};
  return j;
}

AnatomySpec anatomy_from_json(const nlohmann::json& j) {
  try {
    AnatomySpec a;
    a.class_id = j.at("class_id").get<int>();
    a.name = j.at("name").get<std::string>();
    a.shape_kind = shape_kind_from_string(j.at("shape_kind").get<std::string>());
    a.bpr_center = j.at("bpr_center").get<double>();
    a.bpr_extent = j.at("bpr_extent").get<double>();
    a.intensity_band = {j.at("intensity_band").at(0).get<double>(), j.at("intensity_band").at(1).get<double>()};
    a.is_gtv = j.value("is_gtv", false);
    if (j.contains("host_class") && !j["host_class"].is_null()) a.host_class = j["host_class"].get<int>();
    if (j.contains("center")) {
      a.center_x = j["center"].at(0).get<double>();
      a.center_y = j["center"].at(1).get<double>();
    }
    if (j.contains("radius")) {
      a.radius_x = j["radius"].at(0).get<double>();
      a.radius_y = j["radius"].at(1).get<double>();
    }
    a.validate();
    return a;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("anatomy: ") + e.what());
  }
}

Json to_json(const DatasetDescriptor& d) {
  Json j;
  j["dataset_id"] = d.dataset_id;
  j["class_set"] = d.class_set;
  j["n_train"] = d.n_train;
  j["n_val"] = d.n_val;
  j["n_test"] = d.n_test;
  j["volume_shape"] = {d.volume_shape.w, d.volume_shape.h, d.volume_shape.d};
  j["voxel_spacing"] = {d.voxel_spacing[2], d.voxel_spacing[1], d.voxel_spacing[0]};
  j["seed"] = d.seed;
  j["bpr_range"] = {d.bpr_range.first, d.bpr_range.second};
  return j;
}

DatasetDescriptor descriptor_from_json(const nlohmann::json& j) {
  try {
    DatasetDescriptor d;
    d.dataset_id = j.at("dataset_id").get<std::string>();
    d.class_set = j.at("class_set").get<std::vector<int>>();
    d.n_train = j.at("n_train").get<int>();
    d.n_val = j.at("n_val").get<int>();
    d.n_test = j.at("n_test").get<int>();
    const auto& vs = j.at("volume_shape");
    d.volume_shape = {vs.at(2).get<int>(), vs.at(1).get<int>(), vs.at(0).get<int>()};
    const auto& sp = j.at("voxel_spacing");
    d.voxel_spacing = {sp.at(2).get<double>(), sp.at(1).get<double>(), sp.at(0).get<double>()};
    d.seed = j.at("seed").get<std::uint64_t>();
    d.bpr_range = {j.at("bpr_range").at(0).get<double>(), j.at("bpr_range").at(1).get<double>()};
    d.validate();
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("dataset descriptor: ") + e.what());
  }
}

Json to_json(const TaskRegistry& r) {
  Json j;
  Json a = Json::array(), d = Json::array();
  for (const auto& x : r.anatomies) a.push_back(to_json(x));
  for (const auto& x : r.datasets) d.push_back(to_json(x));
  j["anatomies"] = a;
  j["datasets"] = d;
  return j;
}

TaskRegistry registry_from_json(const nlohmann::json& j) {
  TaskRegistry r;
  try {
    for (const auto& a : j.at("anatomies")) r.anatomies.push_back(anatomy_from_json(a));
    for (const auto& d : j.at("datasets")) r.datasets.push_back(descriptor_from_json(d));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("registry: ") + e.what());
  }
  try {
    r.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
  return r;
}

}  // namespace contseg
