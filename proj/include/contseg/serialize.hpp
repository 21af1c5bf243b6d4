// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

// JSON forms of the registry types. Key order is fixed so documents are
// byte-reproducible.

#pragma once

#include "contseg/synthdata.hpp"
#include "json.hpp"

namespace contseg {

using Json = nlohmann::ordered_json;

Json to_json(const AnatomySpec& a);
AnatomySpec anatomy_from_json(const nlohmann::json& j);

Json to_json(const DatasetDescriptor& d);
DatasetDescriptor descriptor_from_json(const nlohmann::json& j);

Json to_json(const TaskRegistry& r);
TaskRegistry registry_from_json(const nlohmann::json& j);

}  // namespace contseg
