/* Copyright 2026 The apebert Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#pragma once

// Named-tensor checkpoint container.
//
// Layout (all integers little-endian):
//   8 bytes   magic "APECKPT1"
//   8 bytes   header length N (uint64)
//   N bytes   header, compact UTF-8 JSON:
//             {"config": {...}, "step": S,
//              "tensors": [{"aliases": [...], "dtype": "f32", "name": ...,
//                           "offset": bytes, "shape": [...]}, ...],
//              "tie_groups": [[canonical, alias, ...], ...]}
//   payload   float32 arrays, contiguous, in header order
//
// Object keys are emitted sorted and without whitespace, so serializing a
// parsed checkpoint reproduces the original bytes.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "ape/model.hpp"

namespace ape {

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
  std::vector<std::string> aliases;
};

struct Checkpoint {
  std::int64_t step = 0;
  nlohmann::json config = nlohmann::json::object();
  std::vector<CheckpointTensor> tensors;

  // Tensor stored under `name` or listing it as an alias; null if absent.
  const CheckpointTensor* find(const std::string& name) const;
  std::vector<std::vector<std::string>> tie_groups() const;
};

std::string serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint parse_checkpoint(std::string_view bytes);
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

nlohmann::json model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& json);

// Config echo written alongside model weights; enough to rebuild the model.
nlohmann::json model_metadata(const ModelConfig& config, SharingPreset preset);
ModelConfig metadata_model_config(const Checkpoint& checkpoint);
SharingPreset metadata_preset(const Checkpoint& checkpoint);

template <typename T>
Checkpoint snapshot(const ParameterStore<T>& store, std::int64_t step, nlohmann::json config);

// Copies every tensor into `store`. Names, shapes, and tie groups must match
// exactly; otherwise DimensionError lists the offending names.
template <typename T>
void load_parameters(ParameterStore<T>& store, const Checkpoint& checkpoint);

// Copies the embedding and encoder tensors only.
template <typename T>
void load_pretrained(ParameterStore<T>& store, const Checkpoint& checkpoint);

// --- External weight import -------------------------------------------------

// Flat dump: one tensor per line, "name<TAB>d0,d1,...<TAB>v0 v1 v2 ...".
std::vector<CheckpointTensor> read_flat_dump(const std::filesystem::path& path);

struct NameMapping {
  std::string external;
  std::string internal;
  bool transpose = false;
};

// Mapping table: "external<TAB>internal[<TAB>T]" per line; '#' starts a
// comment line. T transposes a 2-D tensor on import.
std::vector<NameMapping> read_name_mapping(const std::filesystem::path& path);

// Builds a pretrained checkpoint covering every embedding and encoder tensor
// of a model with `config`. Unmapped external tensors are reported in
// `unused` when given.
Checkpoint import_weights(const std::vector<CheckpointTensor>& dump,
                          const std::vector<NameMapping>& mapping, const ModelConfig& config,
                          std::vector<std::string>* unused = nullptr);

}  // namespace ape
