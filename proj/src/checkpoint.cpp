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
#include "ape/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "ape/errors.hpp"

namespace ape {

namespace {

constexpr std::string_view kMagic = "APECKPT1";

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64(std::string_view in) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[i])) << (8 * i);
  return v;
}

void put_f32(std::string& out, float f) {
  std::uint32_t bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

float get_f32(const char* in) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[i])) << (8 * i);
  return std::bit_cast<float>(bits);
}

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (const auto& item : items) out += (out.empty() ? "" : ", ") + item;
  return out;
}

bool is_pretrained_name(const std::string& name) { return name.starts_with("encoder."); }

}  // namespace

const CheckpointTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
    if (std::find(t.aliases.begin(), t.aliases.end(), name) != t.aliases.end()) return &t;
  }
  return nullptr;
}

std::vector<std::vector<std::string>> Checkpoint::tie_groups() const {
  std::vector<std::vector<std::string>> groups;
  for (const auto& t : tensors) {
    if (t.aliases.empty()) continue;
    std::vector<std::string> group{t.name};
    group.insert(group.end(), t.aliases.begin(), t.aliases.end());
    groups.push_back(std::move(group));
  }
  return groups;
}

std::string serialize_checkpoint(const Checkpoint& checkpoint) {
  nlohmann::json header;
  header["config"] = checkpoint.config;
  header["step"] = checkpoint.step;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : checkpoint.tensors) {
    if (numel(t.shape) != t.values.size()) {
      throw DimensionError("checkpoint tensor '" + t.name + "' has shape " + shape_string(t.shape) +
                           " but " + std::to_string(t.values.size()) + " values");
    }
    header["tensors"].push_back({{"name", t.name},
                                 {"dtype", "f32"},
                                 {"shape", t.shape},
                                 {"offset", offset},
                                 {"aliases", t.aliases}});
    offset += 4 * t.values.size();
  }
  header["tie_groups"] = checkpoint.tie_groups();
  const std::string text = header.dump();

  std::string out(kMagic);
  put_u64(out, text.size());
  out += text;
  out.reserve(out.size() + offset);
  for (const auto& t : checkpoint.tensors)
    for (float v : t.values) put_f32(out, v);
  return out;
}

Checkpoint parse_checkpoint(std::string_view bytes) {
  if (bytes.size() < 16 || bytes.substr(0, 8) != kMagic) {
    throw FormatError("checkpoint: bad magic");
  }
  const std::uint64_t header_len = get_u64(bytes.substr(8, 8));
  if (header_len > bytes.size() - 16) throw FormatError("checkpoint: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed header: ") + e.what());
  }
  const std::string_view payload = bytes.substr(16 + header_len);

  Checkpoint checkpoint;
  try {
    checkpoint.config = header.at("config");
    checkpoint.step = header.at("step").get<std::int64_t>();
    std::uint64_t expected = 0;
    std::set<std::string> seen;
    for (const auto& entry : header.at("tensors")) {
      CheckpointTensor t;
      t.name = entry.at("name").get<std::string>();
      t.shape = entry.at("shape").get<Shape>();
      t.aliases = entry.at("aliases").get<std::vector<std::string>>();
      if (entry.at("dtype").get<std::string>() != "f32") {
        throw FormatError("checkpoint: tensor '" + t.name + "' has unsupported dtype");
      }
      if (entry.at("offset").get<std::uint64_t>() != expected) {
        throw FormatError("checkpoint: tensor '" + t.name + "' offset out of order");
      }
      if (!seen.insert(t.name).second) {
        throw FormatError("checkpoint: tensor '" + t.name + "' appears twice");
      }
      const std::size_t n = numel(t.shape);
      if (expected + 4 * n > payload.size()) {
        throw FormatError("checkpoint: payload too short for tensor '" + t.name + "'");
      }
      t.values.resize(n);
      for (std::size_t i = 0; i < n; ++i) t.values[i] = get_f32(payload.data() + expected + 4 * i);
      expected += 4 * n;
      checkpoint.tensors.push_back(std::move(t));
    }
    if (expected != payload.size()) throw FormatError("checkpoint: trailing payload bytes");
    if (header.at("tie_groups") != nlohmann::json(checkpoint.tie_groups())) {
      throw FormatError("checkpoint: tie-group listing disagrees with tensor aliases");
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed header: ") + e.what());
  }
  return checkpoint;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(checkpoint);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_checkpoint(buffer.str());
}

nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {{"layers", c.layers},
          {"hidden", c.hidden},
          {"heads", c.heads},
          {"ffn", c.ffn},
          {"vocab_size", c.vocab_size},
          {"max_positions", c.max_positions},
          {"layer_norm_eps", c.layer_norm_eps},
          {"dropout", c.dropout},
          {"init_std", c.init_std}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig c;
    c.layers = j.at("layers").get<std::size_t>();
    c.hidden = j.at("hidden").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.ffn = j.at("ffn").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.max_positions = j.at("max_positions").get<std::size_t>();
    c.layer_norm_eps = j.at("layer_norm_eps").get<double>();
    c.dropout = j.at("dropout").get<double>();
    c.init_std = j.at("init_std").get<double>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: incomplete model config: ") + e.what());
  }
}

nlohmann::json model_metadata(const ModelConfig& config, SharingPreset preset) {
  return {{"model", model_config_to_json(config)}, {"preset", std::string(preset_name(preset))}};
}

ModelConfig metadata_model_config(const Checkpoint& checkpoint) {
  if (!checkpoint.config.contains("model")) throw FormatError("checkpoint: no model config");
  return model_config_from_json(checkpoint.config.at("model"));
}

SharingPreset metadata_preset(const Checkpoint& checkpoint) {
  if (!checkpoint.config.contains("preset")) throw FormatError("checkpoint: no sharing preset");
  return parse_preset(checkpoint.config.at("preset").get<std::string>());
}

template <typename T>
Checkpoint snapshot(const ParameterStore<T>& store, std::int64_t step, nlohmann::json config) {
  Checkpoint checkpoint;
  checkpoint.step = step;
  checkpoint.config = std::move(config);
  for (const auto& e : store.entries()) {
    CheckpointTensor t;
    t.name = e.name;
    t.shape = e.tensor.shape();
    t.aliases = e.aliases;
    t.values.reserve(e.tensor.numel());
    for (T v : e.tensor.data()) t.values.push_back(static_cast<float>(v));
    checkpoint.tensors.push_back(std::move(t));
  }
  return checkpoint;
}

namespace {

template <typename T>
void copy_values(typename ParameterStore<T>::Entry& entry, const CheckpointTensor& from) {
  auto dst = entry.tensor.mutable_data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(from.values[i]);
}

}  // namespace

template <typename T>
void load_parameters(ParameterStore<T>& store, const Checkpoint& checkpoint) {
  std::vector<std::string> problems;
  std::set<std::string> used;
  for (const auto& e : store.entries()) {
    const CheckpointTensor* t = checkpoint.find(e.name);
    if (!t) {
      problems.push_back(e.name + " (missing)");
      continue;
    }
    used.insert(t->name);
    if (t->name != e.name) problems.push_back(e.name + " (stored as alias of " + t->name + ")");
    if (t->shape != e.tensor.shape()) {
      problems.push_back(e.name + " (shape " + shape_string(t->shape) + ", expected " +
                         shape_string(e.tensor.shape()) + ")");
    }
    auto a = t->aliases, b = e.aliases;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    if (a != b) problems.push_back(e.name + " (tie group differs)");
  }
  for (const auto& t : checkpoint.tensors) {
    if (!used.count(t.name)) problems.push_back(t.name + " (not a model parameter)");
  }
  if (!problems.empty()) {
    throw DimensionError("checkpoint does not match the model: " + join(problems));
  }
  for (auto& e : store.entries()) copy_values<T>(e, *checkpoint.find(e.name));
}

template <typename T>
void load_pretrained(ParameterStore<T>& store, const Checkpoint& checkpoint) {
  std::vector<std::string> problems;
  for (const auto& e : store.entries()) {
    if (!is_pretrained_name(e.name)) continue;
    const CheckpointTensor* t = checkpoint.find(e.name);
    if (!t) {
      problems.push_back(e.name + " (missing)");
    } else if (t->shape != e.tensor.shape()) {
      problems.push_back(e.name + " (shape " + shape_string(t->shape) + ", expected " +
                         shape_string(e.tensor.shape()) + ")");
    }
  }
  if (!problems.empty()) {
    throw DimensionError("pretrained weights do not match the model: " + join(problems));
  }
  for (auto& e : store.entries()) {
    if (is_pretrained_name(e.name)) copy_values<T>(e, *checkpoint.find(e.name));
  }
}

std::vector<CheckpointTensor> read_flat_dump(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open weight dump " + path.string());
  std::vector<CheckpointTensor> tensors;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab1 = line.find('\t');
    const auto tab2 = tab1 == std::string::npos ? tab1 : line.find('\t', tab1 + 1);
    if (tab2 == std::string::npos) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) +
                        ": expected name<TAB>shape<TAB>values");
    }
    CheckpointTensor t;
    t.name = line.substr(0, tab1);
    std::stringstream dims(line.substr(tab1 + 1, tab2 - tab1 - 1));
    std::string dim;
    while (std::getline(dims, dim, ',')) {
      try {
        t.shape.push_back(std::stoul(dim));
      } catch (const std::exception&) {
        throw FormatError(path.string() + ":" + std::to_string(line_no) + ": bad shape");
      }
    }
    std::istringstream values(line.substr(tab2 + 1));
    float v;
    while (values >> v) t.values.push_back(v);
    if (!values.eof() || t.values.size() != numel(t.shape)) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": tensor '" + t.name +
                        "' has " + std::to_string(t.values.size()) + " values for shape " +
                        shape_string(t.shape));
    }
    tensors.push_back(std::move(t));
  }
  return tensors;
}

std::vector<NameMapping> read_name_mapping(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open name mapping " + path.string());
  std::vector<NameMapping> mapping;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, '\t')) fields.push_back(field);
    if (fields.size() < 2 || fields.size() > 3 || (fields.size() == 3 && fields[2] != "T")) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) +
                        ": expected external<TAB>internal[<TAB>T]");
    }
    mapping.push_back({fields[0], fields[1], fields.size() == 3});
  }
  return mapping;
}

Checkpoint import_weights(const std::vector<CheckpointTensor>& dump,
                          const std::vector<NameMapping>& mapping, const ModelConfig& config,
                          std::vector<std::string>* unused) {
  // Reference model only supplies names and shapes.
  ModelConfig shape_only = config;
  Model<float> reference(shape_only, SharingConfig{}, 0);
  const auto& store = reference.parameters();

  std::map<std::string, const CheckpointTensor*> by_name;
  for (const auto& t : dump) by_name[t.name] = &t;

  std::vector<std::string> problems;
  std::map<std::string, CheckpointTensor> imported;
  std::set<std::string> mapped_external;
  for (const auto& m : mapping) {
    auto it = by_name.find(m.external);
    if (it == by_name.end()) {
      problems.push_back(m.external + " (not in dump)");
      continue;
    }
    if (!store.contains(m.internal)) {
      problems.push_back(m.internal + " (unknown parameter)");
      continue;
    }
    const std::string canonical = store.canonical_name(m.internal);
    if (!is_pretrained_name(canonical)) {
      problems.push_back(m.internal + " (not an embedding or encoder parameter)");
      continue;
    }
    if (imported.count(canonical)) {
      problems.push_back(m.internal + " (mapped twice)");
      continue;
    }
    CheckpointTensor t = *it->second;
    if (m.transpose) {
      if (t.shape.size() != 2) {
        problems.push_back(m.external + " (transpose requested for non-matrix)");
        continue;
      }
      std::vector<float> flipped(t.values.size());
      for (std::size_t i = 0; i < t.shape[0]; ++i)
        for (std::size_t j = 0; j < t.shape[1]; ++j)
          flipped[j * t.shape[0] + i] = t.values[i * t.shape[1] + j];
      t.values = std::move(flipped);
      std::swap(t.shape[0], t.shape[1]);
    }
    // A [n] vector may arrive as [1 x n] or vice versa; only exact numel and
    // shape agreement is accepted.
    const Shape& want = store.get(canonical).shape();
    if (t.shape != want) {
      problems.push_back(m.external + " -> " + canonical + " (shape " + shape_string(t.shape) +
                         ", expected " + shape_string(want) + ")");
      continue;
    }
    t.name = canonical;
    t.aliases.clear();
    imported[canonical] = std::move(t);
    mapped_external.insert(m.external);
  }

  Checkpoint checkpoint;
  checkpoint.config = {{"model", model_config_to_json(config)}, {"kind", "pretrained"}};
  for (const auto& e : store.entries()) {
    if (!is_pretrained_name(e.name)) continue;
    auto it = imported.find(e.name);
    if (it == imported.end()) {
      problems.push_back(e.name + " (no mapping)");
      continue;
    }
    checkpoint.tensors.push_back(std::move(it->second));
  }
  if (!problems.empty()) throw DimensionError("weight import failed: " + join(problems));
  if (unused) {
    for (const auto& t : dump)
      if (!mapped_external.count(t.name)) unused->push_back(t.name);
  }
  return checkpoint;
}

template Checkpoint snapshot(const ParameterStore<float>&, std::int64_t, nlohmann::json);
template Checkpoint snapshot(const ParameterStore<double>&, std::int64_t, nlohmann::json);
template void load_parameters(ParameterStore<float>&, const Checkpoint&);
template void load_parameters(ParameterStore<double>&, const Checkpoint&);
template void load_pretrained(ParameterStore<float>&, const Checkpoint&);
template void load_pretrained(ParameterStore<double>&, const Checkpoint&);

}  // namespace ape
