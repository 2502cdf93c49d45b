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

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ape/data.hpp"
#include "ape/tensor.hpp"

namespace ape {

struct Checkpoint;

struct ModelConfig {
  std::size_t layers = 12;
  std::size_t hidden = 768;
  std::size_t heads = 12;
  std::size_t ffn = 3072;
  std::size_t vocab_size = 0;
  std::size_t max_positions = 512;
  double layer_norm_eps = 1e-12;
  double dropout = 0.1;
  double init_std = 0.02;

  static ModelConfig base(std::size_t vocab_size);
  static ModelConfig toy(std::size_t vocab_size);
  // Throws ConfigError when inconsistent.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

enum class DecoderInit { Random, Bert };
enum class ContextAttnInit { Random, FromSelfAttn };

struct SharingConfig {
  DecoderInit decoder_init = DecoderInit::Random;
  ContextAttnInit context_attn_init = ContextAttnInit::Random;
  bool tie_self_attn = false;
  bool tie_context_to_self = false;
  bool tie_feed_forward = false;

  void validate() const;
  bool operator==(const SharingConfig&) const = default;
};

// Decoder coupling presets, in ablation-table order. Each row adds to the
// one before it.
enum class SharingPreset {
  Transformer,     // random decoder, nothing shared
  BertDec,         // decoder copied from the encoder, random context attention
  BertDecCaInit,   // ... and context attention copied from self-attention
  SharedSa,        // ... and encoder/decoder self-attention tied
  SharedSaCa,      // ... and context attention tied to self-attention
  SharedSaFf,      // ... and feed-forward tied
};

inline constexpr std::array<SharingPreset, 6> kAllPresets = {
    SharingPreset::Transformer, SharingPreset::BertDec,    SharingPreset::BertDecCaInit,
    SharingPreset::SharedSa,    SharingPreset::SharedSaCa, SharingPreset::SharedSaFf};

SharingConfig sharing_preset(SharingPreset preset);
std::string_view preset_name(SharingPreset preset);
// Accepts the upper-case preset names; throws ConfigError otherwise.
SharingPreset parse_preset(std::string_view name);

// Named tensors. Several names may refer to one storage (a tie group); the
// first name registered is canonical.
template <typename T>
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
    bool decay = false;  // receives L2 weight decay
    std::vector<std::string> aliases;
  };

  const Tensor<T>& add(const std::string& name, Tensor<T> tensor, bool decay);
  // Registers `name` as another name for the storage behind `existing`.
  const Tensor<T>& alias(const std::string& name, const std::string& existing);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Tensor<T>& get(const std::string& name) const;
  const Entry& entry(const std::string& name) const;
  std::string canonical_name(const std::string& name) const;

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  std::vector<std::string> names() const;  // every name, canonical and alias

  // Groups of names sharing one storage, canonical name first; only groups
  // with at least two names are returned.
  std::vector<std::vector<std::string>> tie_groups() const;

  // Values in unique storages, so a tie group counts once.
  std::size_t count_parameters(bool trainable_only) const;

  void zero_grad();

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

template <typename T>
struct LinearParams {
  Tensor<T> weight;  // [in x out]
  Tensor<T> bias;    // [out]
};

template <typename T>
struct LayerNormParams {
  Tensor<T> gain;
  Tensor<T> bias;
};

template <typename T>
struct AttentionParams {
  LinearParams<T> query, key, value, output;
};

template <typename T>
struct FeedForwardParams {
  LinearParams<T> inner, outer;
};

template <typename T>
struct EmbeddingParams {
  Tensor<T> word;      // [V x H], also the transposed output projection
  Tensor<T> position;  // [P x H]
  Tensor<T> segment;   // [2 x H]
  LayerNormParams<T> norm;
};

template <typename T>
struct EncoderLayer {
  AttentionParams<T> self_attn;
  LayerNormParams<T> self_attn_norm;
  FeedForwardParams<T> ffn;
  LayerNormParams<T> ffn_norm;
};

template <typename T>
struct DecoderLayer {
  AttentionParams<T> self_attn;
  LayerNormParams<T> self_attn_norm;
  AttentionParams<T> context_attn;
  LayerNormParams<T> context_attn_norm;
  FeedForwardParams<T> ffn;
  LayerNormParams<T> ffn_norm;
};

// Per-hypothesis state for incremental decoding: cached self-attention
// keys/values for every decoder layer.
template <typename T>
struct DecoderState {
  std::size_t length = 0;  // tokens consumed so far
  std::vector<std::vector<T>> keys;
  std::vector<std::vector<T>> values;
};

// Encoder output plus what the decoder needs to attend over it.
template <typename T>
struct EncodedMemory {
  Tensor<T> states;  // [rows * length x H]
  std::size_t rows = 0;
  std::size_t length = 0;
  std::vector<std::uint8_t> padding;
};

// Context-attention keys/values for each decoder layer, computed once per
// source sentence.
template <typename T>
struct ContextCache {
  EncodedMemory<T> memory;
  std::vector<Tensor<T>> keys;
  std::vector<Tensor<T>> values;
  Tensor<T> output_projection;  // [H x V]
};

template <typename T>
class Model {
 public:
  // Builds and initializes every parameter. With `pretrained`, embeddings
  // and encoder come from the checkpoint; the decoder then follows
  // `sharing`.
  Model(const ModelConfig& config, const SharingConfig& sharing, std::uint64_t seed,
        const Checkpoint* pretrained = nullptr);

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return config_; }
  const SharingConfig& sharing() const { return sharing_; }
  ParameterStore<T>& parameters() { return store_; }
  const ParameterStore<T>& parameters() const { return store_; }

  void set_training(bool training) { training_ = training; }
  bool training() const { return training_; }
  void reseed(std::uint64_t seed) { rng_.seed(seed); }

  EncodedMemory<T> encode(const SequenceBatch& source);
  // Logits [rows * length x V] for every decoder input position.
  Tensor<T> decode(const EncodedMemory<T>& memory, const SequenceBatch& target);

  // Incremental decoding; matches decode() bitwise position by position.
  ContextCache<T> prepare_context(EncodedMemory<T> memory) const;
  DecoderState<T> start_state() const;
  std::vector<T> step(const ContextCache<T>& context, DecoderState<T>& state, TokenId token,
                      std::int32_t position) const;

  const EmbeddingParams<T>& embeddings() const { return embeddings_; }
  const std::vector<EncoderLayer<T>>& encoder_layers() const { return encoder_; }
  const std::vector<DecoderLayer<T>>& decoder_layers() const { return decoder_; }

 private:
  Tensor<T> embed(const SequenceBatch& batch);
  Tensor<T> attention_block(const Tensor<T>& queries_in, const Tensor<T>& keys_values_in,
                            const AttentionParams<T>& params, AttentionLayout layout);

  ModelConfig config_;
  SharingConfig sharing_;
  ParameterStore<T> store_;
  EmbeddingParams<T> embeddings_;
  std::vector<EncoderLayer<T>> encoder_;
  std::vector<DecoderLayer<T>> decoder_;
  Rng rng_;
  bool training_ = false;
};

// Parameter names, shared with checkpoints and weight import.
std::string encoder_prefix(std::size_t layer);
std::string decoder_prefix(std::size_t layer);

template <typename T>
std::size_t count_parameters(const ParameterStore<T>& store, bool trainable_only) {
  return store.count_parameters(trainable_only);
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const LinearParams<T>& params) {
  return add_bias(matmul(x, params.weight), params.bias);
}

// Standalone multi-head attention: project, attend, project out.
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& queries_in, const Tensor<T>& keys_values_in,
                               const AttentionLayout& layout, const AttentionParams<T>& params,
                               T dropout_p = T(0), bool training = false, Rng* rng = nullptr);

}  // namespace ape
