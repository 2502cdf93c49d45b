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
#include "ape/model.hpp"

#include <cmath>

#include "ape/checkpoint.hpp"
#include "ape/errors.hpp"

namespace ape {

// ---------------------------------------------------------------------------
// Configuration

ModelConfig ModelConfig::base(std::size_t vocab_size) {
  ModelConfig config;
  config.vocab_size = vocab_size;
  return config;
}

ModelConfig ModelConfig::toy(std::size_t vocab_size) {
  ModelConfig config;
  config.layers = 2;
  config.hidden = 64;
  config.heads = 4;
  config.ffn = 256;
  config.vocab_size = vocab_size;
  config.max_positions = 128;
  return config;
}

void ModelConfig::validate() const {
  if (hidden == 0 || heads == 0 || hidden % heads != 0) {
    throw ConfigError("hidden size " + std::to_string(hidden) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (ffn == 0) throw ConfigError("feed-forward size must be positive");
  if (vocab_size < 6) throw ConfigError("vocabulary too small");
  if (max_positions == 0) throw ConfigError("position table must be nonempty");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0, 1)");
  if (!(layer_norm_eps > 0.0)) throw ConfigError("layer-norm epsilon must be positive");
}

void SharingConfig::validate() const {
  if (tie_context_to_self && !tie_self_attn) {
    throw ConfigError("tying context attention to self-attention requires tied self-attention");
  }
}

SharingConfig sharing_preset(SharingPreset preset) {
  SharingConfig sc;
  switch (preset) {
    case SharingPreset::Transformer:
      break;
    case SharingPreset::SharedSaFf:
      sc.tie_feed_forward = true;
      [[fallthrough]];
    case SharingPreset::SharedSaCa:
      sc.tie_context_to_self = true;
      [[fallthrough]];
    case SharingPreset::SharedSa:
      sc.tie_self_attn = true;
      [[fallthrough]];
    case SharingPreset::BertDecCaInit:
      sc.context_attn_init = ContextAttnInit::FromSelfAttn;
      [[fallthrough]];
    case SharingPreset::BertDec:
      sc.decoder_init = DecoderInit::Bert;
      break;
  }
  return sc;
}

std::string_view preset_name(SharingPreset preset) {
  switch (preset) {
    case SharingPreset::Transformer: return "TRANSFORMER";
    case SharingPreset::BertDec: return "BERT_DEC";
    case SharingPreset::BertDecCaInit: return "BERT_DEC_CA_INIT";
    case SharingPreset::SharedSa: return "SHARED_SA";
    case SharingPreset::SharedSaCa: return "SHARED_SA_CA";
    case SharingPreset::SharedSaFf: return "SHARED_SA_FF";
  }
  return "?";
}

SharingPreset parse_preset(std::string_view name) {
  for (SharingPreset p : kAllPresets) {
    if (preset_name(p) == name) return p;
  }
  throw ConfigError("unknown sharing preset '" + std::string(name) + "'");
}

std::string encoder_prefix(std::size_t layer) {
  return "encoder.layer." + std::to_string(layer) + ".";
}

std::string decoder_prefix(std::size_t layer) {
  return "decoder.layer." + std::to_string(layer) + ".";
}

// ---------------------------------------------------------------------------
// ParameterStore

template <typename T>
const Tensor<T>& ParameterStore<T>::add(const std::string& name, Tensor<T> tensor, bool decay) {
  if (index_.count(name)) throw ConfigError("parameter '" + name + "' registered twice");
  index_[name] = entries_.size();
  entries_.push_back({name, std::move(tensor), decay, {}});
  return entries_.back().tensor;
}

template <typename T>
const Tensor<T>& ParameterStore<T>::alias(const std::string& name, const std::string& existing) {
  if (index_.count(name)) throw ConfigError("parameter '" + name + "' registered twice");
  auto it = index_.find(existing);
  if (it == index_.end()) throw ConfigError("cannot alias unknown parameter '" + existing + "'");
  index_[name] = it->second;
  entries_[it->second].aliases.push_back(name);
  return entries_[it->second].tensor;
}

template <typename T>
const typename ParameterStore<T>::Entry& ParameterStore<T>::entry(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return entries_[it->second];
}

template <typename T>
const Tensor<T>& ParameterStore<T>::get(const std::string& name) const {
  return entry(name).tensor;
}

template <typename T>
std::string ParameterStore<T>::canonical_name(const std::string& name) const {
  return entry(name).name;
}

template <typename T>
std::vector<std::string> ParameterStore<T>::names() const {
  std::vector<std::string> out;
  for (const auto& [name, _] : index_) out.push_back(name);
  return out;
}

template <typename T>
std::vector<std::vector<std::string>> ParameterStore<T>::tie_groups() const {
  std::vector<std::vector<std::string>> groups;
  for (const auto& e : entries_) {
    if (e.aliases.empty()) continue;
    std::vector<std::string> group{e.name};
    group.insert(group.end(), e.aliases.begin(), e.aliases.end());
    groups.push_back(std::move(group));
  }
  return groups;
}

template <typename T>
std::size_t ParameterStore<T>::count_parameters(bool trainable_only) const {
  std::size_t total = 0;
  for (const auto& e : entries_) {
    if (!trainable_only || e.tensor.requires_grad()) total += e.tensor.numel();
  }
  return total;
}

template <typename T>
void ParameterStore<T>::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

// ---------------------------------------------------------------------------
// Attention

template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& queries_in, const Tensor<T>& keys_values_in,
                               const AttentionLayout& layout, const AttentionParams<T>& params,
                               T dropout_p, bool training, Rng* rng) {
  Rng fallback(0);
  Tensor<T> q = linear(queries_in, params.query);
  Tensor<T> k = linear(keys_values_in, params.key);
  Tensor<T> v = linear(keys_values_in, params.value);
  Tensor<T> context = attention(q, k, v, layout, dropout_p, training, rng ? *rng : fallback);
  return linear(context, params.output);
}

// ---------------------------------------------------------------------------
// Model construction

namespace {

template <typename T>
class Builder {
 public:
  Builder(ParameterStore<T>& store, Rng& rng, double init_std)
      : store_(store), rng_(rng), init_std_(init_std) {}

  Tensor<T> random(const std::string& name, Shape shape, bool decay) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    std::vector<T> values(n);
    for (auto& v : values) {
      double z;
      do {
        z = normal(rng_);
      } while (std::abs(z) > 2.0);
      v = static_cast<T>(z * init_std_);
    }
    return store_.add(name, Tensor<T>(std::move(shape), std::move(values), true), decay);
  }

  Tensor<T> constant(const std::string& name, Shape shape, T value) {
    return store_.add(name, Tensor<T>::full(std::move(shape), value, true), false);
  }

  Tensor<T> copy(const std::string& name, const Tensor<T>& from, bool decay) {
    return store_.add(name, from.clone(true), decay);
  }

  Tensor<T> alias(const std::string& name, const std::string& existing) {
    return store_.alias(name, existing);
  }

  // Weight decay covers the encoder side and anything copied out of it.
  void set_random_decay(bool decay) { random_decay_ = decay; }

  LinearParams<T> random_linear(const std::string& name, std::size_t in, std::size_t out) {
    return {random(name + ".weight", {in, out}, random_decay_),
            constant(name + ".bias", {out}, T(0))};
  }

  LinearParams<T> copy_linear(const std::string& name, const LinearParams<T>& from) {
    return {copy(name + ".weight", from.weight, true), copy(name + ".bias", from.bias, false)};
  }

  LinearParams<T> alias_linear(const std::string& name, const std::string& existing) {
    return {alias(name + ".weight", existing + ".weight"),
            alias(name + ".bias", existing + ".bias")};
  }

  LayerNormParams<T> default_norm(const std::string& name, std::size_t width) {
    return {constant(name + ".gain", {width}, T(1)), constant(name + ".bias", {width}, T(0))};
  }

  LayerNormParams<T> copy_norm(const std::string& name, const LayerNormParams<T>& from) {
    return {copy(name + ".gain", from.gain, false), copy(name + ".bias", from.bias, false)};
  }

  AttentionParams<T> random_attention(const std::string& name, std::size_t hidden) {
    return {random_linear(name + ".query", hidden, hidden),
            random_linear(name + ".key", hidden, hidden),
            random_linear(name + ".value", hidden, hidden),
            random_linear(name + ".output", hidden, hidden)};
  }

  AttentionParams<T> copy_attention(const std::string& name, const AttentionParams<T>& from) {
    return {copy_linear(name + ".query", from.query), copy_linear(name + ".key", from.key),
            copy_linear(name + ".value", from.value), copy_linear(name + ".output", from.output)};
  }

  AttentionParams<T> alias_attention(const std::string& name, const std::string& existing) {
    return {alias_linear(name + ".query", existing + ".query"),
            alias_linear(name + ".key", existing + ".key"),
            alias_linear(name + ".value", existing + ".value"),
            alias_linear(name + ".output", existing + ".output")};
  }

  FeedForwardParams<T> random_ffn(const std::string& name, std::size_t hidden, std::size_t ffn) {
    return {random_linear(name + ".inner", hidden, ffn), random_linear(name + ".outer", ffn, hidden)};
  }

  FeedForwardParams<T> copy_ffn(const std::string& name, const FeedForwardParams<T>& from) {
    return {copy_linear(name + ".inner", from.inner), copy_linear(name + ".outer", from.outer)};
  }

  FeedForwardParams<T> alias_ffn(const std::string& name, const std::string& existing) {
    return {alias_linear(name + ".inner", existing + ".inner"),
            alias_linear(name + ".outer", existing + ".outer")};
  }

 private:
  ParameterStore<T>& store_;
  Rng& rng_;
  double init_std_;
  bool random_decay_ = true;
};

}  // namespace

template <typename T>
Model<T>::Model(const ModelConfig& config, const SharingConfig& sharing, std::uint64_t seed,
                const Checkpoint* pretrained)
    : config_(config), sharing_(sharing), rng_(seed) {
  config_.validate();
  sharing_.validate();
  const std::size_t H = config_.hidden, F = config_.ffn;
  Builder<T> b(store_, rng_, config_.init_std);

  embeddings_.word = b.random("encoder.embeddings.word", {config_.vocab_size, H}, true);
  embeddings_.position = b.random("encoder.embeddings.position", {config_.max_positions, H}, true);
  embeddings_.segment = b.random("encoder.embeddings.segment", {2, H}, true);
  embeddings_.norm = b.default_norm("encoder.embeddings.norm", H);

  for (std::size_t l = 0; l < config_.layers; ++l) {
    const std::string p = encoder_prefix(l);
    EncoderLayer<T> layer;
    layer.self_attn = b.random_attention(p + "self_attn", H);
    layer.self_attn_norm = b.default_norm(p + "self_attn_norm", H);
    layer.ffn = b.random_ffn(p + "ffn", H, F);
    layer.ffn_norm = b.default_norm(p + "ffn_norm", H);
    encoder_.push_back(std::move(layer));
  }

  if (pretrained) load_pretrained(store_, *pretrained);

  // The decoder reads and writes through the encoder's embedding block.
  for (const char* part : {"word", "position", "segment", "norm.gain", "norm.bias"}) {
    b.alias(std::string("decoder.embeddings.") + part, std::string("encoder.embeddings.") + part);
  }
  b.alias("decoder.output.weight", "encoder.embeddings.word");

  b.set_random_decay(false);
  const bool bert = sharing_.decoder_init == DecoderInit::Bert;
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const std::string p = decoder_prefix(l);
    const std::string e = encoder_prefix(l);
    const EncoderLayer<T>& enc = encoder_[l];
    DecoderLayer<T> layer;

    if (sharing_.tie_self_attn) {
      layer.self_attn = b.alias_attention(p + "self_attn", e + "self_attn");
    } else if (bert) {
      layer.self_attn = b.copy_attention(p + "self_attn", enc.self_attn);
    } else {
      layer.self_attn = b.random_attention(p + "self_attn", H);
    }
    layer.self_attn_norm = bert ? b.copy_norm(p + "self_attn_norm", enc.self_attn_norm)
                                : b.default_norm(p + "self_attn_norm", H);

    if (sharing_.tie_context_to_self) {
      layer.context_attn = b.alias_attention(p + "context_attn", p + "self_attn");
    } else if (sharing_.context_attn_init == ContextAttnInit::FromSelfAttn) {
      layer.context_attn = b.copy_attention(p + "context_attn", enc.self_attn);
    } else {
      layer.context_attn = b.random_attention(p + "context_attn", H);
    }
    layer.context_attn_norm =
        sharing_.context_attn_init == ContextAttnInit::FromSelfAttn
            ? b.copy_norm(p + "context_attn_norm", enc.self_attn_norm)
            : b.default_norm(p + "context_attn_norm", H);

    if (sharing_.tie_feed_forward) {
      layer.ffn = b.alias_ffn(p + "ffn", e + "ffn");
    } else if (bert) {
      layer.ffn = b.copy_ffn(p + "ffn", enc.ffn);
    } else {
      layer.ffn = b.random_ffn(p + "ffn", H, F);
    }
    layer.ffn_norm = bert ? b.copy_norm(p + "ffn_norm", enc.ffn_norm)
                          : b.default_norm(p + "ffn_norm", H);
    decoder_.push_back(std::move(layer));
  }
}

// ---------------------------------------------------------------------------
// Forward passes

template <typename T>
Tensor<T> Model<T>::embed(const SequenceBatch& batch) {
  Tensor<T> sum_emb = add(add(embedding(embeddings_.word, std::span<const TokenId>(batch.ids)),
                              embedding(embeddings_.position, std::span<const TokenId>(batch.positions))),
                          embedding(embeddings_.segment, std::span<const TokenId>(batch.segments)));
  Tensor<T> normed = layer_norm(sum_emb, embeddings_.norm.gain, embeddings_.norm.bias,
                                static_cast<T>(config_.layer_norm_eps));
  return dropout(normed, static_cast<T>(config_.dropout), training_, rng_);
}

template <typename T>
Tensor<T> Model<T>::attention_block(const Tensor<T>& queries_in, const Tensor<T>& keys_values_in,
                                    const AttentionParams<T>& params, AttentionLayout layout) {
  return multi_head_attention(queries_in, keys_values_in, layout, params,
                              static_cast<T>(config_.dropout), training_, &rng_);
}

template <typename T>
EncodedMemory<T> Model<T>::encode(const SequenceBatch& source) {
  const T eps = static_cast<T>(config_.layer_norm_eps);
  const T p = static_cast<T>(config_.dropout);
  AttentionLayout layout{source.rows, source.length, source.length, config_.heads,
                         source.padding, false};
  Tensor<T> x = embed(source);
  for (const auto& layer : encoder_) {
    Tensor<T> attended = attention_block(x, x, layer.self_attn, layout);
    x = layer_norm(add(x, dropout(attended, p, training_, rng_)), layer.self_attn_norm.gain,
                   layer.self_attn_norm.bias, eps);
    Tensor<T> ff = linear(gelu(linear(x, layer.ffn.inner)), layer.ffn.outer);
    x = layer_norm(add(x, dropout(ff, p, training_, rng_)), layer.ffn_norm.gain,
                   layer.ffn_norm.bias, eps);
  }
  return {x, source.rows, source.length, source.padding};
}

template <typename T>
Tensor<T> Model<T>::decode(const EncodedMemory<T>& memory, const SequenceBatch& target) {
  if (memory.rows != target.rows) {
    throw DimensionError("decode: " + std::to_string(target.rows) + " target rows for " +
                         std::to_string(memory.rows) + " source rows");
  }
  const T eps = static_cast<T>(config_.layer_norm_eps);
  const T p = static_cast<T>(config_.dropout);
  AttentionLayout self_layout{target.rows, target.length, target.length, config_.heads,
                              target.padding, true};
  AttentionLayout context_layout{target.rows, target.length, memory.length, config_.heads,
                                 memory.padding, false};
  Tensor<T> y = embed(target);
  for (const auto& layer : decoder_) {
    Tensor<T> attended = attention_block(y, y, layer.self_attn, self_layout);
    y = layer_norm(add(y, dropout(attended, p, training_, rng_)), layer.self_attn_norm.gain,
                   layer.self_attn_norm.bias, eps);
    Tensor<T> context = attention_block(y, memory.states, layer.context_attn, context_layout);
    y = layer_norm(add(y, dropout(context, p, training_, rng_)), layer.context_attn_norm.gain,
                   layer.context_attn_norm.bias, eps);
    Tensor<T> ff = linear(gelu(linear(y, layer.ffn.inner)), layer.ffn.outer);
    y = layer_norm(add(y, dropout(ff, p, training_, rng_)), layer.ffn_norm.gain,
                   layer.ffn_norm.bias, eps);
  }
  return matmul(y, transpose(embeddings_.word));
}

// ---------------------------------------------------------------------------
// Incremental decoding

template <typename T>
ContextCache<T> Model<T>::prepare_context(EncodedMemory<T> memory) const {
  NoGradGuard no_grad;
  if (memory.rows != 1) throw DimensionError("incremental decoding takes one source sentence");
  ContextCache<T> cache;
  for (const auto& layer : decoder_) {
    cache.keys.push_back(linear(memory.states, layer.context_attn.key));
    cache.values.push_back(linear(memory.states, layer.context_attn.value));
  }
  cache.output_projection = transpose(embeddings_.word);
  cache.memory = std::move(memory);
  return cache;
}

template <typename T>
DecoderState<T> Model<T>::start_state() const {
  DecoderState<T> state;
  state.keys.resize(decoder_.size());
  state.values.resize(decoder_.size());
  return state;
}

template <typename T>
std::vector<T> Model<T>::step(const ContextCache<T>& context, DecoderState<T>& state,
                              TokenId token, std::int32_t position) const {
  NoGradGuard no_grad;
  const std::size_t H = config_.hidden;
  const T eps = static_cast<T>(config_.layer_norm_eps);
  const TokenId ids[] = {token};
  const TokenId positions[] = {position};
  const TokenId segments[] = {static_cast<TokenId>(Segment::B)};
  Tensor<T> x = layer_norm(add(add(embedding(embeddings_.word, std::span<const TokenId>(ids)),
                                   embedding(embeddings_.position, std::span<const TokenId>(positions))),
                               embedding(embeddings_.segment, std::span<const TokenId>(segments))),
                           embeddings_.norm.gain, embeddings_.norm.bias, eps);
  Rng unused(0);
  const std::size_t len = state.length + 1;
  for (std::size_t l = 0; l < decoder_.size(); ++l) {
    const auto& layer = decoder_[l];
    Tensor<T> q = linear(x, layer.self_attn.query);
    Tensor<T> k = linear(x, layer.self_attn.key);
    Tensor<T> v = linear(x, layer.self_attn.value);
    state.keys[l].insert(state.keys[l].end(), k.data().begin(), k.data().end());
    state.values[l].insert(state.values[l].end(), v.data().begin(), v.data().end());
    Tensor<T> keys({len, H}, state.keys[l]);
    Tensor<T> values({len, H}, state.values[l]);
    AttentionLayout self_layout{1, 1, len, config_.heads, {}, true};
    Tensor<T> attended =
        linear(attention(q, keys, values, self_layout, T(0), false, unused), layer.self_attn.output);
    x = layer_norm(add(x, attended), layer.self_attn_norm.gain, layer.self_attn_norm.bias, eps);

    AttentionLayout context_layout{1, 1, context.memory.length, config_.heads,
                                   context.memory.padding, false};
    Tensor<T> cq = linear(x, layer.context_attn.query);
    Tensor<T> ctx = linear(attention(cq, context.keys[l], context.values[l], context_layout, T(0),
                                     false, unused),
                           layer.context_attn.output);
    x = layer_norm(add(x, ctx), layer.context_attn_norm.gain, layer.context_attn_norm.bias, eps);
    Tensor<T> ff = linear(gelu(linear(x, layer.ffn.inner)), layer.ffn.outer);
    x = layer_norm(add(x, ff), layer.ffn_norm.gain, layer.ffn_norm.bias, eps);
  }
  state.length = len;
  Tensor<T> logits = matmul(x, context.output_projection);
  return {logits.data().begin(), logits.data().end()};
}

template class ParameterStore<float>;
template class ParameterStore<double>;
template class Model<float>;
template class Model<double>;
template Tensor<float> multi_head_attention(const Tensor<float>&, const Tensor<float>&,
                                            const AttentionLayout&, const AttentionParams<float>&,
                                            float, bool, Rng*);
template Tensor<double> multi_head_attention(const Tensor<double>&, const Tensor<double>&,
                                             const AttentionLayout&,
                                             const AttentionParams<double>&, double, bool, Rng*);

}  // namespace ape
