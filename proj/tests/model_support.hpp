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

// Reference topology and a small encoder-decoder harness for model tests.

#include <random>
#include <set>
#include <string>
#include <vector>

#include "ape/data.hpp"
#include "ape/model.hpp"
#include "support.hpp"

namespace ape::testing {

inline bool ties_self_attn(SharingPreset p) { return p >= SharingPreset::SharedSa; }
inline bool ties_context_attn(SharingPreset p) { return p >= SharingPreset::SharedSaCa; }
inline bool ties_ffn(SharingPreset p) { return p == SharingPreset::SharedSaFf; }

// Counted by hand from the layer shapes.
inline std::size_t expected_parameter_count(const ModelConfig& c, SharingPreset preset) {
  const std::size_t V = c.vocab_size, P = c.max_positions, H = c.hidden, F = c.ffn;
  const std::size_t attention = 4 * (H * H + H);
  const std::size_t norm = 2 * H;
  const std::size_t ffn = H * F + F + F * H + H;
  std::size_t total = V * H + P * H + 2 * H + norm;
  total += c.layers * (attention + norm + ffn + norm);
  std::size_t decoder = 3 * norm;
  if (!ties_self_attn(preset)) decoder += attention;
  if (!ties_context_attn(preset)) decoder += attention;
  if (!ties_ffn(preset)) decoder += ffn;
  return total + c.layers * decoder;
}

using NameGroups = std::set<std::set<std::string>>;

inline NameGroups expected_tie_groups(const ModelConfig& c, SharingPreset preset) {
  NameGroups groups;
  groups.insert({"encoder.embeddings.word", "decoder.embeddings.word", "decoder.output.weight"});
  for (const char* part : {"position", "segment", "norm.gain", "norm.bias"}) {
    groups.insert({std::string("encoder.embeddings.") + part, std::string("decoder.embeddings.") + part});
  }
  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::string e = encoder_prefix(l), d = decoder_prefix(l);
    for (const char* proj : {"query", "key", "value", "output"}) {
      for (const char* kind : {".weight", ".bias"}) {
        const std::string suffix = std::string(proj) + kind;
        std::set<std::string> group;
        if (ties_self_attn(preset)) {
          group.insert(e + "self_attn." + suffix);
          group.insert(d + "self_attn." + suffix);
        }
        if (ties_context_attn(preset)) group.insert(d + "context_attn." + suffix);
        if (!group.empty()) groups.insert(group);
      }
    }
    if (ties_ffn(preset)) {
      for (const char* part : {"inner.weight", "inner.bias", "outer.weight", "outer.bias"}) {
        groups.insert({e + "ffn." + part, d + "ffn." + part});
      }
    }
  }
  return groups;
}

template <typename T>
NameGroups tie_group_set(const ParameterStore<T>& store) {
  NameGroups groups;
  for (const auto& g : store.tie_groups()) groups.insert(std::set<std::string>(g.begin(), g.end()));
  return groups;
}

// Writes a marker through one name of every tie group and checks it is
// visible through the others, and nowhere else.
template <typename T>
bool aliasing_probe(ParameterStore<T>& store) {
  for (const auto& group : store.tie_groups()) {
    auto target = store.get(group.back());
    const T saved = target.mutable_data()[0];
    target.mutable_data()[0] = T(12345);
    for (const auto& name : group) {
      if (store.get(name).data()[0] != T(12345)) return false;
    }
    std::size_t hits = 0;
    for (const auto& e : store.entries()) hits += e.tensor.data()[0] == T(12345);
    target.mutable_data()[0] = saved;
    if (hits != 1) return false;
  }
  return true;
}

template <typename T>
bool same_values(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

// One source pair and a double-precision model over a letter vocabulary.
struct ToyTask {
  Vocab vocab;
  Model<double> model;
  EncodedPair pair;

  ToyTask(const ModelConfig& config, SharingPreset preset, std::uint64_t seed)
      : vocab(small_vocab(letter_words(config.vocab_size - 5))),
        model(config, sharing_preset(preset), seed) {
    std::mt19937_64 rng(seed + 1000);
    pair = random_pair(rng, 8);
  }

  TokenId random_word(std::mt19937_64& rng) const {
    return static_cast<TokenId>(5 + rng() % (vocab.size() - 5));
  }

  std::vector<std::string> random_words(std::mt19937_64& rng, std::size_t n) const {
    std::vector<std::string> words;
    for (std::size_t i = 0; i < n; ++i) words.push_back(vocab.token(random_word(rng)));
    return words;
  }

  EncodedPair random_pair(std::mt19937_64& rng, std::size_t words) const {
    const std::size_t src = std::max<std::size_t>(1, words / 2);
    const std::size_t mt = std::max<std::size_t>(1, words - src);
    const auto a = random_words(rng, src), b = random_words(rng, mt);
    return encode_pair(a, b, vocab, model.config().max_positions);
  }

  // Decoder input of `length` tokens, [CLS] first.
  EncodedTarget random_target(std::mt19937_64& rng, std::size_t length) const {
    return encode_target(random_words(rng, length - 1), vocab, model.config().max_positions);
  }

  std::vector<double> memory(const EncodedPair& p) {
    const auto m = model.encode(SequenceBatch::single(p));
    return {m.states.data().begin(), m.states.data().end()};
  }

  std::vector<double> decoder_logits(const EncodedTarget& target) {
    NoGradGuard no_grad;
    const auto logits = model.decode(model.encode(SequenceBatch::single(pair)), SequenceBatch::single(target));
    return {logits.data().begin(), logits.data().end()};
  }

  Tensor<double> loss(const EncodedTarget& target) {
    const auto logits = model.decode(model.encode(SequenceBatch::single(pair)), SequenceBatch::single(target));
    return cross_entropy_label_smoothed(logits, std::span<const TokenId>(target.gold), 0.0, vocab.pad_id());
  }
};

}  // namespace ape::testing
