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

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ape/tokenizer.hpp"

namespace ape {

struct Triplet {
  std::string src;
  std::string mt;
  std::string pe;

  bool operator==(const Triplet&) const = default;
};

// Tab-separated src\tmt\tpe, one per line.
std::vector<Triplet> read_triplets(const std::filesystem::path& path);
void write_triplets(const std::vector<Triplet>& triplets, const std::filesystem::path& path);

inline constexpr std::size_t kMaxSourceTokens = 199;  // src + mt subwords
inline constexpr std::size_t kMaxTargetTokens = 99;   // pe subwords

std::vector<Triplet> filter_by_length(const std::vector<Triplet>& triplets, const Vocab& vocab,
                                      std::size_t max_source = kMaxSourceTokens,
                                      std::size_t max_target = kMaxTargetTokens);

// `factor` copies of `small` followed by `large`, shuffled with `seed`.
std::vector<Triplet> oversample_mix(const std::vector<Triplet>& small,
                                    const std::vector<Triplet>& large, std::size_t factor,
                                    std::uint64_t seed);

// A padded [rows x length] block of token sequences.
struct SequenceBatch {
  std::size_t rows = 0;
  std::size_t length = 0;
  std::vector<TokenId> ids;
  std::vector<TokenId> segments;
  std::vector<TokenId> positions;
  std::vector<std::uint8_t> padding;  // 1 where ids holds [PAD]

  static SequenceBatch single(const EncodedPair& pair);
  static SequenceBatch single(const EncodedTarget& target);
};

struct Example {
  EncodedPair source;
  EncodedTarget target;
  std::size_t index = 0;  // position in the originating corpus
};

struct Batch {
  SequenceBatch encoder;
  SequenceBatch decoder;
  std::vector<TokenId> gold;  // rows * decoder.length, [PAD] on padding
  std::size_t token_count = 0;  // non-pad gold tokens
  std::vector<std::size_t> members;  // Example::index of each row
};

// Encodes triplets; items that overflow the position table are skipped and
// their indices reported through `skipped` when given.
std::vector<Example> encode_examples(const std::vector<Triplet>& triplets, const Vocab& vocab,
                                     std::size_t max_positions,
                                     std::vector<std::size_t>* skipped = nullptr);

Batch make_batch(std::span<const Example> examples, TokenId pad_id);

// Sorts examples by target length, packs neighbours greedily while the
// target token count stays within `budget`, then shuffles batch order.
std::vector<Batch> batch_by_tokens(const std::vector<Example>& examples, std::size_t budget,
                                   std::uint64_t seed, TokenId pad_id);

}  // namespace ape
