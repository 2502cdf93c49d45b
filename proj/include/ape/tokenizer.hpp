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

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ape/tensor.hpp"

namespace ape {

inline constexpr std::string_view kPadToken = "[PAD]";
inline constexpr std::string_view kUnkToken = "[UNK]";
inline constexpr std::string_view kClsToken = "[CLS]";
inline constexpr std::string_view kSepToken = "[SEP]";
inline constexpr std::string_view kMaskToken = "[MASK]";

// Maximum word length (in code points) that WordPiece will try to split.
inline constexpr std::size_t kMaxWordChars = 100;

class Vocab {
 public:
  // Token at index i gets id i. Throws FormatError on duplicates or when a
  // reserved token is missing.
  explicit Vocab(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  bool contains(std::string_view token) const;
  // Id of `token`, or the [UNK] id.
  TokenId id(std::string_view token) const;
  const std::string& token(TokenId id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  TokenId pad_id() const { return pad_; }
  TokenId unk_id() const { return unk_; }
  TokenId cls_id() const { return cls_; }
  TokenId sep_id() const { return sep_; }
  TokenId mask_id() const { return mask_; }
  bool is_reserved(TokenId id) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
  TokenId pad_, unk_, cls_, sep_, mask_;
};

Vocab load_vocab(const std::filesystem::path& path);
void save_vocab(const Vocab& vocab, const std::filesystem::path& path);

std::vector<std::string> wordpiece_tokenize(std::string_view text, const Vocab& vocab);

// Inverse of WordPiece segmentation. Leading "##" pieces are kept with the
// prefix stripped and reported in `warnings` when given.
std::string detokenize(std::span<const std::string> tokens,
                       std::vector<std::string>* warnings = nullptr);
std::string detokenize(std::span<const TokenId> ids, const Vocab& vocab,
                       std::vector<std::string>* warnings = nullptr);

enum class Segment : std::int32_t { A = 0, B = 1 };

// One encoder input: [CLS] src [SEP] mt [SEP].
struct EncodedPair {
  std::vector<TokenId> ids;
  std::vector<Segment> segments;
  std::vector<std::int32_t> positions;
};

// Decoder side: input is [CLS] pe, gold is pe [SEP].
struct EncodedTarget {
  std::vector<TokenId> input_ids;
  std::vector<Segment> segments;
  std::vector<std::int32_t> positions;
  std::vector<TokenId> gold;
};

EncodedPair encode_pair(std::span<const std::string> src_tokens,
                        std::span<const std::string> mt_tokens, const Vocab& vocab,
                        std::size_t max_positions);
EncodedTarget encode_target(std::span<const std::string> pe_tokens, const Vocab& vocab,
                            std::size_t max_positions);

// Splits UTF-8 text into code points (each as its byte string).
std::vector<std::string_view> utf8_chars(std::string_view text);
std::vector<std::string> split_whitespace(std::string_view text);

}  // namespace ape
