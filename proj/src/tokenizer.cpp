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
#include "ape/tokenizer.hpp"

#include <fstream>

#include "ape/errors.hpp"

namespace ape {

namespace {

bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xE) return 3;
  if ((lead >> 3) == 0x1E) return 4;
  return 1;  // stray continuation or invalid byte
}

constexpr std::string_view kContinuation = "##";

}  // namespace

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  ids_.reserve(tokens_.size());
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!ids_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
      throw FormatError("vocabulary: duplicate token '" + tokens_[i] + "' at line " +
                        std::to_string(i + 1));
    }
  }
  auto reserved = [this](std::string_view token) {
    auto it = ids_.find(std::string(token));
    if (it == ids_.end()) {
      throw FormatError("vocabulary: reserved token " + std::string(token) + " is missing");
    }
    return it->second;
  };
  pad_ = reserved(kPadToken);
  unk_ = reserved(kUnkToken);
  cls_ = reserved(kClsToken);
  sep_ = reserved(kSepToken);
  mask_ = reserved(kMaskToken);
}

bool Vocab::contains(std::string_view token) const {
  return ids_.find(std::string(token)) != ids_.end();
}

TokenId Vocab::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? unk_ : it->second;
}

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw LengthError("vocabulary: id " + std::to_string(id) + " out of range");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

bool Vocab::is_reserved(TokenId id) const {
  return id == pad_ || id == unk_ || id == cls_ || id == sep_ || id == mask_;
}

Vocab load_vocab(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("vocabulary: cannot open " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return Vocab(std::move(tokens));
}

void save_vocab(const Vocab& vocab, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("vocabulary: cannot write " + path.string());
  for (const auto& token : vocab.tokens()) out << token << '\n';
}

std::vector<std::string_view> utf8_chars(std::string_view text) {
  std::vector<std::string_view> chars;
  for (std::size_t i = 0; i < text.size();) {
    std::size_t len = std::min(utf8_length(static_cast<unsigned char>(text[i])), text.size() - i);
    chars.push_back(text.substr(i, len));
    i += len;
  }
  return chars;
}

std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    std::size_t start = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    if (i > start) words.emplace_back(text.substr(start, i - start));
  }
  return words;
}

std::vector<std::string> wordpiece_tokenize(std::string_view text, const Vocab& vocab) {
  std::vector<std::string> out;
  for (const std::string& word : split_whitespace(text)) {
    const auto chars = utf8_chars(word);
    if (chars.size() > kMaxWordChars) {
      out.emplace_back(kUnkToken);
      continue;
    }
    // Byte offset of each code point boundary.
    std::vector<std::size_t> bounds{0};
    for (auto c : chars) bounds.push_back(bounds.back() + c.size());

    std::vector<std::string> pieces;
    bool bad = false;
    std::size_t start = 0;
    while (start < chars.size()) {
      std::size_t end = chars.size();
      std::string found;
      for (; end > start; --end) {
        std::string candidate = word.substr(bounds[start], bounds[end] - bounds[start]);
        if (start > 0) candidate.insert(0, kContinuation);
        if (vocab.contains(candidate)) {
          found = std::move(candidate);
          break;
        }
      }
      if (end == start) {
        bad = true;
        break;
      }
      pieces.push_back(std::move(found));
      start = end;
    }
    if (bad) {
      out.emplace_back(kUnkToken);
    } else {
      for (auto& p : pieces) out.push_back(std::move(p));
    }
  }
  return out;
}

std::string detokenize(std::span<const std::string> tokens, std::vector<std::string>* warnings) {
  std::string text;
  bool have_word = false;
  for (const std::string& token : tokens) {
    if (token == kPadToken || token == kUnkToken || token == kClsToken || token == kSepToken ||
        token == kMaskToken) {
      continue;
    }
    const bool continuation = token.starts_with(kContinuation);
    if (continuation && have_word) {
      text += token.substr(kContinuation.size());
      continue;
    }
    if (continuation && warnings) {
      warnings->push_back("detokenize: continuation piece '" + token + "' has no word to join");
    }
    if (have_word) text += ' ';
    text += continuation ? token.substr(kContinuation.size()) : token;
    have_word = true;
  }
  return text;
}

std::string detokenize(std::span<const TokenId> ids, const Vocab& vocab,
                       std::vector<std::string>* warnings) {
  std::vector<std::string> tokens;
  tokens.reserve(ids.size());
  for (TokenId id : ids) tokens.push_back(vocab.token(id));
  return detokenize(tokens, warnings);
}

EncodedPair encode_pair(std::span<const std::string> src_tokens,
                        std::span<const std::string> mt_tokens, const Vocab& vocab,
                        std::size_t max_positions) {
  const std::size_t total = src_tokens.size() + mt_tokens.size() + 3;
  if (total > max_positions) {
    throw LengthError("encode_pair: " + std::to_string(total) +
                      " tokens exceed the position table of " + std::to_string(max_positions));
  }
  EncodedPair pair;
  pair.ids.reserve(total);
  auto push = [&pair](TokenId id, Segment segment, std::int32_t position) {
    pair.ids.push_back(id);
    pair.segments.push_back(segment);
    pair.positions.push_back(position);
  };
  std::int32_t pos = 0;
  push(vocab.cls_id(), Segment::A, pos++);
  for (const auto& t : src_tokens) push(vocab.id(t), Segment::A, pos++);
  push(vocab.sep_id(), Segment::A, pos++);
  pos = 0;  // mt is not a continuation of src
  for (const auto& t : mt_tokens) push(vocab.id(t), Segment::B, pos++);
  push(vocab.sep_id(), Segment::B, pos++);
  return pair;
}

EncodedTarget encode_target(std::span<const std::string> pe_tokens, const Vocab& vocab,
                            std::size_t max_positions) {
  const std::size_t len = pe_tokens.size() + 1;
  if (len > max_positions) {
    throw LengthError("encode_target: " + std::to_string(len) +
                      " tokens exceed the position table of " + std::to_string(max_positions));
  }
  EncodedTarget target;
  target.input_ids.push_back(vocab.cls_id());
  for (const auto& t : pe_tokens) {
    target.input_ids.push_back(vocab.id(t));
    target.gold.push_back(vocab.id(t));
  }
  target.gold.push_back(vocab.sep_id());
  target.segments.assign(len, Segment::B);
  for (std::size_t i = 0; i < len; ++i) target.positions.push_back(static_cast<std::int32_t>(i));
  return target;
}

}  // namespace ape
