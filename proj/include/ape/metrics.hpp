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
#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

namespace ape {

using Tokens = std::vector<std::string>;

// Longest block TER will try to move.
inline constexpr std::size_t kMaxShiftLength = 10;

struct TerStats {
  std::size_t edits = 0;  // insertions + deletions + substitutions + shifts
  std::size_t shifts = 0;
  std::size_t ref_length = 0;
};

// Plain Levenshtein distance over tokens.
std::size_t edit_distance(const Tokens& hyp, const Tokens& ref);

// Greedy block shifts followed by edit distance. With `allow_shifts` false
// the result is the plain edit distance.
TerStats ter_stats(const Tokens& hyp, const Tokens& ref, bool allow_shifts = true);

// Edits per reference token. Throws ParameterError on an empty reference.
double ter(const Tokens& hyp, const Tokens& ref);

struct BleuStats {
  std::array<std::size_t, 4> matches{};
  std::array<std::size_t, 4> totals{};
  std::size_t hyp_length = 0;
  std::size_t ref_length = 0;

  BleuStats& operator+=(const BleuStats& other);
};

BleuStats bleu_stats(const Tokens& hyp, const Tokens& ref);
// 0-100; zero when any n-gram order has no match.
double bleu_score(const BleuStats& stats);
// Corpus BLEU-4 with one reference per segment.
double bleu(const std::vector<Tokens>& hyps, const std::vector<Tokens>& refs);

struct CorpusScore {
  double ter = 0;   // percent
  double bleu = 0;  // 0-100
};

CorpusScore score_segments(const std::vector<std::string>& hyps,
                           const std::vector<std::string>& refs);
CorpusScore score_corpus(const std::filesystem::path& hyp_file,
                         const std::filesystem::path& ref_file);
// "TER\tBLEU\n" header and one line of values with two decimals.
std::string format_report(const CorpusScore& score);

std::vector<std::string> read_lines(const std::filesystem::path& path);

}  // namespace ape
