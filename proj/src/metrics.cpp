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
#include "ape/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

#include "ape/errors.hpp"
#include "ape/tokenizer.hpp"

namespace ape {

std::size_t edit_distance(const Tokens& hyp, const Tokens& ref) {
  std::vector<std::size_t> prev(ref.size() + 1), cur(ref.size() + 1);
  for (std::size_t j = 0; j <= ref.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= hyp.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= ref.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (hyp[i - 1] == ref[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[ref.size()];
}

namespace {

bool occurs_in(const Tokens& ref, Tokens::const_iterator first, Tokens::const_iterator last) {
  return std::search(ref.begin(), ref.end(), first, last) != ref.end();
}

// Moves hyp[start, start+len) so that it begins at `dest` in the result.
Tokens shifted(const Tokens& hyp, std::size_t start, std::size_t len, std::size_t dest) {
  Tokens rest;
  rest.reserve(hyp.size());
  rest.insert(rest.end(), hyp.begin(), hyp.begin() + start);
  rest.insert(rest.end(), hyp.begin() + start + len, hyp.end());
  Tokens out(rest.begin(), rest.begin() + dest);
  out.insert(out.end(), hyp.begin() + start, hyp.begin() + start + len);
  out.insert(out.end(), rest.begin() + dest, rest.end());
  return out;
}

}  // namespace

TerStats ter_stats(const Tokens& hyp_in, const Tokens& ref, bool allow_shifts) {
  Tokens hyp = hyp_in;
  TerStats stats;
  stats.ref_length = ref.size();
  std::size_t current = edit_distance(hyp, ref);
  while (allow_shifts && current > 0) {
    std::size_t best = current;
    Tokens best_hyp;
    for (std::size_t start = 0; start < hyp.size(); ++start) {
      for (std::size_t len = 1; len <= kMaxShiftLength && start + len <= hyp.size(); ++len) {
        if (!occurs_in(ref, hyp.begin() + start, hyp.begin() + start + len)) break;
        for (std::size_t dest = 0; dest + len <= hyp.size(); ++dest) {
          if (dest == start) continue;
          Tokens candidate = shifted(hyp, start, len, dest);
          const std::size_t d = edit_distance(candidate, ref);
          if (d < best) {
            best = d;
            best_hyp = std::move(candidate);
          }
        }
      }
    }
    if (best >= current) break;
    hyp = std::move(best_hyp);
    current = best;
    ++stats.shifts;
  }
  stats.edits = current + stats.shifts;
  return stats;
}

double ter(const Tokens& hyp, const Tokens& ref) {
  if (ref.empty()) throw ParameterError("ter: empty reference");
  const TerStats s = ter_stats(hyp, ref);
  return static_cast<double>(s.edits) / static_cast<double>(s.ref_length);
}

BleuStats& BleuStats::operator+=(const BleuStats& other) {
  for (std::size_t n = 0; n < 4; ++n) {
    matches[n] += other.matches[n];
    totals[n] += other.totals[n];
  }
  hyp_length += other.hyp_length;
  ref_length += other.ref_length;
  return *this;
}

namespace {

std::map<Tokens, std::size_t> ngram_counts(const Tokens& tokens, std::size_t n) {
  std::map<Tokens, std::size_t> counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    ++counts[Tokens(tokens.begin() + i, tokens.begin() + i + n)];
  }
  return counts;
}

}  // namespace

BleuStats bleu_stats(const Tokens& hyp, const Tokens& ref) {
  BleuStats s;
  s.hyp_length = hyp.size();
  s.ref_length = ref.size();
  for (std::size_t n = 1; n <= 4; ++n) {
    const auto h = ngram_counts(hyp, n);
    const auto r = ngram_counts(ref, n);
    for (const auto& [gram, count] : h) {
      auto it = r.find(gram);
      if (it != r.end()) s.matches[n - 1] += std::min(count, it->second);
    }
    s.totals[n - 1] = hyp.size() >= n ? hyp.size() - n + 1 : 0;
  }
  return s;
}

double bleu_score(const BleuStats& s) {
  if (s.hyp_length == 0) return 0.0;
  double log_precision = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    if (s.matches[n] == 0) return 0.0;
    log_precision += std::log(static_cast<double>(s.matches[n]) / static_cast<double>(s.totals[n]));
  }
  const double ratio = static_cast<double>(s.ref_length) / static_cast<double>(s.hyp_length);
  const double brevity = std::exp(std::min(0.0, 1.0 - ratio));
  return 100.0 * brevity * std::exp(log_precision / 4.0);
}

double bleu(const std::vector<Tokens>& hyps, const std::vector<Tokens>& refs) {
  if (hyps.size() != refs.size()) throw ParameterError("bleu: hypothesis and reference counts differ");
  if (hyps.empty()) throw ParameterError("bleu: empty corpus");
  BleuStats total;
  for (std::size_t i = 0; i < hyps.size(); ++i) total += bleu_stats(hyps[i], refs[i]);
  return bleu_score(total);
}

CorpusScore score_segments(const std::vector<std::string>& hyps,
                           const std::vector<std::string>& refs) {
  if (hyps.size() != refs.size()) {
    throw FormatError("hypotheses have " + std::to_string(hyps.size()) + " lines, references " +
                      std::to_string(refs.size()));
  }
  if (hyps.empty()) throw FormatError("nothing to score");
  std::size_t edits = 0, ref_length = 0;
  BleuStats bleu_total;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const Tokens h = split_whitespace(hyps[i]);
    const Tokens r = split_whitespace(refs[i]);
    const TerStats t = ter_stats(h, r);
    edits += t.edits;
    ref_length += t.ref_length;
    bleu_total += bleu_stats(h, r);
  }
  if (ref_length == 0) throw FormatError("references are empty");
  return {100.0 * static_cast<double>(edits) / static_cast<double>(ref_length),
          bleu_score(bleu_total)};
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

CorpusScore score_corpus(const std::filesystem::path& hyp_file,
                         const std::filesystem::path& ref_file) {
  return score_segments(read_lines(hyp_file), read_lines(ref_file));
}

std::string format_report(const CorpusScore& score) {
  char line[64];
  std::snprintf(line, sizeof line, "%.2f\t%.2f\n", score.ter, score.bleu);
  return std::string("TER\tBLEU\n") + line;
}

}  // namespace ape
