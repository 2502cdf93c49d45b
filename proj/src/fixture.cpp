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
#include "ape/fixture.hpp"

#include <random>
#include <utility>

namespace ape {

namespace {

const std::vector<std::string> kSourceWords = {
    "sol", "mar", "tek", "vina", "oru", "pel", "dask", "kiro",
    "lum", "feni", "gat", "hosu", "jarn", "nev", "quil", "ruta"};

// Target word for each source word: a stem and an optional suffix piece.
const std::vector<std::pair<std::string, std::string>> kTargetWords = {
    {"bala", ""},  {"cor", "ith"}, {"dume", ""},  {"ek", "ora"},
    {"falo", ""},  {"gim", "ith"}, {"hart", ""},  {"ivo", "ne"},
    {"jul", ""},   {"kes", "ora"}, {"lir", ""},   {"mon", "ne"},
    {"nuba", ""},  {"osk", "ith"}, {"piru", ""},  {"rav", "ora"}};

const std::vector<std::string> kSuffixes = {"ith", "ora", "ne"};

std::size_t pick(std::mt19937_64& rng, std::size_t n) { return static_cast<std::size_t>(rng() % n); }

std::string target_word(std::size_t i) {
  const auto& [stem, suffix] = kTargetWords[i];
  return stem + suffix;
}

std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) out += (out.empty() ? "" : " ") + w;
  return out;
}

}  // namespace

Fixture make_fixture(std::size_t count, std::uint64_t seed) {
  Fixture fixture;
  fixture.vocab_tokens = {std::string(kPadToken), std::string(kUnkToken), std::string(kClsToken),
                          std::string(kSepToken), std::string(kMaskToken)};
  for (const auto& w : kSourceWords) fixture.vocab_tokens.push_back(w);
  for (const auto& [stem, suffix] : kTargetWords) fixture.vocab_tokens.push_back(stem);
  for (const auto& s : kSuffixes) fixture.vocab_tokens.push_back("##" + s);

  std::mt19937_64 rng(seed);
  for (std::size_t n = 0; n < count; ++n) {
    const std::size_t len = 4 + pick(rng, 4);
    std::vector<std::size_t> words(len);
    for (auto& w : words) w = pick(rng, kSourceWords.size());

    std::vector<std::string> src, pe;
    for (auto w : words) {
      src.push_back(kSourceWords[w]);
      pe.push_back(target_word(w));
    }
    std::vector<std::string> mt = pe;
    const std::size_t edits = 1 + pick(rng, 2);
    for (std::size_t e = 0; e < edits; ++e) {
      const std::size_t at = pick(rng, mt.size());
      switch (pick(rng, 4)) {
        case 0: {  // wrong word
          std::string wrong = target_word(pick(rng, kTargetWords.size()));
          while (wrong == mt[at]) wrong = target_word(pick(rng, kTargetWords.size()));
          mt[at] = wrong;
          break;
        }
        case 1:  // dropped word
          if (mt.size() > 2) mt.erase(mt.begin() + static_cast<std::ptrdiff_t>(at));
          break;
        case 2:  // swapped neighbours
          if (at + 1 < mt.size()) std::swap(mt[at], mt[at + 1]);
          else std::swap(mt[at - 1], mt[at]);
          break;
        default:  // spurious word
          mt.insert(mt.begin() + static_cast<std::ptrdiff_t>(at),
                    target_word(pick(rng, kTargetWords.size())));
          break;
      }
    }
    fixture.triplets.push_back({join(src), join(mt), join(pe)});
  }
  return fixture;
}

}  // namespace ape
