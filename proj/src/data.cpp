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
#include "ape/data.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>

#include "ape/errors.hpp"

namespace ape {

std::vector<Triplet> read_triplets(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open corpus " + path.string());
  std::vector<Triplet> triplets;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      std::size_t tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() != 3) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected 3 tab-separated fields, found " +
                        std::to_string(fields.size()));
    }
    triplets.push_back({std::move(fields[0]), std::move(fields[1]), std::move(fields[2])});
  }
  return triplets;
}

void write_triplets(const std::vector<Triplet>& triplets, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write corpus " + path.string());
  for (const auto& t : triplets) out << t.src << '\t' << t.mt << '\t' << t.pe << '\n';
}

std::vector<Triplet> filter_by_length(const std::vector<Triplet>& triplets, const Vocab& vocab,
                                      std::size_t max_source, std::size_t max_target) {
  std::vector<Triplet> kept;
  for (const auto& t : triplets) {
    const std::size_t source =
        wordpiece_tokenize(t.src, vocab).size() + wordpiece_tokenize(t.mt, vocab).size();
    const std::size_t target = wordpiece_tokenize(t.pe, vocab).size();
    if (source <= max_source && target <= max_target) kept.push_back(t);
  }
  return kept;
}

std::vector<Triplet> oversample_mix(const std::vector<Triplet>& small,
                                    const std::vector<Triplet>& large, std::size_t factor,
                                    std::uint64_t seed) {
  if (factor < 1) throw ParameterError("oversample factor must be at least 1");
  std::vector<Triplet> mixed;
  mixed.reserve(factor * small.size() + large.size());
  for (std::size_t k = 0; k < factor; ++k) mixed.insert(mixed.end(), small.begin(), small.end());
  mixed.insert(mixed.end(), large.begin(), large.end());
  std::mt19937_64 rng(seed);
  std::shuffle(mixed.begin(), mixed.end(), rng);
  return mixed;
}

namespace {

template <typename Seq>
void fill_row(SequenceBatch& batch, std::size_t row, const std::vector<TokenId>& ids,
              const Seq& segments, const std::vector<std::int32_t>& positions) {
  for (std::size_t j = 0; j < ids.size(); ++j) {
    const std::size_t at = row * batch.length + j;
    batch.ids[at] = ids[j];
    batch.segments[at] = static_cast<TokenId>(segments[j]);
    batch.positions[at] = positions[j];
    batch.padding[at] = 0;
  }
}

SequenceBatch empty_batch(std::size_t rows, std::size_t length, TokenId pad_id) {
  SequenceBatch batch;
  batch.rows = rows;
  batch.length = length;
  batch.ids.assign(rows * length, pad_id);
  batch.segments.assign(rows * length, 0);
  batch.positions.assign(rows * length, 0);
  batch.padding.assign(rows * length, 1);
  return batch;
}

}  // namespace

SequenceBatch SequenceBatch::single(const EncodedPair& pair) {
  SequenceBatch batch = empty_batch(1, pair.ids.size(), 0);
  fill_row(batch, 0, pair.ids, pair.segments, pair.positions);
  return batch;
}

SequenceBatch SequenceBatch::single(const EncodedTarget& target) {
  SequenceBatch batch = empty_batch(1, target.input_ids.size(), 0);
  fill_row(batch, 0, target.input_ids, target.segments, target.positions);
  return batch;
}

std::vector<Example> encode_examples(const std::vector<Triplet>& triplets, const Vocab& vocab,
                                     std::size_t max_positions,
                                     std::vector<std::size_t>* skipped) {
  std::vector<Example> examples;
  examples.reserve(triplets.size());
  for (std::size_t i = 0; i < triplets.size(); ++i) {
    const auto src = wordpiece_tokenize(triplets[i].src, vocab);
    const auto mt = wordpiece_tokenize(triplets[i].mt, vocab);
    const auto pe = wordpiece_tokenize(triplets[i].pe, vocab);
    try {
      examples.push_back({encode_pair(src, mt, vocab, max_positions),
                          encode_target(pe, vocab, max_positions), i});
    } catch (const LengthError&) {
      if (!skipped) throw;
      skipped->push_back(i);
    }
  }
  return examples;
}

Batch make_batch(std::span<const Example> examples, TokenId pad_id) {
  std::size_t enc_len = 0, dec_len = 0;
  for (const auto& ex : examples) {
    enc_len = std::max(enc_len, ex.source.ids.size());
    dec_len = std::max(dec_len, ex.target.input_ids.size());
  }
  Batch batch;
  batch.encoder = empty_batch(examples.size(), enc_len, pad_id);
  batch.decoder = empty_batch(examples.size(), dec_len, pad_id);
  batch.gold.assign(examples.size() * dec_len, pad_id);
  for (std::size_t r = 0; r < examples.size(); ++r) {
    const Example& ex = examples[r];
    fill_row(batch.encoder, r, ex.source.ids, ex.source.segments, ex.source.positions);
    fill_row(batch.decoder, r, ex.target.input_ids, ex.target.segments, ex.target.positions);
    std::copy(ex.target.gold.begin(), ex.target.gold.end(), batch.gold.begin() + r * dec_len);
    batch.token_count += ex.target.gold.size();
    batch.members.push_back(ex.index);
  }
  return batch;
}

std::vector<Batch> batch_by_tokens(const std::vector<Example>& examples, std::size_t budget,
                                   std::uint64_t seed, TokenId pad_id) {
  for (const auto& ex : examples) {
    if (ex.target.gold.size() > budget) {
      throw ParameterError("example " + std::to_string(ex.index) + " has " +
                           std::to_string(ex.target.gold.size()) +
                           " target tokens, more than the batch budget of " +
                           std::to_string(budget));
    }
  }
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&examples](std::size_t a, std::size_t b) {
    return examples[a].target.gold.size() < examples[b].target.gold.size();
  });

  std::vector<std::vector<Example>> groups;
  std::size_t used = 0;
  for (std::size_t i : order) {
    const std::size_t tokens = examples[i].target.gold.size();
    if (groups.empty() || used + tokens > budget) {
      groups.emplace_back();
      used = 0;
    }
    groups.back().push_back(examples[i]);
    used += tokens;
  }
  std::mt19937_64 rng(seed);
  std::shuffle(groups.begin(), groups.end(), rng);

  std::vector<Batch> batches;
  batches.reserve(groups.size());
  for (const auto& group : groups) batches.push_back(make_batch(group, pad_id));
  return batches;
}

}  // namespace ape
