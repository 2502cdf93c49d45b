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

#include <cstddef>
#include <string>
#include <vector>

#include "ape/data.hpp"
#include "ape/model.hpp"
#include "ape/tokenizer.hpp"

namespace ape {

struct BeamOptions {
  std::size_t beam = 8;
  std::size_t max_len = 100;  // emitted tokens, [SEP] included
};

struct Hypothesis {
  std::vector<TokenId> tokens;  // starts with [CLS]
  double log_prob = 0;          // summed over emitted tokens
  bool finished = false;

  std::size_t emitted() const { return tokens.size() - 1; }
  // Average log-probability per emitted token.
  double score() const { return log_prob / static_cast<double>(emitted()); }
};

struct BeamResult {
  std::vector<TokenId> output;      // best hypothesis without [CLS]/[SEP]
  Hypothesis best;
  std::vector<Hypothesis> completed;  // in the order they finished
};

// Tokens the decoder may emit: every non-reserved token plus [SEP].
bool emittable(TokenId id, const Vocab& vocab);

// Runs under no-grad; the model should be in eval mode.
template <typename T>
BeamResult beam_search(Model<T>& model, const EncodedPair& pair, const Vocab& vocab,
                       const BeamOptions& options = {});

struct Translations {
  std::vector<std::string> outputs;  // one per input, empty on failure
  std::vector<std::size_t> failed;   // indices that could not be decoded
  std::vector<std::string> errors;   // messages, parallel to `failed`
};

template <typename T>
Translations translate_corpus(Model<T>& model, const std::vector<Triplet>& triplets,
                              const Vocab& vocab, const BeamOptions& options = {},
                              std::size_t threads = 1);

}  // namespace ape
