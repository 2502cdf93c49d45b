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
#include <string>
#include <vector>

#include "ape/data.hpp"
#include "ape/tokenizer.hpp"

namespace ape {

// Synthetic post-editing corpus. src words translate one-to-one into target
// words (some split into "stem ##suffix" pieces); mt is that translation
// with one or two scripted edits (wrong word, dropped word, swapped pair,
// spurious word) and pe is the clean translation.
struct Fixture {
  std::vector<std::string> vocab_tokens;
  std::vector<Triplet> triplets;

  Vocab vocab() const { return Vocab(vocab_tokens); }
};

Fixture make_fixture(std::size_t count = 64, std::uint64_t seed = 7);

}  // namespace ape
