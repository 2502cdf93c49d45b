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
// Writes the synthetic post-editing corpus and its vocabulary:
//   make_fixture <out-dir> [count] [seed]
// producing <out-dir>/train.tsv and <out-dir>/vocab.txt.

#include <filesystem>
#include <iostream>
#include <string>

#include "ape/data.hpp"
#include "ape/fixture.hpp"

int main(int argc, char** argv) {
  if (argc < 2 || argc > 4) {
    std::cerr << "usage: make_fixture <out-dir> [count] [seed]\n";
    return 1;
  }
  const std::filesystem::path dir = argv[1];
  const std::size_t count = argc > 2 ? std::stoul(argv[2]) : 64;
  const std::uint64_t seed = argc > 3 ? std::stoull(argv[3]) : 7;
  std::filesystem::create_directories(dir);
  const ape::Fixture fixture = ape::make_fixture(count, seed);
  ape::write_triplets(fixture.triplets, dir / "train.tsv");
  ape::save_vocab(fixture.vocab(), dir / "vocab.txt");
  std::cout << fixture.triplets.size() << " triplets, " << fixture.vocab_tokens.size()
            << " vocabulary entries\n";
  return 0;
}
