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

// Shared helpers for the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "ape/model.hpp"
#include "ape/tensor.hpp"
#include "ape/tokenizer.hpp"

namespace ape::testing {

inline std::vector<double> random_values(std::size_t n, std::mt19937_64& rng, double lo = -1.0,
                                         double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

template <typename T = double>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = true,
                        double lo = -1.0, double hi = 1.0) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  const auto values = random_values(n, rng, lo, hi);
  return Tensor<T>(std::move(shape), std::vector<T>(values.begin(), values.end()), requires_grad);
}

// ||analytic - numeric|| / max(||analytic||, ||numeric||, floor), central
// differences with step h on every element of `input`.
inline double gradient_error(const std::function<Tensor<double>()>& loss_fn, Tensor<double> input,
                             double h = 1e-4, double floor = 1e-12) {
  input.zero_grad();
  Tensor<double> loss = loss_fn();
  loss.backward();
  std::vector<double> analytic(input.numel(), 0.0);
  if (input.has_grad()) std::copy(input.grad().begin(), input.grad().end(), analytic.begin());

  std::vector<double> numeric(input.numel());
  auto values = input.mutable_data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + h;
    const double up = loss_fn().item();
    values[i] = saved - h;
    const double down = loss_fn().item();
    values[i] = saved;
    numeric[i] = (up - down) / (2 * h);
  }
  double diff = 0, na = 0, nn = 0;
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  const double scale = std::max({std::sqrt(na), std::sqrt(nn), floor});
  return std::sqrt(diff) / scale;
}

// Weighted sum of all elements with fixed pseudo-random weights, so every
// output element influences the loss differently.
inline Tensor<double> probe(const Tensor<double>& x, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  Tensor<double> w(x.shape(), random_values(x.numel(), rng), false);
  return sum(mul(x, w));
}

// [PAD] [UNK] [CLS] [SEP] [MASK] followed by `words`.
inline Vocab small_vocab(const std::vector<std::string>& words) {
  std::vector<std::string> tokens = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
  tokens.insert(tokens.end(), words.begin(), words.end());
  return Vocab(tokens);
}

inline std::vector<std::string> letter_words(std::size_t n) {
  std::vector<std::string> words;
  for (std::size_t i = 0; i < n; ++i) words.push_back(std::string(1, static_cast<char>('a' + i)));
  return words;
}

// Toy dimensions used by the gradient checks.
inline ModelConfig tiny_config(std::size_t vocab_size = 20) {
  ModelConfig c;
  c.layers = 2;
  c.hidden = 8;
  c.heads = 2;
  c.ffn = 16;
  c.vocab_size = vocab_size;
  c.max_positions = 32;
  c.dropout = 0.0;
  return c;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("apebert-test-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace ape::testing
