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
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

#include "ape/checkpoint.hpp"
#include "ape/data.hpp"
#include "ape/model.hpp"
#include "ape/tokenizer.hpp"

namespace ape {

struct TrainConfig {
  std::size_t warmup_steps = 5000;
  double peak_lr = 5e-5;
  std::size_t max_steps = 30000;
  double weight_decay = 0.01;
  double dropout = 0.1;
  double label_smoothing = 0.1;
  std::size_t batch_tokens = 1024;
  std::size_t checkpoint_interval = 1000;
  double ema_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t accumulation = 1;  // batches per optimizer step
  std::uint64_t seed = 1;
  std::size_t eval_beam = 8;
  std::size_t eval_max_len = 100;
  bool evaluate_dev = true;

  // Throws ConfigError.
  void validate() const;
};

// Linear warmup to peak_lr, then linear decay reaching 0 at max_steps.
double lr_at(std::size_t step, const TrainConfig& config);

template <typename T>
struct AdamState {
  std::size_t steps = 0;
  std::vector<std::vector<T>> m;  // one per canonical parameter
  std::vector<std::vector<T>> v;
};

// One Adam update from the gradients held by the parameters. Tensors flagged
// for decay get weight_decay * value added to their gradient. Parameters
// without a gradient are treated as having a zero gradient. Throws
// NumericError naming `step` on a non-finite gradient, before changing
// anything.
template <typename T>
void adam_step(ParameterStore<T>& store, AdamState<T>& state, double lr, const TrainConfig& config,
               std::size_t step);

// Exponential moving average of the parameters, one buffer per canonical
// name.
template <typename T>
struct EmaShadow {
  std::vector<std::string> names;
  std::vector<std::vector<T>> values;

  static EmaShadow from(const ParameterStore<T>& store);
};

// shadow <- (1 - decay) * shadow + decay * param
template <typename T>
void ema_update(EmaShadow<T>& shadow, const ParameterStore<T>& store, double decay);

// Checkpoint of `store`'s layout holding the shadow values.
template <typename T>
Checkpoint shadow_checkpoint(const EmaShadow<T>& shadow, const ParameterStore<T>& store,
                             std::int64_t step, nlohmann::json config);

struct CheckpointRecord {
  std::size_t step = 0;
  std::filesystem::path file;  // empty when nothing was written
  double loss = 0;             // mean training loss since the previous record
  double lr = 0;
  double dev_ter = 0;          // percent; NaN when not evaluated
  double dev_bleu = 0;
};

struct TrainResult {
  std::vector<double> losses;  // per optimizer step
  std::vector<CheckpointRecord> checkpoints;
  std::vector<std::size_t> skipped;  // corpus lines dropped by length
};

struct TrainOutputs {
  std::filesystem::path checkpoint_dir;  // empty: keep nothing on disk
  std::filesystem::path metric_log;      // empty: no log
  nlohmann::json config_echo = nlohmann::json::object();
  // Called with the EMA checkpoint at every interval.
  std::function<void(const Checkpoint&)> on_checkpoint;
};

// "ckpt-<step>.bin" inside the checkpoint directory.
std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::size_t step);
std::filesystem::path last_good_path(const std::filesystem::path& dir);

template <typename T>
TrainResult train(Model<T>& model, const Vocab& vocab, const std::vector<Triplet>& train_set,
                  const std::vector<Triplet>& dev_set, const TrainConfig& config,
                  const TrainOutputs& outputs = {});

// Index of the record with the lowest dev TER, later steps winning ties.
std::size_t select_best(const std::vector<CheckpointRecord>& records);

// Dev TER/BLEU of `checkpoint` on `dev_set`.
template <typename T>
std::pair<double, double> evaluate_checkpoint(const Checkpoint& checkpoint, const ModelConfig& config,
                                              const SharingConfig& sharing, const Vocab& vocab,
                                              const std::vector<Triplet>& dev_set,
                                              std::size_t beam, std::size_t max_len);

}  // namespace ape
