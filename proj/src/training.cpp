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
#include "ape/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "ape/decoding.hpp"
#include "ape/errors.hpp"
#include "ape/metrics.hpp"

namespace ape {

void TrainConfig::validate() const {
  if (max_steps == 0) throw ConfigError("max_steps must be positive");
  if (warmup_steps >= max_steps) throw ConfigError("warmup_steps must be below max_steps");
  if (!(peak_lr > 0)) throw ConfigError("peak_lr must be positive");
  if (weight_decay < 0) throw ConfigError("weight_decay must be nonnegative");
  if (dropout < 0 || dropout >= 1) throw ConfigError("dropout must lie in [0, 1)");
  if (label_smoothing < 0 || label_smoothing >= 1) throw ConfigError("label_smoothing must lie in [0, 1)");
  if (batch_tokens == 0) throw ConfigError("batch_tokens must be positive");
  if (checkpoint_interval == 0) throw ConfigError("checkpoint_interval must be positive");
  if (ema_decay < 0 || ema_decay > 1) throw ConfigError("ema_decay must lie in [0, 1]");
  if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) throw ConfigError("adam betas must lie in [0, 1)");
  if (!(adam_eps > 0)) throw ConfigError("adam_eps must be positive");
  if (accumulation == 0) throw ConfigError("accumulation must be positive");
  if (eval_beam == 0 || eval_max_len == 0) throw ConfigError("eval beam and max_len must be positive");
}

double lr_at(std::size_t step, const TrainConfig& c) {
  const double s = static_cast<double>(step);
  if (step <= c.warmup_steps) {
    if (c.warmup_steps == 0) return c.peak_lr;
    return c.peak_lr * s / static_cast<double>(c.warmup_steps);
  }
  const double remaining = static_cast<double>(c.max_steps) - s;
  return c.peak_lr * std::max(0.0, remaining / static_cast<double>(c.max_steps - c.warmup_steps));
}

template <typename T>
void adam_step(ParameterStore<T>& store, AdamState<T>& state, double lr, const TrainConfig& c,
               std::size_t step) {
  auto& entries = store.entries();
  for (const auto& e : entries) {
    for (T g : e.tensor.grad()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw NumericError("non-finite gradient for " + e.name + " at step " + std::to_string(step));
      }
    }
  }
  if (state.m.size() != entries.size()) {
    state.m.assign(entries.size(), {});
    state.v.assign(entries.size(), {});
    for (std::size_t i = 0; i < entries.size(); ++i) {
      state.m[i].assign(entries[i].tensor.numel(), T(0));
      state.v[i].assign(entries[i].tensor.numel(), T(0));
    }
  }
  ++state.steps;
  const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);
  const T correction1 = T(1) - static_cast<T>(std::pow(c.beta1, static_cast<double>(state.steps)));
  const T correction2 = T(1) - static_cast<T>(std::pow(c.beta2, static_cast<double>(state.steps)));
  const T rate = static_cast<T>(lr), eps = static_cast<T>(c.adam_eps);
  const T decay = static_cast<T>(c.weight_decay);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& e = entries[i];
    auto values = e.tensor.mutable_data();
    auto grad = e.tensor.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < values.size(); ++k) {
      T g = grad.empty() ? T(0) : grad[k];
      if (e.decay) g += decay * values[k];
      m[k] = b1 * m[k] + (T(1) - b1) * g;
      v[k] = b2 * v[k] + (T(1) - b2) * g * g;
      const T m_hat = m[k] / correction1;
      const T v_hat = v[k] / correction2;
      values[k] -= rate * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

template <typename T>
EmaShadow<T> EmaShadow<T>::from(const ParameterStore<T>& store) {
  EmaShadow<T> shadow;
  for (const auto& e : store.entries()) {
    shadow.names.push_back(e.name);
    shadow.values.emplace_back(e.tensor.data().begin(), e.tensor.data().end());
  }
  return shadow;
}

template <typename T>
void ema_update(EmaShadow<T>& shadow, const ParameterStore<T>& store, double decay) {
  const auto& entries = store.entries();
  if (entries.size() != shadow.values.size()) throw DimensionError("EMA shadow does not match the parameters");
  const T d = static_cast<T>(decay), keep = static_cast<T>(1.0 - decay);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto p = entries[i].tensor.data();
    auto& s = shadow.values[i];
    if (p.size() != s.size()) throw DimensionError("EMA shadow shape differs for " + entries[i].name);
    for (std::size_t k = 0; k < s.size(); ++k) s[k] = keep * s[k] + d * p[k];
  }
}

template <typename T>
Checkpoint shadow_checkpoint(const EmaShadow<T>& shadow, const ParameterStore<T>& store,
                             std::int64_t step, nlohmann::json config) {
  Checkpoint checkpoint = snapshot(store, step, std::move(config));
  for (std::size_t i = 0; i < checkpoint.tensors.size(); ++i) {
    auto& values = checkpoint.tensors[i].values;
    for (std::size_t k = 0; k < values.size(); ++k) values[k] = static_cast<float>(shadow.values[i][k]);
  }
  return checkpoint;
}

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::size_t step) {
  return dir / ("ckpt-" + std::to_string(step) + ".bin");
}

std::filesystem::path last_good_path(const std::filesystem::path& dir) { return dir / "last-good.bin"; }

template <typename T>
std::pair<double, double> evaluate_checkpoint(const Checkpoint& checkpoint, const ModelConfig& config,
                                              const SharingConfig& sharing, const Vocab& vocab,
                                              const std::vector<Triplet>& dev_set,
                                              std::size_t beam, std::size_t max_len) {
  Model<T> model(config, sharing, 0);
  load_parameters(model.parameters(), checkpoint);
  model.set_training(false);
  const Translations out = translate_corpus(model, dev_set, vocab, {beam, max_len});
  std::vector<std::string> refs;
  for (const auto& t : dev_set) refs.push_back(t.pe);
  const CorpusScore score = score_segments(out.outputs, refs);
  return {score.ter, score.bleu};
}

namespace {

std::string format_metric(double value, const char* pattern) {
  if (std::isnan(value)) return "nan";
  char buffer[64];
  std::snprintf(buffer, sizeof buffer, pattern, value);
  return buffer;
}

}  // namespace

template <typename T>
TrainResult train(Model<T>& model, const Vocab& vocab, const std::vector<Triplet>& train_set,
                  const std::vector<Triplet>& dev_set, const TrainConfig& config,
                  const TrainOutputs& outputs) {
  config.validate();
  TrainResult result;
  const auto kept = filter_by_length(train_set, vocab);
  const auto examples =
      encode_examples(kept, vocab, model.config().max_positions, &result.skipped);
  if (examples.empty()) throw FormatError("no training data left after length filtering");

  if (!outputs.checkpoint_dir.empty()) std::filesystem::create_directories(outputs.checkpoint_dir);
  std::ofstream log;
  if (!outputs.metric_log.empty()) {
    log.open(outputs.metric_log, std::ios::app);
    if (!log) throw FormatError("cannot open metric log " + outputs.metric_log.string());
  }

  auto& store = model.parameters();
  AdamState<T> adam;
  EmaShadow<T> shadow = EmaShadow<T>::from(store);
  model.reseed(config.seed);
  model.set_training(true);

  std::size_t epoch = 0, cursor = 0;
  std::vector<Batch> batches =
      batch_by_tokens(examples, config.batch_tokens, config.seed, vocab.pad_id());
  auto next_batch = [&]() -> const Batch& {
    if (cursor == batches.size()) {
      ++epoch;
      batches = batch_by_tokens(examples, config.batch_tokens, config.seed + epoch, vocab.pad_id());
      cursor = 0;
    }
    return batches[cursor++];
  };

  auto persist_last_good = [&](std::size_t step) {
    if (outputs.checkpoint_dir.empty()) return;
    save_checkpoint(shadow_checkpoint(shadow, store, static_cast<std::int64_t>(step - 1),
                                      outputs.config_echo),
                    last_good_path(outputs.checkpoint_dir));
  };

  const T smoothing = static_cast<T>(config.label_smoothing);
  double interval_loss = 0;
  std::size_t interval_steps = 0;
  for (std::size_t step = 1; step <= config.max_steps; ++step) {
    store.zero_grad();
    double step_loss = 0;
    for (std::size_t a = 0; a < config.accumulation; ++a) {
      const Batch& batch = next_batch();
      const EncodedMemory<T> memory = model.encode(batch.encoder);
      const Tensor<T> logits = model.decode(memory, batch.decoder);
      Tensor<T> loss = cross_entropy_label_smoothed(logits, std::span<const TokenId>(batch.gold),
                                                    smoothing, vocab.pad_id());
      if (config.accumulation > 1) loss = scale(loss, T(1) / static_cast<T>(config.accumulation));
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value)) {
        persist_last_good(step);
        throw NumericError("training loss is not finite at step " + std::to_string(step));
      }
      loss.backward();
      step_loss += value;
    }
    const double lr = lr_at(step, config);
    try {
      adam_step(store, adam, lr, config, step);
    } catch (const NumericError&) {
      persist_last_good(step);
      throw;
    }
    ema_update(shadow, store, config.ema_decay);
    result.losses.push_back(step_loss);
    interval_loss += step_loss;
    ++interval_steps;

    if (step % config.checkpoint_interval != 0) continue;
    CheckpointRecord record;
    record.step = step;
    record.loss = interval_loss / static_cast<double>(interval_steps);
    record.lr = lr;
    record.dev_ter = std::numeric_limits<double>::quiet_NaN();
    record.dev_bleu = std::numeric_limits<double>::quiet_NaN();
    const Checkpoint ckpt =
        shadow_checkpoint(shadow, store, static_cast<std::int64_t>(step), outputs.config_echo);
    if (!outputs.checkpoint_dir.empty()) {
      record.file = checkpoint_path(outputs.checkpoint_dir, step);
      save_checkpoint(ckpt, record.file);
    }
    if (outputs.on_checkpoint) outputs.on_checkpoint(ckpt);
    if (config.evaluate_dev && !dev_set.empty()) {
      std::tie(record.dev_ter, record.dev_bleu) =
          evaluate_checkpoint<T>(ckpt, model.config(), model.sharing(), vocab, dev_set,
                                 config.eval_beam, config.eval_max_len);
    }
    if (log.is_open()) {
      log << step << '\t' << format_metric(record.loss, "%.6f") << '\t'
          << format_metric(record.lr, "%.6e") << '\t' << format_metric(record.dev_ter, "%.2f")
          << '\t' << format_metric(record.dev_bleu, "%.2f") << '\n';
      log.flush();
    }
    result.checkpoints.push_back(std::move(record));
    interval_loss = 0;
    interval_steps = 0;
  }
  model.set_training(false);
  return result;
}

std::size_t select_best(const std::vector<CheckpointRecord>& records) {
  if (records.empty()) throw ParameterError("select_best: no checkpoints");
  std::size_t best = 0;
  for (std::size_t i = 1; i < records.size(); ++i) {
    if (records[i].dev_ter <= records[best].dev_ter) best = i;
  }
  return best;
}

template void adam_step(ParameterStore<float>&, AdamState<float>&, double, const TrainConfig&, std::size_t);
template void adam_step(ParameterStore<double>&, AdamState<double>&, double, const TrainConfig&, std::size_t);
template struct EmaShadow<float>;
template struct EmaShadow<double>;
template void ema_update(EmaShadow<float>&, const ParameterStore<float>&, double);
template void ema_update(EmaShadow<double>&, const ParameterStore<double>&, double);
template Checkpoint shadow_checkpoint(const EmaShadow<float>&, const ParameterStore<float>&,
                                      std::int64_t, nlohmann::json);
template Checkpoint shadow_checkpoint(const EmaShadow<double>&, const ParameterStore<double>&,
                                      std::int64_t, nlohmann::json);
template TrainResult train(Model<float>&, const Vocab&, const std::vector<Triplet>&,
                           const std::vector<Triplet>&, const TrainConfig&, const TrainOutputs&);
template TrainResult train(Model<double>&, const Vocab&, const std::vector<Triplet>&,
                           const std::vector<Triplet>&, const TrainConfig&, const TrainOutputs&);
template std::pair<double, double> evaluate_checkpoint<float>(const Checkpoint&, const ModelConfig&,
                                                              const SharingConfig&, const Vocab&,
                                                              const std::vector<Triplet>&,
                                                              std::size_t, std::size_t);
template std::pair<double, double> evaluate_checkpoint<double>(const Checkpoint&, const ModelConfig&,
                                                               const SharingConfig&, const Vocab&,
                                                               const std::vector<Triplet>&,
                                                               std::size_t, std::size_t);

}  // namespace ape
