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
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "doctest.h"

#include "ape/checkpoint.hpp"
#include "ape/errors.hpp"
#include "ape/fixture.hpp"
#include "ape/training.hpp"
#include "model_support.hpp"
#include "support.hpp"

using namespace ape;
using namespace ape::testing;

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Plain Adam with L2 folded into the gradient.
struct ReferenceAdam {
  double m = 0, v = 0;
  int t = 0;
  double update(double p, double g, double lr, double decay, const TrainConfig& c) {
    g += decay * p;
    ++t;
    m = c.beta1 * m + (1 - c.beta1) * g;
    v = c.beta2 * v + (1 - c.beta2) * g * g;
    const double mh = m / (1 - std::pow(c.beta1, t));
    const double vh = v / (1 - std::pow(c.beta2, t));
    return p - lr * mh / (std::sqrt(vh) + c.adam_eps);
  }
};

TrainConfig quick_config(std::size_t steps, std::size_t interval) {
  TrainConfig c;
  c.max_steps = steps;
  c.warmup_steps = steps / 4;
  c.peak_lr = 1e-3;
  c.batch_tokens = 64;
  c.checkpoint_interval = interval;
  c.dropout = 0.1;
  c.evaluate_dev = false;
  return c;
}

ModelConfig fixture_model(const Vocab& vocab) {
  ModelConfig c = tiny_config(vocab.size());
  c.dropout = 0.1;
  return c;
}

}  // namespace

TEST_CASE("learning-rate schedule") {
  TrainConfig c;
  CHECK(lr_at(0, c) == 0.0);
  CHECK(lr_at(2500, c) == doctest::Approx(2.5e-5).epsilon(1e-12));
  CHECK(lr_at(5000, c) == doctest::Approx(5e-5).epsilon(1e-12));
  CHECK(lr_at(c.max_steps, c) == 0.0);
  CHECK(lr_at(c.max_steps + 100, c) == 0.0);
  // Neighbours of the peak differ by one ramp increment.
  const double increment = c.peak_lr / c.warmup_steps;
  CHECK(std::abs(lr_at(5001, c) - lr_at(5000, c)) <= increment * (1 + 1e-9));
  CHECK(std::abs(lr_at(4999, c) - lr_at(5000, c)) <= increment * (1 + 1e-9));
  CHECK(lr_at(17500, c) == doctest::Approx(2.5e-5).epsilon(1e-12));
  for (std::size_t s = 0; s <= c.max_steps + 10; s += 37) CHECK(lr_at(s, c) >= 0.0);
}

TEST_CASE("config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.warmup_steps = c.max_steps;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.peak_lr = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.ema_decay = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("adam first step moves a scalar by lr") {
  ParameterStore<double> store;
  store.add("w", Tensor<double>({1}, {1.0}, true), false);
  sum(store.get("w")).backward();
  AdamState<double> state;
  TrainConfig c;
  c.weight_decay = 0;
  adam_step(store, state, 0.1, c, 1);
  CHECK(store.get("w").data()[0] == doctest::Approx(0.9).epsilon(1e-7));

  store.zero_grad();
  ParameterStore<double> still;
  still.add("w", Tensor<double>({1}, {0.5}, true), false);
  AdamState<double> fresh;
  adam_step(still, fresh, 0.1, c, 1);
  CHECK(still.get("w").data()[0] == 0.5);
}

TEST_CASE("adam matches a scalar reference over several steps, decay only where flagged") {
  std::mt19937_64 rng(3);
  ParameterStore<double> store;
  store.add("decayed", random_tensor({5}, rng), true);
  store.add("plain", random_tensor({5}, rng), false);
  TrainConfig c;
  c.weight_decay = 0.3;
  std::vector<double> expected;
  for (const auto& e : store.entries()) expected.insert(expected.end(), e.tensor.data().begin(), e.tensor.data().end());
  std::vector<ReferenceAdam> ref(10);
  AdamState<double> state;
  for (int step = 1; step <= 6; ++step) {
    store.zero_grad();
    const auto w = random_values(10, rng);
    Tensor<double> wa({5}, {w.begin(), w.begin() + 5}), wb({5}, {w.begin() + 5, w.end()});
    add(sum(mul(store.get("decayed"), wa)), sum(mul(store.get("plain"), wb))).backward();
    const double lr = 0.01 * step;
    for (std::size_t i = 0; i < 10; ++i) expected[i] = ref[i].update(expected[i], w[i], lr, i < 5 ? 0.3 : 0.0, c);
    adam_step(store, state, lr, c, step);
  }
  std::size_t i = 0;
  for (const auto& e : store.entries())
    for (double v : e.tensor.data()) CHECK(v == doctest::Approx(expected[i++]).epsilon(1e-12));
}

TEST_CASE("adam updates a tie group once") {
  ParameterStore<double> store;
  store.add("a", Tensor<double>({1}, {1.0}, true), false);
  store.alias("b", "a");
  add(sum(store.get("a")), sum(store.get("b"))).backward();
  AdamState<double> state;
  TrainConfig c;
  adam_step(store, state, 0.1, c, 1);
  CHECK(store.get("a").shares_storage(store.get("b")));
  CHECK(store.get("b").data()[0] == doctest::Approx(0.9).epsilon(1e-7));
}

TEST_CASE("adam rejects non-finite gradients before touching anything") {
  ParameterStore<double> store;
  store.add("a", Tensor<double>({2}, {1.0, 2.0}, true), false);
  store.add("b", Tensor<double>({1}, {3.0}, true), false);
  sum(store.get("a")).backward();
  sum(store.get("b")).backward();
  store.entries()[1].tensor.mutable_grad()[0] = std::numeric_limits<double>::quiet_NaN();
  AdamState<double> state;
  try {
    adam_step(store, state, 0.1, TrainConfig{}, 77);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("77") != std::string::npos);
  }
  CHECK(store.get("a").data()[0] == 1.0);
  CHECK(state.steps == 0);
}

TEST_CASE("ema closed form") {
  std::mt19937_64 rng(5);
  ParameterStore<double> store;
  store.add("p", random_tensor({6}, rng), false);
  auto shadow = EmaShadow<double>::from(store);
  const std::vector<double> s0 = shadow.values[0];
  auto values = store.entries()[0].tensor.mutable_data();
  for (auto& v : values) v += 3.0;
  const double delta = 0.03;
  const int k = 40;
  for (int i = 0; i < k; ++i) ema_update(shadow, store, delta);
  for (std::size_t j = 0; j < 6; ++j) {
    const double p = values[j];
    CHECK(std::abs(shadow.values[0][j] - (p + std::pow(1 - delta, k) * (s0[j] - p))) < 1e-12);
  }
  auto frozen = shadow.values;
  ema_update(shadow, store, 0.0);
  CHECK(shadow.values == frozen);
  ema_update(shadow, store, 1.0);
  CHECK(shadow.values[0] == std::vector<double>(values.begin(), values.end()));
}

TEST_CASE("select best") {
  auto records = [](std::vector<double> ters) {
    std::vector<CheckpointRecord> r;
    for (std::size_t i = 0; i < ters.size(); ++i) {
      CheckpointRecord c;
      c.step = (i + 1) * 1000;
      c.dev_ter = ters[i];
      r.push_back(c);
    }
    return r;
  };
  CHECK(select_best(records({20.0, 18.5, 19.0})) == 1);
  CHECK(select_best(records({7.0})) == 0);
  CHECK(select_best(records({18.5, 18.5})) == 1);
  CHECK_THROWS_AS(select_best({}), ParameterError);
}

TEST_CASE("label smoothing never lowers the loss of a confident fit") {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t rows = 4, V = 7;
    auto logits = random_values(rows * V, rng);
    std::vector<TokenId> gold;
    for (std::size_t r = 0; r < rows; ++r) {
      gold.push_back(static_cast<TokenId>(1 + rng() % (V - 1)));
      logits[r * V + gold.back()] += 12.0;
    }
    const Tensor<double> t({rows, V}, logits);
    const double plain = cross_entropy_label_smoothed(t, std::span<const TokenId>(gold), 0.0, 0).item();
    const double smoothed = cross_entropy_label_smoothed(t, std::span<const TokenId>(gold), 0.1, 0).item();
    CHECK(smoothed >= plain);
  }
}

TEST_CASE("training writes floor(max_steps / interval) checkpoints and is deterministic") {
  const Fixture fixture = make_fixture(16, 3);
  const Vocab vocab = fixture.vocab();
  const TrainConfig c = quick_config(25, 10);
  std::vector<std::string> logs;
  std::vector<TrainResult> results;
  for (int run = 0; run < 2; ++run) {
    const auto dir = scratch_dir("train-det-" + std::to_string(run));
    Model<double> model(fixture_model(vocab), sharing_preset(SharingPreset::SharedSa), 11);
    TrainOutputs out;
    out.checkpoint_dir = dir;
    out.metric_log = dir / "metrics.tsv";
    results.push_back(train(model, vocab, fixture.triplets, {}, c, out));
    logs.push_back(read_file(out.metric_log));
    CHECK(std::filesystem::exists(checkpoint_path(dir, 10)));
    CHECK(std::filesystem::exists(checkpoint_path(dir, 20)));
    CHECK_FALSE(std::filesystem::exists(checkpoint_path(dir, 30)));
  }
  CHECK(results[0].checkpoints.size() == 2);
  CHECK(results[0].losses.size() == 25);
  CHECK(results[0].losses == results[1].losses);
  CHECK(logs[0] == logs[1]);
  CHECK(read_file(std::filesystem::temp_directory_path() / "apebert-test-train-det-0" / "ckpt-20.bin") ==
        read_file(std::filesystem::temp_directory_path() / "apebert-test-train-det-1" / "ckpt-20.bin"));

  std::istringstream lines(logs[0]);
  std::string line;
  std::getline(lines, line);
  CHECK(line.rfind("10\t", 0) == 0);
  CHECK(line.substr(line.size() - 8) == "\tnan\tnan");
}

TEST_CASE("a short run changes the parameters and keeps ties") {
  const Fixture fixture = make_fixture(8, 4);
  const Vocab vocab = fixture.vocab();
  TrainConfig c = quick_config(2, 2);
  c.warmup_steps = 0;
  Model<double> model(fixture_model(vocab), sharing_preset(SharingPreset::SharedSaCa), 12);
  const Checkpoint before = snapshot(model.parameters(), 0, {});
  const auto result = train(model, vocab, fixture.triplets, {}, c);
  CHECK(result.losses.size() == 2);
  CHECK(result.checkpoints.size() == 1);
  const Checkpoint after = snapshot(model.parameters(), 2, {});
  bool changed = false;
  for (std::size_t i = 0; i < before.tensors.size(); ++i) changed = changed || before.tensors[i].values != after.tensors[i].values;
  CHECK(changed);
  CHECK(aliasing_probe(model.parameters()));
}

TEST_CASE("ema checkpoints hold the shadow, not the raw weights") {
  const Fixture fixture = make_fixture(8, 5);
  const Vocab vocab = fixture.vocab();
  TrainConfig c = quick_config(4, 4);
  c.ema_decay = 0.0;
  Model<double> model(fixture_model(vocab), sharing_preset(SharingPreset::Transformer), 13);
  const Checkpoint initial = snapshot(model.parameters(), 0, {});
  std::vector<Checkpoint> seen;
  TrainOutputs out;
  out.on_checkpoint = [&](const Checkpoint& ck) { seen.push_back(ck); };
  train(model, vocab, fixture.triplets, {}, c, out);
  REQUIRE(seen.size() == 1);
  for (std::size_t i = 0; i < initial.tensors.size(); ++i) CHECK(seen[0].tensors[i].values == initial.tensors[i].values);
}

TEST_CASE("a non-finite loss stops training and keeps the last good shadow") {
  const Fixture fixture = make_fixture(8, 6);
  const Vocab vocab = fixture.vocab();
  const TrainConfig c = quick_config(12, 5);
  const auto dir = scratch_dir("nan");
  Model<double> model(fixture_model(vocab), sharing_preset(SharingPreset::SharedSa), 14);
  TrainOutputs out;
  out.checkpoint_dir = dir;
  out.on_checkpoint = [&](const Checkpoint&) {
    model.parameters().entries()[0].tensor.mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
  };
  try {
    train(model, vocab, fixture.triplets, {}, c, out);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("step 6") != std::string::npos);
  }
  const Checkpoint last = load_checkpoint(last_good_path(dir));
  CHECK(last.step == 5);
  for (const auto& t : last.tensors)
    for (float v : t.values) CHECK(std::isfinite(v));
}

TEST_CASE("training rejects an empty corpus") {
  const Fixture fixture = make_fixture(4, 1);
  const Vocab vocab = fixture.vocab();
  Model<double> model(fixture_model(vocab), sharing_preset(SharingPreset::Transformer), 1);
  CHECK_THROWS_AS(train(model, vocab, {}, {}, quick_config(4, 2)), FormatError);
}
