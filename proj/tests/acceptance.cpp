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
// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Pass a criterion number to run only that one.

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <sstream>

#include "ape/checkpoint.hpp"
#include "ape/cli.hpp"
#include "ape/decoding.hpp"
#include "ape/fixture.hpp"
#include "ape/metrics.hpp"
#include "ape/training.hpp"
#include "decoding_support.hpp"
#include "metrics_oracle.hpp"
#include "model_support.hpp"
#include "support.hpp"

using namespace ape;
using namespace ape::testing;

namespace {

using Clock = std::chrono::steady_clock;

struct Verdict {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

ModelConfig fixture_config(std::size_t vocab_size) {
  ModelConfig c = tiny_config(vocab_size);
  c.max_positions = 64;
  return c;
}

void optimizer_steps(Model<double>& model, const std::vector<Example>& examples, const Vocab& vocab,
                     AdamState<double>& state, std::size_t steps) {
  TrainConfig tc;
  auto& store = model.parameters();
  for (std::size_t s = 0; s < steps; ++s) {
    store.zero_grad();
    const std::size_t start = (4 * s) % (examples.size() - 3);
    const Batch batch = make_batch(std::span<const Example>(examples).subspan(start, 4), vocab.pad_id());
    const auto logits = model.decode(model.encode(batch.encoder), batch.decoder);
    cross_entropy_label_smoothed(logits, std::span<const TokenId>(batch.gold), 0.1, vocab.pad_id()).backward();
    adam_step(store, state, 1e-3, tc, state.steps + 1);
  }
}

// Every name of every tie group reads the same storage and values.
template <typename T>
bool ties_uniform(const ParameterStore<T>& store) {
  for (const auto& group : store.tie_groups()) {
    const auto& first = store.get(group.front());
    for (const auto& name : group) {
      const auto& t = store.get(name);
      if (!t.shares_storage(first) || !same_values(t, first)) return false;
    }
  }
  return true;
}

// 2
void gradient_fidelity(Verdict& v) {
  const auto start = Clock::now();
  // Wider init keeps attention away from uniform, where query/key gradients
  // vanish into finite-difference noise.
  ModelConfig config = tiny_config();
  config.init_std = 0.1;
  ToyTask task(config, SharingPreset::BertDecCaInit, 2);
  std::mt19937_64 rng(20);
  const auto target = task.random_target(rng, 5);
  auto loss = [&] {
    const auto logits =
        task.model.decode(task.model.encode(SequenceBatch::single(task.pair)), SequenceBatch::single(target));
    return cross_entropy_label_smoothed(logits, std::span<const TokenId>(target.gold), 0.1, task.vocab.pad_id());
  };
  double worst = 0;
  std::string worst_name;
  std::size_t tensors = 0, vanishing = 0;
  for (const auto& e : task.model.parameters().entries()) {
    // Key biases shift every attention logit of a query equally, so their
    // true gradient is zero; the floor turns that case into an absolute check.
    const double err = gradient_error(loss, e.tensor, 1e-4, 1e-6);
    double norm = 0;
    for (double g : e.tensor.grad()) norm += g * g;
    vanishing += std::sqrt(norm) < 1e-9;
    ++tensors;
    if (err > worst) {
      worst = err;
      worst_name = e.name;
    }
  }
  const double elapsed = seconds_since(start);
  v.detail << tensors << " tensors (" << vanishing << " with zero gradient), max rel err " << worst << " (" << worst_name << "), " << elapsed << " s";
  v.require(worst < 1e-4, "rel err < 1e-4");
  v.require(elapsed < 60, "runtime < 60 s");
}

// 3
void tie_topology(Verdict& v) {
  const auto start = Clock::now();
  const Fixture fixture = make_fixture(32, 3);
  const Vocab vocab = fixture.vocab();
  const ModelConfig c = fixture_config(vocab.size());
  const auto examples = encode_examples(fixture.triplets, vocab, c.max_positions);
  std::size_t counts[6];
  std::size_t i = 0;
  for (auto preset : kAllPresets) {
    Model<double> model(c, sharing_preset(preset), 30 + i);
    counts[i] = model.parameters().count_parameters(true);
    const std::string name(preset_name(preset));
    v.require(counts[i] == expected_parameter_count(c, preset), name + " parameter count");
    v.require(tie_group_set(model.parameters()) == expected_tie_groups(c, preset), name + " tie groups");
    v.require(aliasing_probe(model.parameters()), name + " aliasing probe");
    AdamState<double> state;
    optimizer_steps(model, examples, vocab, state, 100);
    v.require(ties_uniform(model.parameters()), name + " uniform after 100 steps");
    v.require(tie_group_set(model.parameters()) == expected_tie_groups(c, preset), name + " tie groups after 100 steps");
    ++i;
  }
  const std::size_t H = c.hidden, F = c.ffn, L = c.layers;
  const std::size_t attn = L * (4 * H * H + 4 * H);
  v.require(counts[0] == counts[1] && counts[1] == counts[2], "untied presets equal size");
  v.require(counts[2] - counts[3] == attn, "SHARED_SA saves L(4H^2+4H)");
  v.require(counts[3] - counts[4] == attn, "SHARED_SA_CA saves L(4H^2+4H)");
  v.require(counts[4] - counts[5] == L * (2 * H * F + F + H), "SHARED_SA_FF saves L(2HF+F+H)");
  const double elapsed = seconds_since(start);
  v.detail << "6 presets, counts";
  for (auto n : counts) v.detail << ' ' << n;
  v.detail << ", " << elapsed << " s";
  v.require(elapsed < 120, "runtime < 2 min");
}

// 4
void init_versus_tying(Verdict& v) {
  const Fixture fixture = make_fixture(32, 4);
  const Vocab vocab = fixture.vocab();
  const ModelConfig c = fixture_config(vocab.size());
  const auto examples = encode_examples(fixture.triplets, vocab, c.max_positions);
  auto ca_matches_sa = [&](const ParameterStore<double>& s) {
    for (std::size_t l = 0; l < c.layers; ++l) {
      for (const char* part : {"query", "key", "value", "output"}) {
        for (const char* kind : {".weight", ".bias"}) {
          const std::string suffix = std::string(part) + kind;
          if (!same_values(s.get(decoder_prefix(l) + "context_attn." + suffix),
                           s.get(encoder_prefix(l) + "self_attn." + suffix)))
            return false;
        }
      }
    }
    return true;
  };
  Model<double> init(c, sharing_preset(SharingPreset::BertDecCaInit), 40);
  v.require(ca_matches_sa(init.parameters()), "BERT_DEC_CA_INIT equal at step 0");
  AdamState<double> a;
  optimizer_steps(init, examples, vocab, a, 1);
  bool all_differ = true;
  for (std::size_t l = 0; l < c.layers; ++l) {
    all_differ = all_differ && !same_values(init.parameters().get(decoder_prefix(l) + "context_attn.query.weight"),
                                            init.parameters().get(encoder_prefix(l) + "self_attn.query.weight"));
  }
  v.require(all_differ, "BERT_DEC_CA_INIT differs after one step");

  Model<double> tied(c, sharing_preset(SharingPreset::SharedSaCa), 41);
  AdamState<double> b;
  bool always = ca_matches_sa(tied.parameters());
  for (int s = 0; s < 50; ++s) {
    optimizer_steps(tied, examples, vocab, b, 1);
    always = always && ca_matches_sa(tied.parameters());
  }
  v.require(always, "SHARED_SA_CA equal through 50 steps");
  v.detail << "copy diverges after 1 step, tie holds for 50";
}

// 5
void causal_masking(Verdict& v) {
  ToyTask task(tiny_config(), SharingPreset::SharedSa, 5);
  std::mt19937_64 rng(50);
  const std::size_t V = task.vocab.size();
  std::size_t compared = 0;
  int bad_trials = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t len = 3 + rng() % 8;
    auto target = task.random_target(rng, len);
    const auto before = task.decoder_logits(target);
    const std::size_t t = rng() % (len - 1);
    for (std::size_t j = t + 1; j < len; ++j) target.input_ids[j] = task.random_word(rng);
    const auto after = task.decoder_logits(target);
    bool same = true;
    for (std::size_t i = 0; i < (t + 1) * V; ++i) same = same && before[i] == after[i];
    compared += (t + 1) * V;
    bad_trials += !same;
  }
  v.detail << "50 trials, " << compared << " logits compared bitwise, " << bad_trials << " mismatching";
  v.require(bad_trials == 0, "bitwise invariance");
}

// 6
void positions_and_segments(Verdict& v) {
  const Vocab vocab = small_vocab(letter_words(10));
  std::mt19937_64 rng(60);
  int good = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto src = random_words(rng, 1, 12, 10), mt = random_words(rng, 1, 12, 10);
    const EncodedPair p = encode_pair(src, mt, vocab, 512);
    std::size_t resets = 0, transitions = 0, reset_at = 0, transition_at = 0;
    bool ok = p.ids.size() == src.size() + mt.size() + 3 && p.positions.front() == 0 &&
              p.segments.front() == Segment::A && p.segments.back() == Segment::B &&
              p.ids.front() == vocab.cls_id() && p.ids[src.size() + 1] == vocab.sep_id() &&
              p.ids.back() == vocab.sep_id();
    for (std::size_t i = 1; i < p.ids.size(); ++i) {
      if (p.positions[i] != p.positions[i - 1] + 1) {
        ++resets;
        reset_at = i;
        ok = ok && p.positions[i] == 0;
      }
      if (p.segments[i] != p.segments[i - 1]) {
        ++transitions;
        transition_at = i;
        ok = ok && p.segments[i - 1] == Segment::A;
      }
    }
    ok = ok && resets == 1 && transitions == 1 && reset_at == transition_at && reset_at == src.size() + 2;
    good += ok;
  }
  v.detail << good << "/20 pairs with one position reset at the single A->B transition";
  v.require(good == 20, "all pairs");
}

// 7
void overfit(Verdict& v) {
  const auto start = Clock::now();
  const Fixture fixture = make_fixture(64, 7);
  const Vocab vocab = fixture.vocab();
  TrainConfig tc;
  tc.max_steps = 2000;
  tc.warmup_steps = 200;
  tc.peak_lr = 2e-3;
  tc.batch_tokens = 256;
  tc.dropout = 0.0;
  tc.label_smoothing = 0.0;
  tc.ema_decay = 0.01;
  tc.checkpoint_interval = 500;
  tc.evaluate_dev = false;
  ModelConfig mc = ModelConfig::toy(vocab.size());
  mc.dropout = tc.dropout;
  Model<float> model(mc, sharing_preset(SharingPreset::SharedSa), 7);
  Checkpoint last;
  TrainOutputs outputs;
  outputs.on_checkpoint = [&](const Checkpoint& c) { last = c; };
  const TrainResult result = train(model, vocab, fixture.triplets, {}, tc, outputs);

  Model<float> ema(mc, sharing_preset(SharingPreset::SharedSa), 0);
  load_parameters(ema.parameters(), last);
  ema.set_training(false);
  const Translations out = translate_corpus(ema, fixture.triplets, vocab, {8, 100});
  std::vector<std::string> refs;
  std::size_t verbatim = 0;
  for (std::size_t i = 0; i < fixture.triplets.size(); ++i) {
    refs.push_back(fixture.triplets[i].pe);
    verbatim += out.outputs[i] == fixture.triplets[i].pe;
  }
  const CorpusScore score = score_segments(out.outputs, refs);
  const double initial = result.losses.front();
  double final_loss = 0;
  for (std::size_t i = result.losses.size() - 100; i < result.losses.size(); ++i) final_loss += result.losses[i] / 100;
  const double elapsed = seconds_since(start);
  char line[256];
  std::snprintf(line, sizeof line,
                "SHARED_SA toy, 2000 steps: train TER %.2f, BLEU %.2f, verbatim %zu/%zu, loss %.3f -> %.3f (%.1f%%), %.0f s",
                score.ter, score.bleu, verbatim, refs.size(), initial, final_loss, 100 * final_loss / initial,
                elapsed);
  v.detail << line;
  v.require(score.ter <= 5.0, "TER <= 5.0");
  v.require(verbatim * 10 >= refs.size() * 9, ">= 90% verbatim");
  v.require(final_loss < 0.1 * initial, "loss < 10% of initial");
  v.require(elapsed < 600, "runtime < 10 min");
}

// 8
void ablation(Verdict& v) {
  const auto start = Clock::now();
  const auto dir = scratch_dir("acceptance-ablate");
  const Fixture fixture = make_fixture(64, 7);
  write_triplets(fixture.triplets, dir / "train.tsv");
  save_vocab(fixture.vocab(), dir / "vocab.txt");
  const std::vector<std::string> args = {
      "apebert", "ablate", "--train", (dir / "train.tsv").string(), "--valid", (dir / "train.tsv").string(),
      "--vocab", (dir / "vocab.txt").string(), "--model-size", "toy", "--max-steps", "400",
      "--warmup-steps", "40", "--peak-lr", "2e-3", "--batch-tokens", "256", "--checkpoint-interval", "200",
      "--ema-decay", "0.01", "--beam", "4", "--max-len", "40"};
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int status = cli_main(static_cast<int>(argv.size()), argv.data(), out, err);
  v.require(status == kExitOk, "exit status 0: " + err.str());

  std::istringstream table(out.str());
  std::string line;
  std::getline(table, line);
  v.require(line == "preset\tdev_ter\tdev_bleu\tinitial_loss\tfinal_loss", "header");
  std::size_t rows = 0;
  double worst_ratio = 0;
  while (std::getline(table, line)) {
    std::istringstream fields(line);
    std::string name, ter_s, bleu_s, init_s, final_s;
    std::getline(fields, name, '\t');
    std::getline(fields, ter_s, '\t');
    std::getline(fields, bleu_s, '\t');
    std::getline(fields, init_s, '\t');
    std::getline(fields, final_s, '\t');
    v.require(rows < kAllPresets.size() && name == preset_name(kAllPresets[rows]), "row order at " + name);
    if (init_s == "FAILED") {
      v.require(false, name + " failed");
    } else {
      const double ratio = std::stod(final_s) / std::stod(init_s);
      worst_ratio = std::max(worst_ratio, ratio);
      v.require(ratio <= 0.5, name + " loss reduced by >= 50%");
      v.detail << name << " " << ter_s << "/" << bleu_s << " loss x" << ratio << "; ";
    }
    ++rows;
  }
  v.require(rows == 6, "6 rows");
  v.detail << rows << " rows, worst final/initial loss " << worst_ratio << ", " << seconds_since(start) << " s";
}

// 9
void metric_oracles(Verdict& v) {
  auto four = [](double x) { return std::round(x * 1e4); };
  std::size_t suite_ok = 0;
  std::vector<Tokens> hyps, refs;
  for (const auto& c : metric_suite()) {
    const auto h = words(c.hyp), r = words(c.ref);
    const double want = static_cast<double>(oracle_min_ter_edits(h, r)) / static_cast<double>(r.size());
    suite_ok += four(ter(h, r)) == four(want) && four(bleu({h}, {r})) == four(oracle_bleu({h}, {r}));
    hyps.push_back(h);
    refs.push_back(r);
  }
  v.require(suite_ok == metric_suite().size(), "20-pair suite");
  v.require(four(bleu(hyps, refs)) == four(oracle_bleu(hyps, refs)), "suite corpus BLEU");
  v.require(four(ter(words("a b c d"), words("a x c d"))) == four(0.25), "substitution example");
  v.require(four(ter(words("c a b"), words("a b c"))) == four(1.0 / 3.0), "shift example");
  const auto clipped = bleu_stats(words("the the the"), words("the cat"));
  v.require(clipped.matches[0] == 1 && clipped.totals[0] == 3 && bleu_score(clipped) == 0.0, "clipped example");

  std::mt19937_64 rng(90);
  std::size_t agree = 0;
  for (int i = 0; i < 200; ++i) {
    const auto h = random_words(rng, 1, 6, 3), r = random_words(rng, 1, 6, 3);
    agree += ter_stats(h, r).edits == oracle_min_ter_edits(h, r);
  }
  v.require(agree >= 180, "greedy agrees on >= 90% of 200");
  v.detail << suite_ok << "/" << metric_suite().size() << " suite pairs to 4 dp, greedy shifts optimal on " << agree
           << "/200";
}

// 10
void beam_optimality(Verdict& v) {
  std::size_t agree = 0;
  for (std::uint64_t m = 0; m < 20; ++m) {
    ToyTask task(tiny_config(7), kAllPresets[m % 6], 1000 + m);
    task.model.set_training(false);
    const auto found = beam_search(task.model, task.pair, task.vocab, {8, 3});
    const auto best = exhaustive_best(task, 3);
    agree += found.best.tokens == best.tokens;
  }
  v.detail << agree << "/20 models, vocab 7, sequences up to 4 tokens with [CLS]";
  v.require(agree == 20, "beam equals exhaustive argmax");
}

// 11
void schedule_exactness(Verdict& v) {
  TrainConfig c;
  v.require(lr_at(0, c) == 0.0, "lr(0) = 0");
  v.require(std::abs(lr_at(2500, c) - 2.5e-5) < 1e-18, "lr(2500)");
  v.require(std::abs(lr_at(5000, c) - 5e-5) < 1e-18, "lr(5000)");
  v.require(lr_at(c.max_steps, c) == 0.0, "lr(max_steps) = 0");
  const double left = c.peak_lr * (c.warmup_steps - 1e-9) / c.warmup_steps;
  v.require(std::abs(lr_at(c.warmup_steps, c) - left) < 1e-15, "continuity at warmup");
  v.require(std::abs(lr_at(c.warmup_steps + 1, c) - lr_at(c.warmup_steps, c)) <= c.peak_lr / (c.max_steps - c.warmup_steps) * (1 + 1e-9),
            "decay step size");

  std::mt19937_64 rng(110);
  ParameterStore<double> store;
  store.add("p", random_tensor({16}, rng), false);
  auto shadow = EmaShadow<double>::from(store);
  const auto s0 = shadow.values[0];
  auto p = store.entries()[0].tensor.mutable_data();
  for (auto& x : p) x = 2.0 * x + 0.5;
  double worst = 0;
  const double delta = 1e-4;
  const int k = 1000;
  for (int i = 0; i < k; ++i) ema_update(shadow, store, delta);
  for (std::size_t j = 0; j < p.size(); ++j)
    worst = std::max(worst, std::abs(shadow.values[0][j] - (p[j] + std::pow(1 - delta, k) * (s0[j] - p[j]))));
  v.require(worst < 1e-12, "EMA closed form");
  v.detail << "lr(0,2500,5000,max) = " << lr_at(0, c) << ", " << lr_at(2500, c) << ", " << lr_at(5000, c) << ", "
           << lr_at(c.max_steps, c) << "; EMA max err " << worst;
}

// 12
void checkpoint_exactness(Verdict& v) {
  const auto dir = scratch_dir("acceptance-ckpt");
  std::size_t ok = 0;
  for (auto preset : kAllPresets) {
    Model<float> model(tiny_config(), sharing_preset(preset), 120);
    const Checkpoint ckpt = snapshot(model.parameters(), 9, model_metadata(model.config(), preset));
    const std::string bytes = serialize_checkpoint(ckpt);
    const auto path = dir / (std::string(preset_name(preset)) + ".bin");
    save_checkpoint(ckpt, path);
    const Checkpoint loaded = load_checkpoint(path);
    Model<float> rebuilt(metadata_model_config(loaded), sharing_preset(metadata_preset(loaded)), 0);
    load_parameters(rebuilt.parameters(), loaded);
    const bool same = serialize_checkpoint(loaded) == bytes &&
                      serialize_checkpoint(snapshot(rebuilt.parameters(), 9, model_metadata(rebuilt.config(), preset))) ==
                          bytes &&
                      tie_group_set(rebuilt.parameters()) == expected_tie_groups(tiny_config(), preset) &&
                      aliasing_probe(rebuilt.parameters());
    v.require(same, std::string(preset_name(preset)));
    ok += same;
  }
  v.detail << ok << "/6 presets reserialize byte-identically with ties rebuilt";
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<int, std::function<void(Verdict&)>>> criteria = {
      {2, gradient_fidelity}, {3, tie_topology},     {4, init_versus_tying}, {5, causal_masking},
      {6, positions_and_segments}, {7, overfit},     {8, ablation},          {9, metric_oracles},
      {10, beam_optimality},  {11, schedule_exactness}, {12, checkpoint_exactness}};
  const int only = argc > 1 ? std::atoi(argv[1]) : 0;
  bool all = true;
  for (const auto& [number, check] : criteria) {
    if (only && number != only) continue;
    Verdict v;
    try {
      check(v);
    } catch (const std::exception& e) {
      v.pass = false;
      v.detail << " exception: " << e.what();
    }
    std::cout << "criterion " << number << ": " << (v.pass ? "PASS" : "FAIL") << "  " << v.detail.str() << std::endl;
    all = all && v.pass;
  }
  return all ? 0 : 1;
}
