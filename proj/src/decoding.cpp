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
#include "ape/decoding.hpp"

#include <algorithm>
#include <atomic>
#include <thread>

#include "ape/errors.hpp"

namespace ape {

bool emittable(TokenId id, const Vocab& vocab) {
  return id == vocab.sep_id() || !vocab.is_reserved(id);
}

namespace {

template <typename T>
struct LiveHypothesis {
  Hypothesis hyp;
  DecoderState<T> state;
  std::vector<double> next;  // log-probabilities of the following token
};

struct Candidate {
  double log_prob;
  std::size_t parent;
  TokenId token;
};

}  // namespace

template <typename T>
BeamResult beam_search(Model<T>& model, const EncodedPair& pair, const Vocab& vocab,
                       const BeamOptions& options) {
  if (options.beam < 1) throw ParameterError("beam size must be at least 1");
  if (options.max_len < 1) throw ParameterError("max_len must be at least 1");
  NoGradGuard no_grad;
  const std::size_t max_len = std::min(options.max_len, model.config().max_positions);
  const ContextCache<T> context = model.prepare_context(model.encode(SequenceBatch::single(pair)));

  std::vector<TokenId> allowed;
  for (std::size_t id = 0; id < vocab.size(); ++id) {
    if (emittable(static_cast<TokenId>(id), vocab)) allowed.push_back(static_cast<TokenId>(id));
  }

  BeamResult result;
  std::vector<LiveHypothesis<T>> live(1);
  live[0].hyp.tokens = {vocab.cls_id()};
  live[0].state = model.start_state();
  {
    const auto logits = model.step(context, live[0].state, vocab.cls_id(), 0);
    live[0].next = log_softmax_row<T>(logits);
  }

  for (std::size_t t = 1; t <= max_len && !live.empty(); ++t) {
    std::vector<Candidate> candidates;
    candidates.reserve(live.size() * allowed.size());
    for (std::size_t i = 0; i < live.size(); ++i) {
      for (TokenId w : allowed) candidates.push_back({live[i].hyp.log_prob + live[i].next[w], i, w});
    }
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Candidate& a, const Candidate& b) { return a.log_prob > b.log_prob; });
    if (candidates.size() > options.beam) candidates.resize(options.beam);

    std::vector<LiveHypothesis<T>> next_live;
    for (const Candidate& c : candidates) {
      const LiveHypothesis<T>& parent = live[c.parent];
      Hypothesis hyp = parent.hyp;
      hyp.tokens.push_back(c.token);
      hyp.log_prob = c.log_prob;
      if (c.token == vocab.sep_id() || t == max_len) {
        hyp.finished = true;
        result.completed.push_back(std::move(hyp));
        continue;
      }
      LiveHypothesis<T> child{std::move(hyp), parent.state, {}};
      const auto logits =
          model.step(context, child.state, c.token, static_cast<std::int32_t>(t));
      child.next = log_softmax_row<T>(logits);
      next_live.push_back(std::move(child));
    }
    live = std::move(next_live);

    // A live hypothesis can at best keep its log-probability while growing
    // to max_len tokens.
    if (!live.empty() && result.completed.size() >= options.beam) {
      double bound = -1e300;
      for (const auto& l : live) bound = std::max(bound, l.hyp.log_prob / static_cast<double>(max_len));
      std::size_t safe = 0;
      for (const auto& h : result.completed) safe += h.score() >= bound ? 1 : 0;
      if (safe >= options.beam) break;
    }
  }

  std::size_t best = 0;
  for (std::size_t i = 1; i < result.completed.size(); ++i) {
    if (result.completed[i].score() > result.completed[best].score()) best = i;
  }
  result.best = result.completed[best];
  for (std::size_t i = 1; i < result.best.tokens.size(); ++i) {
    if (result.best.tokens[i] != vocab.sep_id()) result.output.push_back(result.best.tokens[i]);
  }
  return result;
}

template <typename T>
Translations translate_corpus(Model<T>& model, const std::vector<Triplet>& triplets,
                              const Vocab& vocab, const BeamOptions& options,
                              std::size_t threads) {
  if (model.training()) throw ConfigError("translate_corpus needs the model in eval mode");
  Translations out;
  out.outputs.assign(triplets.size(), "");
  std::vector<std::string> errors(triplets.size());
  std::atomic<std::size_t> next{0};

  auto worker = [&] {
    for (std::size_t i = next++; i < triplets.size(); i = next++) {
      try {
        const auto src = wordpiece_tokenize(triplets[i].src, vocab);
        const auto mt = wordpiece_tokenize(triplets[i].mt, vocab);
        const EncodedPair pair = encode_pair(src, mt, vocab, model.config().max_positions);
        out.outputs[i] = detokenize(beam_search(model, pair, vocab, options).output, vocab);
      } catch (const LengthError& e) {
        errors[i] = e.what();
      }
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, triplets.size()));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t k = 0; k < threads; ++k) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (std::size_t i = 0; i < triplets.size(); ++i) {
    if (!errors[i].empty()) {
      out.failed.push_back(i);
      out.errors.push_back(std::move(errors[i]));
    }
  }
  return out;
}

template BeamResult beam_search(Model<float>&, const EncodedPair&, const Vocab&, const BeamOptions&);
template BeamResult beam_search(Model<double>&, const EncodedPair&, const Vocab&, const BeamOptions&);
template Translations translate_corpus(Model<float>&, const std::vector<Triplet>&, const Vocab&,
                                       const BeamOptions&, std::size_t);
template Translations translate_corpus(Model<double>&, const std::vector<Triplet>&, const Vocab&,
                                       const BeamOptions&, std::size_t);

}  // namespace ape
