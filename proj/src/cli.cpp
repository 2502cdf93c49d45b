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
#include "ape/cli.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "CLI11.hpp"

#include "ape/checkpoint.hpp"
#include "ape/decoding.hpp"
#include "ape/errors.hpp"
#include "ape/metrics.hpp"

namespace ape {

namespace fs = std::filesystem;

namespace {

void require_file(const fs::path& path, const char* what) {
  if (path.empty()) throw ConfigError(std::string("--") + what + " is required");
  if (!fs::exists(path)) throw FormatError(std::string(what) + " file not found: " + path.string());
}

void require_value(const fs::path& path, const char* what) {
  if (path.empty()) throw ConfigError(std::string("--") + what + " is required");
}

std::string two_decimals(double value) {
  if (std::isnan(value)) return "nan";
  char buffer[32];
  std::snprintf(buffer, sizeof buffer, "%.2f", value);
  return buffer;
}

double tail_mean(const std::vector<double>& losses) {
  const std::size_t n = std::max<std::size_t>(1, losses.size() / 10);
  double total = 0;
  for (std::size_t i = losses.size() - n; i < losses.size(); ++i) total += losses[i];
  return total / static_cast<double>(n);
}

Model<float> model_from_checkpoint(const Checkpoint& checkpoint, const Vocab& vocab) {
  const ModelConfig mc = metadata_model_config(checkpoint);
  if (mc.vocab_size != vocab.size()) {
    throw DimensionError("checkpoint expects " + std::to_string(mc.vocab_size) +
                         " vocabulary entries, vocab file has " + std::to_string(vocab.size()));
  }
  Model<float> model(mc, sharing_preset(metadata_preset(checkpoint)), 0);
  load_parameters(model.parameters(), checkpoint);
  model.set_training(false);
  return model;
}

struct TrainedPreset {
  TrainResult result;
  std::optional<std::size_t> best;
};

TrainedPreset train_preset(const RunConfig& config, SharingPreset preset, const Vocab& vocab,
                           const fs::path& checkpoint_dir, bool require_dev) {
  const ModelConfig mc = config.model_config(vocab.size());
  std::optional<Checkpoint> pretrained;
  if (!config.pretrained.empty()) pretrained = load_checkpoint(config.pretrained);
  Model<float> model(mc, sharing_preset(preset), config.seed, pretrained ? &*pretrained : nullptr);

  std::vector<Triplet> train_set = read_triplets(config.train);
  if (!config.extra.empty()) {
    train_set = oversample_mix(train_set, read_triplets(config.extra), config.oversample_factor,
                               config.seed);
  }
  std::vector<Triplet> dev_set;
  if (!config.valid.empty()) dev_set = read_triplets(config.valid);
  if (require_dev && dev_set.empty()) throw ConfigError("a dev corpus (--valid) is required");

  TrainConfig tc = config.train_config;
  tc.seed = config.seed;
  tc.eval_beam = config.beam;
  tc.eval_max_len = config.max_len;
  TrainOutputs outputs;
  outputs.checkpoint_dir = checkpoint_dir;
  if (!checkpoint_dir.empty()) outputs.metric_log = checkpoint_dir / "metrics.tsv";
  outputs.config_echo = model_metadata(mc, preset);

  TrainedPreset trained;
  trained.result = train(model, vocab, train_set, dev_set, tc, outputs);
  const auto& records = trained.result.checkpoints;
  if (!records.empty()) {
    trained.best = dev_set.empty() || !tc.evaluate_dev ? records.size() - 1 : select_best(records);
  }
  return trained;
}

int run_train(const RunConfig& config, std::ostream& out, std::ostream& err) {
  const Vocab vocab = load_vocab(config.vocab);
  TrainedPreset trained =
      train_preset(config, parse_preset(config.preset), vocab, config.checkpoint_dir, false);
  const auto& r = trained.result;
  if (!r.skipped.empty()) err << r.skipped.size() << " training items exceed the position table\n";
  out << "steps\t" << r.losses.size() << "\n";
  if (!r.losses.empty()) out << "final_loss\t" << r.losses.back() << "\n";
  if (!trained.best) {
    err << "no checkpoint written: max_steps is below the checkpoint interval\n";
    return kExitOk;
  }
  const CheckpointRecord& best = r.checkpoints[*trained.best];
  const fs::path best_path = config.checkpoint_dir / "best.bin";
  fs::copy_file(best.file, best_path, fs::copy_options::overwrite_existing);
  out << "best\t" << best_path.string() << "\tstep " << best.step << "\tTER "
      << two_decimals(best.dev_ter) << "\tBLEU " << two_decimals(best.dev_bleu) << "\n";
  return kExitOk;
}

void emit(const std::string& text, const RunConfig& config, std::ostream& out) {
  if (config.output.empty()) {
    out << text;
    return;
  }
  std::ofstream file(config.output);
  if (!file) throw FormatError("cannot write " + config.output.string());
  file << text;
}

int run_evaluate(const RunConfig& config, std::ostream& out, std::ostream& err) {
  CorpusScore score;
  if (!config.hyp.empty()) {
    score = score_corpus(config.hyp, config.ref);
  } else {
    const Vocab vocab = load_vocab(config.vocab);
    Model<float> model = model_from_checkpoint(load_checkpoint(config.checkpoint), vocab);
    const auto corpus = read_triplets(config.corpus);
    const Translations t =
        translate_corpus(model, corpus, vocab, {config.beam, config.max_len}, config.threads);
    for (std::size_t k = 0; k < t.failed.size(); ++k) {
      err << "item " << t.failed[k] + 1 << ": " << t.errors[k] << "\n";
    }
    std::vector<std::string> refs;
    for (const auto& item : corpus) refs.push_back(item.pe);
    score = score_segments(t.outputs, refs);
  }
  emit(format_report(score), config, out);
  return kExitOk;
}

int run_translate(const RunConfig& config, std::ostream& out, std::ostream& err) {
  const Vocab vocab = load_vocab(config.vocab);
  Model<float> model = model_from_checkpoint(load_checkpoint(config.checkpoint), vocab);
  const auto corpus = read_triplets(config.corpus);
  const Translations t =
      translate_corpus(model, corpus, vocab, {config.beam, config.max_len}, config.threads);
  for (std::size_t k = 0; k < t.failed.size(); ++k) {
    err << "item " << t.failed[k] + 1 << ": " << t.errors[k] << "\n";
  }
  std::string text;
  for (const auto& line : t.outputs) text += line + "\n";
  emit(text, config, out);
  return kExitOk;
}

int run_import(const RunConfig& config, std::ostream& out, std::ostream& err) {
  const Vocab vocab = load_vocab(config.vocab);
  std::vector<std::string> unused;
  const Checkpoint checkpoint = import_weights(read_flat_dump(config.dump),
                                               read_name_mapping(config.mapping),
                                               config.model_config(vocab.size()), &unused);
  save_checkpoint(checkpoint, config.output);
  for (const auto& name : unused) err << "unmapped tensor ignored: " << name << "\n";
  out << "wrote " << checkpoint.tensors.size() << " tensors to " << config.output.string() << "\n";
  return kExitOk;
}

}  // namespace

void RunConfig::validate() const {
  parse_preset(preset);
  if (model_size != "toy" && model_size != "base") throw ConfigError("--model-size must be toy or base");
  if (beam == 0) throw ConfigError("--beam must be at least 1");
  if (max_len == 0) throw ConfigError("--max-len must be at least 1");
  if (threads == 0) throw ConfigError("--threads must be at least 1");
  if (oversample_factor == 0) throw ConfigError("--oversample-factor must be at least 1");
  switch (command) {
    case Command::Train:
      require_file(vocab, "vocab");
      require_file(train, "train");
      if (!valid.empty()) require_file(valid, "valid");
      if (!extra.empty()) require_file(extra, "extra");
      if (!pretrained.empty()) require_file(pretrained, "pretrained");
      require_value(checkpoint_dir, "checkpoint-dir");
      train_config.validate();
      break;
    case Command::Ablate:
      require_file(vocab, "vocab");
      require_file(train, "train");
      require_file(valid, "valid");
      if (!pretrained.empty()) require_file(pretrained, "pretrained");
      train_config.validate();
      break;
    case Command::Evaluate:
      if (!hyp.empty() || !ref.empty()) {
        require_file(hyp, "hyp");
        require_file(ref, "ref");
      } else {
        require_file(vocab, "vocab");
        require_file(checkpoint, "checkpoint");
        require_file(corpus, "corpus");
      }
      break;
    case Command::Translate:
      require_file(vocab, "vocab");
      require_file(checkpoint, "checkpoint");
      require_file(corpus, "corpus");
      break;
    case Command::ImportWeights:
      require_file(vocab, "vocab");
      require_file(dump, "dump");
      require_file(mapping, "mapping");
      require_value(output, "output");
      break;
  }
}

ModelConfig RunConfig::model_config(std::size_t vocab_size) const {
  ModelConfig mc = model_size == "base" ? ModelConfig::base(vocab_size) : ModelConfig::toy(vocab_size);
  if (layers) mc.layers = *layers;
  if (hidden) mc.hidden = *hidden;
  if (heads) mc.heads = *heads;
  if (ffn) mc.ffn = *ffn;
  if (max_positions) mc.max_positions = *max_positions;
  mc.dropout = train_config.dropout;
  mc.validate();
  return mc;
}

std::vector<AblationRow> run_ablation(const RunConfig& config, std::ostream& log) {
  const Vocab vocab = load_vocab(config.vocab);
  std::vector<AblationRow> rows;
  for (SharingPreset preset : kAllPresets) {
    AblationRow row;
    row.preset = preset;
    try {
      fs::path dir;
      if (!config.checkpoint_dir.empty()) dir = config.checkpoint_dir / std::string(preset_name(preset));
      TrainedPreset trained = train_preset(config, preset, vocab, dir, true);
      const auto& r = trained.result;
      if (!trained.best) throw ConfigError("max_steps is below the checkpoint interval");
      const CheckpointRecord& best = r.checkpoints[*trained.best];
      row.dev_ter = best.dev_ter;
      row.dev_bleu = best.dev_bleu;
      row.initial_loss = r.losses.front();
      row.final_loss = tail_mean(r.losses);
    } catch (const std::exception& e) {
      row.failed = true;
      row.error = e.what();
      log << preset_name(preset) << " failed: " << e.what() << "\n";
    }
    rows.push_back(row);
  }
  return rows;
}

std::string format_ablation(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out << "preset\tdev_ter\tdev_bleu\tinitial_loss\tfinal_loss\n";
  for (const auto& row : rows) {
    out << preset_name(row.preset);
    if (row.failed) {
      out << "\tFAILED\tFAILED\tFAILED\tFAILED\n";
      continue;
    }
    char losses[64];
    std::snprintf(losses, sizeof losses, "%.4f\t%.4f", row.initial_loss, row.final_loss);
    out << '\t' << two_decimals(row.dev_ter) << '\t' << two_decimals(row.dev_bleu) << '\t'
        << losses << '\n';
  }
  return out.str();
}

std::optional<RunConfig> parse_command_line(int argc, const char* const* argv, std::ostream& out) {
  RunConfig c;
  TrainConfig& t = c.train_config;
  CLI::App app("BERT-based automatic post-editing", "apebert");
  app.set_config("--config", "", "TOML file whose keys match the long option names");
  app.fallthrough();
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train", "train a model, keeping EMA checkpoints");
  auto* evaluate = app.add_subcommand("evaluate", "TER/BLEU of a checkpoint or of a hypothesis file");
  auto* translate = app.add_subcommand("translate", "post-edit a corpus with a checkpoint");
  auto* ablate = app.add_subcommand("ablate", "train every sharing preset and tabulate dev scores");
  auto* import = app.add_subcommand("import-weights", "convert a flat tensor dump into a checkpoint");

  app.add_option("--train", c.train, "training triplets (src<TAB>mt<TAB>pe)");
  app.add_option("--valid", c.valid, "dev triplets");
  app.add_option("--extra", c.extra, "synthetic triplets mixed with the oversampled --train data");
  app.add_option("--oversample-factor", c.oversample_factor)->capture_default_str();
  app.add_option("--corpus", c.corpus, "triplets to evaluate or translate");
  app.add_option("--vocab", c.vocab, "WordPiece vocabulary, one token per line");
  app.add_option("--checkpoint-dir", c.checkpoint_dir);
  app.add_option("--pretrained", c.pretrained, "checkpoint with embedding and encoder weights");
  app.add_option("--checkpoint", c.checkpoint);
  app.add_option("--output", c.output);
  app.add_option("--hyp", c.hyp);
  app.add_option("--ref", c.ref);
  app.add_option("--dump", c.dump, "flat tensor dump for import-weights");
  app.add_option("--mapping", c.mapping, "external-to-internal name mapping");

  app.add_option("--model-size", c.model_size, "toy or base")->capture_default_str();
  app.add_option("--layers", c.layers);
  app.add_option("--hidden", c.hidden);
  app.add_option("--heads", c.heads);
  app.add_option("--ffn", c.ffn);
  app.add_option("--max-positions", c.max_positions);
  app.add_option("--preset", c.preset, "decoder sharing preset")->capture_default_str();

  app.add_option("--warmup-steps", t.warmup_steps)->capture_default_str();
  app.add_option("--peak-lr", t.peak_lr)->capture_default_str();
  app.add_option("--max-steps", t.max_steps)->capture_default_str();
  app.add_option("--weight-decay", t.weight_decay)->capture_default_str();
  app.add_option("--dropout", t.dropout)->capture_default_str();
  app.add_option("--label-smoothing", t.label_smoothing)->capture_default_str();
  app.add_option("--batch-tokens", t.batch_tokens)->capture_default_str();
  app.add_option("--checkpoint-interval", t.checkpoint_interval)->capture_default_str();
  app.add_option("--ema-decay", t.ema_decay)->capture_default_str();
  app.add_option("--accumulation", t.accumulation)->capture_default_str();
  app.add_flag("!--no-dev-eval", t.evaluate_dev, "skip dev decoding at checkpoints");
  app.add_option("--beam", c.beam)->capture_default_str();
  app.add_option("--max-len", c.max_len)->capture_default_str();
  app.add_option("--threads", c.threads)->capture_default_str();
  app.add_option("--seed", c.seed)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return std::nullopt;
  }
  if (train->parsed()) c.command = Command::Train;
  if (evaluate->parsed()) c.command = Command::Evaluate;
  if (translate->parsed()) c.command = Command::Translate;
  if (ablate->parsed()) c.command = Command::Ablate;
  if (import->parsed()) c.command = Command::ImportWeights;
  return c;
}

int run(const RunConfig& config, std::ostream& out, std::ostream& err) {
  config.validate();
  switch (config.command) {
    case Command::Train:
      return run_train(config, out, err);
    case Command::Evaluate:
      return run_evaluate(config, out, err);
    case Command::Translate:
      return run_translate(config, out, err);
    case Command::ImportWeights:
      return run_import(config, out, err);
    case Command::Ablate: {
      const auto rows = run_ablation(config, err);
      emit(format_ablation(rows), config, out);
      return kExitOk;
    }
  }
  return kExitUsage;
}

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  std::optional<RunConfig> config;
  try {
    config = parse_command_line(argc, argv, out);
    if (!config) return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "apebert: " << e.what() << "\n";
    return kExitUsage;
  }
  try {
    return run(*config, out, err);
  } catch (const ConfigError& e) {
    err << "apebert: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ParameterError& e) {
    err << "apebert: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericError& e) {
    err << "apebert: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "apebert: " << e.what() << "\n";
    return kExitData;
  }
}

}  // namespace ape
