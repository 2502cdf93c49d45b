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
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "ape/model.hpp"
#include "ape/training.hpp"

namespace ape {

enum class Command { Train, Evaluate, Translate, Ablate, ImportWeights };

// Exit statuses.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumeric = 3;

struct RunConfig {
  Command command = Command::Train;

  std::filesystem::path train;       // training triplets
  std::filesystem::path valid;       // dev triplets
  std::filesystem::path extra;       // large synthetic corpus mixed into train
  std::size_t oversample_factor = 35;  // copies of train mixed with extra
  std::filesystem::path corpus;      // triplets to evaluate or translate
  std::filesystem::path vocab;
  std::filesystem::path checkpoint_dir;
  std::filesystem::path pretrained;  // encoder weights to start from
  std::filesystem::path checkpoint;  // model to evaluate or translate with
  std::filesystem::path output;
  std::filesystem::path hyp, ref;    // evaluate on existing files
  std::filesystem::path dump, mapping;

  std::string model_size = "toy";  // toy | base
  std::optional<std::size_t> layers, hidden, heads, ffn, max_positions;
  std::string preset = "SHARED_SA";
  TrainConfig train_config;
  std::size_t beam = 8;
  std::size_t max_len = 100;
  std::size_t threads = 1;
  std::uint64_t seed = 1;

  // Throws ConfigError for bad combinations, FormatError for missing files.
  void validate() const;
  ModelConfig model_config(std::size_t vocab_size) const;
};

// One row of the ablation table.
struct AblationRow {
  SharingPreset preset;
  bool failed = false;
  std::string error;
  double dev_ter = 0, dev_bleu = 0;
  double initial_loss = 0, final_loss = 0;
};

std::vector<AblationRow> run_ablation(const RunConfig& config, std::ostream& log);
// "preset\tdev_ter\tdev_bleu\tinitial_loss\tfinal_loss" header plus one row
// per preset; failed rows read FAILED.
std::string format_ablation(const std::vector<AblationRow>& rows);

// Parses the command line, with --config supplying defaults. Returns
// nothing after printing help to `out`; throws CLI11 parse errors.
std::optional<RunConfig> parse_command_line(int argc, const char* const* argv, std::ostream& out);

int run(const RunConfig& config, std::ostream& out, std::ostream& err);

// Full entry point: parse, run, map errors to exit statuses.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace ape
