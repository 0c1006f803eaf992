#pragma once

#include <filesystem>
#include <string>

#include "mome/model.hpp"
#include "mome/synth.hpp"
#include "mome/train.hpp"

namespace mome {

// One JSON document drives a run: seed, model, data, train, output_dir.
// Unknown keys are rejected; every field has a default. Environment
// variables with the flat MOME_ prefix override dotted paths
// (MOME_TRAIN_STEPS -> train.steps, MOME_SEED -> seed).
struct ExperimentConfig {
  std::uint64_t seed = 42;
  std::string output_dir = "runs/out";
  ModelConfig model;
  SynthConfig data;
  TrainConfig train;
  std::string stage1_checkpoint;  // required when train.stage == 2
  int ablation_seeds = 3;

  static ExperimentConfig defaults();
  static ExperimentConfig from_json_text(const std::string& text);
  static ExperimentConfig load(const std::filesystem::path& path,
                               bool apply_env = true);
  void apply_env_overrides();
  std::string to_json_text() const;  // full snapshot including defaults
};

}  // namespace mome
