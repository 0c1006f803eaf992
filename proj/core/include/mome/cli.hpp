#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mome/config.hpp"

namespace mome::cli {

// Exit-code taxonomy: 0 ok, 2 config error, 3 numeric failure, 4
// missing/empty data.
inline constexpr int kOk = 0;
inline constexpr int kConfigError = 2;
inline constexpr int kNumericError = 3;
inline constexpr int kNoData = 4;

struct CommonFlags {
  std::optional<std::string> out;      // overrides config output_dir
  std::optional<std::uint64_t> seed;   // overrides config seed
};

// Runs one training stage from a config file and writes the run directory:
// config.json snapshot, curves.csv, routing.jsonl, importance.jsonl,
// checkpoint.mome, final.json, feature CSVs, run_meta.json (the only file
// with a timestamp).
int cmd_train(const std::string& config_path, const CommonFlags& flags);

// Runs the named variants (default: the full grid) over paired seeds and
// writes ablate.csv with columns variant,Gen,REC,REG,Doc,Avg.
int cmd_ablate(const std::string& config_path,
               const std::vector<std::string>& variants,
               const CommonFlags& flags);

// Recomputes per-layer task x expert frequency tables, the importance
// matrix, and per-layer NMI from a run directory's JSONL streams.
int cmd_stats(const std::string& run_dir);

// Projects cached features ("vision" or "instruction") to 2-D principal
// components and writes pca_<modality>.csv (task_group,pc1,pc2).
int cmd_pca(const std::string& run_dir, const std::string& modality);

}  // namespace mome::cli
