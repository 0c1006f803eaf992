#pragma once

#include <array>
#include <functional>
#include <optional>

#include "mome/model.hpp"
#include "mome/optim.hpp"
#include "mome/stats.hpp"

namespace mome {

struct TrainConfig {
  int stage = 1;
  int steps = 2000;
  int batch = 32;
  int warmup = 100;
  double peak_lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.05;
  double lb_coefficient = 0.01;
  int eval_batches = 8;
  int threads = 1;
  std::uint64_t seed = 0;

  void validate() const;
};

// Streaming hooks for per-sample routing records; unset sinks are skipped.
struct RoutingSinks {
  std::function<void(int step, int task, int layer, int expert,
                     std::span<const double> logits)>
      mole;
  std::function<void(int step, int task, std::span<const double> weights,
                     std::span<const double> importance)>
      move;
};

struct EvalResult {
  std::array<double, 4> group_loss{0, 0, 0, 0};
  double avg_loss = 0.0;
  ExpertStats stats;
  std::vector<double> layer_nmi;  // one per host layer
  SpecializationReport report;
  // PCA payloads: (group, feature-vector) pairs
  std::vector<std::pair<int, std::vector<double>>> vision_features;
  std::vector<std::pair<int, std::vector<double>>> instr_features;
};

struct RunRecord {
  struct CurvePoint {
    int step;
    int group;
    double loss;
  };
  std::vector<CurvePoint> curves;
  EvalResult init_eval;
  EvalResult final_eval;
  std::uint64_t stream_hash = 0;
  bool diverged = false;
  int diverged_step = -1;
  int steps_run = 0;
};

// Fixed-seed evaluation pass (no gradients, no router noise). The eval batch
// stream is forked from the seed so init and final measurements see identical
// data.
EvalResult evaluate(const MomeModel& model, const TaskSuite& suite,
                    std::uint64_t seed, int n_batches, int batch, int step,
                    const RoutingSinks* sinks = nullptr);

// One training stage. Stage 2 callers construct the model via
// make_stage2_model first. Divergence (non-finite loss) aborts with the
// record marked instead of throwing.
RunRecord train(MomeModel& model, const TaskSuite& suite,
                const TrainConfig& cfg, const RoutingSinks* sinks = nullptr);

// ---- ablation grid ---------------------------------------------------------

// Canonical variant list; the first six mirror the transformation /
// aggregation comparison, the rest the language-router comparison.
std::vector<std::string> ablation_variants();

struct AblationResult {
  std::string variant;
  std::array<double, 4> group_loss{0, 0, 0, 0};
  double avg_loss = 0.0;
  std::uint64_t stream_hash = 0;
  RunRecord record;
};

// Runs one named variant with the given base configs; paired runs use the
// same seed so the batch streams hash equal. Stage-2 variants train their
// own stage-1 prerequisite internally.
AblationResult run_ablation(const std::string& variant, const TaskSuite& suite,
                            const ModelConfig& base_model,
                            const TrainConfig& base_train);

}  // namespace mome
