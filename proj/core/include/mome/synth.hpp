#pragma once

#include <array>
#include <string>

#include "mome/move.hpp"
#include "mome/rng.hpp"

namespace mome {

enum class TaskGroup { kGeneral = 0, kRec = 1, kReg = 2, kDocument = 3 };
constexpr int kNumGroups = 4;
std::string group_name(int g);        // "General", "REC", "REG", "Document"
std::string group_short_name(int g);  // "Gen", "REC", "REG", "Doc"

// Frozen random linear field mapping a latent subspace into an H x W x C_e
// grid: cell (h, w) sees (B0 + u*B1 + v*B2) z_e with u, v the normalized cell
// coordinates. Bilinear interpolation of this field is exact and
// shape-independent, while pooled bin means shift with the grid shape; that
// contrast is what the deformable path gets to exploit.
struct PseudoEncoder {
  int expert_id = 0;
  int channels = 0;        // C_e
  int subspace_offset = 0; // first latent coordinate this encoder reads
  int subspace_dim = 0;
  bool variable_shape = false;
  int fixed_h = 6, fixed_w = 6;
  std::vector<std::array<int, 2>> shape_pool;  // admissible (H, W) draws
  std::vector<double> b0, b1, b2;              // C_e x subspace_dim each

  std::array<int, 2> draw_shape(Rng& rng) const;
  FeatureMap encode(std::span<const double> latent, int h, int w) const;
};

struct SynthTask {
  int id = 0;
  TaskGroup group = TaskGroup::kGeneral;
  int informative_expert = 0;
  std::vector<double> label_direction;  // unit vector in the expert subspace
  double label_offset = 0.0;
  double label_scale = 1.0;
  std::vector<double> instr_center;  // d_I
  double instr_sigma = 0.5;
  double size_weight = 1.0;  // within-group sampling proportion
};

struct SynthConfig {
  int d_instr = 16;
  int subspace_dim = 8;       // latent dims per encoder
  int n_experts = 3;
  int tasks_per_group = 2;
  int groups = 4;
  double label_noise = 0.1;   // bounded uniform +- this
  double centroid_norm = 10.0;
  double task_jitter = 0.5;
  double instr_sigma = 0.5;
  double group_mean_scale = 2.0;  // latent mean offset per visual cluster
  // Group-conditional label offsets; REC and REG share one informative
  // expert, so their distinct offsets are resolvable only through the
  // instruction-routed language experts.
  std::array<double, 4> group_offsets{0.0, 0.7, -0.7, 0.0};
  std::array<int, 4> informative_expert{0, 1, 1, 2};

  int latent_dim() const { return subspace_dim * n_experts; }
};

struct TaskSuite {
  SynthConfig cfg;
  std::vector<PseudoEncoder> encoders;
  std::vector<SynthTask> tasks;
  std::vector<std::vector<double>> group_centroids;   // instruction space
  std::vector<std::vector<double>> visual_means;      // latent space, per group
  std::vector<int> group_of_task;

  int n_experts() const { return static_cast<int>(encoders.size()); }
};

// Deterministic task-suite generator. Same-group instruction clusters sit at
// least 3x closer to each other than to other groups' clusters by
// construction.
TaskSuite make_tasks(std::uint64_t seed, int groups = 4,
                     int tasks_per_group = 2, SynthConfig cfg = {});

struct Sample {
  int task_id = 0;
  int group = 0;
  std::vector<double> latent;
  std::vector<FeatureMap> features;  // one per encoder
  Tensor instruction;                // d_I constant
  double label = 0.0;
};

// Stratified batch: equal expected per-group counts (exact when batch divides
// evenly; remainder groups drawn without replacement), task within group
// proportional to size_weight.
std::vector<Sample> sample_balanced_batch(const TaskSuite& suite, int batch,
                                          Rng& rng);

// FNV-1a over the batch's task ids and latent bit patterns; equal streams
// across ablation variants certify paired comparisons.
std::uint64_t batch_stream_hash(std::uint64_t h, const std::vector<Sample>& b);

}  // namespace mome
