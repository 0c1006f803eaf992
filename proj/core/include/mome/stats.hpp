#pragma once

#include <map>
#include <string>
#include <vector>

namespace mome {

// Accumulated routing statistics, the data behind expert-load bars and
// importance distributions. Tasks and layers are dense indices; the language
// routers use layer ids >= 0 and the vision router is stored under layer -1.
struct ExpertStats {
  // counts[task][layer][expert]
  std::map<int, std::map<int, std::vector<double>>> counts;
  // Running mean of vision-expert importance per task.
  std::map<int, std::vector<double>> importance_sum;
  std::map<int, long> importance_n;
  std::map<int, long> samples_per_task;

  void add_selection(int task, int layer, int expert, int n_experts);
  void add_importance(int task, const std::vector<double>& imp);
  void add_sample(int task) { samples_per_task[task] += 1; }

  bool empty() const { return counts.empty() && importance_sum.empty(); }
  std::vector<int> layer_ids() const;
  // Normalized selection frequencies for (task, layer); sums to 1.
  std::vector<double> frequencies(int task, int layer) const;
  std::vector<double> mean_importance(int task) const;
};

// Mutual information between two categorical variables from a joint count
// table, normalized by the arithmetic mean of the marginal entropies; 0 when
// either variable is constant, 1 for a bijection between equal-sized
// alphabets.
double normalized_mutual_information(
    const std::vector<std::vector<double>>& joint_counts);

struct SpecializationReport {
  struct LayerTable {
    int layer;
    // rows: task-group, cols: expert; each row sums to 1
    std::vector<std::vector<double>> group_expert_freq;
    double nmi;
  };
  std::vector<LayerTable> layers;
  // Vision-expert importance per group (rows sum to 1).
  std::vector<std::vector<double>> group_importance;
};

// group_of[task] maps task id to group index; n_groups fixes the row count.
SpecializationReport specialization_report(const ExpertStats& stats,
                                           const std::vector<int>& group_of,
                                           int n_groups);

}  // namespace mome
