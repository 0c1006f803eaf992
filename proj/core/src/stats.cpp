#include "mome/stats.hpp"

#include <algorithm>
#include <cmath>

#include "mome/tensor.hpp"

namespace mome {

void ExpertStats::add_selection(int task, int layer, int expert,
                                int n_experts) {
  auto& row = counts[task][layer];
  if (row.empty()) row.assign(static_cast<std::size_t>(n_experts), 0.0);
  if (expert < 0 || expert >= static_cast<int>(row.size())) {
    throw ContractError("expert index out of range in stats");
  }
  row[static_cast<std::size_t>(expert)] += 1.0;
}

void ExpertStats::add_importance(int task, const std::vector<double>& imp) {
  auto& acc = importance_sum[task];
  if (acc.empty()) acc.assign(imp.size(), 0.0);
  if (acc.size() != imp.size()) {
    throw ContractError("importance vector length changed mid-run");
  }
  for (std::size_t i = 0; i < imp.size(); ++i) acc[i] += imp[i];
  importance_n[task] += 1;
}

std::vector<int> ExpertStats::layer_ids() const {
  std::vector<int> ids;
  for (const auto& [task, layers] : counts) {
    for (const auto& [layer, _] : layers) {
      bool seen = false;
      for (int known : ids) seen |= known == layer;
      if (!seen) ids.push_back(layer);
    }
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::vector<double> ExpertStats::frequencies(int task, int layer) const {
  auto ti = counts.find(task);
  if (ti == counts.end()) return {};
  auto li = ti->second.find(layer);
  if (li == ti->second.end()) return {};
  std::vector<double> f = li->second;
  double total = 0.0;
  for (double v : f) total += v;
  if (total > 0.0) {
    for (double& v : f) v /= total;
  }
  return f;
}

std::vector<double> ExpertStats::mean_importance(int task) const {
  auto it = importance_sum.find(task);
  if (it == importance_sum.end()) return {};
  std::vector<double> m = it->second;
  const double n = static_cast<double>(importance_n.at(task));
  for (double& v : m) v /= n;
  return m;
}

double normalized_mutual_information(
    const std::vector<std::vector<double>>& joint_counts) {
  const std::size_t rows = joint_counts.size();
  if (rows == 0) return 0.0;
  const std::size_t cols = joint_counts.front().size();
  double total = 0.0;
  std::vector<double> pr(rows, 0.0), pc(cols, 0.0);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      pr[i] += joint_counts[i][j];
      pc[j] += joint_counts[i][j];
      total += joint_counts[i][j];
    }
  }
  if (total <= 0.0) return 0.0;
  double hr = 0.0, hc = 0.0, mi = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    const double p = pr[i] / total;
    if (p > 0.0) hr -= p * std::log2(p);
  }
  for (std::size_t j = 0; j < cols; ++j) {
    const double p = pc[j] / total;
    if (p > 0.0) hc -= p * std::log2(p);
  }
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      const double p = joint_counts[i][j] / total;
      if (p > 0.0) {
        mi += p * std::log2(p / ((pr[i] / total) * (pc[j] / total)));
      }
    }
  }
  const double denom = 0.5 * (hr + hc);
  if (denom <= 0.0) return 0.0;
  return mi / denom;
}

SpecializationReport specialization_report(const ExpertStats& stats,
                                           const std::vector<int>& group_of,
                                           int n_groups) {
  if (stats.empty()) throw ContractError("specialization_report: empty stats");
  SpecializationReport rep;

  for (int layer : stats.layer_ids()) {
    if (layer < 0) continue;  // vision router reported via importance
    // Aggregate counts to group x expert.
    std::size_t n_experts = 0;
    for (const auto& [task, layers] : stats.counts) {
      auto it = layers.find(layer);
      if (it != layers.end()) n_experts = std::max(n_experts, it->second.size());
    }
    std::vector<std::vector<double>> joint(
        static_cast<std::size_t>(n_groups),
        std::vector<double>(n_experts, 0.0));
    for (const auto& [task, layers] : stats.counts) {
      auto it = layers.find(layer);
      if (it == layers.end()) continue;
      const int g = group_of.at(static_cast<std::size_t>(task));
      for (std::size_t e = 0; e < it->second.size(); ++e) {
        joint[static_cast<std::size_t>(g)][e] += it->second[e];
      }
    }
    SpecializationReport::LayerTable table;
    table.layer = layer;
    table.nmi = normalized_mutual_information(joint);
    table.group_expert_freq = joint;
    for (auto& row : table.group_expert_freq) {
      double tot = 0.0;
      for (double v : row) tot += v;
      if (tot > 0.0)
        for (double& v : row) v /= tot;
    }
    rep.layers.push_back(std::move(table));
  }

  // Group-level mean importance.
  std::size_t n_vis = 0;
  for (const auto& [task, acc] : stats.importance_sum)
    n_vis = std::max(n_vis, acc.size());
  if (n_vis > 0) {
    rep.group_importance.assign(static_cast<std::size_t>(n_groups),
                                std::vector<double>(n_vis, 0.0));
    std::vector<double> group_n(static_cast<std::size_t>(n_groups), 0.0);
    for (const auto& [task, acc] : stats.importance_sum) {
      const int g = group_of.at(static_cast<std::size_t>(task));
      const double n = static_cast<double>(stats.importance_n.at(task));
      for (std::size_t e = 0; e < acc.size(); ++e)
        rep.group_importance[static_cast<std::size_t>(g)][e] += acc[e];
      group_n[static_cast<std::size_t>(g)] += n;
    }
    for (std::size_t g = 0; g < rep.group_importance.size(); ++g) {
      if (group_n[g] > 0.0)
        for (double& v : rep.group_importance[g]) v /= group_n[g];
    }
  }
  return rep;
}

}  // namespace mome
