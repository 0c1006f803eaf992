#include "mome/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace mome {

std::string group_name(int g) {
  switch (g) {
    case 0: return "General";
    case 1: return "REC";
    case 2: return "REG";
    case 3: return "Document";
  }
  return "Group" + std::to_string(g);
}

std::string group_short_name(int g) {
  switch (g) {
    case 0: return "Gen";
    case 1: return "REC";
    case 2: return "REG";
    case 3: return "Doc";
  }
  return "G" + std::to_string(g);
}

std::array<int, 2> PseudoEncoder::draw_shape(Rng& rng) const {
  if (!variable_shape || shape_pool.empty()) return {fixed_h, fixed_w};
  return shape_pool[rng.below(shape_pool.size())];
}

FeatureMap PseudoEncoder::encode(std::span<const double> latent, int h,
                                 int w) const {
  std::vector<double> grid(static_cast<std::size_t>(h) * w * channels, 0.0);
  const double* z = latent.data() + subspace_offset;
  for (int hh = 0; hh < h; ++hh) {
    const double u = h == 1 ? 0.5 : static_cast<double>(hh) / (h - 1);
    for (int ww = 0; ww < w; ++ww) {
      const double v = w == 1 ? 0.5 : static_cast<double>(ww) / (w - 1);
      double* cell =
          grid.data() + (static_cast<std::size_t>(hh) * w + ww) * channels;
      for (int c = 0; c < channels; ++c) {
        double acc = 0.0;
        const std::size_t row = static_cast<std::size_t>(c) * subspace_dim;
        for (int d = 0; d < subspace_dim; ++d) {
          acc += (b0[row + d] + u * b1[row + d] + v * b2[row + d]) * z[d];
        }
        cell[c] = acc;
      }
    }
  }
  FeatureMap f;
  f.expert_id = expert_id;
  f.grid = Tensor::from({h, w, channels}, std::move(grid));
  return f;
}

namespace {

std::vector<double> random_unit(int dim, Rng& rng) {
  std::vector<double> v(static_cast<std::size_t>(dim));
  double norm = 0.0;
  for (double& x : v) {
    x = rng.gaussian();
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (double& x : v) x /= norm;
  return v;
}

// Gram-Schmidt family of orthonormal directions.
std::vector<std::vector<double>> orthonormal_set(int count, int dim,
                                                 Rng& rng) {
  std::vector<std::vector<double>> set;
  while (static_cast<int>(set.size()) < count) {
    std::vector<double> v = random_unit(dim, rng);
    for (const auto& u : set) {
      double p = 0.0;
      for (int j = 0; j < dim; ++j) p += v[static_cast<std::size_t>(j)] * u[static_cast<std::size_t>(j)];
      for (int j = 0; j < dim; ++j) v[static_cast<std::size_t>(j)] -= p * u[static_cast<std::size_t>(j)];
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    if (norm < 1e-6) continue;
    norm = std::sqrt(norm);
    for (double& x : v) x /= norm;
    set.push_back(std::move(v));
  }
  return set;
}

}  // namespace

TaskSuite make_tasks(std::uint64_t seed, int groups, int tasks_per_group,
                     SynthConfig cfg) {
  if (tasks_per_group < 1) throw ConfigError("make_tasks: tasks_per_group >= 1");
  if (groups < 1 || groups > kNumGroups) {
    throw ConfigError("make_tasks: groups must be in 1..4");
  }
  cfg.groups = groups;
  cfg.tasks_per_group = tasks_per_group;
  Rng rng(seed);
  Rng enc_rng = rng.fork(1);
  Rng instr_rng = rng.fork(2);
  Rng label_rng = rng.fork(3);

  TaskSuite suite;
  suite.cfg = cfg;

  // Encoders: fixed-shape experts plus one variable-aspect expert standing in
  // for a patch-layout encoder whose grid tracks the input shape.
  const std::array<int, 3> widths{6, 5, 7};
  for (int e = 0; e < cfg.n_experts; ++e) {
    PseudoEncoder enc;
    enc.expert_id = e;
    enc.channels = widths[static_cast<std::size_t>(e % 3)];
    enc.subspace_offset = e * cfg.subspace_dim;
    enc.subspace_dim = cfg.subspace_dim;
    if (e == cfg.n_experts - 1) {
      enc.variable_shape = true;
      for (int h = 3; h <= 10; ++h)
        for (int w = 3; w <= 10; ++w)
          if (h * w >= 24 && h * w <= 48) enc.shape_pool.push_back({h, w});
    } else {
      enc.fixed_h = 6 + e;
      enc.fixed_w = 6 - e;
    }
    const std::size_t n = static_cast<std::size_t>(enc.channels) *
                          static_cast<std::size_t>(cfg.subspace_dim);
    const double sigma = 1.0 / std::sqrt(static_cast<double>(cfg.subspace_dim));
    enc.b0.resize(n);
    enc.b1.resize(n);
    enc.b2.resize(n);
    for (std::size_t i = 0; i < n; ++i) enc.b0[i] = sigma * enc_rng.gaussian();
    for (std::size_t i = 0; i < n; ++i) enc.b1[i] = sigma * enc_rng.gaussian();
    for (std::size_t i = 0; i < n; ++i) enc.b2[i] = sigma * enc_rng.gaussian();
    suite.encoders.push_back(std::move(enc));
  }

  suite.group_centroids = orthonormal_set(groups, cfg.d_instr, instr_rng);
  for (auto& c : suite.group_centroids)
    for (double& x : c) x *= cfg.centroid_norm;

  // Visual cluster means; region-style groups (REC/REG) share one cluster so
  // imagery alone cannot separate them.
  auto vis_dirs = orthonormal_set(groups, cfg.latent_dim(), label_rng);
  suite.visual_means.assign(static_cast<std::size_t>(groups),
                            std::vector<double>(
                                static_cast<std::size_t>(cfg.latent_dim()), 0.0));
  for (int g = 0; g < groups; ++g) {
    const int cluster = (g == 2) ? 1 : g;
    for (int j = 0; j < cfg.latent_dim(); ++j) {
      suite.visual_means[static_cast<std::size_t>(g)][static_cast<std::size_t>(j)] =
          cfg.group_mean_scale *
          vis_dirs[static_cast<std::size_t>(cluster)][static_cast<std::size_t>(j)];
    }
  }

  // One label direction per expert subspace, shared by every task that reads
  // it; group offsets carry the differences a shared readout cannot express.
  std::vector<std::vector<double>> expert_dirs;
  for (int e = 0; e < cfg.n_experts; ++e) {
    expert_dirs.push_back(random_unit(cfg.subspace_dim, label_rng));
  }

  int id = 0;
  for (int g = 0; g < groups; ++g) {
    const int informative = cfg.informative_expert[static_cast<std::size_t>(g)] %
                            cfg.n_experts;
    for (int t = 0; t < tasks_per_group; ++t) {
      SynthTask task;
      task.id = id++;
      task.group = static_cast<TaskGroup>(g);
      task.informative_expert = informative;
      task.label_direction = expert_dirs[static_cast<std::size_t>(informative)];
      task.label_offset = cfg.group_offsets[static_cast<std::size_t>(g)];
      task.label_scale = 1.0;
      task.instr_center = suite.group_centroids[static_cast<std::size_t>(g)];
      for (double& x : task.instr_center) x += cfg.task_jitter * instr_rng.gaussian();
      task.instr_sigma = cfg.instr_sigma;
      task.size_weight = 1.0;
      suite.tasks.push_back(std::move(task));
      suite.group_of_task.push_back(g);
    }
  }
  return suite;
}

std::vector<Sample> sample_balanced_batch(const TaskSuite& suite, int batch,
                                          Rng& rng) {
  const int groups = suite.cfg.groups;
  if (batch < groups) {
    throw ConfigError("sample_balanced_batch: batch " + std::to_string(batch) +
                      " smaller than group count " + std::to_string(groups));
  }
  // Stratified group slots: floor(batch/groups) each, remainder spread over a
  // random subset, then shuffled.
  std::vector<int> slot_group;
  slot_group.reserve(static_cast<std::size_t>(batch));
  for (int g = 0; g < groups; ++g) {
    for (int i = 0; i < batch / groups; ++i) slot_group.push_back(g);
  }
  std::vector<int> order(static_cast<std::size_t>(groups));
  for (int g = 0; g < groups; ++g) order[static_cast<std::size_t>(g)] = g;
  for (int g = groups - 1; g > 0; --g) {
    std::swap(order[static_cast<std::size_t>(g)],
              order[rng.below(static_cast<std::uint64_t>(g + 1))]);
  }
  for (int r = 0; r < batch % groups; ++r) {
    slot_group.push_back(order[static_cast<std::size_t>(r)]);
  }
  for (std::size_t i = slot_group.size(); i > 1; --i) {
    std::swap(slot_group[i - 1], slot_group[rng.below(i)]);
  }

  // Task choice within a group is proportional to size weights.
  std::vector<std::vector<int>> tasks_in_group(static_cast<std::size_t>(groups));
  for (const auto& t : suite.tasks) {
    tasks_in_group[static_cast<std::size_t>(static_cast<int>(t.group))]
        .push_back(t.id);
  }

  std::vector<Sample> out;
  out.reserve(slot_group.size());
  for (int g : slot_group) {
    const auto& candidates = tasks_in_group[static_cast<std::size_t>(g)];
    if (candidates.empty()) {
      throw ConfigError("sample_balanced_batch: group without tasks");
    }
    double total = 0.0;
    for (int tid : candidates)
      total += suite.tasks[static_cast<std::size_t>(tid)].size_weight;
    double pick = rng.uniform() * total;
    int chosen = candidates.back();
    for (int tid : candidates) {
      pick -= suite.tasks[static_cast<std::size_t>(tid)].size_weight;
      if (pick <= 0.0) {
        chosen = tid;
        break;
      }
    }
    const SynthTask& task = suite.tasks[static_cast<std::size_t>(chosen)];

    Sample s;
    s.task_id = task.id;
    s.group = static_cast<int>(task.group);
    s.latent.resize(static_cast<std::size_t>(suite.cfg.latent_dim()));
    const auto& mu = suite.visual_means[static_cast<std::size_t>(s.group)];
    for (std::size_t j = 0; j < s.latent.size(); ++j) {
      s.latent[j] = mu[j] + rng.gaussian();
    }
    for (const auto& enc : suite.encoders) {
      const auto [h, w] = enc.draw_shape(rng);
      s.features.push_back(enc.encode(s.latent, h, w));
    }
    std::vector<double> instr(task.instr_center);
    for (double& x : instr) x += task.instr_sigma * rng.gaussian();
    s.instruction = Tensor::from({suite.cfg.d_instr}, std::move(instr));

    const double* z = s.latent.data() + suite.encoders[static_cast<std::size_t>(
                                            task.informative_expert)]
                                            .subspace_offset;
    double y = 0.0;
    for (int d = 0; d < suite.cfg.subspace_dim; ++d) {
      y += task.label_direction[static_cast<std::size_t>(d)] * z[d];
    }
    y = task.label_scale * y + task.label_offset;
    y += rng.uniform(-suite.cfg.label_noise, suite.cfg.label_noise);
    s.label = y;
    out.push_back(std::move(s));
  }
  return out;
}

std::uint64_t batch_stream_hash(std::uint64_t h, const std::vector<Sample>& b) {
  if (h == 0) h = 1469598103934665603ull;  // FNV offset basis
  auto mix = [&h](const void* data, std::size_t n) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& s : b) {
    mix(&s.task_id, sizeof(s.task_id));
    mix(s.latent.data(), s.latent.size() * sizeof(double));
    mix(&s.label, sizeof(s.label));
  }
  return h;
}

}  // namespace mome
