#include "mome/train.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <thread>

#include "mome/serialize.hpp"

namespace mome {

void TrainConfig::validate() const {
  if (steps < 0) throw ConfigError("train: steps must be >= 0");
  if (batch < 1) throw ConfigError("train: batch must be >= 1");
  if (warmup > std::max(steps, 1)) {
    throw ConfigError("train: warmup exceeds step budget");
  }
  if (threads < 1) throw ConfigError("train: threads must be >= 1");
  if (stage != 1 && stage != 2) throw ConfigError("train: stage must be 1 or 2");
}

namespace {

void record_trace(const ForwardTrace& trace, int step, int task,
                  ExpertStats* stats, const RoutingSinks* sinks) {
  if (stats) {
    stats->add_sample(task);
    if (!trace.importance.empty()) {
      stats->add_importance(task, trace.importance);
    }
    if (!trace.vision_weights.empty()) {
      int best = 0;
      for (std::size_t e = 1; e < trace.vision_weights.size(); ++e) {
        if (trace.vision_weights[e] > trace.vision_weights[static_cast<std::size_t>(best)]) {
          best = static_cast<int>(e);
        }
      }
      stats->add_selection(task, -1, best,
                           static_cast<int>(trace.vision_weights.size()));
    }
    for (std::size_t l = 0; l < trace.mole_layers.size(); ++l) {
      const MoleTrace& mt = trace.mole_layers[l];
      const int n = static_cast<int>(mt.exec_counts.size());
      for (int sel : mt.selections) {
        stats->add_selection(task, static_cast<int>(l), sel, n);
      }
    }
  }
  if (sinks) {
    if (sinks->move && !trace.vision_weights.empty()) {
      sinks->move(step, task, trace.vision_weights, trace.importance);
    }
    if (sinks->mole) {
      for (std::size_t l = 0; l < trace.mole_layers.size(); ++l) {
        const MoleTrace& mt = trace.mole_layers[l];
        for (std::size_t u = 0; u < mt.selections.size(); ++u) {
          sinks->mole(step, task, static_cast<int>(l), mt.selections[u],
                      mt.logits[u]);
        }
      }
    }
  }
}

}  // namespace

EvalResult evaluate(const MomeModel& model, const TaskSuite& suite,
                    std::uint64_t seed, int n_batches, int batch, int step,
                    const RoutingSinks* sinks) {
  Rng eval_rng = Rng(seed).fork(0xe7a1);
  EvalResult res;
  std::array<double, 4> loss_sum{0, 0, 0, 0};
  std::array<long, 4> loss_n{0, 0, 0, 0};
  for (int b = 0; b < n_batches; ++b) {
    const auto samples = sample_balanced_batch(suite, batch, eval_rng);
    for (const auto& s : samples) {
      ForwardTrace trace;
      const Tensor pred = model_forward(model, s, nullptr, &trace);
      const double d = pred.item() - s.label;
      loss_sum[static_cast<std::size_t>(s.group)] += d * d;
      loss_n[static_cast<std::size_t>(s.group)] += 1;
      record_trace(trace, step, s.task_id, &res.stats, sinks);
      res.vision_features.emplace_back(s.group, trace.pooled_encoder_features);
      res.instr_features.emplace_back(
          s.group, std::vector<double>(s.instruction.values().begin(),
                                       s.instruction.values().end()));
    }
  }
  double total = 0.0;
  int groups_seen = 0;
  for (std::size_t g = 0; g < 4; ++g) {
    if (loss_n[g] > 0) {
      res.group_loss[g] = loss_sum[g] / static_cast<double>(loss_n[g]);
      total += res.group_loss[g];
      ++groups_seen;
    }
  }
  res.avg_loss = groups_seen > 0 ? total / groups_seen : 0.0;
  if (!res.stats.empty()) {
    res.report = specialization_report(res.stats, suite.group_of_task,
                                       suite.cfg.groups);
    for (const auto& layer : res.report.layers) {
      res.layer_nmi.push_back(layer.nmi);
    }
  }
  return res;
}

RunRecord train(MomeModel& model, const TaskSuite& suite,
                const TrainConfig& cfg, const RoutingSinks* sinks) {
  cfg.validate();
  RunRecord rec;

  AdamWConfig ocfg;
  ocfg.peak_lr = cfg.peak_lr;
  ocfg.beta1 = cfg.beta1;
  ocfg.beta2 = cfg.beta2;
  ocfg.weight_decay = cfg.weight_decay;
  ocfg.warmup_steps = cfg.warmup;
  ocfg.total_steps = cfg.steps;
  AdamW opt(model.trainable_params(), ocfg);

  Rng data_rng = Rng(cfg.seed).fork(0xda7a);
  Rng noise_rng = Rng(cfg.seed).fork(0x6b);

  rec.init_eval = evaluate(model, suite, cfg.seed, cfg.eval_batches, cfg.batch,
                           /*step=*/-1, nullptr);

  const bool use_lb = model.cfg.balance == BalanceMode::kLoadBalance;
  // The auxiliary-loss graph couples every sample's router probabilities, so
  // it is incompatible with per-shard tapes; LB runs serial.
  const int threads = use_lb ? 1 : cfg.threads;

  for (int step = 0; step < cfg.steps; ++step) {
    const auto batch = sample_balanced_batch(suite, cfg.batch, data_rng);
    rec.stream_hash = batch_stream_hash(rec.stream_hash, batch);

    std::array<double, 4> group_sum{0, 0, 0, 0};
    std::array<long, 4> group_n{0, 0, 0, 0};
    double step_loss = 0.0;
    bool finite = true;

    if (threads == 1) {
      Tape tape;
      std::vector<Tensor> losses;
      losses.reserve(batch.size());
      // Per mole layer: router probs and selections across the batch.
      std::vector<std::vector<Tensor>> lb_probs(model.mole.size());
      std::vector<std::vector<int>> lb_sel(model.mole.size());
      for (const auto& s : batch) {
        ForwardTrace trace;
        Rng* noise = model.cfg.balance == BalanceMode::kGumbel ? &noise_rng
                                                               : nullptr;
        Tensor pred = model_forward(model, s, noise, &trace);
        Tensor diff = sub(pred, Tensor::scalar(s.label));
        Tensor l2 = mul(diff, diff);
        const double lv = l2.item();
        group_sum[static_cast<std::size_t>(s.group)] += lv;
        group_n[static_cast<std::size_t>(s.group)] += 1;
        losses.push_back(std::move(l2));
        record_trace(trace, step, s.task_id, nullptr, sinks);
        if (use_lb) {
          for (std::size_t l = 0; l < trace.mole_layers.size(); ++l) {
            for (std::size_t u = 0; u < trace.mole_layers[l].selections.size();
                 ++u) {
              lb_probs[l].push_back(trace.mole_layers[l].probs[u]);
              lb_sel[l].push_back(trace.mole_layers[l].selections[u]);
            }
          }
        }
      }
      Tensor total = scale(add_n(losses), 1.0 / static_cast<double>(batch.size()));
      if (use_lb) {
        std::vector<Tensor> aux;
        for (std::size_t l = 0; l < model.mole.size(); ++l) {
          aux.push_back(load_balance_loss(lb_sel[l], lb_probs[l]));
        }
        total = add(total, scale(add_n(aux), cfg.lb_coefficient /
                                                 static_cast<double>(
                                                     model.mole.size())));
      }
      step_loss = total.item();
      finite = std::isfinite(step_loss);
      if (finite) {
        tape.backward(total);
      }
    } else {
      // Data-parallel shards: forward in worker threads, backward serialized
      // by a mutex; gradients reduce by summation into the shared buffers.
      std::mutex grad_mu;
      std::vector<std::thread> pool;
      std::vector<std::array<double, 4>> shard_sum(
          static_cast<std::size_t>(threads), {0, 0, 0, 0});
      std::vector<std::array<long, 4>> shard_n(
          static_cast<std::size_t>(threads), {0, 0, 0, 0});
      std::vector<char> shard_ok(static_cast<std::size_t>(threads), 1);
      for (int t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
          Tape tape;
          std::vector<Tensor> losses;
          for (std::size_t i = static_cast<std::size_t>(t); i < batch.size();
               i += static_cast<std::size_t>(threads)) {
            const Sample& s = batch[i];
            Tensor pred = model_forward(model, s, nullptr, nullptr);
            Tensor diff = sub(pred, Tensor::scalar(s.label));
            Tensor l2 = mul(diff, diff);
            const double lv = l2.item();
            if (!std::isfinite(lv)) shard_ok[static_cast<std::size_t>(t)] = 0;
            shard_sum[static_cast<std::size_t>(t)]
                     [static_cast<std::size_t>(s.group)] += lv;
            shard_n[static_cast<std::size_t>(t)]
                   [static_cast<std::size_t>(s.group)] += 1;
            losses.push_back(std::move(l2));
          }
          if (losses.empty()) return;
          Tensor shard_loss =
              scale(add_n(losses), 1.0 / static_cast<double>(batch.size()));
          std::lock_guard<std::mutex> lock(grad_mu);
          tape.backward(shard_loss);
        });
      }
      for (auto& th : pool) th.join();
      for (int t = 0; t < threads; ++t) {
        finite = finite && shard_ok[static_cast<std::size_t>(t)];
        for (std::size_t g = 0; g < 4; ++g) {
          group_sum[g] += shard_sum[static_cast<std::size_t>(t)][g];
          group_n[g] += shard_n[static_cast<std::size_t>(t)][g];
        }
      }
      double acc = 0.0;
      long cnt = 0;
      for (std::size_t g = 0; g < 4; ++g) {
        acc += group_sum[g];
        cnt += group_n[g];
      }
      step_loss = cnt ? acc / static_cast<double>(cnt) : 0.0;
    }

    for (std::size_t g = 0; g < 4; ++g) {
      if (group_n[g] > 0) {
        rec.curves.push_back({step, static_cast<int>(g),
                              group_sum[g] / static_cast<double>(group_n[g])});
      }
    }

    if (!finite) {
      rec.diverged = true;
      rec.diverged_step = step;
      rec.steps_run = step;
      return rec;
    }
    opt.step();
    rec.steps_run = step + 1;
  }

  rec.final_eval = evaluate(model, suite, cfg.seed, cfg.eval_batches,
                            cfg.batch, cfg.steps, sinks);
  return rec;
}

// ---- ablation -----------------------------------------------------------------

std::vector<std::string> ablation_variants() {
  return {"single-expert-0", "single-expert-1", "single-expert-2",
          "avgpool-addition", "adt-addition",   "adt-router",
          "mole-t",           "mole-i",         "mole-it",
          "mole-i-gs",        "mole-i-lb"};
}

namespace {

struct VariantPlan {
  ModelConfig model;
  bool two_stage = false;
  int stage2_experts = 4;
  RouterVariant variant = RouterVariant::kInstance;
  BalanceMode balance = BalanceMode::kNone;
};

VariantPlan plan_variant(const std::string& name, const ModelConfig& base) {
  VariantPlan p;
  p.model = base;
  p.model.mole_experts = 1;  // every variant trains the stage-1 shape first
  p.model.balance = BalanceMode::kNone;
  p.model.mole_variant = RouterVariant::kInstance;
  p.stage2_experts = base.mole_experts >= 2 ? base.mole_experts : 4;
  if (name.starts_with("single-expert-")) {
    p.model.fusion = FusionMode::kSingleExpert;
    p.model.single_expert = std::stoi(name.substr(14));
    p.model.adt.layers = 0;  // pooling-only baseline
    return p;
  }
  if (name == "avgpool-addition") {
    p.model.fusion = FusionMode::kAddition;
    p.model.adt.layers = 0;
    return p;
  }
  if (name == "adt-addition") {
    p.model.fusion = FusionMode::kAddition;
    return p;
  }
  if (name == "adt-router") {
    p.model.fusion = FusionMode::kRouter;
    return p;
  }
  p.model.fusion = FusionMode::kRouter;
  p.two_stage = true;
  if (name == "mole-t") {
    p.variant = RouterVariant::kToken;
  } else if (name == "mole-i") {
    p.variant = RouterVariant::kInstance;
  } else if (name == "mole-it") {
    p.variant = RouterVariant::kBoth;
  } else if (name == "mole-i-gs") {
    p.variant = RouterVariant::kInstance;
    p.balance = BalanceMode::kGumbel;
  } else if (name == "mole-i-lb") {
    p.variant = RouterVariant::kInstance;
    p.balance = BalanceMode::kLoadBalance;
  } else {
    throw ConfigError("unknown ablation variant: " + name);
  }
  return p;
}

}  // namespace

AblationResult run_ablation(const std::string& variant, const TaskSuite& suite,
                            const ModelConfig& base_model,
                            const TrainConfig& base_train) {
  const VariantPlan plan = plan_variant(variant, base_model);
  std::vector<int> channels;
  for (const auto& enc : suite.encoders) channels.push_back(enc.channels);

  Rng init_rng = Rng(base_train.seed).fork(0x1417);
  MomeModel model = MomeModel::init(plan.model, channels, init_rng);

  AblationResult res;
  res.variant = variant;

  TrainConfig stage1 = base_train;
  stage1.stage = 1;
  RunRecord rec1 = train(model, suite, stage1, nullptr);
  if (!plan.two_stage) {
    res.record = std::move(rec1);
  } else {
    Rng stage2_rng = Rng(base_train.seed).fork(0x57a2);
    MomeModel m2 = make_stage2_model(model, plan.stage2_experts, plan.variant,
                                     plan.balance, stage2_rng);
    TrainConfig stage2 = base_train;
    stage2.stage = 2;
    res.record = train(m2, suite, stage2, nullptr);
    res.record.stream_hash = rec1.stream_hash;  // paired over the stage-1 data
  }
  res.group_loss = res.record.final_eval.group_loss;
  res.avg_loss = res.record.final_eval.avg_loss;
  res.stream_hash = res.record.stream_hash;
  return res;
}

}  // namespace mome
