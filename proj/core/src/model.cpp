#include "mome/model.hpp"

namespace mome {

FusionMode fusion_from_string(const std::string& s) {
  if (s == "router") return FusionMode::kRouter;
  if (s == "addition") return FusionMode::kAddition;
  if (s == "single") return FusionMode::kSingleExpert;
  throw ConfigError("unknown fusion mode: " + s);
}

std::string to_string(FusionMode f) {
  switch (f) {
    case FusionMode::kRouter: return "router";
    case FusionMode::kAddition: return "addition";
    case FusionMode::kSingleExpert: return "single";
  }
  return "?";
}

MomeModel MomeModel::init(const ModelConfig& cfg,
                          const std::vector<int>& expert_channels, Rng& rng) {
  cfg.adt.validate();
  if (cfg.fusion == FusionMode::kSingleExpert &&
      (cfg.single_expert < 0 ||
       cfg.single_expert >= static_cast<int>(expert_channels.size()))) {
    throw ConfigError("single_expert index out of range");
  }
  MomeModel m;
  m.cfg = cfg;
  m.expert_channels = expert_channels;
  for (int ce : expert_channels) {
    m.experts.push_back(AdtParams::init(cfg.adt, ce, rng));
  }
  m.vision_router = SoftRouterParams::init(
      cfg.d_instr, 4 * cfg.d_instr,
      static_cast<int>(expert_channels.size()), rng);
  for (int l = 0; l < cfg.host_layers; ++l) {
    HostBlock hb = HostBlock::init(cfg.adt.width, cfg.host_hidden, rng);
    hb.trainable = cfg.host_trainable;
    m.host.push_back(std::move(hb));
    MoleBlock mb = MoleBlock::init(cfg.adt.width, cfg.adapter_bottleneck,
                                   cfg.mole_experts, cfg.d_instr,
                                   cfg.mole_variant, cfg.balance, rng);
    mb.gumbel_temperature = cfg.gumbel_temperature;
    m.mole.push_back(std::move(mb));
  }
  m.readout = LinearParams::init(cfg.adt.width, 1, rng);
  return m;
}

ParamSet MomeModel::all_params() {
  ParamSet ps;
  for (std::size_t e = 0; e < experts.size(); ++e) {
    experts[e].collect("vision_expert" + std::to_string(e), ps);
  }
  vision_router.collect("vision_router", ps);
  for (std::size_t l = 0; l < host.size(); ++l) {
    host[l].collect("host" + std::to_string(l), ps);
    mole[l].collect("mole" + std::to_string(l), ps);
  }
  readout.collect("readout", ps);
  return ps;
}

ParamSet MomeModel::trainable_params() {
  ParamSet ps;
  if (cfg.fusion == FusionMode::kSingleExpert) {
    const auto e = static_cast<std::size_t>(cfg.single_expert);
    experts[e].collect("vision_expert" + std::to_string(e), ps);
  } else {
    for (std::size_t e = 0; e < experts.size(); ++e) {
      experts[e].collect("vision_expert" + std::to_string(e), ps);
    }
  }
  if (cfg.fusion == FusionMode::kRouter) {
    vision_router.collect("vision_router", ps);
  }
  for (std::size_t l = 0; l < host.size(); ++l) {
    if (host[l].trainable) host[l].collect("host" + std::to_string(l), ps);
    mole[l].collect("mole" + std::to_string(l), ps);
  }
  readout.collect("readout", ps);
  return ps;
}

Tensor model_forward(const MomeModel& m, const Sample& s, Rng* noise_rng,
                     ForwardTrace* trace) {
  if (s.features.size() != m.experts.size()) {
    throw DimensionError("sample has " + std::to_string(s.features.size()) +
                         " feature maps, model expects " +
                         std::to_string(m.experts.size()));
  }
  Tensor fused;
  std::vector<Tensor> seqs;
  RouterDecision decision;
  const int n = m.n_vision_experts();

  if (m.cfg.fusion == FusionMode::kSingleExpert) {
    const auto e = static_cast<std::size_t>(m.cfg.single_expert);
    fused = adt_forward(s.features[e], m.cfg.adt, m.experts[e]);
    std::vector<double> onehot(static_cast<std::size_t>(n), 0.0);
    onehot[e] = 1.0;
    decision.weights = Tensor::from({n}, std::move(onehot));
  } else {
    seqs.reserve(static_cast<std::size_t>(n));
    for (int e = 0; e < n; ++e) {
      seqs.push_back(adt_forward(s.features[static_cast<std::size_t>(e)],
                                 m.cfg.adt,
                                 m.experts[static_cast<std::size_t>(e)]));
    }
    if (m.cfg.fusion == FusionMode::kRouter) {
      decision = soft_router(s.instruction, m.vision_router);
    } else {
      // Plain addition: uniform constant weights, no gradient to any router.
      decision.weights =
          Tensor::full({n}, 1.0 / static_cast<double>(n));
    }
    MoveOutput mo = move_aggregate(seqs, decision);
    fused = mo.fused;
    decision = std::move(mo.decision);
    seqs = std::move(mo.per_expert);
  }

  if (trace) {
    trace->vision_weights.assign(decision.weights.values().begin(),
                                 decision.weights.values().end());
    if (decision.logits.defined()) {
      trace->vision_logits.assign(decision.logits.values().begin(),
                                  decision.logits.values().end());
    }
    if (!seqs.empty()) {
      ImportanceResult imp =
          expert_importance(decision, seqs, m.cfg.importance_token_mean);
      trace->importance.assign(imp.importance.values().begin(),
                               imp.importance.values().end());
      trace->importance_degenerate = imp.degenerate;
    } else {
      trace->importance = trace->vision_weights;
    }
    trace->mole_layers.resize(m.mole.size());
    // Mean-pooled raw encoder channels, the vision-modality PCA payload.
    trace->pooled_encoder_features.clear();
    for (const auto& f : s.features) {
      const int hw = f.height() * f.width();
      const int c = f.channels();
      for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int p = 0; p < hw; ++p) {
          acc += f.grid.values()[static_cast<std::size_t>(p) * c + ch];
        }
        trace->pooled_encoder_features.push_back(acc / hw);
      }
    }
  }

  Tensor h = fused;
  for (std::size_t l = 0; l < m.host.size(); ++l) {
    MoleTrace* mt = trace ? &trace->mole_layers[l] : nullptr;
    h = host_block_forward(h, s.instruction, m.host[l], m.mole[l], noise_rng,
                           mt);
  }
  Tensor pooled = reshape(mean_rows(h), {1, m.cfg.adt.width});
  return reshape(linear(pooled, m.readout), {1});
}

MomeModel make_stage2_model(const MomeModel& stage1, int n_experts,
                            RouterVariant variant, BalanceMode balance,
                            Rng& rng) {
  if (stage1.mole.empty()) throw ConfigError("stage-1 model has no adapters");
  MomeModel m = stage1;  // shares every tensor except the rebuilt blocks
  m.cfg.mole_experts = n_experts;
  m.cfg.mole_variant = variant;
  m.cfg.balance = balance;
  for (std::size_t l = 0; l < m.mole.size(); ++l) {
    if (stage1.mole[l].experts.size() != 1) {
      throw ConfigError("stage-2 init expects a single stage-1 adapter");
    }
    MoleBlock nb =
        mole_stage2_init(stage1.mole[l].experts.front(), n_experts,
                         m.cfg.d_instr, variant, balance, rng);
    nb.gumbel_temperature = m.cfg.gumbel_temperature;
    m.mole[l] = std::move(nb);
  }
  return m;
}

}  // namespace mome
