#pragma once

#include "mome/mole.hpp"
#include "mome/move.hpp"
#include "mome/synth.hpp"

namespace mome {

enum class FusionMode { kRouter, kAddition, kSingleExpert };

FusionMode fusion_from_string(const std::string& s);
std::string to_string(FusionMode f);

struct ModelConfig {
  AdtConfig adt;  // adt.layers == 0 gives the plain pooling path
  int d_instr = 16;
  int host_layers = 2;
  int host_hidden = 128;
  int adapter_bottleneck = 8;
  int mole_experts = 1;  // 1 == single adapter (stage-1 shape)
  RouterVariant mole_variant = RouterVariant::kInstance;
  BalanceMode balance = BalanceMode::kNone;
  double gumbel_temperature = 1.0;
  FusionMode fusion = FusionMode::kRouter;
  int single_expert = 0;
  bool host_trainable = false;
  bool importance_token_mean = false;
};

// The full desk-scale pipeline: per-expert ADT stacks, an instruction-routed
// fusion, a host stack with parallel language experts, and a shared scalar
// readout.
struct MomeModel {
  ModelConfig cfg;
  std::vector<AdtParams> experts;  // one per pseudo-encoder
  std::vector<int> expert_channels;
  SoftRouterParams vision_router;
  std::vector<HostBlock> host;
  std::vector<MoleBlock> mole;
  LinearParams readout;

  static MomeModel init(const ModelConfig& cfg,
                        const std::vector<int>& expert_channels, Rng& rng);

  // Trainable set honors the frozen-host default; checkpoints carry
  // everything.
  ParamSet trainable_params();
  ParamSet all_params();
  int n_vision_experts() const { return static_cast<int>(experts.size()); }
};

struct ForwardTrace {
  std::vector<double> vision_weights;
  std::vector<double> vision_logits;
  std::vector<double> importance;
  bool importance_degenerate = false;
  std::vector<MoleTrace> mole_layers;
  std::vector<double> pooled_encoder_features;  // cached for PCA exports
};

// Prediction for one sample. noise_rng enables Gumbel router noise (training
// only); trace captures routing for the stats sink.
Tensor model_forward(const MomeModel& m, const Sample& s,
                     Rng* noise_rng = nullptr, ForwardTrace* trace = nullptr);

// Stage-2 surgery: replicate each layer's single stage-1 adapter into
// n_experts copies with fresh routers; everything else is shared state
// copied as-is.
MomeModel make_stage2_model(const MomeModel& stage1, int n_experts,
                            RouterVariant variant, BalanceMode balance,
                            Rng& rng);

}  // namespace mome
