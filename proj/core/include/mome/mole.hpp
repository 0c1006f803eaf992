#pragma once

#include "mome/move.hpp"
#include "mome/nn.hpp"
#include "mome/rng.hpp"
#include "mome/tensor.hpp"

namespace mome {

// Bottleneck adapter, Eq. y = s * up(relu(down(x))); s starts at 0 so every
// adapter begins as a silent branch.
struct AdapterParams {
  Tensor down;  // C x r
  Tensor up;    // r x C
  Tensor s;     // {1}, learnable scalar

  static AdapterParams init(int width, int bottleneck, Rng& rng);
  AdapterParams clone() const;
  void collect(const std::string& prefix, ParamSet& ps);
  int width() const { return down.dim(0); }
  int bottleneck() const { return down.dim(1); }
};

Tensor adapter_forward(const Tensor& x, const AdapterParams& a);

// Hard argmax gate. Ties break to the lowest index. The returned one_hot is a
// constant; gradient to the router flows through the straight-through path in
// mole_forward.
struct Top1Result {
  int index = 0;
  Tensor one_hot;
};
Top1Result route_top1(const Tensor& logits);

// (logits + Gumbel noise) / temperature; noise enters as a constant so the
// result stays differentiable in the logits. The span overload takes the
// noise directly (zero noise reduces the gate to plain route_top1).
Tensor gumbel_perturb(const Tensor& logits, double temperature,
                      std::span<const double> noise);
Tensor gumbel_perturb(const Tensor& logits, double temperature, Rng& rng);

// Switch-style auxiliary loss K * sum_k fraction_k * mean_prob_k,
// differentiable through the probabilities.
Tensor load_balance_loss(std::span<const int> selections,
                         std::span<const Tensor> probs);

enum class RouterVariant { kInstance, kToken, kBoth };
enum class BalanceMode { kNone, kGumbel, kLoadBalance };

RouterVariant router_variant_from_string(const std::string& s);
BalanceMode balance_mode_from_string(const std::string& s);
std::string to_string(RouterVariant v);
std::string to_string(BalanceMode b);

// Per-evaluation routing trace; counters satisfy the one-adapter-per-sample
// sparsity contract and feed the stats sink.
struct MoleTrace {
  std::vector<int> selections;        // per routed unit (sample or token)
  std::vector<Tensor> probs;          // router softmax per routed unit
  std::vector<std::vector<double>> logits;  // raw logits per routed unit
  std::vector<int> exec_counts;       // adapter invocations this evaluation
};

struct MoleBlock {
  std::vector<AdapterParams> experts;
  SoftRouterParams router;
  RouterVariant variant = RouterVariant::kInstance;
  BalanceMode balance = BalanceMode::kNone;
  double gumbel_temperature = 1.0;

  static MoleBlock init(int width, int bottleneck, int n_experts, int d_instr,
                        RouterVariant variant, BalanceMode balance, Rng& rng);
  void collect(const std::string& prefix, ParamSet& ps);
  int n_experts() const { return static_cast<int>(experts.size()); }
  int router_input_dim(int width, int d_instr) const;
};

// Routes x (L x C) through exactly one adapter per sample (variant I) or per
// token (T / IT), returning the adapted value to add to the host FFN output.
// noise_rng enables Gumbel perturbation when the block's balance mode asks
// for it; pass nullptr at evaluation time.
Tensor mole_forward(const Tensor& x, const Tensor& instruction,
                    const MoleBlock& block, Rng* noise_rng = nullptr,
                    MoleTrace* trace = nullptr);

// Stage-2 initialization: every expert is an exact copy of the stage-1
// adapter; the router is freshly initialized.
MoleBlock mole_stage2_init(const AdapterParams& stage1_adapter, int n_experts,
                           int d_instr, RouterVariant variant,
                           BalanceMode balance, Rng& rng);

// Host FFN sublayer the adapters attach to; frozen by default (params are
// excluded from the trainable set, not from checkpoints).
struct HostBlock {
  LayerNormParams ln;
  FfnParams mlp;
  bool trainable = false;

  static HostBlock init(int width, int hidden, Rng& rng);
  void collect(const std::string& prefix, ParamSet& ps);
};

// x + FFN(LN(x)) + MoLE(LN(x), I)
Tensor host_block_forward(const Tensor& x, const Tensor& instruction,
                          const HostBlock& host, const MoleBlock& mole,
                          Rng* noise_rng = nullptr, MoleTrace* trace = nullptr);

}  // namespace mome
