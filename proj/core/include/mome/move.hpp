#pragma once

#include "mome/nn.hpp"
#include "mome/tensor.hpp"

namespace mome {

// One vision expert's output: an H x W x C_e grid. H and W may differ per
// sample and per expert; C_e is fixed per expert for a run.
struct FeatureMap {
  int expert_id = 0;
  Tensor grid;  // rank-3 H x W x C_e

  int height() const { return grid.dim(0); }
  int width() const { return grid.dim(1); }
  int channels() const { return grid.dim(2); }
};

struct AdtConfig {
  int pooled_h = 3;
  int pooled_w = 3;
  int layers = 2;       // M
  int n_heads = 4;      // N_h
  int n_points = 2;     // N_p
  int width = 32;       // C
  bool value_bias = true;

  int seq_len() const { return pooled_h * pooled_w; }  // L
  void validate() const;
};

// ---- ADT building blocks ---------------------------------------------------

// Mean over the bin [floor(i*H/oh), ceil((i+1)*H/oh)) x [floor(j*W/ow),
// ceil((j+1)*W/ow)); bins may overlap when the output is finer than the
// input. grid is rank-3 H x W x C.
Tensor adaptive_avg_pool2d(const Tensor& grid, int out_h, int out_w);

// points[i,j,k,:] = offsets(q_i)[j,k,:] + R[i,:], in normalized [0,1]^2 units
// (not clamped; the sampler zero-pads out-of-range taps).
Tensor gen_sampling_points(const Tensor& q, const Tensor& ref_points,
                           const LinearParams& proj_p, int n_heads,
                           int n_points);

// Per-head softmax over the n_points sampling weights of each head.
Tensor gen_attention_weights(const Tensor& q, const LinearParams& proj_w,
                             int n_heads, int n_points);

// Bilinear interpolation of a rank-3 H x W x C map at one normalized point
// (x, y); coordinates map to pixel space as x*(W-1), y*(H-1) and taps outside
// the grid contribute zero.
Tensor bilinear_sample(const Tensor& value, const Tensor& xy);

// Fused sampler for one deformable cross-attention: values is the projected
// map flattened to (H*W) x C with head j owning channel block j; output row i
// is the concatenation over heads of sum_k w[i,j,k] * bilinear(values_j,
// p[i,j,k]).
Tensor deform_sample(const Tensor& values, int h, int w, int n_heads,
                     const Tensor& points, const Tensor& weights);

struct DeformAttnParams {
  LinearParams proj_p;  // C -> Nh*Np*2, zero-initialized
  LinearParams proj_w;  // C -> Nh*Np
  LinearParams proj_v;  // C_e -> C (bias per config flag)
  LinearParams proj_o;  // C -> C
  Tensor ref_points;    // L x 2, learnable, clamped to [0,1] after steps

  static DeformAttnParams init(const AdtConfig& cfg, int in_channels, Rng& rng);
  void collect(const std::string& prefix, ParamSet& ps);
};

Tensor deformable_cross_attention(const Tensor& q, const FeatureMap& f,
                                  const DeformAttnParams& p,
                                  const AdtConfig& cfg);

struct DeformLayerParams {
  LayerNormParams ln_attn, ln_cross, ln_ffn;
  SelfAttentionParams attn;
  DeformAttnParams cross;
  FfnParams mlp;

  static DeformLayerParams init(const AdtConfig& cfg, int in_channels, Rng& rng);
  void collect(const std::string& prefix, ParamSet& ps);
};

// Pre-norm residual: q += SelfAttn(LN(q)); q += DefCross(LN(q), f);
// q += FFN(LN(q)).
Tensor deformable_layer(const Tensor& q, const FeatureMap& f,
                        const DeformLayerParams& p, const AdtConfig& cfg);

struct AdtParams {
  LinearParams proj_in;  // C_e -> C applied to the pooled seed
  std::vector<DeformLayerParams> layers;

  static AdtParams init(const AdtConfig& cfg, int in_channels, Rng& rng);
  void collect(const std::string& prefix, ParamSet& ps);
};

// f -> unified-length L x C sequence: pooled seed refined by M deformable
// layers.
Tensor adt_forward(const FeatureMap& f, const AdtConfig& cfg,
                   const AdtParams& params);

// ---- instance-level soft router ---------------------------------------------

struct RouterDecision {
  Tensor weights;  // dense simplex vector over experts (soft) or one-hot
  Tensor logits;   // raw pre-softmax logits, kept for statistics
};

struct SoftRouterParams {
  LinearParams hidden;  // d_I -> d_hidden
  LinearParams out;     // d_hidden -> N, zero-initialized (uniform gate at
                        // init)

  static SoftRouterParams init(int d_in, int d_hidden, int n_out, Rng& rng);
  void collect(const std::string& prefix, ParamSet& ps);
};

// G(I) = softmax(W2 gelu(W1 I + b1) + b2); instruction is a rank-1 d_I
// tensor.
RouterDecision soft_router(const Tensor& instruction,
                           const SoftRouterParams& p);

struct MoveOutput {
  Tensor fused;                    // L x C
  RouterDecision decision;         // dense weights over experts
  std::vector<Tensor> per_expert;  // the f-hat sequences
};

MoveOutput move_aggregate(std::vector<Tensor> sequences,
                          RouterDecision decision);

struct ImportanceResult {
  Tensor importance;  // length N, sums to 1
  bool degenerate = false;  // all weighted magnitudes were zero
};

// Importance_i = |g_i * fhat_i|_F, normalized to sum 1. token_mean switches
// to the per-token mean norm alternative.
ImportanceResult expert_importance(const RouterDecision& decision,
                                   std::span<const Tensor> sequences,
                                   bool token_mean = false);

}  // namespace mome
