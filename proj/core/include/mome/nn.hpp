#pragma once

#include "mome/rng.hpp"
#include "mome/tensor.hpp"

namespace mome {

// Named parameter registry; every model struct appends its leaves here so the
// optimizer, checkpointing, and tests see one flat list.
struct ParamSet {
  std::vector<std::pair<std::string, Tensor*>> items;
  void add(std::string name, Tensor* t) { items.emplace_back(std::move(name), t); }
  std::vector<Tensor*> tensors() const {
    std::vector<Tensor*> out;
    out.reserve(items.size());
    for (const auto& [_, t] : items) out.push_back(t);
    return out;
  }
};

// Kaiming-uniform for weight matrices (bound sqrt(6/fan_in)), zeros for
// biases.
Tensor kaiming_uniform(Shape shape, int fan_in, Rng& rng);

struct LinearParams {
  Tensor w;  // in x out
  Tensor b;  // out, optional (undefined => no bias)

  static LinearParams init(int in, int out, Rng& rng, bool bias = true);
  static LinearParams zero(int in, int out, bool bias = true);
  void collect(const std::string& prefix, ParamSet& ps);
};

// x: L x in -> L x out
Tensor linear(const Tensor& x, const LinearParams& p);

struct LayerNormParams {
  Tensor gain;
  Tensor bias;
  static LayerNormParams init(int width);
  void collect(const std::string& prefix, ParamSet& ps);
};

Tensor layer_norm(const Tensor& x, const LayerNormParams& p);

struct SelfAttentionParams {
  LinearParams q, k, v, o;
  int n_heads = 1;
  static SelfAttentionParams init(int width, int n_heads, Rng& rng);
  void collect(const std::string& prefix, ParamSet& ps);
};

// Standard multi-head scaled dot-product attention over an L x C sequence,
// no positional encoding, scale 1/sqrt(C/n_heads).
Tensor self_attention(const Tensor& x, const SelfAttentionParams& p);

struct FfnParams {
  LinearParams in, out;  // C -> hidden -> C, GeLU between
  static FfnParams init(int width, int hidden, Rng& rng);
  void collect(const std::string& prefix, ParamSet& ps);
};

Tensor ffn(const Tensor& x, const FfnParams& p);

}  // namespace mome
