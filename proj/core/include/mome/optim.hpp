#pragma once

#include "mome/nn.hpp"
#include "mome/tensor.hpp"

namespace mome {

// Linear warmup from 0 to peak over `warmup` steps, then cosine decay to 0 at
// `total` steps. lr(0) = 0, lr(warmup) = peak.
double lr_at_step(int step, int warmup, int total, double peak);

struct AdamWConfig {
  double peak_lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
  int warmup_steps = 100;
  int total_steps = 2000;
};

// Decoupled-weight-decay Adam. Decay applies to rank >= 2 weight matrices
// only; vectors, scalars, and reference points are exempt. Parameters whose
// names end in ".ref_points" are clamped to [0,1] after each step.
class AdamW {
 public:
  AdamW(ParamSet params, AdamWConfig cfg);

  void step();       // consumes grads, then zeroes them
  void zero_grad();
  int steps_taken() const { return t_; }
  double current_lr() const;  // lr used by the most recent step

 private:
  struct Slot {
    std::string name;
    Tensor* param;
    std::vector<double> m, v;
    bool decay;
    bool clamp01;
  };
  std::vector<Slot> slots_;
  AdamWConfig cfg_;
  int t_ = 0;
};

}  // namespace mome
