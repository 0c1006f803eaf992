#include "mome/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace mome {

double lr_at_step(int step, int warmup, int total, double peak) {
  if (step < warmup) {
    return peak * static_cast<double>(step) / static_cast<double>(warmup);
  }
  if (total <= warmup) return peak;
  const double progress = static_cast<double>(step - warmup) /
                          static_cast<double>(total - warmup);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

AdamW::AdamW(ParamSet params, AdamWConfig cfg) : cfg_(cfg) {
  slots_.reserve(params.items.size());
  for (auto& [name, t] : params.items) {
    Slot s;
    s.name = name;
    s.param = t;
    s.m.assign(t->size(), 0.0);
    s.v.assign(t->size(), 0.0);
    s.decay = t->rank() >= 2 && !name.ends_with(".ref_points");
    s.clamp01 = name.ends_with(".ref_points");
    slots_.push_back(std::move(s));
  }
}

double AdamW::current_lr() const {
  return lr_at_step(t_ == 0 ? 0 : t_ - 1, cfg_.warmup_steps, cfg_.total_steps,
                    cfg_.peak_lr);
}

void AdamW::zero_grad() {
  for (auto& s : slots_) s.param->zero_grad();
}

void AdamW::step() {
  const double lr =
      lr_at_step(t_, cfg_.warmup_steps, cfg_.total_steps, cfg_.peak_lr);
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
  for (auto& s : slots_) {
    auto vals = s.param->mutable_values();
    const auto grads = s.param->grad();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double g = grads[i];
      s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g;
      s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = s.m[i] / bc1;
      const double vhat = s.v[i] / bc2;
      vals[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      if (s.decay) vals[i] -= lr * cfg_.weight_decay * vals[i];
    }
    if (s.clamp01) {
      for (double& v : vals) v = std::clamp(v, 0.0, 1.0);
    }
    s.param->zero_grad();
  }
}

}  // namespace mome
