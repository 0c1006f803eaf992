#include "mome/mole.hpp"

#include <algorithm>
#include <cmath>

namespace mome {

Tensor make_result(Shape shape, bool requires_grad);  // tensor.cpp
Tensor slice_rows_helper(const Tensor& x, int row);
Tensor concat_rows_helper(std::span<const Tensor> rows);

AdapterParams AdapterParams::init(int width, int bottleneck, Rng& rng) {
  if (bottleneck < 1) throw ConfigError("adapter: bottleneck must be >= 1");
  AdapterParams a;
  a.down = kaiming_uniform({width, bottleneck}, width, rng);
  a.up = kaiming_uniform({bottleneck, width}, bottleneck, rng);
  a.s = Tensor::zeros({1}, true);
  return a;
}

AdapterParams AdapterParams::clone() const {
  AdapterParams a;
  a.down = Tensor::from(down.shape(),
                        {down.values().begin(), down.values().end()}, true);
  a.up = Tensor::from(up.shape(), {up.values().begin(), up.values().end()},
                      true);
  a.s = Tensor::from({1}, {s.values()[0]}, true);
  return a;
}

void AdapterParams::collect(const std::string& prefix, ParamSet& ps) {
  ps.add(prefix + ".down", &down);
  ps.add(prefix + ".up", &up);
  ps.add(prefix + ".s", &s);
}

Tensor adapter_forward(const Tensor& x, const AdapterParams& a) {
  if (x.rank() != 2 || x.dim(1) != a.width()) {
    throw DimensionError("adapter_forward: input " + shape_str(x.shape()) +
                         " vs adapter width " + std::to_string(a.width()));
  }
  return scale_by(matmul(relu(matmul(x, a.down)), a.up), a.s);
}

Top1Result route_top1(const Tensor& logits) {
  if (logits.rank() != 1 || logits.dim(0) < 1) {
    throw ContractError("route_top1: rank-1 logits with K >= 1 expected");
  }
  const auto lv = logits.values();
  int best = 0;
  for (int k = 1; k < logits.dim(0); ++k) {
    if (lv[static_cast<std::size_t>(k)] > lv[static_cast<std::size_t>(best)]) {
      best = k;
    }
  }
  Top1Result r;
  r.index = best;
  std::vector<double> oh(static_cast<std::size_t>(logits.dim(0)), 0.0);
  oh[static_cast<std::size_t>(best)] = 1.0;
  r.one_hot = Tensor::from(logits.shape(), std::move(oh));
  return r;
}

Tensor gumbel_perturb(const Tensor& logits, double temperature,
                      std::span<const double> noise) {
  if (temperature <= 0.0) {
    throw ConfigError("gumbel_perturb: temperature must be > 0");
  }
  if (noise.size() != logits.size()) {
    throw DimensionError("gumbel_perturb: noise length mismatch");
  }
  // Logits are tempered before the unit-scale noise enters; a shared 1/T on
  // both would leave the argmax blind to temperature.
  Tensor gn = Tensor::from(logits.shape(), {noise.begin(), noise.end()});
  return add(scale(logits, 1.0 / temperature), gn);
}

Tensor gumbel_perturb(const Tensor& logits, double temperature, Rng& rng) {
  std::vector<double> noise(logits.size());
  for (double& g : noise) {
    double u = rng.uniform();
    while (u <= 0.0) u = rng.uniform();
    g = -std::log(-std::log(u));
  }
  return gumbel_perturb(logits, temperature, noise);
}

Tensor load_balance_loss(std::span<const int> selections,
                         std::span<const Tensor> probs) {
  if (selections.empty() || selections.size() != probs.size()) {
    throw ContractError("load_balance_loss: empty or mismatched batch");
  }
  const int k = probs.front().dim(0);
  std::vector<double> coef(static_cast<std::size_t>(k), 0.0);
  for (int sel : selections) {
    if (sel < 0 || sel >= k) {
      throw ContractError("load_balance_loss: selection out of range");
    }
    coef[static_cast<std::size_t>(sel)] += 1.0;
  }
  // coef_k = K * fraction_k; loss = sum_k coef_k * mean_prob_k.
  const double b = static_cast<double>(selections.size());
  for (double& c : coef) c = c / b * static_cast<double>(k);
  Tensor mean_probs = scale(add_n(probs), 1.0 / b);
  Tensor weights = Tensor::from({k}, std::move(coef));
  return sum(mul(mean_probs, weights));
}

RouterVariant router_variant_from_string(const std::string& s) {
  if (s == "I" || s == "instance") return RouterVariant::kInstance;
  if (s == "T" || s == "token") return RouterVariant::kToken;
  if (s == "IT" || s == "both") return RouterVariant::kBoth;
  throw ConfigError("unknown router variant: " + s);
}

BalanceMode balance_mode_from_string(const std::string& s) {
  if (s == "none") return BalanceMode::kNone;
  if (s == "GS" || s == "gumbel") return BalanceMode::kGumbel;
  if (s == "LB" || s == "load-balance") return BalanceMode::kLoadBalance;
  throw ConfigError("unknown balance mode: " + s);
}

std::string to_string(RouterVariant v) {
  switch (v) {
    case RouterVariant::kInstance: return "I";
    case RouterVariant::kToken: return "T";
    case RouterVariant::kBoth: return "IT";
  }
  return "?";
}

std::string to_string(BalanceMode b) {
  switch (b) {
    case BalanceMode::kNone: return "none";
    case BalanceMode::kGumbel: return "GS";
    case BalanceMode::kLoadBalance: return "LB";
  }
  return "?";
}

int MoleBlock::router_input_dim(int width, int d_instr) const {
  switch (variant) {
    case RouterVariant::kInstance: return d_instr;
    case RouterVariant::kToken: return width;
    case RouterVariant::kBoth: return width + d_instr;
  }
  return d_instr;
}

MoleBlock MoleBlock::init(int width, int bottleneck, int n_experts,
                          int d_instr, RouterVariant variant,
                          BalanceMode balance, Rng& rng) {
  if (n_experts < 1) throw ConfigError("mole: need at least one expert");
  MoleBlock b;
  b.variant = variant;
  b.balance = balance;
  b.experts.reserve(static_cast<std::size_t>(n_experts));
  for (int e = 0; e < n_experts; ++e) {
    b.experts.push_back(AdapterParams::init(width, bottleneck, rng));
  }
  const int d_in = b.router_input_dim(width, d_instr);
  b.router = SoftRouterParams::init(d_in, 4 * d_in, n_experts, rng);
  return b;
}

void MoleBlock::collect(const std::string& prefix, ParamSet& ps) {
  for (std::size_t e = 0; e < experts.size(); ++e) {
    experts[e].collect(prefix + ".expert" + std::to_string(e), ps);
  }
  router.collect(prefix + ".router", ps);
}

namespace {

// Straight-through gate: the forward value is the selected adapter output
// with coefficient exactly 1 (the one-hot), while the backward pass also
// feeds <y_sel, dout> into the selected softmax probability so the router
// trains. Expert-parameter gradients stay exact for the realized forward.
Tensor straight_through_select(const Tensor& y_sel, const Tensor& probs,
                               int index) {
  Tensor out = make_result(y_sel.shape(),
                           Tape::current() && (y_sel.requires_grad() ||
                                               probs.requires_grad()));
  out.node()->val = y_sel.node()->val;
  if (out.requires_grad()) {
    Tape::current()->record([yn = y_sel.node(), pn = probs.node(),
                             on = out.node(), index] {
      double dot = 0.0;
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        const double g = on->grad[i];
        if (yn->requires_grad) yn->grad[i] += g;
        dot += yn->val[i] * g;
      }
      if (pn->requires_grad) {
        pn->grad[static_cast<std::size_t>(index)] += dot;
      }
    });
  }
  return out;
}

struct RoutedUnit {
  int selection;
  Tensor probs;
  Tensor logits;
};

RoutedUnit route_unit(const Tensor& router_input, const MoleBlock& block,
                      Rng* noise_rng) {
  RouterDecision d = soft_router(router_input, block.router);
  RoutedUnit u;
  u.logits = d.logits;
  Tensor gate_logits = d.logits;
  if (block.balance == BalanceMode::kGumbel && noise_rng != nullptr) {
    gate_logits =
        gumbel_perturb(d.logits, block.gumbel_temperature, *noise_rng);
    u.probs = softmax(gate_logits, 0);
  } else {
    u.probs = d.weights;
  }
  u.selection = route_top1(gate_logits).index;
  return u;
}

void trace_unit(MoleTrace* trace, const RoutedUnit& u, int n_experts) {
  if (!trace) return;
  if (trace->exec_counts.empty()) {
    trace->exec_counts.assign(static_cast<std::size_t>(n_experts), 0);
  }
  trace->selections.push_back(u.selection);
  trace->probs.push_back(u.probs);
  trace->logits.emplace_back(u.logits.values().begin(),
                             u.logits.values().end());
  trace->exec_counts[static_cast<std::size_t>(u.selection)] += 1;
}

}  // namespace

// Single-row slice used by the token router; kept out of the public surface.
Tensor slice_rows_helper(const Tensor& x, int row) {
  const int L = x.dim(0), C = x.dim(1);
  if (row < 0 || row >= L) throw DimensionError("row slice out of range");
  Tensor out = make_result({1, C}, Tape::current() && x.requires_grad());
  const auto xv = x.values();
  auto& ov = out.node()->val;
  for (int j = 0; j < C; ++j)
    ov[static_cast<std::size_t>(j)] = xv[static_cast<std::size_t>(row) * C + j];
  if (out.requires_grad()) {
    Tape::current()->record([xn = x.node(), on = out.node(), row, C] {
      for (int j = 0; j < C; ++j)
        xn->grad[static_cast<std::size_t>(row) * C + j] +=
            on->grad[static_cast<std::size_t>(j)];
    });
  }
  return out;
}

Tensor mole_forward(const Tensor& x, const Tensor& instruction,
                    const MoleBlock& block, Rng* noise_rng, MoleTrace* trace) {
  if (block.experts.empty()) throw ConfigError("mole_forward: no experts");
  const int width = block.experts.front().width();
  if (x.rank() != 2 || x.dim(1) != width) {
    throw DimensionError("mole_forward: input " + shape_str(x.shape()) +
                         " vs expert width " + std::to_string(width));
  }
  const bool needs_instruction = block.variant != RouterVariant::kToken;
  if (needs_instruction && !instruction.defined()) {
    throw ConfigError("mole_forward: variant " + to_string(block.variant) +
                      " requires an instruction embedding");
  }

  if (block.variant == RouterVariant::kInstance) {
    RoutedUnit u = route_unit(instruction, block, noise_rng);
    trace_unit(trace, u, block.n_experts());
    Tensor y = adapter_forward(x, block.experts[static_cast<std::size_t>(u.selection)]);
    return straight_through_select(y, u.probs, u.selection);
  }

  // Token-level variants route every row independently.
  const int L = x.dim(0);
  std::vector<Tensor> rows;
  rows.reserve(static_cast<std::size_t>(L));
  for (int t = 0; t < L; ++t) {
    Tensor xt = slice_rows_helper(x, t);  // 1 x C
    Tensor router_in = reshape(xt, {width});
    if (block.variant == RouterVariant::kBoth) {
      // Token hidden state and instruction concatenated on the last dim.
      Tensor joined = concat_cols(std::vector<Tensor>{
          xt, reshape(instruction, {1, instruction.dim(0)})});
      router_in = reshape(joined, {width + instruction.dim(0)});
    }
    RoutedUnit u = route_unit(router_in, block, noise_rng);
    trace_unit(trace, u, block.n_experts());
    Tensor yt =
        adapter_forward(xt, block.experts[static_cast<std::size_t>(u.selection)]);
    rows.push_back(straight_through_select(yt, u.probs, u.selection));
  }
  return concat_rows_helper(rows);
}

// Stacks 1 x C rows back into L x C; companion to slice_rows_helper.
Tensor concat_rows_helper(std::span<const Tensor> rows) {
  if (rows.empty()) throw ContractError("concat_rows: empty list");
  const int C = rows.front().dim(1);
  const int L = static_cast<int>(rows.size());
  bool need = false;
  for (const auto& r : rows) {
    if (r.rank() != 2 || r.dim(0) != 1 || r.dim(1) != C) {
      throw DimensionError("concat_rows: rows must all be 1 x C");
    }
    if (Tape::current() && r.requires_grad()) need = true;
  }
  Tensor out = make_result({L, C}, need);
  auto& ov = out.node()->val;
  for (int i = 0; i < L; ++i) {
    const auto rv = rows[static_cast<std::size_t>(i)].values();
    for (int j = 0; j < C; ++j)
      ov[static_cast<std::size_t>(i) * C + j] = rv[static_cast<std::size_t>(j)];
  }
  if (need) {
    std::vector<std::shared_ptr<detail::Node>> ins;
    ins.reserve(rows.size());
    for (const auto& r : rows) ins.push_back(r.node());
    Tape::current()->record([ins = std::move(ins), on = out.node(), C] {
      for (std::size_t i = 0; i < ins.size(); ++i) {
        if (!ins[i]->requires_grad) continue;
        for (int j = 0; j < C; ++j)
          ins[i]->grad[static_cast<std::size_t>(j)] +=
              on->grad[i * static_cast<std::size_t>(C) + j];
      }
    });
  }
  return out;
}

MoleBlock mole_stage2_init(const AdapterParams& stage1_adapter, int n_experts,
                           int d_instr, RouterVariant variant,
                           BalanceMode balance, Rng& rng) {
  if (n_experts < 1) throw ConfigError("mole_stage2_init: n_experts >= 1");
  MoleBlock b;
  b.variant = variant;
  b.balance = balance;
  b.experts.reserve(static_cast<std::size_t>(n_experts));
  for (int e = 0; e < n_experts; ++e) {
    b.experts.push_back(stage1_adapter.clone());
  }
  const int d_in = b.router_input_dim(stage1_adapter.width(), d_instr);
  b.router = SoftRouterParams::init(d_in, 4 * d_in, n_experts, rng);
  return b;
}

HostBlock HostBlock::init(int width, int hidden, Rng& rng) {
  HostBlock h;
  h.ln = LayerNormParams::init(width);
  h.mlp = FfnParams::init(width, hidden, rng);
  return h;
}

void HostBlock::collect(const std::string& prefix, ParamSet& ps) {
  ln.collect(prefix + ".ln", ps);
  mlp.collect(prefix + ".ffn", ps);
}

Tensor host_block_forward(const Tensor& x, const Tensor& instruction,
                          const HostBlock& host, const MoleBlock& mole,
                          Rng* noise_rng, MoleTrace* trace) {
  Tensor u = layer_norm(x, host.ln);
  Tensor out = add(x, ffn(u, host.mlp));
  return add(out, mole_forward(u, instruction, mole, noise_rng, trace));
}

}  // namespace mome
