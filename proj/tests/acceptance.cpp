// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. An optional argv[1] selects a single criterion number while
// iterating locally; ctest runs the full set.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mome/cli.hpp"
#include "mome/mole.hpp"
#include "mome/model.hpp"
#include "mome/serialize.hpp"
#include "mome/train.hpp"

using namespace mome;
using Clock = std::chrono::steady_clock;

namespace {

int g_failures = 0;

void report(int criterion, bool pass, const std::string& what) {
  std::printf("[%s] criterion %d: %s\n", pass ? "PASS" : "FAIL", criterion,
              what.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

double elapsed(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = true,
                     double scale = 1.0) {
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = scale * rng.gaussian();
  return Tensor::from(std::move(shape), std::move(data), requires_grad);
}

FeatureMap random_map(int h, int w, int c, Rng& rng, bool grad = false) {
  FeatureMap f;
  f.grid = random_tensor({h, w, c}, rng, grad);
  return f;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

// ---- criterion 1: gradient correctness --------------------------------------

double max_err_over_seeds(
    const std::function<double(Rng&)>& one_check, int seeds = 5) {
  double worst = 0.0;
  for (int s = 0; s < seeds; ++s) {
    Rng rng(1000 + static_cast<std::uint64_t>(s) * 37);
    worst = std::max(worst, one_check(rng));
  }
  return worst;
}

void criterion1() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string worst_name = "none";
  auto track = [&](const char* name, double err) {
    if (err > worst) {
      worst = err;
      worst_name = name;
    }
  };

  track("matmul", max_err_over_seeds([](Rng& rng) {
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
    auto f = [&] { return sum(matmul(a, b)); };
    std::vector<Tensor*> ps{&a, &b};
    return grad_check_all(f, ps);
  }));
  track("matmul_bias", max_err_over_seeds([](Rng& rng) {
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
    Tensor c = random_tensor({2}, rng);
    auto f = [&] { return sum(matmul_bias(a, b, c)); };
    std::vector<Tensor*> ps{&a, &b, &c};
    return grad_check_all(f, ps);
  }));
  track("elementwise", max_err_over_seeds([](Rng& rng) {
    Tensor x = random_tensor({3, 4}, rng), y = random_tensor({3, 4}, rng);
    Tensor s = random_tensor({1}, rng);
    auto f = [&] {
      Tensor t = add(mul(x, y), sub(x, y));
      t = add(gelu(t), add(relu(t), sigmoid(t)));
      return sum(scale_by(add_scalar(scale(t, 1.3), 0.2), s));
    };
    std::vector<Tensor*> ps{&x, &y, &s};
    return grad_check_all(f, ps);
  }));
  track("softmax", max_err_over_seeds([](Rng& rng) {
    Tensor x = random_tensor({3, 5}, rng);
    Tensor p = random_tensor({3, 5}, rng, false);
    auto f = [&] { return sum(mul(softmax(x, 1), p)); };
    return grad_check(f, x);
  }));
  track("layer_norm", max_err_over_seeds([](Rng& rng) {
    Tensor x = random_tensor({3, 4}, rng);
    Tensor g = random_tensor({4}, rng), b = random_tensor({4}, rng);
    Tensor p = random_tensor({3, 4}, rng, false);
    auto f = [&] { return sum(mul(layer_norm(x, g, b), p)); };
    std::vector<Tensor*> ps{&x, &g, &b};
    return grad_check_all(f, ps);
  }));
  track("plumbing", max_err_over_seeds([](Rng& rng) {
    Tensor x = random_tensor({4, 6}, rng);
    Tensor v = random_tensor({6}, rng);
    auto f = [&] {
      Tensor t = add_rowvec(x, v);
      std::vector<Tensor> parts{slice_cols(t, 0, 3), slice_cols(t, 3, 3)};
      Tensor joined = concat_cols(parts);
      return sum(mul(transpose(reshape(joined, {4, 6})), transpose(x)));
    };
    std::vector<Tensor*> ps{&x, &v};
    return grad_check_all(f, ps);
  }));
  track("reductions", max_err_over_seeds([](Rng& rng) {
    Tensor x = random_tensor({4, 6}, rng);
    auto f = [&] { return add(mean(x), sum(mul(mean_rows(x), mean_rows(x)))); };
    return grad_check(f, x);
  }));
  track("weighted_sum", max_err_over_seeds([](Rng& rng) {
    std::vector<Tensor> seqs{random_tensor({3, 4}, rng),
                             random_tensor({3, 4}, rng),
                             random_tensor({3, 4}, rng)};
    Tensor w = random_tensor({3}, rng);
    Tensor p = random_tensor({3, 4}, rng, false);
    auto f = [&] { return sum(mul(weighted_sum(seqs, w), p)); };
    std::vector<Tensor*> ps{&seqs[0], &seqs[2], &w};
    return grad_check_all(f, ps);
  }));
  track("self_attention", max_err_over_seeds([](Rng& rng) {
    SelfAttentionParams p = SelfAttentionParams::init(8, 2, rng);
    Tensor x = random_tensor({3, 8}, rng);
    Tensor probe = random_tensor({3, 8}, rng, false);
    auto f = [&] { return sum(mul(self_attention(x, p), probe)); };
    std::vector<Tensor*> ps{&x, &p.q.w, &p.k.w, &p.v.w, &p.o.w, &p.o.b};
    return grad_check_all(f, ps, 1e-6);
  }));
  track("adaptive_pool", max_err_over_seeds([](Rng& rng) {
    Tensor g = random_tensor({5, 7, 2}, rng);
    Tensor p = random_tensor({2, 3, 2}, rng, false);
    auto f = [&] { return sum(mul(adaptive_avg_pool2d(g, 2, 3), p)); };
    return grad_check(f, g);
  }));
  track("bilinear", max_err_over_seeds([](Rng& rng) {
    Tensor v = random_tensor({4, 5, 3}, rng);
    Tensor xy = Tensor::from(
        {2}, {rng.uniform(0.1, 0.9) + 0.013, rng.uniform(0.1, 0.9) + 0.017},
        true);
    auto f = [&] { return sum(bilinear_sample(v, xy)); };
    std::vector<Tensor*> ps{&v, &xy};
    return grad_check_all(f, ps, 1e-6);
  }));
  track("deform_sample", max_err_over_seeds([](Rng& rng) {
    Tensor values = random_tensor({20, 6}, rng);
    Tensor points = random_tensor({3, 2, 2, 2}, rng, true, 0.3);
    for (double& v : points.mutable_values()) v += 0.45;
    Tensor weights = softmax(random_tensor({3, 2, 2}, rng), 2);
    Tensor probe = random_tensor({3, 6}, rng, false);
    auto f = [&] {
      return sum(mul(deform_sample(values, 4, 5, 2, points, weights), probe));
    };
    std::vector<Tensor*> ps{&values, &points};
    return grad_check_all(f, ps, 1e-6);
  }));
  track("adapter", max_err_over_seeds([](Rng& rng) {
    AdapterParams a = AdapterParams::init(5, 3, rng);
    a.s.mutable_values()[0] = rng.gaussian();
    Tensor x = random_tensor({3, 5}, rng);
    Tensor p = random_tensor({3, 5}, rng, false);
    auto f = [&] { return sum(mul(adapter_forward(x, a), p)); };
    std::vector<Tensor*> ps{&x, &a.down, &a.up, &a.s};
    return grad_check_all(f, ps, 1e-6);
  }));
  track("load_balance", max_err_over_seeds([](Rng& rng) {
    std::vector<Tensor> raw;
    for (int i = 0; i < 5; ++i) raw.push_back(random_tensor({4}, rng));
    auto f = [&] {
      std::vector<Tensor> probs;
      std::vector<int> sel;
      for (auto& r : raw) {
        Tensor p = softmax(r, 0);
        sel.push_back(route_top1(p).index);
        probs.push_back(p);
      }
      return load_balance_loss(sel, probs);
    };
    std::vector<Tensor*> ps{&raw[0], &raw[4]};
    return grad_check_all(f, ps, 1e-6);
  }));

  // Composite: full ADT stack at M=2.
  track("adt_stack_m2", max_err_over_seeds([](Rng& rng) {
    AdtConfig cfg;
    cfg.pooled_h = 2;
    cfg.pooled_w = 2;
    cfg.layers = 2;
    cfg.n_heads = 2;
    cfg.n_points = 2;
    cfg.width = 8;
    AdtParams adt = AdtParams::init(cfg, 3, rng);
    // Keep sampling points off integer pixel coordinates (bilinear kinks).
    for (auto& layer : adt.layers) {
      for (double& v : layer.cross.ref_points.mutable_values()) {
        v = 0.17 + 0.61 * v;
      }
    }
    FeatureMap f = random_map(5, 4, 3, rng, true);
    Tensor probe = random_tensor({4, 8}, rng, false);
    auto loss = [&] { return sum(mul(adt_forward(f, cfg, adt), probe)); };
    std::vector<Tensor*> ps{&adt.proj_in.w,
                            &adt.layers[0].cross.proj_v.w,
                            &adt.layers[0].cross.proj_w.w,
                            &adt.layers[0].cross.proj_p.w,
                            &adt.layers[0].cross.ref_points,
                            &adt.layers[1].attn.q.w,
                            &adt.layers[1].mlp.in.w,
                            &adt.layers[1].ln_ffn.gain,
                            &f.grid};
    return grad_check_all(loss, ps, 1e-6);
  }));
  // Composite: router + aggregation.
  track("move_router_agg", max_err_over_seeds([](Rng& rng) {
    SoftRouterParams router = SoftRouterParams::init(5, 20, 3, rng);
    for (double& v : router.out.w.mutable_values()) v = 0.3 * rng.gaussian();
    std::vector<Tensor> seqs{random_tensor({3, 4}, rng),
                             random_tensor({3, 4}, rng),
                             random_tensor({3, 4}, rng)};
    Tensor instr = random_tensor({5}, rng, false);
    Tensor probe = random_tensor({3, 4}, rng, false);
    auto loss = [&] {
      RouterDecision d = soft_router(instr, router);
      return sum(mul(move_aggregate(seqs, d).fused, probe));
    };
    std::vector<Tensor*> ps{&router.hidden.w, &router.hidden.b, &router.out.w,
                            &router.out.b, &seqs[0], &seqs[1]};
    return grad_check_all(loss, ps, 1e-6);
  }));
  // Composite: full MoLE block through the discrete gate; expert and host
  // parameters only (router trains through the surrogate by design).
  track("mole_block", max_err_over_seeds([](Rng& rng) {
    const int width = 6, d_instr = 4;
    MoleBlock block = MoleBlock::init(width, 3, 3, d_instr,
                                      RouterVariant::kInstance,
                                      BalanceMode::kNone, rng);
    for (auto& e : block.experts) e.s.mutable_values()[0] = rng.gaussian();
    block.router.out.b.mutable_values()[1] = 2.0;
    HostBlock host = HostBlock::init(width, 12, rng);
    Tensor x = random_tensor({3, width}, rng);
    Tensor instr = random_tensor({d_instr}, rng, false);
    Tensor probe = random_tensor({3, width}, rng, false);
    auto loss = [&] {
      return sum(mul(host_block_forward(x, instr, host, block), probe));
    };
    std::vector<Tensor*> ps{&block.experts[1].down, &block.experts[1].up,
                            &block.experts[1].s, &host.mlp.in.w,
                            &host.mlp.out.w, &host.ln.gain, &x};
    return grad_check_all(loss, ps, 1e-6);
  }));

  const double secs = elapsed(t0);
  report(1, worst < 1e-4 && secs < 120.0,
         "gradient correctness: max rel err " + fmt(worst) + " (worst: " +
             worst_name + "), " + fmt(secs) + "s (< 1e-4, < 120s)");
}

// ---- criterion 2: equation-level oracles -------------------------------------

std::vector<double> pool_oracle(const Tensor& grid, int oh, int ow) {
  const int h = grid.dim(0), w = grid.dim(1), c = grid.dim(2);
  std::vector<double> out(static_cast<std::size_t>(oh) * ow * c, 0.0);
  for (int i = 0; i < oh; ++i) {
    const int h0 = static_cast<int>(std::floor(double(i) * h / oh));
    const int h1 = static_cast<int>(std::ceil(double(i + 1) * h / oh));
    for (int j = 0; j < ow; ++j) {
      const int w0 = static_cast<int>(std::floor(double(j) * w / ow));
      const int w1 = static_cast<int>(std::ceil(double(j + 1) * w / ow));
      for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        int n = 0;
        for (int hh = h0; hh < h1; ++hh)
          for (int ww = w0; ww < w1; ++ww) {
            acc += grid.at(hh, ww, ch);
            ++n;
          }
        out[(static_cast<std::size_t>(i) * ow + j) * c + ch] = acc / n;
      }
    }
  }
  return out;
}

std::vector<double> bilinear_oracle(const Tensor& value, double x, double y) {
  const int h = value.dim(0), w = value.dim(1), c = value.dim(2);
  const double px = x * (w - 1), py = y * (h - 1);
  std::vector<double> out(static_cast<std::size_t>(c), 0.0);
  for (int hh = 0; hh < h; ++hh)
    for (int ww = 0; ww < w; ++ww) {
      const double wx = std::max(0.0, 1.0 - std::abs(px - ww));
      const double wy = std::max(0.0, 1.0 - std::abs(py - hh));
      if (wx <= 0.0 || wy <= 0.0) continue;
      for (int ch = 0; ch < c; ++ch)
        out[static_cast<std::size_t>(ch)] += wx * wy * value.at(hh, ww, ch);
    }
  return out;
}

void criterion2() {
  Rng rng(2024);
  bool pool_ok = true;
  for (int h = 1; h <= 8 && pool_ok; ++h)
    for (int w = 1; w <= 8 && pool_ok; ++w) {
      Tensor grid = random_tensor({h, w, 2}, rng, false);
      for (int oh = 1; oh <= 4 && pool_ok; ++oh)
        for (int ow = 1; ow <= 4 && pool_ok; ++ow) {
          Tensor got = adaptive_avg_pool2d(grid, oh, ow);
          const auto expect = pool_oracle(grid, oh, ow);
          for (std::size_t i = 0; i < expect.size(); ++i) {
            if (got.values()[i] != expect[i]) pool_ok = false;
          }
        }
    }

  Tensor value = random_tensor({5, 6, 3}, rng, false);
  double bil_worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const double x = rng.uniform(-0.7, 1.7);
    const double y = rng.uniform(-0.7, 1.7);
    Tensor got = bilinear_sample(value, Tensor::from({2}, {x, y}));
    const auto expect = bilinear_oracle(value, x, y);
    for (int c = 0; c < 3; ++c) {
      bil_worst = std::max(
          bil_worst, std::abs(got.at(c) - expect[static_cast<std::size_t>(c)]));
    }
  }

  double lb_worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const int batch = 16, k = 4;
    std::vector<int> sel;
    std::vector<Tensor> probs;
    std::vector<double> fraction(static_cast<std::size_t>(k), 0.0);
    std::vector<double> mass(static_cast<std::size_t>(k), 0.0);
    for (int i = 0; i < batch; ++i) {
      Tensor p = softmax(random_tensor({k}, rng, false, 1.5), 0);
      const int a = route_top1(p).index;
      sel.push_back(a);
      fraction[static_cast<std::size_t>(a)] += 1.0 / batch;
      for (int j = 0; j < k; ++j)
        mass[static_cast<std::size_t>(j)] += p.at(j) / batch;
      probs.push_back(p);
    }
    double direct = 0.0;
    for (int j = 0; j < k; ++j)
      direct += fraction[static_cast<std::size_t>(j)] *
                mass[static_cast<std::size_t>(j)];
    direct *= k;
    lb_worst =
        std::max(lb_worst, std::abs(load_balance_loss(sel, probs).item() - direct));
  }

  Tensor logits = Tensor::from({4}, {0.4, -0.6, 1.0, 0.1});
  Tensor expect_freq = softmax(logits, 0);
  std::array<long, 4> counts{0, 0, 0, 0};
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) {
    counts[static_cast<std::size_t>(
        route_top1(gumbel_perturb(logits, 1.0, rng)).index)] += 1;
  }
  double gumbel_worst = 0.0;
  for (int k = 0; k < 4; ++k) {
    gumbel_worst = std::max(
        gumbel_worst, std::abs(static_cast<double>(counts[static_cast<std::size_t>(k)]) /
                                   draws -
                               expect_freq.at(k)));
  }

  report(2,
         pool_ok && bil_worst < 1e-12 && lb_worst < 1e-12 &&
             gumbel_worst < 0.01,
         "eq-level oracles: pooling sweep " +
             std::string(pool_ok ? "exact" : "MISMATCH") + ", bilinear max " +
             fmt(bil_worst) + " (<1e-12), LB max " + fmt(lb_worst) +
             " (<1e-12), Gumbel freq max dev " + fmt(gumbel_worst) +
             " (<0.01)");
}

// ---- criterion 3: contract invariants ---------------------------------------

void criterion3() {
  Rng rng(3030);
  bool ok = true;
  std::string detail;

  // Router simplex closure.
  SoftRouterParams router = SoftRouterParams::init(6, 24, 3, rng);
  for (double& v : router.out.w.mutable_values()) v = 0.5 * rng.gaussian();
  for (int trial = 0; trial < 200; ++trial) {
    RouterDecision d = soft_router(random_tensor({6}, rng, false, 2.0), router);
    double s = 0.0;
    for (int i = 0; i < 3; ++i) {
      if (d.weights.at(i) < 0.0) ok = false;
      s += d.weights.at(i);
    }
    if (std::abs(s - 1.0) > 1e-12) ok = false;
  }
  if (!ok) detail += " router-simplex";

  // Top-1 one-hot contract with deterministic ties.
  bool top1_ok = route_top1(Tensor::from({3}, {2, 2, 1})).index == 0;
  for (int trial = 0; trial < 1000; ++trial) {
    Top1Result r = route_top1(random_tensor({5}, rng, false));
    double s = 0.0;
    for (int i = 0; i < 5; ++i) {
      const double v = r.one_hot.at(i);
      if (v != 0.0 && v != 1.0) top1_ok = false;
      s += v;
    }
    if (s != 1.0) top1_ok = false;
  }
  if (!top1_ok) detail += " top1";
  ok = ok && top1_ok;

  // Unified-length ADT output over 50 random shapes.
  AdtConfig cfg;
  cfg.pooled_h = 3;
  cfg.pooled_w = 3;
  cfg.layers = 2;
  cfg.n_heads = 4;
  cfg.n_points = 2;
  cfg.width = 32;
  AdtParams adt = AdtParams::init(cfg, 5, rng);
  bool shape_ok = true;
  for (int trial = 0; trial < 50; ++trial) {
    const int h = 1 + static_cast<int>(rng.below(12));
    const int w = 1 + static_cast<int>(rng.below(12));
    Tensor out = adt_forward(random_map(h, w, 5, rng), cfg, adt);
    if (out.shape() != Shape{9, 32}) shape_ok = false;
    for (double v : out.values()) {
      if (!std::isfinite(v)) shape_ok = false;
    }
  }
  if (!shape_ok) detail += " unified-length";
  ok = ok && shape_ok;

  // Constant-field collapse within 1e-10.
  AdtConfig dcfg;
  dcfg.pooled_h = 2;
  dcfg.pooled_w = 2;
  dcfg.layers = 1;
  dcfg.n_heads = 2;
  dcfg.n_points = 2;
  dcfg.width = 8;
  DeformAttnParams dp = DeformAttnParams::init(dcfg, 3, rng);
  FeatureMap cf;
  cf.grid = Tensor::full({5, 6, 3}, -0.8);
  Tensor q = random_tensor({4, 8}, rng, false);
  Tensor base = deformable_cross_attention(q, cf, dp, dcfg);
  bool collapse_ok = true;
  for (int trial = 0; trial < 20; ++trial) {
    for (double& v : dp.ref_points.mutable_values()) v = rng.uniform(0.0, 1.0);
    Tensor out = deformable_cross_attention(q, cf, dp, dcfg);
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (std::abs(out.values()[i] - base.values()[i]) > 1e-10)
        collapse_ok = false;
    }
  }
  if (!collapse_ok) detail += " constant-field";
  ok = ok && collapse_ok;

  // K=1 MoLE equals the single adapter bitwise.
  MoleBlock k1 = MoleBlock::init(6, 3, 1, 4, RouterVariant::kInstance,
                                 BalanceMode::kNone, rng);
  k1.experts[0].s.mutable_values()[0] = 0.9;
  Tensor x = random_tensor({4, 6}, rng, false);
  Tensor instr = random_tensor({4}, rng, false);
  Tensor via = mole_forward(x, instr, k1);
  Tensor direct = adapter_forward(x, k1.experts[0]);
  bool k1_ok = true;
  for (std::size_t i = 0; i < via.size(); ++i) {
    if (via.values()[i] != direct.values()[i]) k1_ok = false;
  }
  if (!k1_ok) detail += " k1";
  ok = ok && k1_ok;

  // Stage-2 init preserves the stage-1 loss within 1e-10.
  SynthConfig sd;
  sd.d_instr = 8;
  sd.subspace_dim = 4;
  TaskSuite suite = make_tasks(33, 4, 1, sd);
  std::vector<int> ch;
  for (auto& e : suite.encoders) ch.push_back(e.channels);
  ModelConfig mc;
  mc.adt = dcfg;
  mc.d_instr = 8;
  mc.host_layers = 2;
  mc.host_hidden = 16;
  mc.adapter_bottleneck = 4;
  mc.mole_experts = 1;
  Rng mrng(34);
  MomeModel stage1 = MomeModel::init(mc, ch, mrng);
  TrainConfig tc;
  tc.steps = 30;
  tc.batch = 8;
  tc.warmup = 5;
  tc.eval_batches = 2;
  tc.seed = 33;
  train(stage1, suite, tc);
  Rng srng(35);
  MomeModel stage2 =
      make_stage2_model(stage1, 4, RouterVariant::kInstance, BalanceMode::kNone,
                        srng);
  EvalResult e1 = evaluate(stage1, suite, 33, 2, 8, -1);
  EvalResult e2 = evaluate(stage2, suite, 33, 2, 8, -1);
  bool stage2_ok = true;
  for (std::size_t g = 0; g < 4; ++g) {
    if (std::abs(e1.group_loss[g] - e2.group_loss[g]) > 1e-10)
      stage2_ok = false;
  }
  if (!stage2_ok) detail += " stage2-init";
  ok = ok && stage2_ok;

  report(3, ok,
         "contract invariants: simplex, top-1 ties, unified length, "
         "constant-field collapse, K=1 bitwise, stage-2 loss preserved" +
             (detail.empty() ? "" : " — failing:" + detail));
}

// ---- criteria 4-6: training-level behavior ------------------------------------

struct SeedRuns {
  // Final per-group losses per variant.
  std::map<std::string, std::array<double, 4>> group_loss;
  std::map<std::string, double> avg_loss;
  double fraction_var_plain = 0.0;
  double fraction_var_lb = 0.0;
};

std::vector<int> suite_channels(const TaskSuite& suite) {
  std::vector<int> ch;
  for (const auto& e : suite.encoders) ch.push_back(e.channels);
  return ch;
}

double mole_fraction_variance(const ExpertStats& stats) {
  double var_sum = 0.0;
  int layers = 0;
  for (int layer : stats.layer_ids()) {
    if (layer < 0) continue;
    std::vector<double> agg;
    for (const auto& [task, per_layer] : stats.counts) {
      auto it = per_layer.find(layer);
      if (it == per_layer.end()) continue;
      if (agg.size() < it->second.size()) agg.resize(it->second.size(), 0.0);
      for (std::size_t e = 0; e < it->second.size(); ++e) agg[e] += it->second[e];
    }
    double total = 0.0;
    for (double a : agg) total += a;
    if (total <= 0.0 || agg.empty()) continue;
    const double mean = 1.0 / static_cast<double>(agg.size());
    double var = 0.0;
    for (double a : agg) var += (a / total - mean) * (a / total - mean);
    var_sum += var / static_cast<double>(agg.size());
    ++layers;
  }
  return layers > 0 ? var_sum / layers : 0.0;
}

// Shared stage-1 run per seed; stage-2 variants branch from its checkpoint.
SeedRuns run_seed(const TaskSuite& suite, std::uint64_t seed, int steps) {
  SeedRuns out;
  ModelConfig base;  // desk defaults
  base.mole_experts = 4;
  TrainConfig tc;
  tc.steps = steps;
  tc.warmup = 50;
  tc.eval_batches = 8;
  tc.seed = seed;

  for (const auto& v : {"single-expert-0", "single-expert-1", "single-expert-2",
                        "avgpool-addition", "adt-addition"}) {
    AblationResult r = run_ablation(v, suite, base, tc);
    out.group_loss[v] = r.group_loss;
    out.avg_loss[v] = r.record.final_eval.avg_loss;
  }

  // adt-router doubles as the stage-1 prerequisite.
  ModelConfig mc = base;
  mc.mole_experts = 1;
  Rng init_rng = Rng(seed).fork(0x1417);
  MomeModel stage1 = MomeModel::init(mc, suite_channels(suite), init_rng);
  RunRecord rec1 = train(stage1, suite, tc);
  out.group_loss["adt-router"] = rec1.final_eval.group_loss;
  out.avg_loss["adt-router"] = rec1.final_eval.avg_loss;

  const auto ckpt = std::filesystem::temp_directory_path() /
                    ("mome_acc_stage1_" + std::to_string(seed) + ".mome");
  {
    ParamSet ps = stage1.all_params();
    save_checkpoint(ckpt, ps);
  }
  auto branch = [&](BalanceMode balance, const char* name) {
    Rng fresh_rng = Rng(seed).fork(0x1417);
    MomeModel s1 = MomeModel::init(mc, suite_channels(suite), fresh_rng);
    ParamSet ps = s1.all_params();
    load_checkpoint(ckpt, ps);
    Rng s2rng = Rng(seed).fork(0x57a2);
    MomeModel m2 = make_stage2_model(s1, 4, RouterVariant::kInstance, balance,
                                     s2rng);
    RunRecord rec = train(m2, suite, tc);
    out.group_loss[name] = rec.final_eval.group_loss;
    out.avg_loss[name] = rec.final_eval.avg_loss;
    return mole_fraction_variance(rec.final_eval.stats);
  };
  out.fraction_var_plain = branch(BalanceMode::kNone, "mole-i");
  out.fraction_var_lb = branch(BalanceMode::kLoadBalance, "mole-i-lb");
  std::filesystem::remove(ckpt);
  return out;
}

void criterion4() {
  const auto t0 = Clock::now();
  SynthConfig sd;  // defaults
  TaskSuite suite = make_tasks(42, 4, 2, sd);
  ModelConfig mc;  // desk defaults (C=32, 3x3 grid, M=2, 4 heads, 2 points)
  mc.mole_experts = 1;
  TrainConfig tc;  // 2000 steps, batch 32, warmup 100
  tc.seed = 42;

  Rng init_rng = Rng(42).fork(0x1417);
  MomeModel stage1 = MomeModel::init(mc, suite_channels(suite), init_rng);
  train(stage1, suite, tc);

  Rng s2rng = Rng(42).fork(0x57a2);
  MomeModel stage2 = make_stage2_model(stage1, 4, RouterVariant::kInstance,
                                       BalanceMode::kNone, s2rng);
  RunRecord rec2 = train(stage2, suite, tc);
  const double secs = elapsed(t0);

  // (a) importance mass on each group's informative expert.
  const auto& imp = rec2.final_eval.report.group_importance;
  bool imp_ok = imp.size() == 4;
  std::string imp_detail;
  for (int g = 0; g < 4 && imp_ok; ++g) {
    const int e = sd.informative_expert[static_cast<std::size_t>(g)];
    const double mass = imp[static_cast<std::size_t>(g)][static_cast<std::size_t>(e)];
    imp_detail += (g ? "," : "") + fmt(mass);
    if (mass < 0.5) imp_ok = false;
  }

  // (b) instance-router NMI in at least half the layers, near zero at init.
  int strong = 0;
  std::string nmi_detail;
  for (double nmi : rec2.final_eval.layer_nmi) {
    nmi_detail += (nmi_detail.empty() ? "" : ",") + fmt(nmi);
    if (nmi >= 0.3) ++strong;
  }
  const int layers = static_cast<int>(rec2.final_eval.layer_nmi.size());
  bool nmi_ok = layers > 0 && 2 * strong >= layers;
  bool init_ok = true;
  for (double nmi : rec2.init_eval.layer_nmi) {
    if (nmi >= 0.05) init_ok = false;
  }

  report(4,
         imp_ok && nmi_ok && init_ok && secs < 900.0,
         "specialization emergence: importance per group [" + imp_detail +
             "] (>=0.5), final NMI [" + nmi_detail + "] (>=0.3 in >=" +
             std::to_string((layers + 1) / 2) + "/" + std::to_string(layers) +
             " layers), init NMI < 0.05 " + (init_ok ? "yes" : "NO") + ", " +
             fmt(secs) + "s (< 900s)");
}

void criteria56() {
  const int steps = 700;
  SynthConfig sd;
  TaskSuite suite = make_tasks(42, 4, 2, sd);
  std::vector<SeedRuns> runs;
  for (std::uint64_t seed : {42ull, 43ull, 44ull}) {
    runs.push_back(run_seed(suite, seed, steps));
  }

  auto mean_avg = [&](const std::string& v) {
    double s = 0.0;
    for (const auto& r : runs) s += r.avg_loss.at(v);
    return s / static_cast<double>(runs.size());
  };
  const double router = mean_avg("adt-router");
  const double adt_add = mean_avg("adt-addition");
  const double pool_add = mean_avg("avgpool-addition");
  const bool order_ok = router <= adt_add && adt_add <= pool_add;

  // Fused (full MoME, stage 2) beats each single-expert model on that
  // expert's two worst groups, per seed-averaged losses.
  std::array<double, 4> fused{0, 0, 0, 0};
  for (const auto& r : runs) {
    for (std::size_t g = 0; g < 4; ++g)
      fused[g] += r.group_loss.at("mole-i")[g] / runs.size();
  }
  bool beats_ok = true;
  std::string beats_detail;
  for (int e = 0; e < 3; ++e) {
    const std::string name = "single-expert-" + std::to_string(e);
    std::array<double, 4> single{0, 0, 0, 0};
    for (const auto& r : runs) {
      for (std::size_t g = 0; g < 4; ++g)
        single[g] += r.group_loss.at(name)[g] / runs.size();
    }
    // Two worst groups for this specialist.
    std::array<int, 4> idx{0, 1, 2, 3};
    std::sort(idx.begin(), idx.end(),
              [&](int a, int b) { return single[static_cast<std::size_t>(a)] > single[static_cast<std::size_t>(b)]; });
    for (int k = 0; k < 2; ++k) {
      const int g = idx[static_cast<std::size_t>(k)];
      if (fused[static_cast<std::size_t>(g)] >= single[static_cast<std::size_t>(g)]) {
        beats_ok = false;
        beats_detail += " " + name + "@" + group_short_name(g);
      }
    }
  }

  report(5, order_ok && beats_ok,
         "ablation ordering: router " + fmt(router) + " <= adt+add " +
             fmt(adt_add) + " <= pool+add " + fmt(pool_add) +
             (order_ok ? "" : " ORDER VIOLATED") +
             "; fused beats each specialist's two worst groups" +
             (beats_ok ? "" : " EXCEPT" + beats_detail));

  bool lb_ok = true;
  std::string lb_detail;
  for (std::size_t s = 0; s < runs.size(); ++s) {
    lb_detail += (s ? "; " : "") + fmt(runs[s].fraction_var_plain) + "->" +
                 fmt(runs[s].fraction_var_lb);
    if (!(runs[s].fraction_var_lb < runs[s].fraction_var_plain)) lb_ok = false;
  }
  report(6, lb_ok,
         "load-balance effect: expert-fraction variance strictly reduced on "
         "each paired seed (" + lb_detail + ")");
}

void criterion7() {
  namespace fs = std::filesystem;
  const fs::path dir =
      fs::temp_directory_path() / "mome_acceptance_determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const fs::path cfg_path = dir / "config.json";
  {
    std::ofstream os(cfg_path);
    os << R"({"seed": 7, "train": {"steps": 25, "batch": 8, "warmup": 5,
              "eval_batches": 2}})";
  }
  cli::CommonFlags f1, f2;
  f1.out = (dir / "a").string();
  f2.out = (dir / "b").string();
  const int rc1 = cli::cmd_train(cfg_path.string(), f1);
  const int rc2 = cli::cmd_train(cfg_path.string(), f2);
  auto slurp = [](const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
  };
  const std::string a = slurp(dir / "a" / "curves.csv");
  const std::string b = slurp(dir / "b" / "curves.csv");
  const bool ok = rc1 == 0 && rc2 == 0 && !a.empty() && a == b;
  report(7, ok,
         "determinism: cmd_train twice with one seed, curves byte-identical (" +
             std::to_string(a.size()) + " bytes)");
  fs::remove_all(dir);
}

}  // namespace

int main(int argc, char** argv) {
  const int only = argc > 1 ? std::atoi(argv[1]) : 0;
  auto want = [&](int c) { return only == 0 || only == c; };

  if (want(1)) criterion1();
  if (want(2)) criterion2();
  if (want(3)) criterion3();
  if (want(4)) criterion4();
  if (want(5) || want(6)) criteria56();
  if (want(7)) criterion7();

  if (g_failures > 0) {
    std::printf("%d criterion(s) failed\n", g_failures);
    return 1;
  }
  std::printf("all criteria passed\n");
  return 0;
}
