#include "mome/move.hpp"

#include <cmath>

namespace mome {

void AdtConfig::validate() const {
  if (pooled_h < 1 || pooled_w < 1) {
    throw ConfigError("adt: pooled grid dims must be >= 1");
  }
  if (layers < 0) throw ConfigError("adt: negative layer count");
  if (n_heads < 1 || n_points < 1) {
    throw ConfigError("adt: heads and points must be >= 1");
  }
  if (width % n_heads != 0) {
    throw ConfigError("adt: width " + std::to_string(width) +
                      " not divisible by " + std::to_string(n_heads) +
                      " heads");
  }
}

Tensor make_result(Shape shape, bool requires_grad);  // tensor.cpp

namespace {

bool tracked(std::initializer_list<const Tensor*> ins) {
  if (!Tape::current()) return false;
  for (const Tensor* t : ins)
    if (t->requires_grad()) return true;
  return false;
}

// The four taps of one bilinear lookup in pixel space, with in-grid flags.
struct BilTaps {
  long long x0, y0;
  double fx, fy;
};

inline BilTaps bil_taps(double x, double y, int h, int w) {
  const double px = x * (w - 1);
  const double py = y * (h - 1);
  BilTaps t;
  t.x0 = static_cast<long long>(std::floor(px));
  t.y0 = static_cast<long long>(std::floor(py));
  t.fx = px - static_cast<double>(t.x0);
  t.fy = py - static_cast<double>(t.y0);
  return t;
}

inline bool in_grid(long long y, long long x, int h, int w) {
  return y >= 0 && y < h && x >= 0 && x < w;
}

}  // namespace

// ---- adaptive average pooling --------------------------------------------------

Tensor adaptive_avg_pool2d(const Tensor& grid, int out_h, int out_w) {
  if (grid.rank() != 3) {
    throw DimensionError("adaptive_avg_pool2d: rank-3 grid expected, got " +
                         shape_str(grid.shape()));
  }
  if (out_h < 1 || out_w < 1) {
    throw ConfigError("adaptive_avg_pool2d: zero target dims");
  }
  const int h = grid.dim(0), w = grid.dim(1), c = grid.dim(2);
  Tensor out = make_result({out_h, out_w, c}, tracked({&grid}));
  const auto gv = grid.values();
  auto& ov = out.node()->val;
  for (int i = 0; i < out_h; ++i) {
    const int h0 = (i * h) / out_h;
    const int h1 = ((i + 1) * h + out_h - 1) / out_h;  // ceil
    for (int j = 0; j < out_w; ++j) {
      const int w0 = (j * w) / out_w;
      const int w1 = ((j + 1) * w + out_w - 1) / out_w;
      const double n = static_cast<double>((h1 - h0) * (w1 - w0));
      for (int hh = h0; hh < h1; ++hh)
        for (int ww = w0; ww < w1; ++ww) {
          const std::size_t src = (static_cast<std::size_t>(hh) * w + ww) * c;
          const std::size_t dst = (static_cast<std::size_t>(i) * out_w + j) * c;
          for (int ch = 0; ch < c; ++ch) ov[dst + ch] += gv[src + ch];
        }
      const std::size_t dst = (static_cast<std::size_t>(i) * out_w + j) * c;
      for (int ch = 0; ch < c; ++ch) ov[dst + ch] /= n;
    }
  }
  if (out.requires_grad()) {
    Tape::current()->record([gn = grid.node(), on = out.node(), h, w, c, out_h,
                             out_w] {
      for (int i = 0; i < out_h; ++i) {
        const int h0 = (i * h) / out_h;
        const int h1 = ((i + 1) * h + out_h - 1) / out_h;
        for (int j = 0; j < out_w; ++j) {
          const int w0 = (j * w) / out_w;
          const int w1 = ((j + 1) * w + out_w - 1) / out_w;
          const double n = static_cast<double>((h1 - h0) * (w1 - w0));
          const std::size_t dst = (static_cast<std::size_t>(i) * out_w + j) * c;
          for (int hh = h0; hh < h1; ++hh)
            for (int ww = w0; ww < w1; ++ww) {
              const std::size_t src =
                  (static_cast<std::size_t>(hh) * w + ww) * c;
              for (int ch = 0; ch < c; ++ch)
                gn->grad[src + ch] += on->grad[dst + ch] / n;
            }
        }
      }
    });
  }
  return out;
}

// ---- sampling points and weights -----------------------------------------------

namespace {

// offsets (L x Nh x Np x 2) + reference points (L x 2), broadcast over
// heads/points.
Tensor add_ref_points(const Tensor& offsets, const Tensor& ref) {
  const int L = offsets.dim(0);
  if (ref.rank() != 2 || ref.dim(0) != L || ref.dim(1) != 2) {
    throw DimensionError("reference points must be L x 2");
  }
  Tensor out = make_result(offsets.shape(), tracked({&offsets, &ref}));
  const auto offv = offsets.values();
  const auto rv = ref.values();
  auto& ov = out.node()->val;
  const std::size_t per_row = offsets.size() / static_cast<std::size_t>(L);
  for (int i = 0; i < L; ++i) {
    const std::size_t base = static_cast<std::size_t>(i) * per_row;
    for (std::size_t p = 0; p < per_row; p += 2) {
      ov[base + p] = offv[base + p] + rv[static_cast<std::size_t>(i) * 2];
      ov[base + p + 1] =
          offv[base + p + 1] + rv[static_cast<std::size_t>(i) * 2 + 1];
    }
  }
  if (out.requires_grad()) {
    Tape::current()->record([offn = offsets.node(), rn = ref.node(),
                             on = out.node(), L, per_row] {
      for (int i = 0; i < L; ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * per_row;
        for (std::size_t p = 0; p < per_row; p += 2) {
          const double gx = on->grad[base + p];
          const double gy = on->grad[base + p + 1];
          if (offn->requires_grad) {
            offn->grad[base + p] += gx;
            offn->grad[base + p + 1] += gy;
          }
          if (rn->requires_grad) {
            rn->grad[static_cast<std::size_t>(i) * 2] += gx;
            rn->grad[static_cast<std::size_t>(i) * 2 + 1] += gy;
          }
        }
      }
    });
  }
  return out;
}

}  // namespace

Tensor gen_sampling_points(const Tensor& q, const Tensor& ref_points,
                           const LinearParams& proj_p, int n_heads,
                           int n_points) {
  const int L = q.dim(0);
  if (proj_p.w.dim(1) != n_heads * n_points * 2) {
    throw DimensionError("proj_p must map to Nh*Np*2 columns");
  }
  Tensor offsets =
      reshape(linear(q, proj_p), {L, n_heads, n_points, 2});
  return add_ref_points(offsets, ref_points);
}

Tensor gen_attention_weights(const Tensor& q, const LinearParams& proj_w,
                             int n_heads, int n_points) {
  const int L = q.dim(0);
  if (proj_w.w.dim(1) != n_heads * n_points) {
    throw DimensionError("proj_w must map to Nh*Np columns");
  }
  Tensor logits = reshape(linear(q, proj_w), {L, n_heads, n_points});
  // Softmax over the points of each head, per the deformable-attention
  // convention; makes constant-field collapse exact.
  return softmax(logits, 2);
}

// ---- bilinear sampling ---------------------------------------------------------

Tensor bilinear_sample(const Tensor& value, const Tensor& xy) {
  if (value.rank() != 3) {
    throw DimensionError("bilinear_sample: rank-3 value map expected");
  }
  if (xy.size() != 2) {
    throw DimensionError("bilinear_sample: point must have 2 coordinates");
  }
  const int h = value.dim(0), w = value.dim(1), c = value.dim(2);
  Tensor out = make_result({c}, tracked({&value, &xy}));
  const auto vv = value.values();
  const double x = xy.values()[0], y = xy.values()[1];
  const BilTaps t = bil_taps(x, y, h, w);
  auto& ov = out.node()->val;
  const double tw[4] = {(1 - t.fy) * (1 - t.fx), (1 - t.fy) * t.fx,
                        t.fy * (1 - t.fx), t.fy * t.fx};
  const long long ys[4] = {t.y0, t.y0, t.y0 + 1, t.y0 + 1};
  const long long xs[4] = {t.x0, t.x0 + 1, t.x0, t.x0 + 1};
  for (int tap = 0; tap < 4; ++tap) {
    if (!in_grid(ys[tap], xs[tap], h, w)) continue;
    const std::size_t base =
        (static_cast<std::size_t>(ys[tap]) * w + xs[tap]) * c;
    for (int ch = 0; ch < c; ++ch) ov[ch] += tw[tap] * vv[base + ch];
  }
  if (out.requires_grad()) {
    Tape::current()->record([vn = value.node(), pn = xy.node(),
                             on = out.node(), h, w, c] {
      const double x = pn->val[0], y = pn->val[1];
      const BilTaps t = bil_taps(x, y, h, w);
      const double tw[4] = {(1 - t.fy) * (1 - t.fx), (1 - t.fy) * t.fx,
                            t.fy * (1 - t.fx), t.fy * t.fx};
      // d(weight)/d(fx), d(weight)/d(fy) per tap
      const double dwx[4] = {-(1 - t.fy), (1 - t.fy), -t.fy, t.fy};
      const double dwy[4] = {-(1 - t.fx), -t.fx, (1 - t.fx), t.fx};
      const long long ys[4] = {t.y0, t.y0, t.y0 + 1, t.y0 + 1};
      const long long xs[4] = {t.x0, t.x0 + 1, t.x0, t.x0 + 1};
      double gx = 0.0, gy = 0.0;
      for (int tap = 0; tap < 4; ++tap) {
        if (!in_grid(ys[tap], xs[tap], h, w)) continue;
        const std::size_t base =
            (static_cast<std::size_t>(ys[tap]) * w + xs[tap]) * c;
        double dot = 0.0;
        for (int ch = 0; ch < c; ++ch) {
          const double g = on->grad[ch];
          if (vn->requires_grad) vn->grad[base + ch] += tw[tap] * g;
          dot += vn->val[base + ch] * g;
        }
        gx += dwx[tap] * dot;
        gy += dwy[tap] * dot;
      }
      if (pn->requires_grad) {
        pn->grad[0] += gx * (w - 1);
        pn->grad[1] += gy * (h - 1);
      }
    });
  }
  return out;
}

Tensor deform_sample(const Tensor& values, int h, int w, int n_heads,
                     const Tensor& points, const Tensor& weights) {
  if (values.rank() != 2 || values.dim(0) != h * w) {
    throw DimensionError("deform_sample: values must be (H*W) x C");
  }
  const int c = values.dim(1);
  if (c % n_heads != 0) {
    throw ConfigError("deform_sample: C not divisible by n_heads");
  }
  const int L = points.dim(0);
  const int np = points.dim(2);
  if (points.rank() != 4 || points.dim(1) != n_heads || points.dim(3) != 2 ||
      weights.rank() != 3 || weights.dim(0) != L ||
      weights.dim(1) != n_heads || weights.dim(2) != np) {
    throw DimensionError("deform_sample: points must be LxNhxNpx2, weights LxNhxNp");
  }
  const int dh = c / n_heads;
  Tensor out = make_result({L, c}, tracked({&values, &points, &weights}));
  const auto vv = values.values();
  const auto pv = points.values();
  const auto wv = weights.values();
  auto& ov = out.node()->val;
  for (int i = 0; i < L; ++i) {
    for (int j = 0; j < n_heads; ++j) {
      double* orow = ov.data() + static_cast<std::size_t>(i) * c + j * dh;
      for (int k = 0; k < np; ++k) {
        const std::size_t pi =
            ((static_cast<std::size_t>(i) * n_heads + j) * np + k) * 2;
        const double wk = wv[pi / 2];
        const BilTaps t = bil_taps(pv[pi], pv[pi + 1], h, w);
        const double tw[4] = {(1 - t.fy) * (1 - t.fx), (1 - t.fy) * t.fx,
                              t.fy * (1 - t.fx), t.fy * t.fx};
        const long long ys[4] = {t.y0, t.y0, t.y0 + 1, t.y0 + 1};
        const long long xs[4] = {t.x0, t.x0 + 1, t.x0, t.x0 + 1};
        for (int tap = 0; tap < 4; ++tap) {
          if (!in_grid(ys[tap], xs[tap], h, w)) continue;
          const double coef = wk * tw[tap];
          const double* vrow =
              vv.data() +
              (static_cast<std::size_t>(ys[tap]) * w + xs[tap]) * c + j * dh;
          for (int ch = 0; ch < dh; ++ch) orow[ch] += coef * vrow[ch];
        }
      }
    }
  }
  if (out.requires_grad()) {
    Tape::current()->record([vn = values.node(), pn = points.node(),
                             wn = weights.node(), on = out.node(), h, w, c,
                             n_heads, L, np, dh] {
      for (int i = 0; i < L; ++i) {
        for (int j = 0; j < n_heads; ++j) {
          const double* grow =
              on->grad.data() + static_cast<std::size_t>(i) * c + j * dh;
          for (int k = 0; k < np; ++k) {
            const std::size_t pi =
                ((static_cast<std::size_t>(i) * n_heads + j) * np + k) * 2;
            const std::size_t wi = pi / 2;
            const double wk = wn->val[wi];
            const BilTaps t = bil_taps(pn->val[pi], pn->val[pi + 1], h, w);
            const double tw[4] = {(1 - t.fy) * (1 - t.fx), (1 - t.fy) * t.fx,
                                  t.fy * (1 - t.fx), t.fy * t.fx};
            const double dwx[4] = {-(1 - t.fy), (1 - t.fy), -t.fy, t.fy};
            const double dwy[4] = {-(1 - t.fx), -t.fx, (1 - t.fx), t.fx};
            const long long ys[4] = {t.y0, t.y0, t.y0 + 1, t.y0 + 1};
            const long long xs[4] = {t.x0, t.x0 + 1, t.x0, t.x0 + 1};
            double dwk = 0.0, gx = 0.0, gy = 0.0;
            for (int tap = 0; tap < 4; ++tap) {
              if (!in_grid(ys[tap], xs[tap], h, w)) continue;
              const std::size_t vbase =
                  (static_cast<std::size_t>(ys[tap]) * w + xs[tap]) * c +
                  static_cast<std::size_t>(j) * dh;
              double dot = 0.0;
              for (int ch = 0; ch < dh; ++ch) {
                const double g = grow[ch];
                if (vn->requires_grad)
                  vn->grad[vbase + ch] += wk * tw[tap] * g;
                dot += vn->val[vbase + ch] * g;
              }
              dwk += tw[tap] * dot;
              gx += wk * dwx[tap] * dot;
              gy += wk * dwy[tap] * dot;
            }
            if (wn->requires_grad) wn->grad[wi] += dwk;
            if (pn->requires_grad) {
              pn->grad[pi] += gx * (w - 1);
              pn->grad[pi + 1] += gy * (h - 1);
            }
          }
        }
      }
    });
  }
  return out;
}

// ---- deformable cross-attention ------------------------------------------------

DeformAttnParams DeformAttnParams::init(const AdtConfig& cfg, int in_channels,
                                        Rng& rng) {
  cfg.validate();
  DeformAttnParams p;
  const int np2 = cfg.n_heads * cfg.n_points * 2;
  // Zero offsets at init: first samples sit exactly on the reference points.
  p.proj_p = LinearParams::zero(cfg.width, np2);
  p.proj_w = LinearParams::init(cfg.width, cfg.n_heads * cfg.n_points, rng);
  p.proj_v = LinearParams::init(in_channels, cfg.width, rng, cfg.value_bias);
  p.proj_o = LinearParams::init(cfg.width, cfg.width, rng);
  // Uniform grid over [0,1]^2 matching the pooled grid, stored directly.
  std::vector<double> ref(static_cast<std::size_t>(cfg.seq_len()) * 2);
  for (int i = 0; i < cfg.pooled_h; ++i) {
    const double y =
        cfg.pooled_h == 1 ? 0.5 : static_cast<double>(i) / (cfg.pooled_h - 1);
    for (int j = 0; j < cfg.pooled_w; ++j) {
      const double x =
          cfg.pooled_w == 1 ? 0.5 : static_cast<double>(j) / (cfg.pooled_w - 1);
      const std::size_t l = static_cast<std::size_t>(i) * cfg.pooled_w + j;
      ref[l * 2] = x;
      ref[l * 2 + 1] = y;
    }
  }
  p.ref_points = Tensor::from({cfg.seq_len(), 2}, std::move(ref), true);
  return p;
}

void DeformAttnParams::collect(const std::string& prefix, ParamSet& ps) {
  proj_p.collect(prefix + ".proj_p", ps);
  proj_w.collect(prefix + ".proj_w", ps);
  proj_v.collect(prefix + ".proj_v", ps);
  proj_o.collect(prefix + ".proj_o", ps);
  ps.add(prefix + ".ref_points", &ref_points);
}

Tensor deformable_cross_attention(const Tensor& q, const FeatureMap& f,
                                  const DeformAttnParams& p,
                                  const AdtConfig& cfg) {
  cfg.validate();
  const int h = f.height(), w = f.width();
  Tensor points =
      gen_sampling_points(q, p.ref_points, p.proj_p, cfg.n_heads, cfg.n_points);
  Tensor weights = gen_attention_weights(q, p.proj_w, cfg.n_heads, cfg.n_points);
  Tensor flat = reshape(f.grid, {h * w, f.channels()});
  Tensor values = linear(flat, p.proj_v);
  Tensor o = deform_sample(values, h, w, cfg.n_heads, points, weights);
  return linear(o, p.proj_o);
}

DeformLayerParams DeformLayerParams::init(const AdtConfig& cfg,
                                          int in_channels, Rng& rng) {
  DeformLayerParams p;
  p.ln_attn = LayerNormParams::init(cfg.width);
  p.ln_cross = LayerNormParams::init(cfg.width);
  p.ln_ffn = LayerNormParams::init(cfg.width);
  p.attn = SelfAttentionParams::init(cfg.width, cfg.n_heads, rng);
  p.cross = DeformAttnParams::init(cfg, in_channels, rng);
  p.mlp = FfnParams::init(cfg.width, 4 * cfg.width, rng);
  return p;
}

void DeformLayerParams::collect(const std::string& prefix, ParamSet& ps) {
  ln_attn.collect(prefix + ".ln_attn", ps);
  ln_cross.collect(prefix + ".ln_cross", ps);
  ln_ffn.collect(prefix + ".ln_ffn", ps);
  attn.collect(prefix + ".attn", ps);
  cross.collect(prefix + ".cross", ps);
  mlp.collect(prefix + ".ffn", ps);
}

Tensor deformable_layer(const Tensor& q, const FeatureMap& f,
                        const DeformLayerParams& p, const AdtConfig& cfg) {
  Tensor x = add(q, self_attention(layer_norm(q, p.ln_attn), p.attn));
  x = add(x, deformable_cross_attention(layer_norm(x, p.ln_cross), f, p.cross,
                                        cfg));
  x = add(x, ffn(layer_norm(x, p.ln_ffn), p.mlp));
  return x;
}

AdtParams AdtParams::init(const AdtConfig& cfg, int in_channels, Rng& rng) {
  cfg.validate();
  AdtParams p;
  p.proj_in = LinearParams::init(in_channels, cfg.width, rng);
  p.layers.reserve(static_cast<std::size_t>(cfg.layers));
  for (int m = 0; m < cfg.layers; ++m) {
    p.layers.push_back(DeformLayerParams::init(cfg, in_channels, rng));
  }
  return p;
}

void AdtParams::collect(const std::string& prefix, ParamSet& ps) {
  proj_in.collect(prefix + ".proj_in", ps);
  for (std::size_t m = 0; m < layers.size(); ++m) {
    layers[m].collect(prefix + ".layer" + std::to_string(m), ps);
  }
}

Tensor adt_forward(const FeatureMap& f, const AdtConfig& cfg,
                   const AdtParams& params) {
  cfg.validate();
  Tensor pooled = adaptive_avg_pool2d(f.grid, cfg.pooled_h, cfg.pooled_w);
  Tensor seed = reshape(pooled, {cfg.seq_len(), f.channels()});
  Tensor q = linear(seed, params.proj_in);
  for (const auto& layer : params.layers) {
    q = deformable_layer(q, f, layer, cfg);
  }
  return q;
}

// ---- soft router -----------------------------------------------------------------

SoftRouterParams SoftRouterParams::init(int d_in, int d_hidden, int n_out,
                                        Rng& rng) {
  SoftRouterParams p;
  p.hidden = LinearParams::init(d_in, d_hidden, rng);
  // Zero output layer: the gate starts exactly uniform over experts.
  p.out = LinearParams::zero(d_hidden, n_out);
  return p;
}

void SoftRouterParams::collect(const std::string& prefix, ParamSet& ps) {
  hidden.collect(prefix + ".hidden", ps);
  out.collect(prefix + ".out", ps);
}

RouterDecision soft_router(const Tensor& instruction,
                           const SoftRouterParams& p) {
  if (instruction.rank() != 1) {
    throw DimensionError("soft_router: instruction must be rank-1");
  }
  Tensor row = reshape(instruction, {1, instruction.dim(0)});
  Tensor hidden = gelu(linear(row, p.hidden));
  Tensor logits = reshape(linear(hidden, p.out), {p.out.w.dim(1)});
  RouterDecision d;
  d.logits = logits;
  d.weights = softmax(logits, 0);
  return d;
}

MoveOutput move_aggregate(std::vector<Tensor> sequences,
                          RouterDecision decision) {
  if (sequences.empty()) {
    throw ContractError("move_aggregate: no expert sequences");
  }
  if (decision.weights.dim(0) != static_cast<int>(sequences.size())) {
    throw DimensionError("move_aggregate: " +
                         std::to_string(sequences.size()) +
                         " sequences vs weights " +
                         shape_str(decision.weights.shape()));
  }
  MoveOutput out;
  out.fused = weighted_sum(sequences, decision.weights);
  out.decision = std::move(decision);
  out.per_expert = std::move(sequences);
  return out;
}

ImportanceResult expert_importance(const RouterDecision& decision,
                                   std::span<const Tensor> sequences,
                                   bool token_mean) {
  const std::size_t n = sequences.size();
  if (decision.weights.size() != n) {
    throw DimensionError("expert_importance: weight/sequence count mismatch");
  }
  std::vector<double> mag(n, 0.0);
  for (std::size_t e = 0; e < n; ++e) {
    const double g = decision.weights.values()[e];
    const Tensor& s = sequences[e];
    if (token_mean) {
      const int L = s.dim(0), C = s.dim(1);
      double acc = 0.0;
      for (int i = 0; i < L; ++i) {
        double row = 0.0;
        for (int j = 0; j < C; ++j) {
          const double v = s.at(i, j);
          row += v * v;
        }
        acc += std::sqrt(row);
      }
      mag[e] = std::abs(g) * acc / L;
    } else {
      double acc = 0.0;
      for (double v : s.values()) acc += v * v;
      mag[e] = std::abs(g) * std::sqrt(acc);
    }
  }
  double total = 0.0;
  for (double m : mag) total += m;
  ImportanceResult r;
  if (total <= 0.0) {
    r.degenerate = true;
    r.importance =
        Tensor::full({static_cast<int>(n)}, 1.0 / static_cast<double>(n));
  } else {
    for (double& m : mag) m /= total;
    r.importance = Tensor::from({static_cast<int>(n)}, std::move(mag));
  }
  return r;
}

}  // namespace mome
