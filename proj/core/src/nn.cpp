#include "mome/nn.hpp"

#include <algorithm>
#include <cmath>

namespace mome {

Tensor make_result(Shape shape, bool requires_grad);  // tensor.cpp

namespace {

// Fused multi-head attention core over projected q/k/v (each L x C): one tape
// record instead of ~7 per head. Softmax weights are recomputed-free in
// backward from the saved attention matrix.
Tensor mha_core(const Tensor& q, const Tensor& k, const Tensor& v,
                int n_heads, double sc) {
  const int L = q.dim(0), C = q.dim(1);
  const int dh = C / n_heads;
  const bool need = Tape::current() &&
                    (q.requires_grad() || k.requires_grad() ||
                     v.requires_grad());
  Tensor out = make_result({L, C}, need);
  // attn[h][i*L+j], saved for backward.
  std::vector<std::vector<double>> attn(
      static_cast<std::size_t>(n_heads),
      std::vector<double>(static_cast<std::size_t>(L) * L));
  const double* __restrict Q = q.values().data();
  const double* __restrict K = k.values().data();
  const double* __restrict V = v.values().data();
  double* __restrict O = out.node()->val.data();
  for (int h = 0; h < n_heads; ++h) {
    const int off = h * dh;
    double* __restrict A = attn[static_cast<std::size_t>(h)].data();
    for (int i = 0; i < L; ++i) {
      double* __restrict arow = A + static_cast<std::size_t>(i) * L;
      double mx = -1e300;
      for (int j = 0; j < L; ++j) {
        double s = 0.0;
        const double* __restrict qi = Q + static_cast<std::size_t>(i) * C + off;
        const double* __restrict kj = K + static_cast<std::size_t>(j) * C + off;
        for (int d = 0; d < dh; ++d) s += qi[d] * kj[d];
        arow[j] = s * sc;
        mx = std::max(mx, arow[j]);
      }
      double z = 0.0;
      for (int j = 0; j < L; ++j) {
        arow[j] = std::exp(arow[j] - mx);
        z += arow[j];
      }
      double* __restrict orow = O + static_cast<std::size_t>(i) * C + off;
      for (int j = 0; j < L; ++j) {
        arow[j] /= z;
        const double* __restrict vj = V + static_cast<std::size_t>(j) * C + off;
        const double a = arow[j];
        for (int d = 0; d < dh; ++d) orow[d] += a * vj[d];
      }
    }
  }
  if (need) {
    Tape::current()->record([qn = q.node(), kn = k.node(), vn = v.node(),
                             on = out.node(), attn = std::move(attn), n_heads,
                             sc, L, C, dh] {
      std::vector<double> dattn(static_cast<std::size_t>(L) * L);
      for (int h = 0; h < n_heads; ++h) {
        const int off = h * dh;
        const double* __restrict A = attn[static_cast<std::size_t>(h)].data();
        // dV += A^T dO ; dAttn = dO V^T
        for (int i = 0; i < L; ++i) {
          const double* __restrict go =
              on->grad.data() + static_cast<std::size_t>(i) * C + off;
          double* __restrict drow = dattn.data() + static_cast<std::size_t>(i) * L;
          for (int j = 0; j < L; ++j) {
            const double a = A[static_cast<std::size_t>(i) * L + j];
            const double* __restrict vj =
                vn->val.data() + static_cast<std::size_t>(j) * C + off;
            double* __restrict dvj =
                vn->grad.data() + static_cast<std::size_t>(j) * C + off;
            double dot = 0.0;
            for (int d = 0; d < dh; ++d) {
              if (vn->requires_grad) dvj[d] += a * go[d];
              dot += vj[d] * go[d];
            }
            drow[j] = dot;
          }
        }
        // softmax backward row-wise, then dQ, dK.
        for (int i = 0; i < L; ++i) {
          const double* __restrict arow = A + static_cast<std::size_t>(i) * L;
          double* __restrict drow = dattn.data() + static_cast<std::size_t>(i) * L;
          double acc = 0.0;
          for (int j = 0; j < L; ++j) acc += arow[j] * drow[j];
          for (int j = 0; j < L; ++j) {
            const double ds = arow[j] * (drow[j] - acc) * sc;
            const double* __restrict qi =
                qn->val.data() + static_cast<std::size_t>(i) * C + off;
            const double* __restrict kj =
                kn->val.data() + static_cast<std::size_t>(j) * C + off;
            if (qn->requires_grad) {
              double* __restrict dqi =
                  qn->grad.data() + static_cast<std::size_t>(i) * C + off;
              for (int d = 0; d < dh; ++d) dqi[d] += ds * kj[d];
            }
            if (kn->requires_grad) {
              double* __restrict dkj =
                  kn->grad.data() + static_cast<std::size_t>(j) * C + off;
              for (int d = 0; d < dh; ++d) dkj[d] += ds * qi[d];
            }
          }
        }
      }
    });
  }
  return out;
}

}  // namespace

Tensor kaiming_uniform(Shape shape, int fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = rng.uniform(-bound, bound);
  return Tensor::from(std::move(shape), std::move(data), true);
}

LinearParams LinearParams::init(int in, int out, Rng& rng, bool bias) {
  LinearParams p;
  p.w = kaiming_uniform({in, out}, in, rng);
  if (bias) p.b = Tensor::zeros({out}, true);
  return p;
}

LinearParams LinearParams::zero(int in, int out, bool bias) {
  LinearParams p;
  p.w = Tensor::zeros({in, out}, true);
  if (bias) p.b = Tensor::zeros({out}, true);
  return p;
}

void LinearParams::collect(const std::string& prefix, ParamSet& ps) {
  ps.add(prefix + ".w", &w);
  if (b.defined()) ps.add(prefix + ".b", &b);
}

Tensor linear(const Tensor& x, const LinearParams& p) {
  return matmul_bias(x, p.w, p.b);
}

LayerNormParams LayerNormParams::init(int width) {
  LayerNormParams p;
  p.gain = Tensor::full({width}, 1.0, true);
  p.bias = Tensor::zeros({width}, true);
  return p;
}

void LayerNormParams::collect(const std::string& prefix, ParamSet& ps) {
  ps.add(prefix + ".gain", &gain);
  ps.add(prefix + ".bias", &bias);
}

Tensor layer_norm(const Tensor& x, const LayerNormParams& p) {
  return layer_norm(x, p.gain, p.bias);
}

SelfAttentionParams SelfAttentionParams::init(int width, int n_heads,
                                              Rng& rng) {
  if (n_heads < 1 || width % n_heads != 0) {
    throw ConfigError("self_attention: width " + std::to_string(width) +
                      " not divisible by " + std::to_string(n_heads) +
                      " heads");
  }
  SelfAttentionParams p;
  p.q = LinearParams::init(width, width, rng);
  p.k = LinearParams::init(width, width, rng);
  p.v = LinearParams::init(width, width, rng);
  p.o = LinearParams::init(width, width, rng);
  p.n_heads = n_heads;
  return p;
}

void SelfAttentionParams::collect(const std::string& prefix, ParamSet& ps) {
  q.collect(prefix + ".q", ps);
  k.collect(prefix + ".k", ps);
  v.collect(prefix + ".v", ps);
  o.collect(prefix + ".o", ps);
}

Tensor self_attention(const Tensor& x, const SelfAttentionParams& p) {
  const int C = x.dim(1);
  if (C % p.n_heads != 0) {
    throw ConfigError("self_attention: C=" + std::to_string(C) +
                      " not divisible by n_heads=" + std::to_string(p.n_heads));
  }
  const int dh = C / p.n_heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor q = linear(x, p.q);
  Tensor k = linear(x, p.k);
  Tensor v = linear(x, p.v);
  return linear(mha_core(q, k, v, p.n_heads, sc), p.o);
}

FfnParams FfnParams::init(int width, int hidden, Rng& rng) {
  FfnParams p;
  p.in = LinearParams::init(width, hidden, rng);
  p.out = LinearParams::init(hidden, width, rng);
  return p;
}

void FfnParams::collect(const std::string& prefix, ParamSet& ps) {
  in.collect(prefix + ".in", ps);
  out.collect(prefix + ".out", ps);
}

Tensor ffn(const Tensor& x, const FfnParams& p) {
  return linear(gelu(linear(x, p.in)), p.out);
}

}  // namespace mome
