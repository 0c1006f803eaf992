#include "mome/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace mome {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << "]";
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

namespace {

thread_local Tape* g_current_tape = nullptr;

std::shared_ptr<detail::Node> make_node(Shape shape, bool requires_grad) {
  if (shape.empty() || shape.size() > 4) {
    throw DimensionError("tensor rank must be 1..4, got shape " +
                         shape_str(shape));
  }
  for (int d : shape) {
    if (d < 1) throw DimensionError("non-positive dim in " + shape_str(shape));
  }
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->val.assign(shape_numel(n->shape), 0.0);
  n->requires_grad = requires_grad;
  if (requires_grad) n->grad.assign(n->val.size(), 0.0);
  return n;
}

using NodePtr = std::shared_ptr<detail::Node>;

// Result node requires grad iff a tape is active and an input needs grad;
// without an active tape ops run value-only (inference mode).
bool track(std::initializer_list<const Tensor*> ins) {
  if (!Tape::current()) return false;
  for (const Tensor* t : ins) {
    if (t->requires_grad()) return true;
  }
  return false;
}

}  // namespace

Tensor make_result(Shape shape, bool requires_grad) {
  return Tensor(make_node(std::move(shape), requires_grad));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return Tensor(make_node(std::move(shape), requires_grad));
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  auto n = make_node(std::move(shape), requires_grad);
  std::fill(n->val.begin(), n->val.end(), v);
  return Tensor(std::move(n));
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  auto n = make_node(std::move(shape), requires_grad);
  if (data.size() != n->val.size()) {
    throw DimensionError("data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(n->shape));
  }
  n->val = std::move(data);
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from({1}, {v}, requires_grad);
}

std::span<const double> Tensor::grad() const {
  if (!requires_grad()) {
    throw ContractError("grad() on a tensor that does not require grad");
  }
  return n_->grad;
}

void Tensor::zero_grad() {
  if (requires_grad()) std::fill(n_->grad.begin(), n_->grad.end(), 0.0);
}

double Tensor::item() const {
  if (size() != 1) {
    throw ContractError("item() on non-scalar tensor of shape " +
                        shape_str(shape()));
  }
  return n_->val[0];
}

double Tensor::at(int i) const { return n_->val[static_cast<std::size_t>(i)]; }
double Tensor::at(int i, int j) const {
  return n_->val[static_cast<std::size_t>(i) * dim(1) + j];
}
double Tensor::at(int i, int j, int k) const {
  return n_->val[(static_cast<std::size_t>(i) * dim(1) + j) * dim(2) + k];
}

// ---- Tape -----------------------------------------------------------------

Tape::Tape() {
  steps_.reserve(1024);
  parent_ = g_current_tape;
  g_current_tape = this;
}

Tape::~Tape() { g_current_tape = parent_; }

Tape* Tape::current() { return g_current_tape; }

void Tape::backward(const Tensor& loss) {
  if (consumed_) {
    throw ContractError("backward called twice on the same tape without reset");
  }
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward expects a scalar loss");
  }
  if (!loss.requires_grad()) {
    throw ContractError("loss does not require grad (nothing recorded)");
  }
  consumed_ = true;
  loss.node()->grad[0] += 1.0;
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
}

void Tape::reset() {
  steps_.clear();
  consumed_ = false;
}

// ---- op helpers -------------------------------------------------------------

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

// Elementwise binary op with per-element partials.
template <typename F, typename Dfa, typename Dfb>
Tensor ew_binary(const Tensor& a, const Tensor& b, const char* name, F f,
                 Dfa dfa, Dfb dfb) {
  check_same_shape(a, b, name);
  Tensor out = make_result(a.shape(), track({&a, &b}));
  const auto av = a.values();
  const auto bv = b.values();
  auto& ov = out.node()->val;
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = f(av[i], bv[i]);
  if (out.requires_grad()) {
    Tape::current()->record([an = a.node(), bn = b.node(), on = out.node(),
                             dfa, dfb] {
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        const double g = on->grad[i];
        if (an->requires_grad) dfa(an->grad[i], an->val[i], bn->val[i], g);
        if (bn->requires_grad) dfb(bn->grad[i], an->val[i], bn->val[i], g);
      }
    });
  }
  return out;
}

// Elementwise unary with derivative expressed from the input value.
template <typename F, typename DF>
Tensor ew_unary(const Tensor& a, F f, DF df) {
  Tensor out = make_result(a.shape(), track({&a}));
  const auto av = a.values();
  auto& ov = out.node()->val;
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = f(av[i]);
  if (out.requires_grad()) {
    Tape::current()->record([an = a.node(), on = out.node(), df] {
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        an->grad[i] += df(an->val[i]) * on->grad[i];
      }
    });
  }
  return out;
}

}  // namespace

// ---- arithmetic -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = make_result({m, n}, track({&a, &b}));
  const double* __restrict A = a.values().data();
  const double* __restrict B = b.values().data();
  double* __restrict C = out.node()->val.data();
  for (int i = 0; i < m; ++i) {
    double* __restrict crow = C + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = A[static_cast<std::size_t>(i) * k + p];
      const double* __restrict brow = B + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  if (out.requires_grad()) {
    Tape::current()->record([an = a.node(), bn = b.node(), on = out.node(), m,
                             k, n] {
      const double* __restrict G = on->grad.data();
      if (an->requires_grad) {
        // dA = dC * B^T
        double* __restrict dA = an->grad.data();
        const double* __restrict B = bn->val.data();
        for (int i = 0; i < m; ++i)
          for (int p = 0; p < k; ++p) {
            double s = 0.0;
            const double* __restrict grow = G + static_cast<std::size_t>(i) * n;
            const double* __restrict brow = B + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
            dA[static_cast<std::size_t>(i) * k + p] += s;
          }
      }
      if (bn->requires_grad) {
        // dB = A^T * dC
        double* __restrict dB = bn->grad.data();
        const double* __restrict A = an->val.data();
        for (int p = 0; p < k; ++p) {
          double* __restrict drow = dB + static_cast<std::size_t>(p) * n;
          for (int i = 0; i < m; ++i) {
            const double av = A[static_cast<std::size_t>(i) * k + p];
            const double* __restrict grow = G + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) drow[j] += av * grow[j];
          }
        }
      }
    });
  }
  return out;
}

Tensor matmul_bias(const Tensor& a, const Tensor& b, const Tensor& bias) {
  if (!bias.defined()) return matmul(a, b);
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul_bias: incompatible shapes " +
                         shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (bias.rank() != 1 || bias.dim(0) != n) {
    throw DimensionError("matmul_bias: bias length must be " +
                         std::to_string(n));
  }
  Tensor out = make_result({m, n}, track({&a, &b, &bias}));
  const double* __restrict A = a.values().data();
  const double* __restrict B = b.values().data();
  const double* __restrict bv = bias.values().data();
  double* __restrict C = out.node()->val.data();
  for (int i = 0; i < m; ++i) {
    double* __restrict crow = C + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) crow[j] = bv[j];
    for (int p = 0; p < k; ++p) {
      const double av = A[static_cast<std::size_t>(i) * k + p];
      const double* __restrict brow = B + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  if (out.requires_grad()) {
    Tape::current()->record([an = a.node(), bn = b.node(), cn = bias.node(),
                             on = out.node(), m, k, n] {
      const double* __restrict G = on->grad.data();
      if (an->requires_grad) {
        double* __restrict dA = an->grad.data();
        const double* __restrict B = bn->val.data();
        for (int i = 0; i < m; ++i)
          for (int p = 0; p < k; ++p) {
            double s = 0.0;
            const double* __restrict grow = G + static_cast<std::size_t>(i) * n;
            const double* __restrict brow = B + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
            dA[static_cast<std::size_t>(i) * k + p] += s;
          }
      }
      if (bn->requires_grad) {
        double* __restrict dB = bn->grad.data();
        const double* __restrict A = an->val.data();
        for (int p = 0; p < k; ++p) {
          double* __restrict drow = dB + static_cast<std::size_t>(p) * n;
          for (int i = 0; i < m; ++i) {
            const double av = A[static_cast<std::size_t>(i) * k + p];
            const double* __restrict grow = G + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) drow[j] += av * grow[j];
          }
        }
      }
      if (cn->requires_grad) {
        double* __restrict db = cn->grad.data();
        for (int i = 0; i < m; ++i) {
          const double* __restrict grow = G + static_cast<std::size_t>(i) * n;
          for (int j = 0; j < n; ++j) db[j] += grow[j];
        }
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("transpose: rank-2 only");
  const int m = a.dim(0), n = a.dim(1);
  Tensor out = make_result({n, m}, track({&a}));
  auto& ov = out.node()->val;
  const auto av = a.values();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      ov[static_cast<std::size_t>(j) * m + i] =
          av[static_cast<std::size_t>(i) * n + j];
  if (out.requires_grad()) {
    Tape::current()->record([an = a.node(), on = out.node(), m, n] {
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          an->grad[static_cast<std::size_t>(i) * n + j] +=
              on->grad[static_cast<std::size_t>(j) * m + i];
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return ew_binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double& g, double, double, double go) { g += go; },
      [](double& g, double, double, double go) { g += go; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return ew_binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double& g, double, double, double go) { g += go; },
      [](double& g, double, double, double go) { g -= go; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return ew_binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double& g, double, double y, double go) { g += y * go; },
      [](double& g, double x, double, double go) { g += x * go; });
}

Tensor add_n(std::span<const Tensor> xs) {
  if (xs.empty()) throw ContractError("add_n: empty operand list");
  bool need = false;
  for (const auto& x : xs) {
    check_same_shape(xs.front(), x, "add_n");
    if (Tape::current() && x.requires_grad()) need = true;
  }
  Tensor out = make_result(xs.front().shape(), need);
  auto& ov = out.node()->val;
  for (const auto& x : xs) {
    const auto xv = x.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] += xv[i];
  }
  if (out.requires_grad()) {
    std::vector<NodePtr> ins;
    ins.reserve(xs.size());
    for (const auto& x : xs) ins.push_back(x.node());
    Tape::current()->record([ins = std::move(ins), on = out.node()] {
      for (const auto& an : ins) {
        if (!an->requires_grad) continue;
        for (std::size_t i = 0; i < on->grad.size(); ++i)
          an->grad[i] += on->grad[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double c) {
  return ew_unary(a, [c](double x) { return c * x; },
                  [c](double) { return c; });
}

Tensor add_scalar(const Tensor& a, double c) {
  return ew_unary(a, [c](double x) { return x + c; },
                  [](double) { return 1.0; });
}

Tensor scale_by(const Tensor& a, const Tensor& s) {
  if (s.size() != 1) throw DimensionError("scale_by: scalar must have size 1");
  Tensor out = make_result(a.shape(), track({&a, &s}));
  const double sv = s.values()[0];
  const auto av = a.values();
  auto& ov = out.node()->val;
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = sv * av[i];
  if (out.requires_grad()) {
    Tape::current()->record([an = a.node(), sn = s.node(), on = out.node()] {
      const double sv = sn->val[0];
      double ds = 0.0;
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        const double g = on->grad[i];
        if (an->requires_grad) an->grad[i] += sv * g;
        ds += an->val[i] * g;
      }
      if (sn->requires_grad) sn->grad[0] += ds;
    });
  }
  return out;
}

// ---- activations -----------------------------------------------------------

Tensor relu(const Tensor& a) {
  return ew_unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                  [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

namespace {
constexpr double kGeluC = 0.044715;
inline double gelu_val(double x) {
  const double s = std::sqrt(2.0 / std::numbers::pi);
  return 0.5 * x * (1.0 + std::tanh(s * (x + kGeluC * x * x * x)));
}
inline double gelu_dval(double x) {
  const double s = std::sqrt(2.0 / std::numbers::pi);
  const double u = s * (x + kGeluC * x * x * x);
  const double t = std::tanh(u);
  const double du = s * (1.0 + 3.0 * kGeluC * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}
}  // namespace

Tensor gelu(const Tensor& a) { return ew_unary(a, gelu_val, gelu_dval); }

Tensor sigmoid(const Tensor& a) {
  return ew_unary(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                  [](double x) {
                    const double s = 1.0 / (1.0 + std::exp(-x));
                    return s * (1.0 - s);
                  });
}

// ---- softmax ----------------------------------------------------------------

Tensor softmax(const Tensor& a, int axis) {
  if (axis < 0 || axis >= a.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) +
                         " out of range for shape " + shape_str(a.shape()));
  }
  const Shape& sh = a.shape();
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(sh[i]);
  for (int i = axis + 1; i < a.rank(); ++i)
    inner *= static_cast<std::size_t>(sh[i]);
  const std::size_t n = static_cast<std::size_t>(sh[axis]);

  Tensor out = make_result(sh, track({&a}));
  const auto av = a.values();
  auto& ov = out.node()->val;
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = av[base];
      for (std::size_t i = 1; i < n; ++i)
        mx = std::max(mx, av[base + i * inner]);
      double z = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double e = std::exp(av[base + i * inner] - mx);
        ov[base + i * inner] = e;
        z += e;
      }
      for (std::size_t i = 0; i < n; ++i) ov[base + i * inner] /= z;
    }
  }
  if (out.requires_grad()) {
    Tape::current()->record(
        [an = a.node(), on = out.node(), outer, inner, n] {
          for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t in = 0; in < inner; ++in) {
              const std::size_t base = o * n * inner + in;
              double dot = 0.0;
              for (std::size_t i = 0; i < n; ++i) {
                const std::size_t idx = base + i * inner;
                dot += on->grad[idx] * on->val[idx];
              }
              for (std::size_t i = 0; i < n; ++i) {
                const std::size_t idx = base + i * inner;
                an->grad[idx] += on->val[idx] * (on->grad[idx] - dot);
              }
            }
          }
        });
  }
  return out;
}

// ---- layer norm --------------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  if (x.rank() != 2) throw DimensionError("layer_norm: rank-2 input expected");
  const int L = x.dim(0), C = x.dim(1);
  if (gain.rank() != 1 || bias.rank() != 1 || gain.dim(0) != C ||
      bias.dim(0) != C) {
    throw DimensionError("layer_norm: gain/bias length must equal " +
                         std::to_string(C));
  }
  constexpr double kEps = 1e-5;
  Tensor out = make_result({L, C}, track({&x, &gain, &bias}));
  const auto xv = x.values();
  const auto gv = gain.values();
  const auto bv = bias.values();
  auto& ov = out.node()->val;
  // Saved per row for backward: mean and 1/std.
  std::vector<double> mu(static_cast<std::size_t>(L)),
      istd(static_cast<std::size_t>(L));
  for (int i = 0; i < L; ++i) {
    const std::size_t base = static_cast<std::size_t>(i) * C;
    double m = 0.0;
    for (int j = 0; j < C; ++j) m += xv[base + j];
    m /= C;
    double v = 0.0;
    for (int j = 0; j < C; ++j) {
      const double d = xv[base + j] - m;
      v += d * d;
    }
    v /= C;
    const double is = 1.0 / std::sqrt(v + kEps);
    mu[static_cast<std::size_t>(i)] = m;
    istd[static_cast<std::size_t>(i)] = is;
    for (int j = 0; j < C; ++j)
      ov[base + j] = (xv[base + j] - m) * is * gv[j] + bv[j];
  }
  if (out.requires_grad()) {
    Tape::current()->record([xn = x.node(), gn = gain.node(), bn = bias.node(),
                             on = out.node(), mu = std::move(mu),
                             istd = std::move(istd), L, C] {
      for (int i = 0; i < L; ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * C;
        const double m = mu[static_cast<std::size_t>(i)];
        const double is = istd[static_cast<std::size_t>(i)];
        double sum_gh = 0.0, sum_ghx = 0.0;
        for (int j = 0; j < C; ++j) {
          const double xhat = (xn->val[base + j] - m) * is;
          const double gh = on->grad[base + j] * gn->val[j];
          sum_gh += gh;
          sum_ghx += gh * xhat;
          if (gn->requires_grad) gn->grad[j] += on->grad[base + j] * xhat;
          if (bn->requires_grad) bn->grad[j] += on->grad[base + j];
        }
        if (xn->requires_grad) {
          for (int j = 0; j < C; ++j) {
            const double xhat = (xn->val[base + j] - m) * is;
            const double gh = on->grad[base + j] * gn->val[j];
            xn->grad[base + j] +=
                is * (gh - sum_gh / C - xhat * sum_ghx / C);
          }
        }
      }
    });
  }
  return out;
}

// ---- shape plumbing ----------------------------------------------------------

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  if (x.rank() != 2 || v.rank() != 1 || v.dim(0) != x.dim(1)) {
    throw DimensionError("add_rowvec: " + shape_str(x.shape()) + " + " +
                         shape_str(v.shape()));
  }
  const int L = x.dim(0), C = x.dim(1);
  Tensor out = make_result({L, C}, track({&x, &v}));
  const auto xv = x.values();
  const auto vv = v.values();
  auto& ov = out.node()->val;
  for (int i = 0; i < L; ++i)
    for (int j = 0; j < C; ++j)
      ov[static_cast<std::size_t>(i) * C + j] =
          xv[static_cast<std::size_t>(i) * C + j] + vv[j];
  if (out.requires_grad()) {
    Tape::current()->record([xn = x.node(), vn = v.node(), on = out.node(), L,
                             C] {
      for (int i = 0; i < L; ++i)
        for (int j = 0; j < C; ++j) {
          const double g = on->grad[static_cast<std::size_t>(i) * C + j];
          if (xn->requires_grad)
            xn->grad[static_cast<std::size_t>(i) * C + j] += g;
          if (vn->requires_grad) vn->grad[j] += g;
        }
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& x, int start, int n) {
  if (x.rank() != 2 || start < 0 || n < 1 || start + n > x.dim(1)) {
    throw DimensionError("slice_cols: [" + std::to_string(start) + "," +
                         std::to_string(start + n) + ") of " +
                         shape_str(x.shape()));
  }
  const int L = x.dim(0), C = x.dim(1);
  Tensor out = make_result({L, n}, track({&x}));
  const auto xv = x.values();
  auto& ov = out.node()->val;
  for (int i = 0; i < L; ++i)
    for (int j = 0; j < n; ++j)
      ov[static_cast<std::size_t>(i) * n + j] =
          xv[static_cast<std::size_t>(i) * C + start + j];
  if (out.requires_grad()) {
    Tape::current()->record([xn = x.node(), on = out.node(), L, C, start, n] {
      for (int i = 0; i < L; ++i)
        for (int j = 0; j < n; ++j)
          xn->grad[static_cast<std::size_t>(i) * C + start + j] +=
              on->grad[static_cast<std::size_t>(i) * n + j];
    });
  }
  return out;
}

Tensor concat_cols(std::span<const Tensor> xs) {
  if (xs.empty()) throw ContractError("concat_cols: empty list");
  const int L = xs.front().dim(0);
  int C = 0;
  bool need = false;
  for (const auto& x : xs) {
    if (x.rank() != 2 || x.dim(0) != L)
      throw DimensionError("concat_cols: row mismatch");
    C += x.dim(1);
    if (Tape::current() && x.requires_grad()) need = true;
  }
  Tensor out = make_result({L, C}, need);
  auto& ov = out.node()->val;
  int off = 0;
  for (const auto& x : xs) {
    const int n = x.dim(1);
    const auto xv = x.values();
    for (int i = 0; i < L; ++i)
      for (int j = 0; j < n; ++j)
        ov[static_cast<std::size_t>(i) * C + off + j] =
            xv[static_cast<std::size_t>(i) * n + j];
    off += n;
  }
  if (out.requires_grad()) {
    std::vector<NodePtr> ins;
    std::vector<int> widths;
    for (const auto& x : xs) {
      ins.push_back(x.node());
      widths.push_back(x.dim(1));
    }
    Tape::current()->record([ins = std::move(ins), widths = std::move(widths),
                             on = out.node(), L, C] {
      int off = 0;
      for (std::size_t b = 0; b < ins.size(); ++b) {
        const int n = widths[b];
        if (ins[b]->requires_grad) {
          for (int i = 0; i < L; ++i)
            for (int j = 0; j < n; ++j)
              ins[b]->grad[static_cast<std::size_t>(i) * n + j] +=
                  on->grad[static_cast<std::size_t>(i) * C + off + j];
        }
        off += n;
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.size()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " +
                         shape_str(shape) + " changes element count");
  }
  Tensor out = make_result(std::move(shape), track({&x}));
  out.node()->val = x.node()->val;
  if (out.requires_grad()) {
    Tape::current()->record([xn = x.node(), on = out.node()] {
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        xn->grad[i] += on->grad[i];
    });
  }
  return out;
}

// ---- reductions ---------------------------------------------------------------

Tensor sum(const Tensor& a) {
  Tensor out = make_result({1}, track({&a}));
  double s = 0.0;
  for (double v : a.values()) s += v;
  out.node()->val[0] = s;
  if (out.requires_grad()) {
    Tape::current()->record([an = a.node(), on = out.node()] {
      const double g = on->grad[0];
      for (double& d : an->grad) d += g;
    });
  }
  return out;
}

Tensor mean(const Tensor& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor mean_rows(const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("mean_rows: rank-2 input expected");
  const int L = x.dim(0), C = x.dim(1);
  Tensor out = make_result({C}, track({&x}));
  const auto xv = x.values();
  auto& ov = out.node()->val;
  for (int i = 0; i < L; ++i)
    for (int j = 0; j < C; ++j)
      ov[static_cast<std::size_t>(j)] +=
          xv[static_cast<std::size_t>(i) * C + j];
  for (int j = 0; j < C; ++j) ov[static_cast<std::size_t>(j)] /= L;
  if (out.requires_grad()) {
    Tape::current()->record([xn = x.node(), on = out.node(), L, C] {
      for (int i = 0; i < L; ++i)
        for (int j = 0; j < C; ++j)
          xn->grad[static_cast<std::size_t>(i) * C + j] += on->grad[j] / L;
    });
  }
  return out;
}

Tensor weighted_sum(std::span<const Tensor> seqs, const Tensor& weights) {
  if (seqs.empty()) throw ContractError("weighted_sum: empty sequence list");
  if (weights.rank() != 1 ||
      weights.dim(0) != static_cast<int>(seqs.size())) {
    throw DimensionError("weighted_sum: weight length " +
                         shape_str(weights.shape()) + " vs " +
                         std::to_string(seqs.size()) + " sequences");
  }
  bool need = Tape::current() && weights.requires_grad();
  for (const auto& s : seqs) {
    check_same_shape(seqs.front(), s, "weighted_sum");
    if (Tape::current() && s.requires_grad()) need = true;
  }
  Tensor out = make_result(seqs.front().shape(), need);
  auto& ov = out.node()->val;
  const auto wv = weights.values();
  for (std::size_t e = 0; e < seqs.size(); ++e) {
    const auto sv = seqs[e].values();
    const double w = wv[e];
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] += w * sv[i];
  }
  if (out.requires_grad()) {
    std::vector<NodePtr> ins;
    for (const auto& s : seqs) ins.push_back(s.node());
    Tape::current()->record([ins = std::move(ins), wn = weights.node(),
                             on = out.node()] {
      for (std::size_t e = 0; e < ins.size(); ++e) {
        const double w = wn->val[e];
        double dw = 0.0;
        for (std::size_t i = 0; i < on->grad.size(); ++i) {
          const double g = on->grad[i];
          if (ins[e]->requires_grad) ins[e]->grad[i] += w * g;
          dw += ins[e]->val[i] * g;
        }
        if (wn->requires_grad) wn->grad[e] += dw;
      }
    });
  }
  return out;
}

// ---- gradient oracle ------------------------------------------------------------

double grad_check(const std::function<Tensor()>& f, Tensor& x, double h) {
  Tensor* xp = &x;
  return grad_check_all(f, std::span<Tensor* const>(&xp, 1), h);
}

double grad_check_all(const std::function<Tensor()>& f,
                      std::span<Tensor* const> params, double h) {
  // Analytic pass.
  std::vector<std::vector<double>> analytic(params.size());
  {
    for (Tensor* p : params) p->zero_grad();
    Tape tape;
    Tensor loss = f();
    if (loss.size() != 1) {
      throw ContractError("grad_check: f must return a scalar");
    }
    tape.backward(loss);
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto g = params[p]->grad();
      analytic[p].assign(g.begin(), g.end());
    }
  }
  // Central differences, evaluated value-only (no active tape here).
  double worst = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto vals = params[p]->mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double keep = vals[i];
      vals[i] = keep + h;
      const double up = f().item();
      vals[i] = keep - h;
      const double dn = f().item();
      vals[i] = keep;
      const double numeric = (up - dn) / (2.0 * h);
      const double a = analytic[p][i];
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace mome
