#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mome {

// Error taxonomy shared across the library.
struct DimensionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

namespace detail {
struct Node {
  Shape shape;
  std::vector<double> val;
  std::vector<double> grad;  // sized like val iff requires_grad
  bool requires_grad = false;
};
}  // namespace detail

// Dense 64-bit tensor, rank 1-4, row-major. A Tensor is a shared handle to
// its storage; values are only written through recorded ops, initializers,
// or the optimizer (leaf update path).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data,
                     bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  std::size_t size() const { return n_->val.size(); }
  bool requires_grad() const { return n_ && n_->requires_grad; }

  std::span<const double> values() const { return n_->val; }
  std::span<const double> grad() const;

  // Leaf update path: used by initializers, the optimizer, and grad_check
  // probes. Recorded ops never call this.
  std::span<double> mutable_values() { return n_->val; }
  void zero_grad();

  double item() const;                    // rank-agnostic single element
  double at(int i) const;                 // rank 1
  double at(int i, int j) const;          // rank 2
  double at(int i, int j, int k) const;   // rank 3

  int dim(int i) const { return n_->shape[static_cast<std::size_t>(i)]; }

  std::shared_ptr<detail::Node> node() const { return n_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : n_(std::move(n)) {}
  std::shared_ptr<detail::Node> n_;
  friend class Tape;
  friend Tensor make_result(Shape, bool);
};

// Reverse-mode tape. The active tape is thread-local: constructing a Tape
// makes it current on this thread, destruction restores the previous one.
// Ops record a backward step only while a tape is active and some input
// requires grad; with no active tape everything runs value-only.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Runs recorded steps in exact reverse execution order, seeding d(loss)=1.
  // loss must be a scalar produced under this tape. Calling twice without
  // reset() is an error.
  void backward(const Tensor& loss);

  void reset();
  std::size_t recorded_ops() const { return steps_.size(); }

  static Tape* current();
  void record(std::function<void()> step) { steps_.push_back(std::move(step)); }

 private:
  std::vector<std::function<void()>> steps_;
  bool consumed_ = false;
  Tape* parent_ = nullptr;
};

// ---- Core differentiable ops -------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
// matmul with a fused row-broadcast bias (pass an undefined Tensor for none);
// one tape record instead of two.
Tensor matmul_bias(const Tensor& a, const Tensor& b, const Tensor& bias);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_n(std::span<const Tensor> xs);

Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
// Multiplies by a learnable scalar (shape {1}); gradient to both operands.
Tensor scale_by(const Tensor& a, const Tensor& s);

Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);  // tanh approximation, analytic derivative
Tensor sigmoid(const Tensor& a);

Tensor softmax(const Tensor& a, int axis);

// Row-wise normalization of an L x C matrix: zero mean, unit variance per
// row (eps = 1e-5 inside the sqrt), then gain/bias of length C.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);

Tensor add_rowvec(const Tensor& x, const Tensor& v);  // broadcast v over rows
Tensor slice_cols(const Tensor& x, int start, int n);
Tensor concat_cols(std::span<const Tensor> xs);
Tensor reshape(const Tensor& x, Shape shape);

Tensor sum(const Tensor& a);        // -> {1}
Tensor mean(const Tensor& a);       // -> {1}
Tensor mean_rows(const Tensor& x);  // L x C -> {C}, mean over rows

// fused = sum_i weights[i] * seqs[i]; gradient reaches both sides.
Tensor weighted_sum(std::span<const Tensor> seqs, const Tensor& weights);

// ---- Gradient oracle ------------------------------------------------------

// Central finite differences against the tape gradient. f() must rebuild the
// scalar loss from current tensor values on each call; x is perturbed in
// place. Returns max over coordinates of |analytic - numeric| / max(1,
// |analytic|).
double grad_check(const std::function<Tensor()>& f, Tensor& x,
                  double h = 1e-5);
double grad_check_all(const std::function<Tensor()>& f,
                      std::span<Tensor* const> params, double h = 1e-5);

}  // namespace mome
