#include <cmath>
#include <filesystem>
#include <thread>

#include "doctest.h"
#include "mome/nn.hpp"
#include "mome/rng.hpp"
#include "mome/serialize.hpp"
#include "mome/tensor.hpp"

using namespace mome;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = true,
                     double scale = 1.0) {
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = scale * rng.gaussian();
  return Tensor::from(std::move(shape), std::move(data), requires_grad);
}

}  // namespace

TEST_CASE("matmul identity and hand-checked product") {
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor x = Tensor::from({2, 3}, {5, -1, 2, 0.5, 3, 7});
  Tensor y = matmul(eye, x);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 3; ++j) CHECK(y.at(i, j) == x.at(i, j));

  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from({2, 1}, {1, 1});
  Tensor c = matmul(a, b);
  CHECK(c.at(0, 0) == doctest::Approx(3.0));
  CHECK(c.at(1, 0) == doctest::Approx(7.0));
}

TEST_CASE("matmul rejects mismatched shapes with both shapes in the message") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[4x2]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient matches central finite differences") {
  Rng rng(7);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  auto f = [&] { return sum(matmul(a, b)); };
  CHECK(grad_check(f, a) < 1e-6);
  CHECK(grad_check(f, b) < 1e-6);
}

TEST_CASE("matmul associativity on random triples") {
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor a = random_tensor({3, 4}, rng, false);
    Tensor b = random_tensor({4, 2}, rng, false);
    Tensor c = random_tensor({2, 5}, rng, false);
    Tensor left = matmul(matmul(a, b), c);
    Tensor right = matmul(a, matmul(b, c));
    for (std::size_t i = 0; i < left.size(); ++i) {
      CHECK(std::abs(left.values()[i] - right.values()[i]) < 1e-10);
    }
  }
}

TEST_CASE("elementwise basics") {
  Tensor x = Tensor::from({1}, {-1.5});
  CHECK(relu(x).item() == 0.0);
  CHECK(sigmoid(Tensor::from({1}, {0.0})).item() == doctest::Approx(0.5));
  Tensor a = Tensor::zeros({2, 2});
  Tensor b = Tensor::zeros({3});
  CHECK_THROWS_AS(add(a, reshape(b, {3})), DimensionError);
}

TEST_CASE("gelu gradient at fixed points") {
  for (double v : {-2.0, -0.5, 0.0, 0.5, 2.0}) {
    Tensor x = Tensor::from({1}, {v}, true);
    auto f = [&] { return gelu(x); };
    CHECK(grad_check(f, x) < 1e-5);
  }
}

TEST_CASE("elementwise gradients on random inputs") {
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor x = random_tensor({3, 4}, rng);
    Tensor y = random_tensor({3, 4}, rng);
    CHECK(grad_check([&] { return sum(mul(add(x, y), sub(x, y))); }, x) < 1e-4);
    CHECK(grad_check([&] { return sum(gelu(x)); }, x) < 1e-4);
    CHECK(grad_check([&] { return sum(sigmoid(x)); }, x) < 1e-4);
    CHECK(grad_check([&] { return sum(scale(x, 1.7)); }, x) < 1e-4);
    CHECK(grad_check([&] { return mean(mul(x, y)); }, y) < 1e-4);
  }
}

TEST_CASE("softmax symmetry, stability, and direct evaluation") {
  Tensor flat = softmax(Tensor::from({3}, {0, 0, 0}), 0);
  for (int i = 0; i < 3; ++i)
    CHECK(flat.at(i) == doctest::Approx(1.0 / 3.0));

  Tensor hot = softmax(Tensor::from({2}, {1000, 0}), 0);
  CHECK(hot.at(0) == doctest::Approx(1.0));
  CHECK(hot.at(1) >= 0.0);
  CHECK(std::isfinite(hot.at(0)));

  Tensor p = softmax(Tensor::from({3}, {1, 2, 3}), 0);
  CHECK(std::abs(p.at(0) - 0.09003) < 1e-5);
  CHECK(std::abs(p.at(1) - 0.24473) < 1e-5);
  CHECK(std::abs(p.at(2) - 0.66524) < 1e-5);
}

TEST_CASE("softmax output is a probability simplex vector") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor({4, 6}, rng, false, 3.0);
    Tensor p = softmax(x, 1);
    for (int i = 0; i < 4; ++i) {
      double s = 0.0;
      for (int j = 0; j < 6; ++j) {
        CHECK(p.at(i, j) >= 0.0);
        s += p.at(i, j);
      }
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("softmax gradient") {
  Rng rng(9);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor x = random_tensor({3, 5}, rng);
    Tensor w = random_tensor({3, 5}, rng, false);
    auto f = [&] { return sum(mul(softmax(x, 1), w)); };
    CHECK(grad_check(f, x) < 1e-4);
  }
}

TEST_CASE("layer_norm standardizes rows") {
  Tensor gain = Tensor::full({4}, 1.0);
  Tensor bias = Tensor::zeros({4});
  Tensor constant = Tensor::full({2, 4}, 3.25);
  Tensor out = layer_norm(constant, gain, bias);
  for (std::size_t i = 0; i < out.size(); ++i) {
    CHECK(std::abs(out.values()[i]) < 1e-6);
  }

  Tensor two = layer_norm(Tensor::from({1, 2}, {1, 3}), Tensor::full({2}, 1.0),
                          Tensor::zeros({2}));
  CHECK(two.at(0, 0) == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(two.at(0, 1) == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("layer_norm gradient") {
  Rng rng(13);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor x = random_tensor({3, 4}, rng);
    Tensor gain = random_tensor({4}, rng);
    Tensor bias = random_tensor({4}, rng);
    Tensor probe = random_tensor({3, 4}, rng, false);
    auto f = [&] { return sum(mul(layer_norm(x, gain, bias), probe)); };
    CHECK(grad_check(f, x) < 1e-5);
    CHECK(grad_check(f, gain) < 1e-5);
    CHECK(grad_check(f, bias) < 1e-5);
  }
}

TEST_CASE("single-token attention reduces to value and output projections") {
  Rng rng(17);
  SelfAttentionParams p = SelfAttentionParams::init(6, 2, rng);
  Tensor x = random_tensor({1, 6}, rng, false);
  Tensor got = self_attention(x, p);
  Tensor expect = linear(linear(x, p.v), p.o);
  for (std::size_t i = 0; i < got.size(); ++i) {
    CHECK(got.values()[i] == doctest::Approx(expect.values()[i]).epsilon(1e-12));
  }
}

TEST_CASE("self-attention is permutation-equivariant") {
  Rng rng(19);
  SelfAttentionParams p = SelfAttentionParams::init(8, 2, rng);
  Tensor x = random_tensor({4, 8}, rng, false);
  const int perm[4] = {2, 0, 3, 1};
  std::vector<double> permuted(4 * 8);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 8; ++j)
      permuted[static_cast<std::size_t>(i) * 8 + j] = x.at(perm[i], j);
  Tensor xp = Tensor::from({4, 8}, std::move(permuted));
  Tensor out = self_attention(x, p);
  Tensor outp = self_attention(xp, p);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 8; ++j)
      CHECK(outp.at(i, j) == doctest::Approx(out.at(perm[i], j)).epsilon(1e-10));
}

TEST_CASE("self-attention gradient, L=3 C=8 two heads") {
  Rng rng(23);
  SelfAttentionParams p = SelfAttentionParams::init(8, 2, rng);
  Tensor x = random_tensor({3, 8}, rng);
  Tensor probe = random_tensor({3, 8}, rng, false);
  auto f = [&] { return sum(mul(self_attention(x, p), probe)); };
  CHECK(grad_check(f, x) < 1e-5);
  CHECK(grad_check(f, p.q.w) < 1e-5);
  CHECK(grad_check(f, p.o.w) < 1e-5);
}

TEST_CASE("self-attention rejects width not divisible by heads") {
  Rng rng(29);
  CHECK_THROWS_AS(SelfAttentionParams::init(6, 4, rng), ConfigError);
}

TEST_CASE("grad_check on a quadratic is exact to rounding") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  auto f = [&] { return sum(mul(x, x)); };
  {
    x.zero_grad();
    Tape tape;
    Tensor loss = f();
    tape.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(2.0));
    CHECK(x.grad()[1] == doctest::Approx(4.0));
  }
  CHECK(grad_check(f, x) < 1e-9);
}

TEST_CASE("grad_check rejects non-scalar objectives") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  auto f = [&] { return mul(x, x); };
  CHECK_THROWS_AS(grad_check(f, x), ContractError);
}

TEST_CASE("backward twice without reset is an error; reset re-arms") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tape tape;
  Tensor loss = sum(mul(x, x));
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), ContractError);
  tape.reset();
  x.zero_grad();
  Tensor loss2 = sum(mul(x, x));
  tape.backward(loss2);
  CHECK(x.grad()[0] == doctest::Approx(2.0));
}

TEST_CASE("tape linearity: backward of a sum equals sum of backwards") {
  Rng rng(31);
  Tensor w = random_tensor({3, 3}, rng);
  Tensor x = random_tensor({2, 3}, rng, false);

  std::vector<double> combined;
  {
    w.zero_grad();
    Tape tape;
    Tensor l1 = sum(matmul(x, w));
    Tensor l2 = sum(gelu(matmul(x, w)));
    tape.backward(add(l1, l2));
    combined.assign(w.grad().begin(), w.grad().end());
  }
  std::vector<double> separate(combined.size(), 0.0);
  for (int which = 0; which < 2; ++which) {
    w.zero_grad();
    Tape tape;
    Tensor l = which == 0 ? sum(matmul(x, w)) : sum(gelu(matmul(x, w)));
    tape.backward(l);
    for (std::size_t i = 0; i < separate.size(); ++i)
      separate[i] += w.grad()[i];
  }
  for (std::size_t i = 0; i < combined.size(); ++i) {
    CHECK(combined[i] == doctest::Approx(separate[i]).epsilon(1e-12));
  }
}

TEST_CASE("no active tape means value-only evaluation") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tensor y = mul(x, x);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("ops on separate tapes run concurrently, grads reduce by sum") {
  Rng rng(37);
  Tensor w = random_tensor({4, 4}, rng);
  std::vector<Tensor> inputs;
  for (int i = 0; i < 4; ++i) inputs.push_back(random_tensor({2, 4}, rng, false));

  // Serial reference.
  w.zero_grad();
  for (const auto& x : inputs) {
    Tape tape;
    tape.backward(sum(gelu(matmul(x, w))));
  }
  std::vector<double> serial(w.grad().begin(), w.grad().end());

  w.zero_grad();
  std::mutex mu;
  std::vector<std::thread> pool;
  for (int t = 0; t < 2; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t i = static_cast<std::size_t>(t); i < inputs.size();
           i += 2) {
        Tape tape;
        Tensor loss = sum(gelu(matmul(inputs[i], w)));
        std::lock_guard<std::mutex> lock(mu);
        tape.backward(loss);
      }
    });
  }
  for (auto& th : pool) th.join();
  for (std::size_t i = 0; i < serial.size(); ++i) {
    CHECK(std::abs(w.grad()[i] - serial[i]) < 1e-10);
  }
}

TEST_CASE("checkpoint round-trips bit-exactly") {
  Rng rng(41);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({7}, rng);
  ParamSet ps;
  ps.add("layer.w", &a);
  ps.add("layer.b", &b);
  const auto path = std::filesystem::temp_directory_path() / "mome_ckpt_test.mome";
  save_checkpoint(path, ps);

  std::vector<double> a0(a.values().begin(), a.values().end());
  for (double& v : a.mutable_values()) v = 0.0;
  load_checkpoint(path, ps);
  for (std::size_t i = 0; i < a0.size(); ++i) {
    CHECK(a.values()[i] == a0[i]);
  }
  auto raw = read_checkpoint(path);
  CHECK(raw.at("layer.b").shape() == Shape{7});
  std::filesystem::remove(path);
}

TEST_CASE("tensor shape and rank contracts") {
  CHECK_THROWS_AS(Tensor::zeros({}), DimensionError);
  CHECK_THROWS_AS(Tensor::zeros({1, 2, 3, 4, 5}), DimensionError);
  CHECK_THROWS_AS(Tensor::zeros({0, 2}), DimensionError);
  CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), DimensionError);
  Tensor t = Tensor::zeros({2, 3});
  CHECK(t.size() == 6);
  CHECK_THROWS_AS(t.grad(), ContractError);
}

TEST_CASE("reductions and plumbing gradients") {
  Rng rng(43);
  Tensor x = random_tensor({4, 6}, rng);
  Tensor probe = random_tensor({2, 6}, rng, false);
  CHECK(grad_check([&] { return sum(mean_rows(x)); }, x) < 1e-5);
  CHECK(grad_check([&] { return sum(mul(slice_cols(x, 1, 3), slice_cols(x, 2, 3))); }, x) < 1e-4);
  CHECK(grad_check([&] {
          std::vector<Tensor> parts{slice_cols(x, 0, 2), slice_cols(x, 3, 2)};
          return sum(concat_cols(parts));
        }, x) < 1e-5);
  CHECK(grad_check([&] { return sum(mul(transpose(x), transpose(x))); }, x) < 1e-4);
  Tensor v = random_tensor({6}, rng);
  CHECK(grad_check([&] { return sum(add_rowvec(x, v)); }, v) < 1e-5);
  Tensor s = Tensor::from({1}, {0.7}, true);
  CHECK(grad_check([&] { return sum(scale_by(x, s)); }, s) < 1e-5);
}

TEST_CASE("weighted_sum gradients reach sequences and weights") {
  Rng rng(47);
  std::vector<Tensor> seqs{random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)};
  Tensor w = Tensor::from({2}, {0.3, 0.7}, true);
  Tensor probe = random_tensor({3, 4}, rng, false);
  auto f = [&] { return sum(mul(weighted_sum(seqs, w), probe)); };
  CHECK(grad_check(f, w) < 1e-5);
  CHECK(grad_check(f, seqs[0]) < 1e-5);
}
