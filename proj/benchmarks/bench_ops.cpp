#include <benchmark/benchmark.h>

#include "mome/model.hpp"
#include "mome/optim.hpp"
#include "mome/train.hpp"

using namespace mome;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = false) {
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = rng.gaussian();
  return Tensor::from(std::move(shape), std::move(data), requires_grad);
}

void BM_Matmul(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Rng rng(1);
  Tensor a = random_tensor({n, n}, rng);
  Tensor b = random_tensor({n, n}, rng);
  for (auto _ : state) {
    Tensor c = matmul(a, b);
    benchmark::DoNotOptimize(c.values().data());
  }
  state.SetItemsProcessed(state.iterations() * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(16)->Arg(32)->Arg(64)->Arg(128);

void BM_MatmulBackward(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Rng rng(1);
  Tensor a = random_tensor({n, n}, rng, true);
  Tensor b = random_tensor({n, n}, rng, true);
  for (auto _ : state) {
    Tape tape;
    tape.backward(sum(matmul(a, b)));
    a.zero_grad();
    b.zero_grad();
  }
  state.SetItemsProcessed(state.iterations() * 3 * n * n * n);
}
BENCHMARK(BM_MatmulBackward)->Arg(16)->Arg(32)->Arg(64);

void BM_BilinearSample(benchmark::State& state) {
  Rng rng(2);
  Tensor value = random_tensor({8, 8, 32}, rng);
  Tensor xy = Tensor::from({2}, {0.37, 0.58});
  for (auto _ : state) {
    Tensor out = bilinear_sample(value, xy);
    benchmark::DoNotOptimize(out.values().data());
  }
}
BENCHMARK(BM_BilinearSample);

void BM_AdtForward(benchmark::State& state) {
  Rng rng(3);
  AdtConfig cfg;  // desk defaults: 3x3 grid, M=2, 4 heads, 2 points, C=32
  AdtParams adt = AdtParams::init(cfg, 6, rng);
  FeatureMap f;
  f.grid = random_tensor({7, 6, 6}, rng);
  for (auto _ : state) {
    Tensor out = adt_forward(f, cfg, adt);
    benchmark::DoNotOptimize(out.values().data());
  }
}
BENCHMARK(BM_AdtForward);

void BM_TrainStep(benchmark::State& state) {
  SynthConfig d;
  TaskSuite suite = make_tasks(4, 4, 2, d);
  std::vector<int> ch;
  for (auto& e : suite.encoders) ch.push_back(e.channels);
  ModelConfig mc;
  mc.mole_experts = 1;
  Rng rng = Rng(4).fork(0x1417);
  MomeModel model = MomeModel::init(mc, ch, rng);
  AdamWConfig ocfg;
  AdamW opt(model.trainable_params(), ocfg);
  Rng drng = Rng(4).fork(0xda7a);
  for (auto _ : state) {
    auto batch = sample_balanced_batch(suite, 32, drng);
    Tape tape;
    std::vector<Tensor> losses;
    for (auto& s : batch) {
      Tensor pred = model_forward(model, s);
      Tensor diff = sub(pred, Tensor::scalar(s.label));
      losses.push_back(mul(diff, diff));
    }
    tape.backward(scale(add_n(losses), 1.0 / 32.0));
    opt.step();
  }
}
BENCHMARK(BM_TrainStep);

}  // namespace

BENCHMARK_MAIN();
