#include <benchmark/benchmark.h>

#include <random>

#include "cmtboost/blocks.hpp"
#include "cmtboost/model.hpp"
#include "cmtboost/ops.hpp"
#include "cmtboost/rng.hpp"

using namespace cmtboost;

namespace {

Tensor<float> rand_tensor(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> uni(-1.0f, 1.0f);
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) x = uni(rng);
  return Tensor<float>::from_data(std::move(shape), std::move(v));
}

void BM_Conv2dStage1(benchmark::State& state) {
  auto rng = make_rng(1);
  auto x = rand_tensor({16, 16, 32, 32}, rng);
  auto w = rand_tensor({16, 16, 3, 3}, rng);
  auto b = rand_tensor({16}, rng);
  for (auto _ : state) {
    auto y = conv2d(x, w, b, 1, 1);
    benchmark::DoNotOptimize(y.data().data());
  }
}
BENCHMARK(BM_Conv2dStage1);

void BM_DepthwiseConv(benchmark::State& state) {
  auto rng = make_rng(2);
  auto x = rand_tensor({16, 64, 8, 8}, rng);
  auto w = rand_tensor({64, 1, 3, 3}, rng);
  for (auto _ : state) {
    auto y = depthwise_conv2d(x, w, 1, 1);
    benchmark::DoNotOptimize(y.data().data());
  }
}
BENCHMARK(BM_DepthwiseConv);

void BM_DeskModelForward(benchmark::State& state) {
  BoostedHybridModel<float> model(ModelConfig::desk64());
  auto rng = make_rng(3);
  auto batch = rand_tensor({16, 1, 64, 64}, rng);
  for (auto _ : state) {
    auto out = model.forward(batch, false, 0);
    benchmark::DoNotOptimize(out.probs.data().data());
  }
}
BENCHMARK(BM_DeskModelForward);

void BM_DeskModelTrainStep(benchmark::State& state) {
  BoostedHybridModel<float> model(ModelConfig::desk64());
  auto rng = make_rng(4);
  auto batch = rand_tensor({16, 1, 64, 64}, rng);
  std::vector<int> labels(16);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 2);
  for (auto _ : state) {
    GradientTape<float> tape;
    Tensor<float> loss;
    {
      GradientTape<float>::Scope scope(tape);
      auto out = model.forward(batch, true, 7);
      loss = cross_entropy(out.logits, labels);
    }
    tape.backward(loss);
    model.registry().zero_grad();
    benchmark::DoNotOptimize(loss.item());
  }
}
BENCHMARK(BM_DeskModelTrainStep);

}  // namespace

BENCHMARK_MAIN();
