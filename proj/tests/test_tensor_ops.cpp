#include <doctest.h>

#include <cmath>
#include <random>

#include "cmtboost/ops.hpp"
#include "cmtboost/rng.hpp"
#include "oracles.hpp"

using namespace cmtboost;

namespace {

template <typename T>
Tensor<T> rand_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> uni(lo, hi);
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(uni(rng));
  return Tensor<T>::from_data(std::move(shape), std::move(v));
}

template <typename T>
void check_close(const Tensor<T>& got, const std::vector<T>& want, double tol) {
  REQUIRE(got.numel() == want.size());
  for (std::size_t i = 0; i < want.size(); ++i) {
    CHECK(std::abs(static_cast<double>(got.data()[i]) - static_cast<double>(want[i])) <= tol);
  }
}

template <typename T>
void conv_oracle_trials(double tol) {
  auto rng = make_rng(401);
  std::uniform_int_distribution<int> dim(1, 8);
  std::uniform_int_distribution<int> small(1, 3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = small(rng), cin = small(rng), cout = small(rng);
    const std::size_t h = dim(rng), w = dim(rng);
    const std::size_t kh = 1 + static_cast<std::size_t>(make_rng(trial)() % std::min<std::size_t>(3, h));
    const std::size_t kw = 1 + static_cast<std::size_t>(make_rng(trial + 1)() % std::min<std::size_t>(3, w));
    const int stride = small(rng);
    const int pad = small(rng) - 1;
    if (h + 2 * pad < kh || w + 2 * pad < kw) continue;
    Tensor<T> x = rand_tensor<T>({n, cin, h, w}, rng);
    Tensor<T> wt = rand_tensor<T>({cout, cin, kh, kw}, rng);
    Tensor<T> bias = rand_tensor<T>({cout}, rng);

    Tensor<T> got = conv2d(x, wt, bias, stride, pad);
    std::size_t oh, ow;
    std::vector<T> bias_copy = bias.data();
    auto want = oracles::conv2d<T>(x.data(), {n, cin, h, w}, wt.data(), cout, kh, kw, &bias_copy,
                                   stride, pad, &oh, &ow);
    REQUIRE(got.shape() == Shape{n, cout, oh, ow});
    check_close(got, want, tol);
  }
}

template <typename T>
void depthwise_oracle_trials(double tol) {
  auto rng = make_rng(402);
  std::uniform_int_distribution<int> dim(2, 8);
  std::uniform_int_distribution<int> small(1, 3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = small(rng), c = small(rng);
    const std::size_t h = dim(rng), w = dim(rng);
    const int stride = small(rng);
    Tensor<T> x = rand_tensor<T>({n, c, h, w}, rng);
    Tensor<T> wt = rand_tensor<T>({c, 1, 2, 2}, rng);
    Tensor<T> got = depthwise_conv2d(x, wt, stride, 1);
    std::size_t oh, ow;
    auto want =
        oracles::depthwise_conv2d<T>(x.data(), {n, c, h, w}, wt.data(), 2, 2, stride, 1, &oh, &ow);
    REQUIRE(got.shape() == Shape{n, c, oh, ow});
    check_close(got, want, tol);
  }
}

template <typename T>
void pool_oracle_trials(double tol) {
  auto rng = make_rng(403);
  std::uniform_int_distribution<int> dim(2, 8);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t h = dim(rng), w = dim(rng);
    const int k = 1 + static_cast<int>(rng() % std::min<std::size_t>(3, std::min(h, w)));
    const int stride = 1 + static_cast<int>(rng() % 2);
    Tensor<T> x = rand_tensor<T>({2, 2, h, w}, rng);
    for (bool max_mode : {true, false}) {
      Tensor<T> got = pool2d(x, max_mode ? PoolMode::kMax : PoolMode::kAvg, k, stride);
      std::size_t oh, ow;
      auto want = oracles::pool2d<T>(x.data(), {2, 2, h, w}, max_mode, k, stride, &oh, &ow);
      REQUIRE(got.shape() == Shape{2, 2, oh, ow});
      check_close(got, want, tol);
    }
  }
}

}  // namespace

TEST_CASE("conv2d basic examples") {
  // 1x1 identity kernel.
  auto x = Tensor<float>::from_data({1, 1, 1, 1}, {5.0f});
  auto w = Tensor<float>::from_data({1, 1, 1, 1}, {1.0f});
  auto y = conv2d(x, w, Tensor<float>(), 1, 0);
  CHECK(y.data()[0] == 5.0f);

  // 3x3 grid 1..9 with an all-ones 2x2 kernel: expected values recomputed
  // through the nested-loop oracle.
  auto grid = Tensor<float>::from_data({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto ones = Tensor<float>::from_data({1, 1, 2, 2}, {1, 1, 1, 1});
  auto out = conv2d(grid, ones, Tensor<float>(), 1, 0);
  std::size_t oh, ow;
  auto want = oracles::conv2d<float>(grid.data(), {1, 1, 3, 3}, ones.data(), 1, 2, 2, nullptr, 1,
                                     0, &oh, &ow);
  check_close(out, want, 1e-6);
  check_close(out, {12.0f, 16.0f, 24.0f, 28.0f}, 1e-6);
}

TEST_CASE("conv2d stem shape claim") {
  auto rng = make_rng(7);
  auto x = rand_tensor<float>({1, 3, 224, 224}, rng);
  auto w = rand_tensor<float>({64, 3, 3, 3}, rng);
  auto y = conv2d(x, w, Tensor<float>(), 2, 1);
  CHECK(y.shape() == Shape{1, 64, 112, 112});
}

TEST_CASE("conv2d errors") {
  auto rng = make_rng(8);
  auto x = rand_tensor<float>({1, 2, 4, 4}, rng);
  auto w_bad = rand_tensor<float>({1, 3, 3, 3}, rng);
  CHECK_THROWS_AS(conv2d(x, w_bad, Tensor<float>(), 1, 1), DimensionError);
  auto w = rand_tensor<float>({1, 2, 3, 3}, rng);
  CHECK_THROWS_AS(conv2d(x, w, Tensor<float>(), 0, 1), ParameterError);
  auto w_big = rand_tensor<float>({1, 2, 6, 6}, rng);
  CHECK_THROWS_AS(conv2d(x, w_big, Tensor<float>(), 1, 0), DimensionError);
}

TEST_CASE("conv2d matches oracle on random instances") {
  conv_oracle_trials<float>(1e-5);
  conv_oracle_trials<double>(1e-10);
}

TEST_CASE("depthwise_conv2d examples") {
  auto rng = make_rng(9);
  // Identity kernel: center 1.
  auto x = rand_tensor<float>({1, 3, 5, 5}, rng);
  auto ident = Tensor<float>({3, 1, 3, 3});
  for (int c = 0; c < 3; ++c) ident.data()[c * 9 + 4] = 1.0f;
  auto y = depthwise_conv2d(x, ident, 1, 1);
  check_close(y, x.data(), 0.0);

  // Hand sum.
  auto x2 = Tensor<float>::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
  auto ones = Tensor<float>::from_data({1, 1, 2, 2}, {1, 1, 1, 1});
  auto v = depthwise_conv2d(x2, ones, 1, 0);
  CHECK(v.shape() == Shape{1, 1, 1, 1});
  CHECK(v.data()[0] == doctest::Approx(10.0f));

  // Reduction shape.
  auto x3 = rand_tensor<float>({1, 8, 14, 14}, rng);
  auto w3 = rand_tensor<float>({8, 1, 3, 3}, rng);
  CHECK(depthwise_conv2d(x3, w3, 2, 1).shape() == Shape{1, 8, 7, 7});

  auto w_bad = rand_tensor<float>({4, 1, 3, 3}, rng);
  CHECK_THROWS_AS(depthwise_conv2d(x, w_bad, 1, 1), DimensionError);
}

TEST_CASE("depthwise_conv2d per-channel independence") {
  auto rng = make_rng(10);
  auto x = rand_tensor<float>({1, 2, 4, 4}, rng);
  auto w = rand_tensor<float>({2, 1, 3, 3}, rng);
  auto base = depthwise_conv2d(x, w, 1, 1);
  // Changing channel 1 must not affect channel 0 of the output.
  Tensor<float> x2 = x.clone();
  for (std::size_t i = 16; i < 32; ++i) x2.data()[i] += 1.0f;
  auto moved = depthwise_conv2d(x2, w, 1, 1);
  for (std::size_t i = 0; i < 16; ++i) CHECK(moved.data()[i] == base.data()[i]);
}

TEST_CASE("depthwise matches oracle on random instances") {
  depthwise_oracle_trials<float>(1e-5);
  depthwise_oracle_trials<double>(1e-10);
}

TEST_CASE("pool2d examples") {
  auto constant = Tensor<float>({1, 1, 4, 4}, 7.0f);
  for (auto mode : {PoolMode::kMax, PoolMode::kAvg}) {
    auto y = pool2d(constant, mode, 2, 2);
    for (float v : y.data()) CHECK(v == doctest::Approx(7.0f));
  }
  auto x = Tensor<float>::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
  CHECK(pool2d(x, PoolMode::kMax, 2, 2).data()[0] == doctest::Approx(4.0f));
  CHECK(pool2d(x, PoolMode::kAvg, 2, 2).data()[0] == doctest::Approx(2.5f));
  CHECK_THROWS_AS(pool2d(x, PoolMode::kMax, 3, 1), DimensionError);
}

TEST_CASE("pool2d max dominates avg elementwise") {
  auto rng = make_rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = rand_tensor<float>({1, 2, 6, 6}, rng);
    auto mx = pool2d(x, PoolMode::kMax, 2, 2);
    auto av = pool2d(x, PoolMode::kAvg, 2, 2);
    for (std::size_t i = 0; i < mx.numel(); ++i) CHECK(mx.data()[i] >= av.data()[i]);
  }
}

TEST_CASE("pool2d matches oracle on random instances") {
  pool_oracle_trials<float>(1e-5);
  pool_oracle_trials<double>(1e-10);
}

TEST_CASE("linear examples") {
  auto x = Tensor<float>::from_data({2, 2}, {1, 2, 3, 4});
  auto ident = Tensor<float>::from_data({2, 2}, {1, 0, 0, 1});
  auto zero_bias = Tensor<float>({2});
  check_close(linear(x, ident, zero_bias), x.data(), 0.0);

  auto x2 = Tensor<float>::from_data({1, 2}, {1, 2});
  auto w = Tensor<float>::from_data({2, 2}, {1, 0, 0, 2});
  auto b = Tensor<float>::from_data({2}, {1, 1});
  check_close(linear(x2, w, b), {2.0f, 5.0f}, 1e-6);

  auto rng = make_rng(12);
  auto big = rand_tensor<float>({49, 128}, rng);
  auto wbig = rand_tensor<float>({128, 256}, rng);
  CHECK(linear(big, wbig, Tensor<float>()).shape() == Shape{49, 256});

  CHECK_THROWS_AS(linear(x2, Tensor<float>::from_data({3, 2}, {1, 2, 3, 4, 5, 6}), b),
                  DimensionError);
}

TEST_CASE("layer_norm examples") {
  auto gamma = Tensor<float>({3}, 1.0f);
  auto beta = Tensor<float>({3});
  // Constant token: zero variance maps to zero under the eps guard.
  auto constant = Tensor<float>({2, 3}, 4.0f);
  auto y = layer_norm(constant, gamma, beta, 1e-5f);
  for (float v : y.data()) CHECK(std::abs(v) < 1e-6f);

  auto two = Tensor<float>::from_data({1, 2}, {1, 3});
  auto y2 = layer_norm(two, Tensor<float>({2}, 1.0f), Tensor<float>({2}), 1e-12f);
  CHECK(y2.data()[0] == doctest::Approx(-1.0f).epsilon(1e-4));
  CHECK(y2.data()[1] == doctest::Approx(1.0f).epsilon(1e-4));

  CHECK_THROWS_AS(layer_norm(constant, Tensor<float>({2}, 1.0f), beta, 1e-5f), DimensionError);
  CHECK_THROWS_AS(layer_norm(constant, gamma, beta, 0.0f), ParameterError);
}

TEST_CASE("layer_norm per-token statistics") {
  auto rng = make_rng(13);
  auto x = rand_tensor<float>({2, 8, 3, 3}, rng);
  auto y = layer_norm(x, Tensor<float>({8}, 1.0f), Tensor<float>({8}), 1e-6f);
  for (std::size_t n = 0; n < 2; ++n) {
    for (std::size_t s = 0; s < 9; ++s) {
      double mean = 0.0, var = 0.0;
      for (std::size_t c = 0; c < 8; ++c) mean += y.data()[(n * 8 + c) * 9 + s];
      mean /= 8.0;
      for (std::size_t c = 0; c < 8; ++c) {
        const double d = y.data()[(n * 8 + c) * 9 + s] - mean;
        var += d * d;
      }
      var /= 8.0;
      CHECK(std::abs(mean) <= 1e-6);
      CHECK(std::abs(var - 1.0) <= 1e-4);
    }
  }
}

TEST_CASE("activation fixed points and asymptotes") {
  auto x = Tensor<float>::from_data({5}, {0.0f, -1.0f, 1.0f, 10.0f, -10.0f});
  auto g = gelu(x);
  CHECK(g.data()[0] == 0.0f);
  CHECK(static_cast<double>(g.data()[2]) ==
        doctest::Approx(oracles::gelu(1.0)).epsilon(1e-6));
  CHECK(static_cast<double>(g.data()[2]) == doctest::Approx(0.841345).epsilon(1e-5));
  CHECK(std::abs(static_cast<double>(g.data()[3]) - 10.0) < 1e-6);

  auto r = relu(x);
  CHECK(r.data()[1] == 0.0f);
  CHECK(r.data()[2] == 1.0f);

  auto s = sigmoid(x);
  CHECK(s.data()[0] == doctest::Approx(0.5f));
  CHECK(s.data()[3] > 0.9999f);
  CHECK(s.data()[4] < 0.0001f);
}

TEST_CASE("gelu matches independent normal-CDF evaluation") {
  auto rng = make_rng(14);
  auto x = rand_tensor<double>({64}, rng, -4.0, 4.0);
  auto y = gelu(x);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    CHECK(y.data()[i] == doctest::Approx(oracles::gelu(x.data()[i])).epsilon(1e-12));
  }
}

TEST_CASE("softmax examples and invariants") {
  auto x = Tensor<float>::from_data({1, 2}, {0, 0});
  auto y = softmax(x, 1);
  CHECK(y.data()[0] == doctest::Approx(0.5f));

  auto x2 = Tensor<float>::from_data({1, 2}, {1, 2});
  auto y2 = softmax(x2, 1);
  CHECK(y2.data()[0] == doctest::Approx(0.26894f).epsilon(1e-4));
  CHECK(y2.data()[1] == doctest::Approx(0.73106f).epsilon(1e-4));

  auto rng = make_rng(15);
  for (int trial = 0; trial < 1000; ++trial) {
    auto z = rand_tensor<float>({1, 5}, rng, -5.0, 5.0);
    auto p = softmax(z, 1);
    double sum = 0.0;
    for (float v : p.data()) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
      sum += v;
    }
    CHECK(std::abs(sum - 1.0) <= 1e-6);

    // Shift invariance.
    Tensor<float> shifted = z.clone();
    for (auto& v : shifted.data()) v += 3.25f;
    auto p2 = softmax(shifted, 1);
    for (std::size_t i = 0; i < p.numel(); ++i) {
      CHECK(std::abs(p.data()[i] - p2.data()[i]) <= 1e-6f);
    }
  }
}

TEST_CASE("concat_channels contract") {
  auto rng = make_rng(16);
  auto a = rand_tensor<float>({2, 4, 3, 3}, rng);
  auto b = rand_tensor<float>({2, 2, 3, 3}, rng);
  auto y = concat_channels(a, b);
  CHECK(y.shape() == Shape{2, 6, 3, 3});
  // Slicing channels [0,Ca) recovers a bit-identically.
  for (std::size_t n = 0; n < 2; ++n) {
    for (std::size_t c = 0; c < 4; ++c) {
      for (std::size_t s = 0; s < 9; ++s) {
        CHECK(y.data()[(n * 6 + c) * 9 + s] == a.data()[(n * 4 + c) * 9 + s]);
      }
    }
  }
  auto c = rand_tensor<float>({2, 3, 3, 3}, rng);
  auto left = concat_channels(concat_channels(a, b), c);
  auto right = concat_channels(a, concat_channels(b, c));
  for (std::size_t i = 0; i < left.numel(); ++i) CHECK(left.data()[i] == right.data()[i]);

  CHECK_THROWS_AS(concat_channels(a, rand_tensor<float>({2, 2, 4, 3}, rng)), DimensionError);
}

TEST_CASE("dropout identities and statistics") {
  auto rng = make_rng(17);
  auto x = rand_tensor<float>({100}, rng);
  auto eval_out = dropout(x, 0.4, false, 5);
  CHECK(eval_out.same_storage(x));
  auto p0 = dropout(x, 0.0, true, 5);
  CHECK(p0.same_storage(x));
  CHECK_THROWS_AS(dropout(x, 1.0, true, 5), ParameterError);

  auto big = Tensor<float>({100000}, 1.0f);
  auto dropped = dropout(big, 0.3, true, 12345);
  double mean = 0.0;
  for (float v : dropped.data()) mean += v;
  mean /= static_cast<double>(big.numel());
  CHECK(std::abs(mean - 1.0) <= 0.01);

  auto again = dropout(big, 0.3, true, 12345);
  for (std::size_t i = 0; i < big.numel(); ++i) CHECK(again.data()[i] == dropped.data()[i]);
}

TEST_CASE("cross_entropy examples") {
  auto uniform = Tensor<float>::from_data({1, 2}, {0, 0});
  CHECK(cross_entropy(uniform, {0}).item() == doctest::Approx(std::log(2.0)).epsilon(1e-6));

  auto confident = Tensor<float>::from_data({1, 2}, {100, 0});
  CHECK(cross_entropy(confident, {0}).item() <= 1e-6f);

  auto x = Tensor<float>::from_data({1, 2}, {1, 2});
  const double want = -std::log(std::exp(1.0) / (std::exp(1.0) + std::exp(2.0)));
  CHECK(static_cast<double>(cross_entropy(x, {0}).item()) == doctest::Approx(want).epsilon(1e-6));
  CHECK(static_cast<double>(cross_entropy(x, {0}).item()) ==
        doctest::Approx(1.313262).epsilon(1e-5));

  CHECK_THROWS_AS(cross_entropy(x, {2}), ParameterError);
  CHECK_THROWS_AS(cross_entropy(x, {0, 1}), DimensionError);
}

TEST_CASE("ops are deterministic") {
  auto rng = make_rng(18);
  auto x = rand_tensor<float>({2, 3, 6, 6}, rng);
  auto w = rand_tensor<float>({4, 3, 3, 3}, rng);
  auto b = rand_tensor<float>({4}, rng);
  auto y1 = conv2d(x, w, b, 1, 1);
  auto y2 = conv2d(x, w, b, 1, 1);
  for (std::size_t i = 0; i < y1.numel(); ++i) CHECK(y1.data()[i] == y2.data()[i]);
}
