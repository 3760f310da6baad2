#include <doctest.h>

#include <cmath>
#include <random>

#include "cmtboost/gradcheck.hpp"
#include "cmtboost/ops.hpp"
#include "cmtboost/rng.hpp"

using namespace cmtboost;

namespace {

template <typename T>
Tensor<T> rand_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> uni(lo, hi);
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(uni(rng));
  return Tensor<T>::from_data(std::move(shape), std::move(v));
}

}  // namespace

TEST_CASE("cross-entropy gradient equals probabilities minus one-hot") {
  auto rng = make_rng(21);
  auto logits = rand_tensor<double>({3, 4}, rng, -2.0, 2.0);
  logits.set_requires_grad(true);
  std::vector<int> labels = {2, 0, 3};

  GradientTape<double> tape;
  Tensor<double> loss;
  {
    GradientTape<double>::Scope scope(tape);
    loss = cross_entropy(logits, labels);
  }
  tape.backward(loss);

  auto probs = softmax(logits, 1);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t k = 0; k < 4; ++k) {
      const double onehot = static_cast<std::size_t>(labels[r]) == k ? 1.0 : 0.0;
      const double want = (probs.data()[r * 4 + k] - onehot) / 3.0;
      CHECK(std::abs(logits.grad()[r * 4 + k] - want) <= 1e-6);
    }
  }
}

TEST_CASE("conv2d weight gradient matches central differences") {
  auto rng = make_rng(22);
  auto x = rand_tensor<double>({1, 2, 5, 5}, rng);
  auto w = rand_tensor<double>({3, 2, 3, 3}, rng);
  const double err = gradcheck(
      [](const std::vector<Tensor<double>>& in) {
        return sum_all(conv2d(in[1], in[0], Tensor<double>(), 1, 1));
      },
      {w, x}, 1e-5);
  CHECK(err <= 1e-6);
}

TEST_CASE("zero upstream gradient leaves all gradients zero") {
  auto rng = make_rng(23);
  auto x = rand_tensor<double>({2, 3}, rng);
  auto w = rand_tensor<double>({3, 3}, rng);
  x.set_requires_grad(true);
  w.set_requires_grad(true);
  x.zero_grad();
  w.zero_grad();

  GradientTape<double> tape;
  Tensor<double> loss;
  {
    GradientTape<double>::Scope scope(tape);
    loss = scale(sum_all(linear(x, w, Tensor<double>())), 0.0);
  }
  tape.backward(loss);
  for (double g : x.grad()) CHECK(g == 0.0);
  for (double g : w.grad()) CHECK(g == 0.0);
}

TEST_CASE("backward error cases") {
  GradientTape<double> tape;
  auto rng = make_rng(24);
  auto x = rand_tensor<double>({2, 2}, rng);
  CHECK_THROWS_AS(tape.backward(x), ParameterError);  // nothing recorded

  x.set_requires_grad(true);
  Tensor<double> y;
  {
    GradientTape<double>::Scope scope(tape);
    y = relu(x);
  }
  CHECK_THROWS_AS(tape.backward(y), DimensionError);  // non-scalar loss
}

TEST_CASE("tape is consumed by backward") {
  auto rng = make_rng(25);
  auto x = rand_tensor<double>({3}, rng);
  x.set_requires_grad(true);
  GradientTape<double> tape;
  Tensor<double> loss;
  {
    GradientTape<double>::Scope scope(tape);
    loss = sum_all(relu(x));
  }
  CHECK(tape.size() == 2);
  tape.backward(loss);
  CHECK(tape.empty());
  CHECK_THROWS_AS(tape.backward(loss), ParameterError);
}

TEST_CASE("backward accumulates deterministically") {
  auto rng = make_rng(26);
  auto x = rand_tensor<double>({2, 8, 4, 4}, rng);
  auto w = rand_tensor<double>({8, 1, 3, 3}, rng);
  std::vector<double> first;
  for (int run = 0; run < 2; ++run) {
    Tensor<double> xr = x.clone();
    Tensor<double> wr = w.clone();
    xr.set_requires_grad(true);
    wr.set_requires_grad(true);
    GradientTape<double> tape;
    Tensor<double> loss;
    {
      GradientTape<double>::Scope scope(tape);
      loss = sum_all(gelu(depthwise_conv2d(xr, wr, 1, 1)));
    }
    tape.backward(loss);
    if (run == 0) {
      first = wr.grad();
    } else {
      for (std::size_t i = 0; i < first.size(); ++i) CHECK(wr.grad()[i] == first[i]);
    }
  }
}

TEST_CASE("gradcheck on named ops meets spec thresholds") {
  auto rng = make_rng(27);
  auto x = rand_tensor<double>({4, 5}, rng);
  auto w = rand_tensor<double>({5, 3}, rng);
  auto b = rand_tensor<double>({3}, rng);
  const double linear_err = gradcheck(
      [](const std::vector<Tensor<double>>& in) {
        return sum_all(mul(linear(in[0], in[1], in[2]),
                           Tensor<double>::from_data({4, 3}, {0.3, 1.1, 0.7, 0.9, 1.3, 0.5, 0.8,
                                                              1.2, 0.6, 1.0, 0.4, 1.4})));
      },
      {x, w, b}, 1e-5);
  CHECK(linear_err <= 1e-7);

  auto xn = rand_tensor<double>({2, 6, 2, 2}, rng);
  auto gamma = rand_tensor<double>({6}, rng, 0.5, 1.5);
  auto beta = rand_tensor<double>({6}, rng, -0.5, 0.5);
  const double ln_err = gradcheck(
      [](const std::vector<Tensor<double>>& in) {
        return sum_all(layer_norm(in[0], in[1], in[2], 1e-5));
      },
      {xn, gamma, beta}, 1e-5);
  CHECK(ln_err <= 1e-6);
}

TEST_CASE("gradcheck battery passes and flags injected faults") {
  auto items = gradcheck_battery();
  CHECK(items.size() >= 30);
  bool has_end_to_end = false;
  for (const auto& item : items) {
    INFO(item.name, " err ", item.max_rel_err, " threshold ", item.threshold);
    CHECK(item.passed());
    if (item.name == "end_to_end_desk_tiny") has_end_to_end = true;
  }
  CHECK(has_end_to_end);

  auto faulty = gradcheck_battery("linear");
  bool flagged = false;
  for (const auto& item : faulty) {
    if (item.name == "linear") flagged = !item.passed();
  }
  CHECK(flagged);
}
