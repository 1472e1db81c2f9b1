#include "doctest.h"

#include <cmath>

#include "ibot/tensor.hpp"

using namespace ibot;

TEST_CASE("softmax symmetry and normalization") {
  auto x = TensorF::from({2}, {0.f, 0.f});
  auto y = softmax_last(x);
  CHECK(y[0] == doctest::Approx(0.5));
  CHECK(y[1] == doctest::Approx(0.5));

  Rng rng(7);
  auto z = TensorF::randn({5, 9}, rng, 3.f);
  auto s = softmax_last(z);
  for (std::size_t r = 0; r < 5; ++r) {
    float sum = 0;
    for (std::size_t j = 0; j < 9; ++j) {
      CHECK(s[r * 9 + j] >= 0.f);
      sum += s[r * 9 + j];
    }
    CHECK(std::abs(sum - 1.f) < 1e-6f);
  }
}

TEST_CASE("softmax is stable at extreme logits") {
  auto x = TensorF::from({3}, {1000.f, 999.f, -1000.f});
  auto y = softmax_last(x);
  CHECK(std::isfinite(y[0]));
  CHECK(y[0] == doctest::Approx(1.f / (1.f + std::exp(-1.f))));
}

TEST_CASE("matmul identity") {
  auto I = TensorF::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Rng rng(1);
  auto A = TensorF::randn({3, 3}, rng);
  auto C = matmul(I, A);
  for (std::size_t i = 0; i < 9; ++i) CHECK(C[i] == doctest::Approx(A[i]));
}

TEST_CASE("matmul batched with rank-2 weight broadcast") {
  Rng rng(2);
  auto A = TensorD::randn({2, 3, 4}, rng);
  auto W = TensorD::randn({4, 5}, rng);
  auto C = matmul(A, W);
  REQUIRE(C.shape() == Shape{2, 3, 5});
  // spot check one element against the definition
  double acc = 0;
  for (std::size_t k = 0; k < 4; ++k) acc += A[1 * 12 + 2 * 4 + k] * W[k * 5 + 3];
  CHECK(C[1 * 15 + 2 * 5 + 3] == doctest::Approx(acc));
}

TEST_CASE("matmul shape mismatch names the primitive") {
  auto A = TensorF::zeros({2, 3});
  auto B = TensorF::zeros({4, 2});
  CHECK_THROWS_WITH_AS(matmul(A, B), doctest::Contains("matmul"), std::invalid_argument);
}

TEST_CASE("l2 normalize 3-4-5") {
  auto x = TensorF::from({2}, {3.f, 4.f});
  auto y = l2_normalize_last(x);
  CHECK(y[0] == doctest::Approx(0.6));
  CHECK(y[1] == doctest::Approx(0.8));
}

TEST_CASE("backward of sum of squares") {
  auto x = TensorD::from({3}, {1, 2, 3}, true);
  auto loss = sum_all(mul(x, x));
  backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(2));
  CHECK(x.grad()[1] == doctest::Approx(4));
  CHECK(x.grad()[2] == doctest::Approx(6));
}

TEST_CASE("backward of log-softmax component") {
  auto x = TensorD::from({2}, {0, 0}, true);
  auto loss = slice(log_softmax_last(x), 0, 0, 1);
  backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(0.5));
  CHECK(x.grad()[1] == doctest::Approx(-0.5));
}

TEST_CASE("backward requires scalar loss") {
  auto x = TensorD::from({2}, {1, 2}, true);
  auto y = mul(x, x);
  CHECK_THROWS_AS(backward(y), std::invalid_argument);
}

TEST_CASE("fan-out accumulates, never overwrites") {
  auto x = TensorD::from({4}, {1, 2, 3, 4}, true);
  auto loss = add(sum_all(x), sum_all(x));
  backward(loss);
  for (std::size_t i = 0; i < 4; ++i) CHECK(x.grad()[i] == doctest::Approx(2));
}

TEST_CASE("second backward on a consumed tape is rejected") {
  auto x = TensorD::from({2}, {1, 2}, true);
  auto loss = sum_all(mul(x, x));
  backward(loss);
  CHECK_THROWS_AS(backward(loss), std::logic_error);
}

TEST_CASE("grads off the loss path stay zero") {
  auto x = TensorD::from({2}, {1, 2}, true);
  auto y = TensorD::from({2}, {5, 6}, true);
  auto unused = mul(y, y);
  auto loss = sum_all(x);
  backward(loss);
  CHECK(y.grad()[0] == 0);
  CHECK(y.grad()[1] == 0);
  CHECK(unused.grad()[0] == 0);
}

TEST_CASE("grad_check on a constant-gradient function") {
  Rng rng(3);
  auto p = TensorD::randn({6}, rng);
  auto err = grad_check<double>([](const TensorD& x) { return sum_all(x); }, p, 1e-4);
  CHECK(err < 1e-10);
}

TEST_CASE("random 5-layer MLP matches finite differences") {
  Rng rng(11);
  std::vector<TensorD> ws, bs;
  std::size_t dims[] = {6, 8, 8, 8, 8, 1};
  for (int l = 0; l < 5; ++l) {
    ws.push_back(TensorD::randn({dims[l], dims[l + 1]}, rng, 0.5));
    bs.push_back(TensorD::randn({dims[l + 1]}, rng, 0.1));
  }
  auto f = [&](const TensorD& x) {
    TensorD h = reshape(x, {1, 6});
    for (int l = 0; l < 5; ++l) {
      h = add(matmul(h, ws[l]), bs[l]);
      if (l < 4) h = gelu(h);
    }
    return sum_all(h);
  };
  auto p = TensorD::randn({6}, rng);
  CHECK(grad_check<double>(f, p, 1e-4) < 1e-5);
}

// ---------------------------------------------------------------------------
// per-primitive gradient property tests
// ---------------------------------------------------------------------------

template <typename T>
void check_primitive(const char* name, const std::function<Tensor<T>(const Tensor<T>&)>& f, Shape shape, T tol,
                     int trials, std::uint64_t seed, double scale = 1.0) {
  // step balances truncation against cancellation noise in each precision
  const T step = std::is_same_v<T, float> ? T(1e-2) : T(1e-4);
  Rng rng(seed);
  for (int t = 0; t < trials; ++t) {
    auto p = Tensor<T>::randn(shape, rng, static_cast<T>(scale));
    T err = grad_check<T>(f, p, step);
    INFO(name, " trial ", t);
    CHECK(err < tol);
  }
}

template <typename T>
void run_primitive_suite(T tol) {
  const int trials = 100;
  Rng aux(99);
  auto other = Tensor<T>::randn({3, 4}, aux);
  auto gain = Tensor<T>::randn({4}, aux, T(0.5));
  auto bias = Tensor<T>::randn({4}, aux, T(0.5));
  auto weight = Tensor<T>::randn({4, 5}, aux, T(0.7));
  // offset gain away from zero so relative tolerances are meaningful
  for (auto& g : gain.data()) g += T(1);

  check_primitive<T>("add", [&](const Tensor<T>& x) { return sum_all(mul(add(x, other), other)); }, {3, 4}, tol,
                     trials, 1);
  check_primitive<T>("add_broadcast", [&](const Tensor<T>& x) { return sum_all(mul(add(x, gain), other)); }, {3, 4},
                     tol, trials, 2);
  check_primitive<T>("sub", [&](const Tensor<T>& x) { return sum_all(mul(sub(x, other), other)); }, {3, 4}, tol,
                     trials, 3);
  check_primitive<T>("mul", [&](const Tensor<T>& x) { return sum_all(mul(mul(x, other), other)); }, {3, 4}, tol,
                     trials, 4);
  check_primitive<T>("div", [&](const Tensor<T>& x) { return sum_all(div(x, add_scalar(mul(other, other), T(1)))); },
                     {3, 4}, tol, trials, 5);
  check_primitive<T>("scalar_ops", [&](const Tensor<T>& x) { return sum_all(add_scalar(mul_scalar(x, T(1.7)), T(0.3))); },
                     {3, 4}, tol, trials, 6);
  check_primitive<T>("matmul", [&](const Tensor<T>& x) { return sum_all(mul(matmul(x, weight), matmul(other, weight))); },
                     {3, 4}, tol, trials, 7);
  check_primitive<T>("reshape_transpose",
                     [&](const Tensor<T>& x) { return sum_all(mul(transpose(reshape(x, {4, 3}), {1, 0}), other)); },
                     {3, 4}, tol, trials, 8);
  check_primitive<T>("concat_slice",
                     [&](const Tensor<T>& x) {
                       auto c = concat<T>({x, other}, 0);
                       return sum_all(mul(slice(c, 0, 1, 3), slice(c, 0, 2, 3)));
                     },
                     {3, 4}, tol, trials, 9);
  check_primitive<T>("gather",
                     [&](const Tensor<T>& x) { return sum_all(mul(gather_rows(x, {2, 0, 2}), other)); }, {3, 4}, tol,
                     trials, 10);
  check_primitive<T>("sum_mean",
                     [&](const Tensor<T>& x) {
                       return sum_all(mul(sum_axes(x, {0}), mean_axes(mul(x, x), {0})));
                     },
                     {3, 4}, tol, trials, 11);
  check_primitive<T>("exp", [&](const Tensor<T>& x) { return sum_all(mul(exp_op(x), other)); }, {3, 4}, tol, trials,
                     12, 0.5);
  check_primitive<T>("log",
                     [&](const Tensor<T>& x) { return sum_all(log_op(add_scalar(mul(x, x), T(1)))); }, {3, 4}, tol,
                     trials, 13);
  check_primitive<T>("gelu", [&](const Tensor<T>& x) { return sum_all(mul(gelu(x), other)); }, {3, 4}, tol, trials,
                     14);
  check_primitive<T>("softmax", [&](const Tensor<T>& x) { return sum_all(mul(softmax_last(x), other)); }, {3, 4}, tol,
                     trials, 15);
  check_primitive<T>("log_softmax",
                     [&](const Tensor<T>& x) { return sum_all(mul(log_softmax_last(x), other)); }, {3, 4}, tol,
                     trials, 16);
  check_primitive<T>("layer_norm",
                     [&](const Tensor<T>& x) { return sum_all(mul(layer_norm(x, gain, bias, T(1e-6)), other)); },
                     {3, 4}, tol, trials, 17);
  check_primitive<T>("l2_normalize",
                     [&](const Tensor<T>& x) { return sum_all(mul(l2_normalize_last(add_scalar(x, T(3))), other)); },
                     {3, 4}, tol, trials, 18);
}

TEST_CASE("primitive gradients match finite differences (double)") { run_primitive_suite<double>(1e-5); }

TEST_CASE("primitive gradients match finite differences (float)") { run_primitive_suite<float>(1e-3f); }
