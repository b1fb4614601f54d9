#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>

#include "jtnmt/numerics.hpp"

using namespace jtnmt::numerics;

namespace {

Tensor random_tensor(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor t(r, c);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = n(rng);
  return t;
}

using Builder = std::function<Var(Graph&, const std::vector<Var>&)>;

// Central-difference check of d sum(weights * f(inputs)) / d inputs.
void check_gradients(const std::vector<Tensor>& inputs, const Builder& f, double tol = 1e-6) {
  std::mt19937_64 rng(99);
  Tensor proj;
  auto evaluate = [&](const std::vector<Tensor>& in, std::vector<Tensor>* grads) {
    Graph g;
    std::vector<Var> vars;
    for (const Tensor& t : in) vars.push_back(g.input(t, true));
    const Var out = f(g, vars);
    if (proj.size() == 0) proj = random_tensor(g.value(out).rows(), g.value(out).cols(), rng);
    const Var loss = g.sum(g.mul(out, g.input(proj)));
    if (grads) {
      g.backward(loss);
      for (const Var v : vars) grads->push_back(g.grad(v));
    }
    return g.value(loss)(0, 0);
  };
  std::vector<Tensor> analytic;
  evaluate(inputs, &analytic);
  const double h = 1e-6;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (Eigen::Index i = 0; i < inputs[k].size(); ++i) {
      std::vector<Tensor> plus = inputs;
      std::vector<Tensor> minus = inputs;
      plus[k].data()[i] += h;
      minus[k].data()[i] -= h;
      const double fd = (evaluate(plus, nullptr) - evaluate(minus, nullptr)) / (2 * h);
      CHECK(analytic[k].data()[i] == doctest::Approx(fd).epsilon(tol).scale(1.0));
    }
  }
}

}  // namespace

TEST_CASE("softmax and log_softmax agree with the direct formulas") {
  Tensor x(2, 3);
  x << 1.0, 2.0, 3.0, -1.0, 0.0, 1000.0;
  const Tensor p = softmax(x, 1);
  const Tensor lp = log_softmax(x, 1);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  CHECK(p(0, 2) == doctest::Approx(std::exp(3.0) / z));
  CHECK(lp(0, 0) == doctest::Approx(1.0 - std::log(z)));
  CHECK(p(1, 2) == 1.0);
  CHECK(p(1, 0) == 0.0);
  CHECK(all_finite(lp));
  const Tensor pc = softmax(x.transpose(), 0);
  CHECK((pc.transpose() - p).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("vectorized tanh and sigmoid match libm") {
  Tensor x(1, 7);
  x << -30.0, -3.0, -0.5, 0.0, 0.25, 4.0, 30.0;
  const Tensor t = jtnmt::numerics::tanh(x);
  const Tensor s = jtnmt::numerics::sigmoid(x);
  for (Eigen::Index i = 0; i < x.cols(); ++i) {
    CHECK(t(0, i) == doctest::Approx(std::tanh(x(0, i))).epsilon(1e-14));
    CHECK(s(0, i) == doctest::Approx(1.0 / (1.0 + std::exp(-x(0, i)))).epsilon(1e-14));
  }
}

TEST_CASE("every primitive passes a finite-difference gradient check") {
  std::mt19937_64 rng(7);
  const Tensor a = random_tensor(3, 4, rng);
  const Tensor b = random_tensor(4, 2, rng);
  const Tensor c = random_tensor(3, 4, rng);
  const Tensor row = random_tensor(1, 4, rng);
  const Tensor col = random_tensor(3, 1, rng);
  const Tensor scalar = random_tensor(1, 1, rng);

  SUBCASE("matmul") {
    check_gradients({a, b}, [](Graph& g, const std::vector<Var>& v) { return g.matmul(v[0], v[1]); });
  }
  SUBCASE("add and sub with broadcasting") {
    for (const Tensor* rhs : {&c, &row, &scalar}) {
      check_gradients({a, *rhs}, [](Graph& g, const std::vector<Var>& v) { return g.add(v[0], v[1]); });
      check_gradients({a, *rhs}, [](Graph& g, const std::vector<Var>& v) { return g.sub(v[0], v[1]); });
    }
  }
  SUBCASE("mul with broadcasting") {
    for (const Tensor* rhs : {&c, &col, &scalar}) {
      check_gradients({a, *rhs}, [](Graph& g, const std::vector<Var>& v) { return g.mul(v[0], v[1]); });
    }
  }
  SUBCASE("concat and slice on both axes") {
    for (int axis : {0, 1}) {
      check_gradients({a, c}, [axis](Graph& g, const std::vector<Var>& v) {
        return g.concat(v, axis);
      });
      check_gradients({a}, [axis](Graph& g, const std::vector<Var>& v) {
        return g.slice(v[0], axis, 1, 2);
      });
    }
  }
  SUBCASE("elementwise nonlinearities") {
    check_gradients({a}, [](Graph& g, const std::vector<Var>& v) { return g.tanh(v[0]); });
    check_gradients({a}, [](Graph& g, const std::vector<Var>& v) { return g.sigmoid(v[0]); });
  }
  SUBCASE("softmax family on both axes") {
    for (int axis : {0, 1}) {
      check_gradients({a}, [axis](Graph& g, const std::vector<Var>& v) { return g.softmax(v[0], axis); });
      check_gradients({a}, [axis](Graph& g, const std::vector<Var>& v) {
        return g.log_softmax(v[0], axis);
      });
    }
  }
  SUBCASE("lookup, pick, sum, reshape, transpose") {
    check_gradients({a}, [](Graph& g, const std::vector<Var>& v) {
      return g.embedding_lookup(v[0], {2, 0, 2, 1});
    });
    check_gradients({a}, [](Graph& g, const std::vector<Var>& v) { return g.pick(v[0], {3, 0, 3}); });
    check_gradients({a}, [](Graph& g, const std::vector<Var>& v) { return g.sum(v[0]); });
    check_gradients({a}, [](Graph& g, const std::vector<Var>& v) { return g.reshape(v[0], 2, 6); });
    check_gradients({a}, [](Graph& g, const std::vector<Var>& v) { return g.transpose(v[0]); });
  }
  SUBCASE("a value used twice accumulates both paths") {
    check_gradients({a}, [](Graph& g, const std::vector<Var>& v) {
      return g.mul(g.tanh(v[0]), g.add(v[0], v[0]));
    });
  }
}

TEST_CASE("parameters accumulate gradients across backward passes") {
  Parameter p("w", Tensor::Constant(1, 2, 3.0));
  for (int pass = 0; pass < 2; ++pass) {
    Graph g;
    const Var w = g.parameter(p);
    g.backward(g.sum(g.mul(w, w)));
  }
  CHECK(p.grad(0, 0) == doctest::Approx(12.0));
  p.zero_grad();
  CHECK(p.grad.isZero());
}

TEST_CASE("shape errors and non-finite losses are reported") {
  Graph g;
  const Var a = g.input(Tensor::Zero(2, 3));
  const Var b = g.input(Tensor::Zero(2, 2));
  CHECK_THROWS_AS(g.matmul(a, a), std::invalid_argument);
  CHECK_THROWS_AS(g.add(a, b), std::invalid_argument);
  CHECK_THROWS_AS(g.backward(a), std::invalid_argument);
  const Var bad = g.input(Tensor::Constant(1, 1, std::nan("")), true);
  CHECK_THROWS_AS(g.backward(bad), std::domain_error);
}
