#include <cmath>
#include <numbers>

#include "doctest.h"
#include "helpers.hpp"
#include "switchhurdle/autodiff.hpp"

using namespace switchhurdle;
using testing::check_op;
using testing::random_tensor;

namespace {

using OpFn = std::function<Var(Graph&, std::vector<Var>&)>;

void expect_grad_ok(std::vector<Shape> shapes, const OpFn& op, double lo = -1.0, double hi = 1.0,
                    double tol = 1e-5) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    std::vector<Parameter> params;
    for (std::size_t i = 0; i < shapes.size(); ++i)
      params.emplace_back("p" + std::to_string(i), random_tensor(shapes[i], rng, lo, hi));
    auto r = check_op(params, op, rng);
    INFO("seed " << seed << " worst " << r.worst_parameter << "[" << r.worst_index << "] ad=" << r.worst_autodiff
                 << " fd=" << r.worst_numeric);
    CHECK(r.max_rel_error < tol);
  }
}

}  // namespace

TEST_CASE("matmul values") {
  Graph g;
  auto eye = g.constant(Tensor::matrix({{1, 0}, {0, 1}}));
  auto m = g.constant(Tensor::matrix({{1, 2}, {3, 4}}));
  CHECK(ops::matmul(eye, m).value().values == std::vector<double>{1, 2, 3, 4});
  auto a = g.constant(Tensor::matrix({{1, 2}}));
  auto b = g.constant(Tensor::matrix({{3}, {4}}));
  auto c = ops::matmul(a, b);
  CHECK(c.value().shape == Shape{1, 1});
  CHECK(c.value()[0] == 11.0);
}

TEST_CASE("matmul shape mismatch is a dimension error") {
  Graph g;
  auto a = g.constant(Tensor::zeros({2, 3}));
  auto b = g.constant(Tensor::zeros({2, 3}));
  CHECK_THROWS_AS(ops::matmul(a, b), DimensionError);
}

TEST_CASE("matmul gradient of sum(A B) against central differences") {
  Rng rng(3);
  Parameter a("a", random_tensor({3, 4}, rng));
  Tensor b = random_tensor({4, 2}, rng);
  auto loss = [&](bool with_backward) {
    Graph g;
    auto l = ops::sum(ops::matmul(g.param(a), g.constant(b)));
    if (with_backward) g.backward(l);
    return l.value()[0];
  };
  Parameter* ps[] = {&a};
  CHECK(gradient_check(ps, loss).max_rel_error < 1e-6);
  // d sum(AB) / dA[i][k] = sum_j B[k][j]
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 4; ++k) CHECK(a.grad.at(i, k) == doctest::Approx(b.at(k, 0) + b.at(k, 1)).epsilon(1e-14));
}

TEST_CASE("unary values") {
  CHECK(unary_value(Unary::kSilu, 0.0) == 0.0);
  CHECK(unary_value(Unary::kSoftplus, 0.0) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(unary_value(Unary::kLgamma, 5.0) == doctest::Approx(std::log(24.0)).epsilon(1e-12));
  CHECK(unary_value(Unary::kSoftplus, 40.0) == 40.0);
  CHECK(unary_value(Unary::kSigmoid, 0.0) == 0.5);
  CHECK(unary_value(Unary::kLog1p, std::numbers::e - 1.0) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("unary domain violations") {
  CHECK_THROWS_AS(unary_value(Unary::kLog, 0.0), std::domain_error);
  CHECK_THROWS_AS(unary_value(Unary::kLog, -1.0), std::domain_error);
  CHECK_THROWS_AS(unary_value(Unary::kLgamma, 0.0), std::domain_error);
  CHECK_THROWS_AS(unary_value(Unary::kLgamma, -2.0), std::domain_error);
  Graph g;
  auto x = g.constant(Tensor::vector({1.0, -1.0}));
  CHECK_THROWS_AS(ops::log(x), std::domain_error);
}

TEST_CASE("softmax values and invariants") {
  Graph g;
  auto u = ops::softmax(g.constant(Tensor::matrix(1, 4, {0, 0, 0, 0})));
  for (double v : u.value().values) CHECK(v == 0.25);
  auto p = ops::softmax(g.constant(Tensor::matrix(1, 2, {std::log(1.0), std::log(3.0)})));
  CHECK(p.value()[0] == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(p.value()[1] == doctest::Approx(0.75).epsilon(1e-15));

  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor({5, 6}, rng, -20.0, 20.0);
    Tensor shifted = x;
    const double c = rng.uniform(-50.0, 50.0);
    for (auto& v : shifted.values) v += c;
    auto a = ops::softmax(g.constant(x)).value();
    auto b = ops::softmax(g.constant(shifted)).value();
    for (std::size_t r = 0; r < 5; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < 6; ++j) {
        s += a.at(r, j);
        CHECK(std::abs(a.at(r, j) - b.at(r, j)) <= 1e-12);
      }
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("stop_gradient") {
  Parameter x("x", Tensor::vector({1.0, 2.0}));
  {
    Graph g;
    auto s = ops::stop_gradient(g.param(x));
    CHECK(s.value().values == x.value.values);
    x.zero_grad();
    g.backward(ops::sum(s));
    CHECK(x.grad.values == std::vector<double>{0.0, 0.0});
  }
  {
    Graph g;
    auto v = g.param(x);
    x.zero_grad();
    g.backward(ops::sum(ops::sub(v, ops::stop_gradient(v))));
    CHECK(x.grad.values == std::vector<double>{1.0, 1.0});
  }
  Rng rng(5);
  Tensor t = random_tensor({3, 7}, rng, -1e6, 1e6);
  Graph g;
  CHECK(ops::stop_gradient(g.constant(t)).value().values == t.values);
}

TEST_CASE("backward examples") {
  Parameter x("x", Tensor::vector({1.0, 2.0}));
  {
    Graph g;
    x.zero_grad();
    g.backward(ops::sum(g.param(x)));
    CHECK(x.grad.values == std::vector<double>{1.0, 1.0});
  }
  {
    Graph g;
    auto v = g.param(x);
    x.zero_grad();
    g.backward(ops::sum(ops::mul(v, v)));
    CHECK(x.grad.values == std::vector<double>{2.0, 4.0});
  }
}

TEST_CASE("backward rejects a non-scalar loss") {
  Parameter x("x", Tensor::vector({1.0, 2.0}));
  Graph g;
  CHECK_THROWS_AS(g.backward(ops::scale(g.param(x), 2.0)), std::logic_error);
}

TEST_CASE("parameters off the loss path get zero gradient") {
  Parameter x("x", Tensor::vector({1.0, 2.0}));
  Parameter y("y", Tensor::vector({3.0, 4.0}));
  y.grad.fill(0.0);
  Graph g;
  auto vx = g.param(x);
  auto vy = g.param(y);
  (void)ops::mul(vy, vy);
  x.zero_grad();
  g.backward(ops::sum(ops::square(vx)));
  CHECK(y.grad.values == std::vector<double>{0.0, 0.0});
  CHECK(x.grad.values == std::vector<double>{2.0, 4.0});
}

TEST_CASE("backward runs each rule exactly once") {
  Parameter w("w", Tensor::matrix({{0.5, -0.2}, {0.1, 0.3}}));
  Parameter x("x", Tensor::matrix({{1.0, 2.0}}));
  Graph g;
  auto vw = g.param(w);
  auto vx = g.param(x);
  auto h = ops::matmul(vx, vw);       // 1
  auto s = ops::sigmoid(h);           // 2
  auto m = ops::mul(s, h);            // 3  (h used twice)
  auto r = ops::add(m, ops::silu(h));  // 4, 5
  auto l = ops::sum(r);               // 6
  const std::size_t before = g.size();
  g.backward(l);
  CHECK(g.backward_rule_calls() == 6);
  CHECK(g.size() == before);
  g.backward(l);
  CHECK(g.backward_rule_calls() == 6);
}

TEST_CASE("gradient_check examples") {
  Rng rng(2);
  Parameter w("w", random_tensor({3, 4}, rng));
  Tensor x = random_tensor({2, 3}, rng);
  auto loss = [&](bool with_backward) {
    Graph g;
    auto l = ops::sum(ops::sigmoid(ops::matmul(g.constant(x), g.param(w))));
    if (with_backward) g.backward(l);
    return l.value()[0];
  };
  Parameter* ps[] = {&w};
  CHECK(gradient_check(ps, loss).max_rel_error < 1e-6);

  // y reaches the loss only through stop_gradient: both gradients vanish there.
  Parameter z("z", random_tensor({4}, rng));
  Parameter y("y", random_tensor({4}, rng));
  auto sg_loss = [&](bool with_backward) {
    Graph g;
    auto vy = g.param(y);
    auto l = ops::add(ops::sum(ops::square(g.param(z))),
                      ops::sum(ops::sub(ops::stop_gradient(vy), ops::stop_gradient(vy))));
    if (with_backward) g.backward(l);
    return l.value()[0];
  };
  Parameter* zs[] = {&z, &y};
  auto r = gradient_check(zs, sg_loss);
  CHECK(r.max_rel_error < 1e-6);
  for (double v : y.grad.values) CHECK(v == 0.0);
}

TEST_CASE("ste_gate forward and backward") {
  Graph g;
  auto gate = ops::ste_gate(g.constant(Tensor::matrix(1, 4, {0.1, 0.2, 0.3, 0.4})));
  CHECK(gate.value().values == std::vector<double>{0, 0, 0, 1});
  auto tie = ops::ste_gate(g.constant(Tensor::matrix(1, 4, {0.25, 0.25, 0.25, 0.25})));
  CHECK(tie.value().values == std::vector<double>{1, 0, 0, 0});

  // d sum(gate . c) / d logits equals d sum(probs . c) / d logits.
  Rng rng(9);
  Parameter logits("logits", random_tensor({5, 4}, rng, -2.0, 2.0));
  Tensor c = random_tensor({5, 4}, rng);
  auto grad_of = [&](bool through_gate) {
    Graph gg;
    auto p = ops::softmax(gg.param(logits));
    auto gated = through_gate ? ops::ste_gate(p) : p;
    logits.zero_grad();
    gg.backward(ops::sum(ops::mul(gated, gg.constant(c))));
    return logits.grad.values;
  };
  auto via_gate = grad_of(true);
  auto via_soft = grad_of(false);
  CHECK(via_gate == via_soft);
  double norm = 0.0;
  for (double v : via_gate) norm += v * v;
  CHECK(norm > 0.0);
}

TEST_CASE("argmax_rows ties") {
  auto idx = argmax_rows(Tensor::matrix({{1, 3, 3}, {2, 2, 2}, {0, 0, 5}}));
  CHECK(idx == std::vector<std::size_t>{1, 0, 2});
}

TEST_CASE("every op matches finite differences over 10 seeds") {
  SUBCASE("add") { expect_grad_ok({{3, 4}, {3, 4}}, [](Graph&, auto& v) { return ops::add(v[0], v[1]); }); }
  SUBCASE("sub") { expect_grad_ok({{3, 4}, {3, 4}}, [](Graph&, auto& v) { return ops::sub(v[0], v[1]); }); }
  SUBCASE("mul") { expect_grad_ok({{3, 4}, {3, 4}}, [](Graph&, auto& v) { return ops::mul(v[0], v[1]); }); }
  SUBCASE("div") {
    expect_grad_ok({{3, 4}, {3, 4}}, [](Graph&, auto& v) { return ops::div(v[0], v[1]); }, 0.5, 2.0);
  }
  SUBCASE("scale") { expect_grad_ok({{3, 4}}, [](Graph&, auto& v) { return ops::scale(v[0], -1.7); }); }
  SUBCASE("add_scalar") { expect_grad_ok({{3, 4}}, [](Graph&, auto& v) { return ops::add_scalar(v[0], 0.3); }); }
  SUBCASE("add_bias") { expect_grad_ok({{2, 3, 4}, {4}}, [](Graph&, auto& v) { return ops::add_bias(v[0], v[1]); }); }
  SUBCASE("mul_rows") { expect_grad_ok({{5, 3}, {5, 1}}, [](Graph&, auto& v) { return ops::mul_rows(v[0], v[1]); }); }
  SUBCASE("matmul") { expect_grad_ok({{3, 4}, {4, 2}}, [](Graph&, auto& v) { return ops::matmul(v[0], v[1]); }); }
  SUBCASE("matmul rank 3") {
    expect_grad_ok({{2, 3, 4}, {4, 2}}, [](Graph&, auto& v) { return ops::matmul(v[0], v[1]); });
  }
  SUBCASE("matmul transposed") {
    expect_grad_ok({{3, 4}, {2, 4}}, [](Graph&, auto& v) { return ops::matmul(v[0], v[1], true); });
  }
  SUBCASE("silu") { expect_grad_ok({{3, 4}}, [](Graph&, auto& v) { return ops::silu(v[0]); }, -3, 3); }
  SUBCASE("sigmoid") { expect_grad_ok({{3, 4}}, [](Graph&, auto& v) { return ops::sigmoid(v[0]); }, -3, 3); }
  SUBCASE("softplus") { expect_grad_ok({{3, 4}}, [](Graph&, auto& v) { return ops::softplus(v[0]); }, -3, 3); }
  SUBCASE("log1p") { expect_grad_ok({{3, 4}}, [](Graph&, auto& v) { return ops::log1p(v[0]); }, 0.0, 3.0); }
  SUBCASE("lgamma") { expect_grad_ok({{3, 4}}, [](Graph&, auto& v) { return ops::lgamma(v[0]); }, 0.2, 6.0); }
  SUBCASE("exp") { expect_grad_ok({{3, 4}}, [](Graph&, auto& v) { return ops::exp(v[0]); }, -2, 2); }
  SUBCASE("log") { expect_grad_ok({{3, 4}}, [](Graph&, auto& v) { return ops::log(v[0]); }, 0.2, 3.0); }
  SUBCASE("gelu") { expect_grad_ok({{3, 4}}, [](Graph&, auto& v) { return ops::gelu(v[0]); }, -3, 3); }
  SUBCASE("neg") { expect_grad_ok({{3, 4}}, [](Graph&, auto& v) { return ops::neg(v[0]); }); }
  SUBCASE("abs") { expect_grad_ok({{3, 4}}, [](Graph&, auto& v) { return ops::abs(v[0]); }, 0.1, 2.0); }
  SUBCASE("abs negative") { expect_grad_ok({{3, 4}}, [](Graph&, auto& v) { return ops::abs(v[0]); }, -2.0, -0.1); }
  SUBCASE("log1mexp") { expect_grad_ok({{3, 4}}, [](Graph&, auto& v) { return ops::log1mexp(v[0]); }, 0.05, 5.0); }
  SUBCASE("xlogx") { expect_grad_ok({{3, 4}}, [](Graph&, auto& v) { return ops::xlogx(v[0]); }, 0.05, 2.0); }
  SUBCASE("square") { expect_grad_ok({{3, 4}}, [](Graph&, auto& v) { return ops::square(v[0]); }); }
  SUBCASE("sqrt") {
    expect_grad_ok({{3, 4}}, [](Graph&, auto& v) { return ops::unary(Unary::kSqrt, v[0]); }, 0.2, 3.0);
  }
  SUBCASE("clamp interior") {
    expect_grad_ok({{3, 4}}, [](Graph&, auto& v) { return ops::clamp(v[0], -5.0, 5.0); });
  }
  SUBCASE("softmax") { expect_grad_ok({{3, 5}}, [](Graph&, auto& v) { return ops::softmax(v[0]); }, -2, 2); }
  SUBCASE("sum") { expect_grad_ok({{3, 4}}, [](Graph&, auto& v) { return ops::sum(v[0]); }); }
  SUBCASE("mean") { expect_grad_ok({{3, 4}}, [](Graph&, auto& v) { return ops::mean(v[0]); }); }
  SUBCASE("mean_rows") { expect_grad_ok({{5, 3}}, [](Graph&, auto& v) { return ops::mean_rows(v[0]); }); }
  SUBCASE("layer_norm") {
    expect_grad_ok({{4, 6}, {6}, {6}},
                   [](Graph&, auto& v) { return ops::layer_norm(v[0], v[1], v[2]); }, -2, 2);
  }
  SUBCASE("attention") {
    expect_grad_ok({{2 * 3, 4}, {2 * 5, 4}, {2 * 5, 4}},
                   [](Graph&, auto& v) { return ops::attention(v[0], v[1], v[2], 2, 2); });
  }
  SUBCASE("gather_rows") {
    expect_grad_ok({{4, 3}}, [](Graph&, auto& v) {
      const std::size_t idx[] = {2, 0, 2, 3};
      return ops::gather_rows(v[0], idx);
    });
  }
  SUBCASE("scatter_rows") {
    expect_grad_ok({{2, 3}}, [](Graph&, auto& v) {
      const std::size_t idx[] = {3, 1};
      return ops::scatter_rows(v[0], idx, 5);
    });
  }
  SUBCASE("column") { expect_grad_ok({{4, 3}}, [](Graph&, auto& v) { return ops::column(v[0], 1); }); }
  SUBCASE("concat_rows") {
    expect_grad_ok({{2, 3}, {4, 3}}, [](Graph&, auto& v) {
      Var parts[] = {v[0], v[1]};
      return ops::concat_rows(parts);
    });
  }
  SUBCASE("reshape") { expect_grad_ok({{2, 6}}, [](Graph&, auto& v) { return ops::reshape(v[0], {3, 4}); }); }
}
