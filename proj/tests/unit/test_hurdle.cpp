#include <cmath>
#include <vector>

#include "doctest.h"
#include "helpers.hpp"
#include "switchhurdle/hurdle.hpp"
#include "switchhurdle/special.hpp"
#include "switchhurdle/training.hpp"

using namespace switchhurdle;

namespace {

double poisson_log_pmf(int y, double mu) { return y * std::log(mu) - mu - std::lgamma(y + 1.0); }

HurdleParams hp(double p, double mu, double alpha) { return HurdleParams{p, NBParams{mu, alpha}}; }

const double kGridP[] = {0.1, 0.5, 0.9};
const double kGridMu[] = {0.5, 2.0, 8.0};
const double kGridAlpha[] = {0.1, 1.0, 3.0};

}  // namespace

TEST_CASE("special::lgamma against the C library") {
  for (double x : {1e-6, 0.1, 0.5, 1.0, 1.5, 2.0, 3.7, 10.0, 57.3, 171.0, 1e4, 1e7}) {
    INFO(x);
    CHECK(special::lgamma(x) == doctest::Approx(std::lgamma(x)).epsilon(1e-10).scale(1.0));
  }
  for (double x : {-0.5, -1.5, -2.3}) {
    INFO(x);
    CHECK(special::lgamma(x) == doctest::Approx(std::lgamma(x)).epsilon(1e-10).scale(1.0));
  }
  CHECK_THROWS_AS(special::lgamma(0.0), std::domain_error);
  CHECK_THROWS_AS(special::lgamma(-3.0), std::domain_error);
}

TEST_CASE("special::digamma is the derivative of lgamma") {
  for (double x : {0.05, 0.3, 1.0, 2.5, 7.0, 30.0, 500.0, 5e4}) {
    const double h = 1e-5 * std::max(1.0, x);
    const double fd = (std::lgamma(x + h) - std::lgamma(x - h)) / (2 * h);
    INFO(x);
    CHECK(special::digamma(x) == doctest::Approx(fd).epsilon(1e-7));
  }
  // psi(1) = -Euler-Mascheroni
  CHECK(special::digamma(1.0) == doctest::Approx(-0.57721566490153286).epsilon(1e-12));
}

TEST_CASE("special::log1mexp") {
  for (double x : {1e-12, 1e-6, 0.1, 0.6931, 1.0, 5.0, 40.0}) {
    INFO(x);
    const double expected = std::log(-std::expm1(-x));
    CHECK(special::log1mexp(x) == doctest::Approx(expected).epsilon(1e-13));
  }
  CHECK(special::log1mexp(800.0) == doctest::Approx(-std::exp(-800.0)).epsilon(1e-12));
}

TEST_CASE("nb_log_pmf examples") {
  CHECK(nb_log_pmf(0, {1.0, 1.0}) == doctest::Approx(std::log(0.5)).epsilon(1e-14));
  CHECK(nb_log_pmf(1, {1.0, 1.0}) == doctest::Approx(std::log(0.25)).epsilon(1e-14));
  // alpha = 1, mu = 1 is geometric (1/2)^(y+1)
  for (int y = 0; y < 40; ++y) CHECK(nb_log_pmf(y, {1.0, 1.0}) == doctest::Approx(-(y + 1) * std::log(2.0)).epsilon(1e-12));
  CHECK_THROWS_AS(nb_log_pmf(1, {0.0, 1.0}), std::domain_error);
  CHECK_THROWS_AS(nb_log_pmf(1, {1.0, -1.0}), std::domain_error);
  CHECK_THROWS_AS(nb_log_pmf(-1, {1.0, 1.0}), std::domain_error);
}

TEST_CASE("nb_log_pmf Poisson limit") {
  for (int y = 0; y <= 10; ++y) {
    INFO(y);
    CHECK(std::abs(nb_log_pmf(y, {2.0, 1e-8}) - poisson_log_pmf(y, 2.0)) < 1e-5);
  }
}

TEST_CASE("nb_zero_prob") {
  CHECK(nb_zero_prob({1.0, 1.0}) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(nb_zero_prob({2.0, 0.5}) == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(std::abs(nb_zero_prob({3.0, 1e-8}) - std::exp(-3.0)) < 1e-6);
  for (double mu : kGridMu)
    for (double a : kGridAlpha) CHECK(std::abs(nb_zero_prob({mu, a}) - std::pow(1.0 + a * mu, -1.0 / a)) <= 1e-12);
}

TEST_CASE("hurdle_log_pmf examples") {
  CHECK(hurdle_log_pmf(0, hp(0.3, 5.0, 2.0)) == doctest::Approx(std::log(0.7)).epsilon(1e-15));
  CHECK(hurdle_log_pmf(0, hp(0.3, 0.1, 0.1)) == hurdle_log_pmf(0, hp(0.3, 9.0, 4.0)));
  CHECK(hurdle_log_pmf(1, hp(0.5, 1.0, 1.0)) == doctest::Approx(std::log(0.25)).epsilon(1e-14));
  CHECK(std::exp(hurdle_log_pmf(0, hp(0.37, 2.0, 1.0))) == 1.0 - 0.37);
}

TEST_CASE("hurdle pmf normalizes on the parameter grid") {
  for (double p : kGridP)
    for (double mu : kGridMu)
      for (double a : kGridAlpha) {
        double total = 0.0;
        for (int y = 0; y <= 500; ++y) total += std::exp(hurdle_log_pmf(y, hp(p, mu, a)));
        INFO(p << " " << mu << " " << a);
        CHECK(std::abs(total - 1.0) < 1e-8);
      }
}

TEST_CASE("degenerate truncation") {
  // p0 = (1 + 1e-14)^(-1) is within 1e-12 of 1.
  CHECK_THROWS_AS(hurdle_log_pmf(1, hp(0.5, 1e-14, 1.0)), DegenerateTruncation);
  CHECK_NOTHROW(hurdle_log_pmf(0, hp(0.5, 1e-14, 1.0)));
}

TEST_CASE("untruncated NB moments by brute force") {
  for (double mu : kGridMu)
    for (double a : {0.1, 1.0}) {
      double m0 = 0, m1 = 0, m2 = 0;
      for (int y = 0; y <= 20000; ++y) {
        const double p = std::exp(nb_log_pmf(y, {mu, a}));
        m0 += p;
        m1 += y * p;
        m2 += double(y) * y * p;
      }
      INFO(mu << " " << a);
      CHECK(std::abs(m0 - 1.0) < 1e-9);
      CHECK(std::abs(m1 - mu) < 1e-6);
      CHECK(std::abs((m2 - m1 * m1) - (mu + a * mu * mu)) < 1e-6);
    }
}

TEST_CASE("hurdle_mean") {
  CHECK(hurdle_mean(hp(0.5, 1.0, 1.0)) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(hurdle_mean(hp(1.0 - 1e-12, 2.0, 1e-8)) == doctest::Approx(2.0 / (1.0 - std::exp(-2.0))).epsilon(1e-6));
  CHECK(hurdle_mean(hp(1e-9, 2.0, 1.0)) < 1e-8);
  for (double p : kGridP)
    for (double mu : kGridMu)
      for (double a : kGridAlpha) {
        double brute = 0.0;
        for (int y = 1; y <= 3000; ++y) brute += y * std::exp(hurdle_log_pmf(y, hp(p, mu, a)));
        CHECK(hurdle_mean(hp(p, mu, a)) == doctest::Approx(brute).epsilon(1e-8));
      }
}

TEST_CASE("hurdle_sample") {
  SUBCASE("tiny gate is almost always zero") {
    Rng rng(1);
    int zeros = 0;
    for (int i = 0; i < 100000; ++i) zeros += hurdle_sample(hp(1e-12, 3.0, 1.0), rng) == 0;
    CHECK(zeros / 1e5 > 0.9999);
  }
  SUBCASE("mean within 3 sigma") {
    const auto h = hp(0.5, 1.0, 1.0);
    // Variance by brute force: E[Y^2] - 1.
    double m2 = 0.0;
    for (int y = 1; y <= 200; ++y) m2 += double(y) * y * std::exp(hurdle_log_pmf(y, h));
    const double sd = std::sqrt((m2 - 1.0) / 1e5);
    Rng rng(2);
    double sum = 0.0;
    for (int i = 0; i < 100000; ++i) sum += hurdle_sample(h, rng);
    CHECK(std::abs(sum / 1e5 - 1.0) < 3 * sd);
  }
  SUBCASE("fixed seed repeats") {
    Rng a(77), b(77);
    for (int i = 0; i < 1000; ++i) CHECK(hurdle_sample(hp(0.4, 3.0, 0.5), a) == hurdle_sample(hp(0.4, 3.0, 0.5), b));
  }
  SUBCASE("empirical pmf matches within total variation 0.01") {
    const auto h = hp(0.35, 2.5, 0.8);
    Rng rng(5);
    std::vector<double> counts(200, 0.0);
    for (int i = 0; i < 100000; ++i) {
      auto y = hurdle_sample(h, rng);
      if (y < 200) counts[y] += 1.0;
    }
    double tv = 0.0;
    for (int y = 0; y < 200; ++y) tv += std::abs(counts[y] / 1e5 - std::exp(hurdle_log_pmf(y, h)));
    CHECK(tv / 2 < 0.01);
  }
}

TEST_CASE("hurdle_quantile") {
  const auto h = hp(0.5, 1.0, 1.0);
  CHECK(hurdle_quantile(h, 0.5) == 0);
  CHECK(hurdle_quantile(h, 0.2) == 0);
  CHECK(hurdle_quantile(h, 0.75) == 1);
  CHECK(hurdle_cdf(0, h) == doctest::Approx(0.5));
  CHECK(hurdle_cdf(1, h) == doctest::Approx(0.75));
  for (double p : kGridP)
    for (double mu : kGridMu)
      for (double a : kGridAlpha) {
        std::int64_t prev = 0;
        for (double q = 0.01; q < 1.0; q += 0.01) {
          const auto y = hurdle_quantile(hp(p, mu, a), q);
          CHECK(y >= prev);
          prev = y;
          if (q <= 1.0 - p) CHECK(y == 0);
          CHECK(hurdle_cdf(y, hp(p, mu, a)) >= q - 1e-12);
          if (y > 0) CHECK(hurdle_cdf(y - 1, hp(p, mu, a)) < q);
        }
      }
}

TEST_CASE("hurdle_log_pmf_grad against finite differences") {
  auto f = [](std::int64_t y, double p, double mu, double a) { return hurdle_log_pmf(y, hp(p, mu, a)); };
  for (std::int64_t y : {0, 1, 2, 5, 17, 1500}) {
    for (double p : {0.2, 0.7})
      for (double mu : {0.3, 2.0, 9.0})
        for (double a : {0.05, 0.6, 2.5}) {
          const auto g = hurdle_log_pmf_grad(y, hp(p, mu, a));
          CHECK(g.value == doctest::Approx(f(y, p, mu, a)).epsilon(1e-12));
          const double e = 1e-6;
          const double dp = (f(y, p + e, mu, a) - f(y, p - e, mu, a)) / (2 * e);
          const double dmu = (f(y, p, mu + e * mu, a) - f(y, p, mu - e * mu, a)) / (2 * e * mu);
          const double da = (f(y, p, mu, a + e * a) - f(y, p, mu, a - e * a)) / (2 * e * a);
          INFO(y << " " << p << " " << mu << " " << a);
          CHECK(g.d_p_plus == doctest::Approx(dp).epsilon(1e-6));
          CHECK(g.d_mu == doctest::Approx(dmu).epsilon(1e-6).scale(1e-3));
          CHECK(g.d_alpha == doctest::Approx(da).epsilon(1e-6).scale(1e-3));
        }
  }
}

TEST_CASE("one-step hurdle NLL through the head links matches finite differences") {
  // Pre-link outputs: p+ = sigmoid(a), mu = softplus(b) + 1e-6, alpha = softplus(c) + 1e-6.
  for (double y : {0.0, 1.0, 4.0}) {
    Parameter raw("raw", Tensor::matrix(1, 3, {0.3, 0.8, -0.4}));
    auto loss = [&](bool with_backward) {
      Graph g;
      auto r = g.param(raw);
      auto p = ops::sigmoid(ops::column(r, 0));
      auto mu = ops::add_scalar(ops::softplus(ops::column(r, 1)), 1e-6);
      auto alpha = ops::add_scalar(ops::softplus(ops::column(r, 2)), 1e-6);
      auto l = hurdle_nll(p, mu, alpha, Tensor::matrix(1, 1, {y}), Tensor::matrix(1, 1, {1.0}));
      if (with_backward) g.backward(l);
      return l.value()[0];
    };
    Parameter* ps[] = {&raw};
    auto r = gradient_check(ps, loss);
    INFO("y=" << y << " worst " << r.worst_index << " ad=" << r.worst_autodiff << " fd=" << r.worst_numeric);
    // y = 0 leaves mu and alpha without gradient; both sides are exactly zero there.
    CHECK(r.max_rel_error < 1e-5);
  }
}
