#include "switchhurdle/special.hpp"

#include <array>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace switchhurdle::special {

namespace {

constexpr double kLanczosG = 7.0;
constexpr std::array<double, 9> kLanczos = {
    0.99999999999980993,  676.5203681218851,     -1259.1392167224028,
    771.32342877765313,   -176.61502916214059,   12.507343278686905,
    -0.13857109526572012, 9.9843695780195716e-6, 1.5056327351493116e-7};

}  // namespace

double lgamma(double x) {
  if (!std::isfinite(x)) throw std::domain_error("lgamma: non-finite argument");
  if (x <= 0.0 && x == std::floor(x)) throw std::domain_error("lgamma: pole at non-positive integer");
  if (x < 0.5) {
    // Reflection: Gamma(x) Gamma(1-x) = pi / sin(pi x)
    const double s = std::sin(std::numbers::pi * x);
    return std::log(std::numbers::pi / std::abs(s)) - lgamma(1.0 - x);
  }
  const double z = x - 1.0;
  double a = kLanczos[0];
  for (std::size_t i = 1; i < kLanczos.size(); ++i) a += kLanczos[i] / (z + static_cast<double>(i));
  const double t = z + kLanczosG + 0.5;
  return 0.5 * std::log(2.0 * std::numbers::pi) + (z + 0.5) * std::log(t) - t + std::log(a);
}

double digamma(double x) {
  if (!(x > 0.0) || !std::isfinite(x)) throw std::domain_error("digamma: argument must be > 0");
  double result = 0.0;
  while (x < 8.0) {
    result -= 1.0 / x;
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  // Asymptotic series in 1/x^2 (Bernoulli numbers).
  const double series =
      inv2 * (1.0 / 12.0 -
              inv2 * (1.0 / 120.0 -
                      inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0)))));
  return result + std::log(x) - 0.5 * inv - series;
}

double log1mexp(double x) {
  if (!(x > 0.0)) throw std::domain_error("log1mexp: argument must be > 0");
  return x < std::numbers::ln2 ? std::log(-std::expm1(-x)) : std::log1p(-std::exp(-x));
}

double softplus(double x) {
  if (x > 30.0) return x;
  return std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace switchhurdle::special
