#include "switchhurdle/hurdle.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "switchhurdle/special.hpp"

namespace switchhurdle {

namespace {

constexpr double kTruncationLimit = 1e-12;
constexpr double kCumulativeCutoff = 1.0 - 1e-12;
// Below this count the rising factorial is summed directly; it keeps
// lgamma(y + r) - lgamma(r) accurate when r = 1/alpha is huge.
constexpr std::int64_t kRisingSumLimit = 1000;

double log_rising(double r, std::int64_t y) {
  if (y <= kRisingSumLimit) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < y; ++i) acc += std::log(r + static_cast<double>(i));
    return acc;
  }
  return special::lgamma(static_cast<double>(y) + r) - special::lgamma(r);
}

// -ln(1 + alpha mu) / alpha = ln p0
double log_zero_prob(const NBParams& nb) { return -std::log1p(nb.alpha * nb.mu) / nb.alpha; }

// Ratio P(y+1) / P(y) of the untruncated NB.
double pmf_ratio(std::int64_t y, const NBParams& nb) {
  const double r = 1.0 / nb.alpha;
  const double q = nb.alpha * nb.mu / (1.0 + nb.alpha * nb.mu);
  return (static_cast<double>(y) + r) / static_cast<double>(y + 1) * q;
}

}  // namespace

void validate(const NBParams& nb) {
  if (!(nb.mu > 0.0) || !std::isfinite(nb.mu)) throw std::domain_error("NB mean must be > 0");
  if (!(nb.alpha > 0.0) || !std::isfinite(nb.alpha)) throw std::domain_error("NB dispersion must be > 0");
}

void validate(const HurdleParams& h) {
  if (!(h.p_plus > 0.0 && h.p_plus < 1.0)) {
    throw std::domain_error("hurdle p_plus must lie in (0, 1), got " + std::to_string(h.p_plus));
  }
  validate(h.nb);
}

double nb_log_pmf(std::int64_t y, const NBParams& nb) {
  validate(nb);
  if (y < 0) throw std::domain_error("nb_log_pmf: count must be >= 0");
  const double r = 1.0 / nb.alpha;
  const double am = nb.alpha * nb.mu;
  const double yd = static_cast<double>(y);
  return log_rising(r, y) - special::lgamma(yd + 1.0) - r * std::log1p(am) +
         (y > 0 ? yd * (std::log(am) - std::log1p(am)) : 0.0);
}

double nb_zero_prob(const NBParams& nb) {
  validate(nb);
  return std::exp(log_zero_prob(nb));
}

double nb_log_positive_mass(const NBParams& nb) {
  validate(nb);
  const double x = -log_zero_prob(nb);
  if (x <= -std::log1p(-kTruncationLimit)) {
    throw DegenerateTruncation("NB zero mass within 1e-12 of 1; truncated branch undefined");
  }
  return special::log1mexp(x);
}

double hurdle_log_pmf(std::int64_t y, const HurdleParams& h) {
  validate(h);
  if (y < 0) throw std::domain_error("hurdle_log_pmf: count must be >= 0");
  if (y == 0) return std::log1p(-h.p_plus);
  return std::log(h.p_plus) + nb_log_pmf(y, h.nb) - nb_log_positive_mass(h.nb);
}

HurdleLogPmfGrad hurdle_log_pmf_grad(std::int64_t y, const HurdleParams& h) {
  HurdleLogPmfGrad g;
  g.value = hurdle_log_pmf(y, h);
  if (y == 0) {
    g.d_p_plus = -1.0 / (1.0 - h.p_plus);
    return g;
  }
  const double a = h.nb.alpha, mu = h.nb.mu, r = 1.0 / a;
  const double yd = static_cast<double>(y);
  const double am1 = 1.0 + a * mu;
  const double l1p = std::log1p(a * mu);
  // sum_{k<y} 1 / (r + k) = digamma(y + r) - digamma(r)
  double s = 0.0;
  if (y <= kRisingSumLimit) {
    for (std::int64_t k = 0; k < y; ++k) s += 1.0 / (r + static_cast<double>(k));
  } else {
    s = special::digamma(yd + r) - special::digamma(r);
  }
  // d/dx ln(1 - e^-x) with x = -ln p0
  const double dmass = 1.0 / std::expm1(l1p / a);
  g.d_p_plus = 1.0 / h.p_plus;
  g.d_mu = yd / mu - (1.0 + yd * a) / am1 - dmass / am1;
  g.d_alpha = (l1p - s) / (a * a) + (yd - mu) / (a * am1) - dmass * (mu / (a * am1) - l1p / (a * a));
  return g;
}

double hurdle_cdf(std::int64_t y, const HurdleParams& h) {
  validate(h);
  if (y < 0) return 0.0;
  double cdf = 1.0 - h.p_plus;
  if (y == 0) return cdf;
  const double scale = h.p_plus / std::exp(nb_log_positive_mass(h.nb));
  double pmf = std::exp(nb_log_pmf(1, h.nb));
  for (std::int64_t k = 1; k <= y; ++k) {
    cdf += scale * pmf;
    pmf *= pmf_ratio(k, h.nb);
  }
  return std::min(cdf, 1.0);
}

double hurdle_mean(const HurdleParams& h) {
  validate(h);
  return h.p_plus * h.nb.mu / std::exp(nb_log_positive_mass(h.nb));
}

namespace {

// Inverse CDF of the zero-truncated NB at probability u.
std::int64_t truncated_inverse(const NBParams& nb, double u) {
  const double target = std::min(u, kCumulativeCutoff);
  const double inv_mass = 1.0 / std::exp(nb_log_positive_mass(nb));
  double pmf = std::exp(nb_log_pmf(1, nb)) * inv_mass;
  double cum = pmf;
  std::int64_t y = 1;
  // Slack absorbs rounding in the running sum.
  while (cum < target - 1e-12 && y < kSampleCap) {
    pmf *= pmf_ratio(y, nb);
    ++y;
    cum += pmf;
  }
  return y;
}

}  // namespace

std::int64_t hurdle_sample(const HurdleParams& h, Rng& rng) {
  validate(h);
  const double gate = rng.uniform();
  const double u = rng.uniform();
  if (gate >= h.p_plus) return 0;
  return truncated_inverse(h.nb, u);
}

std::int64_t hurdle_quantile(const HurdleParams& h, double q) {
  validate(h);
  if (!(q > 0.0 && q < 1.0)) throw std::domain_error("hurdle_quantile: q must lie in (0, 1)");
  const double zero_mass = 1.0 - h.p_plus;
  if (q <= zero_mass) return 0;
  // CDF(y) >= q  <=>  truncated CDF(y) >= (q - (1 - p+)) / p+
  return truncated_inverse(h.nb, (q - zero_mass) / h.p_plus);
}

}  // namespace switchhurdle
