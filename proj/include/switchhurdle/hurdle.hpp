#pragma once

#include <cstdint>
#include <stdexcept>

#include "switchhurdle/rng.hpp"

namespace switchhurdle {

/// Negative binomial in mean-dispersion form: Var = mu + alpha * mu^2.
struct NBParams {
  double mu = 1.0;
  double alpha = 1.0;
};

/// Hurdle model: P(Y=0) = 1 - p_plus, positive mass is the zero-truncated NB.
struct HurdleParams {
  double p_plus = 0.5;
  NBParams nb;
};

/// Raised when the NB zero mass is so close to 1 that truncation is undefined.
class DegenerateTruncation : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

void validate(const NBParams& nb);
void validate(const HurdleParams& h);

double nb_log_pmf(std::int64_t y, const NBParams& nb);
/// (1 + alpha mu)^(-1/alpha)
double nb_zero_prob(const NBParams& nb);
/// ln(1 - p0), accurate when p0 is close to 1.
double nb_log_positive_mass(const NBParams& nb);

double hurdle_log_pmf(std::int64_t y, const HurdleParams& h);
/// hurdle_log_pmf with its partial derivatives in p_plus, mu and alpha.
struct HurdleLogPmfGrad {
  double value = 0.0;
  double d_p_plus = 0.0;
  double d_mu = 0.0;
  double d_alpha = 0.0;
};
HurdleLogPmfGrad hurdle_log_pmf_grad(std::int64_t y, const HurdleParams& h);

double hurdle_cdf(std::int64_t y, const HurdleParams& h);
double hurdle_mean(const HurdleParams& h);
std::int64_t hurdle_sample(const HurdleParams& h, Rng& rng);
/// Smallest y with CDF(y) >= q, for 0 < q < 1.
std::int64_t hurdle_quantile(const HurdleParams& h, double q);

inline constexpr std::int64_t kSampleCap = 1'000'000;

}  // namespace switchhurdle
