#pragma once

namespace switchhurdle::special {

/// ln|Gamma(x)| by the Lanczos approximation (g = 7, 9 coefficients), with
/// the reflection formula below 0.5. Throws std::domain_error at poles.
double lgamma(double x);

/// d/dx ln Gamma(x), for x > 0.
double digamma(double x);

/// ln(1 - exp(-x)) for x > 0, accurate both for x -> 0 and x large.
double log1mexp(double x);

/// ln(1 + exp(x)) with the input clamped to <= 30 (identity above).
double softplus(double x);

double sigmoid(double x);

}  // namespace switchhurdle::special
