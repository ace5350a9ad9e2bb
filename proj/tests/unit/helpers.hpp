#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "switchhurdle/autodiff.hpp"
#include "switchhurdle/model.hpp"
#include "switchhurdle/rng.hpp"

namespace testing {

using namespace switchhurdle;

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.values) v = rng.uniform(lo, hi);
  return t;
}

/// Projects an op's output onto fixed random weights so every output
/// coordinate contributes a distinct gradient, then checks the op against
/// central differences.
inline GradientCheckResult check_op(std::vector<Parameter>& inputs,
                                    const std::function<Var(Graph&, std::vector<Var>&)>& op, Rng& rng,
                                    double eps = 1e-5) {
  Tensor weights;
  auto loss = [&](bool with_backward) {
    Graph g;
    std::vector<Var> vars;
    for (auto& p : inputs) vars.push_back(g.param(p));
    Var out = op(g, vars);
    if (weights.values.empty()) weights = random_tensor(out.shape(), rng, 0.5, 1.5);
    Var l = ops::sum(ops::mul(out, g.constant(weights)));
    if (with_backward) g.backward(l);
    return l.value()[0];
  };
  std::vector<Parameter*> ptrs;
  for (auto& p : inputs) ptrs.push_back(&p);
  return gradient_check(ptrs, loss, eps);
}

inline bool close(double a, double b, double tol) { return std::abs(a - b) <= tol; }

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = a.size() == b.size() ? 0.0 : INFINITY;
  for (std::size_t i = 0; i < a.size() && i < b.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Small random model configuration for structural tests.
inline ModelConfig tiny_config(std::size_t d = 8, std::size_t experts = 2, std::size_t L = 8, std::size_t T = 4) {
  ModelConfig c;
  c.d_model = d;
  c.n_heads = 2;
  c.n_encoder_layers = 2;
  c.n_experts = experts;
  c.d_ff = 2 * d;
  c.context_length = L;
  c.horizon = T;
  c.n_past_covariates = 3;
  c.n_future_covariates = 3;
  c.static_cardinalities = {3, 4};
  return c;
}

/// Random intermittent batch: counts in 0..5 with many zeros.
inline Batch random_batch(const ModelConfig& c, std::size_t B, Rng& rng, bool with_targets = true) {
  const std::size_t L = c.context_length, T = c.horizon;
  auto count = [&] { return rng.bernoulli(0.5) ? 0.0 : static_cast<double>(1 + rng.below(5)); };
  Batch b;
  b.size = B;
  b.context = Tensor({B, L});
  for (auto& v : b.context.values) v = count();
  b.past_cov = random_tensor({B, L, c.n_past_covariates}, rng);
  b.future_cov = random_tensor({B, T, c.n_future_covariates}, rng);
  if (with_targets) {
    b.targets = Tensor({B, T});
    for (auto& v : b.targets.values) v = count();
    b.mask = Tensor({B, T}, 1.0);
  }
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t s = 0; s < c.static_cardinalities.size(); ++s)
      b.static_codes.push_back(rng.below(c.static_cardinalities[s]));
  return b;
}

}  // namespace testing
