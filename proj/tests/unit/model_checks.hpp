#pragma once

#include <string>
#include <vector>

#include "helpers.hpp"
#include "switchhurdle/training.hpp"

namespace testing {

/// Replaces the STE gate with one_hot(argmax p0) + (p - p0), p0 frozen at the
/// first evaluation. At p0 this equals the STE gate in value and gradient,
/// and it is smooth around p0, so central differences can see the gradient.
struct GateFreeze {
  std::vector<Tensor> probs;
  GateOverride make() {
    return [this](Var p, std::size_t layer) {
      Graph& g = p.graph();
      if (probs.size() <= layer) probs.resize(layer + 1);
      if (probs[layer].values.empty()) probs[layer] = p.value();
      return ops::add(g.constant(one_hot_argmax(probs[layer])), ops::sub(p, g.constant(probs[layer])));
    };
  }
};

inline double objective_value(Model& m, const Batch& b, Objective obj, const ForwardOptions& opts,
                              bool with_backward) {
  Graph g;
  auto fwd = forward(g, m, b, opts);
  auto terms = obj == Objective::kProbabilistic ? probabilistic_objective(fwd, b, 0.01) : hybrid_objective(fwd, b, 0.49);
  if (with_backward) g.backward(terms.total);
  return terms.total.value()[0];
}

struct FullGradientCheck {
  GradientCheckResult fd;
  /// STE only: the surrogate's objective equals the real gate's bit for bit.
  bool surrogate_value_equal = true;
  /// STE only: max |grad_surrogate - grad_real| over all parameters.
  double surrogate_grad_diff = 0.0;
};

/// Finite-difference check of every model parameter at B=2, L=8, T=4, d=8, E=2.
inline FullGradientCheck full_gradient_check(GateMode gate, ExpertActivation act, Objective obj, double tf) {
  auto c = tiny_config(8, 2, 8, 4);
  c.gate_mode = gate;
  c.expert_activation = act;
  Model m(c, 31);
  Rng rng(32);
  for (auto& p : m.parameters())
    if (p.name.find("positional") != std::string::npos) p.value = random_tensor(p.value.shape, rng, -0.3, 0.3);
  Batch b = random_batch(c, 2, rng);

  GateFreeze freeze;
  ForwardOptions opts;
  opts.tf_ratio = tf;
  opts.tf_seed = 99;
  if (gate == GateMode::kSteTop1) opts.gate_override = freeze.make();

  FullGradientCheck out;
  auto ptrs = m.parameter_ptrs();
  out.fd = gradient_check(ptrs, [&](bool bw) { return objective_value(m, b, obj, opts, bw); });

  if (gate == GateMode::kSteTop1) {
    std::vector<Tensor> surrogate;
    m.zero_grad();
    const double fs = objective_value(m, b, obj, opts, true);
    for (auto& p : m.parameters()) surrogate.push_back(p.grad);
    ForwardOptions real = opts;
    real.gate_override = nullptr;
    m.zero_grad();
    const double fr = objective_value(m, b, obj, real, true);
    out.surrogate_value_equal = fs == fr;
    for (std::size_t i = 0; i < surrogate.size(); ++i)
      out.surrogate_grad_diff = std::max(out.surrogate_grad_diff, max_abs_diff(surrogate[i], m.parameters()[i].grad));
  }
  return out;
}

}  // namespace testing
