#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "switchhurdle/autodiff.hpp"
#include "switchhurdle/data.hpp"
#include "switchhurdle/model.hpp"

namespace switchhurdle {

enum class Objective { kProbabilistic, kHybrid };

std::string to_string(Objective objective);
/// Accepts "prob"/"probabilistic" and "hybrid".
Objective parse_objective(std::string_view s);

/// Raised on NaN/Inf losses or gradients; the message names the culprit.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  Objective objective = Objective::kProbabilistic;
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  double lambda_aux = 0.01;
  double lambda_decay_init = 1.0;
  double lambda_decay_factor = 0.7;
  double lambda_decay_floor = 0.05;
  double tf_start = 1.0;
  double tf_end = 0.0;
  /// 0 means half of `epochs` (at least 1).
  std::size_t tf_decay_epochs = 0;
  double grad_clip_norm = 1.0;
  std::size_t stride = 7;
  std::uint64_t seed = 1;

  void validate() const;
  std::size_t effective_tf_decay_epochs() const;
  bool operator==(const TrainConfig&) const = default;
};

/// max(init * factor^epoch, floor)
double lambda_decay(const TrainConfig& config, std::size_t epoch);
double lambda_decay(std::size_t epoch);
/// Linear tf_start -> tf_end over the decay epochs, then held at tf_end.
double teacher_forcing_ratio(const TrainConfig& config, std::size_t epoch);

/// Decoder-row targets and mask (step-major, matching DecoderOutput rows).
struct StepTargets {
  Tensor targets;  // [T*B, 1]
  Tensor mask;     // [T*B, 1]
};
StepTargets step_major_targets(const Batch& batch, std::size_t horizon);

/// Per-row hurdle log-likelihood ln P(y | p+, mu, alpha) as one graph node [n, 1].
Var hurdle_log_likelihood(Var p_plus, Var mu, Var alpha, const Tensor& targets);
/// -mean over masked rows of the hurdle log-likelihood.
Var hurdle_nll(Var p_plus, Var mu, Var alpha, const Tensor& targets, const Tensor& mask);
/// Mean absolute error over masked rows.
Var masked_mae(Var forecast, const Tensor& targets, const Tensor& mask);
/// Sum of per-layer balance losses.
Var total_balance(const EncoderOutput& encoder);

struct ObjectiveTerms {
  Var total;
  Var nll;
  Var balance;
  Var mae;  // only set by the hybrid objective
  double lambda = 0.0;
};

/// NLL + lambda_aux * sum_l balance_l
ObjectiveTerms probabilistic_objective(const ForwardResult& fwd, const Batch& batch, double lambda_aux);
/// MAE(hurdle mean) + lambda_decay * (NLL + sum_l balance_l)
ObjectiveTerms hybrid_objective(const ForwardResult& fwd, const Batch& batch, double lambda_decay);

struct OptimizerState {
  std::size_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct StepInfo {
  double grad_norm = 0.0;
  double clip_scale = 1.0;
};

/// Global-norm clipping followed by a bias-corrected Adam update.
StepInfo optimizer_step(std::span<Parameter* const> params, OptimizerState& state, double lr, double clip_norm);

struct EpochRecord {
  std::size_t epoch = 0;
  double objective = 0.0;
  double nll = 0.0;
  double balance = 0.0;
  double mae = 0.0;
  double lambda_decay = 0.0;
  double tf_ratio = 0.0;
  double grad_norm = 0.0;
  /// Share of training tokens whose argmax expert is e, per layer.
  std::vector<std::vector<double>> utilization;
  double val_objective = 0.0;
  double val_nll = 0.0;
  double val_mae = 0.0;
  /// Checkpoint-selection value (prob: val objective, hybrid: val MAE).
  double val_selection = 0.0;
  bool best = false;
};

struct TrainReport {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_selection = 0.0;
  bool diverged = false;
  std::string divergence;
};

struct FitCallbacks {
  std::function<void(const EpochRecord&)> on_epoch;
  /// Called with the model holding the new best parameters.
  std::function<void(const Model&, const EpochRecord&)> on_best;
};

/// Validation pass in inference mode with free-running decoding.
struct ValidationResult {
  double objective = 0.0;
  double nll = 0.0;
  double balance = 0.0;
  double mae = 0.0;
  std::size_t steps = 0;
};
ValidationResult validate_model(Model& model, const PreparedData& prepared, std::span<const WindowIndex> windows,
                                const TrainConfig& config, std::size_t epoch);

/// Epoch loop. On return the model holds the best-validation parameters
/// (or the initial ones if no epoch completed). Divergence stops training and
/// is reported rather than thrown.
TrainReport fit(Model& model, const PreparedData& prepared, const Split& split, const TrainConfig& config,
                const FitCallbacks& callbacks = {});

/// Model configuration sized for a prepared dataset's covariates and statics.
ModelConfig model_config_for(const PreparedData& prepared, ModelConfig base);

}  // namespace switchhurdle
