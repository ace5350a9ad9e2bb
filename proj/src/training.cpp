#include "switchhurdle/training.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

namespace switchhurdle {

std::string to_string(Objective objective) {
  return objective == Objective::kProbabilistic ? "prob" : "hybrid";
}

Objective parse_objective(std::string_view s) {
  if (s == "prob" || s == "probabilistic") return Objective::kProbabilistic;
  if (s == "hybrid") return Objective::kHybrid;
  throw std::invalid_argument("unknown objective '" + std::string(s) + "' (expected prob or hybrid)");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("train config: " + what); };
  if (batch_size == 0) fail("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) fail("learning_rate must be > 0");
  if (!(lambda_aux >= 0.0)) fail("lambda_aux must be >= 0");
  if (!(lambda_decay_factor > 0.0 && lambda_decay_factor < 1.0)) fail("lambda_decay_factor must lie in (0, 1)");
  if (!(lambda_decay_floor > 0.0 && lambda_decay_floor <= lambda_decay_init)) {
    fail("lambda_decay_floor must lie in (0, lambda_decay_init]");
  }
  if (!(tf_start >= 0.0 && tf_start <= 1.0 && tf_end >= 0.0 && tf_end <= 1.0)) fail("tf_start/tf_end must lie in [0, 1]");
  if (tf_end > tf_start) fail("tf_end must not exceed tf_start");
  if (!(grad_clip_norm > 0.0)) fail("grad_clip_norm must be > 0");
  if (stride == 0) fail("stride must be >= 1");
}

std::size_t TrainConfig::effective_tf_decay_epochs() const {
  return tf_decay_epochs > 0 ? tf_decay_epochs : std::max<std::size_t>(1, epochs / 2);
}

double lambda_decay(const TrainConfig& config, std::size_t epoch) {
  return std::max(config.lambda_decay_init * std::pow(config.lambda_decay_factor, static_cast<double>(epoch)),
                  config.lambda_decay_floor);
}

double lambda_decay(std::size_t epoch) { return lambda_decay(TrainConfig{}, epoch); }

double teacher_forcing_ratio(const TrainConfig& config, std::size_t epoch) {
  const std::size_t span = config.effective_tf_decay_epochs();
  if (epoch >= span) return config.tf_end;
  const double frac = static_cast<double>(epoch) / static_cast<double>(span);
  return config.tf_start + (config.tf_end - config.tf_start) * frac;
}

StepTargets step_major_targets(const Batch& batch, std::size_t horizon) {
  if (!batch.has_targets()) throw std::invalid_argument("batch has no targets");
  const std::size_t B = batch.size;
  StepTargets st{Tensor({B * horizon, 1}), Tensor({B * horizon, 1})};
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < horizon; ++t) {
      st.targets[t * B + b] = batch.targets[b * horizon + t];
      st.mask[t * B + b] = batch.mask[b * horizon + t];
    }
  }
  return st;
}

Var hurdle_log_likelihood(Var p_plus, Var mu, Var alpha, const Tensor& targets) {
  const std::size_t n = p_plus.value().size();
  if (mu.value().size() != n || alpha.value().size() != n || targets.size() != n) {
    throw DimensionError("hurdle_log_likelihood: parameter and target counts differ");
  }
  Tensor out({n, 1});
  auto grads = std::make_shared<std::vector<HurdleLogPmfGrad>>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double y = targets[i];
    if (y < 0.0 || y != std::floor(y)) throw std::domain_error("hurdle targets must be nonnegative integers");
    const HurdleParams h{p_plus.value()[i], NBParams{mu.value()[i], alpha.value()[i]}};
    (*grads)[i] = hurdle_log_pmf_grad(static_cast<std::int64_t>(y), h);
    out[i] = (*grads)[i].value;
  }
  const std::size_t ip = p_plus.id(), im = mu.id(), ia = alpha.id();
  return p_plus.graph().emit(std::move(out), {ip, im, ia}, [ip, im, ia, grads](Graph& g, const Graph::Node& node) {
    const std::size_t count = grads->size();
    if (g.requires_grad(ip)) {
      Tensor& gp = g.grad_buffer(ip);
      for (std::size_t i = 0; i < count; ++i) gp[i] += node.grad[i] * (*grads)[i].d_p_plus;
    }
    if (g.requires_grad(im)) {
      Tensor& gm = g.grad_buffer(im);
      for (std::size_t i = 0; i < count; ++i) gm[i] += node.grad[i] * (*grads)[i].d_mu;
    }
    if (g.requires_grad(ia)) {
      Tensor& ga = g.grad_buffer(ia);
      for (std::size_t i = 0; i < count; ++i) ga[i] += node.grad[i] * (*grads)[i].d_alpha;
    }
  });
}

namespace {

double mask_total(const Tensor& mask) {
  const double total = std::accumulate(mask.values.begin(), mask.values.end(), 0.0);
  if (!(total > 0.0)) throw std::invalid_argument("mask selects no steps");
  return total;
}

bool finite(double v) { return std::isfinite(v); }

}  // namespace

Var hurdle_nll(Var p_plus, Var mu, Var alpha, const Tensor& targets, const Tensor& mask) {
  const double count = mask_total(mask);
  Graph& g = p_plus.graph();
  Var ll = hurdle_log_likelihood(p_plus, mu, alpha, targets);
  return ops::scale(ops::sum(ops::mul(ll, g.constant(mask))), -1.0 / count);
}

Var masked_mae(Var forecast, const Tensor& targets, const Tensor& mask) {
  const double count = mask_total(mask);
  Graph& g = forecast.graph();
  Var err = ops::abs(ops::sub(forecast, g.constant(targets)));
  return ops::scale(ops::sum(ops::mul(err, g.constant(mask))), 1.0 / count);
}

Var total_balance(const EncoderOutput& encoder) {
  if (encoder.layer_probs.empty()) throw std::invalid_argument("encoder has no MoE layers");
  Var total = balance_loss(encoder.layer_probs.front());
  for (std::size_t l = 1; l < encoder.layer_probs.size(); ++l) {
    total = ops::add(total, balance_loss(encoder.layer_probs[l]));
  }
  return total;
}

ObjectiveTerms probabilistic_objective(const ForwardResult& fwd, const Batch& batch, double lambda_aux) {
  const auto& dec = fwd.decoder;
  const std::size_t horizon = dec.p_plus.rows() / batch.size;
  const StepTargets st = step_major_targets(batch, horizon);
  ObjectiveTerms terms;
  terms.nll = hurdle_nll(dec.p_plus, dec.mu, dec.alpha, st.targets, st.mask);
  terms.balance = total_balance(fwd.encoder);
  terms.lambda = lambda_aux;
  terms.total = lambda_aux == 0.0 ? terms.nll : ops::add(terms.nll, ops::scale(terms.balance, lambda_aux));
  return terms;
}

ObjectiveTerms hybrid_objective(const ForwardResult& fwd, const Batch& batch, double lambda_decay) {
  const auto& dec = fwd.decoder;
  const std::size_t horizon = dec.p_plus.rows() / batch.size;
  const StepTargets st = step_major_targets(batch, horizon);
  ObjectiveTerms terms;
  terms.nll = hurdle_nll(dec.p_plus, dec.mu, dec.alpha, st.targets, st.mask);
  terms.balance = total_balance(fwd.encoder);
  terms.mae = masked_mae(dec.mean, st.targets, st.mask);
  terms.lambda = lambda_decay;
  terms.total = ops::add(terms.mae, ops::scale(ops::add(terms.nll, terms.balance), lambda_decay));
  return terms;
}

StepInfo optimizer_step(std::span<Parameter* const> params, OptimizerState& state, double lr, double clip_norm) {
  double sq = 0.0;
  for (const Parameter* p : params) {
    for (double v : p->grad.values) {
      if (!finite(v)) throw NumericalError("non-finite gradient in parameter '" + p->name + "'");
      sq += v * v;
    }
  }
  StepInfo info;
  info.grad_norm = std::sqrt(sq);
  if (info.grad_norm > clip_norm) info.clip_scale = clip_norm / info.grad_norm;

  ++state.step;
  const double b1 = state.beta1, b2 = state.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (Parameter* p : params) {
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double g = p->grad[i] * info.clip_scale;
      double& m = p->first_moment[i];
      double& v = p->second_moment[i];
      m = b1 * m + (1.0 - b1) * g;
      v = b2 * v + (1.0 - b2) * g * g;
      p->value[i] -= lr * (m / c1) / (std::sqrt(v / c2) + state.eps);
    }
  }
  return info;
}

ValidationResult validate_model(Model& model, const PreparedData& prepared, std::span<const WindowIndex> windows,
                                const TrainConfig& config, std::size_t epoch) {
  const auto& cfg = model.config();
  ValidationResult result;
  if (windows.empty()) return result;
  const double lam = lambda_decay(config, epoch);
  double nll_sum = 0.0, mae_sum = 0.0, balance_sum = 0.0, obj_sum = 0.0, weight = 0.0;
  for (std::size_t start = 0; start < windows.size(); start += config.batch_size) {
    const std::size_t count = std::min(config.batch_size, windows.size() - start);
    const Batch batch = collate(prepared, windows.subspan(start, count), cfg.context_length, cfg.horizon);
    Graph g;
    ForwardOptions opts;
    opts.training = false;
    const ForwardResult fwd = forward(g, model, batch, opts);
    const ObjectiveTerms terms = config.objective == Objective::kProbabilistic
                                     ? probabilistic_objective(fwd, batch, config.lambda_aux)
                                     : hybrid_objective(fwd, batch, lam);
    const StepTargets st = step_major_targets(batch, cfg.horizon);
    const double steps = std::accumulate(st.mask.values.begin(), st.mask.values.end(), 0.0);
    const double mae = terms.mae.valid() ? terms.mae.value()[0]
                                         : masked_mae(fwd.decoder.mean, st.targets, st.mask).value()[0];
    nll_sum += terms.nll.value()[0] * steps;
    mae_sum += mae * steps;
    balance_sum += terms.balance.value()[0] * steps;
    obj_sum += terms.total.value()[0] * steps;
    weight += steps;
  }
  result.nll = nll_sum / weight;
  result.mae = mae_sum / weight;
  result.balance = balance_sum / weight;
  result.objective = obj_sum / weight;
  result.steps = static_cast<std::size_t>(weight);
  return result;
}

namespace {

void shuffle(std::vector<std::size_t>& order, Rng& rng) {
  for (std::size_t i = order.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(order[i - 1], order[j]);
  }
}

std::vector<Tensor> snapshot(const Model& model) {
  std::vector<Tensor> values;
  for (const auto& p : model.parameters()) values.push_back(p.value);
  return values;
}

void restore(Model& model, const std::vector<Tensor>& values) {
  auto& params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) params[i].value = values[i];
}

}  // namespace

TrainReport fit(Model& model, const PreparedData& prepared, const Split& split, const TrainConfig& config,
                const FitCallbacks& callbacks) {
  config.validate();
  TrainReport report;
  if (config.epochs == 0) return report;
  const auto& windows = split.train.windows;
  if (windows.empty()) throw DataError("no training windows; series too short for context + 3 * horizon");
  const auto& cfg = model.config();
  const std::size_t layers = cfg.n_encoder_layers, experts = cfg.n_experts;
  const std::span<const WindowIndex> val_windows =
      split.validation.empty() ? std::span<const WindowIndex>(windows) : std::span<const WindowIndex>(split.validation);

  const Rng root(config.seed);
  const Rng shuffle_root = root.split("shuffle");
  const Rng tf_root = root.split("teacher_forcing");
  OptimizerState state;
  auto params = model.parameter_ptrs();
  std::vector<Tensor> best = snapshot(model);
  bool have_best = false;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lambda_decay = lambda_decay(config, epoch);
    rec.tf_ratio = teacher_forcing_ratio(config, epoch);
    rec.utilization.assign(layers, std::vector<double>(experts, 0.0));

    std::vector<std::size_t> order(windows.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffler = shuffle_root.split(epoch);
    shuffle(order, shuffler);

    double obj_sum = 0.0, nll_sum = 0.0, bal_sum = 0.0, mae_sum = 0.0, norm_sum = 0.0, weight = 0.0;
    std::size_t batches = 0;
    std::vector<std::size_t> tokens(layers, 0);
    try {
      for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
        const std::size_t count = std::min(config.batch_size, order.size() - start);
        std::vector<WindowIndex> picked(count);
        for (std::size_t i = 0; i < count; ++i) picked[i] = windows[order[start + i]];
        const Batch batch = collate(prepared, picked, cfg.context_length, cfg.horizon);

        Graph g;
        ForwardOptions opts;
        opts.training = true;
        opts.tf_ratio = rec.tf_ratio;
        opts.tf_seed = tf_root.split(epoch).split(batches).seed();
        const ForwardResult fwd = forward(g, model, batch, opts);
        const ObjectiveTerms terms = config.objective == Objective::kProbabilistic
                                         ? probabilistic_objective(fwd, batch, config.lambda_aux)
                                         : hybrid_objective(fwd, batch, rec.lambda_decay);
        const double loss = terms.total.value()[0];
        if (!finite(loss)) {
          throw NumericalError("non-finite objective at epoch " + std::to_string(epoch) + ", batch " +
                               std::to_string(batches));
        }
        model.zero_grad();
        g.backward(terms.total);
        const StepInfo info = optimizer_step(params, state, config.learning_rate, config.grad_clip_norm);

        const double w = static_cast<double>(count);
        obj_sum += loss * w;
        nll_sum += terms.nll.value()[0] * w;
        bal_sum += terms.balance.value()[0] * w;
        if (terms.mae.valid()) mae_sum += terms.mae.value()[0] * w;
        norm_sum += info.grad_norm;
        weight += w;
        ++batches;
        for (std::size_t l = 0; l < layers; ++l) {
          for (std::size_t e : fwd.encoder.selected[l]) rec.utilization[l][e] += 1.0;
          tokens[l] += fwd.encoder.selected[l].size();
        }
      }
      rec.objective = obj_sum / weight;
      rec.nll = nll_sum / weight;
      rec.balance = bal_sum / weight;
      rec.mae = mae_sum / weight;
      rec.grad_norm = norm_sum / static_cast<double>(batches);
      for (std::size_t l = 0; l < layers; ++l) {
        for (double& u : rec.utilization[l]) u /= static_cast<double>(std::max<std::size_t>(tokens[l], 1));
      }

      const ValidationResult val = validate_model(model, prepared, val_windows, config, epoch);
      rec.val_objective = val.objective;
      rec.val_nll = val.nll;
      rec.val_mae = val.mae;
      rec.val_selection = config.objective == Objective::kProbabilistic ? val.objective : val.mae;
      if (!finite(rec.val_selection)) {
        throw NumericalError("non-finite validation objective at epoch " + std::to_string(epoch));
      }
    } catch (const NumericalError& e) {
      report.diverged = true;
      report.divergence = e.what();
      break;
    } catch (const std::domain_error& e) {
      report.diverged = true;
      report.divergence = std::string("domain error during training: ") + e.what();
      break;
    }

    if (!have_best || rec.val_selection < report.best_selection) {
      have_best = true;
      rec.best = true;
      report.best_epoch = epoch;
      report.best_selection = rec.val_selection;
      best = snapshot(model);
    }
    report.history.push_back(rec);
    if (callbacks.on_epoch) callbacks.on_epoch(rec);
    if (rec.best && callbacks.on_best) callbacks.on_best(model, rec);
  }
  restore(model, best);
  return report;
}

ModelConfig model_config_for(const PreparedData& prepared, ModelConfig base) {
  base.n_past_covariates = covariate_count();
  base.n_future_covariates = covariate_count();
  base.static_cardinalities = prepared.encoder.cardinalities();
  return base;
}

}  // namespace switchhurdle
