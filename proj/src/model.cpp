#include "switchhurdle/model.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace switchhurdle {

std::string to_string(GateMode mode) { return mode == GateMode::kSteTop1 ? "ste_top1" : "soft"; }

std::string to_string(ExpertActivation act) {
  return act == ExpertActivation::kSwiglu ? "swiglu" : "gelu";
}

GateMode parse_gate_mode(std::string_view s) {
  if (s == "ste_top1" || s == "ste") return GateMode::kSteTop1;
  if (s == "soft") return GateMode::kSoft;
  throw std::invalid_argument("unknown gate_mode '" + std::string(s) + "' (expected ste_top1|soft)");
}

ExpertActivation parse_expert_activation(std::string_view s) {
  if (s == "swiglu") return ExpertActivation::kSwiglu;
  if (s == "gelu") return ExpertActivation::kGelu;
  throw std::invalid_argument("unknown expert_activation '" + std::string(s) + "' (expected swiglu|gelu)");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("model config: " + msg); };
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (n_experts < 2) fail("n_experts must be >= 2");
  if (n_encoder_layers == 0) fail("n_encoder_layers must be >= 1");
  if (d_ff == 0) fail("d_ff must be >= 1");
  if (context_length == 0 || horizon == 0) fail("context_length and horizon must be >= 1");
  for (auto c : static_cardinalities) {
    if (c == 0) fail("static cardinalities must be >= 1");
  }
}

Model::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  Rng rng = Rng(seed).split("model-init");
  const std::size_t d = config_.d_model;

  embedding_.w_demand = add_matrix("embed.w_demand", 1, d, rng);
  embedding_.w_covariates =
      config_.n_past_covariates > 0 ? add_matrix("embed.w_covariates", config_.n_past_covariates, d, rng) : npos;
  embedding_.bias = add("embed.bias", Tensor({d}));
  embedding_.positional = add("embed.positional", Tensor({config_.context_length, d}));
  for (std::size_t s = 0; s < config_.static_cardinalities.size(); ++s) {
    embedding_.statics.push_back(
        add_matrix("embed.static." + std::to_string(s), config_.static_cardinalities[s], d, rng));
  }

  for (std::size_t l = 0; l < config_.n_encoder_layers; ++l) {
    const std::string p = "encoder." + std::to_string(l) + ".";
    LayerParams layer;
    layer.attn_norm_scale = add(p + "attn_norm.scale", Tensor({d}, 1.0));
    layer.attn_norm_shift = add(p + "attn_norm.shift", Tensor({d}));
    layer.wq = add_matrix(p + "attn.wq", d, d, rng);
    layer.wk = add_matrix(p + "attn.wk", d, d, rng);
    layer.wv = add_matrix(p + "attn.wv", d, d, rng);
    layer.wo = add_matrix(p + "attn.wo", d, d, rng);
    layer.moe_norm_scale = add(p + "moe_norm.scale", Tensor({d}, 1.0));
    layer.moe_norm_shift = add(p + "moe_norm.shift", Tensor({d}));
    layer.router = add_matrix(p + "router", config_.n_experts, d, rng, 0.1);
    for (std::size_t e = 0; e < config_.n_experts; ++e) {
      const std::string ep = p + "experts." + std::to_string(e) + ".";
      ExpertParams ex;
      ex.w1 = add_matrix(ep + "w1", d, config_.d_ff, rng);
      ex.w2 = config_.expert_activation == ExpertActivation::kSwiglu ? add_matrix(ep + "w2", d, config_.d_ff, rng)
                                                                      : npos;
      ex.w3 = add_matrix(ep + "w3", config_.d_ff, d, rng);
      layer.experts.push_back(ex);
    }
    layers_.push_back(std::move(layer));
  }
  embedding_.memory_norm_scale = add("encoder.memory_norm.scale", Tensor({d}, 1.0));
  embedding_.memory_norm_shift = add("encoder.memory_norm.shift", Tensor({d}));

  decoder_.w_prev = add_matrix("decoder.w_prev", 1, d, rng);
  decoder_.w_future =
      config_.n_future_covariates > 0 ? add_matrix("decoder.w_future", config_.n_future_covariates, d, rng) : npos;
  decoder_.positional = add("decoder.positional", Tensor({config_.horizon, d}));
  decoder_.wq = add_matrix("decoder.cross.wq", d, d, rng);
  decoder_.wk = add_matrix("decoder.cross.wk", d, d, rng);
  decoder_.wv = add_matrix("decoder.cross.wv", d, d, rng);
  decoder_.wo = add_matrix("decoder.cross.wo", d, d, rng);
  decoder_.norm_scale = add("decoder.norm.scale", Tensor({d}, 1.0));
  decoder_.norm_shift = add("decoder.norm.shift", Tensor({d}));

  head_.w_p = add_matrix("head.w_p", d, 1, rng);
  head_.w_mu = add_matrix("head.w_mu", d, 1, rng);
  head_.w_alpha = add_matrix("head.w_alpha", d, 1, rng);
  head_.b_mu = add("head.b_mu", Tensor({1}));
  head_.b_alpha = add("head.b_alpha", Tensor({1}));
}

std::size_t Model::add(std::string name, Tensor value) {
  params_.emplace_back(std::move(name), std::move(value));
  return params_.size() - 1;
}

std::size_t Model::add_matrix(std::string name, std::size_t rows, std::size_t cols, Rng& rng, double gain) {
  const double limit = gain * std::sqrt(6.0 / static_cast<double>(rows + cols));
  Tensor t({rows, cols});
  for (auto& v : t.values) v = rng.uniform(-limit, limit);
  return add(std::move(name), std::move(t));
}

std::vector<Parameter*> Model::parameter_ptrs() {
  std::vector<Parameter*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(&p);
  return out;
}

Parameter& Model::parameter(std::string_view name) {
  for (auto& p : params_) {
    if (p.name == name) return p;
  }
  throw std::out_of_range("no parameter named '" + std::string(name) + "'");
}

const Parameter& Model::parameter(std::string_view name) const {
  return const_cast<Model*>(this)->parameter(name);
}

std::size_t Model::parameter_count() const {
  return std::accumulate(params_.begin(), params_.end(), std::size_t{0},
                         [](std::size_t acc, const Parameter& p) { return acc + p.value.size(); });
}

void Model::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

Var expert_forward(Graph& g, Model& model, std::size_t layer, std::size_t expert, Var x,
                   std::size_t* token_calls) {
  const auto& ex = model.layers().at(layer).experts.at(expert);
  if (token_calls) *token_calls += x.rows();
  Var a = ops::matmul(x, g.param(model.at(ex.w1)));
  Var hidden;
  if (model.config().expert_activation == ExpertActivation::kSwiglu) {
    if (ex.w2 == Model::npos) throw DimensionError("expert_forward: SwiGLU expert is missing its gate weights");
    hidden = ops::mul(ops::silu(a), ops::matmul(x, g.param(model.at(ex.w2))));
  } else {
    hidden = ops::gelu(a);
  }
  return ops::matmul(hidden, g.param(model.at(ex.w3)));
}

Var route(Graph& g, Model& model, std::size_t layer, Var x) {
  Var logits = ops::matmul(x, g.param(model.at(model.layers().at(layer).router)), /*transpose_b=*/true);
  return ops::softmax(logits);
}

MoeOutput moe_forward(Graph& g, Model& model, std::size_t layer, Var x, const ForwardOptions& opts) {
  const std::size_t n_experts = model.config().n_experts;
  MoeOutput out;
  out.probs = route(g, model, layer, x);
  out.selected = argmax_rows(out.probs.value());

  const bool ste = model.config().gate_mode == GateMode::kSteTop1;
  if (ste && !opts.training && !opts.gate_override) {
    // Selected-expert-only evaluation: each token visits exactly one expert.
    const std::size_t n = x.rows();
    std::vector<std::vector<std::size_t>> rows(n_experts);
    for (std::size_t i = 0; i < n; ++i) rows[out.selected[i]].push_back(i);
    Var acc;
    for (std::size_t e = 0; e < n_experts; ++e) {
      if (rows[e].empty()) continue;
      Var y = expert_forward(g, model, layer, e, ops::gather_rows(x, rows[e]), opts.expert_token_calls);
      Var placed = ops::scatter_rows(y, rows[e], n);
      acc = acc.valid() ? ops::add(acc, placed) : placed;
    }
    out.out = acc;
    return out;
  }

  Var gate;
  if (opts.gate_override) {
    gate = opts.gate_override(out.probs, layer);
  } else {
    gate = ste ? ops::ste_gate(out.probs) : out.probs;
  }
  Var acc;
  for (std::size_t e = 0; e < n_experts; ++e) {
    Var y = expert_forward(g, model, layer, e, x, opts.expert_token_calls);
    Var weighted = ops::mul_rows(y, ops::column(gate, e));
    acc = acc.valid() ? ops::add(acc, weighted) : weighted;
  }
  out.out = acc;
  return out;
}

Var balance_loss(Var probs) {
  const double n_experts = static_cast<double>(probs.cols());
  Var mean_probs = ops::mean_rows(probs);
  // sum pbar ln(pbar E) = sum pbar ln pbar + ln E * sum pbar
  return ops::add(ops::sum(ops::xlogx(mean_probs)), ops::scale(ops::sum(mean_probs), std::log(n_experts)));
}

double balance_loss(const Tensor& probs) {
  const std::size_t rows = probs.rows(), width = probs.cols();
  if (rows == 0) throw std::invalid_argument("balance_loss: no tokens");
  double total = 0.0;
  for (std::size_t e = 0; e < width; ++e) {
    double pbar = 0.0;
    for (std::size_t r = 0; r < rows; ++r) pbar += probs.at(r, e);
    pbar /= static_cast<double>(rows);
    if (pbar > 0.0) total += pbar * std::log(pbar * static_cast<double>(width));
  }
  return total;
}

namespace {

void check_batch(const Model& model, const Batch& batch) {
  const auto& cfg = model.config();
  const std::size_t B = batch.size;
  const std::size_t L = cfg.context_length, T = cfg.horizon;
  auto fail = [](const std::string& what) { throw DimensionError("batch: " + what); };
  if (B == 0) fail("empty batch");
  if (batch.context.size() != B * L) fail("context must be [B, L] with L=" + std::to_string(L));
  if (cfg.n_past_covariates > 0 && batch.past_cov.size() != B * L * cfg.n_past_covariates) {
    fail("past covariates must be [B, L, " + std::to_string(cfg.n_past_covariates) + "]");
  }
  if (cfg.n_future_covariates > 0 && batch.future_cov.size() != B * T * cfg.n_future_covariates) {
    fail("future covariates must be [B, T, " + std::to_string(cfg.n_future_covariates) + "]");
  }
  if (batch.has_targets() && (batch.targets.size() != B * T || batch.mask.size() != B * T)) {
    fail("targets and mask must be [B, T] with T=" + std::to_string(T));
  }
  if (batch.static_codes.size() != B * cfg.static_cardinalities.size()) fail("static codes count");
}

}  // namespace

EncoderOutput encoder_forward(Graph& g, Model& model, const Batch& batch, const ForwardOptions& opts) {
  check_batch(model, batch);
  const auto& cfg = model.config();
  const auto& emb = model.embedding();
  const std::size_t B = batch.size, L = cfg.context_length, n = B * L;

  Tensor log_demand({n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    if (batch.context[i] < 0.0) throw std::domain_error("encoder: demand must be >= 0");
    log_demand[i] = std::log1p(batch.context[i]);
  }
  Var x = ops::matmul(g.constant(std::move(log_demand)), g.param(model.at(emb.w_demand)));
  if (cfg.n_past_covariates > 0) {
    Tensor cov({n, cfg.n_past_covariates}, batch.past_cov.values);
    x = ops::add(x, ops::matmul(g.constant(std::move(cov)), g.param(model.at(emb.w_covariates))));
  }
  std::vector<std::size_t> positions(n);
  for (std::size_t i = 0; i < n; ++i) positions[i] = i % L;
  x = ops::add(x, ops::gather_rows(g.param(model.at(emb.positional)), positions));
  const std::size_t n_static = cfg.static_cardinalities.size();
  for (std::size_t s = 0; s < n_static; ++s) {
    std::vector<std::size_t> codes(n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t code = batch.static_codes[(i / L) * n_static + s];
      codes[i] = code < cfg.static_cardinalities[s] ? code : 0;
    }
    x = ops::add(x, ops::gather_rows(g.param(model.at(emb.statics[s])), codes));
  }
  x = ops::add_bias(x, g.param(model.at(emb.bias)));

  EncoderOutput out;
  for (std::size_t l = 0; l < cfg.n_encoder_layers; ++l) {
    const auto& lp = model.layers()[l];
    Var u = ops::layer_norm(x, g.param(model.at(lp.attn_norm_scale)), g.param(model.at(lp.attn_norm_shift)));
    Var q = ops::matmul(u, g.param(model.at(lp.wq)));
    Var k = ops::matmul(u, g.param(model.at(lp.wk)));
    Var v = ops::matmul(u, g.param(model.at(lp.wv)));
    Var attn = ops::matmul(ops::attention(q, k, v, B, cfg.n_heads), g.param(model.at(lp.wo)));
    x = ops::add(x, attn);

    Var m = ops::layer_norm(x, g.param(model.at(lp.moe_norm_scale)), g.param(model.at(lp.moe_norm_shift)));
    MoeOutput moe = moe_forward(g, model, l, m, opts);
    x = ops::add(x, moe.out);
    out.layer_probs.push_back(moe.probs);
    out.selected.push_back(std::move(moe.selected));
  }
  out.memory = ops::layer_norm(x, g.param(model.at(emb.memory_norm_scale)), g.param(model.at(emb.memory_norm_shift)));
  return out;
}

Var decoder_query(Graph& g, Model& model, Var y_prev, const Batch& batch, std::size_t step) {
  const auto& cfg = model.config();
  const auto& dp = model.decoder();
  const std::size_t B = batch.size, T = cfg.horizon;
  if (step >= T) throw std::out_of_range("decoder_query: step " + std::to_string(step) + " outside horizon");
  if (y_prev.rows() != B) throw DimensionError("decoder_query: y_prev must have one row per series");

  Var q = ops::matmul(ops::log1p(y_prev), g.param(model.at(dp.w_prev)));
  if (cfg.n_future_covariates > 0) {
    const std::size_t C = cfg.n_future_covariates;
    Tensor xf({B, C});
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) xf.at(b, c) = batch.future_cov.values[(b * T + step) * C + c];
    q = ops::add(q, ops::matmul(g.constant(std::move(xf)), g.param(model.at(dp.w_future))));
  }
  std::vector<std::size_t> rows(B, step);
  return ops::add(q, ops::gather_rows(g.param(model.at(dp.positional)), rows));
}

HeadOutput hurdle_head_forward(Graph& g, Model& model, Var h) {
  const auto& hp = model.head();
  HeadOutput out;
  out.p_plus = ops::clamp(ops::sigmoid(ops::matmul(h, g.param(model.at(hp.w_p)))), 1e-7, 1.0 - 1e-7);
  out.mu = ops::add_scalar(
      ops::softplus(ops::add_bias(ops::matmul(h, g.param(model.at(hp.w_mu))), g.param(model.at(hp.b_mu)))), 1e-6);
  out.alpha = ops::add_scalar(
      ops::softplus(ops::add_bias(ops::matmul(h, g.param(model.at(hp.w_alpha))), g.param(model.at(hp.b_alpha)))),
      1e-6);
  return out;
}

Var hurdle_mean(Var p_plus, Var mu, Var alpha) {
  Var neg_log_p0 = ops::div(ops::log1p(ops::mul(alpha, mu)), alpha);
  Var inv_positive_mass = ops::exp(ops::neg(ops::log1mexp(neg_log_p0)));
  return ops::mul(ops::mul(p_plus, mu), inv_positive_mass);
}

DecoderOutput decode_autoregressive(Graph& g, Model& model, Var memory, const Batch& batch,
                                    const ForwardOptions& opts) {
  const auto& cfg = model.config();
  const auto& dp = model.decoder();
  const std::size_t B = batch.size, L = cfg.context_length, T = cfg.horizon;
  if (opts.tf_ratio < 0.0 || opts.tf_ratio > 1.0) throw std::invalid_argument("tf_ratio must lie in [0, 1]");
  if (opts.sample_feedback && (opts.training || opts.tf_ratio > 0.0)) {
    throw std::invalid_argument("sampled feedback is only available for free-running inference");
  }
  if (opts.tf_ratio > 0.0 && !batch.has_targets()) {
    throw std::invalid_argument("teacher forcing requested but the batch carries no targets");
  }

  Var keys = ops::matmul(memory, g.param(model.at(dp.wk)));
  Var values = ops::matmul(memory, g.param(model.at(dp.wv)));
  Var wq = g.param(model.at(dp.wq));
  Var wo = g.param(model.at(dp.wo));
  Var norm_scale = g.param(model.at(dp.norm_scale));
  Var norm_shift = g.param(model.at(dp.norm_shift));

  Rng coins(opts.tf_seed);
  DecoderOutput out;
  out.feedback.reserve(B * T);

  Tensor seed({B, 1});
  for (std::size_t b = 0; b < B; ++b) seed[b] = batch.context[b * L + L - 1];
  Var y_prev = g.constant(std::move(seed));

  std::vector<Var> p_steps, mu_steps, alpha_steps, mean_steps;
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t b = 0; b < B; ++b) out.feedback.push_back(y_prev.value()[b]);
    Var q = decoder_query(g, model, y_prev, batch, t);
    Var attn = ops::matmul(ops::attention(ops::matmul(q, wq), keys, values, B, cfg.n_heads), wo);
    Var h = ops::layer_norm(ops::add(q, attn), norm_scale, norm_shift);
    HeadOutput head = hurdle_head_forward(g, model, h);
    Var mean = hurdle_mean(head.p_plus, head.mu, head.alpha);
    p_steps.push_back(head.p_plus);
    mu_steps.push_back(head.mu);
    alpha_steps.push_back(head.alpha);
    mean_steps.push_back(mean);

    if (opts.sample_feedback) {
      Tensor drawn({B, 1});
      for (std::size_t b = 0; b < B; ++b) {
        const HurdleParams hp{head.p_plus.value()[b], NBParams{head.mu.value()[b], head.alpha.value()[b]}};
        drawn[b] = static_cast<double>(hurdle_sample(hp, *opts.sample_feedback));
        out.samples.push_back(drawn[b]);
      }
      y_prev = g.constant(std::move(drawn));
    } else if (t + 1 < T) {
      Tensor forced({B, 1});
      Tensor truth({B, 1});
      bool any_forced = false, all_forced = true;
      for (std::size_t b = 0; b < B; ++b) {
        const bool force = coins.uniform() < opts.tf_ratio;
        forced[b] = force ? 1.0 : 0.0;
        truth[b] = batch.has_targets() ? batch.targets[b * T + t] : 0.0;
        any_forced |= force;
        all_forced &= force;
      }
      if (all_forced) {
        y_prev = g.constant(std::move(truth));
      } else if (!any_forced) {
        y_prev = mean;
      } else {
        Tensor keep({B, 1});
        for (std::size_t b = 0; b < B; ++b) {
          keep[b] = 1.0 - forced[b];
          truth[b] *= forced[b];
        }
        y_prev = ops::add(g.constant(std::move(truth)), ops::mul(mean, g.constant(std::move(keep))));
      }
    }
  }
  out.p_plus = ops::concat_rows(p_steps);
  out.mu = ops::concat_rows(mu_steps);
  out.alpha = ops::concat_rows(alpha_steps);
  out.mean = ops::concat_rows(mean_steps);
  return out;
}

ForwardResult forward(Graph& g, Model& model, const Batch& batch, const ForwardOptions& opts) {
  ForwardResult r;
  r.encoder = encoder_forward(g, model, batch, opts);
  r.decoder = decode_autoregressive(g, model, r.encoder.memory, batch, opts);
  return r;
}

std::vector<HurdleParams> hurdle_params(const DecoderOutput& out, std::size_t batch, std::size_t horizon) {
  std::vector<HurdleParams> params(batch * horizon);
  for (std::size_t t = 0; t < horizon; ++t) {
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t row = t * batch + b;
      params[b * horizon + t] =
          HurdleParams{out.p_plus.value()[row], NBParams{out.mu.value()[row], out.alpha.value()[row]}};
    }
  }
  return params;
}

std::vector<double> point_forecast(const DecoderOutput& out, std::size_t batch, std::size_t horizon) {
  std::vector<double> means(batch * horizon);
  for (std::size_t t = 0; t < horizon; ++t)
    for (std::size_t b = 0; b < batch; ++b) means[b * horizon + t] = out.mean.value()[t * batch + b];
  return means;
}

}  // namespace switchhurdle
