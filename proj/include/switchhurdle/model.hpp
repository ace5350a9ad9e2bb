#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "switchhurdle/autodiff.hpp"
#include "switchhurdle/hurdle.hpp"
#include "switchhurdle/rng.hpp"

namespace switchhurdle {

enum class GateMode { kSteTop1, kSoft };
enum class ExpertActivation { kSwiglu, kGelu };

std::string to_string(GateMode mode);
std::string to_string(ExpertActivation act);
GateMode parse_gate_mode(std::string_view s);
ExpertActivation parse_expert_activation(std::string_view s);

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_encoder_layers = 2;
  std::size_t n_experts = 4;
  std::size_t d_ff = 128;
  std::size_t context_length = 56;
  std::size_t horizon = 28;
  std::size_t n_past_covariates = 0;
  std::size_t n_future_covariates = 0;
  /// One learned embedding table per static attribute; code 0 is "unknown".
  std::vector<std::size_t> static_cardinalities;
  GateMode gate_mode = GateMode::kSteTop1;
  ExpertActivation expert_activation = ExpertActivation::kSwiglu;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Model inputs for B windows. Covariate tensors are left empty when the
/// corresponding covariate count is zero; targets/mask are empty at inference.
struct Batch {
  std::size_t size = 0;
  Tensor context;     // [B, L] raw demand counts
  Tensor past_cov;    // [B, L, C_p]
  Tensor future_cov;  // [B, T, C_f]
  Tensor targets;     // [B, T]
  Tensor mask;        // [B, T]
  std::vector<std::size_t> static_codes;  // [B * n_static], row-major

  bool has_targets() const { return !targets.values.empty(); }
};

class Model;

/// Replaces the gate computation of one MoE layer. Used by tests to swap in
/// an alternative gate while keeping the rest of the forward pass intact.
using GateOverride = std::function<Var(Var probs, std::size_t layer)>;

struct ForwardOptions {
  /// In STE mode, training evaluates every expert and mixes by the gate;
  /// inference evaluates only the selected expert per token.
  bool training = true;
  double tf_ratio = 0.0;
  /// Seeds the per-(series, step) teacher-forcing coins.
  std::uint64_t tf_seed = 0;
  /// Incremented by the number of token rows pushed through any expert.
  std::size_t* expert_token_calls = nullptr;
  GateOverride gate_override;
  /// When set (inference only), each step draws y_t from its hurdle
  /// distribution and feeds the draw back instead of the mean.
  Rng* sample_feedback = nullptr;
};

struct MoeOutput {
  Var out;
  Var probs;
  std::vector<std::size_t> selected;
};

struct EncoderOutput {
  Var memory;                                    // [B*L, d]
  std::vector<Var> layer_probs;                  // per layer [B*L, E]
  std::vector<std::vector<std::size_t>> selected;  // per layer, argmax expert per token
};

struct HeadOutput {
  Var p_plus;  // [n, 1]
  Var mu;
  Var alpha;
};

/// Decoder outputs, rows ordered step-major: row = t * B + b.
struct DecoderOutput {
  Var p_plus;
  Var mu;
  Var alpha;
  Var mean;
  /// Value fed back as y_{t-1} at each step, same row order.
  std::vector<double> feedback;
  /// Draws made under ForwardOptions::sample_feedback, same row order.
  std::vector<double> samples;
};

struct ForwardResult {
  EncoderOutput encoder;
  DecoderOutput decoder;
};

class Model {
 public:
  struct ExpertParams {
    std::size_t w1, w2, w3;  // w2 == npos for the GELU variant
  };
  struct LayerParams {
    std::size_t attn_norm_scale, attn_norm_shift, wq, wk, wv, wo;
    std::size_t moe_norm_scale, moe_norm_shift, router;
    std::vector<ExpertParams> experts;
  };
  struct DecoderParams {
    std::size_t w_prev, w_future, positional, wq, wk, wv, wo, norm_scale, norm_shift;
  };
  struct HeadParams {
    std::size_t w_p, w_mu, w_alpha, b_mu, b_alpha;
  };
  struct EmbeddingParams {
    std::size_t w_demand, w_covariates, bias, positional, memory_norm_scale, memory_norm_shift;
    std::vector<std::size_t> statics;
  };

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  Model(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  std::vector<Parameter*> parameter_ptrs();
  Parameter& parameter(std::string_view name);
  const Parameter& parameter(std::string_view name) const;
  Parameter& at(std::size_t index) { return params_[index]; }
  const Parameter& at(std::size_t index) const { return params_[index]; }
  std::size_t parameter_count() const;
  void zero_grad();

  const EmbeddingParams& embedding() const { return embedding_; }
  const std::vector<LayerParams>& layers() const { return layers_; }
  const DecoderParams& decoder() const { return decoder_; }
  const HeadParams& head() const { return head_; }

 private:
  std::size_t add(std::string name, Tensor value);
  std::size_t add_matrix(std::string name, std::size_t rows, std::size_t cols, Rng& rng, double gain = 1.0);

  ModelConfig config_;
  std::vector<Parameter> params_;
  EmbeddingParams embedding_{};
  std::vector<LayerParams> layers_;
  DecoderParams decoder_{};
  HeadParams head_{};
};

// Building blocks. All take the graph the caller is building.

Var expert_forward(Graph& g, Model& model, std::size_t layer, std::size_t expert, Var x,
                   std::size_t* token_calls = nullptr);
/// Softmax router probabilities [N, E].
Var route(Graph& g, Model& model, std::size_t layer, Var x);
MoeOutput moe_forward(Graph& g, Model& model, std::size_t layer, Var x, const ForwardOptions& opts);
/// KL(mean routing || uniform) = sum_e pbar_e ln(pbar_e E).
Var balance_loss(Var probs);
double balance_loss(const Tensor& probs);

EncoderOutput encoder_forward(Graph& g, Model& model, const Batch& batch, const ForwardOptions& opts);
/// q_t for every series in the batch at decoder step t; y_prev is [B, 1].
Var decoder_query(Graph& g, Model& model, Var y_prev, const Batch& batch, std::size_t step);
HeadOutput hurdle_head_forward(Graph& g, Model& model, Var h);
/// Predictive mean p+ mu / (1 - p0) as a differentiable expression.
Var hurdle_mean(Var p_plus, Var mu, Var alpha);
DecoderOutput decode_autoregressive(Graph& g, Model& model, Var memory, const Batch& batch,
                                    const ForwardOptions& opts);
ForwardResult forward(Graph& g, Model& model, const Batch& batch, const ForwardOptions& opts);

/// Per-row hurdle parameters in batch-major order ([b][t]) from a decoder output.
std::vector<HurdleParams> hurdle_params(const DecoderOutput& out, std::size_t batch, std::size_t horizon);
/// Predictive means in batch-major order.
std::vector<double> point_forecast(const DecoderOutput& out, std::size_t batch, std::size_t horizon);

}  // namespace switchhurdle
