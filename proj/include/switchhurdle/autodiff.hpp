#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "switchhurdle/tensor.hpp"

namespace switchhurdle {

/// Trainable tensor plus its gradient accumulator and Adam moments.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  Tensor first_moment;
  Tensor second_moment;

  Parameter() = default;
  Parameter(std::string n, Tensor v);
  void zero_grad() { grad.fill(0.0); }
};

class Graph;

/// Handle to a node in a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}

  Graph& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool valid() const { return graph_ != nullptr; }

 private:
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Define-by-run tape. Nodes are appended in evaluation order, which is a
/// topological order, so backward simply walks the tape in reverse.
/// A Graph must stay on the thread that built it.
class Graph {
 public:
  struct Node;
  using BackwardRule = std::function<void(Graph&, const Node&)>;

  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardRule backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf bound to a parameter. Repeated calls return the same node.
  Var param(Parameter& p);
  /// Leaf that never receives gradient.
  Var constant(Tensor t);
  /// Leaf that receives gradient but is not a Parameter (readable via grad()).
  Var input(Tensor t);

  /// Append an op node. requires_grad is inherited from the inputs.
  Var emit(Tensor value, std::vector<std::size_t> inputs, BackwardRule rule);

  /// Reverse-mode sweep from a scalar loss. Parameter gradients are
  /// accumulated (+=) into Parameter::grad.
  void backward(Var loss);

  const Node& node(std::size_t id) const { return nodes_[id]; }
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& grad(Var v) const { return nodes_[v.id()].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  /// Gradient buffer for an input node, allocated on first touch.
  Tensor& grad_buffer(std::size_t id);

  std::size_t size() const { return nodes_.size(); }
  /// Number of backward rules executed by the most recent backward().
  std::size_t backward_rule_calls() const { return backward_rule_calls_; }

 private:
  std::vector<Node> nodes_;
  std::unordered_map<Parameter*, std::size_t> param_nodes_;
  std::size_t backward_rule_calls_ = 0;
};

enum class Unary {
  kSilu,
  kSigmoid,
  kSoftplus,
  kLog1p,
  kLgamma,
  kExp,
  kLog,
  kGelu,
  kNeg,
  kAbs,
  kLog1mexp,
  kXlogx,
  kSquare,
  kSqrt,
};

const char* unary_name(Unary kind);
/// Scalar forward map of a unary kind (throws std::domain_error on domain violations).
double unary_value(Unary kind, double x);

namespace ops {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
/// x[..., n] + bias[n], bias broadcast over leading dims.
Var add_bias(Var x, Var bias);
/// x[N, d] * s[N] row-wise (s given as N x 1 or N).
Var mul_rows(Var x, Var s);

/// a[..., k] . b[k, n] -> [..., n]; with transpose_b, b is [n, k].
Var matmul(Var a, Var b, bool transpose_b = false);

Var unary(Unary kind, Var x);
inline Var silu(Var x) { return unary(Unary::kSilu, x); }
inline Var sigmoid(Var x) { return unary(Unary::kSigmoid, x); }
inline Var softplus(Var x) { return unary(Unary::kSoftplus, x); }
inline Var log1p(Var x) { return unary(Unary::kLog1p, x); }
inline Var lgamma(Var x) { return unary(Unary::kLgamma, x); }
inline Var exp(Var x) { return unary(Unary::kExp, x); }
inline Var log(Var x) { return unary(Unary::kLog, x); }
inline Var gelu(Var x) { return unary(Unary::kGelu, x); }
inline Var neg(Var x) { return unary(Unary::kNeg, x); }
inline Var abs(Var x) { return unary(Unary::kAbs, x); }
inline Var log1mexp(Var x) { return unary(Unary::kLog1mexp, x); }
inline Var xlogx(Var x) { return unary(Unary::kXlogx, x); }
inline Var square(Var x) { return unary(Unary::kSquare, x); }

/// Elementwise clamp; gradient is zero where the bound is active.
Var clamp(Var x, double lo, double hi);

/// Max-subtracted softmax over the last axis.
Var softmax(Var x);

/// Identity forward, zero gradient backward.
Var stop_gradient(Var x);

/// Top-1 straight-through gate: forward is one_hot(argmax(probs)) with the
/// lowest index winning ties; backward passes the gradient to probs unchanged.
Var ste_gate(Var probs);

Var sum(Var x);
Var mean(Var x);
/// Column means of x[N, E] -> [E].
Var mean_rows(Var x);

/// Row-wise layer norm over the last dim with learned scale/shift.
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);

/// Multi-head scaled dot-product attention. q: [batch*q_len, d],
/// k and v: [batch*kv_len, d]; each batch element attends only within itself.
Var attention(Var q, Var k, Var v, std::size_t batch, std::size_t heads);

/// Rows of table selected by index -> [indices.size(), cols].
Var gather_rows(Var table, std::span<const std::size_t> indices);
/// Inverse placement: out[indices[i]] = x[i], other rows zero.
Var scatter_rows(Var x, std::span<const std::size_t> indices, std::size_t total_rows);

/// Column c of x[N, E] -> [N, 1].
Var column(Var x, std::size_t c);
/// Stack same-width tensors along rows.
Var concat_rows(std::span<const Var> parts);
Var reshape(Var x, Shape shape);

}  // namespace ops

/// Index of the maximum entry of each row of a matrix; lowest index on ties.
std::vector<std::size_t> argmax_rows(const Tensor& t);
/// One-hot matrix of argmax_rows, as a constant tensor.
Tensor one_hot_argmax(const Tensor& probs);

/// Central-difference check of autodiff gradients. `loss` must build a fresh
/// graph from the current parameter values and return the scalar loss value;
/// when `with_backward` is true it must also run backward on that graph.
/// Returns max over coordinates of |g_ad - g_fd| / max(1e-8, |g_fd|).
struct GradientCheckResult {
  double max_rel_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_autodiff = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates = 0;
};

GradientCheckResult gradient_check(std::span<Parameter* const> params,
                                   const std::function<double(bool with_backward)>& loss,
                                   double eps = 1e-5);

}  // namespace switchhurdle
