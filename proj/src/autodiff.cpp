#include "switchhurdle/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "switchhurdle/special.hpp"

namespace switchhurdle {

Parameter::Parameter(std::string n, Tensor v)
    : name(std::move(n)),
      value(std::move(v)),
      grad(value.shape),
      first_moment(value.shape),
      second_moment(value.shape) {}

const Tensor& Var::value() const { return graph_->value(id_); }

Var Graph::param(Parameter& p) {
  auto it = param_nodes_.find(&p);
  if (it != param_nodes_.end()) return Var(this, it->second);
  Node n;
  n.value = p.value;
  n.param = &p;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  const std::size_t id = nodes_.size() - 1;
  param_nodes_.emplace(&p, id);
  return Var(this, id);
}

Var Graph::constant(Tensor t) {
  Node n;
  n.value = std::move(t);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Graph::input(Tensor t) {
  Node n;
  n.value = std::move(t);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Graph::emit(Tensor value, std::vector<std::size_t> inputs, BackwardRule rule) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                [this](std::size_t i) { return nodes_[i].requires_grad; });
  if (n.requires_grad) {
    n.inputs = std::move(inputs);
    n.backward = std::move(rule);
  }
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Tensor& Graph::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.values.empty()) n.grad = Tensor(n.value.shape);
  return n.grad;
}

void Graph::backward(Var loss) {
  if (&loss.graph() != this) throw std::logic_error("backward: loss belongs to another graph");
  if (loss.value().size() != 1) {
    throw std::logic_error("backward: loss must be a scalar, got shape " +
                           shape_string(loss.shape()));
  }
  backward_rule_calls_ = 0;
  for (auto& n : nodes_) n.grad = Tensor();
  grad_buffer(loss.id()).values[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.values.empty()) continue;
    if (n.param != nullptr) {
      n.param->grad.add_inplace(n.grad);
    } else if (n.backward) {
      n.backward(*this, n);
      ++backward_rule_calls_;
    }
  }
}

const char* unary_name(Unary kind) {
  switch (kind) {
    case Unary::kSilu: return "silu";
    case Unary::kSigmoid: return "sigmoid";
    case Unary::kSoftplus: return "softplus";
    case Unary::kLog1p: return "log1p";
    case Unary::kLgamma: return "lgamma";
    case Unary::kExp: return "exp";
    case Unary::kLog: return "log";
    case Unary::kGelu: return "gelu";
    case Unary::kNeg: return "neg";
    case Unary::kAbs: return "abs";
    case Unary::kLog1mexp: return "log1mexp";
    case Unary::kXlogx: return "xlogx";
    case Unary::kSquare: return "square";
    case Unary::kSqrt: return "sqrt";
  }
  return "?";
}

namespace {

[[noreturn]] void domain_fail(Unary kind, double x) {
  throw std::domain_error(std::string(unary_name(kind)) + ": argument " + std::to_string(x) +
                          " outside domain");
}

double gelu_cdf(double x) { return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double unary_derivative(Unary kind, double x, double y) {
  switch (kind) {
    case Unary::kSilu: {
      const double s = special::sigmoid(x);
      return s + x * s * (1.0 - s);
    }
    case Unary::kSigmoid: return y * (1.0 - y);
    case Unary::kSoftplus: return x > 30.0 ? 1.0 : special::sigmoid(x);
    case Unary::kLog1p: return 1.0 / (1.0 + x);
    case Unary::kLgamma: return special::digamma(x);
    case Unary::kExp: return y;
    case Unary::kLog: return 1.0 / x;
    case Unary::kGelu:
      return gelu_cdf(x) + x * std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    case Unary::kNeg: return -1.0;
    case Unary::kAbs: return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
    case Unary::kLog1mexp: return 1.0 / std::expm1(x);
    case Unary::kXlogx: return std::log(std::max(x, 1e-300)) + 1.0;
    case Unary::kSquare: return 2.0 * x;
    case Unary::kSqrt: return y > 0.0 ? 0.5 / y : 0.0;
  }
  return 0.0;
}

void require_same_shape(const char* op, Var a, Var b) {
  if (&a.graph() != &b.graph()) throw std::logic_error(std::string(op) + ": vars from different graphs");
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

}  // namespace

double unary_value(Unary kind, double x) {
  switch (kind) {
    case Unary::kSilu: return x * special::sigmoid(x);
    case Unary::kSigmoid: return special::sigmoid(x);
    case Unary::kSoftplus: return special::softplus(x);
    case Unary::kLog1p:
      if (!(x > -1.0)) domain_fail(kind, x);
      return std::log1p(x);
    case Unary::kLgamma:
      if (!(x > 0.0)) domain_fail(kind, x);
      return special::lgamma(x);
    case Unary::kExp: return std::exp(x);
    case Unary::kLog:
      if (!(x > 0.0)) domain_fail(kind, x);
      return std::log(x);
    case Unary::kGelu: return x * gelu_cdf(x);
    case Unary::kNeg: return -x;
    case Unary::kAbs: return std::abs(x);
    case Unary::kLog1mexp:
      if (!(x > 0.0)) domain_fail(kind, x);
      return special::log1mexp(x);
    case Unary::kXlogx:
      if (x < 0.0) domain_fail(kind, x);
      return x == 0.0 ? 0.0 : x * std::log(x);
    case Unary::kSquare: return x * x;
    case Unary::kSqrt:
      if (x < 0.0) domain_fail(kind, x);
      return std::sqrt(x);
  }
  return 0.0;
}

namespace ops {

Var add(Var a, Var b) {
  require_same_shape("add", a, b);
  Tensor out = a.value();
  out.add_inplace(b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().emit(std::move(out), {ia, ib}, [ia, ib](Graph& g, const Graph::Node& n) {
    if (g.requires_grad(ia)) g.grad_buffer(ia).add_inplace(n.grad);
    if (g.requires_grad(ib)) g.grad_buffer(ib).add_inplace(n.grad);
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a, b);
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().emit(std::move(out), {ia, ib}, [ia, ib](Graph& g, const Graph::Node& n) {
    if (g.requires_grad(ia)) g.grad_buffer(ia).add_inplace(n.grad);
    if (g.requires_grad(ib)) {
      Tensor& gb = g.grad_buffer(ib);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= n.grad[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a, b);
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().emit(std::move(out), {ia, ib}, [ia, ib](Graph& g, const Graph::Node& n) {
    const Tensor& va = g.value(ia);
    const Tensor& vb = g.value(ib);
    if (g.requires_grad(ia)) {
      Tensor& ga = g.grad_buffer(ia);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += n.grad[i] * vb[i];
    }
    if (g.requires_grad(ib)) {
      Tensor& gb = g.grad_buffer(ib);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += n.grad[i] * va[i];
    }
  });
}

Var div(Var a, Var b) {
  require_same_shape("div", a, b);
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().emit(std::move(out), {ia, ib}, [ia, ib](Graph& g, const Graph::Node& n) {
    const Tensor& vb = g.value(ib);
    if (g.requires_grad(ia)) {
      Tensor& ga = g.grad_buffer(ia);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += n.grad[i] / vb[i];
    }
    if (g.requires_grad(ib)) {
      Tensor& gb = g.grad_buffer(ib);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= n.grad[i] * n.value[i] / vb[i];
    }
  });
}

Var scale(Var a, double c) {
  Tensor out = a.value();
  for (auto& v : out.values) v *= c;
  const std::size_t ia = a.id();
  return a.graph().emit(std::move(out), {ia}, [ia, c](Graph& g, const Graph::Node& n) {
    Tensor& ga = g.grad_buffer(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += c * n.grad[i];
  });
}

Var add_scalar(Var a, double c) {
  Tensor out = a.value();
  for (auto& v : out.values) v += c;
  const std::size_t ia = a.id();
  return a.graph().emit(std::move(out), {ia}, [ia](Graph& g, const Graph::Node& n) {
    g.grad_buffer(ia).add_inplace(n.grad);
  });
}

Var add_bias(Var x, Var bias) {
  const std::size_t width = x.cols();
  if (bias.value().size() != width) {
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) + " vs input " +
                         shape_string(x.shape()));
  }
  Tensor out = x.value();
  const std::size_t rows = out.rows();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < width; ++c) out.at(r, c) += bias.value()[c];
  const std::size_t ix = x.id(), ib = bias.id();
  return x.graph().emit(std::move(out), {ix, ib}, [ix, ib, rows, width](Graph& g, const Graph::Node& n) {
    if (g.requires_grad(ix)) g.grad_buffer(ix).add_inplace(n.grad);
    if (g.requires_grad(ib)) {
      Tensor& gb = g.grad_buffer(ib);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < width; ++c) gb[c] += n.grad[r * width + c];
    }
  });
}

Var mul_rows(Var x, Var s) {
  const std::size_t rows = x.rows(), width = x.cols();
  if (s.value().size() != rows) {
    throw DimensionError("mul_rows: scale " + shape_string(s.shape()) + " vs input " +
                         shape_string(x.shape()));
  }
  Tensor out = x.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < width; ++c) out.at(r, c) *= s.value()[r];
  const std::size_t ix = x.id(), is = s.id();
  return x.graph().emit(std::move(out), {ix, is}, [ix, is, rows, width](Graph& g, const Graph::Node& n) {
    const Tensor& vx = g.value(ix);
    const Tensor& vs = g.value(is);
    if (g.requires_grad(ix)) {
      Tensor& gx = g.grad_buffer(ix);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < width; ++c) gx[r * width + c] += n.grad[r * width + c] * vs[r];
    }
    if (g.requires_grad(is)) {
      Tensor& gs = g.grad_buffer(is);
      for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < width; ++c) acc += n.grad[r * width + c] * vx[r * width + c];
        gs[r] += acc;
      }
    }
  });
}

Var matmul(Var a, Var b, bool transpose_b) {
  const Tensor& va = a.value();
  const Tensor& vb = b.value();
  if (vb.shape.size() != 2) throw DimensionError("matmul: right operand must be a matrix");
  const std::size_t m = va.rows(), k = va.cols();
  const std::size_t bk = transpose_b ? vb.shape[1] : vb.shape[0];
  const std::size_t n = transpose_b ? vb.shape[0] : vb.shape[1];
  if (bk != k) {
    throw DimensionError("matmul: inner dims differ " + shape_string(va.shape) + " . " +
                         shape_string(vb.shape) + (transpose_b ? "^T" : ""));
  }
  Shape out_shape = va.shape;
  out_shape.back() = n;
  Tensor out(out_shape);
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = &out.values[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const double av = va.values[i * k + p];
      if (av == 0.0) continue;
      if (transpose_b) {
        for (std::size_t j = 0; j < n; ++j) orow[j] += av * vb.values[j * k + p];
      } else {
        const double* brow = &vb.values[p * n];
        for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().emit(std::move(out), {ia, ib}, [ia, ib, m, k, n, transpose_b](Graph& g, const Graph::Node& node) {
    const Tensor& va = g.value(ia);
    const Tensor& vb = g.value(ib);
    const Tensor& dc = node.grad;
    if (g.requires_grad(ia)) {
      // dA = dC . B^T
      Tensor& ga = g.grad_buffer(ia);
      for (std::size_t i = 0; i < m; ++i) {
        const double* drow = &dc.values[i * n];
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          if (transpose_b) {
            for (std::size_t j = 0; j < n; ++j) acc += drow[j] * vb.values[j * k + p];
          } else {
            const double* brow = &vb.values[p * n];
            for (std::size_t j = 0; j < n; ++j) acc += drow[j] * brow[j];
          }
          ga.values[i * k + p] += acc;
        }
      }
    }
    if (g.requires_grad(ib)) {
      // dB = A^T . dC (or its transpose)
      Tensor& gb = g.grad_buffer(ib);
      for (std::size_t i = 0; i < m; ++i) {
        const double* drow = &dc.values[i * n];
        for (std::size_t p = 0; p < k; ++p) {
          const double av = va.values[i * k + p];
          if (av == 0.0) continue;
          if (transpose_b) {
            for (std::size_t j = 0; j < n; ++j) gb.values[j * k + p] += av * drow[j];
          } else {
            double* grow = &gb.values[p * n];
            for (std::size_t j = 0; j < n; ++j) grow[j] += av * drow[j];
          }
        }
      }
    }
  });
}

Var unary(Unary kind, Var x) {
  Tensor out = x.value();
  for (auto& v : out.values) v = unary_value(kind, v);
  const std::size_t ix = x.id();
  return x.graph().emit(std::move(out), {ix}, [ix, kind](Graph& g, const Graph::Node& n) {
    const Tensor& vx = g.value(ix);
    Tensor& gx = g.grad_buffer(ix);
    for (std::size_t i = 0; i < gx.size(); ++i) {
      if (n.grad[i] != 0.0) gx[i] += n.grad[i] * unary_derivative(kind, vx[i], n.value[i]);
    }
  });
}

Var clamp(Var x, double lo, double hi) {
  Tensor out = x.value();
  for (auto& v : out.values) v = std::clamp(v, lo, hi);
  const std::size_t ix = x.id();
  return x.graph().emit(std::move(out), {ix}, [ix, lo, hi](Graph& g, const Graph::Node& n) {
    const Tensor& vx = g.value(ix);
    Tensor& gx = g.grad_buffer(ix);
    for (std::size_t i = 0; i < gx.size(); ++i) {
      if (vx[i] >= lo && vx[i] <= hi) gx[i] += n.grad[i];
    }
  });
}

Var softmax(Var x) {
  Tensor out = x.value();
  const std::size_t rows = out.rows(), width = out.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = &out.values[r * width];
    const double mx = *std::max_element(row, row + width);
    double total = 0.0;
    for (std::size_t c = 0; c < width; ++c) {
      row[c] = std::exp(row[c] - mx);
      total += row[c];
    }
    for (std::size_t c = 0; c < width; ++c) row[c] /= total;
  }
  const std::size_t ix = x.id();
  return x.graph().emit(std::move(out), {ix}, [ix, rows, width](Graph& g, const Graph::Node& n) {
    Tensor& gx = g.grad_buffer(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* s = &n.value.values[r * width];
      const double* gy = &n.grad.values[r * width];
      double dot = 0.0;
      for (std::size_t c = 0; c < width; ++c) dot += gy[c] * s[c];
      for (std::size_t c = 0; c < width; ++c) gx.values[r * width + c] += s[c] * (gy[c] - dot);
    }
  });
}

Var stop_gradient(Var x) { return x.graph().emit(x.value(), {}, nullptr); }

Var ste_gate(Var probs) {
  Tensor out = one_hot_argmax(probs.value());
  const std::size_t ip = probs.id();
  return probs.graph().emit(std::move(out), {ip}, [ip](Graph& g, const Graph::Node& n) {
    g.grad_buffer(ip).add_inplace(n.grad);
  });
}

Var sum(Var x) {
  double total = 0.0;
  for (double v : x.value().values) total += v;
  const std::size_t ix = x.id();
  return x.graph().emit(Tensor::scalar(total), {ix}, [ix](Graph& g, const Graph::Node& n) {
    Tensor& gx = g.grad_buffer(ix);
    for (auto& v : gx.values) v += n.grad[0];
  });
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var mean_rows(Var x) {
  const std::size_t rows = x.rows(), width = x.cols();
  Tensor out({width});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < width; ++c) out[c] += x.value().at(r, c);
  const double inv = 1.0 / static_cast<double>(rows);
  for (auto& v : out.values) v *= inv;
  const std::size_t ix = x.id();
  return x.graph().emit(std::move(out), {ix}, [ix, rows, width, inv](Graph& g, const Graph::Node& n) {
    Tensor& gx = g.grad_buffer(ix);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < width; ++c) gx[r * width + c] += n.grad[c] * inv;
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const std::size_t rows = x.rows(), width = x.cols();
  if (gamma.value().size() != width || beta.value().size() != width) {
    throw DimensionError("layer_norm: scale/shift width mismatch");
  }
  Tensor out(x.shape());
  Tensor xhat(x.shape());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = &x.value().values[r * width];
    double mu = 0.0;
    for (std::size_t c = 0; c < width; ++c) mu += row[c];
    mu /= static_cast<double>(width);
    double var = 0.0;
    for (std::size_t c = 0; c < width; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(width);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < width; ++c) {
      const double h = (row[c] - mu) * inv_std[r];
      xhat.at(r, c) = h;
      out.at(r, c) = gamma.value()[c] * h + beta.value()[c];
    }
  }
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.graph().emit(
      std::move(out), {ix, ig, ib},
      [ix, ig, ib, rows, width, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Graph& g, const Graph::Node& n) {
        const Tensor& vg = g.value(ig);
        if (g.requires_grad(ig)) {
          Tensor& gg = g.grad_buffer(ig);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < width; ++c) gg[c] += n.grad.at(r, c) * xhat.at(r, c);
        }
        if (g.requires_grad(ib)) {
          Tensor& gb = g.grad_buffer(ib);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < width; ++c) gb[c] += n.grad.at(r, c);
        }
        if (g.requires_grad(ix)) {
          Tensor& gx = g.grad_buffer(ix);
          const double w = static_cast<double>(width);
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t c = 0; c < width; ++c) {
              const double d = n.grad.at(r, c) * vg[c];
              mean_d += d;
              mean_dx += d * xhat.at(r, c);
            }
            mean_d /= w;
            mean_dx /= w;
            for (std::size_t c = 0; c < width; ++c) {
              const double d = n.grad.at(r, c) * vg[c];
              gx.at(r, c) += inv_std[r] * (d - mean_d - xhat.at(r, c) * mean_dx);
            }
          }
        }
      });
}

Var attention(Var q, Var k, Var v, std::size_t batch, std::size_t heads) {
  const std::size_t d = q.cols();
  if (k.cols() != d || v.cols() != d) throw DimensionError("attention: width mismatch");
  if (heads == 0 || d % heads != 0) throw DimensionError("attention: width not divisible by heads");
  if (batch == 0 || q.rows() % batch != 0 || k.rows() % batch != 0 || v.rows() != k.rows()) {
    throw DimensionError("attention: rows not divisible by batch");
  }
  const std::size_t lq = q.rows() / batch, lk = k.rows() / batch, dh = d / heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const Tensor& vq = q.value();
  const Tensor& vk = k.value();
  const Tensor& vv = v.value();
  Tensor out({batch * lq, d});
  // probs laid out [batch][head][lq][lk]
  std::vector<double> probs(batch * heads * lq * lk);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t i = 0; i < lq; ++i) {
        double* p = &probs[((b * heads + h) * lq + i) * lk];
        const double* qi = &vq.values[(b * lq + i) * d + off];
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < lk; ++j) {
          const double* kj = &vk.values[(b * lk + j) * d + off];
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          p[j] = s * inv_scale;
          mx = std::max(mx, p[j]);
        }
        double total = 0.0;
        for (std::size_t j = 0; j < lk; ++j) {
          p[j] = std::exp(p[j] - mx);
          total += p[j];
        }
        double* oi = &out.values[(b * lq + i) * d + off];
        for (std::size_t j = 0; j < lk; ++j) {
          p[j] /= total;
          const double* vj = &vv.values[(b * lk + j) * d + off];
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p[j] * vj[c];
        }
      }
    }
  }
  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  return q.graph().emit(
      std::move(out), {iq, ik, iv},
      [=, probs = std::move(probs)](Graph& g, const Graph::Node& n) {
        const Tensor& vq = g.value(iq);
        const Tensor& vk = g.value(ik);
        const Tensor& vv = g.value(iv);
        const bool need_q = g.requires_grad(iq), need_k = g.requires_grad(ik), need_v = g.requires_grad(iv);
        Tensor* gq = need_q ? &g.grad_buffer(iq) : nullptr;
        Tensor* gk = need_k ? &g.grad_buffer(ik) : nullptr;
        Tensor* gv = need_v ? &g.grad_buffer(iv) : nullptr;
        std::vector<double> dp(lk);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = h * dh;
            for (std::size_t i = 0; i < lq; ++i) {
              const double* p = &probs[((b * heads + h) * lq + i) * lk];
              const double* go = &n.grad.values[(b * lq + i) * d + off];
              double dot = 0.0;
              for (std::size_t j = 0; j < lk; ++j) {
                const double* vj = &vv.values[(b * lk + j) * d + off];
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) s += go[c] * vj[c];
                dp[j] = s;
                dot += p[j] * s;
                if (need_v) {
                  double* gvj = &gv->values[(b * lk + j) * d + off];
                  for (std::size_t c = 0; c < dh; ++c) gvj[c] += p[j] * go[c];
                }
              }
              const double* qi = &vq.values[(b * lq + i) * d + off];
              for (std::size_t j = 0; j < lk; ++j) {
                const double ds = p[j] * (dp[j] - dot) * inv_scale;
                if (ds == 0.0) continue;
                const double* kj = &vk.values[(b * lk + j) * d + off];
                if (need_q) {
                  double* gqi = &gq->values[(b * lq + i) * d + off];
                  for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
                }
                if (need_k) {
                  double* gkj = &gk->values[(b * lk + j) * d + off];
                  for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
      });
}

Var gather_rows(Var table, std::span<const std::size_t> indices) {
  const std::size_t rows = table.rows(), width = table.cols();
  Tensor out({indices.size(), width});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows) throw DimensionError("gather_rows: index out of range");
    std::copy_n(&table.value().values[indices[i] * width], width, &out.values[i * width]);
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  const std::size_t it = table.id();
  return table.graph().emit(std::move(out), {it}, [it, width, idx = std::move(idx)](Graph& g, const Graph::Node& n) {
    Tensor& gt = g.grad_buffer(it);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t c = 0; c < width; ++c) gt.values[idx[i] * width + c] += n.grad.values[i * width + c];
  });
}

Var scatter_rows(Var x, std::span<const std::size_t> indices, std::size_t total_rows) {
  const std::size_t width = x.cols();
  if (indices.size() != x.rows()) throw DimensionError("scatter_rows: index count != rows");
  Tensor out({total_rows, width});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= total_rows) throw DimensionError("scatter_rows: index out of range");
    std::copy_n(&x.value().values[i * width], width, &out.values[indices[i] * width]);
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  const std::size_t ix = x.id();
  return x.graph().emit(std::move(out), {ix}, [ix, width, idx = std::move(idx)](Graph& g, const Graph::Node& n) {
    Tensor& gx = g.grad_buffer(ix);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t c = 0; c < width; ++c) gx.values[i * width + c] += n.grad.values[idx[i] * width + c];
  });
}

Var column(Var x, std::size_t col) {
  const std::size_t rows = x.rows(), width = x.cols();
  if (col >= width) throw DimensionError("column: index out of range");
  Tensor out({rows, 1});
  for (std::size_t r = 0; r < rows; ++r) out[r] = x.value().at(r, col);
  const std::size_t ix = x.id();
  return x.graph().emit(std::move(out), {ix}, [ix, rows, width, col](Graph& g, const Graph::Node& n) {
    Tensor& gx = g.grad_buffer(ix);
    for (std::size_t r = 0; r < rows; ++r) gx.values[r * width + col] += n.grad[r];
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t width = parts[0].cols();
  std::size_t total = 0;
  std::vector<std::size_t> ids;
  for (const Var& p : parts) {
    if (p.cols() != width) throw DimensionError("concat_rows: width mismatch");
    total += p.rows();
    ids.push_back(p.id());
  }
  Tensor out({total, width});
  std::size_t offset = 0;
  for (const Var& p : parts) {
    std::copy(p.value().values.begin(), p.value().values.end(), out.values.begin() + static_cast<std::ptrdiff_t>(offset));
    offset += p.value().size();
  }
  Graph& graph = parts[0].graph();
  return graph.emit(std::move(out), ids, [ids](Graph& g, const Graph::Node& n) {
    std::size_t offset = 0;
    for (std::size_t id : ids) {
      const std::size_t len = g.value(id).size();
      if (g.requires_grad(id)) {
        Tensor& gi = g.grad_buffer(id);
        for (std::size_t i = 0; i < len; ++i) gi[i] += n.grad[offset + i];
      }
      offset += len;
    }
  });
}

Var reshape(Var x, Shape shape) {
  if (shape_size(shape) != x.value().size()) throw DimensionError("reshape: size mismatch");
  Tensor out(std::move(shape), x.value().values);
  const std::size_t ix = x.id();
  return x.graph().emit(std::move(out), {ix}, [ix](Graph& g, const Graph::Node& n) {
    Tensor& gx = g.grad_buffer(ix);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += n.grad[i];
  });
}

}  // namespace ops

std::vector<std::size_t> argmax_rows(const Tensor& t) {
  const std::size_t rows = t.rows(), width = t.cols();
  std::vector<std::size_t> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < width; ++c) {
      if (t.at(r, c) > t.at(r, best)) best = c;
    }
    out[r] = best;
  }
  return out;
}

Tensor one_hot_argmax(const Tensor& probs) {
  Tensor out(probs.shape);
  const auto idx = argmax_rows(probs);
  for (std::size_t r = 0; r < idx.size(); ++r) out.at(r, idx[r]) = 1.0;
  return out;
}

GradientCheckResult gradient_check(std::span<Parameter* const> params,
                                   const std::function<double(bool)>& loss, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("gradient_check: eps must be > 0");
  for (Parameter* p : params) p->zero_grad();
  loss(true);
  std::vector<Tensor> autodiff;
  autodiff.reserve(params.size());
  for (Parameter* p : params) autodiff.push_back(p->grad);

  GradientCheckResult result;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter& p = *params[pi];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double saved = p.value[i];
      p.value[i] = saved + eps;
      const double up = loss(false);
      p.value[i] = saved - eps;
      const double down = loss(false);
      p.value[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double analytic = autodiff[pi][i];
      const double err = std::abs(analytic - numeric) / std::max(1e-8, std::abs(numeric));
      ++result.coordinates;
      if (err > result.max_rel_error || result.coordinates == 1) {
        result.max_rel_error = err;
        result.worst_parameter = p.name;
        result.worst_index = i;
        result.worst_autodiff = analytic;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace switchhurdle
