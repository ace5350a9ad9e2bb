#include <cmath>
#include <limits>

#include "doctest.h"
#include "helpers.hpp"
#include "model_checks.hpp"
#include "switchhurdle/data.hpp"
#include "switchhurdle/training.hpp"

using namespace switchhurdle;
using testing::random_batch;
using testing::random_tensor;
using testing::objective_value;
using testing::tiny_config;

namespace {

Tensor column_of(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor({n, 1}, std::move(v));
}

/// Forward result assembled from constants, for objective arithmetic tests.
ForwardResult fake_forward(Graph& g, std::vector<double> p, std::vector<double> mu, std::vector<double> alpha,
                           std::vector<double> mean, std::vector<Tensor> layer_probs) {
  ForwardResult r;
  r.decoder.p_plus = g.constant(column_of(std::move(p)));
  r.decoder.mu = g.constant(column_of(std::move(mu)));
  r.decoder.alpha = g.constant(column_of(std::move(alpha)));
  r.decoder.mean = g.constant(column_of(std::move(mean)));
  for (auto& t : layer_probs) r.encoder.layer_probs.push_back(g.constant(std::move(t)));
  return r;
}

Batch targets_batch(std::vector<double> targets) {
  Batch b;
  b.size = 1;
  const std::size_t T = targets.size();
  b.targets = Tensor({1, T}, std::move(targets));
  b.mask = Tensor({1, T}, 1.0);
  return b;
}

Tensor collapsed(std::size_t n, std::size_t experts) {
  Tensor t({n, experts});
  for (std::size_t i = 0; i < n; ++i) t.at(i, 0) = 1.0;
  return t;
}

Dataset toy_dataset(std::size_t n_series, std::size_t length, std::uint64_t seed) {
  SyntheticSpec spec;
  spec.n_series = n_series;
  spec.length = length;
  spec.seed = seed;
  return generate_synthetic(spec);
}

}  // namespace

TEST_CASE("hurdle_nll examples") {
  Graph g;
  auto half = g.constant(column_of({0.5, 0.5, 0.5}));
  auto one = g.constant(column_of({1.0, 1.0, 1.0}));
  auto zeros = column_of({0, 0, 0});
  auto mask = column_of({1, 1, 1});
  CHECK(hurdle_nll(half, one, one, zeros, mask).value()[0] == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  auto p1 = g.constant(column_of({0.5}));
  auto m1 = g.constant(column_of({1.0}));
  CHECK(hurdle_nll(p1, m1, m1, column_of({1}), column_of({1})).value()[0] ==
        doctest::Approx(std::log(4.0)).epsilon(1e-14));
  CHECK_THROWS_AS(hurdle_nll(half, one, one, zeros, column_of({0, 0, 0})), std::invalid_argument);
  CHECK_THROWS_AS(hurdle_nll(p1, m1, m1, column_of({1.5}), column_of({1})), std::domain_error);

  // Masked rows do not count.
  auto mixed = hurdle_nll(g.constant(column_of({0.5, 0.9})), g.constant(column_of({1.0, 1.0})),
                          g.constant(column_of({1.0, 1.0})), column_of({0, 3}), column_of({1, 0}));
  CHECK(mixed.value()[0] == doctest::Approx(std::log(2.0)).epsilon(1e-15));
}

TEST_CASE("hurdle_nll is BCE on occurrence plus truncated NB NLL on positives") {
  Rng rng(3);
  const std::size_t n = 30;
  std::vector<double> p(n), mu(n), a(n), y(n);
  for (std::size_t i = 0; i < n; ++i) {
    p[i] = rng.uniform(0.05, 0.95);
    mu[i] = rng.uniform(0.2, 6.0);
    a[i] = rng.uniform(0.05, 2.0);
    y[i] = rng.bernoulli(0.4) ? 0.0 : static_cast<double>(1 + rng.below(8));
  }
  double bce = 0.0, trunc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const bool pos = y[i] > 0;
    bce -= pos ? std::log(p[i]) : std::log(1.0 - p[i]);
    if (pos) {
      // Truncated NB pmf from Gamma terms, independent of the library code.
      const double r = 1.0 / a[i];
      const double log_nb = std::lgamma(y[i] + r) - std::lgamma(r) - std::lgamma(y[i] + 1) +
                            r * std::log(1.0 / (1.0 + a[i] * mu[i])) +
                            y[i] * std::log(a[i] * mu[i] / (1.0 + a[i] * mu[i]));
      const double p0 = std::pow(1.0 + a[i] * mu[i], -r);
      trunc -= log_nb - std::log(1.0 - p0);
    }
  }
  Graph g;
  auto nll = hurdle_nll(g.constant(column_of(p)), g.constant(column_of(mu)), g.constant(column_of(a)), column_of(y),
                        Tensor({n, 1}, 1.0));
  CHECK(nll.value()[0] == doctest::Approx((bce + trunc) / n).epsilon(1e-11));
}

TEST_CASE("probabilistic objective") {
  Graph g;
  const std::vector<double> p = {0.5, 0.3, 0.8}, mu = {1.0, 2.0, 0.5}, a = {1.0, 0.4, 2.0}, mean = {1, 1, 1};
  Batch b = targets_batch({0, 2, 1});

  auto plain = fake_forward(g, p, mu, a, mean, {collapsed(5, 4), collapsed(5, 4)});
  auto t0 = probabilistic_objective(plain, b, 0.0);
  CHECK(std::abs(t0.total.value()[0] - t0.nll.value()[0]) <= 1e-15);

  auto t1 = probabilistic_objective(plain, b, 0.01);
  CHECK(t1.total.value()[0] - t0.total.value()[0] == doctest::Approx(0.02 * std::log(4.0)).epsilon(1e-12));
  CHECK(0.02 * std::log(4.0) == doctest::Approx(0.027726).epsilon(1e-5));

  Tensor uniform({5, 4}, 0.25);
  auto balanced = fake_forward(g, p, mu, a, mean, {uniform, uniform});
  auto tu = probabilistic_objective(balanced, b, 0.01);
  CHECK(tu.total.value()[0] == t0.total.value()[0]);
}

TEST_CASE("hybrid objective") {
  Graph g;
  Tensor uniform({3, 2}, 0.5);
  SUBCASE("MAE of the hurdle mean") {
    auto fwd = fake_forward(g, {0.5, 0.5}, {1, 1}, {1, 1}, {1, 1}, {uniform});
    auto t = hybrid_objective(fwd, targets_batch({0, 2}), 1.0);
    CHECK(t.mae.value()[0] == 1.0);
    CHECK(t.total.value()[0] == doctest::Approx(1.0 + t.nll.value()[0]).epsilon(1e-15));
  }
  SUBCASE("perfect point forecasts at the floor") {
    auto fwd = fake_forward(g, {0.5, 0.5}, {1, 1}, {1, 1}, {0, 2}, {collapsed(3, 2)});
    auto t = hybrid_objective(fwd, targets_batch({0, 2}), lambda_decay(20));
    CHECK(t.mae.value()[0] == 0.0);
    CHECK(t.total.value()[0] ==
          doctest::Approx(0.05 * (t.nll.value()[0] + std::log(2.0))).epsilon(1e-14));
  }
  SUBCASE("epoch 0 weighs both terms equally") {
    auto fwd = fake_forward(g, {0.5, 0.5}, {1, 1}, {1, 1}, {3, 1}, {uniform});
    auto t = hybrid_objective(fwd, targets_batch({0, 2}), lambda_decay(0));
    CHECK(t.lambda == 1.0);
    CHECK(t.total.value()[0] == doctest::Approx(t.mae.value()[0] + t.nll.value()[0]).epsilon(1e-15));
  }
}

TEST_CASE("lambda_decay schedule") {
  const double expected[] = {1.0, 0.7, 0.49, 0.343, 0.2401, 0.16807, 0.117649, 0.0823543, 0.05764801};
  for (std::size_t e = 0; e < 9; ++e) CHECK(std::abs(lambda_decay(e) - expected[e]) <= 1e-12);
  for (std::size_t e = 9; e <= 40; ++e) CHECK(lambda_decay(e) == 0.05);
  for (std::size_t e = 0; e < 40; ++e) {
    CHECK(lambda_decay(e + 1) <= lambda_decay(e));
    CHECK(lambda_decay(e) >= 0.05);
    CHECK(lambda_decay(e) <= 1.0);
  }
}

TEST_CASE("teacher forcing schedule") {
  TrainConfig c;
  c.epochs = 20;
  CHECK(c.effective_tf_decay_epochs() == 10);
  CHECK(teacher_forcing_ratio(c, 0) == 1.0);
  CHECK(teacher_forcing_ratio(c, 5) == 0.5);
  CHECK(teacher_forcing_ratio(c, 10) == 0.0);
  CHECK(teacher_forcing_ratio(c, 15) == 0.0);
  c.tf_start = 0.9;
  c.tf_end = 0.1;
  c.tf_decay_epochs = 4;
  CHECK(teacher_forcing_ratio(c, 2) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(teacher_forcing_ratio(c, 4) == 0.1);
  for (std::size_t e = 0; e < 12; ++e) {
    CHECK(teacher_forcing_ratio(c, e + 1) <= teacher_forcing_ratio(c, e));
    CHECK(teacher_forcing_ratio(c, e) <= 0.9);
    CHECK(teacher_forcing_ratio(c, e) >= 0.1);
  }
  c.epochs = 1;
  c.tf_decay_epochs = 0;
  CHECK(c.effective_tf_decay_epochs() == 1);
}

TEST_CASE("train config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.lambda_decay_factor = 1.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.lambda_decay_floor = 2.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.tf_end = 1.0;
  c.tf_start = 0.5;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  CHECK(parse_objective("probabilistic") == Objective::kProbabilistic);
  CHECK(parse_objective(to_string(Objective::kHybrid)) == Objective::kHybrid);
  CHECK_THROWS_AS(parse_objective("mse"), std::invalid_argument);
}

TEST_CASE("Adam step") {
  SUBCASE("first step on a unit gradient") {
    Parameter p("w", Tensor::scalar(0.5));
    p.grad[0] = 1.0;
    OptimizerState s;
    Parameter* ps[] = {&p};
    optimizer_step(ps, s, 1e-3, 10.0);
    // m_hat = 1, v_hat = 1: step = lr / (1 + eps)
    CHECK(p.value[0] - 0.5 == doctest::Approx(-1e-3 / (1.0 + 1e-8)).epsilon(1e-12));
  }
  SUBCASE("zero gradient leaves parameters unchanged") {
    Parameter p("w", Tensor::vector({0.1, -2.0, 3.0}));
    const auto before = p.value.values;
    OptimizerState s;
    Parameter* ps[] = {&p};
    for (int i = 0; i < 3; ++i) optimizer_step(ps, s, 1e-2, 1.0);
    CHECK(p.value.values == before);
  }
  SUBCASE("global norm clipping") {
    Parameter a("a", Tensor::vector({0.0, 0.0}));
    Parameter b("b", Tensor::scalar(0.0));
    a.grad = Tensor::vector({3.0, 0.0});
    b.grad = Tensor::scalar(4.0);
    OptimizerState s;
    Parameter* ps[] = {&a, &b};
    auto info = optimizer_step(ps, s, 1e-3, 1.0);
    CHECK(info.grad_norm == doctest::Approx(5.0).epsilon(1e-15));
    CHECK(info.clip_scale == doctest::Approx(0.2).epsilon(1e-15));
    // First moment holds (1 - beta1) * clipped gradient.
    const double clipped_norm = std::hypot(a.first_moment[0], a.first_moment[1], b.first_moment[0]) / 0.1;
    CHECK(clipped_norm == doctest::Approx(1.0).epsilon(1e-12));
    auto small = optimizer_step(ps, s, 1e-3, 100.0);
    CHECK(small.clip_scale == 1.0);
  }
  SUBCASE("non-finite gradient names the parameter") {
    Parameter a("encoder.0.router", Tensor::vector({0.0, 0.0}));
    a.grad[1] = std::numeric_limits<double>::quiet_NaN();
    OptimizerState s;
    Parameter* ps[] = {&a};
    try {
      optimizer_step(ps, s, 1e-3, 1.0);
      FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
      CHECK(std::string(e.what()).find("encoder.0.router") != std::string::npos);
    }
  }
}

TEST_CASE("full-model gradient check") {
  // B=2, L=8, T=4, d=8, E=2
  struct Variant {
    const char* name;
    GateMode gate;
    ExpertActivation act;
    Objective obj;
    double tf;
  };
  const Variant variants[] = {
      {"ste prob", GateMode::kSteTop1, ExpertActivation::kSwiglu, Objective::kProbabilistic, 0.5},
      {"ste hybrid", GateMode::kSteTop1, ExpertActivation::kSwiglu, Objective::kHybrid, 0.5},
      {"soft prob", GateMode::kSoft, ExpertActivation::kSwiglu, Objective::kProbabilistic, 1.0},
      {"soft hybrid gelu", GateMode::kSoft, ExpertActivation::kGelu, Objective::kHybrid, 0.0},
  };
  for (const auto& v : variants) {
    const auto r = testing::full_gradient_check(v.gate, v.act, v.obj, v.tf);
    INFO(v.name << ": " << r.fd.worst_parameter << "[" << r.fd.worst_index << "] ad=" << r.fd.worst_autodiff
                << " fd=" << r.fd.worst_numeric << " over " << r.fd.coordinates);
    CHECK(r.fd.max_rel_error < 1e-3);
    // The surrogate reproduces the real STE gate's forward value and gradients.
    CHECK(r.surrogate_value_equal);
    CHECK(r.surrogate_grad_diff < 1e-12);
  }
}

TEST_CASE("tiny-lr step does not increase the objective") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    auto c = tiny_config(8, 2, 8, 4);
    Model m(c, seed);
    Rng rng(seed + 100);
    Batch b = random_batch(c, 4, rng);
    ForwardOptions opts;
    const double before = objective_value(m, b, Objective::kProbabilistic, opts, false);
    m.zero_grad();
    objective_value(m, b, Objective::kProbabilistic, opts, true);
    OptimizerState s;
    auto ptrs = m.parameter_ptrs();
    optimizer_step(ptrs, s, 1e-6, 1.0);
    const double after = objective_value(m, b, Objective::kProbabilistic, opts, false);
    INFO("seed " << seed);
    CHECK(after <= before);
  }
}

TEST_CASE("NLL decreases over full-batch steps on a toy set") {
  auto c = tiny_config(8, 2, 8, 4);
  Model m(c, 41);
  Rng rng(42);
  Batch b = random_batch(c, 4, rng);
  ForwardOptions opts;
  OptimizerState s;
  auto ptrs = m.parameter_ptrs();
  auto nll_now = [&](bool bw) {
    Graph g;
    auto fwd = forward(g, m, b, opts);
    auto terms = probabilistic_objective(fwd, b, 0.0);
    if (bw) g.backward(terms.total);
    return terms.nll.value()[0];
  };
  const double initial = nll_now(false);
  double best = initial;
  std::vector<double> best_so_far;
  for (int step = 0; step < 50; ++step) {
    m.zero_grad();
    best = std::min(best, nll_now(true));
    best_so_far.push_back(best);
    optimizer_step(ptrs, s, 1e-2, 1.0);
  }
  best = std::min(best, nll_now(false));
  for (std::size_t i = 1; i < best_so_far.size(); ++i) CHECK(best_so_far[i] <= best_so_far[i - 1]);
  CHECK(best < initial * 0.9);
}

TEST_CASE("fit contract") {
  Dataset data = toy_dataset(4, 60, 5);
  PreparedData prepared = prepare(data, CategoryEncoder::fit(data));
  auto base = tiny_config(8, 2, 8, 4);
  const ModelConfig c = model_config_for(prepared, base);
  const Split split = make_split(data, c.context_length, c.horizon, 4);
  TrainConfig tc;
  tc.batch_size = 8;
  tc.learning_rate = 1e-2;
  tc.stride = 4;

  SUBCASE("epochs = 0 returns the initial model") {
    Model m(c, 1);
    const auto before = m.parameters();
    tc.epochs = 0;
    auto report = fit(m, prepared, split, tc);
    CHECK(report.history.empty());
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(before[i].value.values == m.parameters()[i].value.values);
  }

  SUBCASE("bitwise reproducible") {
    tc.epochs = 3;
    tc.objective = Objective::kHybrid;
    Model a(c, 7), b(c, 7);
    auto ra = fit(a, prepared, split, tc);
    auto rb = fit(b, prepared, split, tc);
    REQUIRE(ra.history.size() == 3);
    CHECK(ra.best_epoch == rb.best_epoch);
    for (std::size_t e = 0; e < 3; ++e) {
      CHECK(ra.history[e].objective == rb.history[e].objective);
      CHECK(ra.history[e].lambda_decay == lambda_decay(e));
      CHECK(ra.history[e].val_selection == ra.history[e].val_mae);
    }
    for (std::size_t i = 0; i < a.parameters().size(); ++i)
      CHECK(a.parameters()[i].value.values == b.parameters()[i].value.values);
  }

  SUBCASE("records utilization and the best epoch") {
    tc.epochs = 2;
    Model m(c, 3);
    std::size_t epochs_seen = 0, bests = 0;
    FitCallbacks cb;
    cb.on_epoch = [&](const EpochRecord&) { ++epochs_seen; };
    cb.on_best = [&](const Model&, const EpochRecord& r) {
      ++bests;
      CHECK(r.best);
    };
    auto report = fit(m, prepared, split, tc, cb);
    CHECK(epochs_seen == 2);
    CHECK(bests >= 1);
    for (const auto& rec : report.history) {
      CHECK(rec.utilization.size() == c.n_encoder_layers);
      for (const auto& layer : rec.utilization) {
        double s = 0;
        for (double u : layer) s += u;
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
      }
      CHECK(rec.val_selection == rec.val_objective);
    }
    CHECK(report.history[report.best_epoch].best);
  }
}

TEST_CASE("toy overfit reduces train NLL by at least 30%") {
  Dataset data = toy_dataset(4, 60, 11);
  PreparedData prepared = prepare(data, CategoryEncoder::fit(data));
  const ModelConfig c = model_config_for(prepared, tiny_config(8, 2, 8, 4));
  const Split split = make_split(data, c.context_length, c.horizon, 2);
  TrainConfig tc;
  tc.epochs = 40;
  tc.batch_size = 8;
  tc.learning_rate = 1e-2;
  tc.lambda_aux = 0.0;
  tc.tf_start = 0.0;
  tc.stride = 2;
  Model m(c, 2);
  const std::span<const WindowIndex> train(split.train.windows);
  const double initial = validate_model(m, prepared, train, tc, 0).nll;
  // Select on the training windows themselves.
  Split overfit = split;
  overfit.validation = split.train.windows;
  fit(m, prepared, overfit, tc);
  const double final_nll = validate_model(m, prepared, train, tc, 0).nll;
  INFO("initial " << initial << " final " << final_nll);
  CHECK(final_nll <= 0.7 * initial);
}
