// forecaster: data generation, training, forecasting, evaluation and routing
// analysis for the Switch-Hurdle Transformer.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "csv.hpp"
#include "json.hpp"
#include "switchhurdle/config.hpp"
#include "switchhurdle/data.hpp"
#include "switchhurdle/evaluation.hpp"
#include "switchhurdle/routing.hpp"
#include "switchhurdle/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace switchhurdle;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumerical = 3;

struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create output directory " + dir.string() + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

void write_echo(const fs::path& out_dir, const json& j) { write_text(out_dir / "config.echo", j.dump(2) + "\n"); }

std::vector<WindowIndex> origin_windows(const Split& split, const std::string& origin) {
  if (origin == "test") return split.test;
  if (origin == "validation") return split.validation;
  throw UsageError("--origin must be test or validation");
}

std::vector<double> parse_quantiles(const std::string& text) {
  std::vector<double> qs;
  for (const auto& field : csv::split(text)) {
    try {
      const double q = std::stod(field);
      if (!(q > 0.0 && q < 1.0)) throw UsageError("quantile levels must lie in (0, 1)");
      qs.push_back(q);
    } catch (const std::logic_error&) {
      throw UsageError("bad quantile level '" + field + "'");
    }
  }
  if (qs.empty()) throw UsageError("no quantile levels given");
  std::sort(qs.begin(), qs.end());
  return qs;
}

// --- generate-data ----------------------------------------------------------

struct GenerateArgs {
  std::string spec;
  std::string out;
  std::optional<std::uint64_t> seed;
};

int cmd_generate_data(const GenerateArgs& a) {
  SyntheticSpec spec;
  if (!a.spec.empty()) {
    std::ifstream in(a.spec);
    if (!in) throw UsageError("cannot open spec file " + a.spec);
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw UsageError("spec file: " + std::string(e.what()));
    }
    spec = synthetic_spec_from_json(j);
  }
  if (a.seed) spec.seed = *a.seed;
  const Dataset data = generate_synthetic(spec);
  save_synthetic(data, spec, a.out);
  write_echo(a.out, {{"command", "generate-data"}, {"spec", to_json(spec)}});
  std::cerr << "wrote " << data.series.size() << " series x " << spec.length << " days to " << a.out << "\n";
  return kExitOk;
}

// --- train -------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string data;
  std::string objective;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> batch_size;
  std::optional<double> learning_rate;
  std::optional<double> lambda_aux;
  std::optional<std::size_t> limit;
  std::optional<std::size_t> d_model;
  std::optional<std::size_t> n_experts;
  std::optional<std::size_t> n_layers;
  std::string gate_mode;
  std::string expert_activation;
};

json epoch_json(const EpochRecord& r, const TrainConfig& tc) {
  json j = {{"epoch", r.epoch}, {"objective", r.objective}, {"nll", r.nll}, {"balance", r.balance}};
  if (tc.objective == Objective::kProbabilistic) {
    j["loss"] = "nll + lambda_aux * balance";
    j["lambda_aux"] = tc.lambda_aux;
  } else {
    j["loss"] = "mae + lambda_decay * (nll + balance)";
    j["mae"] = r.mae;
    j["lambda_decay"] = r.lambda_decay;
  }
  j["tf_ratio"] = r.tf_ratio;
  j["grad_norm"] = r.grad_norm;
  j["utilization"] = r.utilization;
  j["val_objective"] = r.val_objective;
  j["val_nll"] = r.val_nll;
  j["val_mae"] = r.val_mae;
  j["best"] = r.best;
  return j;
}

int cmd_train(const TrainArgs& a) {
  RunConfig rc = a.config.empty() ? RunConfig{} : load_run_config(a.config);
  if (!a.data.empty()) rc.data.path = a.data;
  if (!a.objective.empty()) rc.train.objective = parse_objective(a.objective);
  if (a.seed) rc.seed = *a.seed;
  if (a.epochs) rc.train.epochs = *a.epochs;
  if (a.batch_size) rc.train.batch_size = *a.batch_size;
  if (a.learning_rate) rc.train.learning_rate = *a.learning_rate;
  if (a.lambda_aux) rc.train.lambda_aux = *a.lambda_aux;
  if (a.limit) rc.data.limit = *a.limit;
  if (a.d_model) rc.model.d_model = *a.d_model;
  if (a.n_experts) rc.model.n_experts = *a.n_experts;
  if (a.n_layers) rc.model.n_encoder_layers = *a.n_layers;
  if (!a.gate_mode.empty()) rc.model.gate_mode = parse_gate_mode(a.gate_mode);
  if (!a.expert_activation.empty()) rc.model.expert_activation = parse_expert_activation(a.expert_activation);
  rc.train.seed = rc.seed;
  if (rc.data.path.empty()) throw UsageError("no dataset: pass --data or set data.path in the config");
  rc.train.validate();

  const Dataset data = load_dataset(rc.data.path, rc.data.limit);
  const PreparedData prepared = prepare(data, CategoryEncoder::fit(data));
  rc.model = model_config_for(prepared, rc.model);
  rc.model.validate();

  const fs::path out(a.out);
  ensure_dir(out);
  write_echo(out, to_json(rc));

  const std::size_t L = rc.model.context_length, T = rc.model.horizon;
  const Split split = make_split(data, L, T, rc.train.stride);
  if (split.train.skipped_series > 0) {
    std::cerr << "warning: " << split.train.skipped_series << " series too short for training windows\n";
  }
  Model model(rc.model, rc.init_seed());
  std::cerr << "training " << to_string(rc.train.objective) << " objective: " << split.train.windows.size()
            << " windows, " << model.parameter_count() << " parameters\n";

  std::ofstream log(out / "epochs.log", std::ios::binary);
  if (!log) throw DataError("cannot write epochs.log");
  const json meta = {{"objective", to_string(rc.train.objective)}, {"seed", rc.seed}, {"data", rc.data.path}};
  FitCallbacks cb;
  cb.on_epoch = [&](const EpochRecord& r) {
    log << epoch_json(r, rc.train).dump() << '\n';
    log.flush();
    std::cerr << "epoch " << r.epoch << " objective " << r.objective << " val " << r.val_selection
              << (r.best ? " *" : "") << '\n';
  };
  cb.on_best = [&](const Model& m, const EpochRecord&) { save_checkpoint(out / "checkpoint.bin", m, prepared.encoder, meta); };
  const TrainReport report = fit(model, prepared, split, rc.train, cb);
  if (report.history.empty() && !report.diverged) save_checkpoint(out / "checkpoint.bin", model, prepared.encoder, meta);
  if (report.diverged) {
    std::cerr << "error: training diverged: " << report.divergence << "\n";
    if (!report.history.empty()) std::cerr << "last good checkpoint kept from epoch " << report.best_epoch << "\n";
    return kExitNumerical;
  }

  const std::vector<WindowIndex>& val = split.validation.empty() ? split.test : split.validation;
  const InferenceOutput inf = run_inference(model, prepared, val);
  const MetricReport mr = evaluate_forecasts(data, inf.forecasts, MetricSet{});
  write_metrics_csv(mr, out / "metrics.csv");
  json summary = json::parse(metrics_summary_json(mr));
  summary["split"] = "validation";
  summary["best_epoch"] = report.best_epoch;
  summary["epochs_run"] = report.history.size();
  write_text(out / "metrics_summary.json", summary.dump(2) + "\n");
  return kExitOk;
}

// --- forecast ------------------------------------------------------------------

struct ForecastArgs {
  std::string checkpoint;
  std::string data;
  std::string mode = "point";
  std::string out;
  std::string quantiles = "0.1,0.5,0.9";
  std::size_t samples = 100;
  std::uint64_t seed = 1;
  std::string origin = "test";
  std::optional<std::size_t> limit;
};

int cmd_forecast(const ForecastArgs& a) {
  if (a.mode != "point" && a.mode != "quantiles" && a.mode != "samples") {
    throw UsageError("--mode must be point, quantiles or samples");
  }
  const std::vector<double> qs = a.mode == "quantiles" ? parse_quantiles(a.quantiles) : std::vector<double>{};
  if (a.mode == "samples" && a.samples == 0) throw UsageError("--samples must be >= 1");
  LoadedCheckpoint ck = load_checkpoint(a.checkpoint);
  const Dataset data = load_dataset(a.data, a.limit);
  if (data.static_attributes != ck.encoder.attributes()) {
    throw DataError("dataset static attributes do not match the checkpoint's");
  }
  const PreparedData prepared = prepare(data, ck.encoder);
  const auto& cfg = ck.model.config();
  if (cfg.n_future_covariates != covariate_count()) throw DataError("checkpoint covariate layout differs from this build");
  const Split split = make_split(data, cfg.context_length, cfg.horizon, cfg.horizon);
  const auto windows = origin_windows(split, a.origin);
  if (windows.empty()) throw DataError("no series long enough for context + horizon");

  const fs::path out(a.out);
  ensure_dir(out);
  write_echo(out, {{"command", "forecast"},
                   {"checkpoint", a.checkpoint},
                   {"data", a.data},
                   {"mode", a.mode},
                   {"quantiles", qs},
                   {"samples", a.mode == "samples" ? a.samples : 0},
                   {"seed", a.seed},
                   {"origin", a.origin},
                   {"model", to_json(cfg)}});

  std::ostringstream csv_out;
  const InferenceOutput inf = run_inference(ck.model, prepared, windows);
  if (a.mode == "samples") {
    const auto paths = sample_paths(ck.model, prepared, windows, a.samples, a.seed);
    csv_out << "series_id,origin,sample,step,value\n";
    for (std::size_t w = 0; w < windows.size(); ++w) {
      const std::string& id = data.series[windows[w].series].id;
      for (std::size_t s = 0; s < a.samples; ++s) {
        for (std::size_t t = 0; t < cfg.horizon; ++t) {
          csv_out << id << ',' << windows[w].target_start << ',' << s << ',' << t + 1 << ','
                  << static_cast<long long>(paths[w][s][t]) << '\n';
        }
      }
    }
  } else {
    csv_out << "series_id,origin,step,mean";
    for (double q : qs) csv_out << ",q" << csv::format_fixed(q, 3);
    csv_out << '\n';
    for (const auto& f : inf.forecasts) {
      for (std::size_t t = 0; t < f.mean.size(); ++t) {
        csv_out << data.series[f.series].id << ',' << f.origin << ',' << t + 1 << ',' << csv::format_fixed(f.mean[t], 10);
        for (double q : qs) csv_out << ',' << hurdle_quantile(f.params[t], q);
        csv_out << '\n';
      }
    }
  }
  write_text(out / "forecasts.csv", csv_out.str());
  return kExitOk;
}

// --- evaluate ------------------------------------------------------------------

struct EvaluateArgs {
  std::string checkpoint;
  std::string forecasts;
  std::string data;
  std::string metrics = "wape,mase,rmse";
  std::string hierarchy;
  std::vector<std::string> baselines;
  double croston_alpha = 0.1;
  std::string out;
  std::string origin = "test";
  std::optional<std::size_t> limit;
  std::size_t horizon = 28;
  std::size_t context = 56;
};

std::vector<SeriesForecast> read_forecasts_csv(const fs::path& path, const Dataset& data) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open forecasts " + path.string());
  std::string line;
  if (!csv::read_line(in, line)) throw DataError("forecasts file is empty");
  const auto header = csv::split(line);
  auto col = [&](const char* name) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw DataError("forecasts file lacks column '" + std::string(name) + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t c_id = col("series_id"), c_origin = col("origin"), c_step = col("step"), c_mean = col("mean");
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < data.series.size(); ++i) index[data.series[i].id] = i;
  std::vector<SeriesForecast> out;
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> slot;
  std::size_t line_no = 1;
  while (csv::read_line(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = csv::split(line);
    if (f.size() != header.size()) throw DataError("forecasts line " + std::to_string(line_no) + ": field count");
    auto it = index.find(f[c_id]);
    if (it == index.end()) throw DataError("forecasts reference unknown series " + f[c_id]);
    std::size_t origin = 0, step = 0;
    double mean = 0.0;
    try {
      origin = std::stoul(f[c_origin]);
      step = std::stoul(f[c_step]);
      mean = std::stod(f[c_mean]);
    } catch (const std::logic_error&) {
      throw DataError("forecasts line " + std::to_string(line_no) + ": bad number");
    }
    auto key = std::make_pair(it->second, origin);
    auto [pos, inserted] = slot.try_emplace(key, out.size());
    if (inserted) out.push_back(SeriesForecast{it->second, origin, {}, {}});
    auto& fc = out[pos->second];
    if (step != fc.mean.size() + 1) throw DataError("forecasts for " + f[c_id] + " are not in step order");
    fc.mean.push_back(mean);
  }
  return out;
}

int cmd_evaluate(const EvaluateArgs& a) {
  if (a.checkpoint.empty() && a.forecasts.empty() && a.baselines.empty()) {
    throw UsageError("evaluate needs --checkpoint, --forecasts or --baseline");
  }
  if (!a.checkpoint.empty() && !a.forecasts.empty()) throw UsageError("pass either --checkpoint or --forecasts, not both");
  const MetricSet metrics = parse_metric_set(a.metrics);
  const Dataset data = load_dataset(a.data, a.limit);
  std::optional<Hierarchy> hierarchy;
  if (!a.hierarchy.empty()) {
    hierarchy = load_hierarchy(a.hierarchy);
  } else if (metrics.wrmsse) {
    if (data.source != "m5") {
      throw UsageError("wrmsse on non-M5 data needs --hierarchy <file>, e.g. {\"levels\": [[], [\"cat_id\"], [\"id\"]]}");
    }
    hierarchy = default_hierarchy(data);
  }

  std::optional<LoadedCheckpoint> ck;
  std::size_t L = a.context, T = a.horizon;
  if (!a.checkpoint.empty()) {
    ck.emplace(load_checkpoint(a.checkpoint));
    L = ck->model.config().context_length;
    T = ck->model.config().horizon;
  }
  const Split split = make_split(data, L, T, T);
  const auto windows = origin_windows(split, a.origin);
  if (windows.empty()) throw DataError("no series long enough for context + horizon");

  const fs::path out(a.out);
  ensure_dir(out);
  json echo = {{"command", "evaluate"},
               {"checkpoint", a.checkpoint},
               {"forecasts", a.forecasts},
               {"data", a.data},
               {"metrics", a.metrics},
               {"hierarchy", hierarchy ? json::parse(hierarchy_to_json(*hierarchy)) : json(nullptr)},
               {"baselines", a.baselines},
               {"croston_alpha", a.croston_alpha},
               {"origin", a.origin},
               {"context_length", L},
               {"horizon", T}};
  write_echo(out, echo);

  json summary = json::object();
  bool primary_written = false;
  auto report = [&](const std::string& name, const std::vector<SeriesForecast>& fc, std::size_t skipped) {
    MetricReport mr = evaluate_forecasts(data, fc, metrics, hierarchy);
    mr.skipped_forecast = skipped;
    const fs::path file = primary_written ? out / ("metrics_" + name + ".csv") : out / "metrics.csv";
    write_metrics_csv(mr, file);
    primary_written = true;
    summary[name] = json::parse(metrics_summary_json(mr));
    summary[name]["file"] = file.filename().string();
    std::cerr << name << ": WAPE " << (mr.wape ? csv::format_fixed(*mr.wape, 3) : "NA") << "\n";
  };

  if (ck) {
    const PreparedData prepared = prepare(data, ck->encoder);
    report("model", run_inference(ck->model, prepared, windows).forecasts, 0);
  } else if (!a.forecasts.empty()) {
    report("forecasts", read_forecasts_csv(a.forecasts, data), 0);
  }
  for (const auto& name : a.baselines) {
    const BaselineForecasts bf = baseline_forecasts(data, windows, T, parse_baseline(name), a.croston_alpha);
    report(name, bf.forecasts, bf.skipped.size());
  }
  summary["config"] = echo;
  write_text(out / "metrics_summary.json", summary.dump(2) + "\n");
  return kExitOk;
}

// --- analyze-routing -----------------------------------------------------------

struct RoutingArgs {
  std::string checkpoint;
  std::string data;
  std::string out;
  double spike = 2.0;
  double low = -0.5;
  std::string origin = "validation";
  std::optional<std::size_t> limit;
};

int cmd_analyze_routing(const RoutingArgs& a) {
  LoadedCheckpoint ck = load_checkpoint(a.checkpoint);
  if (ck.model.config().gate_mode != GateMode::kSteTop1) {
    throw UsageError("checkpoint uses soft gating; routing analysis needs an ste_top1 model");
  }
  const Dataset data = load_dataset(a.data, a.limit);
  const PreparedData prepared = prepare(data, ck.encoder);
  const auto& cfg = ck.model.config();
  const Split split = make_split(data, cfg.context_length, cfg.horizon, cfg.horizon);
  const auto windows = origin_windows(split, a.origin);
  if (windows.empty()) throw DataError("no series long enough for context + 2 * horizon");

  const fs::path out(a.out);
  ensure_dir(out);
  write_echo(out, {{"command", "analyze-routing"},
                   {"checkpoint", a.checkpoint},
                   {"data", a.data},
                   {"spike_z", a.spike},
                   {"low_z", a.low},
                   {"origin", a.origin}});
  const RoutingStats stats = collect_routing(ck.model, prepared, windows, RegimeThresholds{a.spike, a.low});
  export_routing_csv(stats, out / "routing_overall.csv", true);
  export_routing_csv(stats, out / "routing_conditional.csv", false);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Switch-Hurdle Transformer forecaster"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate-data", "Write a synthetic intermittent-demand dataset");
  g->add_option("--spec", gen.spec, "JSON file with generator settings");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--seed", gen.seed, "Override the generator seed");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model");
  t->add_option("--config", tr.config, "JSON run config");
  t->add_option("--data", tr.data, "Dataset directory (synthetic or M5)");
  t->add_option("--objective", tr.objective, "prob or hybrid");
  t->add_option("--out", tr.out, "Output directory")->required();
  t->add_option("--seed", tr.seed, "Root seed");
  t->add_option("--epochs", tr.epochs);
  t->add_option("--batch-size", tr.batch_size);
  t->add_option("--lr", tr.learning_rate);
  t->add_option("--lambda-aux", tr.lambda_aux);
  t->add_option("--limit", tr.limit, "Use only the first K series");
  t->add_option("--d-model", tr.d_model);
  t->add_option("--experts", tr.n_experts);
  t->add_option("--layers", tr.n_layers);
  t->add_option("--gate-mode", tr.gate_mode, "ste_top1 or soft");
  t->add_option("--expert-activation", tr.expert_activation, "swiglu or gelu");

  ForecastArgs fc;
  auto* f = app.add_subcommand("forecast", "Forecast from a checkpoint");
  f->add_option("--checkpoint", fc.checkpoint)->required();
  f->add_option("--data", fc.data)->required();
  f->add_option("--mode", fc.mode, "point, quantiles or samples");
  f->add_option("--out", fc.out)->required();
  f->add_option("--quantiles", fc.quantiles, "Comma-separated levels");
  f->add_option("--samples", fc.samples, "Sample paths per series");
  f->add_option("--seed", fc.seed);
  f->add_option("--origin", fc.origin, "test or validation");
  f->add_option("--limit", fc.limit);

  EvaluateArgs ev;
  auto* e = app.add_subcommand("evaluate", "Compute forecast metrics");
  e->add_option("--checkpoint", ev.checkpoint);
  e->add_option("--forecasts", ev.forecasts, "forecasts.csv from the forecast command");
  e->add_option("--data", ev.data)->required();
  e->add_option("--metrics", ev.metrics, "Comma-separated: wape,mase,rmse,wrmsse");
  e->add_option("--hierarchy", ev.hierarchy, "JSON hierarchy for wrmsse");
  e->add_option("--baseline", ev.baselines, "naive and/or croston")->take_all();
  e->add_option("--croston-alpha", ev.croston_alpha);
  e->add_option("--out", ev.out)->required();
  e->add_option("--origin", ev.origin, "test or validation");
  e->add_option("--limit", ev.limit);
  e->add_option("--horizon", ev.horizon, "Horizon when no checkpoint is given");
  e->add_option("--context", ev.context, "Context length when no checkpoint is given");

  RoutingArgs ra;
  auto* r = app.add_subcommand("analyze-routing", "Expert utilization overall and by demand regime");
  r->add_option("--checkpoint", ra.checkpoint)->required();
  r->add_option("--data", ra.data)->required();
  r->add_option("--out", ra.out)->required();
  r->add_option("--spike-z", ra.spike);
  r->add_option("--low-z", ra.low);
  r->add_option("--origin", ra.origin, "validation or test");
  r->add_option("--limit", ra.limit);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*g) return cmd_generate_data(gen);
    if (*t) return cmd_train(tr);
    if (*f) return cmd_forecast(fc);
    if (*e) return cmd_evaluate(ev);
    if (*r) return cmd_analyze_routing(ra);
  } catch (const NumericalError& err) {
    std::cerr << "numerical error: " << err.what() << "\n";
    return kExitNumerical;
  } catch (const DataError& err) {
    std::cerr << "data error: " << err.what() << "\n";
    return kExitData;
  } catch (const std::domain_error& err) {
    std::cerr << "numerical error: " << err.what() << "\n";
    return kExitNumerical;
  } catch (const std::invalid_argument& err) {
    std::cerr << "usage error: " << err.what() << "\n";
    return kExitUsage;
  } catch (const std::out_of_range& err) {
    std::cerr << "data error: " << err.what() << "\n";
    return kExitData;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
