#include "switchhurdle/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include "csv.hpp"
#include "json.hpp"
#include "switchhurdle/parallel.hpp"

namespace switchhurdle {

using nlohmann::json;

namespace {

void require_same_length(std::span<const double> a, std::span<const double> b, const char* what) {
  if (a.size() != b.size()) throw std::invalid_argument(std::string(what) + ": forecast and actual lengths differ");
  if (a.empty()) throw std::invalid_argument(std::string(what) + ": empty input");
}

double abs_error_sum(std::span<const double> f, std::span<const double> y) {
  double s = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) s += std::abs(y[i] - f[i]);
  return s;
}

double squared_error_sum(std::span<const double> f, std::span<const double> y) {
  double s = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) s += (y[i] - f[i]) * (y[i] - f[i]);
  return s;
}

}  // namespace

std::optional<double> wape(std::span<const double> forecast, std::span<const double> actual) {
  require_same_length(forecast, actual, "wape");
  double denom = 0.0;
  for (double y : actual) denom += std::abs(y);
  if (denom == 0.0) return std::nullopt;
  return 100.0 * abs_error_sum(forecast, actual) / denom;
}

std::optional<double> mase(std::span<const double> forecast, std::span<const double> actual,
                           std::span<const double> in_sample, std::size_t seasonality) {
  require_same_length(forecast, actual, "mase");
  if (seasonality == 0) throw std::invalid_argument("mase: seasonality must be >= 1");
  if (in_sample.size() <= seasonality) return std::nullopt;
  double scale = 0.0;
  for (std::size_t t = seasonality; t < in_sample.size(); ++t) scale += std::abs(in_sample[t] - in_sample[t - seasonality]);
  scale /= static_cast<double>(in_sample.size() - seasonality);
  if (scale == 0.0) return std::nullopt;
  return abs_error_sum(forecast, actual) / static_cast<double>(actual.size()) / scale;
}

double rmse(std::span<const double> forecast, std::span<const double> actual) {
  require_same_length(forecast, actual, "rmse");
  return std::sqrt(squared_error_sum(forecast, actual) / static_cast<double>(actual.size()));
}

std::optional<double> rmsse(std::span<const double> forecast, std::span<const double> actual,
                            std::span<const double> in_sample) {
  require_same_length(forecast, actual, "rmsse");
  std::size_t start = 0;
  while (start < in_sample.size() && in_sample[start] == 0.0) ++start;
  if (in_sample.size() < start + 2) return std::nullopt;
  double scale = 0.0;
  for (std::size_t t = start + 1; t < in_sample.size(); ++t) {
    const double d = in_sample[t] - in_sample[t - 1];
    scale += d * d;
  }
  scale /= static_cast<double>(in_sample.size() - start - 1);
  if (scale == 0.0) return std::nullopt;
  return std::sqrt(squared_error_sum(forecast, actual) / static_cast<double>(actual.size()) / scale);
}

std::vector<double> naive_forecast(std::span<const double> in_sample, std::size_t horizon) {
  if (in_sample.empty()) throw std::invalid_argument("naive_forecast: empty history");
  return std::vector<double>(horizon, in_sample.back());
}

std::vector<double> croston_forecast(std::span<const double> in_sample, std::size_t horizon, double smoothing) {
  if (!(smoothing >= 0.0 && smoothing <= 1.0)) throw std::invalid_argument("croston: smoothing must lie in [0, 1]");
  double size = 0.0, interval = 0.0;
  bool seen = false;
  std::size_t last = 0;
  for (std::size_t t = 0; t < in_sample.size(); ++t) {
    const double z = in_sample[t];
    if (z <= 0.0) continue;
    if (!seen) {
      size = z;
      interval = static_cast<double>(t + 1);
      seen = true;
    } else {
      size += smoothing * (z - size);
      interval += smoothing * (static_cast<double>(t - last) - interval);
    }
    last = t;
  }
  if (!seen) throw std::invalid_argument("croston: history has no positive demand");
  return std::vector<double>(horizon, size / interval);
}

// --- hierarchy ---------------------------------------------------------------

Hierarchy default_hierarchy(const Dataset& data) {
  const auto& a = data.static_attributes;
  auto has = [&](const char* name) { return std::find(a.begin(), a.end(), name) != a.end(); };
  if (has("state_id") && has("store_id") && has("cat_id") && has("dept_id") && has("item_id")) {
    return Hierarchy{{{},
                      {"state_id"},
                      {"store_id"},
                      {"cat_id"},
                      {"dept_id"},
                      {"state_id", "cat_id"},
                      {"state_id", "dept_id"},
                      {"store_id", "cat_id"},
                      {"store_id", "dept_id"},
                      {"item_id"},
                      {"item_id", "state_id"},
                      {"id"}}};
  }
  if (has("cat_id")) return Hierarchy{{{}, {"cat_id"}, {"id"}}};
  return Hierarchy{{{}, {"id"}}};
}

Hierarchy parse_hierarchy(const std::string& json_text) {
  Hierarchy h;
  try {
    const json j = json::parse(json_text);
    for (const auto& level : j.at("levels")) h.levels.push_back(level.get<std::vector<std::string>>());
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("hierarchy config: ") + e.what());
  }
  if (h.levels.empty()) throw std::invalid_argument("hierarchy config: no levels");
  return h;
}

Hierarchy load_hierarchy(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open hierarchy file " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_hierarchy(text);
}

std::string hierarchy_to_json(const Hierarchy& h) { return json{{"levels", h.levels}}.dump(); }

std::vector<HierarchyNode> build_hierarchy(const Dataset& data, std::span<const std::size_t> series,
                                           std::span<const std::size_t> origins, const Hierarchy& hierarchy,
                                           std::size_t weight_window) {
  if (series.size() != origins.size()) throw std::invalid_argument("build_hierarchy: series/origin count mismatch");
  std::vector<double> revenue(series.size(), 0.0);
  for (std::size_t i = 0; i < series.size(); ++i) {
    const SeriesRecord& rec = data.series.at(series[i]);
    const std::size_t end = origins[i];
    const std::size_t begin = end > weight_window ? end - weight_window : 0;
    for (std::size_t k = begin; k < end; ++k) {
      const double price = rec.price.empty() ? 1.0 : rec.price[k];
      revenue[i] += rec.demand[k] * price;
    }
  }
  std::vector<HierarchyNode> nodes;
  for (std::size_t l = 0; l < hierarchy.levels.size(); ++l) {
    std::map<std::string, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < series.size(); ++i) {
      std::string key;
      for (const auto& attr : hierarchy.levels[l]) {
        const SeriesRecord& rec = data.series[series[i]];
        if (attr != "id" && rec.attributes.find(attr) == rec.attributes.end()) {
          throw std::invalid_argument("hierarchy attribute '" + attr + "' not present in the data");
        }
        key += (key.empty() ? "" : "|") + rec.attribute(attr);
      }
      groups[key.empty() ? "Total" : key].push_back(i);
    }
    double level_total = 0.0;
    for (double r : revenue) level_total += r;
    for (auto& [key, members] : groups) {
      HierarchyNode node;
      node.level = l;
      node.key = key;
      double rev = 0.0;
      for (auto m : members) rev += revenue[m];
      node.weight = level_total > 0.0 ? rev / level_total : 1.0 / static_cast<double>(groups.size());
      node.members = std::move(members);
      nodes.push_back(std::move(node));
    }
  }
  return nodes;
}

WrmsseResult wrmsse(const Dataset& data, std::span<const SeriesForecast> forecasts, const Hierarchy& hierarchy,
                    std::size_t weight_window) {
  if (forecasts.empty()) throw std::invalid_argument("wrmsse: no forecasts");
  const std::size_t horizon = forecasts.front().mean.size();
  std::vector<std::size_t> series, origins;
  std::size_t history = forecasts.front().origin;
  for (const auto& f : forecasts) {
    if (f.mean.size() != horizon) throw std::invalid_argument("wrmsse: forecasts differ in horizon");
    series.push_back(f.series);
    origins.push_back(f.origin);
    history = std::min(history, f.origin);
  }
  const auto nodes = build_hierarchy(data, series, origins, hierarchy, weight_window);

  // Aggregated series are right-aligned on their origin so that differing
  // series lengths still sum day-by-day relative to the forecast origin.
  WrmsseResult result;
  result.level_scores.assign(hierarchy.levels.size(), 0.0);
  std::vector<double> level_weight(hierarchy.levels.size(), 0.0);
  for (const auto& node : nodes) {
    std::vector<double> in(history, 0.0), actual(horizon, 0.0), fc(horizon, 0.0);
    for (auto m : node.members) {
      const SeriesForecast& f = forecasts[m];
      const SeriesRecord& rec = data.series.at(f.series);
      if (f.origin + horizon > rec.length()) throw std::invalid_argument("wrmsse: forecast beyond series end");
      for (std::size_t k = 0; k < history; ++k) in[k] += rec.demand[f.origin - history + k];
      for (std::size_t t = 0; t < horizon; ++t) {
        actual[t] += rec.demand[f.origin + t];
        fc[t] += f.mean[t];
      }
    }
    ++result.nodes;
    const auto score = rmsse(fc, actual, in);
    if (!score) {
      ++result.excluded_nodes;
      continue;
    }
    result.level_scores[node.level] += node.weight * *score;
    level_weight[node.level] += node.weight;
  }
  std::size_t levels = 0;
  double total = 0.0;
  for (std::size_t l = 0; l < result.level_scores.size(); ++l) {
    if (level_weight[l] <= 0.0) {
      result.level_scores[l] = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    result.level_scores[l] /= level_weight[l];
    total += result.level_scores[l];
    ++levels;
  }
  if (levels == 0) throw std::invalid_argument("wrmsse: every node has a zero scale");
  result.value = total / static_cast<double>(levels);
  return result;
}

// --- inference -----------------------------------------------------------------

InferenceOutput run_inference(Model& model, const PreparedData& prepared, std::span<const WindowIndex> windows,
                              std::size_t batch_size) {
  if (batch_size == 0) throw std::invalid_argument("run_inference: batch_size must be >= 1");
  const auto& cfg = model.config();
  const std::size_t L = cfg.context_length, T = cfg.horizon, layers = cfg.n_encoder_layers;
  InferenceOutput out;
  out.forecasts.resize(windows.size());
  out.selected.assign(layers, std::vector<std::vector<std::size_t>>(windows.size()));
  const std::size_t n_batches = (windows.size() + batch_size - 1) / batch_size;
  parallel_for(n_batches, [&](std::size_t bi) {
    const std::size_t start = bi * batch_size;
    const std::size_t count = std::min(batch_size, windows.size() - start);
    const auto slice = windows.subspan(start, count);
    const Batch batch = collate(prepared, slice, L, T, /*with_targets=*/false);
    Graph g;
    ForwardOptions opts;
    opts.training = false;
    const ForwardResult fwd = forward(g, model, batch, opts);
    const auto params = hurdle_params(fwd.decoder, count, T);
    const auto means = point_forecast(fwd.decoder, count, T);
    for (std::size_t b = 0; b < count; ++b) {
      SeriesForecast& f = out.forecasts[start + b];
      f.series = slice[b].series;
      f.origin = slice[b].target_start;
      f.mean.assign(means.begin() + static_cast<std::ptrdiff_t>(b * T), means.begin() + static_cast<std::ptrdiff_t>((b + 1) * T));
      f.params.assign(params.begin() + static_cast<std::ptrdiff_t>(b * T), params.begin() + static_cast<std::ptrdiff_t>((b + 1) * T));
      for (std::size_t l = 0; l < layers; ++l) {
        const auto& sel = fwd.encoder.selected[l];
        out.selected[l][start + b].assign(sel.begin() + static_cast<std::ptrdiff_t>(b * L),
                                          sel.begin() + static_cast<std::ptrdiff_t>((b + 1) * L));
      }
    }
  });
  return out;
}

std::vector<std::vector<std::vector<double>>> sample_paths(Model& model, const PreparedData& prepared,
                                                           std::span<const WindowIndex> windows,
                                                           std::size_t n_samples, std::uint64_t seed,
                                                           std::size_t batch_size) {
  if (batch_size == 0) throw std::invalid_argument("sample_paths: batch_size must be >= 1");
  const auto& cfg = model.config();
  const std::size_t L = cfg.context_length, T = cfg.horizon;
  std::vector<std::vector<std::vector<double>>> paths(
      windows.size(), std::vector<std::vector<double>>(n_samples, std::vector<double>(T)));
  const std::size_t n_batches = (windows.size() + batch_size - 1) / batch_size;
  const Rng root(seed);
  parallel_for(n_batches * n_samples, [&](std::size_t job) {
    const std::size_t bi = job / n_samples, s = job % n_samples;
    const std::size_t start = bi * batch_size;
    const std::size_t count = std::min(batch_size, windows.size() - start);
    const Batch batch = collate(prepared, windows.subspan(start, count), L, T, /*with_targets=*/false);
    Rng rng = root.split(s).split(bi);
    Graph g;
    ForwardOptions opts;
    opts.training = false;
    opts.sample_feedback = &rng;
    const ForwardResult fwd = forward(g, model, batch, opts);
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t b = 0; b < count; ++b) paths[start + b][s][t] = fwd.decoder.samples[t * count + b];
    }
  });
  return paths;
}

std::string to_string(Baseline b) { return b == Baseline::kNaive ? "naive" : "croston"; }

Baseline parse_baseline(std::string_view s) {
  if (s == "naive") return Baseline::kNaive;
  if (s == "croston") return Baseline::kCroston;
  throw std::invalid_argument("unknown baseline '" + std::string(s) + "' (expected naive or croston)");
}

BaselineForecasts baseline_forecasts(const Dataset& data, std::span<const WindowIndex> windows, std::size_t horizon,
                                     Baseline method, double croston_smoothing) {
  BaselineForecasts out;
  for (const auto& w : windows) {
    const SeriesRecord& rec = data.series.at(w.series);
    const std::span<const double> history(rec.demand.data(), w.target_start);
    SeriesForecast f;
    f.series = w.series;
    f.origin = w.target_start;
    if (method == Baseline::kNaive) {
      f.mean = naive_forecast(history, horizon);
    } else {
      try {
        f.mean = croston_forecast(history, horizon, croston_smoothing);
      } catch (const std::invalid_argument&) {
        out.skipped.push_back(w.series);
        continue;
      }
    }
    out.forecasts.push_back(std::move(f));
  }
  return out;
}

MetricSet parse_metric_set(std::string_view s) {
  MetricSet m{false, false, false, false};
  std::size_t pos = 0;
  while (pos <= s.size()) {
    const std::size_t comma = std::min(s.find(',', pos), s.size());
    const std::string_view name = s.substr(pos, comma - pos);
    if (name == "wape") m.wape = true;
    else if (name == "mase") m.mase = true;
    else if (name == "rmse") m.rmse = true;
    else if (name == "wrmsse") m.wrmsse = true;
    else if (name == "all") m = MetricSet{true, true, true, true};
    else if (!name.empty()) throw std::invalid_argument("unknown metric '" + std::string(name) + "'");
    pos = comma + 1;
  }
  return m;
}

MetricReport evaluate_forecasts(const Dataset& data, std::span<const SeriesForecast> forecasts,
                                const MetricSet& metrics, const std::optional<Hierarchy>& hierarchy) {
  MetricReport report;
  double abs_err = 0.0, abs_actual = 0.0, sq_err = 0.0, mase_sum = 0.0, nll_sum = 0.0;
  std::size_t points = 0, mase_count = 0, nll_points = 0;
  bool have_params = !forecasts.empty();
  for (const auto& f : forecasts) {
    const SeriesRecord& rec = data.series.at(f.series);
    const std::size_t T = f.mean.size();
    if (f.origin + T > rec.length()) throw std::invalid_argument("forecast for " + rec.id + " runs past its data");
    const std::span<const double> actual(rec.demand.data() + f.origin, T);
    const std::span<const double> history(rec.demand.data(), f.origin);
    SeriesMetrics row;
    row.id = rec.id;
    row.wape = wape(f.mean, actual);
    if (!row.wape) ++report.skipped_wape;
    row.mase = mase(f.mean, actual, history);
    if (!row.mase) ++report.skipped_mase;
    row.rmse = rmse(f.mean, actual);

    abs_err += abs_error_sum(f.mean, actual);
    for (double y : actual) abs_actual += std::abs(y);
    sq_err += squared_error_sum(f.mean, actual);
    points += T;
    if (row.mase) {
      mase_sum += *row.mase;
      ++mase_count;
    }
    if (f.params.size() == T) {
      for (std::size_t t = 0; t < T; ++t) nll_sum -= hurdle_log_pmf(static_cast<std::int64_t>(actual[t]), f.params[t]);
      nll_points += T;
    } else {
      have_params = false;
    }
    if (!metrics.wape) row.wape.reset();
    if (!metrics.mase) row.mase.reset();
    report.rows.push_back(std::move(row));
  }
  report.evaluated = report.rows.size();
  if (metrics.wape && abs_actual > 0.0) report.wape = 100.0 * abs_err / abs_actual;
  if (metrics.mase && mase_count > 0) report.mase = mase_sum / static_cast<double>(mase_count);
  if (points > 0) report.rmse = std::sqrt(sq_err / static_cast<double>(points));
  if (have_params && nll_points > 0) report.nll = nll_sum / static_cast<double>(nll_points);
  if (metrics.wrmsse) {
    if (!hierarchy) throw std::invalid_argument("wrmsse requested without a hierarchy");
    report.wrmsse = wrmsse(data, forecasts, *hierarchy);
  }
  return report;
}

double truth_nll(const Dataset& data, std::span<const SeriesForecast> forecasts) {
  if (!data.has_truth()) throw std::invalid_argument("truth_nll: dataset has no generating parameters");
  double total = 0.0;
  std::size_t points = 0;
  for (const auto& f : forecasts) {
    const SeriesRecord& rec = data.series.at(f.series);
    for (std::size_t t = 0; t < f.mean.size(); ++t) {
      const std::size_t day = f.origin + t;
      total -= hurdle_log_pmf(static_cast<std::int64_t>(rec.demand.at(day)), data.truth.at(f.series).at(day));
      ++points;
    }
  }
  if (points == 0) throw std::invalid_argument("truth_nll: no forecast steps");
  return total / static_cast<double>(points);
}

void write_metrics_csv(const MetricReport& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  auto opt = [](const std::optional<double>& v) { return v ? csv::format_fixed(*v, 10) : std::string("NA"); };
  out << "series_id,wape,mase,rmse\n";
  for (const auto& r : report.rows) {
    out << r.id << ',' << opt(r.wape) << ',' << opt(r.mase) << ',' << csv::format_fixed(r.rmse, 10) << '\n';
  }
}

std::string metrics_summary_json(const MetricReport& report) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  json j = {{"evaluated", report.evaluated},
            {"skipped_wape", report.skipped_wape},
            {"skipped_mase", report.skipped_mase},
            {"skipped_forecast", report.skipped_forecast},
            {"wape", opt(report.wape)},
            {"mase", opt(report.mase)},
            {"rmse", report.rmse},
            {"nll_per_step", opt(report.nll)}};
  if (report.wrmsse) {
    json levels = json::array();
    for (double v : report.wrmsse->level_scores) levels.push_back(std::isnan(v) ? json(nullptr) : json(v));
    j["wrmsse"] = {{"value", report.wrmsse->value},
                   {"levels", levels},
                   {"nodes", report.wrmsse->nodes},
                   {"excluded_nodes", report.wrmsse->excluded_nodes}};
  }
  return j.dump(2);
}

}  // namespace switchhurdle
