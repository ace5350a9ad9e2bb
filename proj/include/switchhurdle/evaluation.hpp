#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "switchhurdle/data.hpp"
#include "switchhurdle/hurdle.hpp"
#include "switchhurdle/model.hpp"

namespace switchhurdle {

// --- point metrics ---------------------------------------------------------
// std::nullopt marks an undefined metric (zero denominator).

/// 100 * sum|y - f| / sum|y|
std::optional<double> wape(std::span<const double> forecast, std::span<const double> actual);
/// mean|y - f| / mean_{t >= m} |x_t - x_{t-m}| over the in-sample series x.
std::optional<double> mase(std::span<const double> forecast, std::span<const double> actual,
                           std::span<const double> in_sample, std::size_t seasonality = 1);
double rmse(std::span<const double> forecast, std::span<const double> actual);
/// sqrt(mean (y - f)^2 / mean squared first difference of the in-sample
/// series, counted from its first nonzero value).
std::optional<double> rmsse(std::span<const double> forecast, std::span<const double> actual,
                            std::span<const double> in_sample);

// --- baselines -------------------------------------------------------------

/// Last observed value repeated.
std::vector<double> naive_forecast(std::span<const double> in_sample, std::size_t horizon);
/// Croston's method without bias correction. Throws std::invalid_argument
/// when the history holds no positive demand.
std::vector<double> croston_forecast(std::span<const double> in_sample, std::size_t horizon, double smoothing = 0.1);

// --- hierarchy -------------------------------------------------------------

/// Each level groups series by the listed attributes; an empty list is the
/// grand total and "id" is the series itself.
struct Hierarchy {
  std::vector<std::vector<std::string>> levels;
  bool operator==(const Hierarchy&) const = default;
};

/// The 12 M5 levels when M5 attributes are present, else total / category / series.
Hierarchy default_hierarchy(const Dataset& data);
/// {"levels": [[], ["cat_id"], ["id"]]}
Hierarchy load_hierarchy(const std::filesystem::path& path);
Hierarchy parse_hierarchy(const std::string& json_text);
std::string hierarchy_to_json(const Hierarchy& h);

struct HierarchyNode {
  std::size_t level = 0;
  std::string key;
  std::vector<std::size_t> members;  // positions into the evaluated series list
  double weight = 0.0;
};

/// Nodes of every level with revenue weights (demand * price, or demand when
/// no price is known) over the last `weight_window` in-sample days. Within a
/// level the weights sum to 1.
std::vector<HierarchyNode> build_hierarchy(const Dataset& data, std::span<const std::size_t> series,
                                           std::span<const std::size_t> origins, const Hierarchy& hierarchy,
                                           std::size_t weight_window = 28);

struct WrmsseResult {
  double value = 0.0;
  std::vector<double> level_scores;
  std::size_t nodes = 0;
  std::size_t excluded_nodes = 0;
};

// --- forecasts and reports ---------------------------------------------------

/// Forecast for one series at one origin. `params` is empty for baselines.
struct SeriesForecast {
  std::size_t series = 0;
  std::size_t origin = 0;  // first forecast day
  std::vector<double> mean;
  std::vector<HurdleParams> params;
};

WrmsseResult wrmsse(const Dataset& data, std::span<const SeriesForecast> forecasts, const Hierarchy& hierarchy,
                    std::size_t weight_window = 28);

/// Per-window model output from an inference-mode, free-running forward pass.
struct InferenceOutput {
  std::vector<SeriesForecast> forecasts;
  /// [layer][window][context position] argmax expert.
  std::vector<std::vector<std::vector<std::size_t>>> selected;
};

InferenceOutput run_inference(Model& model, const PreparedData& prepared, std::span<const WindowIndex> windows,
                              std::size_t batch_size = 64);

/// Ancestral sample paths, [window][sample][step]. Path s of batch k uses
/// the stream Rng(seed).split(s).split(k), so results do not depend on threading.
std::vector<std::vector<std::vector<double>>> sample_paths(Model& model, const PreparedData& prepared,
                                                           std::span<const WindowIndex> windows,
                                                           std::size_t n_samples, std::uint64_t seed,
                                                           std::size_t batch_size = 64);

enum class Baseline { kNaive, kCroston };
std::string to_string(Baseline b);
Baseline parse_baseline(std::string_view s);

/// Baseline forecasts at the given origins. Series whose Croston history has
/// no demand are returned in `skipped`.
struct BaselineForecasts {
  std::vector<SeriesForecast> forecasts;
  std::vector<std::size_t> skipped;
};
BaselineForecasts baseline_forecasts(const Dataset& data, std::span<const WindowIndex> windows, std::size_t horizon,
                                     Baseline method, double croston_smoothing = 0.1);

struct MetricSet {
  bool wape = true;
  bool mase = true;
  bool rmse = true;
  bool wrmsse = false;
};
/// Comma-separated subset of wape,mase,rmse,wrmsse.
MetricSet parse_metric_set(std::string_view s);

struct SeriesMetrics {
  std::string id;
  std::optional<double> wape;
  std::optional<double> mase;
  double rmse = 0.0;
};

struct MetricReport {
  std::vector<SeriesMetrics> rows;
  /// Pooled over all series: 100 * sum|e| / sum|y|.
  std::optional<double> wape;
  /// Mean of the defined per-series values.
  std::optional<double> mase;
  /// Root of the pooled mean squared error.
  double rmse = 0.0;
  std::optional<WrmsseResult> wrmsse;
  /// Mean per-step hurdle NLL, when forecasts carry distributions.
  std::optional<double> nll;
  std::size_t evaluated = 0;
  std::size_t skipped_wape = 0;
  std::size_t skipped_mase = 0;
  std::size_t skipped_forecast = 0;
};

MetricReport evaluate_forecasts(const Dataset& data, std::span<const SeriesForecast> forecasts,
                                const MetricSet& metrics, const std::optional<Hierarchy>& hierarchy = std::nullopt);

/// Mean per-step NLL of the generating parameters at the forecast origins.
double truth_nll(const Dataset& data, std::span<const SeriesForecast> forecasts);

/// series_id,wape,mase,rmse (NA for undefined values).
void write_metrics_csv(const MetricReport& report, const std::filesystem::path& path);
std::string metrics_summary_json(const MetricReport& report);

}  // namespace switchhurdle
