#include "switchhurdle/routing.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "csv.hpp"
#include "switchhurdle/evaluation.hpp"

namespace switchhurdle {

const char* to_string(Regime r) {
  switch (r) {
    case Regime::kZero:
      return "Zero";
    case Regime::kLow:
      return "Low";
    case Regime::kNormal:
      return "Normal";
    case Regime::kSpike:
      return "Spike";
  }
  return "?";
}

std::vector<Regime> label_regimes(std::span<const double> demand, double mean, double std,
                                  const RegimeThresholds& thresholds) {
  const double scale = std::max(std, 1e-8);
  std::vector<Regime> labels;
  labels.reserve(demand.size());
  for (double y : demand) {
    if (y == 0.0) {
      labels.push_back(Regime::kZero);
      continue;
    }
    const double z = (y - mean) / scale;
    if (z > thresholds.spike) labels.push_back(Regime::kSpike);
    else if (z < thresholds.low) labels.push_back(Regime::kLow);
    else labels.push_back(Regime::kNormal);
  }
  return labels;
}

std::vector<Regime> label_regimes(std::span<const double> demand, const RegimeThresholds& thresholds) {
  if (demand.empty()) return {};
  double mean = 0.0;
  for (double y : demand) mean += y;
  mean /= static_cast<double>(demand.size());
  double var = 0.0;
  for (double y : demand) var += (y - mean) * (y - mean);
  return label_regimes(demand, mean, std::sqrt(var / static_cast<double>(demand.size())), thresholds);
}

std::size_t RoutingStats::tokens(std::size_t layer) const {
  std::size_t n = 0;
  for (auto c : overall.at(layer)) n += c;
  return n;
}

double RoutingStats::overall_percent(std::size_t layer, std::size_t expert) const {
  const std::size_t n = tokens(layer);
  return n == 0 ? 0.0 : 100.0 * static_cast<double>(overall[layer].at(expert)) / static_cast<double>(n);
}

double RoutingStats::conditional_percent(std::size_t layer, Regime regime, std::size_t expert) const {
  const auto& row = conditional.at(layer)[static_cast<std::size_t>(regime)];
  std::size_t n = 0;
  for (auto c : row) n += c;
  return n == 0 ? 0.0 : 100.0 * static_cast<double>(row.at(expert)) / static_cast<double>(n);
}

RoutingStats collect_routing(Model& model, const PreparedData& prepared, std::span<const WindowIndex> windows,
                             const RegimeThresholds& thresholds, std::size_t batch_size) {
  const auto& cfg = model.config();
  if (cfg.gate_mode != GateMode::kSteTop1) {
    throw std::invalid_argument("routing analysis needs an ste_top1 model; soft gating has no discrete selection");
  }
  RoutingStats stats;
  stats.layers = cfg.n_encoder_layers;
  stats.experts = cfg.n_experts;
  stats.thresholds = thresholds;
  stats.overall.assign(stats.layers, std::vector<std::size_t>(stats.experts, 0));
  stats.conditional.resize(stats.layers);
  for (auto& per_regime : stats.conditional) {
    for (auto& row : per_regime) row.assign(stats.experts, 0);
  }

  // Regimes come from each series' full history.
  std::vector<std::vector<Regime>> regimes(prepared.data->series.size());
  for (const auto& w : windows) {
    auto& labels = regimes.at(w.series);
    if (labels.empty()) labels = label_regimes(prepared.data->series[w.series].demand, thresholds);
  }

  const InferenceOutput inf = run_inference(model, prepared, windows, batch_size);
  for (std::size_t l = 0; l < stats.layers; ++l) {
    for (std::size_t w = 0; w < windows.size(); ++w) {
      const auto& sel = inf.selected[l][w];
      for (std::size_t pos = 0; pos < sel.size(); ++pos) {
        const Regime r = regimes[windows[w].series][windows[w].context_start + pos];
        ++stats.overall[l][sel[pos]];
        ++stats.conditional[l][static_cast<std::size_t>(r)][sel[pos]];
      }
    }
  }
  return stats;
}

std::string routing_csv(const RoutingStats& stats, bool overall) {
  std::ostringstream out;
  out << "# regimes: Zero (y == 0), Spike (z > " << csv::format_fixed(stats.thresholds.spike, 4) << "), Low (z < "
      << csv::format_fixed(stats.thresholds.low, 4) << "), Normal (otherwise)\n";
  out << "layer,regime,expert,tokens,percentage\n";
  for (std::size_t l = 0; l < stats.layers; ++l) {
    if (overall) {
      for (std::size_t e = 0; e < stats.experts; ++e) {
        out << l << ",overall," << e << ',' << stats.overall[l][e] << ','
            << csv::format_fixed(stats.overall_percent(l, e), 6) << '\n';
      }
      continue;
    }
    for (std::size_t r = 0; r < kRegimes; ++r) {
      const Regime regime = static_cast<Regime>(r);
      for (std::size_t e = 0; e < stats.experts; ++e) {
        out << l << ',' << to_string(regime) << ',' << e << ',' << stats.conditional[l][r][e] << ','
            << csv::format_fixed(stats.conditional_percent(l, regime, e), 6) << '\n';
      }
    }
  }
  return out.str();
}

void export_routing_csv(const RoutingStats& stats, const std::filesystem::path& path, bool overall) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << routing_csv(stats, overall);
}

}  // namespace switchhurdle
