#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "switchhurdle/data.hpp"
#include "switchhurdle/model.hpp"

namespace switchhurdle {

enum class Regime { kZero = 0, kLow = 1, kNormal = 2, kSpike = 3 };
inline constexpr std::size_t kRegimes = 4;
const char* to_string(Regime r);

struct RegimeThresholds {
  double spike = 2.0;  // z > spike
  double low = -0.5;   // z < low
};

/// Zero iff y == 0; otherwise by z = (y - mean) / max(std, 1e-8).
std::vector<Regime> label_regimes(std::span<const double> demand, double mean, double std,
                                  const RegimeThresholds& thresholds = {});
/// Labels using the series' own population mean and standard deviation.
std::vector<Regime> label_regimes(std::span<const double> demand, const RegimeThresholds& thresholds = {});

struct RoutingStats {
  std::size_t layers = 0;
  std::size_t experts = 0;
  RegimeThresholds thresholds;
  /// [layer][expert] token counts.
  std::vector<std::vector<std::size_t>> overall;
  /// [layer][regime][expert] token counts.
  std::vector<std::array<std::vector<std::size_t>, kRegimes>> conditional;

  std::size_t tokens(std::size_t layer) const;
  /// Overall share of expert e in layer l, in percent.
  double overall_percent(std::size_t layer, std::size_t expert) const;
  /// Share of expert e among tokens of a regime, in percent (0 if no tokens).
  double conditional_percent(std::size_t layer, Regime regime, std::size_t expert) const;
};

/// Inference-mode routing over the given windows; each context token is
/// labelled by the regime of its day. Throws for soft-gated models.
RoutingStats collect_routing(Model& model, const PreparedData& prepared, std::span<const WindowIndex> windows,
                             const RegimeThresholds& thresholds = {}, std::size_t batch_size = 64);

/// layer,regime,expert,tokens,percentage with a leading comment line that
/// echoes the regime thresholds. `overall` selects the overall or the
/// regime-conditioned table.
void export_routing_csv(const RoutingStats& stats, const std::filesystem::path& path, bool overall);
std::string routing_csv(const RoutingStats& stats, bool overall);

}  // namespace switchhurdle
