#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "switchhurdle/hurdle.hpp"
#include "switchhurdle/model.hpp"
#include "switchhurdle/tensor.hpp"

namespace switchhurdle {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::size_t kEventTypes = 4;  // Sporting, Cultural, National, Religious
const std::vector<std::string>& event_type_names();

struct CalendarDay {
  std::string date;
  int day_of_week = 0;  // 0..6
  int week_of_year = 1;
  std::uint32_t event_types = 0;  // bit i set for event_type_names()[i]
  std::map<std::string, bool> snap;  // state -> SNAP day
};

struct SeriesRecord {
  std::string id;
  std::map<std::string, std::string> attributes;  // item_id, cat_id, store_id, ...
  std::vector<double> demand;                     // nonnegative integer counts
  std::vector<double> promo;                      // empty when unknown
  std::vector<double> price;                      // empty when unknown; filled values
  std::vector<bool> price_imputed;

  std::size_t length() const { return demand.size(); }
  std::string attribute(const std::string& name) const;
};

struct Dataset {
  std::string source;  // "synthetic" or "m5"
  std::vector<std::string> static_attributes;
  std::vector<CalendarDay> calendar;
  std::vector<SeriesRecord> series;
  /// Generating parameters per series per day (synthetic data only).
  std::vector<std::vector<HurdleParams>> truth;

  bool has_truth() const { return !truth.empty(); }
};

// --- synthetic generation --------------------------------------------------

struct SyntheticSpec {
  std::size_t n_series = 200;
  std::size_t length = 400;
  std::uint64_t seed = 7;
  double base_rate_min = 0.08;
  double base_rate_max = 0.45;
  double mu_min = 0.5;
  double mu_max = 5.0;
  double alpha_min = 0.1;
  double alpha_max = 1.0;
  /// Multiplicative weekly swing of p+ (0 disables seasonality).
  double weekly_amplitude = 0.5;
  double promo_rate = 0.1;
  std::size_t promo_run = 3;
  double promo_lift = 2.0;
  double promo_mu_lift = 1.5;
  std::size_t n_categories = 3;
  std::size_t n_stores = 2;
  /// When set, every series uses this constant p+ (no seasonality, no lift).
  std::optional<double> constant_p_plus;
  bool operator==(const SyntheticSpec&) const = default;
};

Dataset generate_synthetic(const SyntheticSpec& spec);
void save_synthetic(const Dataset& data, const SyntheticSpec& spec, const std::filesystem::path& dir);
/// Reads a directory written by save_synthetic; returns its generator spec too.
Dataset load_synthetic(const std::filesystem::path& dir, SyntheticSpec* spec_out = nullptr);

// --- M5 ingestion ------------------------------------------------------------

struct M5Paths {
  std::filesystem::path sales;
  std::filesystem::path calendar;
  std::filesystem::path prices;
};

/// Locates sales_train_*.csv, calendar.csv and sell_prices.csv in a directory.
M5Paths find_m5_files(const std::filesystem::path& dir);
Dataset load_m5(const M5Paths& paths, std::optional<std::size_t> limit = std::nullopt);

/// Synthetic directory (manifest.json) or M5 directory.
Dataset load_dataset(const std::filesystem::path& dir, std::optional<std::size_t> limit = std::nullopt);

// --- covariates --------------------------------------------------------------

/// Fixed covariate layout used for both encoder and decoder inputs.
const std::vector<std::string>& covariate_names();
std::size_t covariate_count();

struct EncodedCovariates {
  Tensor matrix;  // [length, covariate_count()]
  double price_mean = 0.0;
  double price_std = 1.0;
};

EncodedCovariates encode_covariates(const SeriesRecord& record, const std::vector<CalendarDay>& calendar);

/// Categorical dictionary for static attributes; code 0 is reserved for unknown.
class CategoryEncoder {
 public:
  CategoryEncoder() = default;
  explicit CategoryEncoder(std::vector<std::string> attributes) : attributes_(std::move(attributes)) {
    labels_.assign(attributes_.size(), {});
  }
  static CategoryEncoder fit(const Dataset& data);

  const std::vector<std::string>& attributes() const { return attributes_; }
  std::size_t cardinality(std::size_t attr) const { return labels_[attr].size() + 1; }
  std::vector<std::size_t> cardinalities() const;
  std::size_t encode(std::size_t attr, const std::string& label) const;
  std::vector<std::size_t> encode(const SeriesRecord& record) const;
  /// "<unknown>" for code 0.
  const std::string& decode(std::size_t attr, std::size_t code) const;
  std::size_t add(std::size_t attr, const std::string& label);

  const std::vector<std::vector<std::string>>& labels() const { return labels_; }

 private:
  std::vector<std::string> attributes_;
  std::vector<std::vector<std::string>> labels_;
};

// --- windows -----------------------------------------------------------------

struct WindowIndex {
  std::size_t series = 0;
  std::size_t context_start = 0;
  std::size_t target_start = 0;  // == context_start + L
};

struct WindowSample {
  std::vector<double> context;   // [L]
  Tensor past_covariates;        // [L, C]
  Tensor future_covariates;      // [T, C]
  std::vector<double> targets;   // [T]
  std::vector<double> target_mask;
  std::size_t context_start = 0;
  std::size_t target_start = 0;
};

/// Sliding windows over the first `usable_length` points of a series; the
/// last window is right-aligned to the end. Returns nothing if too short.
std::vector<std::size_t> window_starts(std::size_t usable_length, std::size_t context, std::size_t horizon,
                                       std::size_t stride);

struct WindowSet {
  std::vector<WindowIndex> windows;
  std::size_t skipped_series = 0;
};

WindowSet make_windows(const Dataset& data, std::size_t context, std::size_t horizon, std::size_t stride,
                       std::size_t usable_trim = 0);

WindowSample make_sample(const SeriesRecord& record, const EncodedCovariates& cov, std::size_t context_start,
                         std::size_t context, std::size_t horizon);

/// Forecast-origin split. Test targets are the final `horizon` points,
/// validation targets the `horizon` points before them, and training windows
/// never reach into either.
struct Split {
  WindowSet train;
  std::vector<WindowIndex> validation;
  std::vector<WindowIndex> test;
};

Split make_split(const Dataset& data, std::size_t context, std::size_t horizon, std::size_t stride);

/// Per-dataset precomputed covariates and static codes, reused across batches.
struct PreparedData {
  const Dataset* data = nullptr;
  std::vector<EncodedCovariates> covariates;
  std::vector<std::vector<std::size_t>> static_codes;
  CategoryEncoder encoder;
};

PreparedData prepare(const Dataset& data, CategoryEncoder encoder);

Batch collate(const PreparedData& prepared, std::span<const WindowIndex> windows, std::size_t context,
              std::size_t horizon, bool with_targets = true);

}  // namespace switchhurdle
