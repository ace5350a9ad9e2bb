#include "switchhurdle/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <unordered_map>

#include "csv.hpp"
#include "switchhurdle/config.hpp"
#include "json.hpp"

namespace switchhurdle {

using nlohmann::json;

const std::vector<std::string>& event_type_names() {
  static const std::vector<std::string> names = {"Sporting", "Cultural", "National", "Religious"};
  return names;
}

std::string SeriesRecord::attribute(const std::string& name) const {
  if (name == "id") return id;
  auto it = attributes.find(name);
  return it == attributes.end() ? std::string() : it->second;
}

namespace {

std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  return in;
}

std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

std::size_t column_index(const std::vector<std::string>& header, const std::string& name,
                         const std::filesystem::path& file) {
  auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw DataError(file.filename().string() + ": missing column '" + name + "'");
  return static_cast<std::size_t>(it - header.begin());
}

double parse_number(const std::string& s, const std::filesystem::path& file, std::size_t line) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError(file.filename().string() + ":" + std::to_string(line) + ": not a number '" + s + "'");
  }
}

// d_1 .. d_N columns from `first` onward.
std::vector<std::size_t> day_columns(const std::vector<std::string>& header, const std::filesystem::path& file) {
  std::vector<std::size_t> cols;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i].rfind("d_", 0) == 0) cols.push_back(i);
  }
  if (cols.empty()) throw DataError(file.filename().string() + ": no d_<n> day columns");
  for (std::size_t k = 0; k < cols.size(); ++k) {
    if (header[cols[k]] != "d_" + std::to_string(k + 1)) {
      throw DataError(file.filename().string() + ": day columns must run d_1..d_N, found '" + header[cols[k]] + "'");
    }
  }
  return cols;
}

std::vector<CalendarDay> synthetic_calendar(std::size_t length) {
  std::vector<CalendarDay> cal(length);
  for (std::size_t k = 0; k < length; ++k) {
    cal[k].date = "d_" + std::to_string(k + 1);
    cal[k].day_of_week = static_cast<int>(k % 7);
    cal[k].week_of_year = static_cast<int>((k / 7) % 52) + 1;
  }
  return cal;
}

}  // namespace

// --- synthetic -----------------------------------------------------------------

Dataset generate_synthetic(const SyntheticSpec& spec) {
  if (spec.n_series == 0 || spec.length == 0) throw std::invalid_argument("synthetic spec: empty dataset");
  if (spec.n_categories == 0 || spec.n_stores == 0) throw std::invalid_argument("synthetic spec: need >= 1 category/store");
  Dataset data;
  data.source = "synthetic";
  data.static_attributes = {"item_id", "cat_id", "store_id"};
  data.calendar = synthetic_calendar(spec.length);
  const Rng root(spec.seed);

  for (std::size_t i = 0; i < spec.n_series; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "SYN_%05zu", i);
    SeriesRecord rec;
    rec.id = id;
    rec.attributes["item_id"] = "ITEM_" + std::to_string(i);
    rec.attributes["cat_id"] = "CAT_" + std::to_string(i % spec.n_categories);
    rec.attributes["store_id"] = "STORE_" + std::to_string(i % spec.n_stores);

    std::vector<HurdleParams> truth;
    for (std::uint64_t attempt = 0;; ++attempt) {
      Rng rng = root.split(i).split(attempt);
      const double base = rng.uniform(spec.base_rate_min, spec.base_rate_max);
      const double mu = rng.uniform(spec.mu_min, spec.mu_max);
      const double alpha = rng.uniform(spec.alpha_min, spec.alpha_max);
      const double phase = static_cast<double>(rng.below(7));

      rec.promo.assign(spec.length, 0.0);
      if (!spec.constant_p_plus && spec.promo_rate > 0.0) {
        const double start_prob = spec.promo_rate / static_cast<double>(std::max<std::size_t>(1, spec.promo_run));
        for (std::size_t t = 0; t < spec.length; ++t) {
          if (rng.bernoulli(start_prob)) {
            for (std::size_t k = t; k < std::min(spec.length, t + spec.promo_run); ++k) rec.promo[k] = 1.0;
          }
        }
      }

      truth.assign(spec.length, {});
      rec.demand.assign(spec.length, 0.0);
      bool any_positive = false;
      for (std::size_t t = 0; t < spec.length; ++t) {
        double p = 0.0, m = mu;
        if (spec.constant_p_plus) {
          p = *spec.constant_p_plus;
        } else {
          const double dow = static_cast<double>(data.calendar[t].day_of_week);
          const double season = 1.0 + spec.weekly_amplitude * std::sin(2.0 * std::numbers::pi * (dow + phase) / 7.0);
          p = base * std::max(season, 0.0);
          if (rec.promo[t] > 0.0) {
            p *= spec.promo_lift;
            m *= spec.promo_mu_lift;
          }
        }
        p = std::clamp(p, 1e-6, 0.98);
        truth[t] = HurdleParams{p, NBParams{m, alpha}};
        rec.demand[t] = static_cast<double>(hurdle_sample(truth[t], rng));
        any_positive |= rec.demand[t] > 0.0;
      }
      if (any_positive) break;
    }
    data.series.push_back(std::move(rec));
    data.truth.push_back(std::move(truth));
  }
  return data;
}

void save_synthetic(const Dataset& data, const SyntheticSpec& spec, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
  const std::size_t length = data.calendar.size();

  json manifest = {{"format", "switch-hurdle-synthetic-v1"},
                   {"generator", to_json(spec)},
                   {"seed", spec.seed},
                   {"n_series", data.series.size()},
                   {"length", length},
                   {"static_attributes", data.static_attributes},
                   {"files", {"sales.csv", "promo.csv", "truth.csv"}}};
  open_output(dir / "manifest.json") << manifest.dump(2) << '\n';

  auto sales = open_output(dir / "sales.csv");
  auto promo = open_output(dir / "promo.csv");
  sales << "id";
  for (const auto& a : data.static_attributes) sales << ',' << a;
  promo << "id";
  for (std::size_t k = 1; k <= length; ++k) {
    sales << ",d_" << k;
    promo << ",d_" << k;
  }
  sales << '\n';
  promo << '\n';
  for (const auto& rec : data.series) {
    sales << rec.id;
    for (const auto& a : data.static_attributes) sales << ',' << rec.attribute(a);
    for (double v : rec.demand) sales << ',' << static_cast<long long>(v);
    sales << '\n';
    promo << rec.id;
    for (std::size_t k = 0; k < length; ++k) promo << ',' << (rec.promo.empty() ? 0 : static_cast<int>(rec.promo[k]));
    promo << '\n';
  }

  auto truth = open_output(dir / "truth.csv");
  truth << "id,day,p_plus,mu,alpha\n";
  for (std::size_t i = 0; i < data.truth.size(); ++i) {
    for (std::size_t k = 0; k < data.truth[i].size(); ++k) {
      const auto& h = data.truth[i][k];
      truth << data.series[i].id << ",d_" << (k + 1) << ',' << csv::format_double(h.p_plus) << ','
            << csv::format_double(h.nb.mu) << ',' << csv::format_double(h.nb.alpha) << '\n';
    }
  }
}

Dataset load_synthetic(const std::filesystem::path& dir, SyntheticSpec* spec_out) {
  json manifest;
  try {
    auto in = open_input(dir / "manifest.json");
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("manifest.json: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "switch-hurdle-synthetic-v1") {
    throw DataError("manifest.json: unsupported format '" + manifest.value("format", "") + "'");
  }
  if (spec_out) *spec_out = synthetic_spec_from_json(manifest.at("generator"));

  Dataset data;
  data.source = "synthetic";
  data.static_attributes = manifest.at("static_attributes").get<std::vector<std::string>>();

  const auto sales_path = dir / "sales.csv";
  auto sales = open_input(sales_path);
  std::string line;
  if (!csv::read_line(sales, line)) throw DataError("sales.csv: empty file");
  const auto header = csv::split(line);
  const auto days = day_columns(header, sales_path);
  std::vector<std::size_t> attr_cols;
  for (const auto& a : data.static_attributes) attr_cols.push_back(column_index(header, a, sales_path));
  const std::size_t id_col = column_index(header, "id", sales_path);
  data.calendar = synthetic_calendar(days.size());

  std::unordered_map<std::string, std::size_t> by_id;
  std::size_t line_no = 1;
  while (csv::read_line(sales, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = csv::split(line);
    if (f.size() != header.size()) throw DataError("sales.csv:" + std::to_string(line_no) + ": wrong field count");
    SeriesRecord rec;
    rec.id = f[id_col];
    for (std::size_t a = 0; a < attr_cols.size(); ++a) rec.attributes[data.static_attributes[a]] = f[attr_cols[a]];
    rec.demand.reserve(days.size());
    for (auto c : days) rec.demand.push_back(parse_number(f[c], sales_path, line_no));
    by_id[rec.id] = data.series.size();
    data.series.push_back(std::move(rec));
  }

  const auto promo_path = dir / "promo.csv";
  auto promo = open_input(promo_path);
  if (!csv::read_line(promo, line)) throw DataError("promo.csv: empty file");
  const auto promo_header = csv::split(line);
  const auto promo_days = day_columns(promo_header, promo_path);
  const std::size_t promo_id = column_index(promo_header, "id", promo_path);
  line_no = 1;
  while (csv::read_line(promo, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = csv::split(line);
    auto it = by_id.find(f.at(promo_id));
    if (it == by_id.end()) throw DataError("promo.csv: unknown series " + f[promo_id]);
    auto& rec = data.series[it->second];
    rec.promo.clear();
    for (auto c : promo_days) rec.promo.push_back(parse_number(f.at(c), promo_path, line_no));
  }

  const auto truth_path = dir / "truth.csv";
  if (std::filesystem::exists(truth_path)) {
    auto truth = open_input(truth_path);
    csv::read_line(truth, line);
    const auto th = csv::split(line);
    const std::size_t c_id = column_index(th, "id", truth_path), c_day = column_index(th, "day", truth_path);
    const std::size_t c_p = column_index(th, "p_plus", truth_path), c_mu = column_index(th, "mu", truth_path);
    const std::size_t c_a = column_index(th, "alpha", truth_path);
    data.truth.assign(data.series.size(), std::vector<HurdleParams>(days.size()));
    line_no = 1;
    while (csv::read_line(truth, line)) {
      ++line_no;
      if (line.empty()) continue;
      const auto f = csv::split(line);
      auto it = by_id.find(f.at(c_id));
      if (it == by_id.end()) throw DataError("truth.csv: unknown series " + f[c_id]);
      const std::size_t day = static_cast<std::size_t>(parse_number(f.at(c_day).substr(2), truth_path, line_no)) - 1;
      if (day >= days.size()) throw DataError("truth.csv: day out of range");
      data.truth[it->second][day] = HurdleParams{parse_number(f.at(c_p), truth_path, line_no),
                                                 NBParams{parse_number(f.at(c_mu), truth_path, line_no),
                                                          parse_number(f.at(c_a), truth_path, line_no)}};
    }
  }
  return data;
}

// --- M5 ----------------------------------------------------------------------

M5Paths find_m5_files(const std::filesystem::path& dir) {
  M5Paths p;
  for (const char* name : {"sales_train_evaluation.csv", "sales_train_validation.csv"}) {
    if (std::filesystem::exists(dir / name)) {
      p.sales = dir / name;
      break;
    }
  }
  if (p.sales.empty()) throw DataError(dir.string() + ": no sales_train_evaluation.csv or sales_train_validation.csv");
  p.calendar = dir / "calendar.csv";
  p.prices = dir / "sell_prices.csv";
  if (!std::filesystem::exists(p.calendar)) throw DataError(dir.string() + ": missing calendar.csv");
  if (!std::filesystem::exists(p.prices)) throw DataError(dir.string() + ": missing sell_prices.csv");
  return p;
}

namespace {

int day_of_year(const std::string& date) {
  // YYYY-MM-DD
  if (date.size() < 10) return 0;
  const int y = std::stoi(date.substr(0, 4)), m = std::stoi(date.substr(5, 2)), d = std::stoi(date.substr(8, 2));
  static constexpr int kCum[] = {0, 31, 59, 90, 120, 151, 181, 212, 243, 273, 304, 334};
  const bool leap = (y % 4 == 0 && y % 100 != 0) || y % 400 == 0;
  return kCum[std::clamp(m, 1, 12) - 1] + d + ((leap && m > 2) ? 1 : 0);
}

}  // namespace

Dataset load_m5(const M5Paths& paths, std::optional<std::size_t> limit) {
  Dataset data;
  data.source = "m5";
  data.static_attributes = {"item_id", "dept_id", "cat_id", "store_id", "state_id"};

  // calendar: d -> row
  auto cal_in = open_input(paths.calendar);
  std::string line;
  if (!csv::read_line(cal_in, line)) throw DataError("calendar.csv: empty file");
  const auto ch = csv::split(line);
  const std::size_t c_date = column_index(ch, "date", paths.calendar), c_week = column_index(ch, "wm_yr_wk", paths.calendar);
  const std::size_t c_wday = column_index(ch, "wday", paths.calendar), c_d = column_index(ch, "d", paths.calendar);
  const std::size_t c_et1 = column_index(ch, "event_type_1", paths.calendar);
  const std::size_t c_et2 = column_index(ch, "event_type_2", paths.calendar);
  std::vector<std::pair<std::string, std::size_t>> snap_cols;
  for (const char* state : {"CA", "TX", "WI"}) {
    snap_cols.emplace_back(state, column_index(ch, std::string("snap_") + state, paths.calendar));
  }
  std::unordered_map<std::string, std::pair<CalendarDay, std::string>> cal_by_d;
  std::size_t line_no = 1;
  while (csv::read_line(cal_in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = csv::split(line);
    if (f.size() != ch.size()) throw DataError("calendar.csv:" + std::to_string(line_no) + ": wrong field count");
    CalendarDay day;
    day.date = f[c_date];
    day.day_of_week = static_cast<int>(parse_number(f[c_wday], paths.calendar, line_no)) - 1;
    day.week_of_year = day_of_year(day.date) / 7 + 1;
    for (auto col : {c_et1, c_et2}) {
      const auto& names = event_type_names();
      auto it = std::find(names.begin(), names.end(), f[col]);
      if (it != names.end()) day.event_types |= 1u << (it - names.begin());
    }
    for (const auto& [state, col] : snap_cols) day.snap[state] = f[col] == "1";
    cal_by_d[f[c_d]] = {day, f[c_week]};
  }

  auto sales_in = open_input(paths.sales);
  if (!csv::read_line(sales_in, line)) throw DataError(paths.sales.filename().string() + ": empty file");
  const auto sh = csv::split(line);
  const std::size_t s_id = column_index(sh, "id", paths.sales);
  std::vector<std::size_t> attr_cols;
  for (const auto& a : data.static_attributes) attr_cols.push_back(column_index(sh, a, paths.sales));
  const auto days = day_columns(sh, paths.sales);
  std::vector<std::string> day_week(days.size());
  data.calendar.resize(days.size());
  for (std::size_t k = 0; k < days.size(); ++k) {
    auto it = cal_by_d.find(sh[days[k]]);
    if (it == cal_by_d.end()) throw DataError("calendar.csv: no row for " + sh[days[k]]);
    data.calendar[k] = it->second.first;
    day_week[k] = it->second.second;
  }

  line_no = 1;
  while (csv::read_line(sales_in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (limit && data.series.size() >= *limit) break;
    const auto f = csv::split(line);
    if (f.size() != sh.size()) {
      throw DataError(paths.sales.filename().string() + ":" + std::to_string(line_no) + ": wrong field count");
    }
    SeriesRecord rec;
    rec.id = f[s_id];
    for (std::size_t a = 0; a < attr_cols.size(); ++a) rec.attributes[data.static_attributes[a]] = f[attr_cols[a]];
    rec.demand.reserve(days.size());
    for (auto c : days) {
      const double v = parse_number(f[c], paths.sales, line_no);
      if (v < 0.0) throw DataError(paths.sales.filename().string() + ":" + std::to_string(line_no) + ": negative demand");
      rec.demand.push_back(v);
    }
    data.series.push_back(std::move(rec));
  }

  // prices keyed by store|item|week, only for loaded series
  std::unordered_map<std::string, std::vector<std::size_t>> wanted;
  for (std::size_t i = 0; i < data.series.size(); ++i) {
    wanted[data.series[i].attribute("store_id") + '|' + data.series[i].attribute("item_id")].push_back(i);
  }
  std::vector<std::unordered_map<std::string, double>> price_by_week(data.series.size());
  auto price_in = open_input(paths.prices);
  if (!csv::read_line(price_in, line)) throw DataError("sell_prices.csv: empty file");
  const auto ph = csv::split(line);
  const std::size_t p_store = column_index(ph, "store_id", paths.prices), p_item = column_index(ph, "item_id", paths.prices);
  const std::size_t p_week = column_index(ph, "wm_yr_wk", paths.prices), p_price = column_index(ph, "sell_price", paths.prices);
  line_no = 1;
  while (csv::read_line(price_in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = csv::split(line);
    auto it = wanted.find(f.at(p_store) + '|' + f.at(p_item));
    if (it == wanted.end()) continue;
    const double price = parse_number(f.at(p_price), paths.prices, line_no);
    for (auto i : it->second) price_by_week[i][f.at(p_week)] = price;
  }
  for (std::size_t i = 0; i < data.series.size(); ++i) {
    auto& rec = data.series[i];
    const std::size_t n = rec.length();
    rec.price.assign(n, std::numeric_limits<double>::quiet_NaN());
    rec.price_imputed.assign(n, true);
    for (std::size_t k = 0; k < n; ++k) {
      auto it = price_by_week[i].find(day_week[k]);
      if (it != price_by_week[i].end()) {
        rec.price[k] = it->second;
        rec.price_imputed[k] = false;
      }
    }
    // forward fill, then backward fill the leading gap
    double last = std::numeric_limits<double>::quiet_NaN();
    for (std::size_t k = 0; k < n; ++k) {
      if (std::isnan(rec.price[k])) rec.price[k] = last;
      else last = rec.price[k];
    }
    double next = std::numeric_limits<double>::quiet_NaN();
    for (std::size_t k = n; k-- > 0;) {
      if (std::isnan(rec.price[k])) rec.price[k] = next;
      else next = rec.price[k];
    }
    for (auto& p : rec.price) {
      if (std::isnan(p)) p = 0.0;
    }
  }
  return data;
}

Dataset load_dataset(const std::filesystem::path& dir, std::optional<std::size_t> limit) {
  if (!std::filesystem::is_directory(dir)) throw DataError("data path is not a directory: " + dir.string());
  if (std::filesystem::exists(dir / "manifest.json")) {
    Dataset d = load_synthetic(dir);
    if (limit && *limit < d.series.size()) {
      d.series.resize(*limit);
      if (d.has_truth()) d.truth.resize(*limit);
    }
    return d;
  }
  return load_m5(find_m5_files(dir), limit);
}

// --- covariates ---------------------------------------------------------------

const std::vector<std::string>& covariate_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (int d = 0; d < 7; ++d) n.push_back("dow_" + std::to_string(d));
    n.push_back("week_sin");
    n.push_back("week_cos");
    for (const auto& e : event_type_names()) n.push_back("event_" + e);
    n.push_back("snap");
    n.push_back("promo");
    n.push_back("price_z");
    n.push_back("price_imputed");
    return n;
  }();
  return names;
}

std::size_t covariate_count() { return covariate_names().size(); }

EncodedCovariates encode_covariates(const SeriesRecord& record, const std::vector<CalendarDay>& calendar) {
  const std::size_t n = record.length();
  if (calendar.size() < n) throw DataError("calendar shorter than series " + record.id);
  EncodedCovariates out;
  const std::size_t C = covariate_count();
  out.matrix = Tensor({std::max<std::size_t>(n, 1), C});

  if (!record.price.empty()) {
    double mean = 0.0;
    for (double p : record.price) mean += p;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double p : record.price) var += (p - mean) * (p - mean);
    out.price_mean = mean;
    out.price_std = std::max(std::sqrt(var / static_cast<double>(n)), 1e-8);
  }
  const std::string state = record.attribute("state_id");
  for (std::size_t k = 0; k < n; ++k) {
    const CalendarDay& day = calendar[k];
    double* row = &out.matrix.values[k * C];
    row[day.day_of_week % 7] = 1.0;
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(day.week_of_year) / 52.1775;
    row[7] = std::sin(angle);
    row[8] = std::cos(angle);
    for (std::size_t e = 0; e < kEventTypes; ++e) row[9 + e] = (day.event_types >> e) & 1u ? 1.0 : 0.0;
    if (!state.empty()) {
      auto it = day.snap.find(state);
      row[13] = (it != day.snap.end() && it->second) ? 1.0 : 0.0;
    }
    row[14] = record.promo.empty() ? 0.0 : record.promo[k];
    if (!record.price.empty()) {
      const double z = (record.price[k] - out.price_mean) / out.price_std;
      row[15] = out.price_std <= 1e-8 ? 0.0 : z;
      row[16] = record.price_imputed.empty() ? 0.0 : (record.price_imputed[k] ? 1.0 : 0.0);
    }
  }
  return out;
}

CategoryEncoder CategoryEncoder::fit(const Dataset& data) {
  CategoryEncoder enc(data.static_attributes);
  for (const auto& rec : data.series) {
    for (std::size_t a = 0; a < enc.attributes_.size(); ++a) enc.add(a, rec.attribute(enc.attributes_[a]));
  }
  return enc;
}

std::vector<std::size_t> CategoryEncoder::cardinalities() const {
  std::vector<std::size_t> out;
  for (std::size_t a = 0; a < attributes_.size(); ++a) out.push_back(cardinality(a));
  return out;
}

std::size_t CategoryEncoder::add(std::size_t attr, const std::string& label) {
  const std::size_t existing = encode(attr, label);
  if (existing != 0) return existing;
  labels_.at(attr).push_back(label);
  return labels_[attr].size();
}

std::size_t CategoryEncoder::encode(std::size_t attr, const std::string& label) const {
  const auto& l = labels_.at(attr);
  auto it = std::find(l.begin(), l.end(), label);
  return it == l.end() ? 0 : static_cast<std::size_t>(it - l.begin()) + 1;
}

std::vector<std::size_t> CategoryEncoder::encode(const SeriesRecord& record) const {
  std::vector<std::size_t> codes;
  for (std::size_t a = 0; a < attributes_.size(); ++a) codes.push_back(encode(a, record.attribute(attributes_[a])));
  return codes;
}

const std::string& CategoryEncoder::decode(std::size_t attr, std::size_t code) const {
  static const std::string unknown = "<unknown>";
  if (code == 0 || code > labels_.at(attr).size()) return unknown;
  return labels_[attr][code - 1];
}

// --- windows --------------------------------------------------------------------

std::vector<std::size_t> window_starts(std::size_t usable_length, std::size_t context, std::size_t horizon,
                                       std::size_t stride) {
  if (stride == 0) throw std::invalid_argument("window stride must be >= 1");
  std::vector<std::size_t> starts;
  const std::size_t span = context + horizon;
  if (usable_length < span) return starts;
  const std::size_t last = usable_length - span;
  for (std::size_t s = 0; s <= last; s += stride) starts.push_back(s);
  if (starts.back() != last) starts.push_back(last);
  return starts;
}

WindowSet make_windows(const Dataset& data, std::size_t context, std::size_t horizon, std::size_t stride,
                       std::size_t usable_trim) {
  WindowSet set;
  for (std::size_t i = 0; i < data.series.size(); ++i) {
    const std::size_t len = data.series[i].length();
    const std::size_t usable = len > usable_trim ? len - usable_trim : 0;
    const auto starts = window_starts(usable, context, horizon, stride);
    if (starts.empty()) {
      ++set.skipped_series;
      continue;
    }
    for (auto s : starts) set.windows.push_back({i, s, s + context});
  }
  return set;
}

WindowSample make_sample(const SeriesRecord& record, const EncodedCovariates& cov, std::size_t context_start,
                         std::size_t context, std::size_t horizon) {
  const std::size_t target_start = context_start + context;
  if (target_start + horizon > record.length()) throw std::out_of_range("window extends past series end");
  const std::size_t C = cov.matrix.cols();
  WindowSample w;
  w.context_start = context_start;
  w.target_start = target_start;
  w.context.assign(record.demand.begin() + static_cast<std::ptrdiff_t>(context_start),
                   record.demand.begin() + static_cast<std::ptrdiff_t>(target_start));
  w.targets.assign(record.demand.begin() + static_cast<std::ptrdiff_t>(target_start),
                   record.demand.begin() + static_cast<std::ptrdiff_t>(target_start + horizon));
  w.target_mask.assign(horizon, 1.0);
  w.past_covariates = Tensor({context, C});
  w.future_covariates = Tensor({horizon, C});
  std::copy_n(&cov.matrix.values[context_start * C], context * C, w.past_covariates.values.begin());
  std::copy_n(&cov.matrix.values[target_start * C], horizon * C, w.future_covariates.values.begin());
  return w;
}

Split make_split(const Dataset& data, std::size_t context, std::size_t horizon, std::size_t stride) {
  Split split;
  split.train = make_windows(data, context, horizon, stride, 2 * horizon);
  for (std::size_t i = 0; i < data.series.size(); ++i) {
    const std::size_t len = data.series[i].length();
    if (len >= context + 2 * horizon) {
      const std::size_t start = len - 2 * horizon - context;
      split.validation.push_back({i, start, start + context});
    }
    if (len >= context + horizon) {
      const std::size_t start = len - horizon - context;
      split.test.push_back({i, start, start + context});
    }
  }
  return split;
}

PreparedData prepare(const Dataset& data, CategoryEncoder encoder) {
  PreparedData p;
  p.data = &data;
  p.encoder = std::move(encoder);
  p.covariates.reserve(data.series.size());
  for (const auto& rec : data.series) {
    p.covariates.push_back(encode_covariates(rec, data.calendar));
    p.static_codes.push_back(p.encoder.encode(rec));
  }
  return p;
}

Batch collate(const PreparedData& prepared, std::span<const WindowIndex> windows, std::size_t context,
              std::size_t horizon, bool with_targets) {
  const std::size_t B = windows.size();
  const std::size_t C = covariate_count();
  Batch batch;
  batch.size = B;
  batch.context = Tensor({B, context});
  batch.past_cov = Tensor({B, context, C});
  batch.future_cov = Tensor({B, horizon, C});
  if (with_targets) {
    batch.targets = Tensor({B, horizon});
    batch.mask = Tensor({B, horizon});
  }
  for (std::size_t b = 0; b < B; ++b) {
    const WindowIndex& w = windows[b];
    const SeriesRecord& rec = prepared.data->series.at(w.series);
    const Tensor& cov = prepared.covariates.at(w.series).matrix;
    if (w.target_start + (with_targets ? horizon : 0) > rec.length() || w.target_start > rec.length()) {
      throw std::out_of_range("collate: window beyond series " + rec.id);
    }
    for (std::size_t t = 0; t < context; ++t) batch.context.at(b, t) = rec.demand[w.context_start + t];
    std::copy_n(&cov.values[w.context_start * C], context * C, &batch.past_cov.values[b * context * C]);
    for (std::size_t t = 0; t < horizon; ++t) {
      const std::size_t day = w.target_start + t;
      if (day < rec.length()) std::copy_n(&cov.values[day * C], C, &batch.future_cov.values[(b * horizon + t) * C]);
      if (with_targets) {
        batch.targets.at(b, t) = rec.demand[day];
        batch.mask.at(b, t) = 1.0;
      }
    }
    const auto& codes = prepared.static_codes.at(w.series);
    batch.static_codes.insert(batch.static_codes.end(), codes.begin(), codes.end());
  }
  return batch;
}

}  // namespace switchhurdle
