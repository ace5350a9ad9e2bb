#include "switchhurdle/config.hpp"

#include <cstring>
#include <fstream>
#include <set>

namespace switchhurdle {

using nlohmann::json;

namespace {

// Reads known keys out of one JSON object and rejects the rest.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw std::invalid_argument("config section '" + name_ + "' must be an object");
  }
  ~Section() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw std::invalid_argument("config section '" + name_ + "': unknown key '" + key + "'");
    }
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw std::invalid_argument("config '" + name_ + "." + key + "': " + e.what());
    }
  }

  bool has(const char* key) {
    seen_.insert(key);
    return j_.contains(key);
  }
  const json& at(const char* key) const { return j_.at(key); }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

json optional_to_json(const std::optional<std::size_t>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

std::uint64_t RunConfig::init_seed() const { return Rng(seed).split("init").seed(); }

json to_json(const ModelConfig& c) {
  return {{"d_model", c.d_model},
          {"n_heads", c.n_heads},
          {"n_encoder_layers", c.n_encoder_layers},
          {"n_experts", c.n_experts},
          {"d_ff", c.d_ff},
          {"context_length", c.context_length},
          {"horizon", c.horizon},
          {"n_past_covariates", c.n_past_covariates},
          {"n_future_covariates", c.n_future_covariates},
          {"static_cardinalities", c.static_cardinalities},
          {"gate_mode", to_string(c.gate_mode)},
          {"expert_activation", to_string(c.expert_activation)}};
}

ModelConfig model_config_from_json(const json& j, ModelConfig c) {
  Section s(j, "model");
  s.read("d_model", c.d_model);
  s.read("n_heads", c.n_heads);
  s.read("n_encoder_layers", c.n_encoder_layers);
  s.read("n_experts", c.n_experts);
  s.read("d_ff", c.d_ff);
  s.read("context_length", c.context_length);
  s.read("horizon", c.horizon);
  s.read("n_past_covariates", c.n_past_covariates);
  s.read("n_future_covariates", c.n_future_covariates);
  s.read("static_cardinalities", c.static_cardinalities);
  std::string text;
  if (s.has("gate_mode")) {
    s.read("gate_mode", text);
    c.gate_mode = parse_gate_mode(text);
  }
  if (s.has("expert_activation")) {
    s.read("expert_activation", text);
    c.expert_activation = parse_expert_activation(text);
  }
  return c;
}

json to_json(const TrainConfig& c) {
  return {{"objective", to_string(c.objective)},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"lambda_aux", c.lambda_aux},
          {"lambda_decay_init", c.lambda_decay_init},
          {"lambda_decay_factor", c.lambda_decay_factor},
          {"lambda_decay_floor", c.lambda_decay_floor},
          {"tf_start", c.tf_start},
          {"tf_end", c.tf_end},
          {"tf_decay_epochs", c.effective_tf_decay_epochs()},
          {"grad_clip_norm", c.grad_clip_norm},
          {"stride", c.stride}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  Section s(j, "train");
  if (s.has("objective")) {
    std::string text;
    s.read("objective", text);
    c.objective = parse_objective(text);
  }
  s.read("epochs", c.epochs);
  s.read("batch_size", c.batch_size);
  s.read("learning_rate", c.learning_rate);
  s.read("lambda_aux", c.lambda_aux);
  s.read("lambda_decay_init", c.lambda_decay_init);
  s.read("lambda_decay_factor", c.lambda_decay_factor);
  s.read("lambda_decay_floor", c.lambda_decay_floor);
  s.read("tf_start", c.tf_start);
  s.read("tf_end", c.tf_end);
  s.read("tf_decay_epochs", c.tf_decay_epochs);
  s.read("grad_clip_norm", c.grad_clip_norm);
  s.read("stride", c.stride);
  return c;
}

json to_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"model", to_json(c.model)},
          {"train", to_json(c.train)},
          {"data", {{"path", c.data.path}, {"limit", optional_to_json(c.data.limit)}}}};
}

RunConfig run_config_from_json(const json& j, RunConfig c) {
  Section s(j, "<root>");
  s.read("seed", c.seed);
  if (s.has("model")) c.model = model_config_from_json(s.at("model"), c.model);
  if (s.has("train")) c.train = train_config_from_json(s.at("train"), c.train);
  if (s.has("data")) {
    Section d(s.at("data"), "data");
    d.read("path", c.data.path);
    if (d.has("limit")) {
      const json& lim = s.at("data").at("limit");
      if (lim.is_null()) {
        c.data.limit.reset();
      } else {
        std::size_t v = 0;
        d.read("limit", v);
        c.data.limit = v;
      }
    }
  }
  c.train.seed = c.seed;
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw std::invalid_argument("config file " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

json to_json(const SyntheticSpec& s) {
  json j = {{"n_series", s.n_series},
            {"length", s.length},
            {"seed", s.seed},
            {"base_rate_min", s.base_rate_min},
            {"base_rate_max", s.base_rate_max},
            {"mu_min", s.mu_min},
            {"mu_max", s.mu_max},
            {"alpha_min", s.alpha_min},
            {"alpha_max", s.alpha_max},
            {"weekly_amplitude", s.weekly_amplitude},
            {"promo_rate", s.promo_rate},
            {"promo_run", s.promo_run},
            {"promo_lift", s.promo_lift},
            {"promo_mu_lift", s.promo_mu_lift},
            {"n_categories", s.n_categories},
            {"n_stores", s.n_stores}};
  j["constant_p_plus"] = s.constant_p_plus ? json(*s.constant_p_plus) : json(nullptr);
  return j;
}

SyntheticSpec synthetic_spec_from_json(const json& j, SyntheticSpec s) {
  Section sec(j, "spec");
  sec.read("n_series", s.n_series);
  sec.read("length", s.length);
  sec.read("seed", s.seed);
  sec.read("base_rate_min", s.base_rate_min);
  sec.read("base_rate_max", s.base_rate_max);
  sec.read("mu_min", s.mu_min);
  sec.read("mu_max", s.mu_max);
  sec.read("alpha_min", s.alpha_min);
  sec.read("alpha_max", s.alpha_max);
  sec.read("weekly_amplitude", s.weekly_amplitude);
  sec.read("promo_rate", s.promo_rate);
  sec.read("promo_run", s.promo_run);
  sec.read("promo_lift", s.promo_lift);
  sec.read("promo_mu_lift", s.promo_mu_lift);
  sec.read("n_categories", s.n_categories);
  sec.read("n_stores", s.n_stores);
  if (sec.has("constant_p_plus")) {
    const json& v = j.at("constant_p_plus");
    if (v.is_null()) {
      s.constant_p_plus.reset();
    } else {
      double p = 0.0;
      sec.read("constant_p_plus", p);
      s.constant_p_plus = p;
    }
  }
  return s;
}

json to_json(const CategoryEncoder& e) { return {{"attributes", e.attributes()}, {"labels", e.labels()}}; }

CategoryEncoder category_encoder_from_json(const json& j) {
  CategoryEncoder enc(j.at("attributes").get<std::vector<std::string>>());
  const auto labels = j.at("labels").get<std::vector<std::vector<std::string>>>();
  if (labels.size() != enc.attributes().size()) throw std::invalid_argument("category dictionary: label table count");
  for (std::size_t a = 0; a < labels.size(); ++a) {
    for (const auto& l : labels[a]) enc.add(a, l);
  }
  return enc;
}

// --- checkpoint ------------------------------------------------------------------

namespace {

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& in, const std::filesystem::path& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw DataError("checkpoint " + path.string() + " is truncated");
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model& model, const CategoryEncoder& encoder,
                     const json& metadata) {
  const json header = {{"model", to_json(model.config())}, {"encoder", to_json(encoder)}, {"metadata", metadata}};
  const std::string text = header.dump();
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint " + path.string());
    out << kCheckpointMagic << '\n';
    put<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    put<std::uint64_t>(out, model.parameters().size());
    for (const auto& p : model.parameters()) {
      put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
      out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
      put<std::uint32_t>(out, static_cast<std::uint32_t>(p.value.shape.size()));
      for (auto d : p.value.shape) put<std::uint64_t>(out, d);
      out.write(reinterpret_cast<const char*>(p.value.values.data()),
                static_cast<std::streamsize>(p.value.values.size() * sizeof(double)));
    }
    if (!out) throw DataError("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::string magic;
  std::getline(in, magic);
  if (magic != kCheckpointMagic) throw DataError(path.string() + " is not a switch-hurdle-v1 checkpoint");
  const auto len = get<std::uint64_t>(in, path);
  if (len > (1u << 30)) throw DataError("checkpoint header too large");
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw DataError("checkpoint header truncated");
  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint header: ") + e.what());
  }
  const ModelConfig cfg = model_config_from_json(header.at("model"));
  LoadedCheckpoint ck{Model(cfg, 0), category_encoder_from_json(header.at("encoder")),
                      header.value("metadata", json::object())};

  const auto count = get<std::uint64_t>(in, path);
  if (count != ck.model.parameters().size()) {
    throw DataError("checkpoint holds " + std::to_string(count) + " tensors, model expects " +
                    std::to_string(ck.model.parameters().size()));
  }
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = get<std::uint32_t>(in, path);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const auto ndim = get<std::uint32_t>(in, path);
    Shape shape(ndim);
    for (auto& d : shape) d = static_cast<std::size_t>(get<std::uint64_t>(in, path));
    Parameter& p = ck.model.parameter(name);
    if (shape != p.value.shape) {
      throw DataError("checkpoint tensor '" + name + "' has shape " + shape_string(shape) + ", expected " +
                      shape_string(p.value.shape));
    }
    if (!in.read(reinterpret_cast<char*>(p.value.values.data()),
                 static_cast<std::streamsize>(p.value.values.size() * sizeof(double)))) {
      throw DataError("checkpoint tensor '" + name + "' truncated");
    }
  }
  return ck;
}

}  // namespace switchhurdle
