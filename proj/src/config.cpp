#include "refseg/config.hpp"

#include <fstream>
#include <functional>
#include <json.hpp>
#include <sstream>

#include "refseg/errors.hpp"

namespace refseg {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Removes a trailing comment, ignoring '#' inside a quoted string.
std::string strip_comment(const std::string& line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') quoted = !quoted;
    if (line[i] == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

std::size_t as_size(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long x = std::stoll(v, &pos);
    if (pos != v.size() || x < 0) throw std::invalid_argument(v);
    return static_cast<std::size_t>(x);
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
}

std::uint64_t as_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const auto x = std::stoull(v, &pos);
    if (pos != v.size() || v.front() == '-') throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected an unsigned integer, got '" + v + "'");
  }
}

double as_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

bool as_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    auto size_field = [&](const std::string& k, auto member) {
      t[k] = [member](RunConfig& c, const std::string& key, const std::string& v) { member(c) = as_size(key, v); };
    };
    auto real_field = [&](const std::string& k, auto member) {
      t[k] = [member](RunConfig& c, const std::string& key, const std::string& v) { member(c) = as_double(key, v); };
    };
    auto bool_field = [&](const std::string& k, auto member) {
      t[k] = [member](RunConfig& c, const std::string& key, const std::string& v) { member(c) = as_bool(key, v); };
    };
    t["seed"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.seed = as_u64(k, v); };
    t["eval_seed"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.eval_seed = as_u64(k, v); };
    t["precision"] = [](RunConfig& c, const std::string&, const std::string& v) { c.precision = parse_precision(v); };

    size_field("model.feature_dim", [](RunConfig& c) -> std::size_t& { return c.model.feature_dim; });
    size_field("model.hidden_dim", [](RunConfig& c) -> std::size_t& { return c.model.hidden_dim; });
    size_field("model.t_iters", [](RunConfig& c) -> std::size_t& { return c.model.t_iters; });
    size_field("model.k_g", [](RunConfig& c) -> std::size_t& { return c.model.k_g; });
    size_field("model.k_s", [](RunConfig& c) -> std::size_t& { return c.model.k_s; });
    size_field("model.interaction_heads", [](RunConfig& c) -> std::size_t& { return c.model.interaction_heads; });
    size_field("model.mlp_ratio", [](RunConfig& c) -> std::size_t& { return c.model.mlp_ratio; });
    size_field("model.decoder_hidden", [](RunConfig& c) -> std::size_t& { return c.model.decoder_hidden; });
    size_field("model.grid_h", [](RunConfig& c) -> std::size_t& { return c.model.grid_h; });
    size_field("model.grid_w", [](RunConfig& c) -> std::size_t& { return c.model.grid_w; });
    bool_field("model.use_interaction", [](RunConfig& c) -> bool& { return c.model.use_interaction; });
    bool_field("model.fusion_mlp", [](RunConfig& c) -> bool& { return c.model.fusion_mlp; });
    t["model.slot_kind"] = [](RunConfig& c, const std::string&, const std::string& v) {
      c.model.slot_kind = parse_slot_kind(v);
    };
    t["model.attention_norm"] = [](RunConfig& c, const std::string&, const std::string& v) {
      c.model.attention_norm = parse_attention_norm(v);
    };
    t["model.positional_encoding"] = [](RunConfig& c, const std::string&, const std::string& v) {
      c.model.positional_encoding = parse_positional_encoding(v);
    };

    size_field("data.grid_h", [](RunConfig& c) -> std::size_t& { return c.data.grid_h; });
    size_field("data.grid_w", [](RunConfig& c) -> std::size_t& { return c.data.grid_w; });
    size_field("data.num_groups", [](RunConfig& c) -> std::size_t& { return c.data.num_groups; });
    size_field("data.max_instances", [](RunConfig& c) -> std::size_t& { return c.data.max_instances; });
    size_field("data.feature_dim", [](RunConfig& c) -> std::size_t& { return c.data.feature_dim; });
    size_field("data.min_side", [](RunConfig& c) -> std::size_t& { return c.data.min_side; });
    size_field("data.max_side", [](RunConfig& c) -> std::size_t& { return c.data.max_side; });
    size_field("data.referent_arity", [](RunConfig& c) -> std::size_t& { return c.data.referent_arity; });
    size_field("data.patch_px", [](RunConfig& c) -> std::size_t& { return c.data.patch_px; });
    size_field("data.num_items", [](RunConfig& c) -> std::size_t& { return c.data.num_items; });
    real_field("data.noise_std", [](RunConfig& c) -> double& { return c.data.noise_std; });
    real_field("data.offset_scale", [](RunConfig& c) -> double& { return c.data.offset_scale; });
    t["data.seed"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.data.seed = as_u64(k, v); };

    size_field("train.batch_size", [](RunConfig& c) -> std::size_t& { return c.batch_size; });
    size_field("train.epochs", [](RunConfig& c) -> std::size_t& { return c.epochs; });
    size_field("train.eval_every", [](RunConfig& c) -> std::size_t& { return c.eval_every; });
    real_field("train.lambda_recon", [](RunConfig& c) -> double& { return c.lambda_recon; });
    real_field("train.temperature", [](RunConfig& c) -> double& { return c.temperature; });
    real_field("train.lr", [](RunConfig& c) -> double& { return c.optim.lr; });
    real_field("train.beta1", [](RunConfig& c) -> double& { return c.optim.beta1; });
    real_field("train.beta2", [](RunConfig& c) -> double& { return c.optim.beta2; });
    real_field("train.eps", [](RunConfig& c) -> double& { return c.optim.eps; });
    real_field("train.weight_decay", [](RunConfig& c) -> double& { return c.optim.weight_decay; });

    real_field("eval.tau", [](RunConfig& c) -> double& { return c.tau; });
    t["eval.scheme"] = [](RunConfig& c, const std::string&, const std::string& v) { c.scheme = parse_scheme(v); };
    return t;
  }();
  return table;
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  data.validate();
  if (model.feature_dim != data.feature_dim) {
    throw ConfigError("model.feature_dim " + std::to_string(model.feature_dim) + " != data.feature_dim " +
                      std::to_string(data.feature_dim));
  }
  if (model.grid_h != data.grid_h || model.grid_w != data.grid_w) {
    throw ConfigError("model grid does not match data grid");
  }
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (!(optim.lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(optim.beta1 >= 0.0 && optim.beta1 < 1.0 && optim.beta2 >= 0.0 && optim.beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (!(optim.eps > 0.0) || optim.weight_decay < 0.0) throw ConfigError("eps must be > 0 and weight_decay >= 0");
  if (lambda_recon < 0.0) throw ConfigError("lambda_recon must be >= 0");
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("tau must lie in (0, 1)");
}

std::string RunConfig::to_json() const {
  nlohmann::json j;
  j["seed"] = seed;
  j["eval_seed"] = eval_seed;
  j["precision"] = to_string(precision);
  j["model"] = {{"feature_dim", model.feature_dim},
                {"hidden_dim", model.hidden_dim},
                {"t_iters", model.t_iters},
                {"slot_kind", to_string(model.slot_kind)},
                {"k_g", model.k_g},
                {"k_s", model.k_s},
                {"interaction_heads", model.interaction_heads},
                {"mlp_ratio", model.mlp_ratio},
                {"use_interaction", model.use_interaction},
                {"attention_norm", to_string(model.attention_norm)},
                {"fusion_mlp", model.fusion_mlp},
                {"decoder_hidden", model.decoder_hidden},
                {"positional_encoding", to_string(model.positional_encoding)},
                {"grid_h", model.grid_h},
                {"grid_w", model.grid_w}};
  j["data"] = {{"grid_h", data.grid_h},
               {"grid_w", data.grid_w},
               {"num_groups", data.num_groups},
               {"max_instances", data.max_instances},
               {"feature_dim", data.feature_dim},
               {"noise_std", data.noise_std},
               {"offset_scale", data.offset_scale},
               {"min_side", data.min_side},
               {"max_side", data.max_side},
               {"referent_arity", data.referent_arity},
               {"patch_px", data.patch_px},
               {"num_items", data.num_items},
               {"seed", data.seed}};
  j["train"] = {{"batch_size", batch_size},       {"epochs", epochs},
                {"eval_every", eval_every},       {"lambda_recon", lambda_recon},
                {"temperature", temperature},     {"lr", optim.lr},
                {"beta1", optim.beta1},           {"beta2", optim.beta2},
                {"eps", optim.eps},               {"weight_decay", optim.weight_decay}};
  j["eval"] = {{"tau", tau}, {"scheme", to_string(scheme)}};
  return j.dump();
}

RunConfig RunConfig::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("config json: ") + e.what());
  }
  // Reuse the TOML setters so both paths accept exactly the same keys.
  std::map<std::string, std::string> flat;
  for (const auto& [key, value] : j.items()) {
    if (value.is_object()) {
      for (const auto& [sub, v] : value.items()) flat[key + "." + sub] = v.is_string() ? v.get<std::string>() : v.dump();
    } else {
      flat[key] = value.is_string() ? value.get<std::string>() : value.dump();
    }
  }
  RunConfig cfg;
  apply_settings(cfg, flat);
  return cfg;
}

RunConfig synthetic_preset() {
  RunConfig cfg;
  cfg.model.feature_dim = 64;
  cfg.model.hidden_dim = 64;
  cfg.model.t_iters = 6;
  cfg.model.k_g = 6;
  cfg.model.k_s = 2;
  // Narrow decoder: reconstruction is auxiliary here and the decoder dominates step time.
  cfg.model.decoder_hidden = 16;
  cfg.model.positional_encoding = PositionalEncoding::TwoD;
  cfg.data = SyntheticSpec{};
  cfg.optim.lr = 1e-3;
  // About 1 / (N * D): keeps the summed squared error on the scale of c3.
  cfg.lambda_recon = 2.7e-5;
  cfg.epochs = 30;
  return cfg;
}

std::map<std::string, std::string> parse_toml(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(strip_comment(line));
    if (line.empty()) continue;
    const std::string where = "line " + std::to_string(lineno);
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty()) throw ConfigError(where + ": empty section name");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) throw ConfigError(where + ": expected key = value");
    if (value.front() == '"') {
      if (value.size() < 2 || value.back() != '"') throw ConfigError(where + ": unterminated string");
      value = value.substr(1, value.size() - 2);
    }
    const std::string full = section.empty() ? key : section + "." + key;
    if (out.count(full)) throw ConfigError(where + ": duplicate key '" + full + "'");
    out[full] = value;
  }
  return out;
}

void apply_settings(RunConfig& cfg, const std::map<std::string, std::string>& settings) {
  for (const auto& [key, value] : settings) {
    const auto it = setters().find(key);
    if (it == setters().end()) throw ConfigError("unknown config key '" + key + "'");
    it->second(cfg, key, value);
  }
}

RunConfig load_config(const std::filesystem::path& path, const RunConfig& base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  RunConfig cfg = base;
  try {
    apply_settings(cfg, parse_toml(ss.str()));
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return cfg;
}

}  // namespace refseg
