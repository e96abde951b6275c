#include "dynainfer/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "dynainfer/errors.hpp"

namespace dynainfer {

using nlohmann::json;

std::string_view estimator_name(DerivativeEstimator e) {
  return e == DerivativeEstimator::Exact ? "exact" : "central-difference";
}

DerivativeEstimator parse_estimator(std::string_view name) {
  if (name == "exact") return DerivativeEstimator::Exact;
  if (name == "central-difference") return DerivativeEstimator::CentralDifference;
  throw ConfigError("unknown derivative estimator '" + std::string(name) +
                    "' (valid: exact, central-difference)");
}

std::string Strategy::name() const {
  return dynainfer ? "dynainfer" : std::string(baseline_name(baseline));
}

Strategy Strategy::parse(std::string_view name) {
  if (name == "dynainfer") return {};
  try {
    return {false, parse_baseline(name)};
  } catch (const Error&) {
    throw ConfigError("unknown strategy '" + std::string(name) +
                      "' (valid: dynainfer, all-in-one, one-per-env, random, oracle)");
  }
}

EnvPreset ExperimentConfig::resolved_preset() const {
  EnvPreset p = find_preset(preset);
  if (train_envs) p.train = *train_envs;
  if (adapt_envs) p.adapt = *adapt_envs;
  return p;
}

ExperimentConfig default_config(std::string_view system) {
  ExperimentConfig c;
  if (system == "lv") {
    c.system = "lv";
    c.preset = "paper-lv";
    c.per_env = {4, 32, 4, 32};
    c.env_count = 9;
    c.model.features = FeatureKind::RawState;
    c.hyper.epochs = 50;
  } else if (system == "gs") {
    c.system = "gs";
    c.preset = "paper-gs";
    c.per_env = {10, 32, 10, 32};
    c.env_count = 3;
    c.model.features = FeatureKind::GsStencil;
    c.hyper.epochs = 20;
  } else {
    throw ConfigError("unknown system '" + std::string(system) + "' (valid: lv, gs)");
  }
  c.model.hidden = {64, 64, 64};
  c.model.env_count = c.env_count;
  c.loss = LossSpec::defaults(find_preset(c.preset).spec);
  return c;
}

namespace {

// Object reader that rejects keys nobody asked for.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where("") + " must be an object");
  }
  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }
  const json& at(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }
  std::string where(const std::string& key) const {
    if (path_.empty()) return key.empty() ? "config" : key;
    return key.empty() ? path_ : path_ + "." + key;
  }

  void get_string(const std::string& key, std::string& out) {
    if (!has(key)) return;
    if (!j_.at(key).is_string()) throw ConfigError(where(key) + " must be a string");
    out = j_.at(key).get<std::string>();
  }
  void get_count(const std::string& key, std::size_t& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number_unsigned()) throw ConfigError(where(key) + " must be a nonnegative integer");
    out = v.get<std::size_t>();
  }
  void get_number(const std::string& key, double& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number()) throw ConfigError(where(key) + " must be a number");
    out = v.get<double>();
  }
  void get_bool(const std::string& key, bool& out) {
    if (!has(key)) return;
    if (!j_.at(key).is_boolean()) throw ConfigError(where(key) + " must be true or false");
    out = j_.at(key).get<bool>();
  }
  void get_counts(const std::string& key, std::vector<std::size_t>& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_array()) throw ConfigError(where(key) + " must be an array");
    out.clear();
    for (const json& e : v) {
      if (!e.is_number_unsigned()) throw ConfigError(where(key) + " entries must be nonnegative integers");
      out.push_back(e.get<std::size_t>());
    }
  }
  template <class F>
  void parse_enum(const std::string& key, F parse) {
    if (!has(key)) return;
    if (!j_.at(key).is_string()) throw ConfigError(where(key) + " must be a string");
    try {
      parse(j_.at(key).get<std::string>());
    } catch (const Error& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("unknown key " + where(it.key()));
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

std::vector<EnvironmentParams> parse_envs(const json& j, const std::string& where) {
  if (!j.is_array()) throw ConfigError(where + " must be an array of 4-number arrays");
  std::vector<EnvironmentParams> out;
  for (const json& row : j) {
    if (!row.is_array() || row.size() != 4) {
      throw ConfigError(where + " entries must hold exactly 4 numbers");
    }
    EnvironmentParams p;
    for (std::size_t k = 0; k < 4; ++k) {
      if (!row[k].is_number()) throw ConfigError(where + " entries must be numbers");
      p.values[k] = row[k].get<double>();
    }
    out.push_back(p);
  }
  return out;
}

json envs_json(const std::vector<EnvironmentParams>& envs) {
  json a = json::array();
  for (const EnvironmentParams& p : envs) {
    a.push_back({p.values[0], p.values[1], p.values[2], p.values[3]});
  }
  return a;
}

}  // namespace

ExperimentConfig parse_config(std::string_view json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  Reader top(j, "");
  std::string system = "lv";
  top.get_string("system", system);
  ExperimentConfig c = default_config(system);

  if (top.has("preset")) {
    top.get_string("preset", c.preset);
    try {
      find_preset(c.preset);
    } catch (const Error&) {
      std::string names;
      for (const std::string& n : preset_names()) names += (names.empty() ? "" : ", ") + n;
      throw ConfigError("unknown preset '" + c.preset + "' (valid: " + names + ")");
    }
  }
  if (top.has("environments")) {
    Reader r(top.at("environments"), "environments");
    if (r.has("train")) c.train_envs = parse_envs(r.at("train"), "environments.train");
    if (r.has("adapt")) c.adapt_envs = parse_envs(r.at("adapt"), "environments.adapt");
    r.finish();
  }
  if (top.has("per_env")) {
    Reader r(top.at("per_env"), "per_env");
    r.get_count("train", c.per_env.train);
    r.get_count("test", c.per_env.test);
    r.get_count("adapt", c.per_env.adapt);
    r.get_count("adapt_test", c.per_env.adapt_test);
    r.finish();
  }
  if (top.has("seeds")) {
    const json& s = top.at("seeds");
    if (!s.is_array()) throw ConfigError("seeds must be an array");
    c.seeds.clear();
    for (const json& e : s) {
      if (!e.is_number_unsigned()) throw ConfigError("seeds entries must be nonnegative integers");
      c.seeds.push_back(e.get<std::uint64_t>());
    }
  }
  top.get_count("M", c.env_count);

  if (top.has("model")) {
    Reader r(top.at("model"), "model");
    r.parse_enum("law", [&](const std::string& s) { c.model.law = parse_law(s); });
    r.parse_enum("features", [&](const std::string& s) { c.model.features = parse_feature(s); });
    const bool reg = r.has("regularizer");
    r.parse_enum("regularizer", [&](const std::string& s) { c.model.regularizer = parse_regularizer(s); });
    if (!reg) {
      switch (c.model.law) {
        case DecompositionLaw::FunctionalSum: c.model.regularizer = Regularizer::FunctionNorm; break;
        case DecompositionLaw::ParamOffset: c.model.regularizer = Regularizer::L2; break;
        case DecompositionLaw::LinearBasis: c.model.regularizer = Regularizer::Frobenius; break;
      }
    }
    if (c.model.law == DecompositionLaw::FunctionalSum) c.model.lambda = 1e-4;
    r.get_number("lambda", c.model.lambda);
    r.get_counts("hidden", c.model.hidden);
    r.finish();
  }
  if (top.has("loss")) {
    Reader r(top.at("loss"), "loss");
    r.parse_enum("mode", [&](const std::string& s) { c.loss.mode = parse_loss_mode(s); });
    r.get_count("substeps", c.loss.substeps);
    r.parse_enum("estimator", [&](const std::string& s) { c.loss.estimator = parse_estimator(s); });
    r.finish();
  }
  if (top.has("train")) {
    Reader r(top.at("train"), "train");
    r.parse_enum("strategy", [&](const std::string& s) { c.strategy = Strategy::parse(s); });
    r.get_count("rounds", c.hyper.rounds);
    r.get_count("epochs", c.hyper.epochs);
    r.get_number("lr", c.hyper.lr);
    r.parse_enum("init", [&](const std::string& s) { c.hyper.init = parse_init(s); });
    r.get_count("init_epochs", c.hyper.init_epochs);
    r.get_count("init_min_support", c.hyper.init_min_support);
    r.get_number("lambda_start", c.hyper.lambda_start);
    r.get_count("anneal_rounds", c.hyper.anneal_rounds);
    r.get_bool("carry_optimizer", c.hyper.carry_optimizer);
    r.get_count("chunk_rows", c.hyper.chunk_rows);
    r.finish();
  }
  if (top.has("eval")) {
    Reader r(top.at("eval"), "eval");
    r.get_count("substeps", c.eval.substeps);
    r.get_count("prefix_points", c.prefix_points);
    r.finish();
  }
  if (top.has("adapt")) {
    Reader r(top.at("adapt"), "adapt");
    r.get_count("epochs", c.adapt_epochs);
    r.get_number("lr", c.adapt_lr);
    r.finish();
  }
  if (top.has("sweep")) {
    Reader r(top.at("sweep"), "sweep");
    r.get_counts("M", c.sweep_m);
    r.finish();
  }
  top.get_string("out", c.out);
  top.finish();

  c.model.env_count = c.env_count;
  validate_config(c);
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FileError("cannot read config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

std::string config_to_json(const ExperimentConfig& c) {
  json j;
  j["system"] = c.system;
  j["preset"] = c.preset;
  if (c.train_envs || c.adapt_envs) {
    json e = json::object();
    if (c.train_envs) e["train"] = envs_json(*c.train_envs);
    if (c.adapt_envs) e["adapt"] = envs_json(*c.adapt_envs);
    j["environments"] = e;
  }
  j["per_env"] = {{"train", c.per_env.train},
                  {"test", c.per_env.test},
                  {"adapt", c.per_env.adapt},
                  {"adapt_test", c.per_env.adapt_test}};
  j["seeds"] = c.seeds;
  j["M"] = c.env_count;
  j["model"] = {{"law", law_name(c.model.law)},
                {"features", feature_name(c.model.features)},
                {"regularizer", regularizer_name(c.model.regularizer)},
                {"lambda", c.model.lambda},
                {"hidden", c.model.hidden}};
  j["loss"] = {{"mode", loss_mode_name(c.loss.mode)},
               {"substeps", c.loss.substeps},
               {"estimator", estimator_name(c.loss.estimator)}};
  j["train"] = {{"strategy", c.strategy.name()},
                {"rounds", c.hyper.rounds},
                {"epochs", c.hyper.epochs},
                {"lr", c.hyper.lr},
                {"init", init_name(c.hyper.init)},
                {"init_epochs", c.hyper.init_epochs},
                {"init_min_support", c.hyper.init_min_support},
                {"lambda_start", c.hyper.lambda_start},
                {"anneal_rounds", c.hyper.anneal_rounds},
                {"carry_optimizer", c.hyper.carry_optimizer},
                {"chunk_rows", c.hyper.chunk_rows}};
  j["eval"] = {{"substeps", c.eval.substeps}, {"prefix_points", c.prefix_points}};
  j["adapt"] = {{"epochs", c.adapt_epochs}, {"lr", c.adapt_lr}};
  j["sweep"] = {{"M", c.sweep_m}};
  j["out"] = c.out;
  return j.dump(2);
}

void validate_config(const ExperimentConfig& c) {
  const EnvPreset p = c.resolved_preset();
  const bool is_lv = p.spec.kind == SystemKind::LotkaVolterra;
  const bool is_gs = p.spec.kind == SystemKind::GrayScott;
  if ((c.system == "lv" && !is_lv) || (c.system == "gs" && !is_gs)) {
    throw ConfigError("preset '" + c.preset + "' does not simulate system '" + c.system + "'");
  }
  for (const EnvironmentParams& e : p.train) {
    try {
      validate_environment(p.spec, e);
    } catch (const Error& err) {
      throw ConfigError(std::string("environments.train: ") + err.what());
    }
  }
  for (const EnvironmentParams& e : p.adapt) {
    try {
      validate_environment(p.spec, e);
    } catch (const Error& err) {
      throw ConfigError(std::string("environments.adapt: ") + err.what());
    }
  }
  if (p.train.empty()) throw ConfigError("no training environments");
  if (c.per_env.train == 0) throw ConfigError("per_env.train must be >= 1");
  if (c.seeds.empty()) throw ConfigError("seeds must not be empty");
  if (c.env_count == 0) throw ConfigError("M must be >= 1");
  if (c.hyper.rounds == 0) throw ConfigError("train.rounds must be >= 1");
  if (!(c.hyper.lr > 0.0)) throw ConfigError("train.lr must be > 0");
  if (!(c.model.lambda >= 0.0)) throw ConfigError("model.lambda must be >= 0");
  if (!(c.hyper.lambda_start >= 0.0)) throw ConfigError("train.lambda_start must be >= 0");
  if (c.prefix_points < 2) throw ConfigError("eval.prefix_points must be >= 2");
  if (c.eval.substeps == 0) throw ConfigError("eval.substeps must be >= 1");
  if (!(c.adapt_lr > 0.0)) throw ConfigError("adapt.lr must be > 0");
  for (std::size_t m : c.sweep_m) {
    if (m == 0) throw ConfigError("sweep.M entries must be >= 1");
  }
  try {
    validate_loss_spec(c.loss);
    std::mt19937_64 rng(0);
    ModelOptions mo = c.model;
    mo.env_count = 1;
    validate_model(make_model(p.spec, mo, rng));
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  if (c.model.law == DecompositionLaw::LinearBasis && c.loss.mode != LossMode::Derivative) {
    throw ConfigError("model.law linear-basis needs loss.mode derivative");
  }
}

std::uint64_t config_hash(const ExperimentConfig& config) {
  ExperimentConfig c = config;
  c.seeds = {0};
  c.out.clear();
  const std::string s = config_to_json(c);
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string run_id(const ExperimentConfig& config, std::uint64_t seed) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(config_hash(config)));
  return "s" + std::to_string(seed) + "-" + buf;
}

std::uint64_t split_seed(std::uint64_t seed, Split split) {
  // splitmix64 of (seed, split)
  std::uint64_t z = seed * 4 + static_cast<std::uint64_t>(split) + 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace dynainfer
