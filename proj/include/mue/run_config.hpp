#pragma once

// Run configuration: a flat text file of `key = value` lines with `#`
// comments. Keys are grouped as model.*, train.*, exit.*, data.* and
// output.*; unknown keys are rejected. Values resolve as command-line
// override, then file value, then built-in default.

#include <algorithm>
#include <charconv>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mue/evalbench.hpp"
#include "mue/exit_policy.hpp"
#include "mue/model.hpp"
#include "mue/training.hpp"

namespace mue {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct UnknownKeyError : ConfigError {
  using ConfigError::ConfigError;
};
struct MissingKeyError : ConfigError {
  using ConfigError::ConfigError;
};
struct ConfigValueError : ConfigError {
  using ConfigError::ConfigError;
};

struct DataConfig {
  Task task = Task::kEntail;
  std::uint64_t seed = 0;
  std::size_t count = 1000;
  std::string path;       // dataset file read by train/infer/bench/profile, written by gen-data
  std::size_t limit = 0;  // evaluate at most this many examples (0 = all)
};

struct OutputConfig {
  std::string checkpoint;
  std::string loss_csv;
  std::string bench_csv;
  std::string profile_csv;
  std::vector<double> theta_grid{1.01};
  bool timing = false;
  EncoderDepthMode depth_mode = EncoderDepthMode::kMean;
  std::size_t profile_samples = 100;
};

struct RunConfig {
  ModelConfig model;
  std::uint64_t init_seed = 0;
  TrainConfig train;
  ExitPolicyConfig exit;
  DataConfig data;
  OutputConfig output;
  std::map<std::string, std::string> explicit_values;  // keys set by file or override

  /// Throws MissingKeyError unless the key was set explicitly.
  void require(const std::string& key) const {
    if (!explicit_values.contains(key)) throw MissingKeyError("missing required config key '" + key + "'");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    throw ConfigValueError("config key '" + key + "': cannot parse '" + value + "' as a number");
  }
  return out;
}

inline std::size_t parse_count(const std::string& key, const std::string& value) {
  return static_cast<std::size_t>(parse_number<std::uint64_t>(key, value));
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigValueError("config key '" + key + "': expected true or false, got '" + value + "'");
}

inline std::vector<double> parse_real_list(const std::string& key, const std::string& value) {
  std::vector<double> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<double>(key, trim(item)));
  if (out.empty()) throw ConfigValueError("config key '" + key + "': empty list");
  return out;
}

template <class F>
auto wrap_value_error(const std::string& key, F&& parse) {
  try {
    return parse();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigValueError("config key '" + key + "': " + e.what());
  }
}

using Setter = void (*)(RunConfig&, const std::string& key, const std::string& value);

inline const std::map<std::string, Setter>& config_schema() {
  static const std::map<std::string, Setter> schema = {
      {"model.n_enc_layers", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.n_enc_layers = parse_count(k, v); }},
      {"model.n_dec_layers", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.n_dec_layers = parse_count(k, v); }},
      {"model.d_model", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.d_model = parse_count(k, v); }},
      {"model.n_heads", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.n_heads = parse_count(k, v); }},
      {"model.ffn_dim", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.ffn_dim = parse_count(k, v); }},
      {"model.vocab_size", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.vocab_size = parse_count(k, v); }},
      {"model.grid_side", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.grid_side = parse_count(k, v); }},
      {"model.max_text_len", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.max_text_len = parse_count(k, v); }},
      {"model.max_gen_len", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.max_gen_len = parse_count(k, v); }},
      {"model.rel_bucket_count", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.rel_bucket_count = parse_count(k, v); }},
      {"model.init_seed", [](RunConfig& c, const std::string& k, const std::string& v) { c.init_seed = parse_number<std::uint64_t>(k, v); }},
      {"train.learning_rate", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.learning_rate = parse_number<double>(k, v); }},
      {"train.steps", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.steps = parse_count(k, v); }},
      {"train.batch_size", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.batch_size = parse_count(k, v); }},
      {"train.seed", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.seed = parse_number<std::uint64_t>(k, v); }},
      {"train.layerwise_loss", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.layerwise_loss = parse_bool(k, v); }},
      {"train.lr_decay", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.lr_decay = parse_bool(k, v); }},
      {"train.optimizer", [](RunConfig& c, const std::string& k, const std::string& v) {
         if (v == "adam") c.train.optimizer = OptimizerKind::kAdam;
         else if (v == "sgd") c.train.optimizer = OptimizerKind::kSgd;
         else throw ConfigValueError("config key '" + k + "': expected adam or sgd, got '" + v + "'");
       }},
      {"exit.kind", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.exit.kind = wrap_value_error(k, [&] { return parse_policy_kind(v); });
       }},
      {"exit.theta", [](RunConfig& c, const std::string& k, const std::string& v) { c.exit.theta = parse_number<double>(k, v); }},
      {"exit.theta_image", [](RunConfig& c, const std::string& k, const std::string& v) { c.exit.theta_image = parse_number<double>(k, v); }},
      {"exit.theta_text", [](RunConfig& c, const std::string& k, const std::string& v) { c.exit.theta_text = parse_number<double>(k, v); }},
      {"exit.beta", [](RunConfig& c, const std::string& k, const std::string& v) { c.exit.beta = parse_number<double>(k, v); }},
      {"exit.tau", [](RunConfig& c, const std::string& k, const std::string& v) { c.exit.tau = parse_number<double>(k, v); }},
      {"exit.patience", [](RunConfig& c, const std::string& k, const std::string& v) { c.exit.patience = parse_count(k, v); }},
      {"exit.confidence_level", [](RunConfig& c, const std::string& k, const std::string& v) { c.exit.confidence_level = parse_number<double>(k, v); }},
      {"data.task", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.data.task = wrap_value_error(k, [&] { return parse_task(v); });
       }},
      {"data.seed", [](RunConfig& c, const std::string& k, const std::string& v) { c.data.seed = parse_number<std::uint64_t>(k, v); }},
      {"data.count", [](RunConfig& c, const std::string& k, const std::string& v) { c.data.count = parse_count(k, v); }},
      {"data.path", [](RunConfig& c, const std::string&, const std::string& v) { c.data.path = v; }},
      {"data.limit", [](RunConfig& c, const std::string& k, const std::string& v) { c.data.limit = parse_count(k, v); }},
      {"output.checkpoint", [](RunConfig& c, const std::string&, const std::string& v) { c.output.checkpoint = v; }},
      {"output.loss_csv", [](RunConfig& c, const std::string&, const std::string& v) { c.output.loss_csv = v; }},
      {"output.bench_csv", [](RunConfig& c, const std::string&, const std::string& v) { c.output.bench_csv = v; }},
      {"output.profile_csv", [](RunConfig& c, const std::string&, const std::string& v) { c.output.profile_csv = v; }},
      {"output.theta_grid", [](RunConfig& c, const std::string& k, const std::string& v) { c.output.theta_grid = parse_real_list(k, v); }},
      {"output.timing", [](RunConfig& c, const std::string& k, const std::string& v) { c.output.timing = parse_bool(k, v); }},
      {"output.depth_mode", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.output.depth_mode = wrap_value_error(k, [&] { return parse_encoder_depth_mode(v); });
       }},
      {"output.profile_samples", [](RunConfig& c, const std::string& k, const std::string& v) { c.output.profile_samples = parse_count(k, v); }},
  };
  return schema;
}

}  // namespace detail

/// Every key the configuration understands.
inline std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& [key, setter] : detail::config_schema()) out.push_back(key);
  return out;
}

/// Key-value pairs of a configuration text. Rejects malformed lines,
/// unknown keys and duplicates.
inline std::map<std::string, std::string> parse_config_text(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (!detail::config_schema().contains(key)) {
      throw UnknownKeyError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    }
    if (!out.emplace(key, value).second) {
      throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    }
  }
  return out;
}

/// Applies `key=value` overrides on top of file values.
inline void apply_overrides(std::map<std::string, std::string>& values, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + o + "': expected key=value");
    const std::string key = detail::trim(o.substr(0, eq));
    if (!detail::config_schema().contains(key)) throw UnknownKeyError("override: unknown key '" + key + "'");
    values[key] = detail::trim(o.substr(eq + 1));
  }
}

/// Typed configuration from explicit values over the built-in defaults.
inline RunConfig resolve_config(const std::map<std::string, std::string>& values) {
  RunConfig cfg;
  for (const auto& [key, value] : values) {
    const auto it = detail::config_schema().find(key);
    if (it == detail::config_schema().end()) throw UnknownKeyError("unknown config key '" + key + "'");
    it->second(cfg, key, value);
  }
  cfg.explicit_values = values;
  cfg.exit.total_steps = cfg.model.max_gen_len;
  auto checked = [](const std::string& what, auto&& validate) {
    try {
      validate();
    } catch (const ContractError& e) {
      throw ConfigValueError(what + ": " + e.what());
    }
  };
  checked("model", [&] { cfg.model.validate(); });
  checked("train", [&] { cfg.train.validate(); });
  checked("exit", [&] { cfg.exit.validate(); });
  return cfg;
}

inline RunConfig load_run_config(const std::string& text, const std::vector<std::string>& overrides = {}) {
  auto values = parse_config_text(text);
  apply_overrides(values, overrides);
  return resolve_config(values);
}

}  // namespace mue
