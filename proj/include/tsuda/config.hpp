#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "tsuda/synthdata.hpp"
#include "tsuda/trainer.hpp"

namespace tsuda {

/// Every knob of an experiment. Each field has a default, so an empty
/// config file is valid.
struct ExperimentConfig {
  std::filesystem::path out_dir = "runs";
  std::filesystem::path data_dir = "data";
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::uint64_t data_seed = 2024;
  std::size_t n_sim_train = 512;
  std::size_t n_real_train = 512;
  std::size_t n_real_train_labeled = 512;
  std::size_t n_real_val = 64;
  std::size_t n_real_eval = 256;
  TrainConfig train;
  DomainParams sim = DomainParams::sim();
  DomainParams real = DomainParams::real();
  /// Text of the file this config was parsed from, echoed into run outputs.
  std::string source_text;

  void validate() const {
    train.validate();
    sim.validate();
    real.validate();
    if (seeds.empty()) throw std::invalid_argument("seeds must list at least one seed");
    const std::size_t m = train.net.spatial_multiple();
    if (sim.height % m || sim.width % m)
      throw std::invalid_argument("image size " + std::to_string(sim.height) + "x" + std::to_string(sim.width) +
                                  " must be a multiple of " + std::to_string(m) + " for depth " +
                                  std::to_string(train.net.depth));
    if (n_sim_train < 1 || n_real_train < 1 || n_real_train_labeled < 1 || n_real_val < 1 || n_real_eval < 1)
      throw std::invalid_argument("dataset sizes must be >= 1");
  }
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  for (std::string item; std::getline(ss, item, ',');) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError("config key '" + key + "': cannot parse '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + v + "'");
}

template <typename E, typename Parse>
std::vector<E> parse_family(const std::string& v, Parse parse) {
  std::vector<E> out;
  if (v == "none") return out;
  for (const auto& item : split_list(v)) out.push_back(parse(item));
  return out;
}

template <typename Seq>
std::string join_names(const Seq& items) {
  if (items.empty()) return "none";
  std::string out;
  for (const auto& it : items) out += (out.empty() ? "" : ",") + std::string(name(it));
  return out;
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

struct Field {
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

inline void add_domain_fields(std::map<std::string, Field>& f, const std::string& prefix,
                              DomainParams ExperimentConfig::*member) {
  auto num = [&](const std::string& key, double DomainParams::*field) {
    f[prefix + key] = {[=](ExperimentConfig& c, const std::string& v) { (c.*member).*field = parse_number<double>(prefix + key, v); },
                       [=](const ExperimentConfig& c) { return fmt((c.*member).*field); }};
  };
  auto flag = [&](const std::string& key, bool DomainParams::*field) {
    f[prefix + key] = {[=](ExperimentConfig& c, const std::string& v) { (c.*member).*field = parse_bool(prefix + key, v); },
                       [=](const ExperimentConfig& c) { return std::string((c.*member).*field ? "true" : "false"); }};
  };
  num("empty_rate", &DomainParams::empty_rate);
  num("two_instrument_rate", &DomainParams::two_instrument_rate);
  num("counterexample_rate", &DomainParams::counterexample_rate);
  num("tool_lo", &DomainParams::tool_lo);
  num("tool_hi", &DomainParams::tool_hi);
  num("background_lo", &DomainParams::background_lo);
  num("background_hi", &DomainParams::background_hi);
  num("texture", &DomainParams::texture);
  num("noise", &DomainParams::noise);
  flag("specular", &DomainParams::specular);
  flag("vignette", &DomainParams::vignette);
  flag("blur", &DomainParams::blur);
}

inline const std::map<std::string, Field>& config_fields() {
  static const std::map<std::string, Field> fields = [] {
    std::map<std::string, Field> f;
    using C = ExperimentConfig;
    auto size_field = [&](const std::string& key, auto getter) {
      f[key] = {[=](C& c, const std::string& v) { getter(c) = parse_number<std::size_t>(key, v); },
                [=](const C& c) { return std::to_string(getter(const_cast<C&>(c))); }};
    };
    auto real_field = [&](const std::string& key, auto getter) {
      f[key] = {[=](C& c, const std::string& v) { getter(c) = parse_number<double>(key, v); },
                [=](const C& c) { return fmt(getter(const_cast<C&>(c))); }};
    };
    auto bool_field = [&](const std::string& key, auto getter) {
      f[key] = {[=](C& c, const std::string& v) { getter(c) = parse_bool(key, v); },
                [=](const C& c) { return std::string(getter(const_cast<C&>(c)) ? "true" : "false"); }};
    };

    f["out_dir"] = {[](C& c, const std::string& v) { c.out_dir = v; }, [](const C& c) { return c.out_dir.string(); }};
    f["data_dir"] = {[](C& c, const std::string& v) { c.data_dir = v; },
                     [](const C& c) { return c.data_dir.string(); }};
    f["seeds"] = {[](C& c, const std::string& v) {
                    c.seeds.clear();
                    for (const auto& s : split_list(v)) c.seeds.push_back(parse_number<std::uint64_t>("seeds", s));
                  },
                  [](const C& c) {
                    std::string out;
                    for (auto s : c.seeds) out += (out.empty() ? "" : ",") + std::to_string(s);
                    return out;
                  }};
    f["data_seed"] = {[](C& c, const std::string& v) { c.data_seed = parse_number<std::uint64_t>("data_seed", v); },
                      [](const C& c) { return std::to_string(c.data_seed); }};
    size_field("n_sim_train", [](C& c) -> std::size_t& { return c.n_sim_train; });
    size_field("n_real_train", [](C& c) -> std::size_t& { return c.n_real_train; });
    size_field("n_real_train_labeled", [](C& c) -> std::size_t& { return c.n_real_train_labeled; });
    size_field("n_real_val", [](C& c) -> std::size_t& { return c.n_real_val; });
    size_field("n_real_eval", [](C& c) -> std::size_t& { return c.n_real_eval; });
    size_field("height", [](C& c) -> std::size_t& { return c.sim.height; });
    size_field("width", [](C& c) -> std::size_t& { return c.sim.width; });

    f["mode"] = {[](C& c, const std::string& v) { c.train.mode = parse_mode(v); },
                 [](const C& c) { return std::string(name(c.train.mode)); }};
    real_field("alpha", [](C& c) -> double& { return c.train.alpha; });
    size_field("batch_size", [](C& c) -> std::size_t& { return c.train.batch_size; });
    size_field("epochs", [](C& c) -> std::size_t& { return c.train.epochs; });
    real_field("lr", [](C& c) -> double& { return c.train.lr; });
    real_field("weight_decay", [](C& c) -> double& { return c.train.weight_decay; });
    real_field("w_max", [](C& c) -> double& { return c.train.w_max; });
    f["consistency_direction"] = {
        [](C& c, const std::string& v) { c.train.consistency_direction = parse_direction(v); },
        [](const C& c) { return std::string(name(c.train.consistency_direction)); }};
    bool_field("harden_targets", [](C& c) -> bool& { return c.train.harden_targets; });
    size_field("input_channels", [](C& c) -> std::size_t& { return c.train.net.input_channels; });
    size_field("base_width", [](C& c) -> std::size_t& { return c.train.net.base_width; });
    size_field("depth", [](C& c) -> std::size_t& { return c.train.net.depth; });

    bool_field("augment_hflip", [](C& c) -> bool& { return c.train.augment.hflip; });
    bool_field("augment_vflip", [](C& c) -> bool& { return c.train.augment.vflip; });
    bool_field("augment_rot90", [](C& c) -> bool& { return c.train.augment.rot90; });
    f["augment_intensity"] = {
        [](C& c, const std::string& v) { c.train.augment.intensity_family = parse_family<IntensityOp>(v, parse_intensity_op); },
        [](const C& c) { return join_names(c.train.augment.intensity_family); }};
    f["perturb_intensity"] = {
        [](C& c, const std::string& v) { c.train.perturb.intensity_family = parse_family<IntensityOp>(v, parse_intensity_op); },
        [](const C& c) { return join_names(c.train.perturb.intensity_family); }};
    f["perturb_corruption"] = {
        [](C& c, const std::string& v) { c.train.perturb.corruption_family = parse_family<CorruptionOp>(v, parse_corruption_op); },
        [](const C& c) { return join_names(c.train.perturb.corruption_family); }};

    add_domain_fields(f, "sim.", &C::sim);
    add_domain_fields(f, "real.", &C::real);
    return f;
  }();
  return fields;
}

}  // namespace detail

/// Applies one `key = value` assignment. Unknown keys and unparsable values
/// throw ConfigError naming the key.
inline void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  const auto& fields = detail::config_fields();
  const auto it = fields.find(key);
  if (it == fields.end()) throw ConfigError("unknown config key '" + key + "'");
  try {
    it->second.set(cfg, value);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
  cfg.real.height = cfg.sim.height;
  cfg.real.width = cfg.sim.width;
}

/// Parses a flat document: one `key = value` per line, `#` starts a comment.
inline ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig cfg;
  cfg.source_text = text;
  std::istringstream in(text);
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string body = detail::trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value', got '" + body + "'");
    const std::string key = detail::trim(body.substr(0, eq));
    const std::string value = detail::trim(body.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    set_config_value(cfg, key, value);
  }
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// Every key with its effective value, sorted by key.
inline std::string resolved_config(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& [key, field] : detail::config_fields()) out += key + " = " + field.get(cfg) + "\n";
  return out;
}

}  // namespace tsuda
