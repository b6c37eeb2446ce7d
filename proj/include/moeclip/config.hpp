#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "moeclip/error.hpp"

namespace moeclip {

/// Every knob of a run. Defaults reproduce the reference configuration at desk scale.
struct TrainConfig {
  // MoE adapter
  std::size_t num_experts = 4;
  std::size_t top_k = 2;
  std::size_t rank = 8;
  double alpha = 16.0;
  bool lora_scaling = true;
  double dropout = 0.05;
  double lambda_moe = 0.1;
  double norm_eps = 1e-6;
  bool use_fofs = true;
  std::vector<std::size_t> scales{1, 3, 5};

  // Objective
  double lambda_etf = 0.01;
  double lambda_bal = 0.01;
  double gamma = 2.0;
  double tau = 0.07;

  // Optimizer
  double lr = 5e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::vector<double> lr_decay_milestones{0.6, 0.9};  // fractions of total steps
  double lr_decay_factor = 0.5;
  std::size_t epochs = 20;
  std::size_t batch_size = 2;
  std::uint64_t seed = 0;

  // Model / data geometry
  std::size_t n_levels = 2;
  std::size_t dim = 64;
  std::size_t grid_side = 8;
  std::size_t patch_size = 8;

  // Synthetic data
  std::size_t n_classes = 5;
  std::size_t n_seen = 3;
  std::size_t n_train = 200;
  std::size_t n_test_per_class = 50;
  double anomaly_rate = 0.5;

  std::size_t image_size() const { return grid_side * patch_size; }
  std::size_t patches() const { return grid_side * grid_side; }
  double expert_alpha() const { return lora_scaling ? alpha : static_cast<double>(rank); }

  std::vector<std::size_t> seen_classes() const {
    std::vector<std::size_t> v;
    for (std::size_t c = 0; c < n_seen; ++c) v.push_back(c);
    return v;
  }
  std::vector<std::size_t> unseen_classes() const {
    std::vector<std::size_t> v;
    for (std::size_t c = n_seen; c < n_classes; ++c) v.push_back(c);
    return v;
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* first = text.data();
  const char* last = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) throw FormatError("config: bad value for '" + key + "': '" + text + "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw FormatError("config: bad boolean for '" + key + "': '" + text + "'");
}

template <class T>
std::vector<T> parse_list(const std::string& key, const std::string& text) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<T>(key, trim(item)));
  if (out.empty()) throw FormatError("config: empty list for '" + key + "'");
  return out;
}

inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

template <class T>
std::string format_list(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ",";
    if constexpr (std::is_floating_point_v<T>)
      s += format_double(v[i]);
    else
      s += std::to_string(v[i]);
  }
  return s;
}

/// Uniform table of (key, reader, writer) over TrainConfig fields.
struct ConfigField {
  std::string key;
  std::function<void(TrainConfig&, const std::string&)> read;
  std::function<std::string(const TrainConfig&)> write;
};

template <class T>
ConfigField field(std::string key, T TrainConfig::*member) {
  ConfigField f;
  f.key = key;
  f.read = [member, key](TrainConfig& c, const std::string& text) {
    if constexpr (std::is_same_v<T, bool>)
      c.*member = parse_bool(key, text);
    else if constexpr (std::is_same_v<T, std::vector<std::size_t>> || std::is_same_v<T, std::vector<double>>)
      c.*member = parse_list<typename T::value_type>(key, text);
    else
      c.*member = parse_number<T>(key, text);
  };
  f.write = [member](const TrainConfig& c) -> std::string {
    if constexpr (std::is_same_v<T, bool>)
      return c.*member ? "true" : "false";
    else if constexpr (std::is_same_v<T, std::vector<std::size_t>> || std::is_same_v<T, std::vector<double>>)
      return format_list(c.*member);
    else if constexpr (std::is_floating_point_v<T>)
      return format_double(c.*member);
    else
      return std::to_string(c.*member);
  };
  return f;
}

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = {
      field("num_experts", &TrainConfig::num_experts),
      field("top_k", &TrainConfig::top_k),
      field("rank", &TrainConfig::rank),
      field("alpha", &TrainConfig::alpha),
      field("lora_scaling", &TrainConfig::lora_scaling),
      field("dropout", &TrainConfig::dropout),
      field("lambda_moe", &TrainConfig::lambda_moe),
      field("norm_eps", &TrainConfig::norm_eps),
      field("use_fofs", &TrainConfig::use_fofs),
      field("scales", &TrainConfig::scales),
      field("lambda_etf", &TrainConfig::lambda_etf),
      field("lambda_bal", &TrainConfig::lambda_bal),
      field("gamma", &TrainConfig::gamma),
      field("tau", &TrainConfig::tau),
      field("lr", &TrainConfig::lr),
      field("beta1", &TrainConfig::beta1),
      field("beta2", &TrainConfig::beta2),
      field("adam_eps", &TrainConfig::adam_eps),
      field("lr_decay_milestones", &TrainConfig::lr_decay_milestones),
      field("lr_decay_factor", &TrainConfig::lr_decay_factor),
      field("epochs", &TrainConfig::epochs),
      field("batch_size", &TrainConfig::batch_size),
      field("seed", &TrainConfig::seed),
      field("n_levels", &TrainConfig::n_levels),
      field("dim", &TrainConfig::dim),
      field("grid_side", &TrainConfig::grid_side),
      field("patch_size", &TrainConfig::patch_size),
      field("n_classes", &TrainConfig::n_classes),
      field("n_seen", &TrainConfig::n_seen),
      field("n_train", &TrainConfig::n_train),
      field("n_test_per_class", &TrainConfig::n_test_per_class),
      field("anomaly_rate", &TrainConfig::anomaly_rate),
  };
  return fields;
}

}  // namespace detail

/// Throws FormatError describing the first violated constraint.
inline void validate(const TrainConfig& c) {
  auto req = [](bool ok, const std::string& msg) {
    if (!ok) throw FormatError("config: " + msg);
  };
  req(c.num_experts >= 1, "num_experts must be >= 1");
  req(c.top_k >= 1 && c.top_k <= c.num_experts, "top_k must be in [1, num_experts]");
  req(c.rank >= 1, "rank must be >= 1");
  req(c.alpha > 0.0, "alpha must be positive");
  req(c.dropout >= 0.0 && c.dropout < 1.0, "dropout must be in [0, 1)");
  req(c.lambda_moe >= 0.0 && c.lambda_moe <= 1.0, "lambda_moe must be in [0, 1]");
  req(c.norm_eps > 0.0, "norm_eps must be positive");
  req(!c.scales.empty(), "scales must be non-empty");
  for (auto s : c.scales) req(s % 2 == 1 && s <= c.grid_side, "scales must be odd and <= grid_side");
  req(c.lambda_etf >= 0.0 && c.lambda_bal >= 0.0 && c.gamma >= 0.0, "loss weights must be nonnegative");
  req(c.lambda_etf == 0.0 || c.num_experts >= 2, "lambda_etf > 0 needs num_experts >= 2");
  req(c.tau > 0.0, "tau must be positive");
  req(c.lr > 0.0 && c.beta1 >= 0.0 && c.beta1 < 1.0 && c.beta2 >= 0.0 && c.beta2 < 1.0 && c.adam_eps > 0.0,
      "invalid optimizer settings");
  for (double m : c.lr_decay_milestones) req(m > 0.0 && m <= 1.0, "lr_decay_milestones must be in (0, 1]");
  req(c.lr_decay_factor > 0.0, "lr_decay_factor must be positive");
  req(c.batch_size >= 1, "batch_size must be >= 1");
  req(c.n_levels >= 1, "n_levels must be >= 1");
  req(c.dim >= 2 && c.grid_side >= 1 && c.patch_size >= 1, "invalid geometry");
  req(c.num_experts <= c.dim, "num_experts must not exceed dim");
  req(c.rank <= (c.use_fofs ? c.dim / c.num_experts : c.dim), "rank exceeds the per-expert subspace");
  req(c.n_seen >= 1 && c.n_seen < c.n_classes, "need 1 <= n_seen < n_classes");
  req(c.n_train >= 1, "n_train must be >= 1");
  req(c.anomaly_rate >= 0.0 && c.anomaly_rate <= 1.0, "anomaly_rate must be in [0, 1]");
}

/// Parse flat `key = value` lines; '#' starts a comment. Unknown keys are rejected.
inline TrainConfig parse_config(const std::string& text) {
  TrainConfig c;
  std::map<std::string, const detail::ConfigField*> index;
  for (const auto& f : detail::config_fields()) index[f.key] = &f;
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    auto it = index.find(key);
    if (it == index.end()) throw FormatError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    it->second->read(c, value);
  }
  validate(c);
  return c;
}

inline std::string format_config(const TrainConfig& c) {
  std::string out;
  for (const auto& f : detail::config_fields()) out += f.key + " = " + f.write(c) + "\n";
  return out;
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

}  // namespace moeclip
