#pragma once

// Run configuration: a flat `key = value` text format, one key per line, `#`
// starts a comment. Every key can also be overridden from the command line.

#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "robwe/detection.hpp"

namespace robwe {

struct RunConfig {
  // Federation and optimizer.
  std::size_t clients = 20;
  double sample_rate = 1.0;
  std::size_t rounds = 30;
  std::size_t head_epochs = 10;
  std::size_t rep_epochs = 1;
  double learning_rate = 0.01;
  std::size_t batch_size = 10;

  // Model: input -> rep_hidden (relu) -> head_hidden (relu) -> classes.
  std::vector<std::size_t> rep_hidden{64, 64};
  std::vector<std::size_t> head_hidden{32};

  // Data.
  std::string dataset = "blobs";  // blobs | idx
  std::string idx_images;
  std::string idx_labels;
  std::size_t num_classes = 4;
  std::size_t input_dim = 32;
  std::size_t samples_per_class = 500;
  double spread = 1.0;
  std::string partition = "dirichlet";  // dirichlet | klabels
  double dirichlet_beta = 0.5;
  std::size_t k_labels = 2;
  std::size_t min_client_samples = 40;
  double test_fraction = 0.2;

  // Watermarks.
  std::size_t private_bits = 100;
  double alpha = 1.0;
  std::size_t slice_bits = 32;        // per client
  std::size_t slice_total_bits = 0;   // 0: clients * slice_bits
  std::size_t region_size = 0;        // 0: rep parameters / clients
  double slice_alpha = 20.0;

  // Attacks.
  double malicious_fraction = 0.0;
  double tamper_rate = 0.1;
  std::string tamper_mode = "fresh";  // fresh | fixed
  std::size_t finetune_rounds = 25;
  double finetune_lr = 0.01;

  // Detector.
  bool detector = true;
  double c_n = 0.975;
  double c_m = 0.5;
  std::size_t beta = 5;
  std::size_t min_cohort = 3;
  bool ban_rejected = false;

  std::uint64_t seed = 1;
  std::string output_dir = "runs/default";

  std::size_t common_bits() const { return slice_total_bits ? slice_total_bits : clients * slice_bits; }
  bool slices_enabled() const { return common_bits() > 0; }
  bool private_enabled() const { return private_bits > 0; }

  detection::DetectorConfig detector_config() const { return {detector, c_n, c_m, beta, min_cohort}; }

  void validate() const;
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::size_t parse_size(const std::string& v) {
  std::size_t out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size())
    throw std::invalid_argument("expected a non-negative integer, got '" + v + "'");
  return out;
}

inline std::uint64_t parse_u64(const std::string& v) {
  std::uint64_t out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size())
    throw std::invalid_argument("expected an unsigned integer, got '" + v + "'");
  return out;
}

inline double parse_double(const std::string& v) {
  double out = 0.0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size())
    throw std::invalid_argument("expected a number, got '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw std::invalid_argument("expected true/false, got '" + v + "'");
}

inline std::vector<std::size_t> parse_sizes(const std::string& v) {
  std::vector<std::size_t> out;
  if (trim(v).empty()) return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_size(trim(item)));
  return out;
}

inline std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string format_sizes(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

struct Field {
  const char* key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
Field size_field(const char* key, T RunConfig::*member) {
  return {key, [member](RunConfig& c, const std::string& v) { c.*member = parse_size(v); },
          [member](const RunConfig& c) { return std::to_string(c.*member); }};
}

inline Field double_field(const char* key, double RunConfig::*member) {
  return {key, [member](RunConfig& c, const std::string& v) { c.*member = parse_double(v); },
          [member](const RunConfig& c) { return format_double(c.*member); }};
}

inline Field bool_field(const char* key, bool RunConfig::*member) {
  return {key, [member](RunConfig& c, const std::string& v) { c.*member = parse_bool(v); },
          [member](const RunConfig& c) { return std::string(c.*member ? "true" : "false"); }};
}

inline Field string_field(const char* key, std::string RunConfig::*member) {
  return {key, [member](RunConfig& c, const std::string& v) { c.*member = v; },
          [member](const RunConfig& c) { return c.*member; }};
}

inline Field list_field(const char* key, std::vector<std::size_t> RunConfig::*member) {
  return {key, [member](RunConfig& c, const std::string& v) { c.*member = parse_sizes(v); },
          [member](const RunConfig& c) { return format_sizes(c.*member); }};
}

inline const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      size_field("clients", &RunConfig::clients),
      double_field("sample_rate", &RunConfig::sample_rate),
      size_field("rounds", &RunConfig::rounds),
      size_field("head_epochs", &RunConfig::head_epochs),
      size_field("rep_epochs", &RunConfig::rep_epochs),
      double_field("learning_rate", &RunConfig::learning_rate),
      size_field("batch_size", &RunConfig::batch_size),
      list_field("rep_hidden", &RunConfig::rep_hidden),
      list_field("head_hidden", &RunConfig::head_hidden),
      string_field("dataset", &RunConfig::dataset),
      string_field("idx_images", &RunConfig::idx_images),
      string_field("idx_labels", &RunConfig::idx_labels),
      size_field("num_classes", &RunConfig::num_classes),
      size_field("input_dim", &RunConfig::input_dim),
      size_field("samples_per_class", &RunConfig::samples_per_class),
      double_field("spread", &RunConfig::spread),
      string_field("partition", &RunConfig::partition),
      double_field("dirichlet_beta", &RunConfig::dirichlet_beta),
      size_field("k_labels", &RunConfig::k_labels),
      size_field("min_client_samples", &RunConfig::min_client_samples),
      double_field("test_fraction", &RunConfig::test_fraction),
      size_field("private_bits", &RunConfig::private_bits),
      double_field("alpha", &RunConfig::alpha),
      size_field("slice_bits", &RunConfig::slice_bits),
      size_field("slice_total_bits", &RunConfig::slice_total_bits),
      size_field("region_size", &RunConfig::region_size),
      double_field("slice_alpha", &RunConfig::slice_alpha),
      double_field("malicious_fraction", &RunConfig::malicious_fraction),
      double_field("tamper_rate", &RunConfig::tamper_rate),
      string_field("tamper_mode", &RunConfig::tamper_mode),
      size_field("finetune_rounds", &RunConfig::finetune_rounds),
      double_field("finetune_lr", &RunConfig::finetune_lr),
      bool_field("detector", &RunConfig::detector),
      double_field("c_n", &RunConfig::c_n),
      double_field("c_m", &RunConfig::c_m),
      size_field("beta", &RunConfig::beta),
      size_field("min_cohort", &RunConfig::min_cohort),
      bool_field("ban_rejected", &RunConfig::ban_rejected),
      {"seed", [](RunConfig& c, const std::string& v) { c.seed = parse_u64(v); },
       [](const RunConfig& c) { return std::to_string(c.seed); }},
      string_field("output_dir", &RunConfig::output_dir),
  };
  return table;
}

}  // namespace config_detail

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void RunConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (clients < 1) fail("clients must be >= 1");
  if (!(sample_rate > 0.0 && sample_rate <= 1.0)) fail("sample_rate must lie in (0, 1]");
  if (static_cast<double>(clients) * sample_rate < 0.5) fail("sample_rate * clients rounds to zero clients");
  if (!(learning_rate >= 0.0)) fail("learning_rate must be non-negative");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (rep_hidden.empty()) fail("rep_hidden needs at least one layer");
  for (auto h : rep_hidden)
    if (h == 0) fail("rep_hidden entries must be positive");
  for (auto h : head_hidden)
    if (h == 0) fail("head_hidden entries must be positive");
  if (dataset != "blobs" && dataset != "idx") fail("dataset must be 'blobs' or 'idx'");
  if (dataset == "idx" && (idx_images.empty() || idx_labels.empty())) fail("idx dataset needs idx_images and idx_labels");
  if (dataset == "blobs" && (num_classes < 2 || input_dim < 1 || samples_per_class < 1))
    fail("blobs need num_classes >= 2, input_dim >= 1, samples_per_class >= 1");
  if (partition != "dirichlet" && partition != "klabels") fail("partition must be 'dirichlet' or 'klabels'");
  if (!(dirichlet_beta > 0.0)) fail("dirichlet_beta must be positive");
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) fail("test_fraction must lie in [0, 1)");
  if (!(alpha >= 0.0) || !(slice_alpha >= 0.0)) fail("embedding strengths must be non-negative");
  if (!(malicious_fraction >= 0.0 && malicious_fraction <= 1.0)) fail("malicious_fraction must lie in [0, 1]");
  if (!(tamper_rate >= 0.0 && tamper_rate <= 1.0)) fail("tamper_rate must lie in [0, 1]");
  if (tamper_mode != "fresh" && tamper_mode != "fixed") fail("tamper_mode must be 'fresh' or 'fixed'");
  if (slices_enabled() && common_bits() < clients) fail("common watermark needs at least one bit per client");
  if (!(finetune_lr >= 0.0)) fail("finetune_lr must be non-negative");
  try {
    detector_config().validate();
  } catch (const std::invalid_argument& e) {
    fail(e.what());
  }
}

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : config_detail::fields())
    if (key == f.key) {
      f.set(cfg, value);
      return;
    }
  throw ConfigError("unknown key '" + key + "'");
}

inline std::string get_config_value(const RunConfig& cfg, const std::string& key) {
  for (const auto& f : config_detail::fields())
    if (key == f.key) return f.get(cfg);
  throw ConfigError("unknown key '" + key + "'");
}

inline bool is_config_key(const std::string& key) {
  for (const auto& f : config_detail::fields())
    if (key == f.key) return true;
  return false;
}

/// Applies `key = value` lines on top of `base`. Errors carry the line number.
inline RunConfig parse_config(std::istream& in, RunConfig base = {}, const std::string& source = "config") {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
    const auto key = config_detail::trim(line.substr(0, eq));
    const auto value = config_detail::trim(line.substr(eq + 1));
    try {
      set_config_value(base, key, value);
    } catch (const std::exception& e) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  return parse_config(in, {}, path);
}

inline std::string to_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& f : config_detail::fields()) out += std::string(f.key) + " = " + f.get(cfg) + "\n";
  return out;
}

/// ROBWE_OUTPUT_ROOT, when set, prefixes relative output directories.
inline std::filesystem::path resolve_output_dir(const RunConfig& cfg) {
  std::filesystem::path p(cfg.output_dir);
  if (p.is_relative())
    if (const char* root = std::getenv("ROBWE_OUTPUT_ROOT"); root && *root) return std::filesystem::path(root) / p;
  return p;
}

}  // namespace robwe
