#pragma once

// CSV / JSON artifacts of a run and readers that parse them back.
//
//   rounds.csv         round,client,embedding_count,slice_acc,accepted,main_acc
//   final_metrics.csv  client,main_acc,private_acc,slice_acc,malicious
//   keys.csv           client,bits,hex,layers,matrix_seed
//   slices.csv         slice manifest (see slicing.hpp)
//   ledger.csv         detector verdicts
//   models.json        personalized models
//   config.txt         resolved configuration
//
// Absent values (NaN) are written as empty fields.

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "robwe/config.hpp"
#include "robwe/detection.hpp"
#include "robwe/engine.hpp"
#include "robwe/experiments.hpp"
#include "robwe/nn.hpp"
#include "robwe/slicing.hpp"
#include "robwe/watermark.hpp"

namespace robwe::io {

class CsvError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string fmt(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  return {buf, std::to_chars(buf, buf + sizeof buf, v).ptr};
}

inline std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : ""; }

inline double parse_real(const std::string& s) {
  if (s.empty()) return std::numeric_limits<double>::quiet_NaN();
  double v = 0.0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) throw std::invalid_argument("not a number: '" + s + "'");
  return v;
}

inline std::optional<double> parse_optional(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return parse_real(s);
}

inline std::uint64_t parse_uint(const std::string& s) {
  std::uint64_t v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc{} || p != s.data() + s.size())
    throw std::invalid_argument("not an unsigned integer: '" + s + "'");
  return v;
}

inline std::vector<std::string> split(const std::string& line, char sep = ',') {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == sep) {
      out.push_back(std::move(cur));
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(std::move(cur));
  return out;
}

/// Calls fn(fields) for every non-empty line after the header; errors carry
/// the line number.
template <typename Fn>
void read_body(std::istream& is, std::size_t width, const std::string& what, Fn&& fn) {
  std::string line;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split(line);
    if (f.size() != width)
      throw CsvError(what + " line " + std::to_string(lineno) + ": expected " + std::to_string(width) + " fields");
    try {
      fn(f);
    } catch (const std::exception& e) {
      throw CsvError(what + " line " + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline std::string read_header(std::istream& is, const std::string& what) {
  std::string line;
  if (!std::getline(is, line)) throw CsvError(what + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

template <typename Fn>
void read_csv(std::istream& is, const std::string& header, const std::string& what, Fn&& fn) {
  if (read_header(is, what) != header) throw CsvError(what + ": expected header '" + header + "'");
  read_body(is, split(header).size(), what, std::forward<Fn>(fn));
}

// ---- rounds.csv

inline constexpr const char* rounds_header = "round,client,embedding_count,slice_acc,accepted,main_acc";

struct RoundRow {
  std::size_t round = 0;
  std::size_t client = 0;
  std::size_t embedding_count = 0;
  double slice_acc = std::numeric_limits<double>::quiet_NaN();
  bool accepted = true;
  double main_acc = std::numeric_limits<double>::quiet_NaN();
};

inline std::vector<RoundRow> round_rows(std::span<const RoundReport> reports) {
  std::vector<RoundRow> rows;
  for (const auto& r : reports)
    for (const auto& c : r.records) rows.push_back({r.round, c.client, c.embedding_count, c.slice_acc, c.accepted, c.main_acc});
  return rows;
}

inline void write_rounds_csv(std::ostream& os, std::span<const RoundReport> reports) {
  os << rounds_header << '\n';
  for (const auto& r : round_rows(reports))
    os << r.round << ',' << r.client << ',' << r.embedding_count << ',' << fmt(r.slice_acc) << ','
       << (r.accepted ? 1 : 0) << ',' << fmt(r.main_acc) << '\n';
}

inline std::vector<RoundRow> read_rounds_csv(std::istream& is) {
  std::vector<RoundRow> rows;
  read_csv(is, rounds_header, "rounds.csv", [&](const std::vector<std::string>& f) {
    const auto accepted = parse_uint(f[4]);
    if (accepted > 1) throw std::invalid_argument("accepted must be 0 or 1");
    rows.push_back({parse_uint(f[0]), parse_uint(f[1]), parse_uint(f[2]), parse_real(f[3]), accepted == 1,
                    parse_real(f[5])});
  });
  return rows;
}

// ---- final_metrics.csv

inline constexpr const char* final_header = "client,main_acc,private_acc,slice_acc,malicious";

inline void write_final_metrics_csv(std::ostream& os, std::span<const ClientFinal> rows) {
  os << final_header << '\n';
  for (const auto& f : rows)
    os << f.client << ',' << fmt(f.main_acc) << ',' << fmt(f.private_acc) << ',' << fmt(f.slice_acc) << ','
       << (f.malicious ? 1 : 0) << '\n';
}

inline std::vector<ClientFinal> read_final_metrics_csv(std::istream& is) {
  std::vector<ClientFinal> rows;
  read_csv(is, final_header, "final_metrics.csv", [&](const std::vector<std::string>& f) {
    rows.push_back({parse_uint(f[0]), parse_real(f[1]), parse_real(f[2]), parse_real(f[3]), parse_uint(f[4]) == 1});
  });
  return rows;
}

// ---- keys.csv: private watermark keys. Matrices are regenerated from the
// seed and the flattened size of each target layer.

inline constexpr const char* keys_header = "client,bits,hex,layers,matrix_seed";

struct KeyRecord {
  std::size_t client = 0;
  wm::BitVector bits;
  std::vector<std::size_t> layers;
  std::uint64_t matrix_seed = 0;
};

inline void write_keys_csv(std::ostream& os, std::span<const ClientState> clients) {
  os << keys_header << '\n';
  for (const auto& c : clients) {
    if (!c.watermark) continue;
    const auto& w = *c.watermark;
    os << c.id << ',' << w.bits.size() << ',' << w.bits.to_hex() << ',';
    for (std::size_t i = 0; i < w.target_layers.size(); ++i) os << (i ? ";" : "") << w.target_layers[i];
    os << ',' << w.matrix_seed << '\n';
  }
}

inline std::vector<KeyRecord> read_keys_csv(std::istream& is) {
  std::vector<KeyRecord> out;
  read_csv(is, keys_header, "keys.csv", [&](const std::vector<std::string>& f) {
    KeyRecord k;
    k.client = parse_uint(f[0]);
    k.bits = wm::BitVector::from_hex(f[2], parse_uint(f[1]));
    for (const auto& l : split(f[3], ';')) k.layers.push_back(parse_uint(l));
    k.matrix_seed = parse_uint(f[4]);
    out.push_back(std::move(k));
  });
  return out;
}

inline wm::PrivateWatermarkSpec rebuild_key(const KeyRecord& k, std::span<const nn::LayerSpec> specs) {
  std::vector<std::size_t> sizes;
  for (auto l : k.layers) {
    if (l >= specs.size()) throw std::invalid_argument("key for client " + std::to_string(k.client) + " names layer " +
                                                       std::to_string(l) + " beyond the model");
    sizes.push_back(specs[l].output_dim * specs[l].input_dim + specs[l].output_dim);
  }
  return wm::make_private_watermark(k.bits, k.layers, sizes, k.matrix_seed);
}

// ---- ledger.csv

inline std::vector<detection::Verdict> read_ledger_csv(std::istream& is) {
  std::vector<detection::Verdict> out;
  read_csv(is, detection::ledger_csv_header, "ledger.csv", [&](const std::vector<std::string>& f) {
    detection::Verdict v;
    v.record = {parse_uint(f[0]), parse_uint(f[1]), parse_uint(f[2]), parse_real(f[3])};
    if (f[4] == "accept") v.decision = detection::Decision::accept;
    else if (f[4] == "reject") v.decision = detection::Decision::reject;
    else throw std::invalid_argument("unknown decision '" + f[4] + "'");
    using detection::Rule;
    bool found = false;
    for (auto r : {Rule::disabled, Rule::insufficient_evidence, Rule::honest_cohort, Rule::malicious_pool})
      if (f[5] == detection::to_string(r)) {
        v.rule = r;
        found = true;
      }
    if (!found) throw std::invalid_argument("unknown rule '" + f[5] + "'");
    out.push_back(v);
  });
  return out;
}

// ---- models.json

inline nlohmann::json model_to_json(const nn::Model& m) {
  nlohmann::json j;
  j["head_begin"] = m.head_begin;
  j["specs"] = nlohmann::json::array();
  for (const auto& s : m.specs)
    j["specs"].push_back({{"input_dim", s.input_dim}, {"output_dim", s.output_dim},
                          {"activation", nn::to_string(s.activation)}});
  j["layers"] = nlohmann::json::array();
  for (const auto& l : m.layers) {
    const auto w = l.weights.values();
    j["layers"].push_back({{"weights", std::vector<double>(w.begin(), w.end())}, {"bias", l.bias}});
  }
  return j;
}

inline nn::Model model_from_json(const nlohmann::json& j) {
  nn::Model m;
  m.head_begin = j.at("head_begin").get<std::size_t>();
  for (const auto& s : j.at("specs"))
    m.specs.push_back({s.at("input_dim").get<std::size_t>(), s.at("output_dim").get<std::size_t>(),
                       nn::activation_from_string(s.at("activation").get<std::string>())});
  nn::validate_specs(m.specs);
  const auto& layers = j.at("layers");
  if (layers.size() != m.specs.size()) throw std::invalid_argument("models.json: layer count does not match specs");
  for (std::size_t i = 0; i < m.specs.size(); ++i) {
    const auto& s = m.specs[i];
    const auto w = layers[i].at("weights").get<std::vector<double>>();
    const auto b = layers[i].at("bias").get<std::vector<double>>();
    if (w.size() != s.input_dim * s.output_dim || b.size() != s.output_dim)
      throw std::invalid_argument("models.json: layer " + std::to_string(i) + " has the wrong shape");
    nn::LayerParams p{nn::Matrix(s.output_dim, s.input_dim), b};
    std::copy(w.begin(), w.end(), p.weights.values().begin());
    m.layers.push_back(std::move(p));
  }
  return m;
}

inline void write_models_json(std::ostream& os, std::span<const nn::Model> models) {
  nlohmann::json j;
  j["models"] = nlohmann::json::array();
  for (const auto& m : models) j["models"].push_back(model_to_json(m));
  os << j.dump() << '\n';
}

inline std::vector<nn::Model> read_models_json(std::istream& is) {
  std::vector<nn::Model> out;
  try {
    const auto j = nlohmann::json::parse(is);
    for (const auto& m : j.at("models")) out.push_back(model_from_json(m));
  } catch (const nlohmann::json::exception& e) {
    throw CsvError(std::string("models.json: ") + e.what());
  }
  return out;
}

// ---- heatmap.csv: row i is model i, column j is watermark j.

inline void write_heatmap_csv(std::ostream& os, const std::vector<std::vector<double>>& h) {
  os << "model";
  const std::size_t cols = h.empty() ? 0 : h.front().size();
  for (std::size_t j = 0; j < cols; ++j) os << ",wm_" << j;
  os << '\n';
  for (std::size_t i = 0; i < h.size(); ++i) {
    os << i;
    for (double v : h[i]) os << ',' << fmt(v);
    os << '\n';
  }
}

inline std::vector<std::vector<double>> read_heatmap_csv(std::istream& is) {
  const auto cols = split(read_header(is, "heatmap.csv"));
  if (cols.empty() || cols[0] != "model") throw CsvError("heatmap.csv: header must start with 'model'");
  std::vector<std::vector<double>> out;
  read_body(is, cols.size(), "heatmap.csv", [&](const std::vector<std::string>& f) {
    if (parse_uint(f[0]) != out.size()) throw std::invalid_argument("rows out of order");
    std::vector<double> row;
    for (std::size_t j = 1; j < f.size(); ++j) row.push_back(parse_real(f[j]));
    out.push_back(std::move(row));
  });
  return out;
}

// ---- fidelity.csv: gap_percent is relative to the zero-bit row.

inline constexpr const char* fidelity_header = "bits,main_acc,gap_percent";

inline void write_fidelity_csv(std::ostream& os, std::span<const FidelityRow> rows) {
  os << fidelity_header << '\n';
  std::optional<double> base;
  for (const auto& r : rows)
    if (r.bits == 0) base = r.main_acc;
  for (const auto& r : rows) {
    os << r.bits << ',' << fmt(r.main_acc) << ',';
    if (base && *base > 0.0) os << fmt(fidelity_gap(*base, r.main_acc));
    os << '\n';
  }
}

inline std::vector<FidelityRow> read_fidelity_csv(std::istream& is) {
  std::vector<FidelityRow> rows;
  read_csv(is, fidelity_header, "fidelity.csv",
           [&](const auto& f) { rows.push_back({parse_uint(f[0]), parse_real(f[1])}); });
  return rows;
}

// ---- attack sweep

inline constexpr const char* attack_header = "noniid,f_m,f_t,w_n,w_m,d_t,d_f,delta";

struct AttackRow {
  std::string noniid;
  double f_m = 0.0;
  double f_t = 0.0;
  AttackReport report;
};

inline std::string noniid_label(const RunConfig& cfg) {
  if (cfg.partition == "klabels") return "K(" + std::to_string(cfg.k_labels) + ")";
  return "Dir(" + fmt(cfg.dirichlet_beta) + ")";
}

inline void write_attack_csv(std::ostream& os, std::span<const AttackRow> rows) {
  os << attack_header << '\n';
  for (const auto& r : rows)
    os << r.noniid << ',' << fmt(r.f_m) << ',' << fmt(r.f_t) << ',' << fmt(r.report.w_n) << ',' << fmt(r.report.w_m)
       << ',' << fmt(r.report.d_t) << ',' << fmt(r.report.d_f) << ',' << fmt(r.report.delta) << '\n';
}

inline std::vector<AttackRow> read_attack_csv(std::istream& is) {
  std::vector<AttackRow> rows;
  read_csv(is, attack_header, "attack sweep", [&](const auto& f) {
    AttackRow r;
    r.noniid = f[0];
    r.f_m = parse_real(f[1]);
    r.f_t = parse_real(f[2]);
    r.report.w_n = parse_optional(f[3]);
    r.report.w_m = parse_optional(f[4]);
    r.report.d_t = parse_real(f[5]);
    r.report.d_f = parse_real(f[6]);
    r.report.delta = parse_optional(f[7]);
    rows.push_back(std::move(r));
  });
  return rows;
}

// ---- robustness.csv

inline constexpr const char* robustness_header = "attack,level,main_acc,private_acc";

inline void write_robustness_csv(std::ostream& os, std::span<const RobustnessPoint> prune,
                                 std::span<const RobustnessPoint> finetune) {
  os << robustness_header << '\n';
  for (const auto& p : prune) os << "prune," << fmt(p.level) << ',' << fmt(p.main_acc) << ',' << fmt(p.private_acc) << '\n';
  for (const auto& p : finetune)
    os << "finetune," << fmt(p.level) << ',' << fmt(p.main_acc) << ',' << fmt(p.private_acc) << '\n';
}

// ---- whole run directory

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write '" + p.string() + "'");
  return os;
}

inline std::ifstream open_in(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw std::runtime_error("missing artifact '" + p.string() + "'");
  return is;
}

inline void write_run(const std::filesystem::path& dir, const Simulation& sim) {
  std::filesystem::create_directories(dir);
  { auto os = open_out(dir / "config.txt"); os << to_text(sim.config()); }
  { auto os = open_out(dir / "rounds.csv"); write_rounds_csv(os, sim.reports()); }
  { auto os = open_out(dir / "final_metrics.csv"); const auto f = final_metrics(sim); write_final_metrics_csv(os, f); }
  { auto os = open_out(dir / "keys.csv"); write_keys_csv(os, sim.clients()); }
  if (!sim.server().slices.empty()) {
    auto os = open_out(dir / "slices.csv");
    slicing::write_manifest(os, sim.server().slices);
  }
  { auto os = open_out(dir / "ledger.csv"); detection::write_ledger_csv(os, sim.server().detector.ledger()); }
  { auto os = open_out(dir / "models.json"); const auto m = personalized_models(sim); write_models_json(os, m); }
}

/// Heatmap from a run directory's models.json and keys.csv.
inline std::vector<std::vector<double>> heatmap_from_run(const std::filesystem::path& dir) {
  auto ms = open_in(dir / "models.json");
  const auto models = read_models_json(ms);
  auto ks = open_in(dir / "keys.csv");
  const auto records = read_keys_csv(ks);
  if (models.empty()) throw std::runtime_error("models.json holds no models");
  std::vector<wm::PrivateWatermarkSpec> keys;
  for (const auto& k : records) keys.push_back(rebuild_key(k, models.front().specs));
  return watermark_heatmap(models, keys);
}

}  // namespace robwe::io
