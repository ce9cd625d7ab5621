// robwe: experiment runner.
//
//   robwe train CONFIG [--key value ...]
//   robwe heatmap RUN_DIR
//   robwe fidelity CONFIG [--bits 0,50,100,150] [--key value ...]
//   robwe attack-sweep CONFIG [--grid 0.2:0.1,0.2:0.3,...] [--key value ...]
//   robwe robustness CONFIG [--key value ...]
//
// Every config key may be overridden by a flag of the same name. Results go to
// the config's output_dir (relative paths are placed under $ROBWE_OUTPUT_ROOT
// when it is set).

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "robwe/config.hpp"
#include "robwe/engine.hpp"
#include "robwe/experiments.hpp"
#include "robwe/io.hpp"

namespace fs = std::filesystem;
using namespace robwe;

namespace {

struct ConfigArgs {
  std::string path;
  std::map<std::string, std::string> overrides;
  bool quiet = false;
};

void add_config_args(CLI::App* cmd, ConfigArgs& args) {
  cmd->add_option("config", args.path, "key = value configuration file")->required();
  cmd->add_flag("-q,--quiet", args.quiet, "no per-round progress");
  for (const auto& f : config_detail::fields()) {
    const std::string key = f.key;
    cmd->add_option_function<std::string>(
           "--" + key, [&args, key](const std::string& v) { args.overrides[key] = v; }, "override '" + key + "'")
        ->group("Config overrides");
  }
}

RunConfig resolve(const ConfigArgs& args) {
  auto cfg = load_config(args.path);
  for (const auto& [k, v] : args.overrides) {
    try {
      set_config_value(cfg, k, v);
    } catch (const std::exception& e) {
      throw ConfigError("--" + k + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

Simulation::Observer progress(bool quiet, const std::string& label = "") {
  if (quiet) return {};
  return [label](const Simulation& sim, const RoundReport& r) {
    std::size_t rejected = 0;
    for (const auto& rec : r.records) rejected += !rec.accepted;
    std::fprintf(stderr, "%sround %zu/%zu  clients %zu  rejected %zu  mean main acc %.4f\n", label.c_str(), r.round,
                 sim.config().rounds, r.records.size(), rejected, r.mean_main_acc);
  };
}

std::vector<std::size_t> parse_bits(const std::string& s) {
  std::vector<std::size_t> out;
  if (s.empty()) return out;
  for (const auto& tok : io::split(s)) out.push_back(static_cast<std::size_t>(io::parse_uint(tok)));
  return out;
}

std::vector<std::pair<double, double>> parse_grid(const std::string& s) {
  std::vector<std::pair<double, double>> out;
  if (s.empty()) return out;
  for (const auto& cell : io::split(s)) {
    const auto parts = io::split(cell, ':');
    if (parts.size() != 2) throw std::invalid_argument("grid cell '" + cell + "' must be f_m:f_t");
    out.emplace_back(io::parse_real(parts[0]), io::parse_real(parts[1]));
  }
  return out;
}

int cmd_train(const ConfigArgs& args) {
  const auto cfg = resolve(args);
  Simulation sim(cfg);
  sim.run(progress(args.quiet));
  const auto dir = resolve_output_dir(cfg);
  io::write_run(dir, sim);
  std::cout << "wrote " << dir.string() << '\n';
  return 0;
}

int cmd_heatmap(const std::string& run_dir) {
  const auto h = io::heatmap_from_run(run_dir);
  const auto out = fs::path(run_dir) / "heatmap.csv";
  auto os = io::open_out(out);
  io::write_heatmap_csv(os, h);
  std::cout << "wrote " << out.string() << '\n';
  return 0;
}

int cmd_fidelity(const ConfigArgs& args, const std::string& bits) {
  const auto cfg = resolve(args);
  const auto list = parse_bits(bits);
  std::vector<FidelityRow> rows;
  for (auto b : list) {
    auto one = std::vector<std::size_t>{b};
    if (!args.quiet) std::fprintf(stderr, "fidelity: %zu bits\n", b);
    const auto r = fidelity_sweep(cfg, one);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  const auto dir = resolve_output_dir(cfg);
  fs::create_directories(dir);
  auto os = io::open_out(dir / "fidelity.csv");
  io::write_fidelity_csv(os, rows);
  if (const auto gap = sweep_gap(rows)) std::cout << "gap " << *gap << "%\n";
  std::cout << "wrote " << (dir / "fidelity.csv").string() << '\n';
  return 0;
}

int cmd_attack_sweep(const ConfigArgs& args, const std::string& grid, bool save_runs) {
  const auto base = resolve(args);
  const auto dir = resolve_output_dir(base);
  std::vector<io::AttackRow> rows;
  for (const auto& [f_m, f_t] : parse_grid(grid)) {
    auto cfg = base;
    cfg.malicious_fraction = f_m;
    cfg.tamper_rate = f_t;
    cfg.detector = true;
    cfg.validate();
    const auto label = "f_m=" + io::fmt(f_m) + " f_t=" + io::fmt(f_t) + "  ";
    Simulation sim(cfg);
    sim.run(progress(args.quiet, label));
    rows.push_back({io::noniid_label(cfg), f_m, f_t, attack_report(sim)});
    if (save_runs) io::write_run(dir / ("fm" + io::fmt(f_m) + "_ft" + io::fmt(f_t)), sim);
  }
  fs::create_directories(dir);
  auto os = io::open_out(dir / "attack_sweep.csv");
  io::write_attack_csv(os, rows);
  std::cout << "wrote " << (dir / "attack_sweep.csv").string() << '\n';
  return 0;
}

int cmd_robustness(const ConfigArgs& args) {
  const auto cfg = resolve(args);
  Simulation sim(cfg);
  sim.run(progress(args.quiet));
  const std::vector<double> rates{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  const auto prune = prune_curve(sim, rates);
  const auto ft = finetune_curve(sim, cfg.finetune_rounds, cfg.finetune_lr);
  const auto dir = resolve_output_dir(cfg);
  fs::create_directories(dir);
  auto os = io::open_out(dir / "robustness.csv");
  io::write_robustness_csv(os, prune, ft);
  std::cout << "wrote " << (dir / "robustness.csv").string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"RobWE federated watermarking simulator"};
  app.require_subcommand(1);

  ConfigArgs train_args, fid_args, sweep_args, rob_args;
  std::string run_dir, bits = "0,50,100,150", grid = "0.2:0.1,0.2:0.3,0.4:0.1,0.4:0.3";
  bool save_runs = false;

  auto* train = app.add_subcommand("train", "run federated training and write run artifacts");
  add_config_args(train, train_args);

  auto* heat = app.add_subcommand("heatmap", "cross-client private watermark detection matrix");
  heat->add_option("run_dir", run_dir, "directory written by 'train'")->required();

  auto* fid = app.add_subcommand("fidelity", "main accuracy against private watermark length");
  add_config_args(fid, fid_args);
  fid->add_option("--bits", bits, "comma-separated watermark lengths");

  auto* sweep = app.add_subcommand("attack-sweep", "tamper detection over an (f_m, f_t) grid");
  add_config_args(sweep, sweep_args);
  sweep->add_option("--grid", grid, "comma-separated f_m:f_t cells; empty for none");
  sweep->add_flag("--save-runs", save_runs, "also write each cell's run artifacts");

  auto* rob = app.add_subcommand("robustness", "pruning and fine-tuning curves after training");
  add_config_args(rob, rob_args);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return cmd_train(train_args);
    if (*heat) return cmd_heatmap(run_dir);
    if (*fid) return cmd_fidelity(fid_args, bits);
    if (*sweep) return cmd_attack_sweep(sweep_args, grid, save_runs);
    if (*rob) return cmd_robustness(rob_args);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
