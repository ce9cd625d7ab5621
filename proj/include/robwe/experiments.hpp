#pragma once

// Evaluation on top of finished runs: ownership heatmaps, tamper-attack
// reports, pruning / fine-tuning robustness curves and the fidelity gap.

#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "robwe/attacks.hpp"
#include "robwe/detection.hpp"
#include "robwe/engine.hpp"
#include "robwe/watermark.hpp"

namespace robwe {

/// Entry (i, j): detection rate of watermark j read from model i.
inline std::vector<std::vector<double>> watermark_heatmap(std::span<const nn::Model> models,
                                                          std::span<const wm::PrivateWatermarkSpec> keys) {
  std::vector<std::vector<double>> out(models.size(), std::vector<double>(keys.size()));
  for (std::size_t i = 0; i < models.size(); ++i)
    for (std::size_t j = 0; j < keys.size(); ++j) out[i][j] = wm::private_detection_rate(models[i], keys[j]);
  return out;
}

inline std::vector<wm::PrivateWatermarkSpec> private_keys(const Simulation& sim) {
  std::vector<wm::PrivateWatermarkSpec> keys;
  for (const auto& c : sim.clients())
    if (c.watermark) keys.push_back(*c.watermark);
  return keys;
}

inline std::vector<nn::Model> personalized_models(const Simulation& sim) {
  std::vector<nn::Model> out;
  for (const auto& c : sim.clients()) out.push_back(sim.personalized_model(c.id));
  return out;
}

/// Tamper-attack summary. w_n / w_m are mean slice detection rates (percent)
/// read from the final aggregated representation; absent without clients in
/// the group.
struct AttackReport {
  std::optional<double> w_n;
  std::optional<double> w_m;
  double d_t = 0.0;
  double d_f = 0.0;
  std::optional<double> delta;
};

inline AttackReport attack_report(const Simulation& sim) {
  AttackReport r;
  double sn = 0.0, sm = 0.0;
  std::size_t nn = 0, nm = 0;
  for (const auto& f : final_metrics(sim)) {
    if (std::isnan(f.slice_acc)) continue;
    if (f.malicious) {
      sm += f.slice_acc;
      ++nm;
    } else {
      sn += f.slice_acc;
      ++nn;
    }
  }
  if (nn) r.w_n = 100.0 * sn / static_cast<double>(nn);
  if (nm) r.w_m = 100.0 * sm / static_cast<double>(nm);
  if (r.w_n && r.w_m) r.delta = *r.w_n - *r.w_m;
  if (sim.config().detector) {
    const auto m = detection::detection_metrics(sim.server().detector.ledger(), sim.malicious_clients(),
                                                sim.config().clients);
    r.d_t = m.d_t;
    r.d_f = m.d_f;
  }
  return r;
}

/// Mean slice detection rate per round for honest and malicious uploads.
struct SliceTrace {
  std::size_t round = 0;
  std::optional<double> honest;
  std::optional<double> malicious;
};

inline std::vector<SliceTrace> slice_trace(const Simulation& sim) {
  std::vector<SliceTrace> out;
  for (const auto& r : sim.reports()) {
    SliceTrace t{r.round, {}, {}};
    double sh = 0.0, sm = 0.0;
    std::size_t nh = 0, nm = 0;
    for (const auto& rec : r.records) {
      if (std::isnan(rec.slice_acc)) continue;
      if (sim.malicious_clients().count(rec.client)) {
        sm += rec.slice_acc;
        ++nm;
      } else {
        sh += rec.slice_acc;
        ++nh;
      }
    }
    if (nh) t.honest = sh / static_cast<double>(nh);
    if (nm) t.malicious = sm / static_cast<double>(nm);
    out.push_back(t);
  }
  return out;
}

struct RobustnessPoint {
  double level = 0.0;  // prune rate or fine-tuning epoch
  double main_acc = 0.0;
  double private_acc = 0.0;
};

/// Prunes every client's personalized model at each rate; averages over clients.
inline std::vector<RobustnessPoint> prune_curve(const Simulation& sim, std::span<const double> rates) {
  std::vector<RobustnessPoint> out;
  for (double rate : rates) {
    RobustnessPoint p{rate, 0.0, 0.0};
    std::size_t n = 0;
    for (const auto& c : sim.clients()) {
      if (!c.watermark || c.test.empty()) continue;
      const auto m = attacks::prune_attack(sim.personalized_model(c.id), rate);
      p.main_acc += data::evaluate_accuracy(m, c.test);
      p.private_acc += wm::private_detection_rate(m, *c.watermark);
      ++n;
    }
    if (n) {
      p.main_acc /= static_cast<double>(n);
      p.private_acc /= static_cast<double>(n);
    }
    out.push_back(p);
  }
  return out;
}

/// Fine-tunes every client's personalized model on the next client's training
/// shard (the attacker's own data), recording the mean after each epoch.
inline std::vector<RobustnessPoint> finetune_curve(const Simulation& sim, std::size_t epochs, double learning_rate) {
  const auto clients = sim.clients();
  std::vector<RobustnessPoint> out(epochs);
  for (std::size_t e = 0; e < epochs; ++e) out[e].level = static_cast<double>(e + 1);
  std::size_t n = 0;
  for (const auto& c : clients) {
    if (!c.watermark || c.test.empty()) continue;
    const auto& attacker = clients[(c.id + 1) % clients.size()].train;
    auto m = sim.personalized_model(c.id);
    for (std::size_t e = 0; e < epochs; ++e) {
      m = attacks::finetune_attack(std::move(m), attacker, 1, learning_rate, sim.config().batch_size,
                                   derive_seed(sim.config().seed, {c.id, e}));
      out[e].main_acc += data::evaluate_accuracy(m, c.test);
      out[e].private_acc += wm::private_detection_rate(m, *c.watermark);
    }
    ++n;
  }
  for (auto& p : out)
    if (n) {
      p.main_acc /= static_cast<double>(n);
      p.private_acc /= static_cast<double>(n);
    }
  return out;
}

inline double mean_final_main_acc(const Simulation& sim) {
  std::vector<double> accs;
  for (const auto& f : final_metrics(sim)) accs.push_back(f.main_acc);
  return mean_of(accs);
}

/// Relative accuracy loss in percent: (acc_0 - acc_max) / acc_0 * 100.
inline double fidelity_gap(double acc_unmarked, double acc_max_bits) {
  if (!(acc_unmarked > 0.0)) throw std::invalid_argument("fidelity_gap: baseline accuracy must be positive");
  return (acc_unmarked - acc_max_bits) / acc_unmarked * 100.0;
}

struct FidelityRow {
  std::size_t bits = 0;
  double main_acc = 0.0;
};

/// One run per private-watermark length. Length 0 disables every watermark
/// (private and slices) to give the unmarked baseline.
inline std::vector<FidelityRow> fidelity_sweep(const RunConfig& base, std::span<const std::size_t> bit_list) {
  std::vector<FidelityRow> rows;
  for (auto bits : bit_list) {
    auto cfg = base;
    cfg.private_bits = bits;
    if (bits == 0) {
      cfg.slice_bits = 0;
      cfg.slice_total_bits = 0;
      cfg.malicious_fraction = 0.0;
    }
    Simulation sim(cfg);
    sim.run();
    rows.push_back({bits, mean_final_main_acc(sim)});
  }
  return rows;
}

/// Gap between the zero-bit row and the longest watermark in the sweep.
inline std::optional<double> sweep_gap(std::span<const FidelityRow> rows) {
  const FidelityRow* zero = nullptr;
  const FidelityRow* longest = nullptr;
  for (const auto& r : rows) {
    if (r.bits == 0) zero = &r;
    else if (!longest || r.bits > longest->bits) longest = &r;
  }
  if (!zero || !longest) return std::nullopt;
  return fidelity_gap(zero->main_acc, longest->main_acc);
}

}  // namespace robwe
