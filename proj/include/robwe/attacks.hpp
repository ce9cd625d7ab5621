#pragma once

// Threat models: bit tampering of the common-watermark slice by colluding
// clients, and post-training pruning / fine-tuning of a personalized model.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <set>
#include <span>
#include <stdexcept>
#include <vector>

#include "robwe/client.hpp"
#include "robwe/data.hpp"
#include "robwe/nn.hpp"
#include "robwe/random.hpp"
#include "robwe/watermark.hpp"

namespace robwe::attacks {

struct AttackConfig {
  double f_m = 0.0;
  double f_t = 0.0;
  double prune_rate = 0.0;
  std::size_t finetune_rounds = 25;
  std::uint64_t seed = 0;
};

/// floor(fraction * n), robust to representation error such as 0.1 * 50.
inline std::size_t fraction_count(double fraction, std::size_t n) {
  return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9));
}

/// Flips max(1, floor(f_t * |b|)) distinct positions; f_t = 0 is the identity.
inline wm::BitVector tamper_bits(const wm::BitVector& b, double f_t, std::uint64_t seed) {
  if (!(f_t >= 0.0 && f_t <= 1.0)) throw std::invalid_argument("tamper_bits: f_t must lie in [0, 1]");
  if (f_t == 0.0 || b.empty()) return b;
  const std::size_t flips = std::min(b.size(), std::max<std::size_t>(1, fraction_count(f_t, b.size())));
  Rng rng(seed);
  const auto perm = rng.permutation(b.size());
  auto out = b;
  for (std::size_t i = 0; i < flips; ++i) out.flip(perm[i]);
  return out;
}

/// floor(f_m * n) clients chosen by a seeded permutation.
inline std::set<std::size_t> select_malicious(std::size_t n, double f_m, std::uint64_t seed) {
  if (!(f_m >= 0.0 && f_m <= 1.0)) throw std::invalid_argument("select_malicious: f_m must lie in [0, 1]");
  const std::size_t count = fraction_count(f_m, n);
  Rng rng(derive_seed(seed, {stream::malicious}));
  const auto perm = rng.permutation(n);
  return {perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(count)};
}

/// Flags the colluding clients. The engine makes each flagged client embed
/// tamper_bits(b_Si, f_t) instead of its slice whenever it is sampled.
inline std::set<std::size_t> apply_adaptive_tampering(std::span<ClientState> clients, double f_m, double f_t,
                                                      std::uint64_t seed) {
  if (!(f_t >= 0.0 && f_t <= 1.0)) throw std::invalid_argument("apply_adaptive_tampering: f_t must lie in [0, 1]");
  const auto chosen = select_malicious(clients.size(), f_m, seed);
  for (auto& c : clients) {
    c.malicious = chosen.count(c.id) > 0;
    c.tamper_rate = c.malicious ? f_t : 0.0;
  }
  return chosen;
}

/// Zeroes the prune_rate fraction of smallest-magnitude head weights, ranked
/// globally across head layers. Biases and the representation are untouched.
inline nn::Model prune_attack(nn::Model model, double prune_rate) {
  if (!(prune_rate >= 0.0 && prune_rate < 1.0)) throw std::invalid_argument("prune_attack: rate must lie in [0, 1)");
  std::vector<double*> weights;
  for (auto& layer : model.head())
    for (auto& w : layer.weights.values()) weights.push_back(&w);
  const std::size_t count = fraction_count(prune_rate, weights.size());
  if (count == 0) return model;
  std::vector<std::size_t> order(weights.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return std::abs(*weights[a]) < std::abs(*weights[b]); });
  for (std::size_t i = 0; i < count; ++i) *weights[order[i]] = 0.0;
  return model;
}

/// Plain main-task SGD over every layer for `rounds` epochs.
inline nn::Model finetune_attack(nn::Model model, const data::Dataset& attacker_data, std::size_t rounds,
                                 double learning_rate, std::size_t batch_size = 10, std::uint64_t seed = 0) {
  if (rounds < 1) throw std::invalid_argument("finetune_attack: rounds must be >= 1");
  if (attacker_data.empty()) throw std::invalid_argument("finetune_attack: attacker has no data");
  if (batch_size < 1) throw std::invalid_argument("finetune_attack: batch size must be >= 1");
  Rng rng(derive_seed(seed, {stream::finetune}));
  std::vector<std::size_t> order(attacker_data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < rounds; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const auto len = std::min(batch_size, order.size() - start);
      const auto batch = data::make_batch(attacker_data, std::span(order).subspan(start, len));
      const auto lg = nn::main_task_loss_and_grads(model, batch);
      nn::apply_sgd(model.layers, lg.grads, learning_rate);
    }
  }
  return model;
}

}  // namespace robwe::attacks
