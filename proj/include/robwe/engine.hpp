#pragma once

// Federated training with decoupled watermark embedding. Each round the server
// samples clients and sends the shared representation. A sampled client
//   1. trains its private head for head_epochs on the main task plus its
//      private-watermark loss, with the representation frozen;
//   2. trains the representation for rep_epochs on the main task plus its
//      slice loss (gradient confined to its slice region), head frozen;
//   3. uploads the representation and keeps the head.
// The server scores each upload's slice, lets the detector accept or reject
// it, and averages the accepted uploads into the next representation.

#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <set>
#include <span>
#include <stdexcept>
#include <vector>

#include "robwe/attacks.hpp"
#include "robwe/client.hpp"
#include "robwe/config.hpp"
#include "robwe/data.hpp"
#include "robwe/detection.hpp"
#include "robwe/nn.hpp"
#include "robwe/slicing.hpp"
#include "robwe/watermark.hpp"

namespace robwe {

inline data::Dataset load_dataset(const RunConfig& cfg) {
  if (cfg.dataset == "idx") return data::load_idx(cfg.idx_images, cfg.idx_labels);
  return data::gen_synthetic_blobs(cfg.num_classes, cfg.input_dim, cfg.samples_per_class, cfg.spread, cfg.seed);
}

inline data::Partition make_partition(const RunConfig& cfg, const data::Dataset& d) {
  if (cfg.partition == "klabels") return data::partition_k_labels(d.labels, cfg.clients, cfg.k_labels, cfg.seed);
  return data::partition_dirichlet(d.labels, cfg.clients, cfg.dirichlet_beta, cfg.seed, cfg.min_client_samples);
}

struct FederatedData {
  std::vector<data::Dataset> train;
  std::vector<data::Dataset> test;
  std::size_t input_dim = 0;
  std::size_t num_classes = 0;
};

inline FederatedData build_federated_data(const RunConfig& cfg) {
  const auto full = load_dataset(cfg);
  data::validate(full);
  const auto part = make_partition(cfg, full);
  FederatedData fd;
  fd.input_dim = full.inputs.cols();
  fd.num_classes = full.num_classes;
  for (std::size_t c = 0; c < cfg.clients; ++c) {
    const auto tt = data::split_train_test(part.client_indices[c], cfg.test_fraction,
                                           derive_seed(cfg.seed, {stream::split, c}));
    fd.train.push_back(data::subset(full, tt.train));
    fd.test.push_back(data::subset(full, tt.test));
  }
  return fd;
}

struct ModelLayout {
  std::vector<nn::LayerSpec> specs;
  std::size_t head_begin = 0;
};

inline ModelLayout model_layout(const RunConfig& cfg, std::size_t input_dim, std::size_t num_classes) {
  ModelLayout layout;
  std::size_t in = input_dim;
  for (auto h : cfg.rep_hidden) {
    layout.specs.push_back({in, h, nn::Activation::relu});
    in = h;
  }
  layout.head_begin = layout.specs.size();
  for (auto h : cfg.head_hidden) {
    layout.specs.push_back({in, h, nn::Activation::relu});
    in = h;
  }
  layout.specs.push_back({in, num_classes, nn::Activation::softmax_output});
  nn::validate_specs(layout.specs);
  return layout;
}

/// Personalized model from a flattened representation and a private head.
inline nn::Model compose(const ModelLayout& layout, std::span<const double> representation,
                         std::span<const nn::LayerParams> head) {
  nn::Model m;
  m.specs = layout.specs;
  m.head_begin = layout.head_begin;
  for (const auto& s : layout.specs)
    m.layers.push_back({nn::Matrix(s.output_dim, s.input_dim), std::vector<double>(s.output_dim, 0.0)});
  nn::unflatten(representation, m.representation());
  if (head.size() != m.head().size()) throw std::invalid_argument("compose: head layer count mismatch");
  std::copy(head.begin(), head.end(), m.head().begin());
  return m;
}

/// round(p * n) distinct clients, ascending, deterministic per (seed, round).
inline std::vector<std::size_t> sample_clients(std::size_t n, double p, std::uint64_t seed, std::size_t round) {
  if (!(p > 0.0 && p <= 1.0)) throw std::invalid_argument("sample_clients: p must lie in (0, 1]");
  const auto count = static_cast<std::size_t>(std::llround(p * static_cast<double>(n)));
  if (count < 1) throw std::invalid_argument("sample_clients: p * n rounds to zero clients");
  Rng rng(derive_seed(seed, {stream::sampling, round}));
  auto perm = rng.permutation(n);
  perm.resize(std::min(count, n));
  std::sort(perm.begin(), perm.end());
  return perm;
}

/// Element-wise mean of the uploads.
inline std::vector<double> aggregate(std::span<const std::vector<double>> reps) {
  if (reps.empty()) throw std::invalid_argument("aggregate: no accepted uploads");
  std::vector<double> out(reps.front().size(), 0.0);
  for (const auto& r : reps) {
    if (r.size() != out.size()) throw std::invalid_argument("aggregate: upload size mismatch");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += r[i];
  }
  const auto k = static_cast<double>(reps.size());
  for (auto& v : out) v /= k;
  return out;
}

/// Slice bits a client actually embeds this round.
inline wm::BitVector slice_target(const ClientState& client, const RunConfig& cfg, std::size_t round) {
  if (!client.malicious) return client.slice->bits;
  const auto seed = cfg.tamper_mode == "fixed" ? derive_seed(cfg.seed, {stream::tamper, client.id})
                                               : derive_seed(cfg.seed, {stream::tamper, client.id, round});
  return attacks::tamper_bits(client.slice->bits, client.tamper_rate, seed);
}

namespace engine_detail {

template <typename Fn>
void for_each_batch(const data::Dataset& d, std::size_t batch_size, Rng& rng, Fn&& fn) {
  std::vector<std::size_t> order(d.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const auto len = std::min(batch_size, order.size() - start);
    fn(data::make_batch(d, std::span(order).subspan(start, len)));
  }
}

}  // namespace engine_detail

/// Gradient for one head step: main task plus alpha times the private
/// watermark term on each target layer. main_task = false drops the first
/// term (used to audit the embedding path on its own).
inline nn::Gradients head_step_grads(const nn::Model& model, const nn::Batch& batch, const ClientState& client,
                                     const RunConfig& cfg, bool main_task = true) {
  auto grads = main_task ? nn::main_task_loss_and_grads(model, batch).grads : nn::zeros_like(model.layers);
  if (client.watermark)
    for (const auto& seg : client.watermark->segments) {
      auto& g = grads[seg.layer];
      const auto el = wm::embedding_loss_and_grad(nn::flatten(model.layers[seg.layer]), seg.matrix, seg.bits);
      auto flat = nn::flatten(g);
      for (std::size_t i = 0; i < flat.size(); ++i) flat[i] += cfg.alpha * el.grad[i];
      nn::unflatten(flat, g);
    }
  return grads;
}

/// Gradient for one representation step: main task plus slice_alpha times the
/// slice term, the latter confined to the client's region.
inline nn::Gradients rep_step_grads(const nn::Model& model, const nn::Batch& batch, const ClientState& client,
                                    const wm::BitVector& target, const RunConfig& cfg, bool main_task = true) {
  auto grads = main_task ? nn::main_task_loss_and_grads(model, batch).grads : nn::zeros_like(model.layers);
  if (cfg.slices_enabled()) {
    auto rep_grads = std::span(grads).first(model.head_begin);
    const auto& a = *client.slice;
    const auto rep_flat = nn::flatten(model.representation());
    const auto el = wm::embedding_loss_and_grad(slicing::region_of(rep_flat, a), *client.slice_matrix, target);
    auto flat = nn::flatten(std::span<const nn::LayerParams>(rep_grads));
    for (std::size_t i = 0; i < el.grad.size(); ++i) flat[a.region_begin + i] += cfg.slice_alpha * el.grad[i];
    nn::unflatten(flat, rep_grads);
  }
  return grads;
}

/// Local training for one sampled client; returns the representation to upload
/// and leaves the updated head in client.head.
inline std::vector<double> client_local_update(ClientState& client, std::span<const double> representation,
                                               const ModelLayout& layout, const RunConfig& cfg, std::size_t round) {
  if (cfg.slices_enabled() && (!client.slice || !client.slice_matrix))
    throw std::invalid_argument("client " + std::to_string(client.id) + " has no slice assignment");
  auto model = compose(layout, representation, client.head);
  Rng rng(derive_seed(cfg.seed, {stream::minibatch, client.id, round}));

  if (!client.train.empty()) {
    for (std::size_t e = 0; e < cfg.head_epochs; ++e)
      engine_detail::for_each_batch(client.train, cfg.batch_size, rng, [&](const nn::Batch& batch) {
        const auto g = head_step_grads(model, batch, client, cfg);
        nn::apply_sgd(model.head(), std::span(g).subspan(layout.head_begin), cfg.learning_rate);
      });

    const auto target = cfg.slices_enabled() ? slice_target(client, cfg, round) : wm::BitVector{};
    for (std::size_t e = 0; e < cfg.rep_epochs; ++e)
      engine_detail::for_each_batch(client.train, cfg.batch_size, rng, [&](const nn::Batch& batch) {
        const auto g = rep_step_grads(model, batch, client, target, cfg);
        nn::apply_sgd(model.representation(), std::span(g).first(layout.head_begin), cfg.learning_rate);
      });
  }

  std::copy(model.head().begin(), model.head().end(), client.head.begin());
  return nn::flatten(std::span<const nn::LayerParams>(model.representation()));
}

/// The server never holds client heads.
struct ServerState {
  std::vector<double> representation;
  std::size_t round = 0;
  detection::Detector detector;
  std::vector<slicing::SliceAssignment> slices;
  std::vector<wm::EmbeddingMatrix> slice_matrices;
  std::set<std::size_t> banned;
};

struct ClientRoundRecord {
  std::size_t client = 0;
  std::size_t embedding_count = 0;
  double slice_acc = std::numeric_limits<double>::quiet_NaN();
  bool accepted = true;
  double main_acc = std::numeric_limits<double>::quiet_NaN();
  double private_acc = std::numeric_limits<double>::quiet_NaN();
};

struct RoundReport {
  std::size_t round = 0;
  std::vector<ClientRoundRecord> records;
  double mean_main_acc = std::numeric_limits<double>::quiet_NaN();
  bool aggregated = false;
};

inline double mean_of(std::span<const double> v) {
  double s = 0.0;
  std::size_t n = 0;
  for (double x : v)
    if (!std::isnan(x)) {
      s += x;
      ++n;
    }
  return n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

class Simulation {
 public:
  using Observer = std::function<void(const Simulation&, const RoundReport&)>;

  explicit Simulation(RunConfig cfg) : cfg_(std::move(cfg)), server_{{}, 0, detection::Detector(cfg_.detector_config()), {}, {}, {}} {
    cfg_.validate();
    auto fd = build_federated_data(cfg_);
    layout_ = model_layout(cfg_, fd.input_dim, fd.num_classes);
    initial_ = nn::init_model(layout_.specs, cfg_.seed, layout_.head_begin);
    server_.representation = nn::flatten(std::span<const nn::LayerParams>(initial_.representation()));

    std::vector<std::size_t> head_layers, head_sizes;
    for (std::size_t l = layout_.head_begin; l < layout_.specs.size(); ++l) {
      head_layers.push_back(l);
      head_sizes.push_back(initial_.layers[l].size());
    }

    if (cfg_.slices_enabled()) {
      const auto common = slicing::generate_common_watermark(cfg_.common_bits(), cfg_.clients, cfg_.seed);
      common_bits_ = common.bits;
      server_.slices = slicing::assign_slices(common, cfg_.clients, server_.representation.size(), cfg_.region_size,
                                              cfg_.seed);
      for (const auto& a : server_.slices) server_.slice_matrices.push_back(a.matrix());
    }

    for (std::size_t c = 0; c < cfg_.clients; ++c) {
      ClientState cs;
      cs.id = c;
      cs.head.assign(initial_.head().begin(), initial_.head().end());
      cs.train = std::move(fd.train[c]);
      cs.test = std::move(fd.test[c]);
      if (cfg_.private_enabled())
        cs.watermark = wm::make_private_watermark(
            wm::BitVector::random(cfg_.private_bits, derive_seed(cfg_.seed, {stream::private_bits, c})), head_layers,
            head_sizes, derive_seed(cfg_.seed, {stream::private_matrix, c}));
      if (cfg_.slices_enabled()) {
        cs.slice = server_.slices[c];
        cs.slice_matrix = server_.slice_matrices[c];
      }
      clients_.push_back(std::move(cs));
    }
    malicious_ = attacks::apply_adaptive_tampering(clients_, cfg_.malicious_fraction, cfg_.tamper_rate, cfg_.seed);
  }

  RoundReport run_round() {
    const std::size_t t = ++server_.round;
    const auto sampled = sample_clients(cfg_.clients, cfg_.sample_rate, cfg_.seed, t);

    RoundReport report;
    report.round = t;
    std::vector<std::vector<double>> uploads;
    std::vector<detection::DetectionRecord> records;
    for (auto c : sampled) {
      auto& client = clients_[c];
      ++client.embedding_count;
      uploads.push_back(client_local_update(client, server_.representation, layout_, cfg_, t));

      ClientRoundRecord rec;
      rec.client = c;
      rec.embedding_count = client.embedding_count;
      if (cfg_.slices_enabled())
        rec.slice_acc = wm::detection_rate(
            server_.slices[c].bits,
            slicing::extract_slice(uploads.back(), server_.slices[c], server_.slice_matrices[c]));
      const auto local = compose(layout_, uploads.back(), client.head);
      if (!client.test.empty()) rec.main_acc = data::evaluate_accuracy(local, client.test);
      if (client.watermark) rec.private_acc = wm::private_detection_rate(local, *client.watermark);
      report.records.push_back(rec);
      if (cfg_.slices_enabled()) records.push_back({t, c, client.embedding_count, rec.slice_acc});
    }

    if (cfg_.slices_enabled()) {
      const auto verdicts = server_.detector.review_round(records);
      for (std::size_t i = 0; i < verdicts.size(); ++i)
        report.records[i].accepted = verdicts[i].decision == detection::Decision::accept;
    }
    std::vector<std::vector<double>> accepted;
    for (std::size_t i = 0; i < report.records.size(); ++i) {
      auto& rec = report.records[i];
      if (cfg_.ban_rejected && server_.banned.count(rec.client)) rec.accepted = false;
      if (!rec.accepted) {
        if (cfg_.ban_rejected) server_.banned.insert(rec.client);
        continue;
      }
      accepted.push_back(std::move(uploads[i]));
    }
    if (!accepted.empty()) {
      server_.representation = aggregate(accepted);
      report.aggregated = true;
    }

    std::vector<double> accs;
    for (const auto& r : report.records) accs.push_back(r.main_acc);
    report.mean_main_acc = mean_of(accs);
    reports_.push_back(report);
    return report;
  }

  void run(const Observer& observer = {}) {
    while (server_.round < cfg_.rounds) {
      const auto r = run_round();
      if (observer) observer(*this, r);
    }
  }

  const RunConfig& config() const { return cfg_; }
  const ModelLayout& layout() const { return layout_; }
  const ServerState& server() const { return server_; }
  std::span<const ClientState> clients() const { return clients_; }
  const std::vector<RoundReport>& reports() const { return reports_; }
  const std::set<std::size_t>& malicious_clients() const { return malicious_; }
  const nn::Model& initial_model() const { return initial_; }
  const wm::BitVector& common_watermark() const { return common_bits_; }

  /// Client c's personalized model: its head on the current representation.
  nn::Model personalized_model(std::size_t c) const {
    return compose(layout_, server_.representation, clients_.at(c).head);
  }

 private:
  RunConfig cfg_;
  ModelLayout layout_;
  nn::Model initial_;
  ServerState server_;
  std::vector<ClientState> clients_;
  std::vector<RoundReport> reports_;
  std::set<std::size_t> malicious_;
  wm::BitVector common_bits_;
};

/// Final per-client evaluation of a finished run.
struct ClientFinal {
  std::size_t client = 0;
  double main_acc = std::numeric_limits<double>::quiet_NaN();
  double private_acc = std::numeric_limits<double>::quiet_NaN();
  double slice_acc = std::numeric_limits<double>::quiet_NaN();
  bool malicious = false;
};

inline std::vector<ClientFinal> final_metrics(const Simulation& sim) {
  std::vector<ClientFinal> out;
  const auto& srv = sim.server();
  for (const auto& c : sim.clients()) {
    ClientFinal f;
    f.client = c.id;
    f.malicious = c.malicious;
    const auto m = sim.personalized_model(c.id);
    if (!c.test.empty()) f.main_acc = data::evaluate_accuracy(m, c.test);
    if (c.watermark) f.private_acc = wm::private_detection_rate(m, *c.watermark);
    if (c.slice)
      f.slice_acc = wm::detection_rate(c.slice->bits,
                                       slicing::extract_slice(srv.representation, *c.slice, srv.slice_matrices[c.id]));
    out.push_back(f);
  }
  return out;
}

struct TrainingResult {
  Simulation simulation;
  std::vector<nn::Model> models;
  std::vector<RoundReport> reports;
};

inline TrainingResult run_training(const RunConfig& cfg, const Simulation::Observer& observer = {}) {
  Simulation sim(cfg);
  sim.run(observer);
  std::vector<nn::Model> models;
  for (std::size_t c = 0; c < cfg.clients; ++c) models.push_back(sim.personalized_model(c));
  auto reports = sim.reports();
  return {std::move(sim), std::move(models), std::move(reports)};
}

}  // namespace robwe
