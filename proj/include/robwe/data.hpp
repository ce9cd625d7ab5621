#pragma once

// Datasets, non-IID client partitions and IDX loading.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <numeric>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "robwe/nn.hpp"
#include "robwe/random.hpp"

namespace robwe::data {

struct Dataset {
  nn::Matrix inputs;
  std::vector<int> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }
};

struct Partition {
  std::vector<std::vector<std::size_t>> client_indices;

  std::size_t num_clients() const { return client_indices.size(); }
};

inline void validate(const Dataset& d) {
  if (d.inputs.rows() != d.labels.size()) throw std::invalid_argument("dataset: input/label count mismatch");
  for (int y : d.labels)
    if (y < 0 || static_cast<std::size_t>(y) >= d.num_classes)
      throw std::invalid_argument("dataset: label " + std::to_string(y) + " out of range");
}

inline Dataset subset(const Dataset& d, std::span<const std::size_t> indices) {
  Dataset out;
  out.num_classes = d.num_classes;
  out.inputs = nn::Matrix(indices.size(), d.inputs.cols());
  out.labels.reserve(indices.size());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const auto src = d.inputs.row(indices[r]);
    std::copy(src.begin(), src.end(), out.inputs.row(r).begin());
    out.labels.push_back(d.labels[indices[r]]);
  }
  return out;
}

inline Dataset concat(std::span<const Dataset> parts) {
  Dataset out;
  std::size_t rows = 0, cols = 0;
  for (const auto& p : parts) {
    rows += p.size();
    cols = p.inputs.cols();
    out.num_classes = std::max(out.num_classes, p.num_classes);
  }
  out.inputs = nn::Matrix(rows, cols);
  std::size_t r = 0;
  for (const auto& p : parts)
    for (std::size_t i = 0; i < p.size(); ++i, ++r) {
      std::copy(p.inputs.row(i).begin(), p.inputs.row(i).end(), out.inputs.row(r).begin());
      out.labels.push_back(p.labels[i]);
    }
  return out;
}

inline nn::Batch make_batch(const Dataset& d, std::span<const std::size_t> indices) {
  auto s = subset(d, indices);
  return {std::move(s.inputs), std::move(s.labels)};
}

inline double evaluate_accuracy(const nn::Model& model, const Dataset& d) {
  return nn::evaluate_accuracy(model, d.inputs, d.labels);
}

/// Isotropic Gaussian blobs around seeded N(0, 1) class centers.
inline Dataset gen_synthetic_blobs(std::size_t num_classes, std::size_t dim, std::size_t samples_per_class,
                                   double spread, std::uint64_t seed) {
  if (num_classes == 0 || dim == 0 || samples_per_class == 0)
    throw std::invalid_argument("gen_synthetic_blobs: sizes must be positive");
  if (spread < 0.0) throw std::invalid_argument("gen_synthetic_blobs: spread must be non-negative");
  Rng center_rng(derive_seed(seed, {stream::dataset, 0}));
  nn::Matrix centers(num_classes, dim);
  for (auto& v : centers.values()) v = center_rng.normal();

  Rng rng(derive_seed(seed, {stream::dataset, 1}));
  Dataset d;
  d.num_classes = num_classes;
  d.inputs = nn::Matrix(num_classes * samples_per_class, dim);
  d.labels.reserve(num_classes * samples_per_class);
  std::size_t r = 0;
  for (std::size_t c = 0; c < num_classes; ++c)
    for (std::size_t s = 0; s < samples_per_class; ++s, ++r) {
      for (std::size_t k = 0; k < dim; ++k) d.inputs(r, k) = centers(c, k) + spread * rng.normal();
      d.labels.push_back(static_cast<int>(c));
    }
  return d;
}

inline std::vector<std::vector<std::size_t>> indices_by_class(std::span<const int> labels, std::size_t num_classes) {
  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes)
      throw std::invalid_argument("label out of range");
    by_class[static_cast<std::size_t>(labels[i])].push_back(i);
  }
  return by_class;
}

inline std::size_t infer_num_classes(std::span<const int> labels) {
  int mx = -1;
  for (int y : labels) mx = std::max(mx, y);
  return static_cast<std::size_t>(mx + 1);
}

/// Per-class Dirichlet(beta) proportions, cut from a shuffled class index list.
/// The whole draw is repeated until every client holds at least min_samples.
inline Partition partition_dirichlet(std::span<const int> labels, std::size_t n_clients, double beta,
                                     std::uint64_t seed, std::size_t min_samples = 1,
                                     std::size_t max_attempts = 10000) {
  if (n_clients < 2) throw std::invalid_argument("partition_dirichlet: need at least 2 clients");
  if (!(beta > 0.0)) throw std::invalid_argument("partition_dirichlet: beta must be positive");
  if (min_samples == 0) min_samples = 1;
  if (labels.size() < n_clients * min_samples)
    throw std::invalid_argument("partition_dirichlet: dataset too small for " + std::to_string(n_clients) +
                                " clients");
  const auto by_class = indices_by_class(labels, infer_num_classes(labels));
  Rng rng(derive_seed(seed, {stream::partition}));
  for (std::size_t attempt = 0; attempt < max_attempts; ++attempt) {
    Partition p;
    p.client_indices.assign(n_clients, {});
    for (const auto& cls : by_class) {
      std::vector<std::size_t> idx = cls;
      rng.shuffle(idx);
      const auto props = rng.dirichlet(n_clients, beta);
      double cum = 0.0;
      std::size_t start = 0;
      for (std::size_t c = 0; c < n_clients; ++c) {
        cum += props[c];
        std::size_t stop = c + 1 == n_clients
                               ? idx.size()
                               : std::min(idx.size(), static_cast<std::size_t>(cum * static_cast<double>(idx.size())));
        stop = std::max(stop, start);
        p.client_indices[c].insert(p.client_indices[c].end(), idx.begin() + static_cast<std::ptrdiff_t>(start),
                                   idx.begin() + static_cast<std::ptrdiff_t>(stop));
        start = stop;
      }
    }
    const bool ok = std::all_of(p.client_indices.begin(), p.client_indices.end(),
                                [&](const auto& v) { return v.size() >= min_samples; });
    if (ok) {
      for (auto& v : p.client_indices) std::sort(v.begin(), v.end());
      return p;
    }
  }
  throw std::runtime_error("partition_dirichlet: could not give every client " + std::to_string(min_samples) +
                           " samples");
}

/// Pathological K-label split: client i holds labels perm[(i*k + j) % C] for
/// j < k, and every label's samples are dealt evenly to its holders.
inline Partition partition_k_labels(std::span<const int> labels, std::size_t n_clients, std::size_t k,
                                    std::uint64_t seed) {
  const std::size_t num_classes = infer_num_classes(labels);
  if (n_clients == 0) throw std::invalid_argument("partition_k_labels: need at least one client");
  if (k < 1 || k > num_classes)
    throw std::invalid_argument("partition_k_labels: k=" + std::to_string(k) + " not in [1, " +
                                std::to_string(num_classes) + "]");
  const auto by_class = indices_by_class(labels, num_classes);
  Rng rng(derive_seed(seed, {stream::partition}));
  const auto perm = rng.permutation(num_classes);

  std::vector<std::vector<std::size_t>> holders(num_classes);
  for (std::size_t c = 0; c < n_clients; ++c)
    for (std::size_t j = 0; j < k; ++j) holders[perm[(c * k + j) % num_classes]].push_back(c);

  Partition p;
  p.client_indices.assign(n_clients, {});
  for (std::size_t cls = 0; cls < num_classes; ++cls) {
    const auto& h = holders[cls];
    if (h.empty()) continue;
    if (by_class[cls].size() < h.size())
      throw std::invalid_argument("partition_k_labels: label " + std::to_string(cls) + " has fewer samples than holders");
    std::vector<std::size_t> idx = by_class[cls];
    rng.shuffle(idx);
    for (std::size_t s = 0; s < idx.size(); ++s) p.client_indices[h[s % h.size()]].push_back(idx[s]);
  }
  for (auto& v : p.client_indices) std::sort(v.begin(), v.end());
  return p;
}

namespace detail {
inline std::uint32_t read_be32(std::istream& in, const std::string& what) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error(what + ": truncated header");
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
}
}  // namespace detail

inline constexpr std::uint32_t idx_images_magic = 0x00000803;
inline constexpr std::uint32_t idx_labels_magic = 0x00000801;

/// MNIST-style IDX pair. Pixels are scaled to [0, 1].
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw std::runtime_error("cannot open " + images_path);
  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) throw std::runtime_error("cannot open " + labels_path);

  if (detail::read_be32(img, images_path) != idx_images_magic)
    throw std::runtime_error(images_path + ": bad IDX image magic");
  const auto count = detail::read_be32(img, images_path);
  const auto rows = detail::read_be32(img, images_path);
  const auto cols = detail::read_be32(img, images_path);
  if (detail::read_be32(lab, labels_path) != idx_labels_magic)
    throw std::runtime_error(labels_path + ": bad IDX label magic");
  const auto label_count = detail::read_be32(lab, labels_path);
  if (count != label_count)
    throw std::runtime_error("IDX count mismatch: " + std::to_string(count) + " images vs " +
                             std::to_string(label_count) + " labels");

  const std::size_t pixels = std::size_t{rows} * cols;
  std::vector<unsigned char> buf(pixels * count);
  if (!img.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
    throw std::runtime_error(images_path + ": truncated pixel data");
  std::vector<unsigned char> lbuf(count);
  if (!lab.read(reinterpret_cast<char*>(lbuf.data()), static_cast<std::streamsize>(lbuf.size())))
    throw std::runtime_error(labels_path + ": truncated label data");

  Dataset d;
  d.inputs = nn::Matrix(count, pixels);
  auto v = d.inputs.values();
  for (std::size_t i = 0; i < buf.size(); ++i) v[i] = buf[i] / 255.0;
  d.labels.assign(lbuf.begin(), lbuf.end());
  d.num_classes = infer_num_classes(d.labels);
  return d;
}

/// Shuffles one client's indices and holds out test_fraction of them (at least
/// one sample each side when the shard has two or more).
struct TrainTest {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

inline TrainTest split_train_test(std::span<const std::size_t> indices, double test_fraction, std::uint64_t seed) {
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  Rng rng(seed);
  rng.shuffle(idx);
  std::size_t n_test = static_cast<std::size_t>(test_fraction * static_cast<double>(idx.size()) + 0.5);
  if (idx.size() >= 2) n_test = std::clamp<std::size_t>(n_test, 1, idx.size() - 1);
  else n_test = 0;
  TrainTest out;
  out.test.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
  out.train.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
  return out;
}

}  // namespace robwe::data
