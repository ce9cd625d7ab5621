#pragma once

// Server-side common watermark: one random bit string cut into equal
// per-client slices, each embedded in its own contiguous, non-overlapping block
// of the flattened representation.

#include <cstdint>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "robwe/watermark.hpp"

namespace robwe::slicing {

using wm::BitVector;

struct CommonWatermark {
  BitVector bits;
  /// Slice k covers bits [bounds[k], bounds[k+1]).
  std::vector<std::size_t> bounds;

  std::size_t num_slices() const { return bounds.empty() ? 0 : bounds.size() - 1; }
  BitVector slice(std::size_t k) const { return bits.slice(bounds.at(k), bounds.at(k + 1) - bounds.at(k)); }
};

/// Equal slices of floor(total / n) bits; the last slice takes the remainder.
inline CommonWatermark generate_common_watermark(std::size_t total_bits, std::size_t n_clients, std::uint64_t seed) {
  if (n_clients == 0) throw std::invalid_argument("generate_common_watermark: no clients");
  if (total_bits < n_clients)
    throw std::invalid_argument("generate_common_watermark: " + std::to_string(total_bits) +
                                " bits cannot cover " + std::to_string(n_clients) + " clients");
  CommonWatermark c;
  c.bits = BitVector::random(total_bits, derive_seed(seed, {stream::common_bits}));
  const std::size_t per = total_bits / n_clients;
  for (std::size_t k = 0; k < n_clients; ++k) c.bounds.push_back(k * per);
  c.bounds.push_back(total_bits);
  return c;
}

struct SliceAssignment {
  std::size_t client_id = 0;
  BitVector bits;
  /// Region [region_begin, region_end) of the flattened representation.
  std::size_t region_begin = 0;
  std::size_t region_end = 0;
  std::uint64_t matrix_seed = 0;

  std::size_t region_size() const { return region_end - region_begin; }

  wm::EmbeddingMatrix matrix() const { return wm::gen_embedding_matrix(region_size(), bits.size(), matrix_seed); }

  friend bool operator==(const SliceAssignment&, const SliceAssignment&) = default;
};

/// region_size 0 means floor(rep_param_count / n_clients).
inline std::vector<SliceAssignment> assign_slices(const CommonWatermark& common, std::size_t n_clients,
                                                  std::size_t rep_param_count, std::size_t region_size,
                                                  std::uint64_t seed) {
  if (common.num_slices() != n_clients)
    throw std::invalid_argument("assign_slices: watermark has " + std::to_string(common.num_slices()) +
                                " slices for " + std::to_string(n_clients) + " clients");
  if (region_size == 0) region_size = rep_param_count / n_clients;
  if (region_size == 0 || n_clients * region_size > rep_param_count)
    throw std::invalid_argument("assign_slices: " + std::to_string(rep_param_count) +
                                " representation parameters cannot hold " + std::to_string(n_clients) +
                                " regions of " + std::to_string(region_size));
  std::vector<SliceAssignment> out;
  for (std::size_t k = 0; k < n_clients; ++k) {
    SliceAssignment a;
    a.client_id = k;
    a.bits = common.slice(k);
    if (region_size < a.bits.size())
      throw std::invalid_argument("assign_slices: region of " + std::to_string(region_size) +
                                  " parameters is smaller than a " + std::to_string(a.bits.size()) + "-bit slice");
    a.region_begin = k * region_size;
    a.region_end = (k + 1) * region_size;
    a.matrix_seed = derive_seed(seed, {stream::slice_matrix, k});
    out.push_back(std::move(a));
  }
  return out;
}

inline std::span<const double> region_of(std::span<const double> rep_flat, const SliceAssignment& a) {
  if (a.region_end > rep_flat.size() || a.region_begin > a.region_end)
    throw std::out_of_range("slice region [" + std::to_string(a.region_begin) + ", " + std::to_string(a.region_end) +
                            ") outside representation of " + std::to_string(rep_flat.size()));
  return rep_flat.subspan(a.region_begin, a.region_size());
}

inline BitVector extract_slice(std::span<const double> rep_flat, const SliceAssignment& a) {
  return wm::extract_bits(region_of(rep_flat, a), a.matrix());
}

inline BitVector extract_slice(std::span<const double> rep_flat, const SliceAssignment& a,
                               const wm::EmbeddingMatrix& e) {
  return wm::extract_bits(region_of(rep_flat, a), e);
}

/// Slice loss over the whole representation; the gradient is zero outside the
/// client's region.
inline wm::EmbeddingLoss slice_loss_and_grad(std::span<const double> rep_flat, const SliceAssignment& a,
                                             const wm::EmbeddingMatrix& e, const BitVector& target) {
  auto local = wm::embedding_loss_and_grad(region_of(rep_flat, a), e, target);
  std::vector<double> full(rep_flat.size(), 0.0);
  std::copy(local.grad.begin(), local.grad.end(), full.begin() + static_cast<std::ptrdiff_t>(a.region_begin));
  local.grad = std::move(full);
  return local;
}

inline bool regions_disjoint(std::span<const SliceAssignment> as) {
  for (std::size_t i = 0; i < as.size(); ++i)
    for (std::size_t j = i + 1; j < as.size(); ++j)
      if (as[i].region_begin < as[j].region_end && as[j].region_begin < as[i].region_end) return false;
  return true;
}

inline BitVector reconstruct_common(std::span<const double> rep_flat, std::span<const SliceAssignment> as) {
  BitVector out;
  for (const auto& a : as) out.append(extract_slice(rep_flat, a));
  return out;
}

// Manifest: header line, then one line per client
//   client,slice_bits,slice_hex,region_start,region_end,matrix_seed
inline constexpr const char* manifest_header = "client,slice_bits,slice_hex,region_start,region_end,matrix_seed";

inline void write_manifest(std::ostream& os, std::span<const SliceAssignment> as) {
  os << manifest_header << '\n';
  for (const auto& a : as)
    os << a.client_id << ',' << a.bits.size() << ',' << a.bits.to_hex() << ',' << a.region_begin << ','
       << a.region_end << ',' << a.matrix_seed << '\n';
}

inline std::vector<SliceAssignment> read_manifest(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != manifest_header) throw std::runtime_error("slice manifest: bad header");
  std::vector<SliceAssignment> out;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string f[6];
    for (auto& s : f)
      if (!std::getline(ss, s, ','))
        throw std::runtime_error("slice manifest line " + std::to_string(lineno) + ": expected 6 fields");
    try {
      SliceAssignment a;
      a.client_id = std::stoull(f[0]);
      a.bits = BitVector::from_hex(f[2], std::stoull(f[1]));
      a.region_begin = std::stoull(f[3]);
      a.region_end = std::stoull(f[4]);
      a.matrix_seed = std::stoull(f[5]);
      out.push_back(std::move(a));
    } catch (const std::exception& e) {
      throw std::runtime_error("slice manifest line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace robwe::slicing
