#pragma once

// Bit-string watermarks embedded into flattened weights through a random
// normal projection: bit j reads as 1 iff (E^T w)_j > 0, and embedding drives
// sigmoid(E^T w) toward the bits with a binary cross-entropy regularizer.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "robwe/nn.hpp"
#include "robwe/random.hpp"

namespace robwe::wm {

class BitVector {
 public:
  BitVector() = default;
  explicit BitVector(std::vector<std::uint8_t> bits) : bits_(std::move(bits)) {
    for (auto b : bits_)
      if (b > 1) throw std::invalid_argument("BitVector: entries must be 0 or 1");
  }

  static BitVector random(std::size_t length, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::uint8_t> bits(length);
    for (auto& b : bits) b = static_cast<std::uint8_t>(rng.next_u64() >> 63);
    return BitVector(std::move(bits));
  }

  std::size_t size() const { return bits_.size(); }
  bool empty() const { return bits_.empty(); }
  std::uint8_t operator[](std::size_t i) const { return bits_[i]; }
  std::span<const std::uint8_t> bits() const { return bits_; }

  void flip(std::size_t i) { bits_.at(i) ^= 1U; }

  BitVector complement() const {
    auto out = bits_;
    for (auto& b : out) b ^= 1U;
    return BitVector(std::move(out));
  }

  BitVector slice(std::size_t begin, std::size_t length) const {
    if (begin + length > bits_.size()) throw std::out_of_range("BitVector::slice out of range");
    return BitVector({bits_.begin() + static_cast<std::ptrdiff_t>(begin),
                      bits_.begin() + static_cast<std::ptrdiff_t>(begin + length)});
  }

  void append(const BitVector& other) { bits_.insert(bits_.end(), other.bits_.begin(), other.bits_.end()); }

  /// Hex digits, four bits per digit most-significant first, zero padded.
  std::string to_hex() const {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out;
    for (std::size_t i = 0; i < bits_.size(); i += 4) {
      unsigned v = 0;
      for (std::size_t k = 0; k < 4; ++k) v = (v << 1) | (i + k < bits_.size() ? bits_[i + k] : 0U);
      out.push_back(digits[v]);
    }
    return out;
  }

  static BitVector from_hex(const std::string& hex, std::size_t length) {
    if (hex.size() != (length + 3) / 4)
      throw std::invalid_argument("BitVector::from_hex: " + std::to_string(hex.size()) + " digits cannot hold " +
                                  std::to_string(length) + " bits");
    std::vector<std::uint8_t> bits;
    bits.reserve(length);
    for (char ch : hex) {
      unsigned v;
      if (ch >= '0' && ch <= '9') v = static_cast<unsigned>(ch - '0');
      else if (ch >= 'a' && ch <= 'f') v = static_cast<unsigned>(ch - 'a' + 10);
      else if (ch >= 'A' && ch <= 'F') v = static_cast<unsigned>(ch - 'A' + 10);
      else throw std::invalid_argument(std::string("BitVector::from_hex: bad digit '") + ch + "'");
      for (int k = 3; k >= 0 && bits.size() < length; --k) bits.push_back(static_cast<std::uint8_t>((v >> k) & 1U));
    }
    return BitVector(std::move(bits));
  }

  friend bool operator==(const BitVector&, const BitVector&) = default;

 private:
  std::vector<std::uint8_t> bits_;
};

inline std::size_t hamming(const BitVector& a, const BitVector& b) {
  if (a.size() != b.size()) throw std::invalid_argument("hamming: length mismatch");
  std::size_t d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += a[i] != b[i];
  return d;
}

/// 1 - H(b, b~) / |b|.
inline double detection_rate(const BitVector& b, const BitVector& b_tilde) {
  if (b.size() != b_tilde.size())
    throw std::invalid_argument("detection_rate: lengths " + std::to_string(b.size()) + " and " +
                                std::to_string(b_tilde.size()) + " differ");
  if (b.empty()) throw std::invalid_argument("detection_rate: empty watermark");
  // Matching bits over length: the same value as 1 - H/l, without rounding error.
  return static_cast<double>(b.size() - hamming(b, b_tilde)) / static_cast<double>(b.size());
}

/// Segment k takes floor(|c_k| / sum|c| * l) leading bits; the last segment
/// takes whatever remains.
inline std::vector<BitVector> split_watermark(const BitVector& b, std::span<const std::size_t> layer_sizes) {
  if (layer_sizes.empty()) throw std::invalid_argument("split_watermark: no layers");
  std::size_t total = 0;
  for (auto s : layer_sizes) {
    if (s == 0) throw std::invalid_argument("split_watermark: layer size 0");
    total += s;
  }
  if (b.size() < layer_sizes.size())
    throw std::invalid_argument("split_watermark: fewer bits than layers");
  std::vector<BitVector> out;
  std::size_t begin = 0;
  for (std::size_t k = 0; k < layer_sizes.size(); ++k) {
    std::size_t len;
    if (k + 1 == layer_sizes.size()) {
      len = b.size() - begin;
    } else {
      // Integer form of floor(|c_k| / total * l), exact for realistic sizes.
      len = static_cast<std::size_t>((static_cast<unsigned __int128>(layer_sizes[k]) * b.size()) / total);
      len = std::min(len, b.size() - begin);
    }
    out.push_back(b.slice(begin, len));
    begin += len;
  }
  return out;
}

struct EmbeddingMatrix {
  std::uint64_t seed = 0;
  nn::Matrix entries;  // rows = parameters, cols = bits

  std::size_t rows() const { return entries.rows(); }
  std::size_t cols() const { return entries.cols(); }
};

/// I.i.d. N(0, 1) entries; regenerable from (rows, cols, seed).
inline EmbeddingMatrix gen_embedding_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  if (rows == 0 || cols == 0) throw std::invalid_argument("gen_embedding_matrix: zero dimension");
  EmbeddingMatrix e{seed, nn::Matrix(rows, cols)};
  Rng rng(seed);
  for (auto& v : e.entries.values()) v = rng.normal();
  return e;
}

/// E^T * params.
inline std::vector<double> project(std::span<const double> params, const EmbeddingMatrix& e) {
  if (params.size() != e.rows())
    throw std::invalid_argument("project: " + std::to_string(params.size()) + " parameters vs " +
                                std::to_string(e.rows()) + " matrix rows");
  std::vector<double> out(e.cols(), 0.0);
  for (std::size_t r = 0; r < e.rows(); ++r) {
    const double w = params[r];
    if (w == 0.0) continue;
    const auto row = e.entries.row(r);
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += w * row[c];
  }
  return out;
}

/// Zero projection reads as 0.
inline BitVector extract_bits(std::span<const double> params, const EmbeddingMatrix& e) {
  const auto p = project(params, e);
  std::vector<std::uint8_t> bits(p.size());
  for (std::size_t j = 0; j < p.size(); ++j) bits[j] = p[j] > 0.0 ? 1 : 0;
  return BitVector(std::move(bits));
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double z = std::exp(x);
  return z / (1.0 + z);
}

struct EmbeddingLoss {
  double loss = 0.0;
  std::vector<double> grad;  // d loss / d params
};

/// Mean binary cross-entropy between sigmoid(E^T params) and b, with gradient
/// E (sigmoid(E^T params) - b) / |b|.
inline EmbeddingLoss embedding_loss_and_grad(std::span<const double> params, const EmbeddingMatrix& e,
                                             const BitVector& b) {
  if (b.size() != e.cols())
    throw std::invalid_argument("embedding_loss_and_grad: " + std::to_string(b.size()) + " bits vs " +
                                std::to_string(e.cols()) + " matrix columns");
  if (b.empty()) throw std::invalid_argument("embedding_loss_and_grad: empty watermark");
  const auto p = project(params, e);
  const double inv_l = 1.0 / static_cast<double>(b.size());
  EmbeddingLoss out;
  std::vector<double> residual(p.size());
  for (std::size_t j = 0; j < p.size(); ++j) {
    // softplus(p) - b p, written to avoid overflow for large |p|.
    const double x = p[j];
    out.loss += (std::max(x, 0.0) - b[j] * x + std::log1p(std::exp(-std::abs(x)))) * inv_l;
    residual[j] = (sigmoid(x) - b[j]) * inv_l;
  }
  out.grad.assign(params.size(), 0.0);
  for (std::size_t r = 0; r < e.rows(); ++r) {
    const auto row = e.entries.row(r);
    double acc = 0.0;
    for (std::size_t j = 0; j < residual.size(); ++j) acc += row[j] * residual[j];
    out.grad[r] = acc;
  }
  return out;
}

/// One target layer's share of a private watermark.
struct WatermarkSegment {
  std::size_t layer = 0;  // absolute model layer index
  BitVector bits;
  EmbeddingMatrix matrix;
};

/// A client's private watermark key: bits, target layers and per-layer
/// projections. Segments that receive zero bits are omitted.
struct PrivateWatermarkSpec {
  BitVector bits;
  std::vector<std::size_t> target_layers;
  std::vector<WatermarkSegment> segments;
  /// Segment k's matrix is regenerated from derive_seed(matrix_seed, {k}).
  std::uint64_t matrix_seed = 0;
};

inline PrivateWatermarkSpec make_private_watermark(BitVector bits, std::span<const std::size_t> target_layers,
                                                   std::span<const std::size_t> layer_sizes,
                                                   std::uint64_t matrix_seed) {
  if (target_layers.size() != layer_sizes.size())
    throw std::invalid_argument("make_private_watermark: layer list and size list differ");
  PrivateWatermarkSpec spec;
  spec.target_layers.assign(target_layers.begin(), target_layers.end());
  spec.matrix_seed = matrix_seed;
  const auto parts = split_watermark(bits, layer_sizes);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    if (parts[k].empty()) continue;
    const auto seed = derive_seed(matrix_seed, {k});
    spec.segments.push_back({target_layers[k], parts[k], gen_embedding_matrix(layer_sizes[k], parts[k].size(), seed)});
  }
  spec.bits = std::move(bits);
  return spec;
}

/// Reads a private watermark back out of a model's layers.
inline BitVector extract_private(const nn::Model& model, const PrivateWatermarkSpec& spec) {
  BitVector out;
  for (const auto& seg : spec.segments) out.append(extract_bits(nn::flatten(model.layers.at(seg.layer)), seg.matrix));
  return out;
}

inline double private_detection_rate(const nn::Model& model, const PrivateWatermarkSpec& spec) {
  return detection_rate(spec.bits, extract_private(model, spec));
}

}  // namespace robwe::wm
