#pragma once

// Dense feed-forward network with manual backpropagation. The model is split
// into a shared representation (layers before head_begin) and a private head.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "robwe/random.hpp"

namespace robwe::nn {

enum class Activation { relu, identity, softmax_output };

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::identity: return "identity";
    case Activation::softmax_output: return "softmax";
  }
  return "?";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "identity") return Activation::identity;
  if (s == "softmax") return Activation::softmax_output;
  throw std::invalid_argument("unknown activation '" + s + "'");
}

struct LayerSpec {
  std::size_t input_dim = 0;
  std::size_t output_dim = 0;
  Activation activation = Activation::relu;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Row-major dense matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Weights are output_dim x input_dim.
struct LayerParams {
  Matrix weights;
  std::vector<double> bias;

  std::size_t size() const { return weights.size() + bias.size(); }

  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

/// Weights row-major, then bias.
inline std::vector<double> flatten(const LayerParams& layer) {
  std::vector<double> out;
  out.reserve(layer.size());
  out.insert(out.end(), layer.weights.values().begin(), layer.weights.values().end());
  out.insert(out.end(), layer.bias.begin(), layer.bias.end());
  return out;
}

inline void unflatten(std::span<const double> flat, LayerParams& layer) {
  if (flat.size() != layer.size()) throw std::invalid_argument("unflatten: length mismatch");
  auto w = layer.weights.values();
  std::copy(flat.begin(), flat.begin() + static_cast<std::ptrdiff_t>(w.size()), w.begin());
  std::copy(flat.begin() + static_cast<std::ptrdiff_t>(w.size()), flat.end(), layer.bias.begin());
}

inline std::size_t param_count(std::span<const LayerParams> layers) {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.size();
  return n;
}

inline std::vector<double> flatten(std::span<const LayerParams> layers) {
  std::vector<double> out;
  out.reserve(param_count(layers));
  for (const auto& l : layers) {
    auto f = flatten(l);
    out.insert(out.end(), f.begin(), f.end());
  }
  return out;
}

inline void unflatten(std::span<const double> flat, std::span<LayerParams> layers) {
  if (flat.size() != param_count(layers)) throw std::invalid_argument("unflatten: length mismatch");
  std::size_t offset = 0;
  for (auto& l : layers) {
    unflatten(flat.subspan(offset, l.size()), l);
    offset += l.size();
  }
}

using Gradients = std::vector<LayerParams>;

struct Model {
  std::vector<LayerSpec> specs;
  std::vector<LayerParams> layers;
  /// Index of the first head layer; layers before it form the representation.
  std::size_t head_begin = 0;

  std::span<LayerParams> representation() { return std::span(layers).first(head_begin); }
  std::span<const LayerParams> representation() const { return std::span(layers).first(head_begin); }
  std::span<LayerParams> head() { return std::span(layers).subspan(head_begin); }
  std::span<const LayerParams> head() const { return std::span(layers).subspan(head_begin); }

  std::size_t input_dim() const { return specs.front().input_dim; }
  std::size_t num_classes() const { return specs.back().output_dim; }

  friend bool operator==(const Model&, const Model&) = default;
};

inline void validate_specs(std::span<const LayerSpec> specs) {
  if (specs.empty()) throw std::invalid_argument("model needs at least one layer");
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& s = specs[i];
    if (s.input_dim == 0 || s.output_dim == 0)
      throw std::invalid_argument("layer " + std::to_string(i) + " has a zero dimension");
    if (i > 0 && s.input_dim != specs[i - 1].output_dim)
      throw std::invalid_argument("layer " + std::to_string(i) + " input_dim " +
                                  std::to_string(s.input_dim) + " does not match previous output_dim " +
                                  std::to_string(specs[i - 1].output_dim));
    if (s.activation == Activation::softmax_output && i + 1 != specs.size())
      throw std::invalid_argument("softmax output is only allowed on the final layer");
  }
}

inline Gradients zeros_like(std::span<const LayerParams> layers) {
  Gradients g;
  g.reserve(layers.size());
  for (const auto& l : layers)
    g.push_back({Matrix(l.weights.rows(), l.weights.cols()), std::vector<double>(l.bias.size(), 0.0)});
  return g;
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero bias. head_begin
/// defaults to the last layer.
inline Model init_model(std::span<const LayerSpec> specs, std::uint64_t seed,
                        std::size_t head_begin = static_cast<std::size_t>(-1)) {
  validate_specs(specs);
  if (head_begin == static_cast<std::size_t>(-1)) head_begin = specs.size() - 1;
  if (head_begin > specs.size()) throw std::invalid_argument("head boundary past last layer");
  Model m;
  m.specs.assign(specs.begin(), specs.end());
  m.head_begin = head_begin;
  Rng rng(derive_seed(seed, {stream::model_init}));
  for (const auto& s : specs) {
    LayerParams p{Matrix(s.output_dim, s.input_dim), std::vector<double>(s.output_dim, 0.0)};
    const double scale = 1.0 / std::sqrt(static_cast<double>(s.input_dim));
    for (auto& w : p.weights.values()) w = rng.uniform(-scale, scale);
    m.layers.push_back(std::move(p));
  }
  return m;
}

struct Batch {
  Matrix inputs;
  std::vector<int> labels;
};

/// Per-layer inputs and pre-activations recorded by forward().
struct ForwardCache {
  std::vector<Matrix> inputs;
  std::vector<Matrix> pre_activations;
};

struct ForwardResult {
  Matrix logits;
  ForwardCache cache;
};

inline ForwardResult forward(const Model& model, const Matrix& inputs) {
  if (model.layers.empty()) throw std::invalid_argument("forward: empty model");
  if (inputs.cols() != model.input_dim())
    throw std::invalid_argument("forward: input has " + std::to_string(inputs.cols()) +
                                " columns, model expects " + std::to_string(model.input_dim()));
  ForwardResult out;
  Matrix x = inputs;
  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    const auto& p = model.layers[li];
    const std::size_t in = p.weights.cols(), outd = p.weights.rows();
    Matrix z(x.rows(), outd);
    for (std::size_t b = 0; b < x.rows(); ++b) {
      const auto xr = x.row(b);
      for (std::size_t o = 0; o < outd; ++o) {
        const auto wr = p.weights.row(o);
        double acc = p.bias[o];
        for (std::size_t i = 0; i < in; ++i) acc += wr[i] * xr[i];
        z(b, o) = acc;
      }
    }
    out.cache.inputs.push_back(std::move(x));
    x = z;
    if (model.specs[li].activation == Activation::relu)
      for (auto& v : x.values()) v = v > 0.0 ? v : 0.0;
    out.cache.pre_activations.push_back(std::move(z));
  }
  out.logits = std::move(x);
  return out;
}

inline std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> p(logits.begin(), logits.end());
  const double mx = *std::max_element(p.begin(), p.end());
  double sum = 0.0;
  for (auto& v : p) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (auto& v : p) v /= sum;
  return p;
}

struct LossAndGrads {
  double loss = 0.0;
  Gradients grads;
};

/// Mean softmax cross-entropy and its gradient for every layer.
inline LossAndGrads main_task_loss_and_grads(const Model& model, const Batch& batch) {
  const std::size_t n = batch.labels.size();
  if (n == 0) throw std::invalid_argument("main_task_loss_and_grads: empty batch");
  if (batch.inputs.rows() != n) throw std::invalid_argument("main_task_loss_and_grads: label count mismatch");
  const std::size_t classes = model.num_classes();
  auto fr = forward(model, batch.inputs);

  LossAndGrads out;
  out.grads = zeros_like(model.layers);
  Matrix delta(n, classes);
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t b = 0; b < n; ++b) {
    const int y = batch.labels[b];
    if (y < 0 || static_cast<std::size_t>(y) >= classes)
      throw std::invalid_argument("label " + std::to_string(y) + " out of range");
    const auto row = fr.logits.row(b);
    const double mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (double v : row) sum += std::exp(v - mx);
    const double log_sum = mx + std::log(sum);
    out.loss += (log_sum - row[static_cast<std::size_t>(y)]) * inv_n;
    for (std::size_t c = 0; c < classes; ++c) delta(b, c) = std::exp(row[c] - log_sum) * inv_n;
    delta(b, static_cast<std::size_t>(y)) -= inv_n;
  }

  for (std::size_t li = model.layers.size(); li-- > 0;) {
    const auto& p = model.layers[li];
    const auto& x = fr.cache.inputs[li];
    auto& g = out.grads[li];
    if (model.specs[li].activation == Activation::relu) {
      const auto& z = fr.cache.pre_activations[li];
      auto dv = delta.values();
      auto zv = z.values();
      for (std::size_t k = 0; k < dv.size(); ++k)
        if (zv[k] <= 0.0) dv[k] = 0.0;
    }
    const std::size_t in = p.weights.cols(), outd = p.weights.rows();
    for (std::size_t b = 0; b < n; ++b) {
      const auto xr = x.row(b);
      for (std::size_t o = 0; o < outd; ++o) {
        const double d = delta(b, o);
        if (d == 0.0) continue;
        auto gr = g.weights.row(o);
        for (std::size_t i = 0; i < in; ++i) gr[i] += d * xr[i];
        g.bias[o] += d;
      }
    }
    if (li == 0) break;
    Matrix prev(n, in);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t o = 0; o < outd; ++o) {
        const double d = delta(b, o);
        if (d == 0.0) continue;
        const auto wr = p.weights.row(o);
        auto pr = prev.row(b);
        for (std::size_t i = 0; i < in; ++i) pr[i] += d * wr[i];
      }
    delta = std::move(prev);
  }
  return out;
}

inline void apply_sgd(std::span<double> params, std::span<const double> grads, double learning_rate) {
  if (params.size() != grads.size()) throw std::invalid_argument("apply_sgd: shape mismatch");
  if (!(learning_rate >= 0.0)) throw std::invalid_argument("apply_sgd: learning rate must be non-negative");
  for (std::size_t i = 0; i < params.size(); ++i) params[i] -= learning_rate * grads[i];
}

inline void apply_sgd(std::span<LayerParams> params, std::span<const LayerParams> grads, double learning_rate) {
  if (params.size() != grads.size()) throw std::invalid_argument("apply_sgd: layer count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].weights.rows() != grads[i].weights.rows() ||
        params[i].weights.cols() != grads[i].weights.cols() || params[i].bias.size() != grads[i].bias.size())
      throw std::invalid_argument("apply_sgd: shape mismatch in layer " + std::to_string(i));
    apply_sgd(params[i].weights.values(), grads[i].weights.values(), learning_rate);
    apply_sgd(params[i].bias, grads[i].bias, learning_rate);
  }
}

inline std::vector<int> predict(const Model& model, const Matrix& inputs) {
  const auto logits = forward(model, inputs).logits;
  std::vector<int> out(inputs.rows());
  for (std::size_t b = 0; b < inputs.rows(); ++b) {
    const auto r = logits.row(b);
    out[b] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return out;
}

inline double evaluate_accuracy(const Model& model, const Matrix& inputs, std::span<const int> labels) {
  if (labels.empty()) throw std::invalid_argument("evaluate_accuracy: empty dataset");
  if (inputs.rows() != labels.size()) throw std::invalid_argument("evaluate_accuracy: label count mismatch");
  const auto pred = predict(model, inputs);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += pred[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

}  // namespace robwe::nn
