#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "oracles.hpp"
#include "robwe/data.hpp"
#include "robwe/nn.hpp"

using namespace robwe;
using namespace robwe::nn;

namespace {

std::vector<LayerSpec> mlp() {
  return {{8, 16, Activation::relu}, {16, 12, Activation::relu}, {12, 3, Activation::softmax_output}};
}

Model identity_model(std::size_t n) {
  std::vector<LayerSpec> specs{{n, n, Activation::identity}};
  auto m = init_model(specs, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) m.layers[0].weights(i, j) = i == j ? 1.0 : 0.0;
  std::fill(m.layers[0].bias.begin(), m.layers[0].bias.end(), 0.0);
  return m;
}

}  // namespace

TEST(InitModel, SameSeedIsBitIdentical) {
  const auto specs = mlp();
  EXPECT_EQ(init_model(specs, 42), init_model(specs, 42));
}

TEST(InitModel, DifferentSeedsDiffer) {
  const auto specs = mlp();
  EXPECT_NE(init_model(specs, 1), init_model(specs, 2));
}

TEST(InitModel, ZeroInputDimRejected) {
  std::vector<LayerSpec> specs{{0, 4, Activation::softmax_output}};
  EXPECT_THROW(init_model(specs, 1), std::invalid_argument);
}

TEST(InitModel, BrokenDimensionChainRejected) {
  std::vector<LayerSpec> specs{{4, 8, Activation::relu}, {7, 3, Activation::softmax_output}};
  EXPECT_THROW(init_model(specs, 1), std::invalid_argument);
}

TEST(InitModel, SoftmaxOnlyOnFinalLayer) {
  std::vector<LayerSpec> specs{{4, 8, Activation::softmax_output}, {8, 3, Activation::softmax_output}};
  EXPECT_THROW(init_model(specs, 1), std::invalid_argument);
}

TEST(InitModel, EmptySpecsRejected) {
  std::vector<LayerSpec> specs;
  EXPECT_THROW(init_model(specs, 1), std::invalid_argument);
}

TEST(InitModel, ScaledByFanIn) {
  const auto specs = mlp();
  const auto m = init_model(specs, 9);
  for (std::size_t l = 0; l < specs.size(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(specs[l].input_dim));
    for (double w : m.layers[l].weights.values()) EXPECT_LE(std::abs(w), bound);
    for (double b : m.layers[l].bias) EXPECT_EQ(b, 0.0);
  }
}

TEST(InitModel, HeadBoundary) {
  const auto specs = mlp();
  const auto m = init_model(specs, 1, 1);
  EXPECT_EQ(m.representation().size(), 1u);
  EXPECT_EQ(m.head().size(), 2u);
  EXPECT_EQ(init_model(specs, 1).head().size(), 1u);
  EXPECT_THROW(init_model(specs, 1, 4), std::invalid_argument);
}

TEST(Flatten, LayerRoundTrip) {
  const auto m = init_model(mlp(), 3);
  for (const auto& layer : m.layers) {
    const auto flat = flatten(layer);
    EXPECT_EQ(flat.size(), layer.weights.rows() * layer.weights.cols() + layer.bias.size());
    LayerParams back{Matrix(layer.weights.rows(), layer.weights.cols()), std::vector<double>(layer.bias.size())};
    unflatten(flat, back);
    EXPECT_EQ(back, layer);
  }
}

TEST(Flatten, WeightsRowMajorThenBias) {
  LayerParams p{Matrix(2, 2), {5.0, 6.0}};
  p.weights(0, 0) = 1;
  p.weights(0, 1) = 2;
  p.weights(1, 0) = 3;
  p.weights(1, 1) = 4;
  EXPECT_EQ(flatten(p), (std::vector<double>{1, 2, 3, 4, 5, 6}));
}

TEST(Flatten, SpanRoundTripAndLengthCheck) {
  auto m = init_model(mlp(), 4);
  const auto flat = flatten(std::span<const LayerParams>(m.layers));
  EXPECT_EQ(flat.size(), param_count(m.layers));
  auto copy = m;
  for (auto& l : copy.layers) std::fill(l.weights.values().begin(), l.weights.values().end(), 0.0);
  unflatten(flat, copy.layers);
  EXPECT_EQ(copy, m);
  std::vector<double> short_flat(flat.size() - 1);
  EXPECT_THROW(unflatten(short_flat, std::span<LayerParams>(copy.layers)), std::invalid_argument);
}

TEST(Forward, IdentityLayerIsIdentity) {
  const auto m = identity_model(3);
  Matrix x(2, 3);
  for (std::size_t i = 0; i < 6; ++i) x.values()[i] = static_cast<double>(i) - 2.5;
  EXPECT_EQ(forward(m, x).logits, x);
}

TEST(Forward, LogitShape) {
  std::vector<LayerSpec> specs{{5, 7, Activation::relu}, {7, 3, Activation::softmax_output}};
  const auto m = init_model(specs, 1);
  const auto out = forward(m, Matrix(10, 5, 0.3));
  EXPECT_EQ(out.logits.rows(), 10u);
  EXPECT_EQ(out.logits.cols(), 3u);
  EXPECT_EQ(out.cache.inputs.size(), 2u);
}

TEST(Forward, ZeroParametersGiveZeroLogits) {
  auto m = init_model(mlp(), 1);
  for (auto& l : m.layers) std::fill(l.weights.values().begin(), l.weights.values().end(), 0.0);
  Rng rng(5);
  Matrix x(4, 8);
  for (auto& v : x.values()) v = rng.normal();
  const auto out = forward(m, x);
  for (double v : out.logits.values()) EXPECT_EQ(v, 0.0);
}

TEST(Forward, ShapeMismatchRejected) {
  const auto m = init_model(mlp(), 1);
  EXPECT_THROW(forward(m, Matrix(2, 7)), std::invalid_argument);
}

TEST(MainTaskLoss, UniformLogitsGiveLogC) {
  for (std::size_t c : {2u, 3u, 10u}) {
    std::vector<LayerSpec> specs{{4, c, Activation::softmax_output}};
    auto m = init_model(specs, 1);
    std::fill(m.layers[0].weights.values().begin(), m.layers[0].weights.values().end(), 0.0);
    Batch b{Matrix(3, 4, 1.0), {0, 1, static_cast<int>(c - 1)}};
    EXPECT_NEAR(main_task_loss_and_grads(m, b).loss, std::log(static_cast<double>(c)), 1e-12);
  }
}

TEST(MainTaskLoss, NonNegative) {
  Rng rng(11);
  for (int t = 0; t < 20; ++t) {
    std::size_t classes = 0;
    const auto m = oracle::random_small_model(rng, &classes);
    const auto b = oracle::random_batch(rng, 5, m.input_dim(), classes);
    EXPECT_GE(main_task_loss_and_grads(m, b).loss, 0.0);
  }
}

TEST(MainTaskLoss, EmptyBatchRejected) {
  const auto m = init_model(mlp(), 1);
  Batch b{Matrix(0, 8), {}};
  EXPECT_THROW(main_task_loss_and_grads(m, b), std::invalid_argument);
}

TEST(MainTaskLoss, MatchesOracleLoss) {
  Rng rng(12);
  for (int t = 0; t < 10; ++t) {
    std::size_t classes = 0;
    const auto m = oracle::random_small_model(rng, &classes);
    const auto b = oracle::random_batch(rng, 6, m.input_dim(), classes);
    EXPECT_NEAR(main_task_loss_and_grads(m, b).loss, oracle::cross_entropy(m, b), 1e-12);
  }
}

TEST(MainTaskLoss, GradientsMatchCentralDifferences) {
  Rng rng(2024);
  for (int t = 0; t < 50; ++t) {
    std::size_t classes = 0;
    const auto m = oracle::random_small_model(rng, &classes);
    const auto b = oracle::random_batch(rng, 1 + rng.below(6), m.input_dim(), classes);
    const auto analytic = flatten(std::span<const LayerParams>(main_task_loss_and_grads(m, b).grads));
    const auto numeric = oracle::central_difference(
        [&](std::span<const double> x) {
          auto p = m;
          unflatten(x, std::span<LayerParams>(p.layers));
          return oracle::cross_entropy(p, b);
        },
        flatten(std::span<const LayerParams>(m.layers)));
    ASSERT_EQ(analytic.size(), numeric.size());
    for (std::size_t i = 0; i < analytic.size(); ++i)
      ASSERT_LE(oracle::rel_error(analytic[i], numeric[i]), oracle::fd_rel_tol) << "instance " << t << " entry " << i;
  }
}

TEST(Sgd, Arithmetic) {
  std::vector<double> p{1.0};
  const std::vector<double> g{0.5};
  apply_sgd(p, g, 0.01);
  EXPECT_DOUBLE_EQ(p[0], 0.995);
}

TEST(Sgd, ZeroGradientIsFixedPoint) {
  auto m = init_model(mlp(), 1);
  const auto before = m;
  apply_sgd(m.layers, zeros_like(m.layers), 0.1);
  EXPECT_EQ(m, before);
}

TEST(Sgd, TwoStepsEqualOneSummedStep) {
  std::vector<double> a{0.25, -1.0, 3.0}, b = a;
  const std::vector<double> g{0.5, 0.25, -0.125};
  apply_sgd(a, g, 0.5);
  apply_sgd(a, g, 0.5);
  const std::vector<double> g2{1.0, 0.5, -0.25};
  apply_sgd(b, g2, 0.5);
  EXPECT_EQ(a, b);
}

TEST(Sgd, ShapeAndRateChecks) {
  std::vector<double> p{1.0, 2.0};
  const std::vector<double> g{1.0};
  EXPECT_THROW(apply_sgd(p, g, 0.1), std::invalid_argument);
  const std::vector<double> g2{1.0, 1.0};
  EXPECT_THROW(apply_sgd(p, g2, -0.1), std::invalid_argument);
  EXPECT_THROW(apply_sgd(p, g2, std::nan("")), std::invalid_argument);
  auto m = init_model(mlp(), 1);
  auto wrong = zeros_like(std::span<const LayerParams>(m.layers).first(2));
  EXPECT_THROW(apply_sgd(m.layers, wrong, 0.1), std::invalid_argument);
}

TEST(Accuracy, PerfectModel) {
  const auto m = identity_model(3);
  Matrix x(3, 3);
  for (std::size_t i = 0; i < 3; ++i) x(i, i) = 1.0;
  const std::vector<int> labels{0, 1, 2};
  EXPECT_EQ(evaluate_accuracy(m, x, labels), 1.0);
  const std::vector<int> permuted{1, 2, 0};
  EXPECT_EQ(evaluate_accuracy(m, x, permuted), 0.0);
}

TEST(Accuracy, EmptyRejected) {
  const auto m = identity_model(3);
  EXPECT_THROW(evaluate_accuracy(m, Matrix(0, 3), std::vector<int>{}), std::invalid_argument);
}

TEST(Accuracy, RandomModelNearChance) {
  // Balanced 4-class data, 2000 samples, ten independently initialized models.
  const auto d = data::gen_synthetic_blobs(4, 16, 500, 1.0, 77);
  std::vector<LayerSpec> specs{{16, 32, Activation::relu}, {32, 4, Activation::softmax_output}};
  double mean = 0.0;
  for (std::uint64_t s = 0; s < 10; ++s) mean += data::evaluate_accuracy(init_model(specs, 1000 + s), d) / 10.0;
  EXPECT_NEAR(mean, 0.25, 0.1);
}

TEST(Softmax, SumsToOneAndStable) {
  const std::vector<double> z{1000.0, 999.0, -1000.0};
  const auto p = softmax(z);
  EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-15);
  EXPECT_GT(p[0], p[1]);
  EXPECT_FALSE(std::isnan(p[2]));
}

TEST(Activation, StringRoundTrip) {
  for (auto a : {Activation::relu, Activation::identity, Activation::softmax_output})
    EXPECT_EQ(activation_from_string(to_string(a)), a);
  EXPECT_THROW(activation_from_string("tanh"), std::invalid_argument);
}
