#include <cmath>

#include "doctest.h"
#include "gradshield/model.hpp"
#include "support.hpp"

using namespace gradshield;
using gradshield::testing::random_tensor;

TEST_CASE("model_apply on identity and zero dense layers") {
  ModelSpec spec({2}, 2, {Layer::dense(2)});
  Parameters p(spec);
  p.view(0)[0] = 1.0;
  p.view(0)[3] = 1.0;
  CHECK(model_apply(spec, p, Tensor::vector({1, 2})) == Tensor::vector({1, 2}));
  CHECK(model_apply(spec, Parameters(spec), Tensor::vector({1, 2})) == Tensor::vector({0, 0}));
  CHECK_THROWS_AS(model_apply(spec, p, Tensor::vector({1, 2, 3})), ShapeError);
}

TEST_CASE("model_apply matches a hand-computed two-layer MLP") {
  auto spec = ModelSpec::mlp(3, {4}, 2, LayerKind::Softplus);
  auto p = Parameters::initialize(spec, 99);
  for (double& b : p.view(1)) b = 0.1;
  for (double& b : p.view(3)) b = -0.2;
  const std::vector<double> x{0.2, 0.5, 0.9};
  const auto w0 = p.view(0), b0 = p.view(1), w1 = p.view(2), b1 = p.view(3);
  std::vector<double> hidden(4);
  for (std::size_t j = 0; j < 4; ++j) {
    double acc = b0[j];
    for (std::size_t i = 0; i < 3; ++i) acc += x[i] * w0[i * 4 + j];
    hidden[j] = std::log1p(std::exp(acc));
  }
  const Tensor logits = model_apply(spec, p, Tensor::vector(x));
  for (std::size_t k = 0; k < 2; ++k) {
    double acc = b1[k];
    for (std::size_t j = 0; j < 4; ++j) acc += hidden[j] * w1[j * 2 + k];
    CHECK(logits[k] == doctest::Approx(acc).epsilon(1e-14));
  }
}

TEST_CASE("batched and single application agree") {
  auto spec = ModelSpec::small_cnn({1, 6, 6}, 3, 4);
  auto p = Parameters::initialize(spec, 5);
  Rng rng(2);
  Tensor batch = random_tensor({3, 1, 6, 6}, rng, 0.0, 1.0);
  const Tensor all = model_apply(spec, p, batch);
  REQUIRE(all.shape() == Shape{3, 4});
  for (std::size_t b = 0; b < 3; ++b) {
    Tensor one({1, 6, 6}, std::vector<double>(batch.data().begin() + b * 36, batch.data().begin() + (b + 1) * 36));
    const Tensor l = model_apply(spec, p, one);
    for (std::size_t k = 0; k < 4; ++k) CHECK(l[k] == doctest::Approx(all[b * 4 + k]).epsilon(1e-14));
  }
}

TEST_CASE("spec validation") {
  CHECK_THROWS_AS(ModelSpec({2}, 3, {Layer::dense(2)}), ShapeError);
  CHECK_THROWS_AS(ModelSpec({1, 4, 4}, 2, {Layer::dense(2)}), ShapeError);
  CHECK_THROWS_AS(ModelSpec({1, 4, 4}, 2, {Layer::conv2d(2, 7), Layer::flatten(), Layer::dense(2)}), ShapeError);
  auto spec = ModelSpec::mlp(2, {8, 8}, 2, LayerKind::Relu);
  CHECK(spec.parameter_count() == 2 * 8 + 8 + 8 * 8 + 8 + 8 * 2 + 2);
  CHECK_FALSE(spec.smooth());
}

TEST_CASE("cross_entropy") {
  CHECK(cross_entropy(Tensor::vector({0, 0}), 0) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  // log(1 + e^-20) computed as a closed form
  CHECK(cross_entropy(Tensor::vector({10, -10}), 0) == doctest::Approx(2.0611536181902037e-9).epsilon(1e-6));
  CHECK(cross_entropy(Tensor::vector({50, 0, 0, 0}), 0) < 1e-20);
  CHECK_THROWS_AS(cross_entropy(Tensor::vector({0, 0}), 2), std::out_of_range);
}

TEST_CASE("cw_margin") {
  CHECK(cw_margin(Tensor::vector({2, 1, 0}), 0) == -1.0);
  CHECK(cw_margin(Tensor::vector({0, 0}), 0) == 0.0);
  CHECK(cw_margin(Tensor::vector({-1, 3, 5}), 1) == 2.0);
  CHECK_THROWS_AS(cw_margin(Tensor::vector({1}), 0), std::invalid_argument);
}

TEST_CASE("predict breaks ties toward the lowest index") {
  CHECK(predict(Tensor::vector({0.1, 0.9})) == 1);
  CHECK(predict(Tensor::vector({0.5, 0.5})) == 0);
  CHECK(predict(Tensor::vector({3, 1, 2})) == 0);
}

TEST_CASE("expression losses agree with numeric losses on batches") {
  Rng rng(17);
  Tensor logits = random_tensor({5, 3}, rng, -3, 3);
  std::vector<int> labels{0, 2, 1, 1, 0};
  Bindings none;
  const Tensor ce = forward(cross_entropy(Expr::constant(logits), labels), none);
  const Tensor cw = forward(cw_margin(Expr::constant(logits), labels), none);
  for (std::size_t r = 0; r < 5; ++r) {
    Tensor row({3}, std::vector<double>(logits.data().begin() + r * 3, logits.data().begin() + r * 3 + 3));
    CHECK(ce[r] == doctest::Approx(cross_entropy(row, labels[r])).epsilon(1e-14));
    CHECK(cw[r] == cw_margin(row, labels[r]));
  }
}

TEST_CASE("property: margin sign agrees with prediction, cross-entropy is shift invariant") {
  Rng rng(71);
  for (int t = 0; t < 200; ++t) {
    const std::size_t k = 2 + rng.below(4);
    Tensor logits = random_tensor({k}, rng, -2, 2);
    if (t % 10 == 0) logits[1] = logits[0];  // force ties now and then
    const int c = static_cast<int>(rng.below(k));
    const double m = cw_margin(logits, c);
    std::size_t winners = 0;
    const double top = *std::max_element(logits.data().begin(), logits.data().end());
    for (double v : logits.data()) winners += v == top;
    CHECK((m < 0) == (predict(logits) == static_cast<std::size_t>(c) && winners == 1));
    if (logits[static_cast<std::size_t>(c)] == top && winners > 1) CHECK(m == 0.0);

    Tensor shifted = logits;
    for (double& v : shifted.data()) v += 7.25;
    CHECK(cross_entropy(shifted, c) == doctest::Approx(cross_entropy(logits, c)).epsilon(1e-10));
  }
}

TEST_CASE("softplus models are smooth: gradient check at random points") {
  auto spec = ModelSpec::mlp(3, {5}, 3, LayerKind::Softplus);
  auto p = Parameters::initialize(spec, 3);
  NetworkGraph g(spec);
  Rng rng(4);
  for (int t = 0; t < 10; ++t) {
    auto x = Expr::variable({1, 3}, "x");
    Bindings b;
    g.bind(b, p);
    b.bind(x, random_tensor({1, 3}, rng, 0, 1));
    const int label = static_cast<int>(rng.below(3));
    auto l = sum(cross_entropy(g.apply(x), std::span<const int>(&label, 1)));
    CHECK(numerical_gradient_check(l, x, b, 1e-5) < 1e-4);
  }
}
