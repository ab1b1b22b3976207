#include <cmath>
#include <functional>

#include "doctest.h"
#include "gradshield/certify.hpp"
#include "support.hpp"

using namespace gradshield;
using gradshield::testing::linear_margin_model;
using gradshield::testing::random_tensor;

namespace {

// One-input, two-class classifier with label-0 margin m(x) and derivative dm(x).
class ScalarClassifier final : public Classifier {
 public:
  ScalarClassifier(std::function<double(double)> m, std::function<double(double)> dm)
      : m_(std::move(m)), dm_(std::move(dm)) {}
  [[nodiscard]] const Shape& input_shape() const override { return shape_; }
  [[nodiscard]] std::size_t classes() const override { return 2; }

 protected:
  [[nodiscard]] Tensor compute_logits(const Tensor& batch) const override {
    Tensor out({batch.shape()[0], 2});
    for (std::size_t i = 0; i < batch.shape()[0]; ++i) out[2 * i + 1] = m_(batch[i]);
    return out;
  }
  [[nodiscard]] Tensor compute_margin_gradient(const Tensor& batch, std::span<const int> labels) const override {
    Tensor g(batch.shape());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = (labels[i] == 0 ? 1.0 : -1.0) * dm_(batch[i]);
    return g;
  }

 private:
  std::function<double(double)> m_, dm_;
  Shape shape_{1};
};

Dataset points_1d(std::vector<double> xs) {
  const std::size_t n = xs.size();
  return Dataset{Tensor({n, 1}, std::move(xs)), std::vector<int>(n, 0), Split::Test, "points"};
}

Dataset uniform_square(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d{random_tensor({n, 2}, rng, 0.0, 1.0), std::vector<int>(n), Split::Test, "uniform"};
  for (std::size_t i = 0; i < n; ++i) d.labels[i] = static_cast<int>(rng.below(2));
  return d;
}

NetworkClassifier linear_classifier(std::vector<double> w, double bias) {
  auto [spec, p] = linear_margin_model(w, bias);
  return NetworkClassifier(spec, p);
}

std::vector<double> gumbel_draws(std::size_t n, double mu, double sigma, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> out(n);
  for (auto& v : out) v = mu - sigma * std::log(-std::log(rng.uniform()));
  return out;
}

std::vector<double> gev_draws(std::size_t n, double mu, double sigma, double xi, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> out(n);
  for (auto& v : out) v = mu + sigma * (std::pow(-std::log(rng.uniform()), -xi) - 1.0) / xi;
  return out;
}

}  // namespace

TEST_CASE("norm pairs") {
  CHECK(NormPair::for_attack(Norm::L2).dual == Norm::L2);
  CHECK(NormPair::for_attack(Norm::Linf).dual == Norm::L1);
  CHECK_THROWS(NormPair::for_attack(Norm::L1));
}

TEST_CASE("sample_modulus") {
  SamplerConfig c;
  c.n_blocks = 5;
  c.block_size = 4;
  c.samples_per_point = 200;

  SUBCASE("linear model has zero expansion error") {
    auto model = linear_classifier({3, -4}, 0.2);
    for (double m : sample_modulus(model, uniform_square(20, 1), 0.3, Norm::L2, c)) CHECK(m <= 1e-12);
  }
  SUBCASE("quadratic loss approaches eps^2") {
    ScalarClassifier model([](double x) { return x * x; }, [](double x) { return 2 * x; });
    c.samples_per_point = 2000;
    for (double m : sample_modulus(model, points_1d({0.5}), 1.0, Norm::L2, c)) {
      CHECK(m <= 1.0);
      CHECK(m > 0.99);
    }
  }
  SUBCASE("relu kink uses the zero subgradient") {
    ModelSpec spec({1}, 2, {Layer::dense(1), Layer::relu(), Layer::dense(2)});
    Parameters p(spec);
    p.view(0)[0] = 1.0;
    p.view(2)[1] = 1.0;
    NetworkClassifier model(spec, p);
    CHECK(model.margin_gradient(Tensor::vector({0.0}), 0)[0] == 0.0);
    c.samples_per_point = 2000;
    for (double m : sample_modulus(model, points_1d({0.0}), 1.0, Norm::L2, c)) CHECK(m > 0.99);
  }
  SUBCASE("deterministic and non-negative") {
    auto spec = ModelSpec::mlp(2, {8}, 2, LayerKind::Softplus);
    NetworkClassifier model(spec, Parameters::initialize(spec, 2));
    auto data = uniform_square(30, 3);
    const auto a = sample_modulus(model, data, 0.1, Norm::Linf, c);
    CHECK(a == sample_modulus(model, data, 0.1, Norm::Linf, c));
    c.threads = 3;
    CHECK(a == sample_modulus(model, data, 0.1, Norm::Linf, c));
    for (double m : a) CHECK(m >= 0.0);
  }
}

TEST_CASE("sample_grad_norm_maxima") {
  SamplerConfig c;
  c.n_blocks = 4;
  c.block_size = 5;
  auto data = uniform_square(20, 1);
  for (double m : sample_grad_norm_maxima(linear_classifier({3, -4}, 0.0), data, Norm::L2, c))
    CHECK(m == doctest::Approx(5.0).epsilon(1e-14));
  for (double m : sample_grad_norm_maxima(linear_classifier({3, -4}, 0.0), data, Norm::L1, c))
    CHECK(m == doctest::Approx(7.0).epsilon(1e-14));
  for (double m : sample_grad_norm_maxima(linear_classifier({0, 0}, 0.0), data, Norm::L2, c)) CHECK(m == 0.0);

  auto spec = ModelSpec::mlp(2, {8}, 2, LayerKind::Relu);
  NetworkClassifier model(spec, Parameters::initialize(spec, 6));
  double exhaustive = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i)
    exhaustive = std::max(exhaustive,
                          norm(model.margin_gradient(data.example(i), data.labels[i]).data(), Norm::L2));
  c.block_size = data.size();
  for (double m : sample_grad_norm_maxima(model, data, Norm::L2, c)) CHECK(m == doctest::Approx(exhaustive));
}

TEST_CASE("gev_upper_quantile") {
  CHECK(gev_upper_quantile({0, 1, 0}, 0.001) == doctest::Approx(-std::log(-std::log(0.999))).epsilon(1e-12));
  CHECK(gev_upper_quantile({0, 1, 0}, 0.001) == doctest::Approx(6.9073).epsilon(1e-4));
  CHECK(gev_upper_quantile({0, 1, 0}, 1 - std::exp(-1.0)) == doctest::Approx(0.0).scale(1.0));
  for (double xi : {-0.3, 0.0, 0.2}) {
    const double q1 = gev_upper_quantile({2, 1, xi}, 0.01);
    const double q2 = gev_upper_quantile({2, 2, xi}, 0.01);
    CHECK(q2 - 2 == doctest::Approx(2 * (q1 - 2)));
    CHECK(gev_upper_quantile({2.5, 1, xi}, 0.01) > q1);
  }
  // xi -> 0 is continuous.
  CHECK(gev_upper_quantile({0, 1, 1e-7}, 0.001) == doctest::Approx(6.9073).epsilon(1e-4));
  CHECK_THROWS(gev_upper_quantile({0, 1, 0}, 0.0));
}

TEST_CASE("gev_fit_mle recovers Gumbel parameters") {
  const auto s = gumbel_draws(10000, 0.0, 1.0, 42);
  const auto fit = gev_fit_mle(s);
  CHECK(std::abs(fit.params.mu) <= 0.05);
  CHECK(std::abs(fit.params.sigma - 1.0) <= 0.05);
  CHECK(std::abs(fit.params.xi) <= 0.05);
  CHECK(fit.log_likelihood >= fit.gumbel_log_likelihood - 1e-6);
  CHECK(fit.log_likelihood == doctest::Approx(gev_log_likelihood(fit.params, s)));
}

TEST_CASE("gev_fit_mle recovers a heavy tail") {
  const auto fit = gev_fit_mle(gev_draws(10000, 1.0, 0.5, 0.2, 7));
  CHECK(fit.params.xi >= 0.1);
  CHECK(fit.params.xi <= 0.3);
  const auto bounded = gev_fit_mle(gev_draws(10000, 0.0, 1.0, -0.3, 8));
  CHECK(bounded.params.xi == doctest::Approx(-0.3).epsilon(0.2));
}

TEST_CASE("gev_fit_mle is affine equivariant") {
  const auto s = gumbel_draws(2000, 0.3, 0.7, 5);
  std::vector<double> t(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) t[i] = 4.0 * s[i] - 2.0;
  const auto a = gev_fit_mle(s).params;
  const auto b = gev_fit_mle(t).params;
  CHECK(b.mu == doctest::Approx(4 * a.mu - 2).epsilon(1e-4));
  CHECK(b.sigma == doctest::Approx(4 * a.sigma).epsilon(1e-4));
  CHECK(b.xi == doctest::Approx(a.xi).epsilon(1e-3).scale(1.0));
}

TEST_CASE("gev_fit_mle rejects degenerate input") {
  CHECK_THROWS_AS(gev_fit_mle(std::vector<double>(50, 1.5)), GevError);
  CHECK_THROWS_AS(gev_fit_mle(gumbel_draws(10, 0, 1, 1)), GevError);
}

TEST_CASE("estimates never fall below the sample maximum") {
  int quantile_above = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto s = gumbel_draws(100, 1.0, 0.3, seed);
    const auto e = estimate_extreme(s, 0.001);
    CHECK(e.value >= e.sample_max);
    CHECK(e.value >= e.quantile);
    quantile_above += e.quantile >= e.sample_max;
  }
  // About 90% of 100-sample maxima fall below the 0.999 quantile.
  CHECK(quantile_above >= 14);
}

TEST_CASE("estimate_L") {
  SamplerConfig c;
  auto data = uniform_square(1000, 9);
  const auto lin = estimate_L(linear_classifier({3, -4}, 0.1), data, Norm::L2, c);
  CHECK(lin.degenerate);
  CHECK(lin.value == doctest::Approx(5.0).epsilon(0.05));

  // ReLU gradients are piecewise constant, so the grid maximum is attained on
  // a region of positive area that the data reaches.
  auto spec = ModelSpec::mlp(2, {16}, 2, LayerKind::Relu);
  NetworkClassifier model(spec, Parameters::initialize(spec, 13));
  const auto e = estimate_L(model, data, Norm::L2, c);
  CHECK_FALSE(e.degenerate);
  CHECK(e.value >= e.sample_max);

  double grid_max = 0.0;
  const std::size_t G = 200;
  Tensor grid({G * G, 2});
  std::vector<int> labels(G * G);
  for (std::size_t i = 0; i < G * G; ++i) {
    grid[2 * i] = static_cast<double>(i / G) / (G - 1);
    grid[2 * i + 1] = static_cast<double>(i % G) / (G - 1);
    labels[i] = static_cast<int>(i % 2);
  }
  const Tensor g = model.margin_gradient(grid, labels);
  for (std::size_t i = 0; i < G * G; ++i) grid_max = std::max(grid_max, std::hypot(g[2 * i], g[2 * i + 1]));
  CHECK(e.value >= grid_max);
}

TEST_CASE("estimate_omega") {
  SamplerConfig c;
  c.n_blocks = 50;
  c.block_size = 8;
  auto data = uniform_square(100, 4);
  const auto lin = estimate_omega(linear_classifier({3, -4}, 0.1), data, 0.25, Norm::L2, c);
  CHECK(lin.value == doctest::Approx(0.0).scale(1.0).epsilon(1e-9));

  auto spec = ModelSpec::mlp(2, {16}, 2, LayerKind::Softplus);
  NetworkClassifier model(spec, Parameters::initialize(spec, 13));
  const double eps = 0.2;
  const auto e = estimate_omega(model, data, eps, Norm::L2, c);
  CHECK(e.value >= e.sample_max);

  // Dense-grid sup of the expansion error over the data and the eps-disc.
  double oracle = 0.0;
  const int G = 41;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Tensor x = data.example(i);
    const int y = data.labels[i];
    const double l = model.margin(x, y);
    const Tensor grad = model.margin_gradient(x, y);
    for (int a = 0; a < G; ++a)
      for (int b = 0; b < G; ++b) {
        const double v0 = eps * (2.0 * a / (G - 1) - 1), v1 = eps * (2.0 * b / (G - 1) - 1);
        if (std::hypot(v0, v1) > eps) continue;
        const double m = model.margin(Tensor::vector({x[0] + v0, x[1] + v1}), y);
        oracle = std::max(oracle, m - l - v0 * grad[0] - v1 * grad[1]);
      }
  }
  CHECK(e.value >= oracle);

  const auto curve = omega_curve(model, data, {0.0, 0.05, 0.1, 0.2}, Norm::L2, c);
  CHECK(curve[0] == 0.0);
  for (std::size_t k = 1; k < curve.size(); ++k) CHECK(curve[k] >= curve[k - 1]);
}

TEST_CASE("l_bound and omega_bound_certified") {
  CHECK(l_bound(-1, 0, 2) == 0.5);
  CHECK(l_bound(0.5, 0, 2) == 0.0);
  CHECK_THROWS(l_bound(-1, 0, 0));
  CHECK(omega_bound_certified(-1, 1, 0, 0.2, 0.5));
  CHECK_FALSE(omega_bound_certified(-1, 1, 0, 0.2, 0.81));
  CHECK_FALSE(omega_bound_certified(-1, 1, 0, 1.0, 1e-9));
  CHECK_FALSE(omega_bound_certified(-1, 1, 0, 1.5, 1e-9));
  CHECK(omega_bound_certified(-1, 0, 0, 0.5, 100.0));
  CHECK_FALSE(omega_bound_certified(-1, 0, 0, 1.0, 100.0));
  // Radius 0 certifies exactly the correctly classified inputs.
  CHECK(omega_bound_certified(-1e-9, 3, 0, 0, 0));
  CHECK_FALSE(omega_bound_certified(0, 3, 0, 0, 0));
}

TEST_CASE("l_bound with the exact L is the hyperplane distance") {
  auto model = linear_classifier({3, 4}, -3.5);
  const Tensor x = Tensor::vector({0.2, 0.3});
  const double m = model.margin(x, 0);
  const double L = norm(model.margin_gradient(x, 0).data(), Norm::L2);
  CHECK(l_bound(m, 0, L) == doctest::Approx(std::abs(m) / 5.0).epsilon(1e-9));
}

TEST_CASE("quadratic_lambda") {
  CHECK(quadratic_lambda(0.5, 1.0) == 1.0);
  CHECK(quadratic_lambda(0.3, 0.0) == 0.3);
  CHECK(quadratic_lambda(0.999, 1.0) > 100.0);
  CHECK_THROWS(quadratic_lambda(1.0, 1.0));
  CHECK_THROWS(quadratic_lambda(2.0, 1.0));
}

TEST_CASE("brute_force_min_distance") {
  auto model = linear_classifier({3, 4}, -3.5);
  const Tensor x = Tensor::vector({0.2, 0.3});
  const double exact = std::abs(model.margin(x, 0)) / 5.0;
  const std::size_t res = 201;
  const double eps_max = 0.5;
  const double cell = 2 * eps_max / (res - 1);
  const double found = brute_force_min_distance(model, x, 0, res, eps_max);
  CHECK(found >= exact - 1e-12);
  CHECK(found <= exact + cell);
  CHECK(brute_force_min_distance(model, x, 1, res, eps_max) == 0.0);
  CHECK(brute_force_min_distance(model, x, 0, res, 0.1) == kNoAdversarial);
  CHECK_THROWS(brute_force_min_distance(linear_classifier({1, 1, 1}, 0), Tensor::vector({0, 0, 0}), 0, 10, 1));
}

TEST_CASE("certify_dataset table semantics") {
  auto spec = ModelSpec::mlp(2, {12}, 2, LayerKind::Softplus);
  NetworkClassifier model(spec, Parameters::initialize(spec, 21));
  auto data = gen_two_moons(60, 0.1, 5, Split::Test);
  SamplerConfig c;
  c.n_blocks = 40;
  c.block_size = 8;
  const std::vector<double> radii{0.0, 0.02, 0.05, 0.1, 0.2};
  const auto report = certify_dataset(model, data, radii, Norm::L2, c);
  const auto table = report.certified_error();
  CHECK(table[0] == report.clean_error());
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < data.size(); ++i) wrong += model.margin(data.example(i), data.labels[i]) >= 0;
  CHECK(report.clean_error() == static_cast<double>(wrong) / data.size());
  for (std::size_t k = 1; k < table.size(); ++k) CHECK(table[k] >= table[k - 1]);
  for (const auto& r : report.records) {
    for (std::size_t k = 1; k < radii.size(); ++k)
      if (r.certified[k]) CHECK(r.certified[k - 1]);
    if (r.margin >= 0) CHECK(r.l_bound == 0.0);
  }
  CHECK(table == certified_error_table(model, data, radii, Norm::L2, c));
}

TEST_CASE("bounds are sound against the grid oracle on small 2-D nets") {
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    auto spec = ModelSpec::mlp(2, {8}, 2, LayerKind::Softplus);
    NetworkClassifier model(spec, Parameters::initialize(spec, seed));
    auto data = uniform_square(10, seed);
    SamplerConfig c;
    c.n_blocks = 40;
    c.block_size = 5;
    c.samples_per_point = 32;
    const auto L = estimate_L(model, data, Norm::L2, c).value;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const Tensor x = data.example(i);
      const int y = data.labels[i];
      const double oracle = brute_force_min_distance(model, x, y, 101, 1.5);
      const double cell = 3.0 / 100;
      const double lb = l_bound(model.margin(x, y), 0, L);
      if (oracle != kNoAdversarial) CHECK(lb <= oracle + cell);
    }
  }
}
