#pragma once

// Test-only oracles. These go through forward evaluation only, never through
// `gradient`, so they stay independent of the reverse-mode path they check.

#include <cmath>
#include <functional>
#include <vector>

#include "gradshield/autodiff.hpp"
#include "gradshield/classifier.hpp"
#include "gradshield/model.hpp"
#include "gradshield/rng.hpp"

namespace gradshield::testing {

// Central differences of a scalar function of one tensor.
inline Tensor central_difference(const std::function<double(const Tensor&)>& f, const Tensor& at,
                                 double step = 1e-5) {
  Tensor out(at.shape());
  for (std::size_t i = 0; i < at.size(); ++i) {
    Tensor plus = at, minus = at;
    plus[i] += step;
    minus[i] -= step;
    out[i] = (f(plus) - f(minus)) / (2.0 * step);
  }
  return out;
}

inline double max_relative_error(const Tensor& analytic, const Tensor& reference) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i)
    worst = std::max(worst, std::abs(analytic[i] - reference[i]) / (std::abs(analytic[i]) + 1e-12));
  return worst;
}

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Two-class dense model whose margin for label 0 is w.x + bias.
inline std::pair<ModelSpec, Parameters> linear_margin_model(const std::vector<double>& w, double bias = 0.0) {
  ModelSpec spec({w.size()}, 2, {Layer::dense(2)}, "linear");
  Parameters p(spec);
  auto weights = p.view(0);  // [in, 2]
  for (std::size_t i = 0; i < w.size(); ++i) {
    weights[i * 2 + 0] = 0.0;
    weights[i * 2 + 1] = w[i];
  }
  p.view(1)[1] = bias;
  return {spec, p};
}

// Two classes; the label-0 margin is w.x + bias rounded down to a multiple
// of `quantum`. Piecewise constant, so its gradient is zero almost everywhere.
class StaircaseClassifier final : public Classifier {
 public:
  StaircaseClassifier(std::vector<double> w, double bias, double quantum)
      : w_(std::move(w)), bias_(bias), quantum_(quantum), shape_{w_.size()} {}

  [[nodiscard]] const Shape& input_shape() const override { return shape_; }
  [[nodiscard]] std::size_t classes() const override { return 2; }

  [[nodiscard]] double level(std::span<const double> x) const {
    double s = bias_;
    for (std::size_t i = 0; i < w_.size(); ++i) s += w_[i] * x[i];
    return std::floor(s / quantum_) * quantum_;
  }

 protected:
  [[nodiscard]] Tensor compute_logits(const Tensor& batch) const override {
    const std::size_t b = batch.shape()[0], n = w_.size();
    Tensor out({b, 2});
    for (std::size_t r = 0; r < b; ++r) out[r * 2 + 1] = level(batch.data().subspan(r * n, n));
    return out;
  }
  [[nodiscard]] Tensor compute_margin_gradient(const Tensor& batch, std::span<const int>) const override {
    return Tensor(batch.shape());
  }

 private:
  std::vector<double> w_;
  double bias_, quantum_;
  Shape shape_;
};

}  // namespace gradshield::testing
