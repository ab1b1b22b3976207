#pragma once

#include <atomic>
#include <span>

#include "gradshield/model.hpp"

namespace gradshield {

// Black-box view of a classifier for attacks and certification. Queries are
// counted per kind so callers can check that an attack stayed gradient-free.
class Classifier {
 public:
  virtual ~Classifier() = default;

  [[nodiscard]] virtual const Shape& input_shape() const = 0;
  [[nodiscard]] virtual std::size_t classes() const = 0;

  // x is one example or a batch [B, input...].
  [[nodiscard]] Tensor logits(const Tensor& x) const;
  // Gradient of the CW margin with respect to x, same shape as x.
  [[nodiscard]] Tensor margin_gradient(const Tensor& x, std::span<const int> labels) const;

  [[nodiscard]] double margin(const Tensor& x, int label) const;
  [[nodiscard]] Tensor margin_gradient(const Tensor& x, int label) const;

  [[nodiscard]] std::size_t logit_queries() const { return logit_queries_.load(); }
  [[nodiscard]] std::size_t gradient_queries() const { return gradient_queries_.load(); }
  void reset_counters() const;

 protected:
  [[nodiscard]] virtual Tensor compute_logits(const Tensor& batch) const = 0;
  [[nodiscard]] virtual Tensor compute_margin_gradient(const Tensor& batch, std::span<const int> labels) const = 0;

 private:
  [[nodiscard]] Tensor as_batch(const Tensor& x, bool& single) const;

  mutable std::atomic<std::size_t> logit_queries_{0};
  mutable std::atomic<std::size_t> gradient_queries_{0};
};

// A trained network. Thread-safe.
class NetworkClassifier final : public Classifier {
 public:
  NetworkClassifier(ModelSpec spec, Parameters params);

  [[nodiscard]] const Shape& input_shape() const override { return spec_.input_shape(); }
  [[nodiscard]] std::size_t classes() const override { return spec_.classes(); }
  [[nodiscard]] const ModelSpec& spec() const { return spec_; }
  [[nodiscard]] const Parameters& parameters() const { return params_; }

 protected:
  [[nodiscard]] Tensor compute_logits(const Tensor& batch) const override;
  [[nodiscard]] Tensor compute_margin_gradient(const Tensor& batch, std::span<const int> labels) const override;

 private:
  ModelSpec spec_;
  Parameters params_;
};

}  // namespace gradshield
