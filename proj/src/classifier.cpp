#include "gradshield/classifier.hpp"

#include "gradshield/gradreg.hpp"

namespace gradshield {

Tensor Classifier::as_batch(const Tensor& x, bool& single) const {
  const Shape& in = input_shape();
  if (x.shape() == in) {
    single = true;
    Shape b = in;
    b.insert(b.begin(), 1);
    return x.reshaped(b);
  }
  single = false;
  if (x.rank() != in.size() + 1 || !std::equal(in.begin(), in.end(), x.shape().begin() + 1))
    throw ShapeError("classifier expects " + shape_string(in) + " or a batch of it, got " + shape_string(x.shape()));
  return x;
}

Tensor Classifier::logits(const Tensor& x) const {
  bool single;
  const Tensor batch = as_batch(x, single);
  logit_queries_ += batch.shape()[0];
  Tensor out = compute_logits(batch);
  return single ? out.reshaped({classes()}) : out;
}

Tensor Classifier::margin_gradient(const Tensor& x, std::span<const int> labels) const {
  bool single;
  const Tensor batch = as_batch(x, single);
  if (labels.size() != batch.shape()[0]) throw ShapeError("margin_gradient: one label per example required");
  gradient_queries_ += batch.shape()[0];
  Tensor g = compute_margin_gradient(batch, labels);
  return single ? g.reshaped(x.shape()) : g;
}

double Classifier::margin(const Tensor& x, int label) const { return cw_margin(logits(x), label); }

Tensor Classifier::margin_gradient(const Tensor& x, int label) const {
  return margin_gradient(x, std::span<const int>(&label, 1));
}

void Classifier::reset_counters() const {
  logit_queries_ = 0;
  gradient_queries_ = 0;
}

NetworkClassifier::NetworkClassifier(ModelSpec spec, Parameters params)
    : spec_(std::move(spec)), params_(std::move(params)) {
  if (params_.size() != spec_.parameter_count())
    throw ShapeError("classifier parameters do not match the model spec");
}

Tensor NetworkClassifier::compute_logits(const Tensor& batch) const { return model_apply(spec_, params_, batch); }

Tensor NetworkClassifier::compute_margin_gradient(const Tensor& batch, std::span<const int> labels) const {
  return input_gradient(spec_, params_, batch, labels, LossKind::Margin);
}

}  // namespace gradshield
