#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gradshield/autodiff.hpp"
#include "gradshield/tensor.hpp"

namespace gradshield {

enum class LayerKind { Dense, Conv2d, Relu, Softplus, Flatten };

std::string to_string(LayerKind kind);
LayerKind parse_layer_kind(const std::string& name);

struct Layer {
  LayerKind kind = LayerKind::Relu;
  std::size_t units = 0;  // dense outputs or conv output channels
  std::size_t kernel = 0;
  std::size_t padding = 0;

  static Layer dense(std::size_t units) { return {LayerKind::Dense, units, 0, 0}; }
  static Layer conv2d(std::size_t channels, std::size_t kernel, std::size_t padding = 0) {
    return {LayerKind::Conv2d, channels, kernel, padding};
  }
  static Layer relu() { return {LayerKind::Relu}; }
  static Layer softplus() { return {LayerKind::Softplus}; }
  static Layer flatten() { return {LayerKind::Flatten}; }

  friend bool operator==(const Layer&, const Layer&) = default;
};

struct ParamSlot {
  std::string name;
  std::size_t offset = 0;
  Shape shape;
};

// Feed-forward classifier layout. Shapes are per example; the batch axis is
// implicit. Dense weights are stored [in, out], conv kernels [out, in, k, k].
class ModelSpec {
 public:
  ModelSpec(Shape input_shape, std::size_t classes, std::vector<Layer> layers, std::string name = "");

  // Dense net on a flat input: hidden layers with the given activation.
  static ModelSpec mlp(std::size_t inputs, const std::vector<std::size_t>& hidden, std::size_t classes,
                       LayerKind activation, std::string name = "mlp");
  // conv(channels, 3x3) -> activation -> flatten -> dense(classes).
  static ModelSpec small_cnn(Shape image_shape, std::size_t channels, std::size_t classes,
                             LayerKind activation = LayerKind::Relu, std::string name = "small-cnn");

  [[nodiscard]] const Shape& input_shape() const { return input_shape_; }
  [[nodiscard]] std::size_t input_size() const { return shape_size(input_shape_); }
  [[nodiscard]] std::size_t classes() const { return classes_; }
  [[nodiscard]] const std::vector<Layer>& layers() const { return layers_; }
  [[nodiscard]] const std::string& name() const { return name_; }
  [[nodiscard]] const std::vector<ParamSlot>& slots() const { return slots_; }
  [[nodiscard]] std::size_t parameter_count() const { return parameter_count_; }
  // Whether every activation is smooth (no relu).
  [[nodiscard]] bool smooth() const;

  friend bool operator==(const ModelSpec& a, const ModelSpec& b) {
    return a.input_shape_ == b.input_shape_ && a.classes_ == b.classes_ && a.layers_ == b.layers_ &&
           a.name_ == b.name_;
  }

 private:
  Shape input_shape_;
  std::size_t classes_;
  std::vector<Layer> layers_;
  std::string name_;
  std::vector<ParamSlot> slots_;
  std::size_t parameter_count_ = 0;
};

class Parameters {
 public:
  explicit Parameters(const ModelSpec& spec);
  Parameters(const ModelSpec& spec, std::vector<double> values);

  // Glorot-uniform weights, zero biases.
  static Parameters initialize(const ModelSpec& spec, std::uint64_t seed);

  [[nodiscard]] std::size_t size() const { return values_.size(); }
  [[nodiscard]] std::span<const double> values() const { return values_; }
  [[nodiscard]] std::span<double> values() { return values_; }
  [[nodiscard]] std::span<const double> view(std::size_t slot) const;
  [[nodiscard]] std::span<double> view(std::size_t slot);
  [[nodiscard]] Tensor tensor(std::size_t slot) const;
  [[nodiscard]] const std::vector<ParamSlot>& slots() const { return slots_; }

  friend bool operator==(const Parameters& a, const Parameters& b) { return a.values_ == b.values_; }

 private:
  std::vector<ParamSlot> slots_;
  std::vector<double> values_;
};

// The model as a differentiable expression: one leaf per parameter slot.
class NetworkGraph {
 public:
  explicit NetworkGraph(ModelSpec spec);

  // x: [B, input...] -> logits [B, classes].
  [[nodiscard]] Expr apply(const Expr& x) const;
  [[nodiscard]] const std::vector<Expr>& parameters() const { return leaves_; }
  [[nodiscard]] const ModelSpec& spec() const { return spec_; }
  void bind(Bindings& bindings, const Parameters& params) const;

 private:
  ModelSpec spec_;
  std::vector<Expr> leaves_;
};

// Raw logits. x may be a single example (shape == input shape, returns
// [classes]) or a batch [B, input...] (returns [B, classes]).
Tensor model_apply(const ModelSpec& spec, const Parameters& params, const Tensor& x);

enum class LossKind { CrossEntropy, Margin };

std::string to_string(LossKind kind);
LossKind parse_loss_kind(const std::string& name);

// Per-example losses over the last axis of logits; one label per leading
// index. Result drops the class axis.
Expr cross_entropy(const Expr& logits, std::span<const int> labels);
Expr cw_margin(const Expr& logits, std::span<const int> labels);
Expr loss(LossKind kind, const Expr& logits, std::span<const int> labels);

// logsumexp(logits) - logits[label].
double cross_entropy(const Tensor& logits, int label);
// max_{i != label} logits[i] - logits[label]; >= 0 means misclassified.
double cw_margin(const Tensor& logits, int label);
double loss(LossKind kind, const Tensor& logits, int label);

// argmax, lowest index on ties.
std::size_t predict(std::span<const double> logits);
inline std::size_t predict(const Tensor& logits) { return predict(logits.data()); }

}  // namespace gradshield
