#include "gradshield/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "gradshield/rng.hpp"

namespace gradshield {

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Dense: return "dense";
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::Relu: return "relu";
    case LayerKind::Softplus: return "softplus";
    case LayerKind::Flatten: return "flatten";
  }
  return "?";
}

LayerKind parse_layer_kind(const std::string& name) {
  if (name == "dense") return LayerKind::Dense;
  if (name == "conv2d") return LayerKind::Conv2d;
  if (name == "relu") return LayerKind::Relu;
  if (name == "softplus") return LayerKind::Softplus;
  if (name == "flatten") return LayerKind::Flatten;
  throw std::invalid_argument("unknown layer kind '" + name + "'");
}

ModelSpec::ModelSpec(Shape input_shape, std::size_t classes, std::vector<Layer> layers, std::string name)
    : input_shape_(std::move(input_shape)), classes_(classes), layers_(std::move(layers)), name_(std::move(name)) {
  if (input_shape_.empty() || shape_size(input_shape_) == 0) throw ShapeError("model input shape must be nonempty");
  if (classes_ < 1) throw ShapeError("model needs at least one class");
  Shape s = input_shape_;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const Layer& l = layers_[i];
    const std::string tag = std::to_string(i);
    switch (l.kind) {
      case LayerKind::Dense:
        if (s.size() != 1) throw ShapeError("layer " + tag + ": dense needs a flat input, got " + shape_string(s));
        if (l.units == 0) throw ShapeError("layer " + tag + ": dense with zero units");
        slots_.push_back({"w" + tag, parameter_count_, {s[0], l.units}});
        parameter_count_ += s[0] * l.units;
        slots_.push_back({"b" + tag, parameter_count_, {l.units}});
        parameter_count_ += l.units;
        s = {l.units};
        break;
      case LayerKind::Conv2d: {
        if (s.size() != 3) throw ShapeError("layer " + tag + ": conv2d needs [C,H,W], got " + shape_string(s));
        if (l.units == 0 || l.kernel == 0 || l.kernel > 5)
          throw ShapeError("layer " + tag + ": conv2d needs channels > 0 and a kernel in 1..5");
        if (s[1] + 2 * l.padding < l.kernel || s[2] + 2 * l.padding < l.kernel)
          throw ShapeError("layer " + tag + ": kernel larger than padded input");
        slots_.push_back({"w" + tag, parameter_count_, {l.units, s[0], l.kernel, l.kernel}});
        parameter_count_ += l.units * s[0] * l.kernel * l.kernel;
        slots_.push_back({"b" + tag, parameter_count_, {l.units}});
        parameter_count_ += l.units;
        s = {l.units, s[1] + 2 * l.padding - l.kernel + 1, s[2] + 2 * l.padding - l.kernel + 1};
        break;
      }
      case LayerKind::Flatten:
        s = {shape_size(s)};
        break;
      case LayerKind::Relu:
      case LayerKind::Softplus:
        break;
    }
  }
  if (s != Shape{classes_})
    throw ShapeError("model output shape " + shape_string(s) + " does not match class count " +
                     std::to_string(classes_));
}

ModelSpec ModelSpec::mlp(std::size_t inputs, const std::vector<std::size_t>& hidden, std::size_t classes,
                         LayerKind activation, std::string name) {
  std::vector<Layer> layers;
  for (auto h : hidden) {
    layers.push_back(Layer::dense(h));
    layers.push_back({activation});
  }
  layers.push_back(Layer::dense(classes));
  return ModelSpec({inputs}, classes, std::move(layers), std::move(name));
}

ModelSpec ModelSpec::small_cnn(Shape image_shape, std::size_t channels, std::size_t classes, LayerKind activation,
                               std::string name) {
  return ModelSpec(std::move(image_shape), classes,
                   {Layer::conv2d(channels, 3, 0), {activation}, Layer::flatten(), Layer::dense(classes)},
                   std::move(name));
}

bool ModelSpec::smooth() const {
  return std::none_of(layers_.begin(), layers_.end(), [](const Layer& l) { return l.kind == LayerKind::Relu; });
}

Parameters::Parameters(const ModelSpec& spec) : slots_(spec.slots()), values_(spec.parameter_count(), 0.0) {}

Parameters::Parameters(const ModelSpec& spec, std::vector<double> values)
    : slots_(spec.slots()), values_(std::move(values)) {
  if (values_.size() != spec.parameter_count())
    throw ShapeError("parameter count " + std::to_string(values_.size()) + " does not match model (" +
                     std::to_string(spec.parameter_count()) + ")");
  for (double v : values_)
    if (!std::isfinite(v)) throw NonFiniteError("non-finite parameter value");
}

Parameters Parameters::initialize(const ModelSpec& spec, std::uint64_t seed) {
  Parameters p(spec);
  Rng rng(seed);
  for (std::size_t s = 0; s < p.slots_.size(); ++s) {
    const auto& slot = p.slots_[s];
    if (slot.shape.size() == 1) continue;  // bias
    std::size_t fan_in, fan_out;
    if (slot.shape.size() == 2) {
      fan_in = slot.shape[0];
      fan_out = slot.shape[1];
    } else {
      const std::size_t receptive = slot.shape[2] * slot.shape[3];
      fan_in = slot.shape[1] * receptive;
      fan_out = slot.shape[0] * receptive;
    }
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (double& v : p.view(s)) v = rng.uniform(-bound, bound);
  }
  return p;
}

std::span<const double> Parameters::view(std::size_t slot) const {
  const auto& s = slots_.at(slot);
  return std::span<const double>(values_).subspan(s.offset, shape_size(s.shape));
}

std::span<double> Parameters::view(std::size_t slot) {
  const auto& s = slots_.at(slot);
  return std::span<double>(values_).subspan(s.offset, shape_size(s.shape));
}

Tensor Parameters::tensor(std::size_t slot) const {
  auto v = view(slot);
  return Tensor(slots_.at(slot).shape, std::vector<double>(v.begin(), v.end()));
}

NetworkGraph::NetworkGraph(ModelSpec spec) : spec_(std::move(spec)) {
  for (const auto& slot : spec_.slots()) leaves_.push_back(Expr::variable(slot.shape, slot.name, true));
}

namespace {

// Broadcasts a per-channel bias [K] over [B, K, rest...].
Expr broadcast_bias(const Expr& bias, const Shape& out) {
  const std::size_t k = out[1];
  const std::size_t inner = shape_size(out) / (out[0] * k);
  auto idx = std::make_shared<std::vector<std::ptrdiff_t>>(shape_size(out));
  for (std::size_t i = 0; i < idx->size(); ++i) (*idx)[i] = static_cast<std::ptrdiff_t>((i / inner) % k);
  return gather(bias, std::move(idx), out);
}

}  // namespace

Expr NetworkGraph::apply(const Expr& x) const {
  const Shape& in = spec_.input_shape();
  if (x.shape().size() != in.size() + 1 || !std::equal(in.begin(), in.end(), x.shape().begin() + 1))
    throw ShapeError("model input " + shape_string(x.shape()) + " does not match [B]+" + shape_string(in));
  const std::size_t batch = x.shape()[0];
  Expr h = x;
  std::size_t slot = 0;
  for (const Layer& l : spec_.layers()) {
    switch (l.kind) {
      case LayerKind::Dense: {
        Expr y = matmul(h, leaves_[slot]);
        h = y + broadcast_bias(leaves_[slot + 1], y.shape());
        slot += 2;
        break;
      }
      case LayerKind::Conv2d: {
        Expr y = conv2d(h, leaves_[slot], l.padding);
        h = y + broadcast_bias(leaves_[slot + 1], y.shape());
        slot += 2;
        break;
      }
      case LayerKind::Relu:
        h = relu(h);
        break;
      case LayerKind::Softplus:
        h = softplus(h);
        break;
      case LayerKind::Flatten:
        h = reshape(h, {batch, shape_size(h.shape()) / batch});
        break;
    }
  }
  return h;
}

void NetworkGraph::bind(Bindings& bindings, const Parameters& params) const {
  if (params.size() != spec_.parameter_count()) throw ShapeError("parameters do not match model");
  for (std::size_t i = 0; i < leaves_.size(); ++i) bindings.bind(leaves_[i], params.tensor(i));
}

Tensor model_apply(const ModelSpec& spec, const Parameters& params, const Tensor& x) {
  const bool single = x.shape() == spec.input_shape();
  Shape batched = x.shape();
  if (single) batched.insert(batched.begin(), 1);
  NetworkGraph graph(spec);
  Expr input = Expr::constant(x.reshaped(batched));
  Bindings b;
  graph.bind(b, params);
  Tensor logits = forward(graph.apply(input), b);
  if (single) return logits.reshaped({spec.classes()});
  return logits;
}

std::string to_string(LossKind kind) { return kind == LossKind::CrossEntropy ? "cross_entropy" : "margin"; }

LossKind parse_loss_kind(const std::string& name) {
  if (name == "cross_entropy" || name == "ce") return LossKind::CrossEntropy;
  if (name == "margin" || name == "cw_margin") return LossKind::Margin;
  throw std::invalid_argument("unknown loss '" + name + "'");
}

namespace {

struct LabelIndex {
  IndexMap picked;  // logits[r, label_r]
  IndexMap others;  // logits[r, j], j != label_r
  Shape rows;
  std::size_t classes;
};

LabelIndex label_index(const Shape& shape, std::span<const int> labels, bool with_others) {
  if (shape.empty()) throw ShapeError("logits must have a class axis");
  const std::size_t k = shape.back();
  Shape rows(shape.begin(), shape.end() - 1);
  const std::size_t n = shape_size(rows);
  if (labels.size() != n)
    throw ShapeError("expected " + std::to_string(n) + " labels, got " + std::to_string(labels.size()));
  auto picked = std::make_shared<std::vector<std::ptrdiff_t>>(n);
  auto others = std::make_shared<std::vector<std::ptrdiff_t>>(with_others ? n * (k - 1) : 0);
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= k)
      throw std::out_of_range("label " + std::to_string(labels[r]) + " out of range for " + std::to_string(k) +
                              " classes");
    const auto label = static_cast<std::size_t>(labels[r]);
    (*picked)[r] = static_cast<std::ptrdiff_t>(r * k + label);
    if (!with_others) continue;
    std::size_t o = 0;
    for (std::size_t j = 0; j < k; ++j)
      if (j != label) (*others)[r * (k - 1) + o++] = static_cast<std::ptrdiff_t>(r * k + j);
  }
  return {std::move(picked), std::move(others), std::move(rows), k};
}

}  // namespace

Expr cross_entropy(const Expr& logits, std::span<const int> labels) {
  auto li = label_index(logits.shape(), labels, false);
  return logsumexp(logits) - gather(logits, li.picked, li.rows);
}

Expr cw_margin(const Expr& logits, std::span<const int> labels) {
  if (logits.shape().empty() || logits.shape().back() < 2)
    throw std::invalid_argument("cw_margin needs at least two classes");
  auto li = label_index(logits.shape(), labels, true);
  Shape others_shape = li.rows;
  others_shape.push_back(li.classes - 1);
  return max_last(gather(logits, li.others, others_shape)) - gather(logits, li.picked, li.rows);
}

Expr loss(LossKind kind, const Expr& logits, std::span<const int> labels) {
  return kind == LossKind::CrossEntropy ? cross_entropy(logits, labels) : cw_margin(logits, labels);
}

double cross_entropy(const Tensor& logits, int label) {
  const auto v = logits.data();
  if (label < 0 || static_cast<std::size_t>(label) >= v.size()) throw std::out_of_range("label out of range");
  const double mx = *std::max_element(v.begin(), v.end());
  double acc = 0.0;
  for (double z : v) acc += std::exp(z - mx);
  return mx + std::log(acc) - v[static_cast<std::size_t>(label)];
}

double cw_margin(const Tensor& logits, int label) {
  const auto v = logits.data();
  if (v.size() < 2) throw std::invalid_argument("cw_margin needs at least two classes");
  if (label < 0 || static_cast<std::size_t>(label) >= v.size()) throw std::out_of_range("label out of range");
  double best = -INFINITY;
  for (std::size_t i = 0; i < v.size(); ++i)
    if (i != static_cast<std::size_t>(label)) best = std::max(best, v[i]);
  return best - v[static_cast<std::size_t>(label)];
}

double loss(LossKind kind, const Tensor& logits, int label) {
  return kind == LossKind::CrossEntropy ? cross_entropy(logits, label) : cw_margin(logits, label);
}

std::size_t predict(std::span<const double> logits) {
  if (logits.empty()) throw std::invalid_argument("predict on empty logits");
  return static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

}  // namespace gradshield
