#include "gradshield/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <mutex>
#include <sstream>
#include <tuple>
#include <unordered_set>

namespace gradshield {

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Constant: return "constant";
    case Op::Add: return "add";
    case Op::Mul: return "mul";
    case Op::MatMul: return "matmul";
    case Op::MatMulNT: return "matmul_nt";
    case Op::MatMulTN: return "matmul_tn";
    case Op::Transpose: return "transpose";
    case Op::Reshape: return "reshape";
    case Op::Gather: return "gather";
    case Op::ScatterAdd: return "scatter_add";
    case Op::Relu: return "relu";
    case Op::Step: return "step";
    case Op::Softplus: return "softplus";
    case Op::Sigmoid: return "sigmoid";
    case Op::Sign: return "sign";
    case Op::Power: return "power";
    case Op::LogSumExp: return "logsumexp";
    case Op::Softmax: return "softmax";
    case Op::ReduceSum: return "reduce_sum";
    case Op::ReduceMax: return "reduce_max";
    case Op::ArgMaxMask: return "argmax_mask";
    case Op::Detach: return "detach";
  }
  return "?";
}

Expr make_node(Node node) { return Expr(std::make_shared<const Node>(std::move(node))); }

namespace {

Node unary(Op op, const Expr& a, Shape shape) {
  Node n;
  n.op = op;
  n.shape = std::move(shape);
  n.inputs = {a};
  return n;
}

Shape drop_last(const Shape& s) { return Shape(s.begin(), s.end() - 1); }

void require_valid(const Expr& e, const char* what) {
  if (!e.valid()) throw std::invalid_argument(std::string(what) + ": empty expression");
}

bool is_scalar(const Shape& s) { return shape_size(s) == 1 && s.empty(); }

Shape broadcast_shape(const Expr& a, const Expr& b, const char* what) {
  require_valid(a, what);
  require_valid(b, what);
  if (a.shape() == b.shape()) return a.shape();
  if (is_scalar(a.shape())) return b.shape();
  if (is_scalar(b.shape())) return a.shape();
  throw ShapeError(std::string(what) + ": incompatible shapes " + shape_string(a.shape()) + " and " +
                   shape_string(b.shape()));
}

}  // namespace

Expr Expr::variable(Shape shape, std::string name, bool requires_grad) {
  Node n;
  n.op = Op::Leaf;
  n.shape = std::move(shape);
  n.name = std::move(name);
  n.requires_grad = requires_grad;
  return make_node(std::move(n));
}

Expr Expr::constant(Tensor value) {
  Node n;
  n.op = Op::Constant;
  n.shape = value.shape();
  n.value = std::make_shared<const Tensor>(std::move(value));
  return make_node(std::move(n));
}

Expr Expr::scalar(double value) { return constant(Tensor::scalar(value)); }

Op Expr::op() const { return node_->op; }
const Shape& Expr::shape() const { return node_->shape; }
const std::string& Expr::name() const { return node_->name; }
bool Expr::requires_grad() const { return node_->requires_grad; }
bool Expr::detached() const { return node_->op == Op::Detach; }
const std::vector<Expr>& Expr::inputs() const { return node_->inputs; }
const Tensor& Expr::constant_value() const {
  if (node_->op != Op::Constant) throw std::logic_error("constant_value() on non-constant node");
  return *node_->value;
}

Expr operator+(const Expr& a, const Expr& b) {
  Node n;
  n.op = Op::Add;
  n.shape = broadcast_shape(a, b, "add");
  n.inputs = {a, b};
  return make_node(std::move(n));
}

Expr operator*(const Expr& a, const Expr& b) {
  Node n;
  n.op = Op::Mul;
  n.shape = broadcast_shape(a, b, "mul");
  n.inputs = {a, b};
  return make_node(std::move(n));
}

Expr operator-(const Expr& a) { return Expr::scalar(-1.0) * a; }
Expr operator-(const Expr& a, const Expr& b) { return a + (-b); }
Expr operator*(double c, const Expr& a) { return Expr::scalar(c) * a; }
Expr operator+(const Expr& a, double c) { return a + Expr::scalar(c); }

Expr matmul(const Expr& a, const Expr& b) {
  require_valid(a, "matmul");
  require_valid(b, "matmul");
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
    throw ShapeError("matmul: incompatible shapes " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  Node n;
  n.op = Op::MatMul;
  n.shape = {a.shape()[0], b.shape()[1]};
  n.inputs = {a, b};
  return make_node(std::move(n));
}

Expr matmul_nt(const Expr& a, const Expr& b) {
  require_valid(a, "matmul_nt");
  require_valid(b, "matmul_nt");
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[1])
    throw ShapeError("matmul_nt: incompatible shapes " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()) + "^T");
  Node n;
  n.op = Op::MatMulNT;
  n.shape = {a.shape()[0], b.shape()[0]};
  n.inputs = {a, b};
  return make_node(std::move(n));
}

Expr matmul_tn(const Expr& a, const Expr& b) {
  require_valid(a, "matmul_tn");
  require_valid(b, "matmul_tn");
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[0] != b.shape()[0])
    throw ShapeError("matmul_tn: incompatible shapes " + shape_string(a.shape()) + "^T x " +
                     shape_string(b.shape()));
  Node n;
  n.op = Op::MatMulTN;
  n.shape = {a.shape()[1], b.shape()[1]};
  n.inputs = {a, b};
  return make_node(std::move(n));
}

Expr transpose(const Expr& a) {
  require_valid(a, "transpose");
  if (a.shape().size() != 2) throw ShapeError("transpose: rank-2 input required, got " + shape_string(a.shape()));
  return make_node(unary(Op::Transpose, a, {a.shape()[1], a.shape()[0]}));
}

Expr reshape(const Expr& a, Shape shape) {
  require_valid(a, "reshape");
  if (shape_size(shape) != shape_size(a.shape()))
    throw ShapeError("reshape: " + shape_string(a.shape()) + " -> " + shape_string(shape));
  if (shape == a.shape()) return a;
  return make_node(unary(Op::Reshape, a, std::move(shape)));
}

Expr gather(const Expr& a, IndexMap index, Shape out_shape) {
  require_valid(a, "gather");
  if (!index || index->size() != shape_size(out_shape))
    throw ShapeError("gather: index map length does not match output shape " + shape_string(out_shape));
  const auto limit = static_cast<std::ptrdiff_t>(shape_size(a.shape()));
  for (auto i : *index)
    if (i >= limit) throw ShapeError("gather: index out of range");
  Node n = unary(Op::Gather, a, std::move(out_shape));
  n.index = std::move(index);
  return make_node(std::move(n));
}

Expr scatter_add(const Expr& a, IndexMap index, Shape out_shape) {
  require_valid(a, "scatter_add");
  if (!index || index->size() != shape_size(a.shape()))
    throw ShapeError("scatter_add: index map length does not match input shape");
  const auto limit = static_cast<std::ptrdiff_t>(shape_size(out_shape));
  for (auto i : *index)
    if (i >= limit) throw ShapeError("scatter_add: index out of range");
  Node n = unary(Op::ScatterAdd, a, std::move(out_shape));
  n.index = std::move(index);
  return make_node(std::move(n));
}

Expr relu(const Expr& a) { require_valid(a, "relu"); return make_node(unary(Op::Relu, a, a.shape())); }
Expr step(const Expr& a) { require_valid(a, "step"); return make_node(unary(Op::Step, a, a.shape())); }
Expr softplus(const Expr& a) { require_valid(a, "softplus"); return make_node(unary(Op::Softplus, a, a.shape())); }
Expr sigmoid(const Expr& a) { require_valid(a, "sigmoid"); return make_node(unary(Op::Sigmoid, a, a.shape())); }
Expr sign(const Expr& a) { require_valid(a, "sign"); return make_node(unary(Op::Sign, a, a.shape())); }
Expr detach(const Expr& a) { require_valid(a, "detach"); return make_node(unary(Op::Detach, a, a.shape())); }

Expr pow(const Expr& a, double exponent) {
  require_valid(a, "pow");
  if (exponent == 1.0) return a;
  Node n = unary(Op::Power, a, a.shape());
  n.exponent = exponent;
  return make_node(std::move(n));
}

Expr square(const Expr& a) { return pow(a, 2.0); }
Expr abs(const Expr& a) { return a * sign(a); }

Expr logsumexp(const Expr& a) {
  require_valid(a, "logsumexp");
  if (a.shape().empty()) throw ShapeError("logsumexp: rank >= 1 required");
  return make_node(unary(Op::LogSumExp, a, drop_last(a.shape())));
}

Expr softmax(const Expr& a) {
  require_valid(a, "softmax");
  if (a.shape().empty()) throw ShapeError("softmax: rank >= 1 required");
  return make_node(unary(Op::Softmax, a, a.shape()));
}

Expr sum(const Expr& a) {
  require_valid(a, "sum");
  if (a.shape().empty()) return a;
  Node n = unary(Op::ReduceSum, a, {});
  n.axis = Axis::All;
  return make_node(std::move(n));
}

Expr sum_last(const Expr& a) {
  require_valid(a, "sum_last");
  if (a.shape().empty()) throw ShapeError("sum_last: rank >= 1 required");
  Node n = unary(Op::ReduceSum, a, drop_last(a.shape()));
  n.axis = Axis::Last;
  return make_node(std::move(n));
}

Expr max_last(const Expr& a) {
  require_valid(a, "max_last");
  if (a.shape().empty()) throw ShapeError("max_last: rank >= 1 required");
  Node n = unary(Op::ReduceMax, a, drop_last(a.shape()));
  n.axis = Axis::Last;
  return make_node(std::move(n));
}

Expr argmax_mask(const Expr& a) {
  require_valid(a, "argmax_mask");
  if (a.shape().empty()) throw ShapeError("argmax_mask: rank >= 1 required");
  return make_node(unary(Op::ArgMaxMask, a, a.shape()));
}

Expr mean(const Expr& a) {
  return (1.0 / static_cast<double>(shape_size(a.shape()))) * sum(a);
}

Expr expand_last(const Expr& a, std::size_t n) {
  require_valid(a, "expand_last");
  if (n == 0) throw ShapeError("expand_last: n must be positive");
  const std::size_t m = shape_size(a.shape());
  auto idx = std::make_shared<std::vector<std::ptrdiff_t>>(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) (*idx)[i * n + j] = static_cast<std::ptrdiff_t>(i);
  Shape out = a.shape();
  out.push_back(n);
  return gather(a, std::move(idx), std::move(out));
}

namespace {

struct ConvMaps {
  IndexMap im2col;
  IndexMap output;
};

const ConvMaps& conv_maps(std::size_t B, std::size_t C, std::size_t H, std::size_t W, std::size_t K,
                          std::size_t kh, std::size_t kw, std::size_t pad) {
  using Key = std::tuple<std::size_t, std::size_t, std::size_t, std::size_t, std::size_t, std::size_t,
                         std::size_t, std::size_t>;
  static std::mutex mutex;
  static std::map<Key, ConvMaps> cache;
  const Key key{B, C, H, W, K, kh, kw, pad};
  std::lock_guard lock(mutex);
  if (auto it = cache.find(key); it != cache.end()) return it->second;

  const std::size_t Ho = H + 2 * pad - kh + 1;
  const std::size_t Wo = W + 2 * pad - kw + 1;
  const std::size_t rows = C * kh * kw;
  const std::size_t cols = B * Ho * Wo;
  auto im2col = std::make_shared<std::vector<std::ptrdiff_t>>(rows * cols, -1);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < kh; ++i)
      for (std::size_t j = 0; j < kw; ++j) {
        const std::size_t r = (c * kh + i) * kw + j;
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t y = 0; y < Ho; ++y)
            for (std::size_t x = 0; x < Wo; ++x) {
              const auto sy = static_cast<std::ptrdiff_t>(y + i) - static_cast<std::ptrdiff_t>(pad);
              const auto sx = static_cast<std::ptrdiff_t>(x + j) - static_cast<std::ptrdiff_t>(pad);
              if (sy < 0 || sx < 0 || sy >= static_cast<std::ptrdiff_t>(H) || sx >= static_cast<std::ptrdiff_t>(W))
                continue;
              const std::size_t q = (b * Ho + y) * Wo + x;
              (*im2col)[r * cols + q] =
                  static_cast<std::ptrdiff_t>(((b * C + c) * H + static_cast<std::size_t>(sy)) * W +
                                              static_cast<std::size_t>(sx));
            }
      }
  auto output = std::make_shared<std::vector<std::ptrdiff_t>>(B * K * Ho * Wo);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t y = 0; y < Ho; ++y)
        for (std::size_t x = 0; x < Wo; ++x)
          (*output)[((b * K + k) * Ho + y) * Wo + x] = static_cast<std::ptrdiff_t>(k * cols + (b * Ho + y) * Wo + x);
  return cache.emplace(key, ConvMaps{std::move(im2col), std::move(output)}).first->second;
}

}  // namespace

Expr conv2d(const Expr& input, const Expr& kernel, std::size_t padding) {
  require_valid(input, "conv2d");
  require_valid(kernel, "conv2d");
  const Shape& in = input.shape();
  const Shape& ks = kernel.shape();
  if (in.size() != 4 || ks.size() != 4 || in[1] != ks[1])
    throw ShapeError("conv2d: input " + shape_string(in) + " incompatible with kernel " + shape_string(ks));
  if (ks[2] > 5 || ks[3] > 5) throw ShapeError("conv2d: kernels larger than 5x5 are not supported");
  if (in[2] + 2 * padding < ks[2] || in[3] + 2 * padding < ks[3])
    throw ShapeError("conv2d: kernel larger than padded input");
  const std::size_t B = in[0], C = in[1], H = in[2], W = in[3], K = ks[0];
  const std::size_t Ho = H + 2 * padding - ks[2] + 1;
  const std::size_t Wo = W + 2 * padding - ks[3] + 1;
  const auto& maps = conv_maps(B, C, H, W, K, ks[2], ks[3], padding);
  const std::size_t rows = C * ks[2] * ks[3];
  Expr cols = gather(input, maps.im2col, {rows, B * Ho * Wo});
  Expr y = matmul(reshape(kernel, {K, rows}), cols);
  return gather(y, maps.output, {B, K, Ho, Wo});
}

// ---------------------------------------------------------------------------
// Evaluation

Bindings& Bindings::bind(const Expr& leaf, Tensor value) {
  if (!leaf.valid() || leaf.op() != Op::Leaf) throw BindingError("bind: expression is not a leaf");
  values_.insert_or_assign(leaf.node(), Entry{leaf, std::move(value)});
  return *this;
}

const Tensor* Bindings::find(const Node* leaf) const {
  auto it = values_.find(leaf);
  return it == values_.end() ? nullptr : &it->second.value;
}

namespace {

double softplus_scalar(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

template <class F>
Tensor map_unary(const Tensor& in, const Shape& shape, F f) {
  Tensor out(shape);
  auto o = out.data();
  auto a = in.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(a[i]);
  return out;
}

template <class F>
Tensor map_binary(const Tensor& a, const Tensor& b, const Shape& shape, F f) {
  Tensor out(shape);
  auto o = out.data();
  const auto av = a.data();
  const auto bv = b.data();
  if (av.size() == bv.size()) {
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(av[i], bv[i]);
  } else if (av.size() == 1) {
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(av[0], bv[i]);
  } else {
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(av[i], bv[0]);
  }
  return out;
}

std::size_t last_dim(const Shape& s) { return s.back(); }

Tensor compute(const Node& n, const std::vector<const Tensor*>& in) {
  switch (n.op) {
    case Op::Leaf:
    case Op::Constant:
      break;
    case Op::Add:
      return map_binary(*in[0], *in[1], n.shape, [](double a, double b) { return a + b; });
    case Op::Mul:
      return map_binary(*in[0], *in[1], n.shape, [](double a, double b) { return a * b; });
    case Op::MatMul: {
      const auto& A = *in[0];
      const auto& B = *in[1];
      const std::size_t m = A.shape()[0], k = A.shape()[1], p = B.shape()[1];
      Tensor out(n.shape);
      auto o = out.data();
      const auto a = A.data();
      const auto b = B.data();
      for (std::size_t i = 0; i < m; ++i) {
        double* orow = o.data() + i * p;
        for (std::size_t t = 0; t < k; ++t) {
          const double av = a[i * k + t];
          if (av == 0.0) continue;
          const double* brow = b.data() + t * p;
          for (std::size_t j = 0; j < p; ++j) orow[j] += av * brow[j];
        }
      }
      return out;
    }
    case Op::MatMulNT: {
      const auto& A = *in[0];
      const auto& B = *in[1];
      const std::size_t m = A.shape()[0], k = A.shape()[1], p = B.shape()[0];
      Tensor out(n.shape);
      auto o = out.data();
      const auto a = A.data();
      const auto b = B.data();
      for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a.data() + i * k;
        for (std::size_t j = 0; j < p; ++j) {
          const double* brow = b.data() + j * k;
          double acc = 0.0;
          for (std::size_t t = 0; t < k; ++t) acc += arow[t] * brow[t];
          o[i * p + j] = acc;
        }
      }
      return out;
    }
    case Op::MatMulTN: {
      const auto& A = *in[0];
      const auto& B = *in[1];
      const std::size_t k = A.shape()[0], m = A.shape()[1], p = B.shape()[1];
      Tensor out(n.shape);
      auto o = out.data();
      const auto a = A.data();
      const auto b = B.data();
      for (std::size_t t = 0; t < k; ++t) {
        const double* brow = b.data() + t * p;
        for (std::size_t i = 0; i < m; ++i) {
          const double av = a[t * m + i];
          if (av == 0.0) continue;
          double* orow = o.data() + i * p;
          for (std::size_t j = 0; j < p; ++j) orow[j] += av * brow[j];
        }
      }
      return out;
    }
    case Op::Transpose: {
      const auto& A = *in[0];
      const std::size_t r = A.shape()[0], c = A.shape()[1];
      Tensor out(n.shape);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = A[i * c + j];
      return out;
    }
    case Op::Reshape:
      return in[0]->reshaped(n.shape);
    case Op::Gather: {
      Tensor out(n.shape);
      const auto& idx = *n.index;
      for (std::size_t i = 0; i < idx.size(); ++i)
        if (idx[i] >= 0) out[i] = (*in[0])[static_cast<std::size_t>(idx[i])];
      return out;
    }
    case Op::ScatterAdd: {
      Tensor out(n.shape);
      const auto& idx = *n.index;
      for (std::size_t i = 0; i < idx.size(); ++i)
        if (idx[i] >= 0) out[static_cast<std::size_t>(idx[i])] += (*in[0])[i];
      return out;
    }
    case Op::Relu:
      return map_unary(*in[0], n.shape, [](double x) { return x > 0.0 ? x : 0.0; });
    case Op::Step:
      return map_unary(*in[0], n.shape, [](double x) { return x > 0.0 ? 1.0 : 0.0; });
    case Op::Softplus:
      return map_unary(*in[0], n.shape, softplus_scalar);
    case Op::Sigmoid:
      return map_unary(*in[0], n.shape, sigmoid_scalar);
    case Op::Sign:
      return map_unary(*in[0], n.shape, [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
    case Op::Power: {
      const double p = n.exponent;
      if (p == 2.0) return map_unary(*in[0], n.shape, [](double x) { return x * x; });
      return map_unary(*in[0], n.shape, [p](double x) { return std::pow(x, p); });
    }
    case Op::LogSumExp: {
      const auto& A = *in[0];
      const std::size_t k = last_dim(A.shape());
      Tensor out(n.shape);
      for (std::size_t r = 0; r < out.size(); ++r) {
        const double* row = A.data().data() + r * k;
        const double mx = *std::max_element(row, row + k);
        double acc = 0.0;
        for (std::size_t j = 0; j < k; ++j) acc += std::exp(row[j] - mx);
        out[r] = mx + std::log(acc);
      }
      return out;
    }
    case Op::Softmax: {
      const auto& A = *in[0];
      const std::size_t k = last_dim(A.shape());
      Tensor out(n.shape);
      for (std::size_t r = 0; r < A.size() / k; ++r) {
        const double* row = A.data().data() + r * k;
        double* orow = out.data().data() + r * k;
        const double mx = *std::max_element(row, row + k);
        double acc = 0.0;
        for (std::size_t j = 0; j < k; ++j) acc += (orow[j] = std::exp(row[j] - mx));
        for (std::size_t j = 0; j < k; ++j) orow[j] /= acc;
      }
      return out;
    }
    case Op::ReduceSum: {
      const auto& A = *in[0];
      Tensor out(n.shape);
      if (n.axis == Axis::All) {
        double acc = 0.0;
        for (double v : A.data()) acc += v;
        out[0] = acc;
      } else {
        const std::size_t k = last_dim(A.shape());
        for (std::size_t r = 0; r < out.size(); ++r) {
          double acc = 0.0;
          for (std::size_t j = 0; j < k; ++j) acc += A[r * k + j];
          out[r] = acc;
        }
      }
      return out;
    }
    case Op::ReduceMax: {
      const auto& A = *in[0];
      const std::size_t k = last_dim(A.shape());
      Tensor out(n.shape);
      for (std::size_t r = 0; r < out.size(); ++r) {
        const double* row = A.data().data() + r * k;
        out[r] = *std::max_element(row, row + k);
      }
      return out;
    }
    case Op::ArgMaxMask: {
      const auto& A = *in[0];
      const std::size_t k = last_dim(A.shape());
      Tensor out(n.shape);
      for (std::size_t r = 0; r < A.size() / k; ++r) {
        const double* row = A.data().data() + r * k;
        out[r * k + static_cast<std::size_t>(std::max_element(row, row + k) - row)] = 1.0;
      }
      return out;
    }
    case Op::Detach:
      return *in[0];
  }
  throw std::logic_error("compute: unexpected op");
}

std::string describe(const Node* n) {
  std::string s = op_name(n->op);
  if (!n->name.empty()) s += " '" + n->name + "'";
  return s;
}

struct Frame {
  const Node* node;
  std::size_t next;
};

std::string path_string(const std::vector<Frame>& stack) {
  std::ostringstream os;
  for (std::size_t i = 0; i < stack.size(); ++i) {
    if (i) os << " > ";
    os << describe(stack[i].node);
  }
  return os.str();
}

}  // namespace

std::size_t Evaluator::KeyHash::operator()(const Key& k) const {
  std::size_t h = std::hash<int>{}(static_cast<int>(k.op));
  auto mix = [&h](std::size_t v) { h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2); };
  for (const Tensor* t : k.inputs) mix(std::hash<const Tensor*>{}(t));
  mix(std::hash<double>{}(k.exponent));
  mix(static_cast<std::size_t>(k.axis));
  mix(std::hash<const void*>{}(k.index));
  for (std::size_t d : k.shape) mix(d);
  return h;
}

const Tensor& Evaluator::operator()(const Expr& root) {
  require_valid(root, "evaluate");
  if (auto it = memo_.find(root.node()); it != memo_.end()) return *it->second;
  roots_.push_back(root);

  std::vector<Frame> stack{{root.node(), 0}};
  while (!stack.empty()) {
    Frame& top = stack.back();
    const Node* n = top.node;
    if (memo_.count(n)) {
      stack.pop_back();
      continue;
    }
    if (n->op == Op::Leaf) {
      const Tensor* bound = bindings_->find(n);
      if (!bound) throw BindingError("unbound leaf at " + path_string(stack));
      if (bound->shape() != n->shape)
        throw ShapeError("binding of shape " + shape_string(bound->shape()) + " for leaf of shape " +
                         shape_string(n->shape) + " at " + path_string(stack));
      memo_.emplace(n, bound);
      stack.pop_back();
      continue;
    }
    if (n->op == Op::Constant) {
      memo_.emplace(n, n->value.get());
      stack.pop_back();
      continue;
    }
    if (top.next < n->inputs.size()) {
      const Node* child = n->inputs[top.next++].node();
      if (!memo_.count(child)) stack.push_back({child, 0});
      continue;
    }
    Key key{n->op, {}, n->exponent, n->axis, n->index.get(), n->shape};
    key.inputs.reserve(n->inputs.size());
    for (const auto& e : n->inputs) key.inputs.push_back(memo_.at(e.node()));
    if (auto hit = computed_.find(key); hit != computed_.end()) {
      memo_.emplace(n, hit->second);
      stack.pop_back();
      continue;
    }
    Tensor value = compute(*n, key.inputs);
    if (!value.all_finite()) throw NonFiniteError("non-finite value at " + path_string(stack));
    const Tensor* stored = &storage_.emplace_back(std::move(value));
    memo_.emplace(n, stored);
    computed_.emplace(std::move(key), stored);
    stack.pop_back();
  }
  return *memo_.at(root.node());
}

Tensor forward(const Expr& root, const Bindings& bindings) {
  Evaluator ev(bindings);
  return ev(root);
}

// ---------------------------------------------------------------------------
// Differentiation

namespace {

std::vector<Expr> topological_order(const Expr& root) {
  std::vector<Expr> order;
  std::unordered_set<const Node*> seen;
  struct Item {
    Expr e;
    std::size_t next;
  };
  std::vector<Item> stack{{root, 0}};
  seen.insert(root.node());
  while (!stack.empty()) {
    Item& top = stack.back();
    const auto& ins = top.e.inputs();
    if (top.next < ins.size()) {
      const Expr& child = ins[top.next++];
      if (seen.insert(child.node()).second) stack.push_back({child, 0});
      continue;
    }
    order.push_back(top.e);
    stack.pop_back();
  }
  return order;
}

bool blocks_gradient(Op op) {
  return op == Op::Detach || op == Op::Step || op == Op::Sign || op == Op::ArgMaxMask || op == Op::Constant;
}

// Reduces an adjoint to the shape of a possibly broadcast scalar operand.
Expr fit(const Expr& adj, const Expr& operand) {
  if (adj.shape() == operand.shape()) return adj;
  return sum(adj);
}

Expr vjp(const Expr& out, std::size_t which, const Expr& adj) {
  const auto& in = out.inputs();
  const Expr& x = in[which];
  switch (out.op()) {
    case Op::Add:
      return fit(adj, x);
    case Op::Mul:
      return fit(adj * in[1 - which], x);
    case Op::MatMul:
      return which == 0 ? matmul_nt(adj, in[1]) : matmul_tn(in[0], adj);
    case Op::MatMulNT:
      return which == 0 ? matmul(adj, in[1]) : matmul_tn(adj, in[0]);
    case Op::MatMulTN:
      return which == 0 ? matmul_nt(in[1], adj) : matmul(in[0], adj);
    case Op::Transpose:
      return transpose(adj);
    case Op::Reshape:
      return reshape(adj, x.shape());
    case Op::Gather:
      return scatter_add(adj, out.node()->index, x.shape());
    case Op::ScatterAdd:
      return gather(adj, out.node()->index, x.shape());
    case Op::Relu:
      return adj * step(x);
    case Op::Softplus:
      return adj * sigmoid(x);
    case Op::Sigmoid:
      return adj * (out * ((-out) + 1.0));
    case Op::Power: {
      const double p = out.node()->exponent;
      if (p == 2.0) return adj * (2.0 * x);
      return adj * (p * pow(x, p - 1.0));
    }
    case Op::LogSumExp:
      return expand_last(adj, x.shape().back()) * softmax(x);
    case Op::Softmax:
      return out * (adj - expand_last(sum_last(adj * out), x.shape().back()));
    case Op::ReduceSum:
      if (out.node()->axis == Axis::All) return adj * Expr::constant(Tensor::filled(x.shape(), 1.0));
      return expand_last(adj, x.shape().back());
    case Op::ReduceMax:
      return expand_last(adj, x.shape().back()) * argmax_mask(x);
    default:
      break;
  }
  throw std::logic_error(std::string("vjp: no rule for ") + op_name(out.op()));
}

}  // namespace

std::vector<Expr> gradient(const Expr& scalar, const std::vector<Expr>& wrt) {
  require_valid(scalar, "gradient");
  if (!scalar.shape().empty())
    throw ShapeError("gradient: root must be a scalar, got shape " + shape_string(scalar.shape()));
  std::unordered_set<const Node*> targets;
  for (const auto& w : wrt) {
    if (!w.valid() || w.op() != Op::Leaf) throw std::invalid_argument("gradient: wrt entries must be leaves");
    if (!w.requires_grad())
      throw std::invalid_argument("gradient: leaf '" + w.name() + "' does not require gradients");
    targets.insert(w.node());
  }

  const auto order = topological_order(scalar);
  std::unordered_set<const Node*> live;
  for (const auto& e : order) {
    if (e.op() == Op::Leaf) {
      if (targets.count(e.node())) live.insert(e.node());
      continue;
    }
    if (blocks_gradient(e.op())) continue;
    for (const auto& in : e.inputs())
      if (live.count(in.node())) {
        live.insert(e.node());
        break;
      }
  }

  std::unordered_map<const Node*, Expr> adjoint;
  if (live.count(scalar.node())) adjoint.emplace(scalar.node(), Expr::scalar(1.0));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const Expr& e = *it;
    if (e.op() == Op::Leaf || blocks_gradient(e.op())) continue;
    auto a = adjoint.find(e.node());
    if (a == adjoint.end()) continue;
    const Expr adj = a->second;
    const auto& ins = e.inputs();
    for (std::size_t i = 0; i < ins.size(); ++i) {
      if (!live.count(ins[i].node())) continue;
      Expr contribution = vjp(e, i, adj);
      auto [slot, inserted] = adjoint.try_emplace(ins[i].node(), contribution);
      if (!inserted) slot->second = slot->second + contribution;
    }
  }

  std::vector<Expr> result;
  result.reserve(wrt.size());
  for (const auto& w : wrt) {
    auto a = adjoint.find(w.node());
    result.push_back(a != adjoint.end() ? a->second : Expr::constant(Tensor(w.shape())));
  }
  return result;
}

Expr gradient(const Expr& scalar, const Expr& wrt) { return gradient(scalar, std::vector<Expr>{wrt})[0]; }

double numerical_gradient_check(const Expr& scalar, const Expr& leaf, const Bindings& bindings, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("numerical_gradient_check: step must be positive");
  const Tensor analytic = forward(gradient(scalar, leaf), bindings);
  const Tensor* base = bindings.find(leaf.node());
  if (!base) throw BindingError("numerical_gradient_check: leaf is unbound");
  double worst = 0.0;
  for (std::size_t i = 0; i < base->size(); ++i) {
    Tensor plus = *base;
    Tensor minus = *base;
    plus[i] += step;
    minus[i] -= step;
    Bindings bp = bindings;
    Bindings bm = bindings;
    bp.bind(leaf, std::move(plus));
    bm.bind(leaf, std::move(minus));
    const double central = (forward(scalar, bp).item() - forward(scalar, bm).item()) / (2.0 * step);
    worst = std::max(worst, std::abs(analytic[i] - central) / (std::abs(analytic[i]) + 1e-12));
  }
  return worst;
}

}  // namespace gradshield
