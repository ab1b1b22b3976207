#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// Expressions are immutable DAGs of shared nodes. `gradient` returns new
// expressions (not numbers), so the result can itself be differentiated;
// this is what double backpropagation needs. Values are computed on demand
// by an `Evaluator`, which memoizes every node it visits for one set of leaf
// bindings.

#include <cstdint>
#include <deque>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "gradshield/tensor.hpp"

namespace gradshield {

enum class Op {
  Leaf,
  Constant,
  Add,
  Mul,
  MatMul,
  MatMulNT,  // a * b^T
  MatMulTN,  // a^T * b
  Transpose,
  Reshape,
  Gather,
  ScatterAdd,
  Relu,
  Step,  // 1[x > 0]; zero derivative
  Softplus,
  Sigmoid,
  Sign,  // zero derivative
  Power,
  LogSumExp,  // over the last axis
  Softmax,    // over the last axis
  ReduceSum,
  ReduceMax,    // over the last axis
  ArgMaxMask,   // one-hot of the last-axis argmax, lowest index wins; zero derivative
  Detach,
};

const char* op_name(Op op);

enum class Axis { All, Last };

class BindingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Node;

class Expr {
 public:
  Expr() = default;

  // A bindable input. Gradients can only be requested for leaves created
  // with requires_grad.
  static Expr variable(Shape shape, std::string name, bool requires_grad = true);
  static Expr constant(Tensor value);
  static Expr scalar(double value);

  [[nodiscard]] bool valid() const { return node_ != nullptr; }
  [[nodiscard]] Op op() const;
  [[nodiscard]] const Shape& shape() const;
  [[nodiscard]] const std::string& name() const;
  [[nodiscard]] bool requires_grad() const;
  [[nodiscard]] bool detached() const;
  [[nodiscard]] const Node* node() const { return node_.get(); }
  [[nodiscard]] const std::vector<Expr>& inputs() const;

  // Only meaningful for Op::Constant.
  [[nodiscard]] const Tensor& constant_value() const;

  friend bool operator==(const Expr& a, const Expr& b) { return a.node_ == b.node_; }

 private:
  explicit Expr(std::shared_ptr<const Node> node) : node_(std::move(node)) {}
  std::shared_ptr<const Node> node_;

  friend Expr make_node(Node node);
};

struct ExprHash {
  std::size_t operator()(const Expr& e) const { return std::hash<const Node*>{}(e.node()); }
};

using IndexMap = std::shared_ptr<const std::vector<std::ptrdiff_t>>;

struct Node {
  Op op = Op::Constant;
  Shape shape;
  std::vector<Expr> inputs;
  std::string name;
  bool requires_grad = false;
  double exponent = 1.0;
  Axis axis = Axis::All;
  IndexMap index;
  std::shared_ptr<const Tensor> value;
};

// Elementwise arithmetic. Operands must have equal shapes, or one of them
// must be a scalar (rank 0), which is broadcast.
Expr operator+(const Expr& a, const Expr& b);
Expr operator-(const Expr& a, const Expr& b);
Expr operator*(const Expr& a, const Expr& b);
Expr operator-(const Expr& a);
Expr operator*(double c, const Expr& a);
Expr operator+(const Expr& a, double c);

Expr matmul(const Expr& a, const Expr& b);     // [m,k] x [k,n]
Expr matmul_nt(const Expr& a, const Expr& b);  // [m,k] x [n,k]^T
Expr matmul_tn(const Expr& a, const Expr& b);  // [k,m]^T x [k,n]
Expr transpose(const Expr& a);              // rank 2
Expr reshape(const Expr& a, Shape shape);
// out[i] = in[index[i]], or 0 where index[i] < 0.
Expr gather(const Expr& a, IndexMap index, Shape out_shape);
// out[index[i]] += in[i] for index[i] >= 0. Adjoint of gather.
Expr scatter_add(const Expr& a, IndexMap index, Shape out_shape);
Expr relu(const Expr& a);
Expr step(const Expr& a);
Expr softplus(const Expr& a);
Expr sigmoid(const Expr& a);
Expr sign(const Expr& a);
Expr pow(const Expr& a, double exponent);
Expr square(const Expr& a);
Expr abs(const Expr& a);
Expr logsumexp(const Expr& a);
Expr softmax(const Expr& a);
Expr sum(const Expr& a);
Expr sum_last(const Expr& a);
Expr max_last(const Expr& a);
Expr argmax_mask(const Expr& a);
Expr mean(const Expr& a);
Expr detach(const Expr& a);

// Replicates a tensor of shape S into S + [n] (new trailing axis).
Expr expand_last(const Expr& a, std::size_t n);

// 2-D convolution, stride 1, symmetric zero padding.
// input [B,C,H,W], kernel [K,C,kh,kw] -> [B,K,H+2p-kh+1,W+2p-kw+1].
Expr conv2d(const Expr& input, const Expr& kernel, std::size_t padding);

class Bindings {
 public:
  Bindings& bind(const Expr& leaf, Tensor value);
  [[nodiscard]] const Tensor* find(const Node* leaf) const;

 private:
  struct Entry {
    Expr leaf;  // keeps the key alive
    Tensor value;
  };
  std::unordered_map<const Node*, Entry> values_;
};

// Evaluates expressions for one set of bindings. Results are memoized, so
// evaluating a loss and then its gradient reuses the forward pass. Distinct
// nodes that apply the same op to the same values (separate gradient calls
// each build their own step(x), for instance) are computed once. The
// bindings must outlive the evaluator and stay unchanged.
class Evaluator {
 public:
  explicit Evaluator(const Bindings& bindings) : bindings_(&bindings) {}

  const Tensor& operator()(const Expr& root);

 private:
  struct Key {
    Op op;
    std::vector<const Tensor*> inputs;
    double exponent;
    Axis axis;
    const void* index;
    Shape shape;
    bool operator==(const Key&) const = default;
  };
  struct KeyHash {
    std::size_t operator()(const Key& k) const;
  };

  const Bindings* bindings_;
  // Evaluated roots are retained so memoized node addresses stay valid.
  std::vector<Expr> roots_;
  std::deque<Tensor> storage_;
  std::unordered_map<const Node*, const Tensor*> memo_;
  std::unordered_map<Key, const Tensor*, KeyHash> computed_;
};

// Pure evaluation; fails on unbound leaves, shape mismatches, and non-finite
// results.
Tensor forward(const Expr& root, const Bindings& bindings);

// Gradient expressions of a scalar with respect to the given leaves, in the
// same order. Unreachable leaves get a zero constant.
std::vector<Expr> gradient(const Expr& scalar, const std::vector<Expr>& wrt);
Expr gradient(const Expr& scalar, const Expr& wrt);

// max_i |analytic_i - central_i| / (|analytic_i| + 1e-12), where central_i is
// the central difference of `scalar` along component i of `leaf`.
double numerical_gradient_check(const Expr& scalar, const Expr& leaf, const Bindings& bindings,
                                double step);

}  // namespace gradshield
