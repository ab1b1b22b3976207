#pragma once

// Squared input-gradient regularization.
//
// The penalty R(w) = mean_i ||grad_x l(x_i; w)||^2 is computed either
//   - by finite differences: ((l(x + h d) - l(x)) / h)^2 with d the detached,
//     normalized input gradient (two forward passes, ordinary backprop), or
//   - exactly, by double backpropagation through the input gradient.
// The training loop is plain minibatch SGD on L(w) + lambda R(w).

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gradshield/autodiff.hpp"
#include "gradshield/dataset.hpp"
#include "gradshield/model.hpp"

namespace gradshield {

enum class PenaltyMode { FiniteDifference, DoubleBackprop, None };
enum class Schedule { Constant, Cosine };

std::string to_string(PenaltyMode mode);
PenaltyMode parse_penalty_mode(const std::string& name);
std::string to_string(Schedule schedule);
Schedule parse_schedule(const std::string& name);

struct RegConfig {
  double lambda = 0.1;
  double h = 0.01;
  Norm norm = Norm::L2;  // L2 or L1 (signed-gradient direction)
  PenaltyMode mode = PenaltyMode::FiniteDifference;
  std::size_t batch_size = 32;
  double learning_rate = 0.1;
  Schedule schedule = Schedule::Constant;
  std::size_t epochs = 10;
  std::uint64_t seed = 0;
  LossKind loss = LossKind::CrossEntropy;
  // > 0 trains on 7-step l-inf PGD examples of this radius instead of clean
  // inputs (comparison baseline only).
  double adversarial_eps = 0.0;
  // > 0 rescales the parameter gradient to at most this l2 norm.
  double clip_norm = 0.0;

  void validate() const;
  // Step size at step t of total.
  [[nodiscard]] double rate(std::size_t t, std::size_t total) const;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepMetrics {
  double loss = 0.0;     // L(w) before the update
  double penalty = 0.0;  // R(w) before the update, 0 when inactive
  double seconds = 0.0;
  double penalty_seconds = 0.0;
  std::size_t model_forwards = 0;
  std::size_t input_gradient_passes = 0;
};

struct EpochStats {
  std::size_t epoch = 0;
  double loss = 0.0;
  double penalty = 0.0;
  double seconds = 0.0;
  double penalty_seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochStats> epochs;
  Parameters parameters;
};

// grad_x of the chosen loss. x is one example or a batch [B, input...] with
// one label per example; the result has the shape of x.
Tensor input_gradient(const ModelSpec& spec, const Parameters& params, const Tensor& x,
                      std::span<const int> labels, LossKind kind);
Tensor input_gradient(const ModelSpec& spec, const Parameters& params, const Tensor& x, int label,
                      LossKind kind);

// L2: g / ||g||_2. L1: sgn(g) / sqrt(n). Zero gradient gives d = 0.
Tensor reg_direction(const Tensor& g, Norm kind, std::size_t n);
// Row-wise reg_direction over a batch [B, input...].
Tensor reg_directions(const Tensor& g, Norm kind);

// mean_i ((l(x_i + h d_i) - l(x_i)) / h)^2 as an expression of the graph's
// parameter leaves; d is treated as a constant.
Expr fd_penalty(const NetworkGraph& graph, const Tensor& x, std::span<const int> labels, const Tensor& d, double h,
                LossKind kind);

// mean_i ||grad_x l(x_i)||^2 (L2) or ||grad_x l(x_i)||_1^2 (L1), with the
// input gradient kept symbolic so the result can be differentiated again.
// Binds the input leaf it creates into `bindings`.
Expr db_penalty(const NetworkGraph& graph, Bindings& bindings, const Tensor& x, std::span<const int> labels,
                Norm norm, LossKind kind);

// One SGD step on the minibatch (x, labels). `t` and `total` feed the
// learning-rate schedule. Updates params in place.
StepMetrics train_step(const NetworkGraph& graph, Parameters& params, const Tensor& x, std::span<const int> labels,
                       const RegConfig& config, std::size_t t = 0, std::size_t total = 1);

// Initial parameters drawn from the "init" substream of config.seed.
TrainReport train(const ModelSpec& spec, const Dataset& data, const RegConfig& config);
TrainReport train(const ModelSpec& spec, const Dataset& data, const RegConfig& config, Parameters initial);

// Mean ||grad_x l||_2 over a dataset.
double mean_input_gradient_norm(const ModelSpec& spec, const Parameters& params, const Dataset& data,
                                LossKind kind, Norm norm = Norm::L2);

struct BenchReport {
  std::size_t steps = 0;
  std::size_t parameter_count = 0;
  double plain_seconds = 0.0;    // median per step, no penalty
  double control_seconds = 0.0;  // finite-difference mode at lambda = 0
  double fd_seconds = 0.0;
  double db_seconds = 0.0;
  std::size_t fd_model_forwards = 0;
  std::size_t fd_input_gradient_passes = 0;
  [[nodiscard]] double fd_over_db() const { return fd_seconds / db_seconds; }
  [[nodiscard]] double plain_over_control() const { return plain_seconds / control_seconds; }
};

// Interleaves plain, control, finite-difference and double-backprop steps
// over the same minibatches and reports median step times. lambda = 0 in the
// config benchmarks the penalties at lambda = 0.1.
BenchReport bench_regularizers(const ModelSpec& spec, const Dataset& data, const RegConfig& config,
                               std::size_t steps = 100);

}  // namespace gradshield
