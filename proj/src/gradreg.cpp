#include "gradshield/gradreg.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <numeric>

#include "gradshield/rng.hpp"

namespace gradshield {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

Shape batched_shape(const ModelSpec& spec, const Tensor& x, bool& single) {
  single = x.shape() == spec.input_shape();
  Shape s = x.shape();
  if (single) s.insert(s.begin(), 1);
  return s;
}

// Per-example squared norm of a batch gradient expression [B, ...].
Expr squared_gradient_norms(const Expr& g, Norm norm) {
  const std::size_t batch = g.shape()[0];
  Expr flat = reshape(g, {batch, shape_size(g.shape()) / batch});
  if (norm == Norm::L1) return square(sum_last(abs(flat)));
  return sum_last(square(flat));
}

}  // namespace

std::string to_string(PenaltyMode mode) {
  switch (mode) {
    case PenaltyMode::FiniteDifference: return "fd";
    case PenaltyMode::DoubleBackprop: return "db";
    case PenaltyMode::None: return "none";
  }
  return "?";
}

PenaltyMode parse_penalty_mode(const std::string& name) {
  if (name == "fd" || name == "finite_difference") return PenaltyMode::FiniteDifference;
  if (name == "db" || name == "double_backprop") return PenaltyMode::DoubleBackprop;
  if (name == "none") return PenaltyMode::None;
  throw std::invalid_argument("unknown penalty mode '" + name + "'");
}

std::string to_string(Schedule schedule) { return schedule == Schedule::Constant ? "constant" : "cosine"; }

Schedule parse_schedule(const std::string& name) {
  if (name == "constant") return Schedule::Constant;
  if (name == "cosine") return Schedule::Cosine;
  throw std::invalid_argument("unknown schedule '" + name + "'");
}

void RegConfig::validate() const {
  if (!(h > 0.0)) throw std::invalid_argument("finite difference step h must be positive");
  if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be non-negative");
  if (batch_size < 1) throw std::invalid_argument("batch size must be at least 1");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (norm == Norm::Linf) throw std::invalid_argument("penalty norm must be l2 or l1");
  if (!(adversarial_eps >= 0.0)) throw std::invalid_argument("adversarial eps must be non-negative");
  if (!(clip_norm >= 0.0)) throw std::invalid_argument("clip norm must be non-negative");
}

double RegConfig::rate(std::size_t t, std::size_t total) const {
  if (schedule == Schedule::Constant || total == 0) return learning_rate;
  const double frac = static_cast<double>(t) / static_cast<double>(total);
  return learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

Tensor input_gradient(const ModelSpec& spec, const Parameters& params, const Tensor& x, std::span<const int> labels,
                      LossKind kind) {
  bool single;
  const Shape shape = batched_shape(spec, x, single);
  NetworkGraph graph(spec);
  auto input = Expr::variable(shape, "x");
  Bindings b;
  graph.bind(b, params);
  b.bind(input, x.reshaped(shape));
  Expr losses = loss(kind, graph.apply(input), labels);
  Tensor g = forward(gradient(sum(losses), input), b);
  return single ? g.reshaped(x.shape()) : g;
}

Tensor input_gradient(const ModelSpec& spec, const Parameters& params, const Tensor& x, int label, LossKind kind) {
  return input_gradient(spec, params, x, std::span<const int>(&label, 1), kind);
}

Tensor reg_direction(const Tensor& g, Norm kind, std::size_t n) {
  if (n != g.size()) throw ShapeError("reg_direction: n must equal the number of gradient components");
  if (kind == Norm::Linf) throw std::invalid_argument("reg_direction: norm must be l2 or l1");
  Tensor d(g.shape());
  const double g2 = norm(g.data(), Norm::L2);
  if (g2 == 0.0) return d;
  if (kind == Norm::L2) {
    for (std::size_t i = 0; i < g.size(); ++i) d[i] = g[i] / g2;
  } else {
    const double scale = 1.0 / std::sqrt(static_cast<double>(n));
    for (std::size_t i = 0; i < g.size(); ++i) d[i] = g[i] > 0 ? scale : (g[i] < 0 ? -scale : 0.0);
  }
  return d;
}

Tensor reg_directions(const Tensor& g, Norm kind) {
  if (g.rank() < 2) throw ShapeError("reg_directions: batch input required");
  const std::size_t batch = g.shape()[0];
  const std::size_t n = g.size() / batch;
  Tensor out(g.shape());
  for (std::size_t b = 0; b < batch; ++b) {
    Tensor row({n}, std::vector<double>(g.data().begin() + static_cast<std::ptrdiff_t>(b * n),
                                        g.data().begin() + static_cast<std::ptrdiff_t>((b + 1) * n)));
    const Tensor d = reg_direction(row, kind, n);
    std::copy(d.data().begin(), d.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(b * n));
  }
  return out;
}

namespace {

Expr fd_term(const NetworkGraph& graph, const Expr& clean_losses, const Tensor& x, std::span<const int> labels,
             const Tensor& d, double h, LossKind kind) {
  if (!(h > 0.0)) throw std::invalid_argument("fd_penalty: h must be positive");
  if (d.shape() != x.shape()) throw ShapeError("fd_penalty: direction and input shapes differ");
  Tensor z = x;
  for (std::size_t i = 0; i < z.size(); ++i) z[i] += h * d[i];
  Expr shifted = loss(kind, graph.apply(Expr::constant(std::move(z))), labels);
  return mean(square((1.0 / h) * (shifted - clean_losses)));
}

}  // namespace

Expr fd_penalty(const NetworkGraph& graph, const Tensor& x, std::span<const int> labels, const Tensor& d, double h,
                LossKind kind) {
  bool single;
  const Shape shape = batched_shape(graph.spec(), x, single);
  const Tensor xb = x.reshaped(shape);
  Expr clean = loss(kind, graph.apply(Expr::constant(xb)), labels);
  return fd_term(graph, clean, xb, labels, d.reshaped(shape), h, kind);
}

Expr db_penalty(const NetworkGraph& graph, Bindings& bindings, const Tensor& x, std::span<const int> labels,
                Norm norm, LossKind kind) {
  bool single;
  const Shape shape = batched_shape(graph.spec(), x, single);
  auto input = Expr::variable(shape, "x");
  bindings.bind(input, x.reshaped(shape));
  Expr losses = loss(kind, graph.apply(input), labels);
  return mean(squared_gradient_norms(gradient(sum(losses), input), norm));
}

StepMetrics train_step(const NetworkGraph& graph, Parameters& params, const Tensor& x, std::span<const int> labels,
                       const RegConfig& config, std::size_t t, std::size_t total) {
  const auto t0 = Clock::now();
  if (labels.empty()) throw std::invalid_argument("train_step: empty minibatch");
  StepMetrics m;
  Bindings b;
  graph.bind(b, params);
  auto input = Expr::variable(x.shape(), "x");
  b.bind(input, x);
  Evaluator ev(b);
  try {
    Expr losses = loss(config.loss, graph.apply(input), labels);
    m.model_forwards = 1;
    Expr objective = mean(losses);
    m.loss = ev(objective).item();

    if (config.lambda > 0.0 && config.mode != PenaltyMode::None) {
      const auto p0 = Clock::now();
      Expr g = gradient(sum(losses), input);
      m.input_gradient_passes = 1;
      Expr penalty;
      if (config.mode == PenaltyMode::FiniteDifference) {
        const Tensor d = reg_directions(ev(g), config.norm);
        penalty = fd_term(graph, losses, x, labels, d, config.h, config.loss);
        m.model_forwards = 2;
      } else {
        penalty = mean(squared_gradient_norms(g, config.norm));
      }
      m.penalty = ev(penalty).item();
      m.penalty_seconds = seconds_since(p0);
      objective = objective + config.lambda * penalty;
    }

    const auto grads = gradient(objective, graph.parameters());
    const double rate = config.rate(t, total);
    std::vector<Tensor> values;
    values.reserve(grads.size());
    double total_sq = 0.0;
    for (const auto& g : grads) {
      values.push_back(ev(g));
      for (double v : values.back().data()) total_sq += v * v;
    }
    double scale = rate;
    if (config.clip_norm > 0.0 && total_sq > config.clip_norm * config.clip_norm)
      scale *= config.clip_norm / std::sqrt(total_sq);
    for (std::size_t s = 0; s < values.size(); ++s) {
      auto view = params.view(s);
      for (std::size_t i = 0; i < view.size(); ++i) view[i] -= scale * values[s][i];
    }
  } catch (const NonFiniteError& e) {
    throw TrainingError("non-finite value at step " + std::to_string(t) + " (loss " + std::to_string(m.loss) +
                        ", penalty " + std::to_string(m.penalty) + "): " + e.what());
  }
  m.seconds = seconds_since(t0);
  return m;
}

namespace {

// 7-step l-inf PGD on the training loss, random start, projected to the box.
Tensor adversarial_batch(const NetworkGraph& graph, const Parameters& params, const Tensor& x,
                         std::span<const int> labels, const RegConfig& config, Rng& rng) {
  constexpr int steps = 7;
  const double eps = config.adversarial_eps;
  const double alpha = 2.5 * eps / steps;
  Tensor adv = x;
  for (std::size_t i = 0; i < adv.size(); ++i) adv[i] = std::clamp(x[i] + rng.uniform(-eps, eps), 0.0, 1.0);
  auto input = Expr::variable(x.shape(), "x");
  Expr g = gradient(sum(loss(config.loss, graph.apply(input), labels)), input);
  for (int s = 0; s < steps; ++s) {
    Bindings b;
    graph.bind(b, params);
    b.bind(input, adv);
    const Tensor grad = forward(g, b);
    for (std::size_t i = 0; i < adv.size(); ++i) {
      const double sg = grad[i] > 0 ? 1.0 : (grad[i] < 0 ? -1.0 : 0.0);
      const double v = std::clamp(adv[i] + alpha * sg - x[i], -eps, eps);
      adv[i] = std::clamp(x[i] + v, 0.0, 1.0);
    }
  }
  return adv;
}

}  // namespace

TrainReport train(const ModelSpec& spec, const Dataset& data, const RegConfig& config) {
  return train(spec, data, config, Parameters::initialize(spec, derive_seed(config.seed, "init")));
}

TrainReport train(const ModelSpec& spec, const Dataset& data, const RegConfig& config, Parameters initial) {
  config.validate();
  if (data.size() == 0) throw std::invalid_argument("train: empty dataset");
  if (data.input_shape() != spec.input_shape()) throw ShapeError("train: dataset does not match model input");
  NetworkGraph graph(spec);
  TrainReport report{{}, std::move(initial)};
  Rng rng(derive_seed(config.seed, "train"));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t per_epoch = (data.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t total = per_epoch * config.epochs;
  std::size_t t = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto e0 = Clock::now();
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    EpochStats stats;
    stats.epoch = epoch + 1;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, stop - start);
      Tensor x = data.batch(idx);
      const auto labels = data.batch_labels(idx);
      if (config.adversarial_eps > 0) x = adversarial_batch(graph, report.parameters, x, labels, config, rng);
      const auto m = train_step(graph, report.parameters, x, labels, config, t++, total);
      const double w = static_cast<double>(idx.size());
      stats.loss += w * m.loss;
      stats.penalty += w * m.penalty;
      stats.penalty_seconds += m.penalty_seconds;
    }
    stats.loss /= static_cast<double>(data.size());
    stats.penalty /= static_cast<double>(data.size());
    stats.seconds = seconds_since(e0);
    report.epochs.push_back(stats);
  }
  return report;
}

double mean_input_gradient_norm(const ModelSpec& spec, const Parameters& params, const Dataset& data, LossKind kind,
                                Norm norm_kind) {
  constexpr std::size_t chunk = 256;
  double total = 0.0;
  const std::size_t n = data.input_size();
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    std::vector<std::size_t> idx(std::min(chunk, data.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const Tensor g = input_gradient(spec, params, data.batch(idx), data.batch_labels(idx), kind);
    for (std::size_t b = 0; b < idx.size(); ++b) total += norm(g.data().subspan(b * n, n), norm_kind);
  }
  return total / static_cast<double>(data.size());
}

BenchReport bench_regularizers(const ModelSpec& spec, const Dataset& data, const RegConfig& config,
                               std::size_t steps) {
  config.validate();
  if (steps == 0) throw std::invalid_argument("bench: steps must be positive");
  NetworkGraph graph(spec);
  Rng rng(derive_seed(config.seed, "bench"));
  const Parameters initial = Parameters::initialize(spec, derive_seed(config.seed, "init"));
  Parameters plain = initial, control = initial, fd = initial, db = initial;
  RegConfig plain_cfg = config, control_cfg = config, fd_cfg = config, db_cfg = config;
  plain_cfg.lambda = 0.0;
  plain_cfg.mode = PenaltyMode::None;
  control_cfg.lambda = 0.0;
  control_cfg.mode = fd_cfg.mode = PenaltyMode::FiniteDifference;
  db_cfg.mode = PenaltyMode::DoubleBackprop;
  if (fd_cfg.lambda == 0.0) fd_cfg.lambda = db_cfg.lambda = 0.1;

  BenchReport report;
  report.steps = steps;
  report.parameter_count = spec.parameter_count();
  std::vector<double> tp, tc, tf, td;
  const std::size_t m = std::min(config.batch_size, data.size());
  for (std::size_t s = 0; s < steps; ++s) {
    std::vector<std::size_t> idx(m);
    for (auto& i : idx) i = rng.below(data.size());
    const Tensor x = data.batch(idx);
    const auto labels = data.batch_labels(idx);
    tp.push_back(train_step(graph, plain, x, labels, plain_cfg, s, steps).seconds);
    tc.push_back(train_step(graph, control, x, labels, control_cfg, s, steps).seconds);
    const auto mf = train_step(graph, fd, x, labels, fd_cfg, s, steps);
    tf.push_back(mf.seconds);
    report.fd_model_forwards = mf.model_forwards;
    report.fd_input_gradient_passes = mf.input_gradient_passes;
    td.push_back(train_step(graph, db, x, labels, db_cfg, s, steps).seconds);
  }
  auto median = [](std::vector<double> v) {
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2), v.end());
    return v[v.size() / 2];
  };
  report.plain_seconds = median(tp);
  report.control_seconds = median(tc);
  report.fd_seconds = median(tf);
  report.db_seconds = median(td);
  return report;
}

}  // namespace gradshield
