#include "gradshield/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "gradshield/parallel.hpp"
#include "gradshield/rng.hpp"

namespace gradshield {

namespace {

void require_attack_norm(Norm norm) {
  if (norm == Norm::L1) throw std::invalid_argument("attacks support the l2 and l-inf norms only");
}

// Shrinks v so that x + v stays in the box. Never increases |v_i|.
Tensor clip_to_box(const Tensor& x, Tensor v) {
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::clamp(x[i] + v[i], 0.0, 1.0) - x[i];
  return v;
}

Tensor add(const Tensor& a, const Tensor& b) {
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

// Unit l2 direction (l2) or a random sign vector (l-inf).
Tensor random_direction(const Shape& shape, Norm kind, Rng& rng) {
  Tensor u(shape);
  if (kind == Norm::Linf) {
    for (auto& v : u.data()) v = rng.uniform() < 0.5 ? -1.0 : 1.0;
    return u;
  }
  double n2 = 0.0;
  while (n2 == 0.0) {
    for (auto& v : u.data()) v = rng.normal();
    n2 = norm(u.data(), Norm::L2);
  }
  for (auto& v : u.data()) v /= n2;
  return u;
}

Tensor random_in_ball(const Shape& shape, double eps, Norm kind, Rng& rng) {
  Tensor v(shape);
  if (kind == Norm::Linf) {
    for (auto& c : v.data()) c = rng.uniform(-eps, eps);
    return v;
  }
  Tensor u = random_direction(shape, Norm::L2, rng);
  const double r = eps * std::pow(rng.uniform(), 1.0 / static_cast<double>(u.size()));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = r * u[i];
  return v;
}

// Ascent direction for one step: sign(g) (l-inf) or g / ||g|| (l2).
Tensor ascent_step(const Tensor& g, Norm kind) {
  Tensor d(g.shape());
  if (kind == Norm::Linf) {
    for (std::size_t i = 0; i < g.size(); ++i) d[i] = g[i] > 0 ? 1.0 : (g[i] < 0 ? -1.0 : 0.0);
    return d;
  }
  const double n = norm(g.data(), Norm::L2);
  if (n == 0.0) return d;
  for (std::size_t i = 0; i < g.size(); ++i) d[i] = g[i] / n;
  return d;
}

AttackResult make_result(std::string name, Tensor v, double margin, Norm kind, std::size_t queries) {
  AttackResult r;
  r.attack = std::move(name);
  r.norm = kind;
  r.perturbation_norm = norm(v.data(), kind);
  r.perturbation = std::move(v);
  r.margin = margin;
  r.success = margin >= 0.0;
  r.queries = queries;
  return r;
}

}  // namespace

Tensor project(const Tensor& v, double eps, Norm kind) {
  if (!(eps >= 0.0)) throw std::invalid_argument("project: eps must be non-negative");
  Tensor out = v;
  if (kind == Norm::Linf) {
    for (auto& c : out.data()) c = std::clamp(c, -eps, eps);
    return out;
  }
  if (kind != Norm::L2) throw std::invalid_argument("project: norm must be l2 or l-inf");
  const double n = norm(v.data(), Norm::L2);
  if (n > eps) {
    for (auto& c : out.data()) c *= eps / n;
  }
  return out;
}

AttackResult fgsm(const Classifier& model, const Tensor& x, int y, double eps, Norm norm) {
  require_attack_norm(norm);
  if (!(eps >= 0.0)) throw std::invalid_argument("fgsm: eps must be non-negative");
  const Tensor g = model.margin_gradient(x, y);
  Tensor v = ascent_step(g, norm);
  for (auto& c : v.data()) c *= eps;
  v = clip_to_box(x, project(v, eps, norm));
  const double m = model.margin(add(x, v), y);
  return make_result("fgsm", std::move(v), m, norm, 2);
}

AttackResult pgd(const Classifier& model, const Tensor& x, int y, double eps, Norm norm, const PgdOptions& options) {
  require_attack_norm(norm);
  if (!(eps >= 0.0)) throw std::invalid_argument("pgd: eps must be non-negative");
  if (options.steps < 1) throw std::invalid_argument("pgd: steps must be at least 1");
  const double alpha = options.step_size > 0.0 ? options.step_size : 2.5 * eps / static_cast<double>(options.steps);
  const std::size_t restarts = std::max<std::size_t>(options.restarts, 1);
  std::size_t queries = 0;
  Tensor best_v(x.shape());
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < restarts; ++r) {
    Rng rng(derive_seed(options.seed, "restart:" + std::to_string(r)));
    Tensor v = options.random_start ? random_in_ball(x.shape(), eps, norm, rng) : Tensor(x.shape());
    v = clip_to_box(x, v);
    for (std::size_t s = 0;; ++s) {
      const Tensor point = add(x, v);
      const double m = model.margin(point, y);
      ++queries;
      if (m > best) {
        best = m;
        best_v = v;
      }
      if (s == options.steps) break;
      const Tensor d = ascent_step(model.margin_gradient(point, y), norm);
      ++queries;
      for (std::size_t i = 0; i < v.size(); ++i) v[i] += alpha * d[i];
      v = clip_to_box(x, project(v, eps, norm));
    }
  }
  return make_result("pgd", std::move(best_v), best, norm, queries);
}

AttackResult grad_free_attack(const Classifier& model, const Tensor& x, int y, double eps, Norm norm,
                              std::size_t budget, std::uint64_t seed) {
  require_attack_norm(norm);
  if (!(eps >= 0.0)) throw std::invalid_argument("grad_free_attack: eps must be non-negative");
  if (budget < 1) throw std::invalid_argument("grad_free_attack: budget must be at least 1");
  constexpr std::size_t patience = 8;
  Rng rng(seed);
  Tensor v(x.shape());
  double best = model.margin(x, y);
  std::size_t queries = 1;
  double step = eps;
  std::size_t failures = 0;
  while (best < 0.0 && queries < budget && eps > 0.0) {
    Tensor u = random_direction(x.shape(), norm, rng);
    Tensor candidate = v;
    for (std::size_t i = 0; i < u.size(); ++i) candidate[i] += step * u[i];
    candidate = clip_to_box(x, project(candidate, eps, norm));
    const double m = model.margin(add(x, candidate), y);
    ++queries;
    if (m > best) {
      best = m;
      v = std::move(candidate);
      failures = 0;
    } else if (++failures >= patience) {
      failures = 0;
      step *= 0.5;
      if (step < eps * 1e-3) step = eps;
    }
  }
  return make_result("grad_free", std::move(v), best, norm, queries);
}

std::string to_string(AttackKind kind) {
  switch (kind) {
    case AttackKind::Fgsm: return "fgsm";
    case AttackKind::Pgd: return "pgd";
    case AttackKind::GradFree: return "grad_free";
  }
  return "?";
}

AttackKind parse_attack_kind(const std::string& name) {
  if (name == "fgsm") return AttackKind::Fgsm;
  if (name == "pgd") return AttackKind::Pgd;
  if (name == "grad_free") return AttackKind::GradFree;
  throw std::invalid_argument("unknown attack '" + name + "'");
}

AttackResult run_suite(const Classifier& model, const Tensor& x, int y, double eps, Norm norm,
                       const AttackSuite& suite, std::uint64_t seed) {
  if (suite.attacks.empty()) throw std::invalid_argument("attack suite is empty");
  AttackResult best;
  best.margin = -std::numeric_limits<double>::infinity();
  std::size_t queries = 0;
  for (AttackKind kind : suite.attacks) {
    AttackResult r;
    switch (kind) {
      case AttackKind::Fgsm: r = fgsm(model, x, y, eps, norm); break;
      case AttackKind::Pgd: {
        PgdOptions o = suite.pgd;
        o.seed = derive_seed(seed, "pgd");
        r = pgd(model, x, y, eps, norm, o);
        break;
      }
      case AttackKind::GradFree:
        r = grad_free_attack(model, x, y, eps, norm, suite.budget, derive_seed(seed, "grad_free"));
        break;
    }
    queries += r.queries;
    if (r.success) {
      r.queries = queries;
      return r;
    }
    if (r.margin > best.margin) best = std::move(r);
  }
  best.queries = queries;
  return best;
}

double DistanceOptions::resolved_eps_max(Norm norm) const {
  if (eps_max > 0.0) return eps_max;
  return norm == Norm::Linf ? 64.0 / 255.0 : 0.5;
}

double DistanceOptions::resolved_tol(Norm norm) const {
  return tol > 0.0 ? tol : resolved_eps_max(norm) / 4096.0;
}

DistanceResult min_adv_distance(const Classifier& model, const Tensor& x, int y, const AttackSuite& suite, Norm norm,
                                const DistanceOptions& options, std::uint64_t seed) {
  require_attack_norm(norm);
  const double eps_max = options.resolved_eps_max(norm);
  const double tol = options.resolved_tol(norm);
  DistanceResult out;
  const double m0 = model.margin(x, y);
  if (m0 >= 0.0) {
    out.found = true;
    out.attack = "clean";
    out.witness = make_result("clean", Tensor(x.shape()), m0, norm, 1);
    return out;
  }
  AttackResult r = run_suite(model, x, y, eps_max, norm, suite, seed);
  if (!r.success) {
    out.distance = eps_max;
    out.witness = std::move(r);
    return out;
  }
  double lo = 0.0, hi = eps_max;
  AttackResult witness = std::move(r);
  while (hi - lo > tol) {
    const double mid = 0.5 * (lo + hi);
    AttackResult attempt = run_suite(model, x, y, mid, norm, suite, seed);
    if (attempt.success) {
      hi = mid;
      witness = std::move(attempt);
    } else {
      lo = mid;
    }
  }
  out.found = true;
  out.distance = hi;
  out.attack = witness.attack;
  out.witness = std::move(witness);
  return out;
}

std::vector<DistanceResult> min_adv_distances(const Classifier& model, const Dataset& data, const AttackSuite& suite,
                                              Norm norm, const DistanceOptions& options, std::uint64_t seed,
                                              std::size_t threads) {
  std::vector<DistanceResult> results(data.size());
  parallel_for(data.size(), threads, [&](std::size_t i) {
    const auto image_seed = derive_seed(seed, "attack:" + std::to_string(i));
    results[i] = min_adv_distance(model, data.example(i), data.labels[i], suite, norm, options, image_seed);
    results[i].image_id = i;
    results[i].witness.image_id = i;
  });
  return results;
}

std::vector<double> error_at_radii(const Classifier& model, const Dataset& data, const std::vector<double>& radii,
                                   const AttackSuite& suite, Norm norm, std::uint64_t seed, std::size_t threads) {
  for (std::size_t k = 1; k < radii.size(); ++k)
    if (!(radii[k] > radii[k - 1])) throw std::invalid_argument("error_at_radii: radii must be increasing");
  // first_hit[i] = index of the smallest radius where image i is broken.
  std::vector<std::size_t> first_hit(data.size(), radii.size());
  parallel_for(data.size(), threads, [&](std::size_t i) {
    const auto image_seed = derive_seed(seed, "attack:" + std::to_string(i));
    const Tensor x = data.example(i);
    const int y = data.labels[i];
    if (model.margin(x, y) >= 0.0) {
      first_hit[i] = 0;
      return;
    }
    for (std::size_t k = 0; k < radii.size(); ++k) {
      if (radii[k] <= 0.0) continue;
      if (run_suite(model, x, y, radii[k], norm, suite, image_seed).success) {
        first_hit[i] = k;
        return;
      }
    }
  });
  std::vector<double> error(radii.size(), 0.0);
  for (std::size_t k = 0; k < radii.size(); ++k) {
    std::size_t broken = 0;
    for (auto h : first_hit) broken += h <= k ? 1 : 0;
    error[k] = static_cast<double>(broken) / static_cast<double>(data.size());
  }
  return error;
}

double mean_distance(const std::vector<DistanceResult>& results) {
  if (results.empty()) return 0.0;
  double total = 0.0;
  for (const auto& r : results) total += r.distance;
  return total / static_cast<double>(results.size());
}

}  // namespace gradshield
