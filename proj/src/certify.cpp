#include "gradshield/certify.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <numeric>

#include "gradshield/parallel.hpp"
#include "gradshield/rng.hpp"

namespace gradshield {

NormPair NormPair::for_attack(Norm attack) {
  if (attack == Norm::L2) return {Norm::L2, Norm::L2};
  if (attack == Norm::Linf) return {Norm::Linf, Norm::L1};
  throw std::invalid_argument("attack norm must be l2 or l-inf");
}

namespace {

void check_sampler(const SamplerConfig& c, const Dataset& data) {
  if (c.n_blocks < 1) throw std::invalid_argument("sampler: n_blocks must be at least 1");
  if (c.block_size < 1) throw std::invalid_argument("sampler: block_size must be at least 1");
  if (data.size() == 0) throw std::invalid_argument("sampler: empty dataset");
}

std::vector<std::size_t> block_indices(std::size_t n, std::size_t block, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (block >= n) return idx;
  for (std::size_t i = 0; i < block; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
  idx.resize(block);
  return idx;
}

// Runs f(block rng, indices) for every block, in parallel, one seed per block.
std::vector<double> block_maxima(const Dataset& data, const SamplerConfig& c,
                                 const std::function<double(Rng&, const std::vector<std::size_t>&)>& f) {
  std::vector<double> out(c.n_blocks);
  parallel_for(c.n_blocks, c.threads, [&](std::size_t k) {
    Rng rng(derive_seed(c.seed, "block:" + std::to_string(k)));
    const auto idx = block_indices(data.size(), c.block_size, rng);
    out[k] = f(rng, idx);
  });
  return out;
}

}  // namespace

std::vector<double> sample_modulus(const Classifier& model, const Dataset& data, double eps, Norm norm_kind,
                                   const SamplerConfig& config) {
  if (!(eps > 0.0)) throw std::invalid_argument("sample_modulus: eps must be positive");
  if (norm_kind == Norm::L1) throw std::invalid_argument("sample_modulus: norm must be l2 or l-inf");
  check_sampler(config, data);
  const std::size_t s = std::max<std::size_t>(config.samples_per_point, 1);
  const std::size_t n = data.input_size();
  Shape batch_shape = data.input_shape();
  batch_shape.insert(batch_shape.begin(), s);
  return block_maxima(data, config, [&](Rng& rng, const std::vector<std::size_t>& idx) {
    double best = 0.0;
    for (auto i : idx) {
      const Tensor x = data.example(i);
      const int y = data.labels[i];
      const double l = model.margin(x, y);
      const Tensor g = model.margin_gradient(x, y);
      Tensor points(batch_shape);
      std::vector<double> linear(s);
      for (std::size_t k = 0; k < s; ++k) {
        std::vector<double> v(n);
        if (norm_kind == Norm::Linf) {
          for (auto& c : v) c = eps * rng.uniform(-1.0, 1.0);
        } else {
          double len = 0.0;
          while (len == 0.0) {
            for (auto& c : v) c = rng.normal();
            len = norm(v, Norm::L2);
          }
          const double r = eps * std::pow(rng.uniform(), 1.0 / static_cast<double>(n)) / len;
          for (auto& c : v) c *= r;
        }
        linear[k] = dot(v, g.data());
        for (std::size_t j = 0; j < n; ++j) points[k * n + j] = x[j] + v[j];
      }
      const Tensor logits = model.logits(points);
      const std::size_t classes = logits.shape()[1];
      for (std::size_t k = 0; k < s; ++k) {
        const Tensor row({classes}, std::vector<double>(logits.data().begin() + static_cast<std::ptrdiff_t>(k * classes),
                                                        logits.data().begin() +
                                                            static_cast<std::ptrdiff_t>((k + 1) * classes)));
        best = std::max(best, cw_margin(row, y) - l - linear[k]);
      }
    }
    return best;
  });
}

std::vector<double> sample_grad_norm_maxima(const Classifier& model, const Dataset& data, Norm dual,
                                            const SamplerConfig& config) {
  check_sampler(config, data);
  return block_maxima(data, config, [&](Rng&, const std::vector<std::size_t>& idx) {
    const Tensor g = model.margin_gradient(data.batch(idx), data.batch_labels(idx));
    const std::size_t n = data.input_size();
    double best = 0.0;
    for (std::size_t b = 0; b < idx.size(); ++b) best = std::max(best, norm(g.data().subspan(b * n, n), dual));
    return best;
  });
}

// ---------------------------------------------------------------------------
// GEV

namespace {

constexpr double kXiLimit = 0.5;
constexpr double kGumbelXi = 1e-9;

double gev_ll_standard(double mu, double sigma, double xi, std::span<const double> z) {
  if (!(sigma > 0.0) || !std::isfinite(mu) || !std::isfinite(xi)) return -INFINITY;
  const double n = static_cast<double>(z.size());
  double ll = -n * std::log(sigma);
  if (std::abs(xi) < kGumbelXi) {
    for (double v : z) {
      const double t = (v - mu) / sigma;
      ll -= t + std::exp(-t);
    }
    return ll;
  }
  for (double v : z) {
    const double t = 1.0 + xi * (v - mu) / sigma;
    if (!(t > 0.0)) return -INFINITY;
    const double lt = std::log(t);
    ll -= (1.0 + 1.0 / xi) * lt + std::exp(-lt / xi);
  }
  return ll;
}

// Minimizes f by Nelder-Mead from `start` with initial offsets `step`.
std::vector<double> nelder_mead(const std::function<double(const std::vector<double>&)>& f, std::vector<double> start,
                                const std::vector<double>& step, std::size_t max_iter = 4000) {
  const std::size_t d = start.size();
  std::vector<std::vector<double>> pts(d + 1, start);
  for (std::size_t i = 0; i < d; ++i) pts[i + 1][i] += step[i];
  std::vector<double> val(d + 1);
  for (std::size_t i = 0; i <= d; ++i) val[i] = f(pts[i]);
  std::vector<std::size_t> order(d + 1);
  for (std::size_t it = 0; it < max_iter; ++it) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return val[a] < val[b]; });
    const auto best = order.front(), worst = order.back(), second = order[d - 1];
    if (std::abs(val[worst] - val[best]) <= 1e-12 * (1.0 + std::abs(val[best]))) break;
    std::vector<double> centroid(d, 0.0);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t k = 0; k < d; ++k) centroid[k] += pts[order[i]][k] / static_cast<double>(d);
    auto along = [&](double t) {
      std::vector<double> p(d);
      for (std::size_t k = 0; k < d; ++k) p[k] = centroid[k] + t * (pts[worst][k] - centroid[k]);
      return p;
    };
    const auto reflected = along(-1.0);
    const double fr = f(reflected);
    if (fr < val[best]) {
      const auto expanded = along(-2.0);
      const double fe = f(expanded);
      if (fe < fr) {
        pts[worst] = expanded;
        val[worst] = fe;
      } else {
        pts[worst] = reflected;
        val[worst] = fr;
      }
    } else if (fr < val[second]) {
      pts[worst] = reflected;
      val[worst] = fr;
    } else {
      const bool outside = fr < val[worst];
      const auto contracted = along(outside ? -0.5 : 0.5);
      const double fc = f(contracted);
      if (fc < (outside ? fr : val[worst])) {
        pts[worst] = contracted;
        val[worst] = fc;
      } else {
        for (std::size_t i = 1; i <= d; ++i) {
          auto& p = pts[order[i]];
          for (std::size_t k = 0; k < d; ++k) p[k] = pts[best][k] + 0.5 * (p[k] - pts[best][k]);
          val[order[i]] = f(p);
        }
      }
    }
  }
  const auto it = std::min_element(val.begin(), val.end());
  return pts[static_cast<std::size_t>(it - val.begin())];
}

// Hosking's probability-weighted-moment estimate on standardized samples.
GevParams pwm_init(std::vector<double> z) {
  std::sort(z.begin(), z.end());
  const double n = static_cast<double>(z.size());
  double b0 = 0.0, b1 = 0.0, b2 = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double j = static_cast<double>(i);
    b0 += z[i];
    b1 += z[i] * j / (n - 1.0);
    b2 += z[i] * j * (j - 1.0) / ((n - 1.0) * (n - 2.0));
  }
  b0 /= n;
  b1 /= n;
  b2 /= n;
  const double c = (2.0 * b1 - b0) / (3.0 * b2 - b0) - std::log(2.0) / std::log(3.0);
  double k = 7.8590 * c + 2.9554 * c * c;  // k = -xi
  k = std::clamp(k, -kXiLimit, kXiLimit);
  GevParams p;
  if (std::abs(k) < 1e-6) {
    p.sigma = (2.0 * b1 - b0) / std::log(2.0);
    p.mu = b0 - std::numbers::egamma * p.sigma;
    p.xi = 0.0;
  } else {
    const double g = std::tgamma(1.0 + k);
    p.sigma = (2.0 * b1 - b0) * k / (g * (1.0 - std::pow(2.0, -k)));
    p.mu = b0 + p.sigma * (g - 1.0) / k;
    p.xi = -k;
  }
  if (!(p.sigma > 0.0) || !std::isfinite(p.mu)) {
    p.sigma = std::sqrt(6.0) / std::numbers::pi;
    p.mu = -std::numbers::egamma * p.sigma;
    p.xi = 0.0;
  }
  return p;
}

}  // namespace

double gev_log_likelihood(const GevParams& params, std::span<const double> samples) {
  return gev_ll_standard(params.mu, params.sigma, params.xi, samples);
}

GevFit gev_fit_mle(std::span<const double> samples) {
  if (samples.size() < 30) throw GevError("GEV fit needs at least 30 block maxima");
  const double n = static_cast<double>(samples.size());
  const double mean = std::accumulate(samples.begin(), samples.end(), 0.0) / n;
  double var = 0.0;
  for (double v : samples) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / n);
  if (!(sd > 1e-12 * std::max(1.0, std::abs(mean))))
    throw GevError("GEV fit: all block maxima are equal; use larger or more varied blocks");
  std::vector<double> z(samples.size());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = (samples[i] - mean) / sd;

  auto gumbel_nll = [&](const std::vector<double>& p) {
    const double ll = gev_ll_standard(p[0], std::exp(p[1]), 0.0, z);
    return std::isfinite(ll) ? -ll : 1e300;
  };
  const double s0 = std::sqrt(6.0) / std::numbers::pi;
  const auto g = nelder_mead(gumbel_nll, {-std::numbers::egamma * s0, std::log(s0)}, {0.1, 0.1});
  const double gumbel_ll = -gumbel_nll(g);

  auto full_nll = [&](const std::vector<double>& p) {
    if (std::abs(p[2]) > kXiLimit) return 1e300;
    const double ll = gev_ll_standard(p[0], std::exp(p[1]), p[2], z);
    return std::isfinite(ll) ? -ll : 1e300;
  };
  const GevParams init = pwm_init(z);
  std::vector<double> best = g;
  best.push_back(0.0);
  double best_nll = full_nll(best);
  for (const auto& start : {std::vector<double>{init.mu, std::log(init.sigma), init.xi}, best}) {
    const auto r = nelder_mead(full_nll, start, {0.1, 0.1, 0.05});
    const double v = full_nll(r);
    if (v < best_nll) {
      best = r;
      best_nll = v;
    }
  }

  GevFit fit;
  fit.gumbel_fallback = !(best_nll < 1e299) || -best_nll < gumbel_ll - 1e-6;
  const std::vector<double>& chosen = fit.gumbel_fallback ? std::vector<double>{g[0], g[1], 0.0} : best;
  fit.params = {mean + sd * chosen[0], sd * std::exp(chosen[1]), chosen[2]};
  if (std::abs(fit.params.xi) < kGumbelXi) fit.params.xi = 0.0;
  fit.log_likelihood = gev_log_likelihood(fit.params, samples);
  fit.gumbel_log_likelihood = gumbel_ll - n * std::log(sd);
  return fit;
}

double gev_upper_quantile(const GevParams& params, double p) {
  if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("gev_upper_quantile: p must be in (0, 1)");
  const double y = -std::log1p(-p);
  if (params.xi == 0.0) return params.mu - params.sigma * std::log(y);
  return params.mu - params.sigma / params.xi * (1.0 - std::pow(y, -params.xi));
}

ExtremeEstimate estimate_extreme(std::span<const double> maxima, double p) {
  if (maxima.empty()) throw std::invalid_argument("estimate_extreme: no samples");
  ExtremeEstimate e;
  const auto [lo, hi] = std::minmax_element(maxima.begin(), maxima.end());
  e.sample_max = *hi;
  if (*hi - *lo <= 1e-12 * std::max(1.0, std::abs(*hi))) {
    e.degenerate = true;
    e.value = e.quantile = *hi;
    return e;
  }
  e.fit = gev_fit_mle(maxima);
  e.quantile = gev_upper_quantile(e.fit.params, p);
  // Every sampled value is itself a lower bound on the supremum.
  e.value = std::max(e.quantile, e.sample_max);
  return e;
}

ExtremeEstimate estimate_L(const Classifier& model, const Dataset& data, Norm dual, const SamplerConfig& config) {
  return estimate_extreme(sample_grad_norm_maxima(model, data, dual, config), config.p);
}

ExtremeEstimate estimate_omega(const Classifier& model, const Dataset& data, double eps, Norm norm_kind,
                               const SamplerConfig& config) {
  auto e = estimate_extreme(sample_modulus(model, data, eps, norm_kind, config), config.p);
  e.value = std::max(0.0, e.value);
  return e;
}

std::vector<double> omega_curve(const Classifier& model, const Dataset& data, const std::vector<double>& radii,
                                Norm norm_kind, const SamplerConfig& config) {
  std::vector<double> out;
  out.reserve(radii.size());
  double running = 0.0;
  for (std::size_t k = 0; k < radii.size(); ++k) {
    if (k > 0 && !(radii[k] > radii[k - 1])) throw std::invalid_argument("omega_curve: radii must be increasing");
    if (radii[k] > 0.0) running = std::max(running, estimate_omega(model, data, radii[k], norm_kind, config).value);
    out.push_back(running);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Bounds

double l_bound(double margin, double l0, double L) {
  if (!(L > 0.0)) throw std::invalid_argument("l_bound: L must be positive");
  return std::max(l0 - margin, 0.0) / L;
}

bool omega_bound_certified(double margin, double grad_dual_norm, double l0, double omega, double eps) {
  if (!(grad_dual_norm >= 0.0)) throw std::invalid_argument("omega_bound_certified: negative gradient norm");
  const double numerator = l0 - margin - omega;
  if (!(numerator > 0.0)) return false;
  if (grad_dual_norm == 0.0) return true;
  return numerator / grad_dual_norm >= eps;
}

double quadratic_lambda(double delta, double C) {
  if (C < 0.0) throw std::invalid_argument("quadratic_lambda: C must be non-negative");
  if (C > 0.0 && !(delta < 1.0 / C)) throw std::invalid_argument("quadratic_lambda: requires delta < 1/C");
  return delta / (1.0 - delta * C);
}

double brute_force_min_distance(const Classifier& model, const Tensor& x, int y, std::size_t resolution,
                                double eps_max, Norm norm_kind) {
  const std::size_t d = x.size();
  if (d < 1 || d > 2) throw std::invalid_argument("brute_force_min_distance: input dimension must be 1 or 2");
  if (resolution < 2) throw std::invalid_argument("brute_force_min_distance: resolution must be at least 2");
  if (model.margin(x, y) >= 0.0) return 0.0;
  std::vector<std::vector<double>> axes(d);
  for (std::size_t a = 0; a < d; ++a) {
    const double lo = std::max(0.0, x[a] - eps_max), hi = std::min(1.0, x[a] + eps_max);
    for (std::size_t j = 0; j < resolution; ++j)
      axes[a].push_back(lo + (hi - lo) * static_cast<double>(j) / static_cast<double>(resolution - 1));
  }
  const std::size_t count = d == 1 ? resolution : resolution * resolution;
  Shape shape = model.input_shape();
  shape.insert(shape.begin(), count);
  Tensor grid(shape);
  for (std::size_t i = 0; i < count; ++i) {
    grid[i * d] = axes[0][d == 1 ? i : i / resolution];
    if (d == 2) grid[i * d + 1] = axes[1][i % resolution];
  }
  const Tensor logits = model.logits(grid);
  const std::size_t k = logits.shape()[1];
  double best = kNoAdversarial;
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<double> v(d);
    for (std::size_t a = 0; a < d; ++a) v[a] = grid[i * d + a] - x[a];
    const double dist = norm(v, norm_kind);
    if (dist > eps_max || dist >= best) continue;
    const Tensor row({k}, std::vector<double>(logits.data().begin() + static_cast<std::ptrdiff_t>(i * k),
                                              logits.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * k)));
    if (cw_margin(row, y) >= 0.0) best = dist;
  }
  return best;
}

// ---------------------------------------------------------------------------
// Dataset certification

double CertifyReport::clean_error() const {
  if (records.empty()) return 0.0;
  std::size_t wrong = 0;
  for (const auto& r : records) wrong += r.margin >= r.l0 ? 1 : 0;
  return static_cast<double>(wrong) / static_cast<double>(records.size());
}

std::vector<double> CertifyReport::certified_error() const {
  std::vector<double> out(radii.size(), 0.0);
  if (records.empty()) return out;
  for (std::size_t k = 0; k < radii.size(); ++k) {
    std::size_t uncertified = 0;
    for (const auto& r : records) uncertified += r.certified[k] ? 0 : 1;
    out[k] = static_cast<double>(uncertified) / static_cast<double>(records.size());
  }
  return out;
}

double CertifyReport::mean_l_bound() const {
  if (records.empty()) return 0.0;
  double total = 0.0;
  for (const auto& r : records) total += r.l_bound;
  return total / static_cast<double>(records.size());
}

CertifyReport certify_dataset(const Classifier& model, const Dataset& data, const std::vector<double>& radii,
                              Norm attack_norm, const SamplerConfig& config, double l0) {
  CertifyReport report;
  report.norms = NormPair::for_attack(attack_norm);
  report.l0 = l0;
  report.radii = radii;
  report.lipschitz = estimate_L(model, data, report.norms.dual, config);
  report.omegas = omega_curve(model, data, radii, attack_norm, config);
  report.records.resize(data.size());
  const double L = report.lipschitz.value;
  parallel_for(data.size(), config.threads, [&](std::size_t i) {
    const Tensor x = data.example(i);
    const int y = data.labels[i];
    CertificateRecord& r = report.records[i];
    r.image_id = i;
    r.l0 = l0;
    r.margin = model.margin(x, y);
    r.grad_dual_norm = norm(model.margin_gradient(x, y).data(), report.norms.dual);
    if (L > 0.0)
      r.l_bound = l_bound(r.margin, l0, L);
    else
      r.l_bound = r.margin < l0 ? kNoAdversarial : 0.0;
    r.certified.resize(radii.size());
    for (std::size_t k = 0; k < radii.size(); ++k)
      r.certified[k] = omega_bound_certified(r.margin, r.grad_dual_norm, l0, report.omegas[k], radii[k]);
  });
  return report;
}

std::vector<double> certified_error_table(const Classifier& model, const Dataset& data,
                                          const std::vector<double>& radii, Norm attack_norm,
                                          const SamplerConfig& config) {
  return certify_dataset(model, data, radii, attack_norm, config).certified_error();
}

}  // namespace gradshield
