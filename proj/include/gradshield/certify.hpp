#pragma once

// Per-image lower bounds on the minimal adversarial distance, computed from
// the CW margin l(x) (misclassified iff l(x) >= l0):
//
//   L-bound:      ||v|| >= max(l0 - l(x), 0) / L
//   omega-bound:  ||v|| >= eps whenever (l0 - l(x) - omega(eps)) / ||grad l(x)||_* >= eps
//
// L (a Lipschitz constant of l) and omega(eps) (the worst first-order
// expansion error within eps) are estimated from sampled block maxima by a
// GEV fit and an upper quantile.

#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "gradshield/classifier.hpp"
#include "gradshield/dataset.hpp"

namespace gradshield {

struct NormPair {
  Norm attack = Norm::L2;
  Norm dual = Norm::L2;
  // (l2, l2) or (l-inf, l1).
  static NormPair for_attack(Norm attack);
};

struct SamplerConfig {
  std::size_t n_blocks = 100;
  std::size_t block_size = 32;  // >= dataset size means every block is the whole dataset
  std::size_t samples_per_point = 16;
  double p = 0.001;  // upper-tail probability of the GEV quantile
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

// Block maxima of l(x+v) - l(x) - <v, grad l(x)> with v uniform in the
// eps-ball of `norm` (not clipped to the box), floored at 0. Directions and
// radius fractions depend only on the seed, so the same seed with a larger
// eps samples the scaled-up perturbations.
std::vector<double> sample_modulus(const Classifier& model, const Dataset& data, double eps, Norm norm,
                                   const SamplerConfig& config);

// Block maxima of ||grad l(x)||_dual.
std::vector<double> sample_grad_norm_maxima(const Classifier& model, const Dataset& data, Norm dual,
                                            const SamplerConfig& config);

struct GevParams {
  double mu = 0.0;
  double sigma = 1.0;
  double xi = 0.0;
};

class GevError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

double gev_log_likelihood(const GevParams& params, std::span<const double> samples);

struct GevFit {
  GevParams params;
  double log_likelihood = 0.0;
  double gumbel_log_likelihood = 0.0;
  bool gumbel_fallback = false;
};

// Maximum likelihood with xi restricted to [-0.5, 0.5], started from
// probability-weighted moments and from the Gumbel fit. Falls back to the
// Gumbel fit when the full fit fails. Needs at least 30 samples that are not
// all equal.
GevFit gev_fit_mle(std::span<const double> samples);

// The (1 - p)-quantile.
double gev_upper_quantile(const GevParams& params, double p);

struct ExtremeEstimate {
  double value = 0.0;     // max(quantile, sample_max)
  double quantile = 0.0;  // GEV (1 - p)-quantile
  double sample_max = 0.0;
  bool degenerate = false;  // all maxima equal; value is that constant
  GevFit fit;
};

ExtremeEstimate estimate_extreme(std::span<const double> maxima, double p);

// GEV quantile of sampled gradient-norm maxima.
ExtremeEstimate estimate_L(const Classifier& model, const Dataset& data, Norm dual, const SamplerConfig& config);
// GEV quantile of sampled modulus maxima, floored at 0.
ExtremeEstimate estimate_omega(const Classifier& model, const Dataset& data, double eps, Norm norm,
                               const SamplerConfig& config);
// estimate_omega over increasing radii with a running maximum, so the curve
// is non-decreasing. Radius 0 gives 0.
std::vector<double> omega_curve(const Classifier& model, const Dataset& data, const std::vector<double>& radii,
                                Norm norm, const SamplerConfig& config);

double l_bound(double margin, double l0, double L);
// Zero gradient norm: certified iff the numerator is positive.
bool omega_bound_certified(double margin, double grad_dual_norm, double l0, double omega, double eps);
// delta / (1 - delta C); requires delta < 1/C when C > 0.
double quadratic_lambda(double delta, double C);

inline constexpr double kNoAdversarial = std::numeric_limits<double>::infinity();

// Nearest grid point with margin >= 0, searching the box-clipped eps_max ball
// around x on a grid of `resolution` points per axis. Inputs of dimension 1
// or 2 only. Returns kNoAdversarial when no grid point is adversarial.
double brute_force_min_distance(const Classifier& model, const Tensor& x, int y, std::size_t resolution,
                                double eps_max, Norm norm = Norm::L2);

struct CertificateRecord {
  std::size_t image_id = 0;
  double margin = 0.0;
  double grad_dual_norm = 0.0;
  double l_bound = 0.0;
  std::vector<bool> certified;  // one verdict per radius
  double l0 = 0.0;
};

struct CertifyReport {
  NormPair norms;
  double l0 = 0.0;
  ExtremeEstimate lipschitz;
  std::vector<double> radii;
  std::vector<double> omegas;  // omega(radius), non-decreasing
  std::vector<CertificateRecord> records;

  [[nodiscard]] double clean_error() const;
  // Fraction of images not certified at each radius. Misclassified images
  // are never certified.
  [[nodiscard]] std::vector<double> certified_error() const;
  [[nodiscard]] double mean_l_bound() const;
};

// Estimates L and omega once, then certifies every image.
CertifyReport certify_dataset(const Classifier& model, const Dataset& data, const std::vector<double>& radii,
                              Norm attack_norm, const SamplerConfig& config, double l0 = 0.0);

std::vector<double> certified_error_table(const Classifier& model, const Dataset& data,
                                          const std::vector<double>& radii, Norm attack_norm,
                                          const SamplerConfig& config);

}  // namespace gradshield
