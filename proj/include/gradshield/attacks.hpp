#pragma once

// Adversarial attacks on the CW margin l(x) = max_{i != y} f_i(x) - f_y(x).
// An attack succeeds when l(x + v) >= 0. Every perturbed point is clipped
// to the [0,1] box.

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "gradshield/classifier.hpp"
#include "gradshield/dataset.hpp"

namespace gradshield {

struct AttackResult {
  std::size_t image_id = 0;
  std::string attack;
  Tensor perturbation;
  Norm norm = Norm::L2;
  double perturbation_norm = 0.0;
  double margin = 0.0;  // CW margin at x + v
  bool success = false;
  std::size_t queries = 0;  // model evaluations plus gradient evaluations
};

// Euclidean projection onto the eps-ball (l2: rescale, l-inf: clamp).
Tensor project(const Tensor& v, double eps, Norm norm);

// One signed-gradient step of size eps (l-inf), or a step of length eps
// along the normalized gradient (l2).
AttackResult fgsm(const Classifier& model, const Tensor& x, int y, double eps, Norm norm = Norm::Linf);

struct PgdOptions {
  std::size_t steps = 7;
  double step_size = 0.0;  // 0 means 2.5 * eps / steps
  bool random_start = true;
  std::size_t restarts = 1;
  std::uint64_t seed = 0;
};

// Projected gradient ascent on the margin; returns the best iterate seen.
AttackResult pgd(const Classifier& model, const Tensor& x, int y, double eps, Norm norm,
                 const PgdOptions& options = {});

// Random search over directions with annealed step sizes. Uses logits only;
// stops early on success and never exceeds `budget` model evaluations.
AttackResult grad_free_attack(const Classifier& model, const Tensor& x, int y, double eps, Norm norm,
                              std::size_t budget, std::uint64_t seed);

enum class AttackKind { Fgsm, Pgd, GradFree };
std::string to_string(AttackKind kind);
AttackKind parse_attack_kind(const std::string& name);

struct AttackSuite {
  std::vector<AttackKind> attacks{AttackKind::Fgsm, AttackKind::Pgd, AttackKind::GradFree};
  PgdOptions pgd;
  std::size_t budget = 500;
};

// Runs every attack of the suite at radius eps; the result is the first
// success, or else the attempt with the largest margin. Seeds derive from
// `seed` per attack.
AttackResult run_suite(const Classifier& model, const Tensor& x, int y, double eps, Norm norm,
                       const AttackSuite& suite, std::uint64_t seed);

struct DistanceOptions {
  double eps_max = 0.0;  // 0 means 0.5 for l2 and 64/255 for l-inf
  double tol = 0.0;      // 0 means eps_max / 2^12
  [[nodiscard]] double resolved_eps_max(Norm norm) const;
  [[nodiscard]] double resolved_tol(Norm norm) const;
};

struct DistanceResult {
  std::size_t image_id = 0;
  bool found = false;  // false: no adversarial point within eps_max
  // Smallest radius with a successful attack, within tol. 0 for
  // misclassified inputs; eps_max when nothing was found.
  double distance = 0.0;
  std::string attack;  // which attack achieved it ("clean" if misclassified)
  AttackResult witness;
};

DistanceResult min_adv_distance(const Classifier& model, const Tensor& x, int y, const AttackSuite& suite, Norm norm,
                                const DistanceOptions& options, std::uint64_t seed);

// Per-image distances over a dataset. Image i uses the seed
// derive_seed(seed, "attack:<i>"), so results do not depend on `threads`.
std::vector<DistanceResult> min_adv_distances(const Classifier& model, const Dataset& data, const AttackSuite& suite,
                                              Norm norm, const DistanceOptions& options, std::uint64_t seed,
                                              std::size_t threads = 1);

// Fraction of images with an adversarial point within each radius (radii
// must be increasing). A success at one radius counts for all larger ones.
std::vector<double> error_at_radii(const Classifier& model, const Dataset& data, const std::vector<double>& radii,
                                   const AttackSuite& suite, Norm norm, std::uint64_t seed, std::size_t threads = 1);

double mean_distance(const std::vector<DistanceResult>& results);

}  // namespace gradshield
