#pragma once

// Run configuration: a sectioned key = value text file.
//
//   # comment
//   [train]
//   lambda = 1
//   schedule = cosine
//
// Every key has a default, unknown sections or keys are errors, and the
// canonical form lists every key, sections and keys sorted, one
// `key=value` per line.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gradshield/attacks.hpp"
#include "gradshield/certify.hpp"
#include "gradshield/dataset.hpp"
#include "gradshield/gradreg.hpp"
#include "gradshield/model.hpp"

namespace gradshield {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataConfig {
  std::string source = "two_moons";  // two_moons | idx
  std::size_t train_n = 200;
  std::size_t test_n = 200;
  double noise = 0.15;
  std::uint64_t train_seed = 1;
  std::uint64_t test_seed = 2;
  std::string train_images, train_labels, test_images, test_labels;
  std::size_t limit = 0;  // idx only: keep the first `limit` examples of each split
};

struct ModelConfig {
  std::string arch = "mlp";  // mlp | small_cnn
  std::vector<std::size_t> hidden{64, 64};
  std::size_t channels = 4;
  LayerKind activation = LayerKind::Relu;
  std::string name;  // defaults to arch
};

struct AttackConfig {
  Norm norm = Norm::L2;
  AttackSuite suite;
  std::vector<double> eps{0.0, 2.0 / 255, 8.0 / 255};
  DistanceOptions distance;
  std::size_t limit = 0;  // 0: every test image
};

struct CertifyConfig {
  Norm norm = Norm::L2;
  std::vector<double> radii{0.0, 0.05, 0.1, 0.15, 0.2, 0.25};
  SamplerConfig sampler;  // seed and threads are set per run
  double l0 = 0.0;
  std::size_t limit = 0;
};

struct BenchConfig {
  std::size_t steps = 100;
};

struct RunConfig {
  DataConfig data;
  ModelConfig model;
  RegConfig train;  // seed is derived from `seed`
  AttackConfig attack;
  CertifyConfig certify;
  BenchConfig bench;
  std::uint64_t seed = 0;
  std::string out = "runs/default";

  // Strictly increasing eps lists, positive sizes, valid training config.
  // With check_files, idx paths must exist.
  void validate(bool check_files = false) const;
};

RunConfig parse_run_config(std::string_view text);
RunConfig load_run_config(const std::filesystem::path& path);

// Every key, sorted. parse_run_config(to_canonical(c)) reproduces c.
std::string to_canonical(const RunConfig& config);
// The canonical form without [run] out, which does not affect results.
std::string experiment_echo(const RunConfig& config);

// Number formatting shared by configs and CSVs: the shortest text that
// parses back to the same double.
std::string format_double(double v);

ModelSpec build_model_spec(const ModelConfig& config, const Shape& input_shape, std::size_t classes);

struct DataSplits {
  Dataset train;
  Dataset test;
};
DataSplits load_data(const DataConfig& config);

}  // namespace gradshield
