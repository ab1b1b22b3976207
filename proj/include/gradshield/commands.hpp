#pragma once

// The train / attack / certify / bench / report pipeline steps. Each writes
// its files into a staging directory under the output directory, checks
// them, then renames them into place, and always writes
// <command>_run_metadata.json.
//
// Deterministic results (checkpoints, *_epochs.csv, *_images.csv,
// *_summary.csv) are separate from wall-clock measurements (*_timing.csv,
// metadata), so identical config and seed give byte-identical result files
// at any thread count.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "gradshield/config.hpp"
#include "gradshield/csv.hpp"

namespace gradshield {

std::string version_string();

struct CommandOptions {
  std::optional<std::filesystem::path> out;         // overrides config.out
  std::optional<std::filesystem::path> checkpoint;  // default <out>/model.ckpt
  std::optional<std::uint64_t> seed;                // overrides config.seed
  std::size_t threads = 0;                          // 0: GRADSHIELD_THREADS, then hardware
};

struct CommandResult {
  std::filesystem::path out;
  std::vector<std::filesystem::path> files;
  std::string text;  // human-readable summary
};

CommandResult cmd_train(const RunConfig& config, const CommandOptions& options = {});
CommandResult cmd_attack(const RunConfig& config, const CommandOptions& options = {});
CommandResult cmd_certify(const RunConfig& config, const CommandOptions& options = {});
CommandResult cmd_bench(const RunConfig& config, const CommandOptions& options = {});

class ReportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Joins every *_summary.csv in the run directories into one row per
// checkpoint digest. Columns other than the digest and model name are
// prefixed with the summary kind ("attack.mean_distance"). Missing cells
// stay blank. The `best` column lists the columns where the row holds the
// best value among at least two rows: lowest for error, gradient-norm and
// Lipschitz columns, highest for distance and bound columns. Throws
// ReportError on schema version mismatch.
CsvTable merge_summaries(const std::vector<std::filesystem::path>& run_dirs);
std::string format_report(const CsvTable& merged);
CommandResult cmd_report(const std::vector<std::filesystem::path>& run_dirs, const std::filesystem::path& out);

}  // namespace gradshield
