#include <iostream>

#include "CLI11.hpp"
#include "gradshield/commands.hpp"

namespace {

struct Common {
  std::string config;
  std::string checkpoint;
  std::string out;
  std::uint64_t seed = 0;
  std::size_t threads = 0;
  CLI::Option* seed_opt = nullptr;
};

void add_common(CLI::App* cmd, Common& c, bool with_checkpoint) {
  cmd->add_option("--config", c.config, "Run configuration file")->required()->check(CLI::ExistingFile);
  if (with_checkpoint) cmd->add_option("--checkpoint", c.checkpoint, "Checkpoint path (default <out>/model.ckpt)");
  cmd->add_option("--out", c.out, "Output directory (overrides [run] out)");
  c.seed_opt = cmd->add_option("--seed", c.seed, "Global seed (overrides [run] seed)");
  cmd->add_option("--threads", c.threads, "Worker threads (default GRADSHIELD_THREADS, then all cores)");
}

gradshield::CommandOptions options(const Common& c) {
  gradshield::CommandOptions o;
  if (!c.out.empty()) o.out = c.out;
  if (!c.checkpoint.empty()) o.checkpoint = c.checkpoint;
  if (c.seed_opt && c.seed_opt->count() > 0) o.seed = c.seed;
  o.threads = c.threads;
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gradient-regularized training, adversarial attacks and robustness certificates"};
  app.set_version_flag("--version", gradshield::version_string());
  app.require_subcommand(1);

  Common train, attack, certify, bench;
  add_common(app.add_subcommand("train", "Train a model and write a checkpoint"), train, true);
  add_common(app.add_subcommand("attack", "Per-image adversarial distances and error at each eps"), attack, true);
  add_common(app.add_subcommand("certify", "Per-image lower bounds and the certified-error table"), certify, true);
  add_common(app.add_subcommand("bench", "Median step times of the plain, FD and DB regularizers"), bench, false);

  auto* report = app.add_subcommand("report", "Merge *_summary.csv files from run directories");
  std::vector<std::string> runs;
  std::string report_out = "report";
  report->add_option("runs", runs, "Run directories")->required()->check(CLI::ExistingDirectory);
  report->add_option("--out", report_out, "Output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    gradshield::CommandResult result;
    auto run = [&](const Common& c, auto fn) { return fn(gradshield::load_run_config(c.config), options(c)); };
    if (app.got_subcommand("train"))
      result = run(train, gradshield::cmd_train);
    else if (app.got_subcommand("attack"))
      result = run(attack, gradshield::cmd_attack);
    else if (app.got_subcommand("certify"))
      result = run(certify, gradshield::cmd_certify);
    else if (app.got_subcommand("bench"))
      result = run(bench, gradshield::cmd_bench);
    else {
      std::vector<std::filesystem::path> dirs(runs.begin(), runs.end());
      result = gradshield::cmd_report(dirs, report_out);
    }
    std::cout << result.text;
    for (const auto& f : result.files) std::cout << "wrote " << f.string() << "\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "gradshield: " << e.what() << "\n";
    return 1;
  }
}
