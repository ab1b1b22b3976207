#include "gradshield/commands.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "gradshield/checkpoint.hpp"
#include "gradshield/classifier.hpp"
#include "gradshield/parallel.hpp"
#include "gradshield/rng.hpp"
#include "json.hpp"

#ifndef GRADSHIELD_VERSION
#define GRADSHIELD_VERSION "dev"
#endif

namespace gradshield {

namespace fs = std::filesystem;

std::string version_string() { return std::string("gradshield ") + GRADSHIELD_VERSION; }

namespace {

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_bytes(const fs::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

// Files are written under <out>/.staging-<command>, validated, then renamed
// into <out>. A failed command leaves <out> untouched.
class Stage {
 public:
  Stage(fs::path out, const std::string& command) : out_(std::move(out)), dir_(out_ / (".staging-" + command)) {
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  Stage(const Stage&) = delete;
  Stage& operator=(const Stage&) = delete;
  ~Stage() {
    std::error_code ec;
    fs::remove_all(dir_, ec);
  }

  void csv(const std::string& name, const CsvTable& table) {
    const std::string text = to_csv(table);
    (void)parse_csv(text);
    put(name, text);
  }
  void put(const std::string& name, std::string_view bytes) {
    write_bytes(dir_ / name, bytes);
    names_.push_back(name);
  }

  std::vector<fs::path> commit() {
    std::vector<fs::path> out;
    for (const auto& n : names_) {
      fs::rename(dir_ / n, out_ / n);
      out.push_back(out_ / n);
    }
    return out;
  }

 private:
  fs::path out_, dir_;
  std::vector<std::string> names_;
};

struct Run {
  std::string command;
  RunConfig config;
  fs::path out;
  std::size_t threads = 1;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  std::string started = utc_now();
  nlohmann::json extra = nlohmann::json::object();

  Run(std::string cmd, RunConfig c, const CommandOptions& o) : command(std::move(cmd)), config(std::move(c)) {
    if (o.seed) config.seed = *o.seed;
    if (o.out) config.out = o.out->string();
    config.validate(true);
    out = config.out;
    threads = resolve_threads(o.threads);
    fs::create_directories(out);
  }

  [[nodiscard]] fs::path checkpoint(const CommandOptions& o) const { return o.checkpoint ? *o.checkpoint : out / "model.ckpt"; }

  [[nodiscard]] std::string metadata(const std::vector<std::string>& outputs) const {
    nlohmann::json j = extra;
    j["command"] = command;
    j["version"] = version_string();
    j["config"] = to_canonical(config);
    j["seed"] = config.seed;
    j["threads"] = threads;
    j["started_utc"] = started;
    j["elapsed_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    j["outputs"] = outputs;
    return j.dump(2) + "\n";
  }

  CommandResult finish(Stage& stage, std::vector<std::string> names, std::string text) const {
    names.push_back(command + "_run_metadata.json");
    stage.put(names.back(), metadata(names));
    return {out, stage.commit(), std::move(text)};
  }
};

Dataset head(const Dataset& d, std::size_t limit) {
  if (limit == 0 || limit >= d.size()) return d;
  std::vector<std::size_t> idx(limit);
  std::iota(idx.begin(), idx.end(), 0);
  return d.subset(idx);
}

double error_rate(const Classifier& model, const Dataset& d) {
  const Tensor logits = model.logits(d.inputs);
  const std::size_t k = model.classes();
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < d.size(); ++i)
    wrong += cw_margin(Tensor({k}, std::vector<double>(logits.data().begin() + static_cast<std::ptrdiff_t>(i * k),
                                                       logits.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * k))),
                       d.labels[i]) >= 0.0;
  return static_cast<double>(wrong) / static_cast<double>(d.size());
}

struct LoadedModel {
  Checkpoint checkpoint;
  std::string digest;
  fs::path path;
};

LoadedModel load_model(const fs::path& path) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = read_file(path);
  } catch (const std::runtime_error& e) {
    throw CheckpointError(CheckpointErrorKind::Io, e.what());
  }
  return {decode_checkpoint(bytes), hex64(fnv1a64(bytes.data(), bytes.size())), path};
}

void check_compatible(const ModelSpec& spec, const Dataset& d) {
  if (spec.input_shape() != d.input_shape())
    throw std::runtime_error("checkpoint input shape " + shape_string(spec.input_shape()) +
                             " does not match the data " + shape_string(d.input_shape()));
  if (d.classes() > spec.classes()) throw std::runtime_error("data has more classes than the checkpoint model");
}

std::string fmt(double v) { return format_double(v); }

}  // namespace

CommandResult cmd_train(const RunConfig& cfg, const CommandOptions& options) {
  Run run("train", cfg, options);
  const auto data = load_data(run.config.data);
  const std::size_t classes = std::max(data.train.classes(), data.test.classes());
  const ModelSpec spec = build_model_spec(run.config.model, data.train.input_shape(), classes);
  RegConfig rc = run.config.train;
  rc.seed = derive_seed(run.config.seed, "train");
  const TrainReport report = train(spec, data.train, rc);

  const auto bytes = encode_checkpoint(spec, report.parameters, experiment_echo(run.config));
  const Checkpoint saved = decode_checkpoint(bytes);
  const std::string digest = hex64(fnv1a64(bytes.data(), bytes.size()));
  NetworkClassifier model(saved.spec, saved.parameters);

  CsvTable epochs = versioned_table({"epoch", "loss", "penalty"});
  CsvTable timing = versioned_table({"epoch", "seconds", "penalty_seconds"});
  for (const auto& e : report.epochs) {
    add_versioned(epochs, {std::to_string(e.epoch), fmt(e.loss), fmt(e.penalty)});
    add_versioned(timing, {std::to_string(e.epoch), fmt(e.seconds), fmt(e.penalty_seconds)});
  }
  const double train_err = error_rate(model, data.train);
  const double test_err = error_rate(model, data.test);
  const double grad_norm = mean_input_gradient_norm(saved.spec, saved.parameters, data.test, rc.loss);
  CsvTable summary = versioned_table({"checkpoint_digest", "model", "lambda", "mode", "norm", "epochs", "final_loss",
                                      "final_penalty", "train_error", "test_error", "mean_grad_norm"});
  const auto& last = report.epochs.back();
  add_versioned(summary, {digest, spec.name(), fmt(rc.lambda), to_string(rc.mode), to_string(rc.norm),
                          std::to_string(rc.epochs), fmt(last.loss), fmt(last.penalty), fmt(train_err),
                          fmt(test_err), fmt(grad_norm)});

  Stage stage(run.out, run.command);
  std::vector<std::string> names;
  const fs::path ckpt = run.checkpoint(options);
  if (!options.checkpoint) {
    stage.put("model.ckpt", std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
    names.push_back("model.ckpt");
  }
  stage.csv("train_epochs.csv", epochs);
  stage.csv("train_timing.csv", timing);
  stage.csv("train_summary.csv", summary);
  names.insert(names.end(), {"train_epochs.csv", "train_timing.csv", "train_summary.csv"});
  if (options.checkpoint) save_checkpoint(saved.spec, saved.parameters, saved.config, ckpt);

  run.extra["checkpoint"] = {{"path", ckpt.string()}, {"digest", digest}, {"parameters", spec.parameter_count()}};
  run.extra["data"] = {{"train", data.train.provenance}, {"test", data.test.provenance}};
  std::ostringstream text;
  text << "trained " << spec.name() << " (" << spec.parameter_count() << " parameters, lambda=" << fmt(rc.lambda)
       << ", mode=" << to_string(rc.mode) << ") for " << rc.epochs << " epochs\n"
       << "final loss " << fmt(last.loss) << ", penalty " << fmt(last.penalty) << "\n"
       << "train error " << fmt(train_err) << ", test error " << fmt(test_err) << ", mean |grad_x l|_2 "
       << fmt(grad_norm) << "\n"
       << "checkpoint " << ckpt.string() << " (" << digest << ")\n";
  return run.finish(stage, names, text.str());
}

CommandResult cmd_attack(const RunConfig& cfg, const CommandOptions& options) {
  Run run("attack", cfg, options);
  const auto loaded = load_model(run.checkpoint(options));
  const Dataset test = head(load_data(run.config.data).test, run.config.attack.limit);
  check_compatible(loaded.checkpoint.spec, test);
  NetworkClassifier model(loaded.checkpoint.spec, loaded.checkpoint.parameters);
  const auto& ac = run.config.attack;

  const auto results = min_adv_distances(model, test, ac.suite, ac.norm, ac.distance, run.config.seed, run.threads);
  const auto errors = error_at_radii(model, test, ac.eps, ac.suite, ac.norm, run.config.seed, run.threads);

  CsvTable images =
      versioned_table({"image_id", "label", "found", "distance", "attack", "witness_margin", "witness_queries"});
  std::size_t clean_wrong = 0;
  for (const auto& r : results) {
    clean_wrong += r.attack == "clean";
    add_versioned(images, {std::to_string(r.image_id), std::to_string(test.labels[r.image_id]),
                           r.found ? "true" : "false", fmt(r.distance), r.attack, fmt(r.witness.margin),
                           std::to_string(r.witness.queries)});
  }
  const double clean_error = static_cast<double>(clean_wrong) / static_cast<double>(test.size());
  const double mean = mean_distance(results);
  std::vector<std::string> cols{"checkpoint_digest", "model", "norm", "images", "clean_error", "mean_distance"};
  std::vector<std::string> row{loaded.digest, loaded.checkpoint.spec.name(), to_string(ac.norm),
                               std::to_string(test.size()), fmt(clean_error), fmt(mean)};
  for (std::size_t k = 0; k < ac.eps.size(); ++k) {
    cols.push_back("error_at_" + fmt(ac.eps[k]));
    row.push_back(fmt(errors[k]));
  }
  CsvTable summary = versioned_table(cols);
  add_versioned(summary, row);

  Stage stage(run.out, run.command);
  stage.csv("attack_images.csv", images);
  stage.csv("attack_summary.csv", summary);
  run.extra["checkpoint"] = {{"path", loaded.path.string()}, {"digest", loaded.digest}};
  run.extra["data"] = {{"test", test.provenance}, {"images", test.size()}};

  std::ostringstream text;
  text << "attacked " << test.size() << " images (" << to_string(ac.norm) << ")\n"
       << "clean error " << fmt(clean_error) << ", mean adversarial distance " << fmt(mean) << "\n";
  for (std::size_t k = 0; k < ac.eps.size(); ++k)
    text << "error at eps=" << fmt(ac.eps[k]) << ": " << fmt(errors[k]) << "\n";
  return run.finish(stage, {"attack_images.csv", "attack_summary.csv"}, text.str());
}

CommandResult cmd_certify(const RunConfig& cfg, const CommandOptions& options) {
  Run run("certify", cfg, options);
  const auto loaded = load_model(run.checkpoint(options));
  const Dataset test = head(load_data(run.config.data).test, run.config.certify.limit);
  check_compatible(loaded.checkpoint.spec, test);
  NetworkClassifier model(loaded.checkpoint.spec, loaded.checkpoint.parameters);
  const auto& cc = run.config.certify;
  SamplerConfig sampler = cc.sampler;
  sampler.seed = derive_seed(run.config.seed, "certify");
  sampler.threads = run.threads;
  const CertifyReport report = certify_dataset(model, test, cc.radii, cc.norm, sampler, cc.l0);

  std::vector<std::string> image_cols{"image_id", "label", "margin", "grad_dual_norm", "l_bound"};
  for (double r : cc.radii) image_cols.push_back("certified_at_" + fmt(r));
  CsvTable images = versioned_table(image_cols);
  for (const auto& rec : report.records) {
    std::vector<std::string> row{std::to_string(rec.image_id), std::to_string(test.labels[rec.image_id]),
                                 fmt(rec.margin), fmt(rec.grad_dual_norm), fmt(rec.l_bound)};
    for (bool c : rec.certified) row.push_back(c ? "true" : "false");
    add_versioned(images, row);
  }
  const auto table = report.certified_error();
  std::vector<std::string> cols{"checkpoint_digest", "model", "norm", "images", "lipschitz", "clean_error",
                                "mean_l_bound"};
  std::vector<std::string> row{loaded.digest,
                               loaded.checkpoint.spec.name(),
                               to_string(cc.norm),
                               std::to_string(test.size()),
                               fmt(report.lipschitz.value),
                               fmt(report.clean_error()),
                               fmt(report.mean_l_bound())};
  for (std::size_t k = 0; k < cc.radii.size(); ++k) {
    cols.push_back("certified_error_at_" + fmt(cc.radii[k]));
    row.push_back(fmt(table[k]));
  }
  for (std::size_t k = 0; k < cc.radii.size(); ++k) {
    cols.push_back("omega_at_" + fmt(cc.radii[k]));
    row.push_back(fmt(report.omegas[k]));
  }
  CsvTable summary = versioned_table(cols);
  add_versioned(summary, row);

  Stage stage(run.out, run.command);
  stage.csv("certify_images.csv", images);
  stage.csv("certify_summary.csv", summary);
  run.extra["checkpoint"] = {{"path", loaded.path.string()}, {"digest", loaded.digest}};
  run.extra["data"] = {{"test", test.provenance}, {"images", test.size()}};
  run.extra["lipschitz"] = {{"value", report.lipschitz.value},
                            {"sample_max", report.lipschitz.sample_max},
                            {"degenerate", report.lipschitz.degenerate},
                            {"gumbel_fallback", report.lipschitz.fit.gumbel_fallback}};

  std::ostringstream text;
  text << "certified " << test.size() << " images (" << to_string(cc.norm) << ", dual "
       << to_string(report.norms.dual) << ")\n"
       << "L estimate " << fmt(report.lipschitz.value) << ", mean L-bound radius " << fmt(report.mean_l_bound())
       << "\n";
  for (std::size_t k = 0; k < cc.radii.size(); ++k)
    text << "radius " << fmt(cc.radii[k]) << ": certified error " << fmt(table[k]) << ", omega "
         << fmt(report.omegas[k]) << "\n";
  return run.finish(stage, {"certify_images.csv", "certify_summary.csv"}, text.str());
}

CommandResult cmd_bench(const RunConfig& cfg, const CommandOptions& options) {
  Run run("bench", cfg, options);
  const auto data = load_data(run.config.data);
  const std::size_t classes = std::max(data.train.classes(), data.test.classes());
  const ModelSpec spec = build_model_spec(run.config.model, data.train.input_shape(), classes);
  RegConfig rc = run.config.train;
  rc.seed = derive_seed(run.config.seed, "train");
  const BenchReport b = bench_regularizers(spec, data.train, rc, run.config.bench.steps);

  CsvTable timing = versioned_table({"model", "parameter_count", "batch_size", "steps", "plain_seconds",
                                     "control_seconds", "fd_seconds", "db_seconds", "fd_over_db",
                                     "plain_over_control", "fd_model_forwards", "fd_input_gradient_passes"});
  add_versioned(timing, {spec.name(), std::to_string(b.parameter_count), std::to_string(rc.batch_size),
                         std::to_string(b.steps), fmt(b.plain_seconds), fmt(b.control_seconds), fmt(b.fd_seconds),
                         fmt(b.db_seconds), fmt(b.fd_over_db()), fmt(b.plain_over_control()),
                         std::to_string(b.fd_model_forwards), std::to_string(b.fd_input_gradient_passes)});
  Stage stage(run.out, run.command);
  stage.csv("bench_timing.csv", timing);
  run.extra["model"] = {{"name", spec.name()}, {"parameters", spec.parameter_count()}};

  std::ostringstream text;
  text << "bench " << spec.name() << " (" << spec.parameter_count() << " parameters), median of " << b.steps
       << " steps\n"
       << "plain " << fmt(b.plain_seconds) << " s, control " << fmt(b.control_seconds) << " s, fd "
       << fmt(b.fd_seconds) << " s, db " << fmt(b.db_seconds) << " s\n"
       << "fd/db " << fmt(b.fd_over_db()) << ", plain/control " << fmt(b.plain_over_control()) << "\n";
  return run.finish(stage, {"bench_timing.csv"}, text.str());
}

// ---------------------------------------------------------------------------
// Report

namespace {

enum class Better { None, Lower, Higher };

Better direction(const std::string& column) {
  if (column.find("error") != std::string::npos || column.find("grad_norm") != std::string::npos ||
      column.find("lipschitz") != std::string::npos)
    return Better::Lower;
  if (column.find("distance") != std::string::npos || column.find("l_bound") != std::string::npos)
    return Better::Higher;
  return Better::None;
}

std::optional<double> number(const std::string& s) {
  if (s.empty()) return std::nullopt;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size()) return std::nullopt;
  return v;
}

}  // namespace

CsvTable merge_summaries(const std::vector<fs::path>& run_dirs) {
  if (run_dirs.empty()) throw ReportError("report needs at least one run directory");
  std::vector<std::string> columns{"checkpoint_digest", "model"};
  std::vector<std::string> digests;
  std::map<std::string, std::map<std::string, std::string>> cells;
  std::optional<std::string> schema;

  for (const auto& dir : run_dirs) {
    if (!fs::is_directory(dir)) throw ReportError("not a directory: " + dir.string());
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
      const std::string name = entry.path().filename().string();
      if (entry.is_regular_file() && name.size() > 12 && name.ends_with("_summary.csv")) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw ReportError("no *_summary.csv in " + dir.string());
    for (const auto& file : files) {
      const std::string kind = file.filename().string().substr(0, file.filename().string().size() - 12);
      std::ifstream in(file, std::ios::binary);
      std::stringstream ss;
      ss << in.rdbuf();
      const CsvTable t = parse_csv(ss.str());
      const auto sv = t.column(kSchemaColumn);
      const auto dg = t.column("checkpoint_digest");
      if (sv == CsvTable::npos) throw ReportError(file.string() + " has no " + kSchemaColumn + " column");
      if (dg == CsvTable::npos) throw ReportError(file.string() + " has no checkpoint_digest column");
      for (const auto& row : t.rows) {
        if (!schema) schema = row[sv];
        if (row[sv] != *schema)
          throw ReportError("schema version mismatch: " + file.string() + " has " + row[sv] + ", expected " +
                            *schema);
        const std::string& digest = row[dg];
        if (!cells.contains(digest)) digests.push_back(digest);
        auto& out = cells[digest];
        for (std::size_t c = 0; c < t.header.size(); ++c) {
          if (c == sv || c == dg) continue;
          const std::string col = t.header[c] == "model" ? "model" : kind + "." + t.header[c];
          if (std::find(columns.begin(), columns.end(), col) == columns.end()) columns.push_back(col);
          out[col] = row[c];
        }
      }
    }
  }

  CsvTable merged = versioned_table(columns);
  merged.header.push_back("best");
  for (const auto& d : digests) {
    std::vector<std::string> row{d};
    for (std::size_t c = 1; c < columns.size(); ++c) {
      const auto it = cells[d].find(columns[c]);
      row.push_back(it == cells[d].end() ? "" : it->second);
    }
    row.push_back("");
    add_versioned(merged, row);
  }
  if (schema)
    for (auto& row : merged.rows) row[0] = *schema;

  for (std::size_t c = 1; c + 1 < merged.header.size(); ++c) {
    const Better better = direction(merged.header[c]);
    if (better == Better::None) continue;
    std::optional<double> best;
    std::size_t count = 0;
    for (const auto& row : merged.rows)
      if (const auto v = number(row[c])) {
        ++count;
        if (!best || (better == Better::Lower ? *v < *best : *v > *best)) best = v;
      }
    if (count < 2) continue;
    for (auto& row : merged.rows)
      if (const auto v = number(row[c]); v && *v == *best) {
        auto& flag = row.back();
        flag += (flag.empty() ? "" : ";") + merged.header[c];
      }
  }
  return merged;
}

std::string format_report(const CsvTable& merged) {
  // One block per checkpoint; best values are starred.
  std::ostringstream out;
  const std::size_t best_col = merged.column("best");
  std::size_t width = 0;
  for (const auto& h : merged.header) width = std::max(width, h.size());
  for (const auto& row : merged.rows) {
    std::vector<std::string> best;
    if (best_col != CsvTable::npos) {
      std::stringstream ss(row[best_col]);
      for (std::string item; std::getline(ss, item, ';');) best.push_back(item);
    }
    for (std::size_t c = 1; c < merged.header.size(); ++c) {
      if (c == best_col) continue;
      const bool star = std::find(best.begin(), best.end(), merged.header[c]) != best.end();
      out << merged.header[c] << std::string(width + 2 - merged.header[c].size(), ' ') << row[c]
          << (star ? " *" : "") << "\n";
    }
    out << "\n";
  }
  return out.str();
}

CommandResult cmd_report(const std::vector<fs::path>& run_dirs, const fs::path& out) {
  const auto start = std::chrono::steady_clock::now();
  const std::string started = utc_now();
  const CsvTable merged = merge_summaries(run_dirs);
  const std::string text = format_report(merged);
  fs::create_directories(out);
  Stage stage(out, "report");
  stage.csv("report.csv", merged);
  stage.put("report.txt", text);
  nlohmann::json meta = {{"command", "report"},
                         {"version", version_string()},
                         {"started_utc", started},
                         {"elapsed_seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()},
                         {"outputs", {"report.csv", "report.txt", "report_run_metadata.json"}}};
  std::vector<std::string> dirs;
  for (const auto& d : run_dirs) dirs.push_back(d.string());
  meta["runs"] = dirs;
  stage.put("report_run_metadata.json", meta.dump(2) + "\n");
  return {out, stage.commit(), text};
}

}  // namespace gradshield
