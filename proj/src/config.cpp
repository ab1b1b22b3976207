#include "gradshield/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <tuple>

namespace gradshield {

std::string format_double(double v) {
  if (v == 0.0) return "0";
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return "";
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(trim(item));
  return out;
}

double parse_double(const std::string& s) {
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw ConfigError("not a number: '" + s + "'");
  return v;
}

std::uint64_t parse_u64(const std::string& s) {
  std::uint64_t v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw ConfigError("not a non-negative integer: '" + s + "'");
  return v;
}

bool parse_bool(const std::string& s) {
  if (s == "true") return true;
  if (s == "false") return false;
  throw ConfigError("not a boolean: '" + s + "'");
}

template <class T>
std::string join(const std::vector<T>& v, const std::function<std::string(const T&)>& f) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + f(v[i]);
  return out;
}

struct Field {
  std::string section, key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <class T>
Field field(std::string section, std::string key, T RunConfig::*group, double T::*member) {
  return {std::move(section), std::move(key), [=](const RunConfig& c) { return format_double(c.*group.*member); },
          [=](RunConfig& c, const std::string& v) { c.*group.*member = parse_double(v); }};
}

template <class T>
Field field(std::string section, std::string key, T RunConfig::*group, std::size_t T::*member) {
  return {std::move(section), std::move(key), [=](const RunConfig& c) { return std::to_string(c.*group.*member); },
          [=](RunConfig& c, const std::string& v) { c.*group.*member = parse_u64(v); }};
}

template <class T>
Field field(std::string section, std::string key, T RunConfig::*group, std::string T::*member) {
  return {std::move(section), std::move(key), [=](const RunConfig& c) { return c.*group.*member; },
          [=](RunConfig& c, const std::string& v) { c.*group.*member = v; }};
}

template <class T>
Field field(std::string section, std::string key, T RunConfig::*group, Norm T::*member) {
  return {std::move(section), std::move(key), [=](const RunConfig& c) { return to_string(c.*group.*member); },
          [=](RunConfig& c, const std::string& v) { c.*group.*member = parse_norm(v); }};
}

template <class T>
Field field(std::string section, std::string key, T RunConfig::*group, std::vector<double> T::*member) {
  return {std::move(section), std::move(key),
          [=](const RunConfig& c) {
            return join<double>(c.*group.*member, [](const double& d) { return format_double(d); });
          },
          [=](RunConfig& c, const std::string& v) {
            std::vector<double> out;
            for (const auto& item : split_list(v)) out.push_back(parse_double(item));
            c.*group.*member = std::move(out);
          }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    using C = RunConfig;
    f.push_back(field("data", "source", &C::data, &DataConfig::source));
    f.push_back(field("data", "train_n", &C::data, &DataConfig::train_n));
    f.push_back(field("data", "test_n", &C::data, &DataConfig::test_n));
    f.push_back(field("data", "noise", &C::data, &DataConfig::noise));
    f.push_back(field("data", "train_seed", &C::data, &DataConfig::train_seed));
    f.push_back(field("data", "test_seed", &C::data, &DataConfig::test_seed));
    f.push_back(field("data", "train_images", &C::data, &DataConfig::train_images));
    f.push_back(field("data", "train_labels", &C::data, &DataConfig::train_labels));
    f.push_back(field("data", "test_images", &C::data, &DataConfig::test_images));
    f.push_back(field("data", "test_labels", &C::data, &DataConfig::test_labels));
    f.push_back(field("data", "limit", &C::data, &DataConfig::limit));

    f.push_back(field("model", "arch", &C::model, &ModelConfig::arch));
    f.push_back(field("model", "channels", &C::model, &ModelConfig::channels));
    f.push_back(field("model", "name", &C::model, &ModelConfig::name));
    f.push_back({"model", "hidden",
                 [](const C& c) {
                   return join<std::size_t>(c.model.hidden, [](const std::size_t& h) { return std::to_string(h); });
                 },
                 [](C& c, const std::string& v) {
                   c.model.hidden.clear();
                   for (const auto& item : split_list(v)) c.model.hidden.push_back(parse_u64(item));
                 }});
    f.push_back({"model", "activation", [](const C& c) { return to_string(c.model.activation); },
                 [](C& c, const std::string& v) { c.model.activation = parse_layer_kind(v); }});

    f.push_back(field("train", "lambda", &C::train, &RegConfig::lambda));
    f.push_back(field("train", "h", &C::train, &RegConfig::h));
    f.push_back(field("train", "norm", &C::train, &RegConfig::norm));
    f.push_back(field("train", "batch_size", &C::train, &RegConfig::batch_size));
    f.push_back(field("train", "learning_rate", &C::train, &RegConfig::learning_rate));
    f.push_back(field("train", "epochs", &C::train, &RegConfig::epochs));
    f.push_back(field("train", "adversarial_eps", &C::train, &RegConfig::adversarial_eps));
    f.push_back(field("train", "clip_norm", &C::train, &RegConfig::clip_norm));
    f.push_back({"train", "mode", [](const C& c) { return to_string(c.train.mode); },
                 [](C& c, const std::string& v) { c.train.mode = parse_penalty_mode(v); }});
    f.push_back({"train", "schedule", [](const C& c) { return to_string(c.train.schedule); },
                 [](C& c, const std::string& v) { c.train.schedule = parse_schedule(v); }});
    f.push_back({"train", "loss", [](const C& c) { return to_string(c.train.loss); },
                 [](C& c, const std::string& v) { c.train.loss = parse_loss_kind(v); }});

    f.push_back(field("attack", "norm", &C::attack, &AttackConfig::norm));
    f.push_back(field("attack", "eps", &C::attack, &AttackConfig::eps));
    f.push_back(field("attack", "limit", &C::attack, &AttackConfig::limit));
    f.push_back({"attack", "attacks",
                 [](const C& c) {
                   return join<AttackKind>(c.attack.suite.attacks, [](const AttackKind& k) { return to_string(k); });
                 },
                 [](C& c, const std::string& v) {
                   c.attack.suite.attacks.clear();
                   for (const auto& item : split_list(v)) c.attack.suite.attacks.push_back(parse_attack_kind(item));
                 }});
    f.push_back({"attack", "budget", [](const C& c) { return std::to_string(c.attack.suite.budget); },
                 [](C& c, const std::string& v) { c.attack.suite.budget = parse_u64(v); }});
    f.push_back({"attack", "pgd_steps", [](const C& c) { return std::to_string(c.attack.suite.pgd.steps); },
                 [](C& c, const std::string& v) { c.attack.suite.pgd.steps = parse_u64(v); }});
    f.push_back({"attack", "pgd_restarts", [](const C& c) { return std::to_string(c.attack.suite.pgd.restarts); },
                 [](C& c, const std::string& v) { c.attack.suite.pgd.restarts = parse_u64(v); }});
    f.push_back({"attack", "pgd_step_size", [](const C& c) { return format_double(c.attack.suite.pgd.step_size); },
                 [](C& c, const std::string& v) { c.attack.suite.pgd.step_size = parse_double(v); }});
    f.push_back({"attack", "pgd_random_start",
                 [](const C& c) { return std::string(c.attack.suite.pgd.random_start ? "true" : "false"); },
                 [](C& c, const std::string& v) { c.attack.suite.pgd.random_start = parse_bool(v); }});
    f.push_back({"attack", "eps_max", [](const C& c) { return format_double(c.attack.distance.eps_max); },
                 [](C& c, const std::string& v) { c.attack.distance.eps_max = parse_double(v); }});
    f.push_back({"attack", "tol", [](const C& c) { return format_double(c.attack.distance.tol); },
                 [](C& c, const std::string& v) { c.attack.distance.tol = parse_double(v); }});

    f.push_back(field("certify", "norm", &C::certify, &CertifyConfig::norm));
    f.push_back(field("certify", "radii", &C::certify, &CertifyConfig::radii));
    f.push_back(field("certify", "l0", &C::certify, &CertifyConfig::l0));
    f.push_back(field("certify", "limit", &C::certify, &CertifyConfig::limit));
    f.push_back({"certify", "n_blocks", [](const C& c) { return std::to_string(c.certify.sampler.n_blocks); },
                 [](C& c, const std::string& v) { c.certify.sampler.n_blocks = parse_u64(v); }});
    f.push_back({"certify", "block_size", [](const C& c) { return std::to_string(c.certify.sampler.block_size); },
                 [](C& c, const std::string& v) { c.certify.sampler.block_size = parse_u64(v); }});
    f.push_back({"certify", "samples_per_point",
                 [](const C& c) { return std::to_string(c.certify.sampler.samples_per_point); },
                 [](C& c, const std::string& v) { c.certify.sampler.samples_per_point = parse_u64(v); }});
    f.push_back({"certify", "p", [](const C& c) { return format_double(c.certify.sampler.p); },
                 [](C& c, const std::string& v) { c.certify.sampler.p = parse_double(v); }});

    f.push_back(field("bench", "steps", &C::bench, &BenchConfig::steps));

    f.push_back({"run", "seed", [](const C& c) { return std::to_string(c.seed); },
                 [](C& c, const std::string& v) { c.seed = parse_u64(v); }});
    f.push_back({"run", "out", [](const C& c) { return c.out; }, [](C& c, const std::string& v) { c.out = v; }});

    std::sort(f.begin(), f.end(),
              [](const Field& a, const Field& b) { return std::tie(a.section, a.key) < std::tie(b.section, b.key); });
    return f;
  }();
  return table;
}

void check_increasing(const std::vector<double>& v, const std::string& what) {
  if (v.empty()) throw ConfigError(what + " must not be empty");
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i]) || v[i] < 0) throw ConfigError(what + " must be finite and non-negative");
    if (i > 0 && !(v[i] > v[i - 1])) throw ConfigError(what + " must be strictly increasing");
  }
}

std::string canonical(const RunConfig& config, bool with_out) {
  std::string out, section;
  for (const auto& f : fields()) {
    if (!with_out && f.section == "run" && f.key == "out") continue;
    if (f.section != section) {
      if (!section.empty()) out += "\n";
      section = f.section;
      out += "[" + section + "]\n";
    }
    out += f.key + "=" + f.get(config) + "\n";
  }
  return out;
}

}  // namespace

void RunConfig::validate(bool check_files) const {
  if (data.source != "two_moons" && data.source != "idx")
    throw ConfigError("data.source must be two_moons or idx, got '" + data.source + "'");
  if (data.source == "two_moons" && (data.train_n < 2 || data.test_n < 2))
    throw ConfigError("two_moons needs at least 2 examples per split");
  if (data.source == "idx") {
    for (const auto* p : {&data.train_images, &data.train_labels, &data.test_images, &data.test_labels}) {
      if (p->empty()) throw ConfigError("idx source needs train/test image and label paths");
      if (check_files && !std::filesystem::exists(*p)) throw ConfigError("file not found: " + *p);
    }
  }
  if (model.arch != "mlp" && model.arch != "small_cnn")
    throw ConfigError("model.arch must be mlp or small_cnn, got '" + model.arch + "'");
  if (model.activation != LayerKind::Relu && model.activation != LayerKind::Softplus)
    throw ConfigError("model.activation must be relu or softplus");
  try {
    train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("train: ") + e.what());
  }
  if (train.epochs == 0) throw ConfigError("train.epochs must be positive");
  check_increasing(attack.eps, "attack.eps");
  check_increasing(certify.radii, "certify.radii");
  if (attack.norm == Norm::L1) throw ConfigError("attack.norm must be l2 or linf");
  if (certify.norm == Norm::L1) throw ConfigError("certify.norm must be l2 or linf");
  if (attack.suite.attacks.empty()) throw ConfigError("attack.attacks must not be empty");
  if (attack.suite.budget == 0 || attack.suite.pgd.steps == 0 || attack.suite.pgd.restarts == 0)
    throw ConfigError("attack budget, pgd_steps and pgd_restarts must be positive");
  if (certify.sampler.n_blocks == 0 || certify.sampler.block_size == 0 || certify.sampler.samples_per_point == 0)
    throw ConfigError("certify sampler sizes must be positive");
  if (!(certify.sampler.p > 0 && certify.sampler.p < 1)) throw ConfigError("certify.p must be in (0,1)");
  if (bench.steps == 0) throw ConfigError("bench.steps must be positive");
}

RunConfig parse_run_config(std::string_view text) {
  std::map<std::pair<std::string, std::string>, const Field*> index;
  for (const auto& f : fields()) index[{f.section, f.key}] = &f;

  RunConfig config;
  std::string section;
  std::map<std::pair<std::string, std::string>, std::size_t> seen;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  for (std::string raw; std::getline(in, raw);) {
    ++line_no;
    const std::string line = trim(raw);
    const std::string where = "line " + std::to_string(line_no) + ": ";
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "unterminated section header");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    if (section.empty()) throw ConfigError(where + "key outside a section");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    const auto it = index.find({section, key});
    if (it == index.end()) throw ConfigError(where + "unknown key " + section + "." + key);
    if (auto [at, fresh] = seen.emplace(it->first, line_no); !fresh)
      throw ConfigError(where + "duplicate key " + section + "." + key + " (first on line " +
                        std::to_string(at->second) + ")");
    try {
      it->second->set(config, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + section + "." + key + ": " + e.what());
    } catch (const std::invalid_argument& e) {
      throw ConfigError(where + section + "." + key + ": " + e.what());
    }
  }
  config.validate();
  return config;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string to_canonical(const RunConfig& config) { return canonical(config, true); }

std::string experiment_echo(const RunConfig& config) { return canonical(config, false); }

ModelSpec build_model_spec(const ModelConfig& config, const Shape& input_shape, std::size_t classes) {
  const std::string name = config.name.empty() ? config.arch : config.name;
  if (config.arch == "mlp") {
    if (input_shape.size() == 1) return ModelSpec::mlp(input_shape[0], config.hidden, classes, config.activation, name);
    // Image inputs: flatten first.
    std::vector<Layer> layers{Layer::flatten()};
    for (std::size_t h : config.hidden) {
      layers.push_back(Layer::dense(h));
      layers.push_back({config.activation});
    }
    layers.push_back(Layer::dense(classes));
    return ModelSpec(input_shape, classes, std::move(layers), name);
  }
  if (config.arch == "small_cnn") {
    if (input_shape.size() != 3) throw ConfigError("small_cnn needs [C,H,W] image inputs");
    return ModelSpec::small_cnn(input_shape, config.channels, classes, config.activation, name);
  }
  throw ConfigError("unknown model arch '" + config.arch + "'");
}

DataSplits load_data(const DataConfig& config) {
  if (config.source == "two_moons")
    return {gen_two_moons(config.train_n, config.noise, config.train_seed, Split::Train),
            gen_two_moons(config.test_n, config.noise, config.test_seed, Split::Test)};
  if (config.source == "idx")
    return {load_idx_dataset(config.train_images, config.train_labels, Split::Train, config.limit),
            load_idx_dataset(config.test_images, config.test_labels, Split::Test, config.limit)};
  throw ConfigError("unknown data source '" + config.source + "'");
}

}  // namespace gradshield
