#include <pybind11/numpy.h>
#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "gradshield/attacks.hpp"
#include "gradshield/certify.hpp"
#include "gradshield/checkpoint.hpp"
#include "gradshield/classifier.hpp"
#include "gradshield/commands.hpp"
#include "gradshield/config.hpp"
#include "gradshield/dataset.hpp"
#include "gradshield/gradreg.hpp"
#include "gradshield/model.hpp"

namespace py = pybind11;
using namespace gradshield;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

py::array_t<double> to_array(const Tensor& t) {
  py::array_t<double> out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

py::array_t<double> to_array(std::span<const double> v) {
  py::array_t<double> out(static_cast<py::ssize_t>(v.size()));
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

Dataset make_dataset(const Array& inputs, std::vector<int> labels) {
  Dataset d{to_tensor(inputs), std::move(labels), Split::Test, "python"};
  d.validate();
  return d;
}

// Penalty value and its parameter gradient, flattened in slot order.
py::tuple penalty_with_gradient(const ModelSpec& spec, const Parameters& params, const Array& x,
                                const std::vector<int>& labels, PenaltyMode mode, double h, Norm norm,
                                LossKind kind) {
  NetworkGraph graph(spec);
  Bindings b;
  graph.bind(b, params);
  Tensor xt = to_tensor(x);
  Expr r;
  if (mode == PenaltyMode::FiniteDifference) {
    Tensor d = reg_directions(input_gradient(spec, params, xt, labels, kind), norm);
    r = fd_penalty(graph, xt, labels, d, h, kind);
  } else if (mode == PenaltyMode::DoubleBackprop) {
    r = db_penalty(graph, b, xt, labels, norm, kind);
  } else {
    throw std::invalid_argument("penalty mode none has no value");
  }
  std::vector<Expr> grads = gradient(r, graph.parameters());
  Evaluator ev(b);
  double value = ev(r).item();
  std::vector<double> flat;
  flat.reserve(params.size());
  for (const auto& g : grads) {
    const Tensor& t = ev(g);
    flat.insert(flat.end(), t.data().begin(), t.data().end());
  }
  return py::make_tuple(value, to_array(flat));
}

py::dict attack_dict(const AttackResult& r) {
  py::dict d;
  d["attack"] = r.attack;
  d["perturbation"] = to_array(r.perturbation);
  d["norm"] = r.norm;
  d["perturbation_norm"] = r.perturbation_norm;
  d["margin"] = r.margin;
  d["success"] = r.success;
  d["queries"] = r.queries;
  return d;
}

}  // namespace

PYBIND11_MODULE(_gradshield, m) {
  m.doc() = "Gradient-norm regularized training, attacks and robustness certificates";
  m.attr("__version__") = GRADSHIELD_VERSION;

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<NonFiniteError>(m, "NonFiniteError", PyExc_ArithmeticError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<TrainingError>(m, "TrainingError", PyExc_RuntimeError);
  py::register_exception<GevError>(m, "GevError", PyExc_RuntimeError);
  py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_IOError);
  py::register_exception<IdxError>(m, "IdxError", PyExc_ValueError);
  py::register_exception<ReportError>(m, "ReportError", PyExc_ValueError);

  py::enum_<Norm>(m, "Norm").value("L1", Norm::L1).value("L2", Norm::L2).value("Linf", Norm::Linf);
  py::enum_<LayerKind>(m, "Activation").value("Relu", LayerKind::Relu).value("Softplus", LayerKind::Softplus);
  py::enum_<LossKind>(m, "Loss").value("CrossEntropy", LossKind::CrossEntropy).value("Margin", LossKind::Margin);
  py::enum_<PenaltyMode>(m, "PenaltyMode")
      .value("FiniteDifference", PenaltyMode::FiniteDifference)
      .value("DoubleBackprop", PenaltyMode::DoubleBackprop)
      .value("Off", PenaltyMode::None);
  py::enum_<Schedule>(m, "Schedule").value("Constant", Schedule::Constant).value("Cosine", Schedule::Cosine);
  py::enum_<AttackKind>(m, "AttackKind")
      .value("Fgsm", AttackKind::Fgsm)
      .value("Pgd", AttackKind::Pgd)
      .value("GradFree", AttackKind::GradFree);

  // Models

  py::class_<ModelSpec>(m, "ModelSpec")
      .def_static("mlp", &ModelSpec::mlp, py::arg("inputs"), py::arg("hidden"), py::arg("classes"),
                  py::arg("activation") = LayerKind::Relu, py::arg("name") = "mlp")
      .def_static(
          "small_cnn",
          [](const Shape& image, std::size_t channels, std::size_t classes, LayerKind act) {
            return ModelSpec::small_cnn(image, channels, classes, act);
          },
          py::arg("image_shape"), py::arg("channels"), py::arg("classes"), py::arg("activation") = LayerKind::Relu)
      .def_property_readonly("input_shape", &ModelSpec::input_shape)
      .def_property_readonly("classes", &ModelSpec::classes)
      .def_property_readonly("name", &ModelSpec::name)
      .def_property_readonly("parameter_count", &ModelSpec::parameter_count)
      .def_property_readonly("smooth", &ModelSpec::smooth)
      .def("to_json", [](const ModelSpec& s) { return spec_to_json(s); })
      .def_static("from_json", &spec_from_json)
      .def(py::self == py::self);

  py::class_<Parameters>(m, "Parameters")
      .def(py::init([](const ModelSpec& spec, const Array& values) {
             return Parameters(spec, std::vector<double>(values.data(), values.data() + values.size()));
           }),
           py::arg("spec"), py::arg("values"))
      .def_static("initialize", &Parameters::initialize, py::arg("spec"), py::arg("seed"))
      .def_property_readonly("values", [](const Parameters& p) { return to_array(p.values()); })
      .def("__len__", &Parameters::size)
      .def(py::self == py::self);

  m.def(
      "logits",
      [](const ModelSpec& spec, const Parameters& params, const Array& x) {
        return to_array(model_apply(spec, params, to_tensor(x)));
      },
      py::arg("spec"), py::arg("params"), py::arg("x"));
  m.def(
      "input_gradient",
      [](const ModelSpec& spec, const Parameters& params, const Array& x, const std::vector<int>& labels,
         LossKind kind) { return to_array(input_gradient(spec, params, to_tensor(x), labels, kind)); },
      py::arg("spec"), py::arg("params"), py::arg("x"), py::arg("labels"), py::arg("loss") = LossKind::CrossEntropy,
      "Gradient of the loss with respect to a batch x [B, input...].");
  m.def("penalty", &penalty_with_gradient, py::arg("spec"), py::arg("params"), py::arg("x"), py::arg("labels"),
        py::arg("mode") = PenaltyMode::FiniteDifference, py::arg("h") = 0.01, py::arg("norm") = Norm::L2,
        py::arg("loss") = LossKind::CrossEntropy,
        "Squared input-gradient penalty of a batch and its gradient with respect to the parameters.");

  // Data

  py::class_<Dataset>(m, "Dataset")
      .def(py::init(&make_dataset), py::arg("inputs"), py::arg("labels"))
      .def_property_readonly("inputs", [](const Dataset& d) { return to_array(d.inputs); })
      .def_readonly("labels", &Dataset::labels)
      .def_readonly("provenance", &Dataset::provenance)
      .def_property_readonly("classes", &Dataset::classes)
      .def("__len__", &Dataset::size);
  m.def(
      "two_moons",
      [](std::size_t n, double noise, std::uint64_t seed) { return gen_two_moons(n, noise, seed); },
      py::arg("n"), py::arg("noise") = 0.15, py::arg("seed") = 0);
  m.def(
      "load_idx",
      [](const std::filesystem::path& images, const std::filesystem::path& labels, std::size_t limit) {
        return load_idx_dataset(images, labels, Split::Test, limit);
      },
      py::arg("images"), py::arg("labels"), py::arg("limit") = 0);

  // Training

  py::class_<RegConfig>(m, "RegConfig")
      .def(py::init<>())
      .def_readwrite("lam", &RegConfig::lambda)
      .def_readwrite("h", &RegConfig::h)
      .def_readwrite("norm", &RegConfig::norm)
      .def_readwrite("mode", &RegConfig::mode)
      .def_readwrite("batch_size", &RegConfig::batch_size)
      .def_readwrite("learning_rate", &RegConfig::learning_rate)
      .def_readwrite("schedule", &RegConfig::schedule)
      .def_readwrite("epochs", &RegConfig::epochs)
      .def_readwrite("seed", &RegConfig::seed)
      .def_readwrite("loss", &RegConfig::loss)
      .def_readwrite("adversarial_eps", &RegConfig::adversarial_eps)
      .def_readwrite("clip_norm", &RegConfig::clip_norm);

  m.def(
      "train",
      [](const ModelSpec& spec, const Dataset& data, const RegConfig& config) {
        std::optional<TrainReport> report;
        {
          py::gil_scoped_release release;
          report.emplace(train(spec, data, config));
        }
        py::list epochs;
        for (const auto& e : report->epochs) {
          py::dict d;
          d["epoch"] = e.epoch;
          d["loss"] = e.loss;
          d["penalty"] = e.penalty;
          d["seconds"] = e.seconds;
          epochs.append(d);
        }
        return py::make_tuple(report->parameters, epochs);
      },
      py::arg("spec"), py::arg("data"), py::arg("config"), "Returns (parameters, per-epoch statistics).");
  m.def("mean_input_gradient_norm", &mean_input_gradient_norm, py::arg("spec"), py::arg("params"), py::arg("data"),
        py::arg("loss") = LossKind::CrossEntropy, py::arg("norm") = Norm::L2);
  m.def(
      "bench",
      [](const ModelSpec& spec, const Dataset& data, const RegConfig& config, std::size_t steps) {
        BenchReport r;
        {
          py::gil_scoped_release release;
          r = bench_regularizers(spec, data, config, steps);
        }
        py::dict d;
        d["plain_seconds"] = r.plain_seconds;
        d["control_seconds"] = r.control_seconds;
        d["fd_seconds"] = r.fd_seconds;
        d["db_seconds"] = r.db_seconds;
        d["fd_over_db"] = r.fd_over_db();
        return d;
      },
      py::arg("spec"), py::arg("data"), py::arg("config"), py::arg("steps") = 100);

  // Attacks

  py::class_<NetworkClassifier>(m, "Classifier")
      .def(py::init<ModelSpec, Parameters>(), py::arg("spec"), py::arg("params"))
      .def("logits", [](const NetworkClassifier& c, const Array& x) { return to_array(c.logits(to_tensor(x))); })
      .def("margin", [](const NetworkClassifier& c, const Array& x, int y) { return c.margin(to_tensor(x), y); })
      .def("margin_gradient",
           [](const NetworkClassifier& c, const Array& x, int y) {
             return to_array(c.margin_gradient(to_tensor(x), y));
           })
      .def_property_readonly("logit_queries", &NetworkClassifier::logit_queries)
      .def_property_readonly("gradient_queries", &NetworkClassifier::gradient_queries)
      .def("reset_counters", &NetworkClassifier::reset_counters);

  m.def(
      "fgsm",
      [](const NetworkClassifier& c, const Array& x, int y, double eps, Norm norm) {
        return attack_dict(fgsm(c, to_tensor(x), y, eps, norm));
      },
      py::arg("model"), py::arg("x"), py::arg("y"), py::arg("eps"), py::arg("norm") = Norm::Linf);
  m.def(
      "pgd",
      [](const NetworkClassifier& c, const Array& x, int y, double eps, Norm norm, std::size_t steps,
         std::uint64_t seed) {
        PgdOptions o;
        o.steps = steps;
        o.seed = seed;
        return attack_dict(pgd(c, to_tensor(x), y, eps, norm, o));
      },
      py::arg("model"), py::arg("x"), py::arg("y"), py::arg("eps"), py::arg("norm") = Norm::L2,
      py::arg("steps") = 7, py::arg("seed") = 0);
  m.def(
      "grad_free_attack",
      [](const NetworkClassifier& c, const Array& x, int y, double eps, Norm norm, std::size_t budget,
         std::uint64_t seed) { return attack_dict(grad_free_attack(c, to_tensor(x), y, eps, norm, budget, seed)); },
      py::arg("model"), py::arg("x"), py::arg("y"), py::arg("eps"), py::arg("norm") = Norm::L2,
      py::arg("budget") = 500, py::arg("seed") = 0);
  m.def(
      "min_adv_distances",
      [](const NetworkClassifier& c, const Dataset& data, Norm norm, std::uint64_t seed, std::size_t threads) {
        std::vector<DistanceResult> rs;
        {
          py::gil_scoped_release release;
          rs = min_adv_distances(c, data, AttackSuite{}, norm, DistanceOptions{}, seed, threads);
        }
        std::vector<double> out;
        for (const auto& r : rs) out.push_back(r.distance);
        return to_array(out);
      },
      py::arg("model"), py::arg("data"), py::arg("norm") = Norm::L2, py::arg("seed") = 0, py::arg("threads") = 1,
      "Per-image minimal adversarial distance found by the default attack suite.");

  // Certification

  py::class_<SamplerConfig>(m, "SamplerConfig")
      .def(py::init<>())
      .def_readwrite("n_blocks", &SamplerConfig::n_blocks)
      .def_readwrite("block_size", &SamplerConfig::block_size)
      .def_readwrite("samples_per_point", &SamplerConfig::samples_per_point)
      .def_readwrite("p", &SamplerConfig::p)
      .def_readwrite("seed", &SamplerConfig::seed)
      .def_readwrite("threads", &SamplerConfig::threads);

  py::class_<GevParams>(m, "GevParams")
      .def(py::init<>())
      .def(py::init([](double mu, double sigma, double xi) { return GevParams{mu, sigma, xi}; }), py::arg("mu"),
           py::arg("sigma"), py::arg("xi"))
      .def_readwrite("mu", &GevParams::mu)
      .def_readwrite("sigma", &GevParams::sigma)
      .def_readwrite("xi", &GevParams::xi);
  m.def(
      "gev_fit",
      [](const std::vector<double>& samples) { return gev_fit_mle(samples).params; }, py::arg("samples"));
  m.def("gev_upper_quantile", &gev_upper_quantile, py::arg("params"), py::arg("p"));

  m.def(
      "estimate_L",
      [](const NetworkClassifier& c, const Dataset& data, Norm dual, const SamplerConfig& config) {
        return estimate_L(c, data, dual, config).value;
      },
      py::arg("model"), py::arg("data"), py::arg("dual") = Norm::L2, py::arg("config") = SamplerConfig{});
  m.def(
      "estimate_omega",
      [](const NetworkClassifier& c, const Dataset& data, double eps, Norm norm, const SamplerConfig& config) {
        return estimate_omega(c, data, eps, norm, config).value;
      },
      py::arg("model"), py::arg("data"), py::arg("eps"), py::arg("norm") = Norm::L2,
      py::arg("config") = SamplerConfig{});
  m.def("l_bound", &l_bound, py::arg("margin"), py::arg("l0"), py::arg("L"));
  m.def("omega_bound_certified", &omega_bound_certified, py::arg("margin"), py::arg("grad_dual_norm"),
        py::arg("l0"), py::arg("omega"), py::arg("eps"));
  m.def(
      "certify",
      [](const NetworkClassifier& c, const Dataset& data, const std::vector<double>& radii, Norm norm,
         const SamplerConfig& config) {
        CertifyReport r;
        {
          py::gil_scoped_release release;
          r = certify_dataset(c, data, radii, norm, config);
        }
        py::dict d;
        d["L"] = r.lipschitz.value;
        d["omegas"] = r.omegas;
        d["clean_error"] = r.clean_error();
        d["certified_error"] = r.certified_error();
        std::vector<double> bounds;
        for (const auto& rec : r.records) bounds.push_back(rec.l_bound);
        d["l_bounds"] = to_array(bounds);
        return d;
      },
      py::arg("model"), py::arg("data"), py::arg("radii"), py::arg("norm") = Norm::L2,
      py::arg("config") = SamplerConfig{});

  // Checkpoints and pipeline commands

  m.def("save_checkpoint", &save_checkpoint, py::arg("spec"), py::arg("params"), py::arg("config"),
        py::arg("path"));
  m.def(
      "load_checkpoint",
      [](const std::filesystem::path& path) {
        Checkpoint c = load_checkpoint(path);
        return py::make_tuple(c.spec, c.parameters, c.config);
      },
      py::arg("path"), "Returns (spec, parameters, config echo).");

  auto command = [&m](const char* name, CommandResult (*fn)(const RunConfig&, const CommandOptions&)) {
    m.def(
        name,
        [fn](const std::filesystem::path& config, std::optional<std::filesystem::path> out, std::size_t threads) {
          RunConfig rc = load_run_config(config);
          CommandOptions o;
          o.out = std::move(out);
          o.threads = threads;
          CommandResult r;
          {
            py::gil_scoped_release release;
            r = fn(rc, o);
          }
          return r.files;
        },
        py::arg("config"), py::arg("out") = py::none(), py::arg("threads") = 0);
  };
  command("run_train", &cmd_train);
  command("run_attack", &cmd_attack);
  command("run_certify", &cmd_certify);
  command("run_bench", &cmd_bench);
}
