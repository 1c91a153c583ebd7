#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "xvit/attention.hpp"
#include "xvit/bench.hpp"
#include "xvit/checkpoint.hpp"
#include "xvit/cli.hpp"
#include "xvit/errors.hpp"
#include "xvit/gradcheck.hpp"
#include "xvit/model.hpp"
#include "xvit/train.hpp"

namespace py = pybind11;
using namespace xvit;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor::from(shape, std::span<const double>(a.data(), a.size()));
}

Array to_array(const Tensor& t) {
  Array out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  const auto v = t.to_vector();
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

py::dict record_dict(const BenchRecord& r) {
  py::dict d;
  d["mechanism"] = std::string(mechanism_name(r.mechanism));
  d["N"] = r.n;
  d["C"] = r.c;
  d["heads"] = r.heads;
  d["batch"] = r.batch;
  d["iters"] = r.iters;
  d["warmup_iters"] = r.warmup_iters;
  d["mean_ms"] = r.mean_ms;
  d["std_ms"] = r.std_ms;
  d["peak_bytes"] = r.peak_bytes;
  d["flops_est"] = r.flops_est;
  d["oom"] = r.oom;
  return d;
}

}  // namespace

PYBIND11_MODULE(_xvit, m) {
  m.doc() = "XNorm linear attention: kernels, model, benchmarks.";

  static py::exception<Error> base(m, "Error", PyExc_RuntimeError);
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<LoadError>(m, "LoadError", base.ptr());
  py::register_exception<DataError>(m, "DataError", base.ptr());
  py::register_exception<DivergedError>(m, "DivergedError", base.ptr());

  py::class_<AttentionParams>(m, "AttentionParams")
      .def_static(
          "init",
          [](std::size_t dim, std::size_t heads, std::uint64_t seed, double eps) {
            Rng rng(seed);
            return AttentionParams::init(dim, heads, rng, DType::f64, eps);
          },
          py::arg("dim"), py::arg("heads"), py::arg("seed") = 0,
          py::arg("eps") = kDefaultEps)
      .def_readonly("heads", &AttentionParams::heads)
      .def_readonly("eps", &AttentionParams::eps)
      .def_property_readonly("dim", &AttentionParams::dim)
#define XVIT_TENSOR_PROP(field)                                                   \
  def_property(                                                                   \
      #field, [](const AttentionParams& p) { return to_array(p.field); },         \
      [](AttentionParams& p, const Array& a) { p.field = to_tensor(a); })
      .XVIT_TENSOR_PROP(w_q)
      .XVIT_TENSOR_PROP(w_k)
      .XVIT_TENSOR_PROP(w_v)
      .XVIT_TENSOR_PROP(w_o)
      .XVIT_TENSOR_PROP(gamma_q)
      .XVIT_TENSOR_PROP(gamma_c);
#undef XVIT_TENSOR_PROP

  m.def(
      "attention",
      [](const std::string& mech, const Array& xq, std::optional<Array> xkv,
         const AttentionParams& p) {
        p.validate();
        const Tensor q = to_tensor(xq);
        const Tensor kv = xkv ? to_tensor(*xkv) : q;
        return to_array(attention(parse_mechanism(mech), q, kv, p).out);
      },
      py::arg("mechanism"), py::arg("xq"), py::arg("xkv") = py::none(), py::arg("params"),
      "Multi-head attention of xq [Nq, C] over xkv [Nk, C] (defaults to xq).");
  m.def(
      "assoc_check",
      [](const Array& q, const Array& k, const Array& v) {
        return assoc_check(to_tensor(q), to_tensor(k), to_tensor(v));
      },
      py::arg("q"), py::arg("k"), py::arg("v"));

  m.def("config_names", &config_names);
  m.def(
      "config", [](const std::string& name) { return config_to_json(resolve_config(name)); },
      py::arg("name_or_path"), "Model config as a JSON string.");
  m.def(
      "count_params",
      [](const std::string& cfg) { return count_params(resolve_config(cfg)); },
      py::arg("config"));
  m.def(
      "count_flops",
      [](const std::string& cfg, std::size_t image_size) {
        const ModelConfig c = resolve_config(cfg);
        return count_flops(c, image_size ? image_size : c.image_size);
      },
      py::arg("config"), py::arg("image_size") = 0);
  m.def(
      "attention_flops",
      [](const std::string& mech, std::size_t nq, std::size_t nk, std::size_t dim,
         std::size_t heads) { return attention_flops(parse_mechanism(mech), nq, nk, dim, heads); },
      py::arg("mechanism"), py::arg("nq"), py::arg("nk"), py::arg("dim"), py::arg("heads"));

  py::class_<ModelConfig>(m, "ModelConfig")
      .def_static("from_json", &config_from_json)
      .def_static("named", [](const std::string& n) { return resolve_config(n); })
      .def("to_json", &config_to_json)
      .def_readonly("image_size", &ModelConfig::image_size)
      .def_readonly("embed_dim", &ModelConfig::embed_dim)
      .def_readonly("heads", &ModelConfig::heads)
      .def_readonly("num_classes", &ModelConfig::num_classes)
      .def("tokens", &ModelConfig::tokens);

  struct Model {
    ModelConfig cfg;
    ModelParams params;
  };
  py::class_<Model>(m, "Model")
      .def(py::init([](const ModelConfig& cfg, std::uint64_t seed) {
             cfg.validate();
             return Model{cfg, init_params(cfg, seed)};
           }),
           py::arg("config"), py::arg("seed") = 0)
      .def_static(
          "load", [](const std::filesystem::path& p) {
            Checkpoint ck = load_checkpoint(p);
            return Model{ck.config, std::move(ck.params)};
          },
          py::arg("path"))
      .def("save", [](const Model& md, const std::filesystem::path& p) {
        save_checkpoint(md.params, md.cfg, p);
      }, py::arg("path"))
      .def_property_readonly("config", [](const Model& md) { return md.cfg; })
      .def("forward",
           [](const Model& md, const Array& img) {
             return to_array(model_forward(to_tensor(img).astype(md.params.dtype()),
                                           md.params, md.cfg)
                                 .astype(DType::f64));
           },
           py::arg("image"), "Logits for one [channels, H, W] image.")
      .def("parameters", [](const Model& md) {
        py::dict d;
        md.params.visit([&](const std::string& name, const Tensor& t) {
          d[py::str(name)] = to_array(t.astype(DType::f64));
        });
        return d;
      });

  m.def(
      "gradcheck",
      [](const std::string& cfg, std::uint64_t seed, double tol, std::size_t samples) {
        grad::GradCheckOptions o;
        o.samples_per_tensor = samples;
        return grad::report_to_json(grad::gradcheck(resolve_config(cfg), seed, tol, o));
      },
      py::arg("config") = "nano", py::arg("seed") = 42, py::arg("tol") = 1e-5,
      py::arg("samples") = 100, "JSON report.");

  m.def(
      "train_toy",
      [](const std::string& cfg, const std::string& options_json) {
        const TrainOptions o =
            options_json.empty() ? TrainOptions{} : train_options_from_json(options_json);
        TrainResult r;
        {
          py::gil_scoped_release release;
          r = train_toy(resolve_config(cfg), o);
        }
        py::list curve;
        for (const auto& e : r.curve) curve.append(py::make_tuple(e.epoch, e.loss, e.accuracy));
        py::dict d;
        d["curve"] = curve;
        d["initial_accuracy"] = r.initial_accuracy;
        d["final_accuracy"] = r.final_accuracy;
        return d;
      },
      py::arg("config") = "nano", py::arg("options_json") = "");

  m.def(
      "run_bench",
      [](const std::string& mech, const std::vector<std::size_t>& ns, std::size_t dim,
         std::size_t heads, std::size_t batch, std::size_t iters, std::size_t warmup,
         std::uint64_t seed, bool retain) {
        BenchOptions o;
        o.dim = dim;
        o.heads = heads;
        o.batch = batch;
        o.iters = iters;
        o.warmup = warmup;
        o.seed = seed;
        o.retain = retain;
        std::vector<BenchRecord> recs;
        {
          py::gil_scoped_release release;
          recs = run_bench(parse_mechanism(mech), ns, o);
        }
        py::list out;
        for (const auto& r : recs) out.append(record_dict(r));
        return out;
      },
      py::arg("mechanism"), py::arg("ns"), py::arg("dim") = 192, py::arg("heads") = 4,
      py::arg("batch") = 1, py::arg("iters") = 10, py::arg("warmup") = 3,
      py::arg("seed") = 0, py::arg("retain") = true);
  m.def(
      "fit_power_law",
      [](const std::vector<double>& x, const std::vector<double>& y) {
        const ScalingFit f = fit_power_law(x, y);
        return py::make_tuple(f.exponent, f.intercept, f.r2);
      },
      py::arg("x"), py::arg("y"), "(exponent, log intercept, r2) of y = a x^k.");

  m.def(
      "cli",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "xvit");
        std::vector<const char*> argv;
        for (const auto& a : args) argv.push_back(a.c_str());
        std::ostringstream out, err;
        const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Run the command-line tool in-process: (exit code, stdout, stderr).");

  m.attr("__version__") = kVersion;
}
