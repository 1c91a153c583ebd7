#include "xvit/cli.hpp"

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "xvit/attention.hpp"
#include "xvit/bench.hpp"
#include "xvit/checkpoint.hpp"
#include "xvit/errors.hpp"
#include "xvit/gradcheck.hpp"
#include "xvit/train.hpp"

namespace xvit {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

ModelConfig resolve_config(const std::string& name_or_path) {
  const auto names = config_names();
  if (std::find(names.begin(), names.end(), name_or_path) != names.end()) {
    return named_config(name_or_path);
  }
  if (name_or_path.size() > 5 &&
      name_or_path.compare(name_or_path.size() - 5, 5, ".json") == 0) {
    std::ifstream f(name_or_path);
    if (!f) throw ConfigError("cannot read config file '" + name_or_path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return config_from_json(ss.str());
  }
  throw ConfigError("unknown config '" + name_or_path + "'");
}

namespace {

std::string format(const char* fmt, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, fmt, args...);
  return buf;
}

std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Every option of the subcommand as given or defaulted.
ojson flag_set(const CLI::App& sub) {
  ojson flags = ojson::object();
  for (const CLI::Option* opt : sub.get_options()) {
    const std::string name = opt->get_name();
    if (name == "--help") continue;
    if (opt->count() > 0) {
      const auto& res = opt->results();
      std::string joined;
      for (std::size_t i = 0; i < res.size(); ++i) joined += (i ? "," : "") + res[i];
      flags[name] = joined;
    } else {
      flags[name] = opt->get_default_str();
    }
  }
  return flags;
}

struct RunInfo {
  std::string subcommand;
  ojson flags;
  std::uint64_t seed = 0;
  DType dtype = DType::f64;
  bool deterministic = true;
  ojson extra = ojson::object();
};

void write_manifest(const fs::path& output, const RunInfo& info) {
  ojson j;
  j["subcommand"] = info.subcommand;
  j["flags"] = info.flags;
  j["seed"] = info.seed;
  j["version"] = kVersion;
  j["dtype"] = std::string(dtype_name(info.dtype));
  j["deterministic"] = info.deterministic;
  j["timestamp"] = utc_timestamp();
  j["output"] = output.filename().string();
  for (const auto& [k, v] : info.extra.items()) j[k] = v;
  fs::path p = output;
  p += ".manifest.json";
  std::ofstream f(p, std::ios::trunc);
  if (!f) throw Error("cannot write manifest '" + p.string() + "'");
  f << j.dump(2) << '\n';
}

struct BenchArgs {
  std::string mechanism = "both";
  std::vector<std::size_t> n_list{256, 512, 1024, 2048, 4096};
  std::size_t dim = 192;
  std::size_t heads = 4;
  std::size_t batch = 1;
  std::size_t iters = 10;
  std::size_t warmup = 3;
  std::uint64_t seed = 0;
  std::string out = "bench.csv";
  bool no_fit = false;
  bool full_model = false;
  std::string config = "nano";
  bool gnuplot = false;
  bool no_retain = false;
  std::uint64_t memory_limit = 0;
  bool deterministic = false;
};

int cmd_bench(const BenchArgs& a, const CLI::App& sub, std::ostream& out,
              std::ostream& err) {
  std::vector<Mechanism> mechs;
  if (a.mechanism == "both") {
    mechs = {Mechanism::xnorm, Mechanism::softmax};
  } else {
    mechs = {parse_mechanism(a.mechanism)};
  }
  if (a.n_list.empty()) throw ConfigError("--n-list is empty");
  for (std::size_t i = 1; i < a.n_list.size(); ++i) {
    if (a.n_list[i] <= a.n_list[i - 1]) throw ConfigError("--n-list must be ascending");
  }
  if (!a.no_fit && std::set<std::size_t>(a.n_list.begin(), a.n_list.end()).size() < 4) {
    throw ConfigError("need >= 4 N values for fit (pass --no-fit to skip it)");
  }

  const double slack = time_slack();
  std::vector<std::string> comments;
  if (slack > 0.0) {
    const std::string note = format("%s=%g widens time-exponent thresholds",
                                    kTimeSlackEnv, slack);
    err << note << '\n';
    comments.push_back(note);
  }

  BenchOptions opts;
  opts.dim = a.dim;
  opts.heads = a.heads;
  opts.batch = a.batch;
  opts.iters = a.iters;
  opts.warmup = a.warmup;
  opts.seed = a.seed;
  opts.retain = !a.no_retain;
  opts.full_model = a.full_model;
  opts.memory_limit = a.memory_limit;
  if (a.full_model) opts.model = resolve_config(a.config);

  std::vector<BenchRecord> records;
  for (Mechanism m : mechs) {
    for (const auto& r : run_bench(m, a.n_list, opts)) {
      if (r.oom) {
        err << "oom: " << mechanism_name(m) << " N=" << r.n
            << " exceeded the memory limit; larger N skipped\n";
      } else {
        err << format("%s N=%zu mean_ms=%.6g peak_bytes=%" PRIu64 "\n",
                      std::string(mechanism_name(m)).c_str(), r.n, r.mean_ms,
                      r.peak_bytes);
      }
      records.push_back(r);
    }
  }
  write_csv(records, a.out, comments);
  RunInfo info{"bench", flag_set(sub), a.seed, DType::f32, a.deterministic};
  info.extra["time_slack"] = slack;
  write_manifest(a.out, info);
  if (a.gnuplot) {
    for (const auto& p : write_gnuplot(records, a.out)) write_manifest(p, info);
  }
  if (a.no_fit) return kExitOk;

  // Fit what the file says, so the printed exponents reproduce from it.
  const auto reread = read_csv(a.out);
  for (Mechanism m : mechs) {
    std::vector<BenchRecord> mine;
    for (const auto& r : reread) {
      if (r.mechanism == m) mine.push_back(r);
    }
    for (BenchField f : {BenchField::peak_bytes, BenchField::mean_ms}) {
      try {
        const ScalingFit fit = fit_scaling(mine, f);
        out << mechanism_name(m) << ' ' << field_name(f) << ' '
            << format("%.17g %.17g", fit.exponent, fit.r2) << '\n';
      } catch (const DataError& e) {
        err << "no fit for " << mechanism_name(m) << ' ' << field_name(f)
            << ": " << e.what() << '\n';
      }
    }
  }
  return kExitOk;
}

struct GradcheckArgs {
  std::string config = "nano";
  std::uint64_t seed = 42;
  double tol = 1e-5;
  std::size_t samples = 100;
  std::string out;
  bool deterministic = true;
};

int cmd_gradcheck(const GradcheckArgs& a, const CLI::App& sub, std::ostream& out,
                  std::ostream& err) {
  const ModelConfig cfg = resolve_config(a.config);
  grad::GradCheckOptions opts;
  opts.samples_per_tensor = a.samples;
  const auto report = grad::gradcheck(cfg, a.seed, a.tol, opts);
  const std::string json = grad::report_to_json(report);
  out << json << '\n';
  if (!a.out.empty()) {
    std::ofstream f(a.out, std::ios::trunc);
    if (!f) throw Error("cannot write '" + a.out + "'");
    f << json << '\n';
    write_manifest(a.out, {"gradcheck", flag_set(sub), a.seed, DType::f64,
                           a.deterministic});
  }
  if (!report.passed) {
    err << format("gradcheck failed: worst parameter %s, relative error %.3g > %.3g\n",
                  report.worst_param.c_str(), report.max_rel_error, a.tol);
    return kExitCheckFailed;
  }
  return kExitOk;
}

struct CountArgs {
  std::string config = "nano";
  std::size_t image_size = 0;  // 0: the config's own
  std::string format = "text";
  bool deterministic = true;
};

int cmd_count(const CountArgs& a, std::ostream& out) {
  ModelConfig cfg = resolve_config(a.config);
  if (a.image_size != 0) cfg.image_size = a.image_size;
  cfg.validate();
  const std::size_t s = cfg.image_size;
  const FlopBreakdown fx = flop_breakdown(cfg, s, Mechanism::xnorm);
  const FlopBreakdown fs = flop_breakdown(cfg, s, Mechanism::softmax);
  ojson j;
  j["config"] = a.config;
  j["image_size"] = s;
  j["tokens"] = cfg.tokens();
  j["params"] = count_params(cfg);
  j["flops_xnorm"] = fx.total;
  j["flops_xnorm_attn"] = fx.attention;
  j["flops_softmax"] = fs.total;
  j["flops_softmax_attn"] = fs.attention;
  if (a.format == "json") {
    out << j.dump(2) << '\n';
  } else {
    for (const auto& [k, v] : j.items()) {
      out << k << ' ' << (v.is_string() ? v.get<std::string>() : v.dump()) << '\n';
    }
  }
  return kExitOk;
}

struct AssocArgs {
  std::size_t n = 64;
  std::size_t dim = 32;
  std::uint64_t seed = 0;
  bool f32 = false;
  bool deterministic = true;
};

int cmd_assoc(const AssocArgs& a, std::ostream& out) {
  if (a.n == 0 || a.dim == 0) throw ConfigError("--n and --dim must be >= 1");
  const DType dt = a.f32 ? DType::f32 : DType::f64;
  const double threshold = a.f32 ? 1e-4 : 1e-9;
  Rng rng(a.seed);
  const Tensor q = uniform({a.n, a.dim}, -1.0, 1.0, rng, dt);
  const Tensor k = uniform({a.n, a.dim}, -1.0, 1.0, rng, dt);
  const Tensor v = uniform({a.n, a.dim}, -1.0, 1.0, rng, dt);
  const double diff = assoc_check(q, k, v);
  const bool ok = diff <= threshold;
  out << format("max_abs_diff %.17g\nthreshold %g\ndtype %s\n%s\n", diff,
                threshold, std::string(dtype_name(dt)).c_str(),
                ok ? "ok" : "FAILED");
  return ok ? kExitOk : kExitCheckFailed;
}

struct TrainArgs {
  std::string config = "nano";
  std::string train_config;
  std::size_t epochs = 0;
  double lr = -1.0;
  double momentum = -1.0;
  std::size_t batch = 0;
  std::size_t samples = 0;
  std::uint64_t seed = 42;
  std::string out = "curve.csv";
  std::string save;
  double min_acc = 0.0;
  bool freeze_gamma = false;
  bool deterministic = true;
};

std::string slurp(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

TrainOptions train_options(const TrainArgs& a, const CLI::App& sub) {
  TrainOptions o = a.train_config.empty()
                       ? TrainOptions{}
                       : train_options_from_json(slurp(a.train_config));
  if (sub.count("--epochs")) o.epochs = a.epochs;
  if (sub.count("--lr")) o.lr = a.lr;
  if (sub.count("--momentum")) o.momentum = a.momentum;
  if (sub.count("--batch")) o.batch_size = a.batch;
  if (sub.count("--samples")) o.train_samples = a.samples;
  if (sub.count("--seed") || a.train_config.empty()) o.seed = a.seed;
  if (a.freeze_gamma) o.freeze_gamma = true;
  if (o.lr < 0.0 || o.momentum < 0.0) throw ConfigError("lr and momentum must be >= 0");
  return o;
}

int cmd_train_toy(const TrainArgs& a, const CLI::App& sub, std::ostream& out,
                  std::ostream& err) {
  const ModelConfig cfg = resolve_config(a.config);
  const TrainOptions o = train_options(a, sub);
  TrainResult res;
  try {
    res = train_toy(cfg, o);
  } catch (const DivergedError& e) {
    err << "diverged at epoch " << e.epoch() << ": " << e.what() << '\n';
    return kExitCheckFailed;
  }
  RunInfo info{"train-toy", flag_set(sub), o.seed, o.dtype, a.deterministic};
  info.extra["train_options"] = ojson::parse(train_options_to_json(o));
  {
    std::ofstream f(a.out, std::ios::trunc);
    if (!f) throw Error("cannot write '" + a.out + "'");
    f << "epoch,loss,accuracy\n";
    for (const auto& e : res.curve) {
      f << format("%zu,%.6g,%.6g\n", e.epoch, e.loss, e.accuracy);
    }
    if (!f) throw Error("write to '" + a.out + "' failed");
  }
  write_manifest(a.out, info);
  if (!a.save.empty()) {
    save_checkpoint(res.params, cfg, a.save);
    write_manifest(a.save, info);
  }
  out << format("initial_accuracy %.6f\nfinal_accuracy %.6f\n",
                res.initial_accuracy, res.final_accuracy);
  if (res.final_accuracy < a.min_acc) {
    err << format("final accuracy %.6f below --min-acc %.6f\n", res.final_accuracy,
                  a.min_acc);
    return kExitCheckFailed;
  }
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint;
  std::string train_config;
  std::size_t samples = 0;
  std::uint64_t seed = 42;
  bool deterministic = true;
};

// Accuracy of a checkpoint on the quadrant set train-toy used.
int cmd_eval(const EvalArgs& a, const CLI::App& sub, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  TrainOptions o = a.train_config.empty()
                       ? TrainOptions{}
                       : train_options_from_json(slurp(a.train_config));
  if (sub.count("--samples")) o.train_samples = a.samples;
  if (sub.count("--seed") || a.train_config.empty()) o.seed = a.seed;
  const Dataset data = make_quadrant_dataset(o.train_samples, o.seed,
                                             ck.config.image_size,
                                             ck.params.dtype());
  out << format("accuracy %.6f\n", evaluate_accuracy(ck.params, ck.config, data));
  return kExitOk;
}

void add_determinism(CLI::App* sub, bool& flag) {
  sub->add_flag("--deterministic,!--no-deterministic", flag,
                "Fixed reduction order (kernels are single-threaded, so "
                "results are deterministic either way)");
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out,
            std::ostream& err) {
  CLI::App app{"XNorm linear attention toolkit", "xvit"};
  app.option_defaults()->always_capture_default();
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "Time and memory scaling sweep");
  bench->add_option("--mechanism", ba.mechanism)
      ->check(CLI::IsMember({"xnorm", "softmax", "both"}));
  bench->add_option("--n-list", ba.n_list, "Token counts, ascending")
      ->delimiter(',');
  bench->add_option("--dim", ba.dim);
  bench->add_option("--heads", ba.heads);
  bench->add_option("--batch", ba.batch);
  bench->add_option("--iters", ba.iters);
  bench->add_option("--warmup", ba.warmup);
  bench->add_option("--seed", ba.seed);
  bench->add_option("--out", ba.out, "CSV path");
  bench->add_flag("--no-fit", ba.no_fit, "Skip the exponent fit");
  bench->add_flag("--full-model", ba.full_model,
                  "Time model_forward instead of one attention layer");
  bench->add_option("--config", ba.config, "Base model for --full-model");
  bench->add_flag("--gnuplot", ba.gnuplot, "Also write one .dat file per mechanism");
  bench->add_flag("--no-retain", ba.no_retain,
                  "Free per-head intermediates as soon as possible");
  bench->add_option("--memory-limit", ba.memory_limit,
                    "Tracker byte limit; larger N are skipped once hit");
  add_determinism(bench, ba.deterministic);

  GradcheckArgs ga;
  auto* gc = app.add_subcommand("gradcheck", "Analytic vs central-difference gradients");
  gc->add_option("--config", ga.config);
  gc->add_option("--seed", ga.seed);
  gc->add_option("--tol", ga.tol);
  gc->add_option("--samples", ga.samples, "Checked scalars per tensor");
  gc->add_option("--out", ga.out, "Also write the JSON report here");
  add_determinism(gc, ga.deterministic);

  CountArgs ca;
  auto* count = app.add_subcommand("count", "Parameters and FLOPs");
  count->add_option("--config", ca.config);
  count->add_option("--image-size", ca.image_size);
  count->add_option("--format", ca.format)->check(CLI::IsMember({"json", "text"}));
  add_determinism(count, ca.deterministic);

  AssocArgs aa;
  auto* assoc = app.add_subcommand("assoc", "(Q K^T) V against Q (K^T V)");
  assoc->add_option("--n", aa.n);
  assoc->add_option("--dim", aa.dim);
  assoc->add_option("--seed", aa.seed);
  assoc->add_flag("--f32", aa.f32);
  add_determinism(assoc, aa.deterministic);

  TrainArgs ta;
  auto* train = app.add_subcommand("train-toy", "SGD on the quadrant task");
  train->add_option("--config", ta.config);
  train->add_option("--train-config", ta.train_config, "JSON training options");
  train->add_option("--epochs", ta.epochs);
  train->add_option("--lr", ta.lr);
  train->add_option("--momentum", ta.momentum);
  train->add_option("--batch", ta.batch);
  train->add_option("--samples", ta.samples);
  train->add_option("--seed", ta.seed);
  train->add_option("--out", ta.out, "Loss curve CSV");
  train->add_option("--save", ta.save, "Checkpoint path");
  train->add_option("--min-acc", ta.min_acc);
  train->add_flag("--freeze-gamma", ta.freeze_gamma);
  add_determinism(train, ta.deterministic);

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Accuracy of a checkpoint on the quadrant set");
  eval->add_option("--checkpoint", ea.checkpoint)->required();
  eval->add_option("--train-config", ea.train_config);
  eval->add_option("--samples", ea.samples);
  eval->add_option("--seed", ea.seed);
  add_determinism(eval, ea.deterministic);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*bench) return cmd_bench(ba, *bench, out, err);
    if (*gc) return cmd_gradcheck(ga, *gc, out, err);
    if (*count) return cmd_count(ca, out);
    if (*assoc) return cmd_assoc(aa, out);
    if (*train) return cmd_train_toy(ta, *train, out, err);
    if (*eval) return cmd_eval(ea, *eval, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DataError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitCheckFailed;
  }
  return kExitUsage;
}

}  // namespace xvit
