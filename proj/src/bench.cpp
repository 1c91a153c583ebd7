#include "xvit/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <new>
#include <set>
#include <sstream>

#include "xvit/errors.hpp"

namespace xvit {

namespace {

// Restores the tracker limit on scope exit.
struct LimitGuard {
  explicit LimitGuard(std::uint64_t limit) { set_alloc_limit(limit); }
  ~LimitGuard() { set_alloc_limit(0); }
  LimitGuard(const LimitGuard&) = delete;
  LimitGuard& operator=(const LimitGuard&) = delete;
};

std::size_t exact_sqrt(std::size_t n) {
  auto r = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  return r * r == n ? r : 0;
}

BenchRecord measure(Mechanism m, std::size_t n, const BenchOptions& opts) {
  BenchRecord rec;
  rec.mechanism = m;
  rec.n = n;
  rec.c = opts.dim;
  rec.heads = opts.heads;
  rec.batch = opts.batch;
  rec.iters = opts.iters;
  rec.warmup_iters = opts.warmup;

  // Inputs and parameters are built before the measured window.
  Rng rng(opts.seed + n);
  std::vector<Tensor> inputs;
  AttentionParams ap;
  ModelConfig cfg;
  ModelParams mp;
  if (opts.full_model) {
    const std::size_t side = exact_sqrt(n);
    if (side == 0) {
      throw ConfigError("--full-model needs square token counts, got " +
                        std::to_string(n));
    }
    cfg = opts.model;
    cfg.embed_dim = opts.dim;
    cfg.heads = opts.heads;
    cfg.mechanism = m;
    cfg.image_size = side * cfg.patch_stride;
    cfg.validate();
    mp = init_params(cfg, opts.seed, DType::f32);
    for (std::size_t b = 0; b < opts.batch; ++b) {
      inputs.push_back(uniform({cfg.in_channels, cfg.image_size, cfg.image_size},
                               0.0, 1.0, rng, DType::f32));
    }
    rec.flops_est = count_flops(cfg, cfg.image_size) * opts.batch;
  } else {
    ap = AttentionParams::init(opts.dim, opts.heads, rng, DType::f32);
    for (std::size_t b = 0; b < opts.batch; ++b) {
      inputs.push_back(uniform({n, opts.dim}, -1.0, 1.0, rng, DType::f32));
    }
    rec.flops_est = attention_flops(m, n, n, opts.dim, opts.heads) * opts.batch;
  }

  // Outputs of the whole batch stay alive until the iteration ends.
  auto run_once = [&] {
    std::vector<Tensor> outs;
    outs.reserve(inputs.size());
    for (const auto& x : inputs) {
      if (opts.full_model) {
        outs.push_back(model_forward(x, mp, cfg));
      } else {
        outs.push_back(attention(m, x, x, ap, opts.retain).out);
      }
    }
    return outs.size();
  };

  for (std::size_t i = 0; i < opts.warmup; ++i) run_once();
  const std::uint64_t base = alloc_stats().live_bytes;
  reset_peak();
  std::vector<double> ms;
  ms.reserve(opts.iters);
  for (std::size_t i = 0; i < opts.iters; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    run_once();
    const auto t1 = std::chrono::steady_clock::now();
    ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  rec.peak_bytes = alloc_stats().peak_bytes - base;

  double sum = 0.0;
  for (double v : ms) sum += v;
  rec.mean_ms = sum / static_cast<double>(ms.size());
  double ss = 0.0;
  for (double v : ms) ss += (v - rec.mean_ms) * (v - rec.mean_ms);
  rec.std_ms = ms.size() > 1 ? std::sqrt(ss / static_cast<double>(ms.size() - 1)) : 0.0;
  std::sort(ms.begin(), ms.end());
  const std::size_t h = ms.size() / 2;
  rec.median_ms = ms.size() % 2 ? ms[h] : 0.5 * (ms[h - 1] + ms[h]);
  // Clock granularity can report zero for tiny inputs.
  rec.mean_ms = std::max(rec.mean_ms, 1e-6);
  rec.median_ms = std::max(rec.median_ms, 1e-6);
  return rec;
}

}  // namespace

std::vector<BenchRecord> run_bench(Mechanism m, std::span<const std::size_t> ns,
                                   const BenchOptions& opts) {
  if (opts.iters == 0) throw ConfigError("bench needs iters >= 1");
  if (opts.batch == 0) throw ConfigError("bench needs batch >= 1");
  if (opts.heads == 0 || opts.dim % opts.heads != 0) {
    throw ConfigError("dim must be divisible by heads");
  }
  std::vector<BenchRecord> out;
  for (std::size_t n : ns) {
    if (n == 0) throw ConfigError("token count must be >= 1");
    try {
      LimitGuard guard(opts.memory_limit);
      out.push_back(measure(m, n, opts));
    } catch (const std::bad_alloc&) {
      BenchRecord rec;
      rec.mechanism = m;
      rec.n = n;
      rec.c = opts.dim;
      rec.heads = opts.heads;
      rec.batch = opts.batch;
      rec.iters = opts.iters;
      rec.warmup_iters = opts.warmup;
      rec.oom = true;
      out.push_back(rec);
      break;
    }
  }
  return out;
}

std::string_view field_name(BenchField f) {
  return f == BenchField::mean_ms ? "mean_ms" : "peak_bytes";
}

BenchField parse_field(std::string_view name) {
  if (name == "mean_ms") return BenchField::mean_ms;
  if (name == "peak_bytes") return BenchField::peak_bytes;
  throw ConfigError("unknown bench field '" + std::string(name) + "'");
}

ScalingFit fit_power_law(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DataError("fit: x and y differ in length");
  if (x.size() < 2) throw DataError("fit: need at least two points");
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0) || !(y[i] > 0.0)) {
      throw DataError("fit: non-positive value at point " + std::to_string(i));
    }
    lx.push_back(std::log(x[i]));
    ly.push_back(std::log(y[i]));
  }
  const double n = static_cast<double>(lx.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    mx += lx[i];
    my += ly[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sxx += (lx[i] - mx) * (lx[i] - mx);
    sxy += (lx[i] - mx) * (ly[i] - my);
    syy += (ly[i] - my) * (ly[i] - my);
  }
  if (sxx == 0.0) throw DataError("fit: all x values are equal");
  ScalingFit fit;
  fit.exponent = sxy / sxx;
  fit.intercept = my - fit.exponent * mx;
  fit.points = lx.size();
  if (syy == 0.0) {
    fit.r2 = 1.0;
  } else {
    double ssr = 0.0;
    for (std::size_t i = 0; i < lx.size(); ++i) {
      const double r = ly[i] - (fit.intercept + fit.exponent * lx[i]);
      ssr += r * r;
    }
    fit.r2 = std::clamp(1.0 - ssr / syy, 0.0, 1.0);
  }
  return fit;
}

ScalingFit fit_scaling(std::span<const BenchRecord> records, BenchField field) {
  std::vector<double> x, y;
  std::set<std::size_t> distinct;
  for (const auto& r : records) {
    if (r.oom) continue;
    x.push_back(static_cast<double>(r.n));
    y.push_back(field == BenchField::mean_ms ? r.mean_ms
                                             : static_cast<double>(r.peak_bytes));
    distinct.insert(r.n);
  }
  if (distinct.size() < 4) {
    throw DataError("need >= 4 N values for fit, got " +
                    std::to_string(distinct.size()));
  }
  if (*distinct.rbegin() < 8 * *distinct.begin()) {
    throw DataError("fit needs N spanning at least 8x");
  }
  return fit_power_law(x, y);
}

void write_csv(std::span<const BenchRecord> records,
               const std::filesystem::path& path,
               std::span<const std::string> comments) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("cannot open '" + path.string() + "' for writing");
  f << kCsvHeader << '\n';
  std::vector<std::string> tail;
  char buf[512];
  for (const auto& r : records) {
    if (r.oom) {
      std::snprintf(buf, sizeof buf, "# oom mechanism=%s N=%zu",
                    std::string(mechanism_name(r.mechanism)).c_str(), r.n);
      tail.emplace_back(buf);
      continue;
    }
    std::snprintf(buf, sizeof buf,
                  "%s,%zu,%zu,%zu,%zu,%zu,%zu,%.6g,%.6g,%" PRIu64 ",%" PRIu64,
                  std::string(mechanism_name(r.mechanism)).c_str(), r.n, r.c,
                  r.heads, r.batch, r.iters, r.warmup_iters, r.mean_ms, r.std_ms,
                  r.peak_bytes, r.flops_est);
    f << buf << '\n';
  }
  for (const auto& c : comments) f << "# " << c << '\n';
  for (const auto& t : tail) f << t << '\n';
  if (!f) throw Error("write to '" + path.string() + "' failed");
}

std::vector<BenchRecord> read_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(f, line) || line != kCsvHeader) {
    throw DataError("'" + path.string() + "' does not start with the bench header");
  }
  std::vector<BenchRecord> out;
  std::size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cols.push_back(cell);
    if (cols.size() != 11) {
      throw DataError("line " + std::to_string(lineno) + ": expected 11 columns");
    }
    try {
      BenchRecord r;
      r.mechanism = parse_mechanism(cols[0]);
      r.n = std::stoull(cols[1]);
      r.c = std::stoull(cols[2]);
      r.heads = std::stoull(cols[3]);
      r.batch = std::stoull(cols[4]);
      r.iters = std::stoull(cols[5]);
      r.warmup_iters = std::stoull(cols[6]);
      r.mean_ms = std::stod(cols[7]);
      r.std_ms = std::stod(cols[8]);
      r.peak_bytes = std::stoull(cols[9]);
      r.flops_est = std::stoull(cols[10]);
      out.push_back(r);
    } catch (const std::logic_error&) {
      throw DataError("line " + std::to_string(lineno) + ": malformed value");
    } catch (const ConfigError&) {
      throw DataError("line " + std::to_string(lineno) + ": unknown mechanism");
    }
  }
  return out;
}

std::vector<std::filesystem::path> write_gnuplot(
    std::span<const BenchRecord> records, const std::filesystem::path& csv_path) {
  std::map<std::string, std::vector<const BenchRecord*>> by_mech;
  for (const auto& r : records) {
    if (!r.oom) by_mech[std::string(mechanism_name(r.mechanism))].push_back(&r);
  }
  std::vector<std::filesystem::path> written;
  for (const auto& [name, rows] : by_mech) {
    auto p = csv_path;
    p.replace_filename(csv_path.stem().string() + "_" + name + ".dat");
    std::ofstream f(p, std::ios::trunc);
    if (!f) throw Error("cannot open '" + p.string() + "' for writing");
    f << "# N mean_ms std_ms peak_bytes\n";
    char buf[256];
    for (const auto* r : rows) {
      std::snprintf(buf, sizeof buf, "%zu %.6g %.6g %" PRIu64, r->n, r->mean_ms,
                    r->std_ms, r->peak_bytes);
      f << buf << '\n';
    }
    written.push_back(p);
  }
  return written;
}

double time_slack() {
  const char* v = std::getenv(kTimeSlackEnv);
  if (v == nullptr || *v == '\0') return 0.0;
  char* end = nullptr;
  const double s = std::strtod(v, &end);
  if (end == v || *end != '\0' || !(s >= 0.0) || !std::isfinite(s)) {
    throw ConfigError(std::string(kTimeSlackEnv) + " must be a non-negative number");
  }
  return s;
}

}  // namespace xvit
