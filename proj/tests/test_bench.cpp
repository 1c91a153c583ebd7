#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "xvit/bench.hpp"

using namespace xvit;
namespace fs = std::filesystem;

namespace {

std::vector<BenchRecord> synthetic(const std::vector<std::size_t>& ns,
                                   double (*f)(double)) {
  std::vector<BenchRecord> out;
  for (std::size_t n : ns) {
    BenchRecord r;
    r.n = n;
    r.mean_ms = f(static_cast<double>(n));
    r.peak_bytes = static_cast<std::uint64_t>(f(static_cast<double>(n)));
    out.push_back(r);
  }
  return out;
}

fs::path temp_file(const std::string& name) {
  return fs::temp_directory_path() / ("xvit_test_bench_" + name);
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("exact power laws fit exactly") {
  const std::vector<std::size_t> ns{256, 512, 1024, 2048, 4096};
  const auto lin = synthetic(ns, [](double n) { return 3.5 * n; });
  const auto fit1 = fit_scaling(lin, BenchField::mean_ms);
  CHECK(fit1.exponent == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(std::abs(fit1.exponent - 1.0) <= 1e-9);
  CHECK(fit1.r2 == doctest::Approx(1.0));
  CHECK(fit1.points == 5);
  const auto quad = synthetic(ns, [](double n) { return 0.25 * n * n; });
  CHECK(std::abs(fit_scaling(quad, BenchField::mean_ms).exponent - 2.0) <= 1e-9);
  CHECK(std::abs(fit_scaling(quad, BenchField::peak_bytes).exponent - 2.0) <= 1e-9);
}

TEST_CASE("a quadratic-dominated mixture fits between 1.8 and 2") {
  // a = 100, b = 1: b N >= 25 a over the whole range
  const auto mix = synthetic({2500, 5000, 10000, 20000, 40000},
                             [](double n) { return 100.0 * n + n * n; });
  const double e = fit_scaling(mix, BenchField::mean_ms).exponent;
  CHECK(e > 1.8);
  CHECK(e < 2.0);
}

TEST_CASE("fit preconditions") {
  const auto three = synthetic({256, 1024, 4096}, [](double n) { return n; });
  CHECK_THROWS_AS(fit_scaling(three, BenchField::mean_ms), DataError);
  const auto narrow = synthetic({100, 200, 300, 400, 700}, [](double n) { return n; });
  CHECK_THROWS_AS(fit_scaling(narrow, BenchField::mean_ms), DataError);
  auto zero = synthetic({256, 512, 1024, 2048}, [](double n) { return n; });
  zero[2].mean_ms = 0.0;
  CHECK_THROWS_AS(fit_scaling(zero, BenchField::mean_ms), DataError);
  auto withoom = synthetic({256, 512, 1024, 2048}, [](double n) { return n; });
  withoom[3].oom = true;
  CHECK_THROWS_AS(fit_scaling(withoom, BenchField::mean_ms), DataError);
}

TEST_CASE("csv header, rows and round trip") {
  const auto path = temp_file("rt.csv");
  write_csv({}, path);
  CHECK(slurp(path) == std::string(kCsvHeader) + "\n");

  BenchRecord a;
  a.mechanism = Mechanism::softmax;
  a.n = 512;
  a.c = 192;
  a.heads = 4;
  a.batch = 2;
  a.iters = 10;
  a.warmup_iters = 3;
  a.mean_ms = 1.234567891;
  a.std_ms = 0.0123456789;
  a.peak_bytes = 123456789012ULL;
  a.flops_est = 987654321098ULL;
  BenchRecord b = a;
  b.mechanism = Mechanism::xnorm;
  b.n = 1024;
  b.mean_ms = 2e-5;
  const std::string notes[] = {"note one"};
  write_csv(std::vector<BenchRecord>{a, b}, path, notes);
  const std::string text = slurp(path);
  CHECK(text.rfind(std::string(kCsvHeader) + "\nsoftmax,512,192,4,2,10,3,1.23457,0.0123457,"
                   "123456789012,987654321098\n", 0) == 0);
  CHECK(text.find("# note one\n") != std::string::npos);
  CHECK(text.back() == '\n');

  const auto back = read_csv(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].mechanism == Mechanism::softmax);
  CHECK(back[0].n == 512);
  CHECK(back[0].batch == 2);
  CHECK(back[0].mean_ms == doctest::Approx(a.mean_ms).epsilon(1e-5));
  CHECK(back[0].peak_bytes == a.peak_bytes);
  CHECK(back[0].flops_est == a.flops_est);
  CHECK(back[1].mechanism == Mechanism::xnorm);
  CHECK(back[1].mean_ms == doctest::Approx(2e-5).epsilon(1e-5));
  fs::remove(path);
}

TEST_CASE("read_csv rejects foreign files") {
  const auto path = temp_file("bad.csv");
  {
    std::ofstream f(path);
    f << "N,mechanism\n1,xnorm\n";
  }
  CHECK_THROWS_AS(read_csv(path), DataError);
  {
    std::ofstream f(path);
    f << kCsvHeader << "\nxnorm,1,2\n";
  }
  CHECK_THROWS_AS(read_csv(path), DataError);
  fs::remove(path);
}

TEST_CASE("run_bench smoke") {
  BenchOptions o;
  o.dim = 8;
  o.heads = 2;
  o.iters = 1;
  o.warmup = 0;
  const std::size_t ns[] = {4};
  for (Mechanism m : {Mechanism::xnorm, Mechanism::softmax}) {
    const auto recs = run_bench(m, ns, o);
    REQUIRE(recs.size() == 1);
    CHECK(recs[0].mean_ms > 0.0);
    CHECK(recs[0].peak_bytes > 0);
    CHECK(recs[0].std_ms == 0.0);
    CHECK(recs[0].flops_est == attention_flops(m, 4, 4, 8, 2));
  }
}

TEST_CASE("peak bytes are deterministic and xnorm stays below softmax") {
  BenchOptions o;
  o.dim = 32;
  o.heads = 4;
  o.iters = 2;
  o.warmup = 1;
  const std::size_t ns[] = {256, 1024};
  const auto x1 = run_bench(Mechanism::xnorm, ns, o);
  const auto x2 = run_bench(Mechanism::xnorm, ns, o);
  const auto s = run_bench(Mechanism::softmax, ns, o);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(x1[i].peak_bytes == x2[i].peak_bytes);
    CHECK(x1[i].peak_bytes < s[i].peak_bytes);
  }
  CHECK(x1[0].peak_bytes <= x1[1].peak_bytes);
  CHECK(s[0].peak_bytes <= s[1].peak_bytes);
  CHECK(x1[0].std_ms >= 0.0);
}

TEST_CASE("batch scales memory and flops") {
  BenchOptions o;
  o.dim = 16;
  o.heads = 2;
  o.iters = 1;
  o.warmup = 0;
  const std::size_t ns[] = {64};
  const auto one = run_bench(Mechanism::softmax, ns, o);
  o.batch = 3;
  const auto three = run_bench(Mechanism::softmax, ns, o);
  CHECK(three[0].flops_est == 3 * one[0].flops_est);
  CHECK(three[0].peak_bytes > one[0].peak_bytes);
}

TEST_CASE("memory limit flags the record and stops the sweep") {
  BenchOptions o;
  o.dim = 16;
  o.heads = 2;
  o.iters = 1;
  o.warmup = 0;
  o.memory_limit = alloc_stats().live_bytes + 2'000'000;
  const std::size_t ns[] = {64, 256, 1024, 4096};
  const auto recs = run_bench(Mechanism::softmax, ns, o);
  REQUIRE(recs.size() == 3);
  CHECK_FALSE(recs[0].oom);
  CHECK_FALSE(recs[1].oom);
  CHECK(recs[2].oom);
  CHECK(recs[2].n == 1024);
  // the limit is lifted afterwards
  CHECK_NOTHROW(Tensor::zeros({1 << 20}));
}

TEST_CASE("full-model benchmarking needs square token counts") {
  BenchOptions o;
  o.dim = 16;
  o.heads = 2;
  o.iters = 1;
  o.warmup = 0;
  o.full_model = true;
  const std::size_t ok[] = {4};
  const auto recs = run_bench(Mechanism::xnorm, ok, o);
  REQUIRE(recs.size() == 1);
  ModelConfig cfg = o.model;
  cfg.embed_dim = 16;
  cfg.heads = 2;
  cfg.image_size = 2 * cfg.patch_stride;
  CHECK(recs[0].flops_est == count_flops(cfg, cfg.image_size));
  const std::size_t bad[] = {5};
  CHECK_THROWS_AS(run_bench(Mechanism::xnorm, bad, o), ConfigError);
}

TEST_CASE("gnuplot files, one per mechanism") {
  const auto path = temp_file("g.csv");
  BenchRecord a;
  a.n = 8;
  a.mean_ms = 1;
  a.peak_bytes = 10;
  BenchRecord b = a;
  b.mechanism = Mechanism::softmax;
  const auto files = write_gnuplot(std::vector<BenchRecord>{a, b}, path);
  REQUIRE(files.size() == 2);
  CHECK(slurp(files[0]).find("8 1 0 10") != std::string::npos);
  for (const auto& f : files) fs::remove(f);
}

TEST_CASE("time slack comes from the environment") {
  ::unsetenv(kTimeSlackEnv);
  CHECK(time_slack() == 0.0);
  ::setenv(kTimeSlackEnv, "0.25", 1);
  CHECK(time_slack() == 0.25);
  ::setenv(kTimeSlackEnv, "lots", 1);
  CHECK_THROWS_AS(time_slack(), ConfigError);
  ::unsetenv(kTimeSlackEnv);
}
