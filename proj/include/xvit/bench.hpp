#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "xvit/attention.hpp"
#include "xvit/model.hpp"

namespace xvit {

struct BenchRecord {
  Mechanism mechanism = Mechanism::xnorm;
  std::size_t n = 0;  // tokens
  std::size_t c = 0;
  std::size_t heads = 0;
  std::size_t batch = 1;
  std::size_t iters = 0;
  std::size_t warmup_iters = 0;
  double mean_ms = 0.0;
  double std_ms = 0.0;
  double median_ms = 0.0;   // not part of the CSV schema
  std::uint64_t peak_bytes = 0;
  std::uint64_t flops_est = 0;
  bool oom = false;         // allocation limit hit; timing fields are unset
};

struct BenchOptions {
  std::size_t dim = 192;
  std::size_t heads = 4;
  std::size_t batch = 1;
  std::size_t iters = 10;
  std::size_t warmup = 3;
  std::uint64_t seed = 0;
  // Keep per-head intermediates alive, as a forward pass that feeds a
  // backward pass would.
  bool retain = true;
  // Time model_forward on `model` (embed_dim/heads overridden) instead of
  // the attention op alone. N must be a perfect square.
  bool full_model = false;
  ModelConfig model = named_config("nano");
  // Tracker limit on live bytes while one N runs; 0 = none.
  std::uint64_t memory_limit = 0;
};

// One record per N, in order. peak_bytes is the tracker high-water mark over
// the measured iterations minus the bytes live when they started (inputs and
// parameters). An N that exceeds memory_limit yields a record with oom set
// and ends the sweep.
std::vector<BenchRecord> run_bench(Mechanism m, std::span<const std::size_t> ns,
                                   const BenchOptions& opts);

enum class BenchField { mean_ms, peak_bytes };
std::string_view field_name(BenchField f);
BenchField parse_field(std::string_view name);

struct ScalingFit {
  double exponent = 0.0;
  double intercept = 0.0;  // natural log
  double r2 = 0.0;
  std::size_t points = 0;
};

// OLS of log(field) on log(N). Needs >= 4 distinct N spanning >= 8x; oom
// records are ignored. Throws DataError otherwise or on non-positive values.
ScalingFit fit_scaling(std::span<const BenchRecord> records, BenchField field);
ScalingFit fit_power_law(std::span<const double> x, std::span<const double> y);

inline constexpr std::string_view kCsvHeader =
    "mechanism,N,C,heads,batch,iters,warmup_iters,mean_ms,std_ms,peak_bytes,"
    "flops_est";

// Comments go after the rows as '# ' lines. oom records become comments.
void write_csv(std::span<const BenchRecord> records,
               const std::filesystem::path& path,
               std::span<const std::string> comments = {});
std::vector<BenchRecord> read_csv(const std::filesystem::path& path);

// "<path stem>_<mechanism>.dat": whitespace-separated N mean_ms std_ms
// peak_bytes, one file per mechanism present.
std::vector<std::filesystem::path> write_gnuplot(
    std::span<const BenchRecord> records, const std::filesystem::path& csv_path);

// Widening applied to time-exponent thresholds, from XVIT_BENCH_TIME_SLACK.
// Memory thresholds are never widened.
inline constexpr const char* kTimeSlackEnv = "XVIT_BENCH_TIME_SLACK";
double time_slack();

}  // namespace xvit
