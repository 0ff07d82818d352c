#pragma once

#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "hybridlm/transformer.hpp"

namespace hybridlm {

// One decode measurement: short prompt, long generation (the shape of the
// workload the hybrids target).
struct BenchScenario {
  int prompt_tokens = 1;
  int generate_tokens = 512;
  int repeats = 5;
  int warmup = 1;
  void validate() const;  // repeats >= 3, warmup >= 1
};

struct GrowthFit {
  double exponent = 0.0;
  double residual = 0.0;    // RMS of log-space fit errors
  bool degenerate = false;  // constant curve: exponent forced to 0
};

struct BenchResult {
  std::string layout;  // "H1-h/L"
  int h = 0, n_layers = 0;
  int prompt = 0, gen = 0;
  double tokens_per_sec_median = 0.0;
  double tokens_per_sec_iqr = 0.0;
  std::vector<double> latency_curve;  // per position, median over repeats, seconds
  std::vector<size_t> bytes_curve;    // cache+state bytes after each position
  size_t peak_bytes = 0;
  GrowthFit fit;
  double held_out_accuracy = std::nan("");

  static std::string csv_header();  // layout,h,L,prompt,gen,tokens_per_sec_median,iqr,peak_bytes,exponent
  std::string csv_row() const;
};

// Wall-clock decode benchmark; timing covers token generation only. Memory
// numbers are the exact byte formulas, not estimates. Out-of-memory surfaces
// as NumericError naming the position reached.
BenchResult run_decode_bench(const Model& model, const BenchScenario& scenario);

// Log-log least squares of latency vs absolute context position over the tail
// half of the curve. Needs >= 16 points. A constant curve is flagged
// degenerate with exponent 0.
GrowthFit fit_growth(std::span<const double> latency, int first_position = 1);

// CSV per layout (h ascending) plus a self-contained SVG scatter of
// throughput vs held-out accuracy.
void emit_report(std::span<const BenchResult> results,
                 const std::map<std::string, double>& accuracy_by_layout,
                 const std::string& csv_path, const std::string& svg_path);

std::vector<BenchResult> parse_bench_csv(const std::string& path);  // summary fields only
std::string render_scatter_svg(std::span<const BenchResult> results,
                               const std::map<std::string, double>& accuracy_by_layout);

}  // namespace hybridlm
