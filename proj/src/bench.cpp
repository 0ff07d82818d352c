#include "hybridlm/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <new>
#include <sstream>

#include "hybridlm/decode.hpp"

namespace hybridlm {

void BenchScenario::validate() const {
  if (prompt_tokens < 1) throw ConfigError("bench scenario: prompt_tokens must be >= 1");
  if (generate_tokens < 1) throw ConfigError("bench scenario: generate_tokens must be >= 1");
  if (repeats < 3) throw ConfigError("bench scenario: repeats must be >= 3");
  if (warmup < 1) throw ConfigError("bench scenario: warmup must be >= 1");
}

namespace {

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double iqr_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  auto quantile = [&](double q) {
    const double idx = q * (static_cast<double>(v.size()) - 1.0);
    const size_t lo = static_cast<size_t>(idx);
    const size_t hi = std::min(lo + 1, v.size() - 1);
    const double frac = idx - static_cast<double>(lo);
    return v[lo] * (1.0 - frac) + v[hi] * frac;
  };
  return quantile(0.75) - quantile(0.25);
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

BenchResult run_decode_bench(const Model& model, const BenchScenario& scenario) {
  scenario.validate();
  const ModelConfig& cfg = model.cfg;
  if (scenario.prompt_tokens + scenario.generate_tokens > cfg.max_seq)
    throw ConfigError("bench scenario: prompt+generate exceeds model max_seq");

  BenchResult res;
  res.layout = model.layout.name();
  res.h = model.layout.mamba_count();
  res.n_layers = model.cfg.n_layers;
  res.prompt = scenario.prompt_tokens;
  res.gen = scenario.generate_tokens;

  // fixed prompt: BOS then a deterministic data pattern
  std::vector<int32_t> prompt(static_cast<size_t>(scenario.prompt_tokens), 0);
  for (int i = 1; i < scenario.prompt_tokens; ++i)
    prompt[static_cast<size_t>(i)] = 4 + (i - 1) % std::max(1, cfg.vocab_size - 4);

  const int gen = scenario.generate_tokens;
  std::vector<std::vector<double>> lat_per_repeat;
  std::vector<double> tps_per_repeat;
  res.bytes_curve.assign(static_cast<size_t>(gen), 0);

  using Clock = std::chrono::steady_clock;
  int position_reached = 0;
  try {
    for (int rep = 0; rep < scenario.warmup + scenario.repeats; ++rep) {
      const bool timed = rep >= scenario.warmup;
      Decoder dec(model);
      int32_t cur = prompt[0];
      const std::vector<float>* logits = nullptr;
      for (int i = 0; i < scenario.prompt_tokens; ++i) {
        logits = &dec.step(prompt[static_cast<size_t>(i)]);  // prefill, untimed
        position_reached = dec.position();
      }
      std::vector<double> lat(static_cast<size_t>(gen), 0.0);
      double total = 0.0;
      for (int g = 0; g < gen; ++g) {
        cur = static_cast<int32_t>(
            std::max_element(logits->begin(), logits->end()) - logits->begin());
        const auto t0 = Clock::now();
        logits = &dec.step(cur);
        const auto t1 = Clock::now();
        position_reached = dec.position();
        const double dt = std::chrono::duration<double>(t1 - t0).count();
        lat[static_cast<size_t>(g)] = dt;
        total += dt;
        if (timed) res.bytes_curve[static_cast<size_t>(g)] = dec.state_bytes();
      }
      if (timed) {
        lat_per_repeat.push_back(std::move(lat));
        tps_per_repeat.push_back(static_cast<double>(gen) / total);
      }
    }
  } catch (const std::bad_alloc&) {
    throw NumericError("decode bench: out of memory at position " +
                       std::to_string(position_reached));
  }

  res.latency_curve.assign(static_cast<size_t>(gen), 0.0);
  std::vector<double> col(lat_per_repeat.size());
  for (int g = 0; g < gen; ++g) {
    for (size_t r = 0; r < lat_per_repeat.size(); ++r) col[r] = lat_per_repeat[r][static_cast<size_t>(g)];
    res.latency_curve[static_cast<size_t>(g)] = median_of(col);
  }
  res.tokens_per_sec_median = median_of(tps_per_repeat);
  res.tokens_per_sec_iqr = iqr_of(tps_per_repeat);
  res.peak_bytes = *std::max_element(res.bytes_curve.begin(), res.bytes_curve.end());
  res.fit = fit_growth(res.latency_curve, scenario.prompt_tokens + 1);
  return res;
}

GrowthFit fit_growth(std::span<const double> latency, int first_position) {
  if (latency.size() < 16)
    throw ShapeError("fit_growth: need at least 16 points, got " + std::to_string(latency.size()));
  const size_t n = latency.size();
  const size_t start = n / 2;  // tail half
  GrowthFit fit;

  double lo = latency[start], hi = latency[start];
  for (size_t i = start; i < n; ++i) {
    lo = std::min(lo, latency[i]);
    hi = std::max(hi, latency[i]);
  }
  if (hi - lo <= 1e-15) {
    fit.degenerate = true;
    return fit;  // exponent 0, flagged
  }

  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double m = static_cast<double>(n - start);
  for (size_t i = start; i < n; ++i) {
    const double x = std::log(static_cast<double>(first_position + static_cast<int>(i)));
    const double y = std::log(std::max(latency[i], 1e-12));
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double denom = m * sxx - sx * sx;
  if (std::abs(denom) < 1e-12) {
    fit.degenerate = true;
    return fit;
  }
  fit.exponent = (m * sxy - sx * sy) / denom;
  const double intercept = (sy - fit.exponent * sx) / m;
  double ss = 0;
  for (size_t i = start; i < n; ++i) {
    const double x = std::log(static_cast<double>(first_position + static_cast<int>(i)));
    const double y = std::log(std::max(latency[i], 1e-12));
    const double e = y - (intercept + fit.exponent * x);
    ss += e * e;
  }
  fit.residual = std::sqrt(ss / m);
  return fit;
}

std::string BenchResult::csv_header() {
  return "layout,h,L,prompt,gen,tokens_per_sec_median,iqr,peak_bytes,exponent";
}

std::string BenchResult::csv_row() const {
  std::ostringstream os;
  os << layout << ',' << h << ',' << n_layers << ',' << prompt << ',' << gen << ','
     << fmt_double(tokens_per_sec_median) << ',' << fmt_double(tokens_per_sec_iqr) << ','
     << peak_bytes << ',' << fmt_double(fit.exponent);
  return os.str();
}

void emit_report(std::span<const BenchResult> results,
                 const std::map<std::string, double>& accuracy_by_layout,
                 const std::string& csv_path, const std::string& svg_path) {
  if (results.empty()) throw ShapeError("emit_report: no results");
  std::vector<const BenchResult*> sorted;
  for (const BenchResult& r : results) sorted.push_back(&r);
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const BenchResult* a, const BenchResult* b) { return a->h < b->h; });

  std::ofstream csv(csv_path);
  if (!csv) throw IoError("emit_report: cannot open " + csv_path);
  csv << BenchResult::csv_header() << '\n';
  for (const BenchResult* r : sorted) csv << r->csv_row() << '\n';
  if (!csv) throw IoError("emit_report: write failed for " + csv_path);

  std::ofstream svg(svg_path);
  if (!svg) throw IoError("emit_report: cannot open " + svg_path);
  std::vector<BenchResult> view;
  for (const BenchResult* r : sorted) view.push_back(*r);
  svg << render_scatter_svg(view, accuracy_by_layout);
  if (!svg) throw IoError("emit_report: write failed for " + svg_path);
}

std::string render_scatter_svg(std::span<const BenchResult> results,
                               const std::map<std::string, double>& accuracy_by_layout) {
  const int w = 640, h = 480, ml = 70, mr = 20, mt = 30, mb = 50;
  double tmin = 1e300, tmax = -1e300;
  double amin = 0.0, amax = 1.0;
  struct Point {
    double tps, acc;
    std::string label;
  };
  std::vector<Point> pts;
  for (const BenchResult& r : results) {
    double acc = r.held_out_accuracy;
    auto it = accuracy_by_layout.find(r.layout);
    if (it != accuracy_by_layout.end()) acc = it->second;
    if (std::isnan(acc)) acc = 0.0;
    pts.push_back({r.tokens_per_sec_median, acc, r.layout});
    tmin = std::min(tmin, r.tokens_per_sec_median);
    tmax = std::max(tmax, r.tokens_per_sec_median);
  }
  if (tmax <= tmin) {
    tmin *= 0.9;
    tmax = tmin <= 0 ? 1.0 : tmax * 1.1 + 1.0;
  }
  auto sx = [&](double t) { return ml + (t - tmin) / (tmax - tmin) * (w - ml - mr); };
  auto sy = [&](double a) { return h - mb - (a - amin) / (amax - amin) * (h - mt - mb); };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
     << "\" viewBox=\"0 0 " << w << " " << h << "\">\n";
  os << "  <rect width=\"" << w << "\" height=\"" << h << "\" fill=\"white\"/>\n";
  os << "  <line x1=\"" << ml << "\" y1=\"" << h - mb << "\" x2=\"" << w - mr << "\" y2=\""
     << h - mb << "\" stroke=\"black\"/>\n";
  os << "  <line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << h - mb
     << "\" stroke=\"black\"/>\n";
  os << "  <text x=\"" << (ml + w - mr) / 2 << "\" y=\"" << h - 12
     << "\" text-anchor=\"middle\" font-size=\"14\">decode throughput (tokens/s)</text>\n";
  os << "  <text x=\"18\" y=\"" << (mt + h - mb) / 2
     << "\" text-anchor=\"middle\" font-size=\"14\" transform=\"rotate(-90 18 "
     << (mt + h - mb) / 2 << ")\">held-out accuracy</text>\n";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.3g", tmin);
  os << "  <text x=\"" << ml << "\" y=\"" << h - mb + 18 << "\" font-size=\"11\">" << buf
     << "</text>\n";
  std::snprintf(buf, sizeof(buf), "%.3g", tmax);
  os << "  <text x=\"" << w - mr - 30 << "\" y=\"" << h - mb + 18 << "\" font-size=\"11\">" << buf
     << "</text>\n";
  os << "  <text x=\"" << ml - 30 << "\" y=\"" << h - mb << "\" font-size=\"11\">0</text>\n";
  os << "  <text x=\"" << ml - 30 << "\" y=\"" << mt + 6 << "\" font-size=\"11\">1</text>\n";
  for (const Point& p : pts) {
    os << "  <circle cx=\"" << sx(p.tps) << "\" cy=\"" << sy(p.acc)
       << "\" r=\"5\" fill=\"steelblue\"/>\n";
    os << "  <text x=\"" << sx(p.tps) + 8 << "\" y=\"" << sy(p.acc) - 6 << "\" font-size=\"12\">"
       << p.label << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::vector<BenchResult> parse_bench_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("parse_bench_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw IoError("parse_bench_csv: empty file " + path);
  if (line != BenchResult::csv_header())
    throw IoError("parse_bench_csv: unexpected header in " + path);
  std::vector<BenchResult> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string field;
    BenchResult r;
    std::getline(ls, r.layout, ',');
    auto next = [&]() {
      if (!std::getline(ls, field, ',')) throw IoError("parse_bench_csv: short row in " + path);
      return field;
    };
    r.h = std::stoi(next());
    r.n_layers = std::stoi(next());
    r.prompt = std::stoi(next());
    r.gen = std::stoi(next());
    r.tokens_per_sec_median = std::stod(next());
    r.tokens_per_sec_iqr = std::stod(next());
    r.peak_bytes = static_cast<size_t>(std::stoull(next()));
    r.fit.exponent = std::stod(next());
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace hybridlm
