#include <cstdio>
#include <fstream>

#include "doctest.h"
#include "hybridlm/bench.hpp"
#include "hybridlm/hybridize.hpp"
#include "test_util.hpp"

using namespace hybridlm;

namespace {

ModelConfig tiny_cfg() {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 32;
  c.n_heads = 4;
  c.n_kv_heads = 2;
  c.d_head = 8;
  c.vocab_size = 24;
  c.d_mlp = 48;
  c.max_seq = 256;
  return c;
}

MambaConfig tiny_mamba() {
  MambaConfig m;
  m.d_state = 8;
  m.n_ssm_heads = 4;
  m.d_head = 8;
  m.dt_rank = 4;
  return m;
}

}  // namespace

TEST_CASE("fit_growth recovers a linear growth law") {
  std::vector<double> lat;
  for (int t = 1; t <= 64; ++t) lat.push_back(2.5e-6 * t);
  GrowthFit fit = fit_growth(lat, 1);
  CHECK_FALSE(fit.degenerate);
  CHECK(std::abs(fit.exponent - 1.0) < 0.05);
  CHECK(fit.residual < 1e-9);
}

TEST_CASE("fit_growth flags a constant curve with exponent 0") {
  std::vector<double> lat(40, 3.0e-6);
  GrowthFit fit = fit_growth(lat, 1);
  CHECK(fit.degenerate);
  CHECK(fit.exponent == 0.0);
}

TEST_CASE("fit_growth needs at least 16 points") {
  std::vector<double> lat(15, 1.0);
  CHECK_THROWS_AS(fit_growth(lat, 1), ShapeError);
}

TEST_CASE("fit_growth recovers a quadratic law too") {
  std::vector<double> lat;
  for (int t = 1; t <= 64; ++t) lat.push_back(1e-8 * t * t);
  CHECK(std::abs(fit_growth(lat, 1).exponent - 2.0) < 0.05);
}

TEST_CASE("scenario validation") {
  BenchScenario s;
  s.repeats = 2;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s.repeats = 3;
  s.warmup = 0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("decode bench: memory curves follow the exact byte formulas") {
  Model mha = Model::init_random(tiny_cfg(), tiny_mamba(), 1);
  BenchScenario sc;
  sc.prompt_tokens = 1;
  sc.generate_tokens = 24;
  sc.repeats = 3;
  sc.warmup = 1;

  BenchResult r = run_decode_bench(mha, sc);
  CHECK(r.layout == "H1-0/2");
  CHECK(r.h == 0);
  REQUIRE(r.bytes_curve.size() == 24);
  const ModelConfig cfg = tiny_cfg();
  for (int g = 0; g < 24; ++g) {
    const size_t t = static_cast<size_t>(sc.prompt_tokens + g + 1);
    const size_t expect =
        static_cast<size_t>(cfg.n_layers) * 2 * cfg.n_kv_heads * cfg.d_head * t * 4;
    CHECK(r.bytes_curve[static_cast<size_t>(g)] == expect);
  }
  CHECK(r.peak_bytes == r.bytes_curve.back());
  CHECK(r.tokens_per_sec_median > 0.0);

  // pure SSM: byte-constant, exactly
  Model ssm = replace_layers(mha, {0, 1}, InitKind::kMil);
  BenchResult rs = run_decode_bench(ssm, sc);
  const MambaConfig mc = tiny_mamba();
  const size_t state_bytes =
      2 * (static_cast<size_t>(mc.channels()) * mc.d_state +
           static_cast<size_t>(mc.conv_width - 1) * mc.channels()) * 4;
  for (size_t b : rs.bytes_curve) CHECK(b == state_bytes);
  CHECK(rs.peak_bytes == state_bytes);
}

TEST_CASE("emit_report: exact schema, h-ascending rows, bit round-trip, valid SVG") {
  Model mha = Model::init_random(tiny_cfg(), tiny_mamba(), 2);
  Model ssm = replace_layers(mha, {0, 1}, InitKind::kMil);
  BenchScenario sc;
  sc.prompt_tokens = 1;
  sc.generate_tokens = 20;
  sc.repeats = 3;
  sc.warmup = 1;
  std::vector<BenchResult> results{run_decode_bench(ssm, sc), run_decode_bench(mha, sc)};

  const std::string csv_path = "/tmp/hlm_bench.csv";
  const std::string svg_path = "/tmp/hlm_bench.svg";
  std::map<std::string, double> acc{{"H1-0/2", 0.97}, {"H1-2/2", 0.9}};
  emit_report(results, acc, csv_path, svg_path);

  std::ifstream csv(csv_path);
  std::string header;
  std::getline(csv, header);
  CHECK(header == "layout,h,L,prompt,gen,tokens_per_sec_median,iqr,peak_bytes,exponent");
  std::string row1, row2;
  std::getline(csv, row1);
  std::getline(csv, row2);
  CHECK(row1.substr(0, 6) == "H1-0/2");  // sorted by h ascending
  CHECK(row2.substr(0, 6) == "H1-2/2");

  std::vector<BenchResult> parsed = parse_bench_csv(csv_path);
  REQUIRE(parsed.size() == 2);
  // order in file is h-ascending: parsed[0] is the all-MHA row
  CHECK(parsed[0].layout == results[1].layout);
  CHECK(parsed[0].h == results[1].h);
  CHECK(parsed[0].n_layers == results[1].n_layers);
  CHECK(parsed[0].prompt == results[1].prompt);
  CHECK(parsed[0].gen == results[1].gen);
  CHECK(parsed[0].tokens_per_sec_median == results[1].tokens_per_sec_median);  // bit-exact
  CHECK(parsed[0].tokens_per_sec_iqr == results[1].tokens_per_sec_iqr);
  CHECK(parsed[0].peak_bytes == results[1].peak_bytes);
  CHECK(parsed[0].fit.exponent == results[1].fit.exponent);
  CHECK(parsed[1].tokens_per_sec_median == results[0].tokens_per_sec_median);

  std::ifstream svg(svg_path);
  std::string content((std::istreambuf_iterator<char>(svg)), std::istreambuf_iterator<char>());
  CHECK(content.find("<svg") == 0);
  CHECK(content.find("</svg>") != std::string::npos);
  CHECK(content.find("circle") != std::string::npos);
  CHECK(content.find("H1-2/2") != std::string::npos);

  // single result still renders
  emit_report(std::vector<BenchResult>{results[0]}, {}, csv_path, svg_path);
  std::ifstream svg2(svg_path);
  std::string c2((std::istreambuf_iterator<char>(svg2)), std::istreambuf_iterator<char>());
  CHECK(c2.find("<svg") == 0);
  std::remove(csv_path.c_str());
  std::remove(svg_path.c_str());
}

TEST_CASE("pure SSM per-token latency is flat (10x position within 2x)") {
  Model mha = Model::init_random(tiny_cfg(), tiny_mamba(), 3);
  Model ssm = replace_layers(mha, {0, 1}, InitKind::kMil);
  BenchScenario sc;
  sc.prompt_tokens = 1;
  sc.generate_tokens = 200;
  sc.repeats = 5;
  sc.warmup = 2;
  BenchResult r = run_decode_bench(ssm, sc);
  const double early = r.latency_curve[14];   // position 16
  const double late = r.latency_curve[158];   // position 160
  INFO("early ", early, " late ", late);
  CHECK(late < 2.0 * early + 2e-6);
}
