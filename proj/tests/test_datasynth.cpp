#include <cmath>
#include <cstdio>
#include <map>
#include <set>

#include "doctest.h"
#include "hybridlm/datasynth.hpp"

using namespace hybridlm;

namespace {

TaskSpec make_spec(TaskKind kind, int vocab = 32, int seq = 24, uint64_t seed = 5) {
  TaskSpec s;
  s.kind = kind;
  s.vocab_size = vocab;
  s.seq_len = seq;
  s.seed = seed;
  return s;
}

// upper-tail chi^2 critical value at p = 0.01 (Wilson-Hilferty)
double chi2_crit_p01(int dof) {
  const double z = 2.3263478740;  // z_{0.99}
  const double a = 2.0 / (9.0 * dof);
  const double t = 1.0 - a + z * std::sqrt(a);
  return dof * t * t * t;
}

}  // namespace

TEST_CASE("copy task structure: prompt, separator, answer, mask") {
  TaskSpec spec = make_spec(TaskKind::kCopy);
  SeqSample s = generate_one(spec, Split::kTrain, 0);
  const int k = (spec.seq_len - 2) / 2;
  REQUIRE(static_cast<int>(s.tokens.size()) == spec.seq_len);
  CHECK(s.tokens[0] == kTokBos);
  CHECK(s.tokens[static_cast<size_t>(1 + k)] == kTokSep);
  for (int i = 0; i < k; ++i) {
    CHECK(s.tokens[static_cast<size_t>(1 + i)] >= kDataStart);
    CHECK(s.tokens[static_cast<size_t>(2 + k + i)] == s.tokens[static_cast<size_t>(1 + i)]);
    CHECK(s.answer_mask[static_cast<size_t>(2 + k + i)] == 1);
  }
  // mask covers only the answer span
  int masked = 0;
  for (uint8_t m : s.answer_mask) masked += m;
  CHECK(masked == k);
  for (int i = 0; i <= 1 + k; ++i) CHECK(s.answer_mask[static_cast<size_t>(i)] == 0);
}

TEST_CASE("reverse task reverses the payload") {
  TaskSpec spec = make_spec(TaskKind::kReverse);
  SeqSample s = generate_one(spec, Split::kTrain, 3);
  const int k = (spec.seq_len - 2) / 2;
  for (int i = 0; i < k; ++i)
    CHECK(s.tokens[static_cast<size_t>(2 + k + i)] == s.tokens[static_cast<size_t>(k - i)]);
}

TEST_CASE("generation is a pure function of the spec") {
  TaskSpec spec = make_spec(TaskKind::kAssocRecall);
  SeqSample a = generate_one(spec, Split::kTrain, 11);
  SeqSample b = generate_one(spec, Split::kTrain, 11);
  CHECK(a.tokens == b.tokens);
  CHECK(a.answer_mask == b.answer_mask);
  SeqSample c = generate_one(spec, Split::kTrain, 12);
  CHECK(a.tokens != c.tokens);
}

TEST_CASE("associative recall against an independent dictionary-replay oracle") {
  TaskSpec spec = make_spec(TaskKind::kAssocRecall, 40, 20, 9);
  const int n = (spec.seq_len - 4) / 2;
  for (uint64_t i = 0; i < 1000; ++i) {
    SeqSample s = generate_one(spec, i % 2 ? Split::kTrain : Split::kHeldOut, i);
    std::map<int32_t, int32_t> bindings;
    for (int j = 0; j < n; ++j) {
      const int32_t key = s.tokens[static_cast<size_t>(1 + 2 * j)];
      const int32_t val = s.tokens[static_cast<size_t>(2 + 2 * j)];
      CHECK(bindings.emplace(key, val).second);  // keys are distinct
      bindings[key] = val;
    }
    CHECK(s.tokens[static_cast<size_t>(2 * n + 1)] == kTokQuery);
    const int32_t qkey = s.tokens[static_cast<size_t>(2 * n + 2)];
    REQUIRE(bindings.count(qkey) == 1);
    CHECK(s.tokens[static_cast<size_t>(2 * n + 3)] == bindings[qkey]);
    CHECK(s.answer_mask[static_cast<size_t>(2 * n + 3)] == 1);
  }
}

TEST_CASE("modular arithmetic triples are consistent") {
  TaskSpec spec = make_spec(TaskKind::kModularArithmetic, 20, 25, 4);
  const int m = spec.vocab_size - kDataStart;
  SeqSample s = generate_one(spec, Split::kTrain, 7);
  const int nt = (spec.seq_len - 1) / 3;
  for (int i = 0; i < nt; ++i) {
    const int a = s.tokens[static_cast<size_t>(1 + 3 * i)] - kDataStart;
    const int b = s.tokens[static_cast<size_t>(1 + 3 * i + 1)] - kDataStart;
    const int c = s.tokens[static_cast<size_t>(1 + 3 * i + 2)] - kDataStart;
    CHECK(c == (a + b) % m);
    CHECK(s.answer_mask[static_cast<size_t>(1 + 3 * i + 2)] == 1);
  }
}

TEST_CASE("train and held-out splits are disjoint") {
  TaskSpec spec = make_spec(TaskKind::kCopy, 32, 16, 21);
  std::set<std::vector<int32_t>> train;
  for (uint64_t i = 0; i < 400; ++i) train.insert(generate_one(spec, Split::kTrain, i).tokens);
  for (uint64_t i = 0; i < 400; ++i)
    CHECK(train.count(generate_one(spec, Split::kHeldOut, i).tokens) == 0);
}

TEST_CASE("stream batches are deterministic and respect the split") {
  TaskSpec spec = make_spec(TaskKind::kCharLm, 24, 20, 30);
  BatchStream a(spec, Split::kTrain, 4);
  BatchStream b(spec, Split::kTrain, 4);
  auto ba = a.next();
  auto bb = b.next();
  REQUIRE(ba.size() == 4);
  for (size_t i = 0; i < 4; ++i) CHECK(ba[i].tokens == bb[i].tokens);
  auto ba2 = a.next();
  CHECK(ba2[0].tokens != ba[0].tokens);
}

TEST_CASE("streamed token histograms match the expected distribution (chi^2 p > 0.01)") {
  for (TaskKind kind : {TaskKind::kCopy, TaskKind::kAssocRecall, TaskKind::kModularArithmetic,
                        TaskKind::kCharLm}) {
    TaskSpec spec = make_spec(kind, 28, 22, 77);
    std::vector<double> expected = expected_histogram(spec);
    std::vector<int64_t> counts(static_cast<size_t>(spec.vocab_size), 0);
    BatchStream stream(spec, Split::kTrain, 8);
    int64_t total = 0;
    while (total < 10000) {
      for (const SeqSample& s : stream.next()) {
        for (int32_t t : s.tokens) ++counts[static_cast<size_t>(t)];
        total += spec.seq_len;
      }
    }
    // pool bins with expected count < 5
    double chi2 = 0.0;
    int dof = -1;
    double pooled_e = 0.0;
    int64_t pooled_o = 0;
    for (int v = 0; v < spec.vocab_size; ++v) {
      const double e = expected[static_cast<size_t>(v)] * static_cast<double>(total);
      const auto o = counts[static_cast<size_t>(v)];
      if (e < 5.0) {
        pooled_e += e;
        pooled_o += o;
        continue;
      }
      chi2 += (o - e) * (o - e) / e;
      ++dof;
    }
    if (pooled_e >= 5.0) {
      chi2 += (pooled_o - pooled_e) * (pooled_o - pooled_e) / pooled_e;
      ++dof;
    } else {
      CHECK(pooled_o <= 16);  // nothing should land in near-zero-probability bins
    }
    REQUIRE(dof >= 1);
    INFO("task ", task_kind_name(kind), " chi2 ", chi2, " dof ", dof, " crit ",
         chi2_crit_p01(dof));
    CHECK(chi2 < chi2_crit_p01(dof));
  }
}

TEST_CASE("binary export round-trips") {
  TaskSpec spec = make_spec(TaskKind::kCopy, 32, 12, 55);
  const std::string path = "/tmp/hlm_test_export.bin";
  export_split(spec, Split::kHeldOut, 32, path);
  auto [loaded_spec, seqs] = import_split(path);
  CHECK(loaded_spec.kind == spec.kind);
  CHECK(loaded_spec.vocab_size == spec.vocab_size);
  CHECK(loaded_spec.seq_len == spec.seq_len);
  REQUIRE(seqs.size() == 32);
  for (uint64_t i = 0; i < 32; ++i)
    CHECK(seqs[static_cast<size_t>(i)] == generate_one(spec, Split::kHeldOut, i).tokens);
  std::remove(path.c_str());
}

TEST_CASE("invalid specs are rejected") {
  TaskSpec s = make_spec(TaskKind::kCopy, 5, 24);  // vocab too small
  CHECK_THROWS_AS(s.validate(), ConfigError);
  TaskSpec tiny = make_spec(TaskKind::kAssocRecall, 32, 60);
  // 28 data tokens -> 14 keys, but 28 pairs needed
  CHECK_THROWS_WITH_AS(tiny.validate(), doctest::Contains("vocab too small"), ConfigError);
  TaskSpec short_seq = make_spec(TaskKind::kCopy, 32, 3);
  CHECK_THROWS_AS(short_seq.validate(), ConfigError);
}
