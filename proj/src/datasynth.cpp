#include "hybridlm/datasynth.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace hybridlm {

const char* task_kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::kCopy: return "copy";
    case TaskKind::kReverse: return "reverse";
    case TaskKind::kAssocRecall: return "assoc_recall";
    case TaskKind::kModularArithmetic: return "modular_arithmetic";
    case TaskKind::kCharLm: return "char_lm";
  }
  return "?";
}

TaskKind task_kind_from_name(const std::string& name) {
  if (name == "copy") return TaskKind::kCopy;
  if (name == "reverse") return TaskKind::kReverse;
  if (name == "assoc_recall") return TaskKind::kAssocRecall;
  if (name == "modular_arithmetic") return TaskKind::kModularArithmetic;
  if (name == "char_lm") return TaskKind::kCharLm;
  throw ConfigError("unknown task kind '" + name + "'");
}

uint64_t fnv1a64(const void* data, size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  uint64_t h = 0xcbf29ce484222325ULL;
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {

int data_range(const TaskSpec& s) { return s.vocab_size - kDataStart; }

// structure helpers ---------------------------------------------------------

int copy_payload(const TaskSpec& s) { return (s.seq_len - 2) / 2; }

int assoc_pairs(const TaskSpec& s) { return (s.seq_len - 4) / 2; }
int assoc_keys(const TaskSpec& s) { return data_range(s) / 2; }

int modular_triples(const TaskSpec& s) { return (s.seq_len - 1) / 3; }

}  // namespace

void TaskSpec::validate() const {
  if (vocab_size < kDataStart + 2)
    throw ConfigError("task spec: vocab too small for task, need at least " +
                      std::to_string(kDataStart + 2) + " tokens");
  if (seq_len < 2) throw ConfigError("task spec: seq_len must be >= 2");
  if (count < 1) throw ConfigError("task spec: count must be >= 1");
  switch (kind) {
    case TaskKind::kCopy:
    case TaskKind::kReverse:
      if (copy_payload(*this) < 1)
        throw ConfigError("task spec: seq_len too short for copy payload");
      break;
    case TaskKind::kAssocRecall: {
      if (assoc_pairs(*this) < 1) throw ConfigError("task spec: seq_len too short for recall pairs");
      if (assoc_keys(*this) < 2 || data_range(*this) - assoc_keys(*this) < 2)
        throw ConfigError("task spec: vocab too small for task (need >= 2 keys and 2 values)");
      if (assoc_pairs(*this) > assoc_keys(*this))
        throw ConfigError("task spec: vocab too small for task (" +
                          std::to_string(assoc_pairs(*this)) + " distinct keys needed, " +
                          std::to_string(assoc_keys(*this)) + " available)");
      break;
    }
    case TaskKind::kModularArithmetic:
      if (modular_triples(*this) < 1)
        throw ConfigError("task spec: seq_len too short for arithmetic triples");
      break;
    case TaskKind::kCharLm:
      break;
  }
}

std::string TaskSpec::describe() const {
  return std::string(task_kind_name(kind)) + "(vocab=" + std::to_string(vocab_size) +
         ",seq=" + std::to_string(seq_len) + ",seed=" + std::to_string(seed) + ")";
}

std::vector<uint8_t> answer_mask_for(const TaskSpec& spec) {
  std::vector<uint8_t> mask(static_cast<size_t>(spec.seq_len), 0);
  switch (spec.kind) {
    case TaskKind::kCopy:
    case TaskKind::kReverse: {
      const int k = copy_payload(spec);
      for (int i = 0; i < k; ++i) mask[static_cast<size_t>(2 + k + i)] = 1;
      break;
    }
    case TaskKind::kAssocRecall: {
      const int n = assoc_pairs(spec);
      mask[static_cast<size_t>(2 * n + 3)] = 1;  // the recalled value
      break;
    }
    case TaskKind::kModularArithmetic: {
      const int nt = modular_triples(spec);
      for (int i = 0; i < nt; ++i) mask[static_cast<size_t>(1 + 3 * i + 2)] = 1;
      break;
    }
    case TaskKind::kCharLm:
      for (int i = 1; i < spec.seq_len; ++i) mask[static_cast<size_t>(i)] = 1;
      break;
  }
  return mask;
}

namespace {

// order-1 Markov transition table for char_lm, a pure function of the seed
std::vector<double> char_lm_transitions(const TaskSpec& spec) {
  const int n = data_range(spec);
  std::vector<double> table(static_cast<size_t>(n) * n);
  Rng rng(mix_seed(spec.seed, 0xC4A21ABCULL));
  for (int r = 0; r < n; ++r) {
    double total = 0.0;
    for (int c = 0; c < n; ++c) {
      // squared uniforms give rows with pronounced but non-degenerate structure
      const double w = 0.05 + rng.uniform() * rng.uniform();
      table[static_cast<size_t>(r) * n + c] = w;
      total += w;
    }
    for (int c = 0; c < n; ++c) table[static_cast<size_t>(r) * n + c] /= total;
  }
  return table;
}

std::vector<int32_t> draw_content(const TaskSpec& spec, Rng& rng) {
  std::vector<int32_t> seq(static_cast<size_t>(spec.seq_len), kTokPad);
  const int nd = data_range(spec);
  switch (spec.kind) {
    case TaskKind::kCopy:
    case TaskKind::kReverse: {
      const int k = copy_payload(spec);
      seq[0] = kTokBos;
      for (int i = 0; i < k; ++i)
        seq[static_cast<size_t>(1 + i)] = kDataStart + rng.uniform_int(0, nd);
      seq[static_cast<size_t>(1 + k)] = kTokSep;
      for (int i = 0; i < k; ++i) {
        const int32_t src = spec.kind == TaskKind::kCopy ? seq[static_cast<size_t>(1 + i)]
                                                         : seq[static_cast<size_t>(k - i)];
        seq[static_cast<size_t>(2 + k + i)] = src;
      }
      break;
    }
    case TaskKind::kAssocRecall: {
      const int n = assoc_pairs(spec);
      const int nk = assoc_keys(spec);
      const int nv = nd - nk;
      // distinct keys so every binding is unambiguous
      std::vector<int32_t> keys(static_cast<size_t>(nk));
      for (int i = 0; i < nk; ++i) keys[static_cast<size_t>(i)] = kDataStart + i;
      for (int i = nk - 1; i > 0; --i)
        std::swap(keys[static_cast<size_t>(i)], keys[static_cast<size_t>(rng.uniform_int(0, i + 1))]);
      seq[0] = kTokBos;
      std::vector<int32_t> values(static_cast<size_t>(n));
      for (int i = 0; i < n; ++i) {
        values[static_cast<size_t>(i)] = kDataStart + nk + rng.uniform_int(0, nv);
        seq[static_cast<size_t>(1 + 2 * i)] = keys[static_cast<size_t>(i)];
        seq[static_cast<size_t>(2 + 2 * i)] = values[static_cast<size_t>(i)];
      }
      const int q = rng.uniform_int(0, n);
      seq[static_cast<size_t>(2 * n + 1)] = kTokQuery;
      seq[static_cast<size_t>(2 * n + 2)] = keys[static_cast<size_t>(q)];
      seq[static_cast<size_t>(2 * n + 3)] = values[static_cast<size_t>(q)];
      break;
    }
    case TaskKind::kModularArithmetic: {
      const int nt = modular_triples(spec);
      seq[0] = kTokBos;
      for (int i = 0; i < nt; ++i) {
        const int a = rng.uniform_int(0, nd);
        const int b = rng.uniform_int(0, nd);
        seq[static_cast<size_t>(1 + 3 * i)] = kDataStart + a;
        seq[static_cast<size_t>(1 + 3 * i + 1)] = kDataStart + b;
        seq[static_cast<size_t>(1 + 3 * i + 2)] = kDataStart + (a + b) % nd;
      }
      break;
    }
    case TaskKind::kCharLm: {
      static thread_local std::vector<double> table;
      static thread_local uint64_t table_seed = 0;
      static thread_local int table_n = 0;
      if (table_seed != spec.seed || table_n != nd) {
        table = char_lm_transitions(spec);
        table_seed = spec.seed;
        table_n = nd;
      }
      seq[0] = kTokBos;
      int state = rng.uniform_int(0, nd);
      seq[1] = kDataStart + state;
      for (int i = 2; i < spec.seq_len; ++i) {
        const double r = rng.uniform();
        double acc = 0.0;
        int nxt = nd - 1;
        for (int c = 0; c < nd; ++c) {
          acc += table[static_cast<size_t>(state) * nd + c];
          if (r < acc) {
            nxt = c;
            break;
          }
        }
        state = nxt;
        seq[static_cast<size_t>(i)] = kDataStart + state;
      }
      break;
    }
  }
  return seq;
}

}  // namespace

SeqSample generate_one(const TaskSpec& spec, Split split, uint64_t index) {
  spec.validate();
  const uint64_t want_parity = split == Split::kTrain ? 0 : 1;
  for (uint64_t attempt = 0;; ++attempt) {
    Rng rng(mix_seed(mix_seed(spec.seed, 0xDA7A0000ULL + index), attempt));
    std::vector<int32_t> tokens = draw_content(spec, rng);
    const uint64_t h = fnv1a64(tokens.data(), tokens.size() * sizeof(int32_t));
    if ((h & 1ULL) == want_parity) {
      SeqSample s;
      s.tokens = std::move(tokens);
      s.answer_mask = answer_mask_for(spec);
      return s;
    }
  }
}

std::vector<SeqSample> generate(const TaskSpec& spec, Split split, int count) {
  std::vector<SeqSample> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(generate_one(spec, split, static_cast<uint64_t>(i)));
  return out;
}

BatchStream::BatchStream(TaskSpec spec, Split split, int batch_size)
    : spec_(std::move(spec)), split_(split), batch_size_(batch_size) {
  if (batch_size_ < 1) throw ConfigError("batch stream: batch size must be >= 1");
  spec_.validate();
}

std::vector<SeqSample> BatchStream::next() {
  std::vector<SeqSample> batch;
  batch.reserve(static_cast<size_t>(batch_size_));
  for (int i = 0; i < batch_size_; ++i)
    batch.push_back(
        generate_one(spec_, split_, next_batch_ * static_cast<uint64_t>(batch_size_) + i));
  ++next_batch_;
  return batch;
}

std::vector<double> expected_histogram(const TaskSpec& spec) {
  spec.validate();
  std::vector<double> p(static_cast<size_t>(spec.vocab_size), 0.0);
  const double seq = spec.seq_len;
  const int nd = data_range(spec);
  switch (spec.kind) {
    case TaskKind::kCopy:
    case TaskKind::kReverse: {
      const int k = copy_payload(spec);
      p[kTokBos] = 1.0 / seq;
      p[kTokSep] = 1.0 / seq;
      p[kTokPad] = (seq - 2.0 - 2.0 * k) / seq;
      for (int d = 0; d < nd; ++d) p[static_cast<size_t>(kDataStart + d)] = 2.0 * k / (seq * nd);
      break;
    }
    case TaskKind::kAssocRecall: {
      const int n = assoc_pairs(spec);
      const int nk = assoc_keys(spec);
      const int nv = nd - nk;
      p[kTokBos] = 1.0 / seq;
      p[kTokQuery] = 1.0 / seq;
      p[kTokPad] = (seq - (2.0 * n + 4.0)) / seq;
      for (int d = 0; d < nk; ++d) p[static_cast<size_t>(kDataStart + d)] = (n + 1.0) / (seq * nk);
      for (int d = 0; d < nv; ++d)
        p[static_cast<size_t>(kDataStart + nk + d)] = (n + 1.0) / (seq * nv);
      break;
    }
    case TaskKind::kModularArithmetic: {
      const int nt = modular_triples(spec);
      p[kTokBos] = 1.0 / seq;
      p[kTokPad] = (seq - 1.0 - 3.0 * nt) / seq;
      for (int d = 0; d < nd; ++d) p[static_cast<size_t>(kDataStart + d)] = 3.0 * nt / (seq * nd);
      break;
    }
    case TaskKind::kCharLm: {
      // stationary distribution of the transition table by power iteration
      std::vector<double> table = char_lm_transitions(spec);
      std::vector<double> pi(static_cast<size_t>(nd), 1.0 / nd), nxt(static_cast<size_t>(nd));
      for (int it = 0; it < 500; ++it) {
        std::fill(nxt.begin(), nxt.end(), 0.0);
        for (int r = 0; r < nd; ++r)
          for (int c = 0; c < nd; ++c)
            nxt[static_cast<size_t>(c)] += pi[static_cast<size_t>(r)] * table[static_cast<size_t>(r) * nd + c];
        std::swap(pi, nxt);
      }
      p[kTokBos] = 1.0 / seq;
      // first data token is uniform, the rest stationary; blend accordingly
      const double rest = (seq - 2.0) / seq;
      for (int d = 0; d < nd; ++d)
        p[static_cast<size_t>(kDataStart + d)] = 1.0 / (seq * nd) + rest * pi[static_cast<size_t>(d)];
      break;
    }
  }
  return p;
}

void export_split(const TaskSpec& spec, Split split, int count, const std::string& path) {
  spec.validate();
  nlohmann::json header{{"kind", task_kind_name(spec.kind)},
                        {"vocab_size", spec.vocab_size},
                        {"seq_len", spec.seq_len},
                        {"count", count},
                        {"seed", spec.seed},
                        {"split", split == Split::kTrain ? "train" : "heldout"}};
  const std::string hs = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("export_split: cannot open " + path);
  out.write("HLMDATA1", 8);
  const uint32_t hlen = static_cast<uint32_t>(hs.size());
  unsigned char lenb[4] = {static_cast<unsigned char>(hlen & 0xff),
                           static_cast<unsigned char>((hlen >> 8) & 0xff),
                           static_cast<unsigned char>((hlen >> 16) & 0xff),
                           static_cast<unsigned char>((hlen >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(lenb), 4);
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (int i = 0; i < count; ++i) {
    SeqSample s = generate_one(spec, split, static_cast<uint64_t>(i));
    for (int32_t tok : s.tokens) {
      unsigned char b[4] = {static_cast<unsigned char>(tok & 0xff),
                            static_cast<unsigned char>((tok >> 8) & 0xff),
                            static_cast<unsigned char>((tok >> 16) & 0xff),
                            static_cast<unsigned char>((tok >> 24) & 0xff)};
      out.write(reinterpret_cast<const char*>(b), 4);
    }
  }
  if (!out) throw IoError("export_split: write failed for " + path);
}

std::pair<TaskSpec, std::vector<std::vector<int32_t>>> import_split(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("import_split: cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "HLMDATA1", 8) != 0)
    throw IoError("import_split: bad magic in " + path);
  unsigned char lenb[4];
  in.read(reinterpret_cast<char*>(lenb), 4);
  const uint32_t hlen = static_cast<uint32_t>(lenb[0]) | (static_cast<uint32_t>(lenb[1]) << 8) |
                        (static_cast<uint32_t>(lenb[2]) << 16) |
                        (static_cast<uint32_t>(lenb[3]) << 24);
  std::string hs(hlen, '\0');
  in.read(hs.data(), hlen);
  if (!in) throw IoError("import_split: truncated header in " + path);
  nlohmann::json header = nlohmann::json::parse(hs, nullptr, false);
  if (header.is_discarded()) throw IoError("import_split: invalid header JSON in " + path);
  TaskSpec spec;
  spec.kind = task_kind_from_name(header.at("kind").get<std::string>());
  spec.vocab_size = header.at("vocab_size").get<int>();
  spec.seq_len = header.at("seq_len").get<int>();
  spec.count = header.at("count").get<int>();
  spec.seed = header.at("seed").get<uint64_t>();
  const int count = spec.count;
  std::vector<std::vector<int32_t>> seqs;
  seqs.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    std::vector<int32_t> seq(static_cast<size_t>(spec.seq_len));
    for (int j = 0; j < spec.seq_len; ++j) {
      unsigned char b[4];
      in.read(reinterpret_cast<char*>(b), 4);
      seq[static_cast<size_t>(j)] = static_cast<int32_t>(
          static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
          (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24));
    }
    if (!in) throw IoError("import_split: truncated body in " + path);
    seqs.push_back(std::move(seq));
  }
  return {spec, std::move(seqs)};
}

}  // namespace hybridlm
