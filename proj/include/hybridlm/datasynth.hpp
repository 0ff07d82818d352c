#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hybridlm/errors.hpp"
#include "hybridlm/rng.hpp"

namespace hybridlm {

enum class TaskKind { kCopy, kReverse, kAssocRecall, kModularArithmetic, kCharLm };

const char* task_kind_name(TaskKind k);
TaskKind task_kind_from_name(const std::string& name);

// Reserved token ids; data tokens occupy [kDataStart, vocab_size).
inline constexpr int32_t kTokBos = 0;
inline constexpr int32_t kTokSep = 1;
inline constexpr int32_t kTokQuery = 2;
inline constexpr int32_t kTokPad = 3;
inline constexpr int32_t kDataStart = 4;

// Deterministic synthetic task family. Generation is a pure function of the
// spec; the train and held-out splits are disjoint by construction (sequences
// are rejection-sampled onto opposite parities of a content hash).
struct TaskSpec {
  TaskKind kind = TaskKind::kCopy;
  int vocab_size = 64;
  int seq_len = 64;
  int count = 1024;  // nominal size of a materialized split
  uint64_t seed = 1;

  void validate() const;  // throws ConfigError (e.g. vocab too small for task)
  std::string describe() const;
};

enum class Split { kTrain, kHeldOut };

struct SeqSample {
  std::vector<int32_t> tokens;
  std::vector<uint8_t> answer_mask;  // marks the positions that are scored
};

// Scored positions depend only on the spec, not the drawn content.
std::vector<uint8_t> answer_mask_for(const TaskSpec& spec);

SeqSample generate_one(const TaskSpec& spec, Split split, uint64_t index);
std::vector<SeqSample> generate(const TaskSpec& spec, Split split, int count);

// Endless deterministic batch iterator; batch b is a pure function of
// (spec, split, b).
class BatchStream {
 public:
  BatchStream(TaskSpec spec, Split split, int batch_size);
  std::vector<SeqSample> next();
  uint64_t batch_index() const { return next_batch_; }

 private:
  TaskSpec spec_;
  Split split_;
  int batch_size_;
  uint64_t next_batch_ = 0;
};

// Expected marginal token distribution (length vocab_size), used as the
// statistical oracle for streamed data.
std::vector<double> expected_histogram(const TaskSpec& spec);

// Flat binary fixture: magic, spec JSON header, then count * seq_len token
// ids as 32-bit little-endian words.
void export_split(const TaskSpec& spec, Split split, int count, const std::string& path);
std::pair<TaskSpec, std::vector<std::vector<int32_t>>> import_split(const std::string& path);

uint64_t fnv1a64(const void* data, size_t len);

}  // namespace hybridlm
