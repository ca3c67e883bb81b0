#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

namespace gmflow {

struct InteractionRecord {
  std::string user_id;
  std::string item_id;
  int domain = 0;
  std::int64_t timestamp = 0;

  bool operator==(const InteractionRecord&) const = default;
};

enum class LogFormat { kCsv, kTsv };

struct IngestResult {
  std::vector<InteractionRecord> records;
  std::size_t malformed = 0;
  std::vector<std::string> warnings;
};

// Parses `user_id,item_id,domain_id,timestamp` rows. A header row is skipped
// when present. Malformed rows are skipped and counted; more than 1% of
// malformed rows is a FormatError.
IngestResult ingest(const std::filesystem::path& path, LogFormat format);
LogFormat format_from_path(const std::filesystem::path& path);

void write_interactions_csv(const std::filesystem::path& path,
                            const std::vector<InteractionRecord>& records);

// Per-domain item vocabularies. Global indices are contiguous per domain:
// domain k owns [offset(k), offset(k) + size(k)).
class Vocab {
 public:
  Vocab() = default;
  explicit Vocab(int num_domains);

  // Returns the global index; adds the item if unseen. Throws FormatError if
  // the item was already registered under another domain.
  void add(const std::string& item_id, int domain);
  // Re-lays out indices so domains are contiguous. Called once after all adds.
  void finalize();

  int num_domains() const { return num_domains_; }
  std::size_t size() const { return item_ids_.size(); }
  std::size_t domain_size(int domain) const;
  std::size_t domain_offset(int domain) const;
  int domain_of(std::size_t global) const;
  std::size_t local_index(std::size_t global) const { return global - domain_offset(domain_of(global)); }
  std::size_t index_of(const std::string& item_id) const;
  const std::string& item_id(std::size_t global) const { return item_ids_.at(global); }

  bool operator==(const Vocab&) const = default;

 private:
  int num_domains_ = 0;
  std::vector<std::vector<std::string>> pending_;
  std::vector<std::string> item_ids_;
  std::vector<int> item_domain_;
  std::vector<std::size_t> offsets_;
  std::unordered_map<std::string, std::size_t> index_;
  std::unordered_map<std::string, int> pending_domain_;
};

struct CoreFilterConfig {
  std::size_t user_core = 10;
  std::size_t item_core = 15;
};

struct FilterResult {
  std::vector<InteractionRecord> records;
  Vocab vocab;
  std::size_t rounds = 0;
};

// Alternating user/item core filter iterated to a fixed point. `num_domains`
// of 0 infers it from the largest domain id.
FilterResult filter_core(const std::vector<InteractionRecord>& records, const CoreFilterConfig& cfg,
                         int num_domains = 0);

struct UserSequence {
  std::string user_id;
  std::vector<std::size_t> items;  // global indices
  std::vector<int> domains;

  std::size_t size() const { return items.size(); }
  bool operator==(const UserSequence&) const = default;
};

// Chronological per-user sequences (stable on timestamp ties), truncated to
// the most recent `max_len` interactions, ordered by user id.
std::vector<UserSequence> build_sequences(const std::vector<InteractionRecord>& records,
                                          const Vocab& vocab, std::size_t max_len);

// A prefix/target pair used for validation or test ranking.
struct EvalInstance {
  std::size_t user = 0;  // index into the sequence list
  std::vector<std::size_t> prefix_items;
  std::vector<int> prefix_domains;
  std::size_t positive = 0;
  int domain = 0;
  std::vector<std::size_t> negatives;

  bool operator==(const EvalInstance&) const = default;
};

// One (prefix, target) training example. The trainer consumes whole
// training sequences instead; see training_instances().
struct TrainInstance {
  std::size_t sequence = 0;
  std::size_t target_position = 0;  // prefix is [0, target_position)
  std::size_t target = 0;
  int domain = 0;
};

struct SplitDataset {
  // Training part of every sequence: all but the last two interactions.
  std::vector<UserSequence> train;
  std::vector<EvalInstance> validation;
  std::vector<EvalInstance> test;
  std::uint64_t seed = 0;
  std::size_t num_negatives = 0;
  std::vector<std::string> warnings;

  bool operator==(const SplitDataset&) const = default;
};

// Sliding-window expansion of the training sequences: one instance per
// position with at least one preceding item.
std::vector<TrainInstance> training_instances(const SplitDataset& split);

// Leave-one-out split with `num_negatives` same-domain negatives per
// validation/test instance, sampled without replacement from a generator
// seeded per (user, split).
SplitDataset leave_one_out_split(const std::vector<UserSequence>& sequences, const Vocab& vocab,
                                 std::uint64_t seed, std::size_t num_negatives = 999);

std::vector<std::size_t> sample_negatives(const Vocab& vocab, int domain, std::size_t positive,
                                          std::size_t count, std::uint64_t seed);

// Binary split container ("GMFSPLT\0", version, then the three sections).
void save_split(const std::filesystem::path& path, const SplitDataset& split);
SplitDataset load_split(const std::filesystem::path& path);

void save_vocab(const std::filesystem::path& path, const Vocab& vocab);
Vocab load_vocab(const std::filesystem::path& path);

// Stable 64-bit mixing used to derive independent per-user seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

}  // namespace gmflow
