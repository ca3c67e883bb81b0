#include "gmflow/data.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "gmflow/errors.hpp"

namespace gmflow {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename T>
bool parse_int(std::string_view s, T& out) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (s.empty()) return false;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split_fields(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return splitmix64(splitmix64(splitmix64(seed) ^ a) ^ b);
}

// ---------------------------------------------------------------------------
// Ingest

LogFormat format_from_path(const std::filesystem::path& path) {
  return path.extension() == ".tsv" ? LogFormat::kTsv : LogFormat::kCsv;
}

IngestResult ingest(const std::filesystem::path& path, LogFormat format) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read interaction log: " + path.string());
  const char sep = format == LogFormat::kTsv ? '\t' : ',';
  IngestResult result;
  std::string line;
  std::size_t rows = 0;
  bool first = true;
  while (std::getline(in, line)) {
    std::string_view view = trim(line);
    if (view.empty()) continue;
    auto fields = split_fields(view, sep);
    if (first) {
      first = false;
      if (!fields.empty() && trim(fields[0]) == "user_id") continue;
    }
    ++rows;
    InteractionRecord rec;
    if (fields.size() != 4 || trim(fields[0]).empty() || trim(fields[1]).empty() ||
        !parse_int(fields[2], rec.domain) || rec.domain < 0 || !parse_int(fields[3], rec.timestamp)) {
      ++result.malformed;
      continue;
    }
    rec.user_id = std::string(trim(fields[0]));
    rec.item_id = std::string(trim(fields[1]));
    result.records.push_back(std::move(rec));
  }
  if (rows == 0) result.warnings.push_back("interaction log is empty: " + path.string());
  if (result.malformed > 0) {
    result.warnings.push_back(std::to_string(result.malformed) + " malformed rows skipped");
  }
  if (result.malformed * 100 > rows) {
    throw FormatError(std::to_string(result.malformed) + " of " + std::to_string(rows) +
                      " rows malformed (more than 1%) in " + path.string());
  }
  return result;
}

void write_interactions_csv(const std::filesystem::path& path,
                            const std::vector<InteractionRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "user_id,item_id,domain_id,timestamp\n";
  for (const auto& r : records) {
    out << r.user_id << ',' << r.item_id << ',' << r.domain << ',' << r.timestamp << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

// ---------------------------------------------------------------------------
// Vocab

Vocab::Vocab(int num_domains) : num_domains_(num_domains), pending_(static_cast<std::size_t>(num_domains)) {}

void Vocab::add(const std::string& item_id, int domain) {
  if (domain < 0 || domain >= num_domains_) {
    throw FormatError("domain " + std::to_string(domain) + " out of range for item " + item_id);
  }
  auto [it, inserted] = pending_domain_.emplace(item_id, domain);
  if (!inserted) {
    if (it->second != domain) {
      throw FormatError("item " + item_id + " appears in domains " + std::to_string(it->second) +
                        " and " + std::to_string(domain));
    }
    return;
  }
  pending_[static_cast<std::size_t>(domain)].push_back(item_id);
}

void Vocab::finalize() {
  item_ids_.clear();
  item_domain_.clear();
  index_.clear();
  offsets_.assign(static_cast<std::size_t>(num_domains_) + 1, 0);
  for (int k = 0; k < num_domains_; ++k) {
    offsets_[static_cast<std::size_t>(k)] = item_ids_.size();
    for (const auto& id : pending_[static_cast<std::size_t>(k)]) {
      index_.emplace(id, item_ids_.size());
      item_ids_.push_back(id);
      item_domain_.push_back(k);
    }
  }
  offsets_.back() = item_ids_.size();
}

std::size_t Vocab::domain_size(int domain) const {
  if (domain < 0 || domain >= num_domains_) throw IndexError("domain out of range");
  return offsets_[static_cast<std::size_t>(domain) + 1] - offsets_[static_cast<std::size_t>(domain)];
}

std::size_t Vocab::domain_offset(int domain) const {
  if (domain < 0 || domain >= num_domains_) throw IndexError("domain out of range");
  return offsets_[static_cast<std::size_t>(domain)];
}

int Vocab::domain_of(std::size_t global) const {
  if (global >= item_domain_.size()) throw IndexError("item index " + std::to_string(global) + " out of range");
  return item_domain_[global];
}

std::size_t Vocab::index_of(const std::string& item_id) const {
  auto it = index_.find(item_id);
  if (it == index_.end()) throw IndexError("unknown item " + item_id);
  return it->second;
}

// ---------------------------------------------------------------------------
// Core filtering

FilterResult filter_core(const std::vector<InteractionRecord>& records, const CoreFilterConfig& cfg,
                         int num_domains) {
  if (records.empty()) throw EmptyDatasetError("no interactions to filter");
  if (num_domains <= 0) {
    int mx = 0;
    for (const auto& r : records) mx = std::max(mx, r.domain);
    num_domains = mx + 1;
  }
  FilterResult out;
  out.records = records;
  while (true) {
    ++out.rounds;
    const std::size_t before = out.records.size();
    std::unordered_map<std::string, std::size_t> user_count;
    for (const auto& r : out.records) ++user_count[r.user_id];
    std::erase_if(out.records, [&](const InteractionRecord& r) { return user_count[r.user_id] < cfg.user_core; });
    std::unordered_map<std::string, std::size_t> item_count;
    for (const auto& r : out.records) ++item_count[r.item_id];
    std::erase_if(out.records, [&](const InteractionRecord& r) { return item_count[r.item_id] < cfg.item_core; });
    if (out.records.size() == before) break;
    if (out.records.empty()) break;
  }
  if (out.records.empty()) throw EmptyDatasetError("core filtering removed every interaction");
  out.vocab = Vocab(num_domains);
  for (const auto& r : out.records) out.vocab.add(r.item_id, r.domain);
  out.vocab.finalize();
  return out;
}

// ---------------------------------------------------------------------------
// Sequences

std::vector<UserSequence> build_sequences(const std::vector<InteractionRecord>& records,
                                          const Vocab& vocab, std::size_t max_len) {
  if (max_len < 3) throw ConfigError("max_len must be at least 3");
  std::map<std::string, std::vector<const InteractionRecord*>> by_user;
  for (const auto& r : records) by_user[r.user_id].push_back(&r);
  std::vector<UserSequence> out;
  out.reserve(by_user.size());
  for (auto& [user, rows] : by_user) {
    std::stable_sort(rows.begin(), rows.end(),
                     [](const auto* a, const auto* b) { return a->timestamp < b->timestamp; });
    const std::size_t start = rows.size() > max_len ? rows.size() - max_len : 0;
    UserSequence seq;
    seq.user_id = user;
    for (std::size_t i = start; i < rows.size(); ++i) {
      const std::size_t idx = vocab.index_of(rows[i]->item_id);
      seq.items.push_back(idx);
      seq.domains.push_back(vocab.domain_of(idx));
    }
    out.push_back(std::move(seq));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Split

std::vector<std::size_t> sample_negatives(const Vocab& vocab, int domain, std::size_t positive,
                                          std::size_t count, std::uint64_t seed) {
  const std::size_t n = vocab.domain_size(domain);
  const std::size_t offset = vocab.domain_offset(domain);
  if (vocab.domain_of(positive) != domain) {
    throw DomainMismatchError("positive item is not in domain " + std::to_string(domain));
  }
  if (n == 0 || count > n - 1) {
    throw InsufficientCandidatesError("domain " + std::to_string(domain) + " has " + std::to_string(n) +
                                      " items; cannot draw " + std::to_string(count) +
                                      " distinct negatives");
  }
  std::vector<std::size_t> pool;
  pool.reserve(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    if (offset + i != positive) pool.push_back(offset + i);
  }
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(count);
  return pool;
}

SplitDataset leave_one_out_split(const std::vector<UserSequence>& sequences, const Vocab& vocab,
                                 std::uint64_t seed, std::size_t num_negatives) {
  SplitDataset split;
  split.seed = seed;
  split.num_negatives = num_negatives;
  constexpr std::uint64_t kValidationTag = 1, kTestTag = 2;
  for (const auto& seq : sequences) {
    const std::size_t m = seq.size();
    if (m < 3) {
      split.warnings.push_back("user " + seq.user_id + " has " + std::to_string(m) +
                               " interactions; excluded from split");
      continue;
    }
    const std::size_t user = split.train.size();
    UserSequence train;
    train.user_id = seq.user_id;
    train.items.assign(seq.items.begin(), seq.items.end() - 2);
    train.domains.assign(seq.domains.begin(), seq.domains.end() - 2);
    split.train.push_back(std::move(train));

    const std::uint64_t user_hash = fnv1a(seq.user_id);
    auto make = [&](std::size_t target_pos, std::uint64_t tag) {
      EvalInstance inst;
      inst.user = user;
      inst.prefix_items.assign(seq.items.begin(), seq.items.begin() + static_cast<std::ptrdiff_t>(target_pos));
      inst.prefix_domains.assign(seq.domains.begin(), seq.domains.begin() + static_cast<std::ptrdiff_t>(target_pos));
      inst.positive = seq.items[target_pos];
      inst.domain = seq.domains[target_pos];
      inst.negatives = sample_negatives(vocab, inst.domain, inst.positive, num_negatives,
                                        mix_seed(seed, user_hash, tag));
      return inst;
    };
    split.validation.push_back(make(m - 2, kValidationTag));
    split.test.push_back(make(m - 1, kTestTag));
  }
  return split;
}

std::vector<TrainInstance> training_instances(const SplitDataset& split) {
  std::vector<TrainInstance> out;
  for (std::size_t s = 0; s < split.train.size(); ++s) {
    const auto& seq = split.train[s];
    for (std::size_t pos = 1; pos < seq.size(); ++pos) {
      out.push_back({s, pos, seq.items[pos], seq.domains[pos]});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Binary split container

namespace {

constexpr std::array<char, 8> kSplitMagic = {'G', 'M', 'F', 'S', 'P', 'L', 'T', '\0'};
constexpr std::uint32_t kSplitVersion = 1;

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : out_(path, std::ios::binary | std::ios::trunc), path_(path) {
    if (!out_) throw IoError("cannot write " + path.string());
  }
  template <typename T>
  void put(T v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void put_string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  template <typename T>
  void put_vector(const std::vector<T>& v) {
    put<std::uint64_t>(v.size());
    for (const auto& x : v) put<std::int64_t>(static_cast<std::int64_t>(x));
  }
  void raw(const char* p, std::size_t n) { out_.write(p, static_cast<std::streamsize>(n)); }
  void finish() {
    out_.flush();
    if (!out_) throw IoError("failed writing " + path_.string());
  }

 private:
  std::ofstream out_;
  std::filesystem::path path_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw IoError("cannot read " + path.string());
  }
  template <typename T>
  T get() {
    T v{};
    in_.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in_) throw FormatError("truncated split file " + path_.string());
    return v;
  }
  std::string get_string() {
    std::string s(get<std::uint32_t>(), '\0');
    in_.read(s.data(), static_cast<std::streamsize>(s.size()));
    return s;
  }
  template <typename T>
  std::vector<T> get_vector() {
    std::vector<T> v(get<std::uint64_t>());
    for (auto& x : v) x = static_cast<T>(get<std::int64_t>());
    return v;
  }
  void raw(char* p, std::size_t n) {
    in_.read(p, static_cast<std::streamsize>(n));
    if (!in_) throw FormatError("truncated split file " + path_.string());
  }

 private:
  std::ifstream in_;
  std::filesystem::path path_;
};

void put_instances(Writer& w, const std::vector<EvalInstance>& v) {
  w.put<std::uint64_t>(v.size());
  for (const auto& e : v) {
    w.put<std::uint64_t>(e.user);
    w.put_vector(e.prefix_items);
    w.put_vector(e.prefix_domains);
    w.put<std::uint64_t>(e.positive);
    w.put<std::int32_t>(e.domain);
    w.put_vector(e.negatives);
  }
}

std::vector<EvalInstance> get_instances(Reader& r) {
  std::vector<EvalInstance> v(r.get<std::uint64_t>());
  for (auto& e : v) {
    e.user = r.get<std::uint64_t>();
    e.prefix_items = r.get_vector<std::size_t>();
    e.prefix_domains = r.get_vector<int>();
    e.positive = r.get<std::uint64_t>();
    e.domain = r.get<std::int32_t>();
    e.negatives = r.get_vector<std::size_t>();
  }
  return v;
}

}  // namespace

void save_split(const std::filesystem::path& path, const SplitDataset& split) {
  Writer w(path);
  w.raw(kSplitMagic.data(), kSplitMagic.size());
  w.put<std::uint32_t>(kSplitVersion);
  w.put<std::uint64_t>(split.seed);
  w.put<std::uint64_t>(split.num_negatives);
  w.put<std::uint64_t>(split.train.size());
  for (const auto& s : split.train) {
    w.put_string(s.user_id);
    w.put_vector(s.items);
    w.put_vector(s.domains);
  }
  put_instances(w, split.validation);
  put_instances(w, split.test);
  w.finish();
}

SplitDataset load_split(const std::filesystem::path& path) {
  Reader r(path);
  std::array<char, 8> magic{};
  r.raw(magic.data(), magic.size());
  if (magic != kSplitMagic) throw FormatError("not a split file: " + path.string());
  if (r.get<std::uint32_t>() != kSplitVersion) throw FormatError("unsupported split version");
  SplitDataset split;
  split.seed = r.get<std::uint64_t>();
  split.num_negatives = r.get<std::uint64_t>();
  split.train.resize(r.get<std::uint64_t>());
  for (auto& s : split.train) {
    s.user_id = r.get_string();
    s.items = r.get_vector<std::size_t>();
    s.domains = r.get_vector<int>();
  }
  split.validation = get_instances(r);
  split.test = get_instances(r);
  return split;
}

void save_vocab(const std::filesystem::path& path, const Vocab& vocab) {
  nlohmann::json j;
  j["num_domains"] = vocab.num_domains();
  auto& domains = j["domains"] = nlohmann::json::array();
  for (int k = 0; k < vocab.num_domains(); ++k) {
    auto items = nlohmann::json::array();
    for (std::size_t i = 0; i < vocab.domain_size(k); ++i) items.push_back(vocab.item_id(vocab.domain_offset(k) + i));
    domains.push_back(std::move(items));
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump() << '\n';
}

Vocab load_vocab(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad vocab file " + path.string() + ": " + e.what());
  }
  Vocab vocab(j.at("num_domains").get<int>());
  const auto& domains = j.at("domains");
  for (std::size_t k = 0; k < domains.size(); ++k)
    for (const auto& id : domains[k]) vocab.add(id.get<std::string>(), static_cast<int>(k));
  vocab.finalize();
  return vocab;
}

}  // namespace gmflow
