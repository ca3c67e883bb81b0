#include "gmflow/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include "gmflow/errors.hpp"

namespace gmflow {

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

template <typename Fn>
double time_median(std::size_t runs, Fn&& fn) {
  std::vector<double> secs;
  for (std::size_t r = 0; r < std::max<std::size_t>(runs, 1); ++r) {
    const auto start = std::chrono::steady_clock::now();
    fn();
    secs.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
  }
  return median(std::move(secs));
}

}  // namespace

std::size_t positive_rank(double positive_score, std::span<const double> negative_scores) {
  std::size_t rank = 1;
  for (double s : negative_scores) {
    if (s >= positive_score) ++rank;
  }
  return rank;
}

std::vector<RankedList> rank_instances(std::span<const EvalInstance> instances, const Tensor& xhat0,
                                       const Tensor& item_emb) {
  if (xhat0.rows() != instances.size()) throw ShapeError("one prediction row per instance required");
  std::vector<RankedList> out;
  out.reserve(instances.size());
  std::vector<double> neg;
  for (std::size_t r = 0; r < instances.size(); ++r) {
    const auto& inst = instances[r];
    const auto x = xhat0.row_span(r);
    const double pos = score_items(x, item_emb, inst.positive, 1)[0];
    neg.clear();
    for (auto item : inst.negatives) neg.push_back(score_items(x, item_emb, item, 1)[0]);
    out.push_back({r, inst.domain, positive_rank(pos, neg), inst.negatives.size() + 1});
  }
  return out;
}

std::vector<RankedList> evaluate_model(const Model& model, std::span<const EvalInstance> instances,
                                       std::size_t steps) {
  if (instances.empty()) return {};
  return rank_instances(instances, model.predict(instances, steps), model.item_embeddings());
}

std::vector<RankedList> evaluate_popularity(const SplitDataset& data, std::size_t num_items,
                                            std::span<const EvalInstance> instances) {
  std::vector<double> count(num_items, 0.0);
  for (const auto& s : data.train)
    for (auto i : s.items) count.at(i) += 1.0;
  std::vector<RankedList> out;
  std::vector<double> neg;
  for (std::size_t r = 0; r < instances.size(); ++r) {
    const auto& inst = instances[r];
    neg.clear();
    for (auto item : inst.negatives) neg.push_back(count.at(item));
    out.push_back({r, inst.domain, positive_rank(count.at(inst.positive), neg), inst.negatives.size() + 1});
  }
  return out;
}

std::vector<std::size_t> ranks_of(std::span<const RankedList> ranked) {
  std::vector<std::size_t> out;
  out.reserve(ranked.size());
  for (const auto& r : ranked) out.push_back(r.rank);
  return out;
}

double hit_rate(std::span<const std::size_t> ranks, std::size_t k) {
  if (ranks.empty()) throw EmptyEvalError("hit_rate of an empty rank list");
  if (k == 0) throw ConfigError("cutoff K must be >= 1");
  std::size_t hits = 0;
  for (auto r : ranks) hits += r <= k ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(ranks.size());
}

double ndcg(std::span<const std::size_t> ranks, std::size_t k) {
  if (ranks.empty()) throw EmptyEvalError("ndcg of an empty rank list");
  if (k == 0) throw ConfigError("cutoff K must be >= 1");
  double s = 0.0;
  for (auto r : ranks) {
    if (r <= k) s += 1.0 / std::log2(static_cast<double>(r) + 1.0);
  }
  return s / static_cast<double>(ranks.size());
}

std::vector<DomainMetrics> per_domain_metrics(std::span<const RankedList> ranked) {
  std::map<int, std::vector<std::size_t>> by_domain;
  for (const auto& r : ranked) by_domain[r.domain].push_back(r.rank);
  std::vector<DomainMetrics> out;
  for (const auto& [domain, ranks] : by_domain) {
    out.push_back({domain, ranks.size(), hit_rate(ranks, 5), hit_rate(ranks, 10), ndcg(ranks, 5), ndcg(ranks, 10)});
  }
  return out;
}

double group_ndcg10(std::span<const RankedList> ranked) {
  const auto per = per_domain_metrics(ranked);
  if (per.empty()) throw EmptyEvalError("group NDCG of an empty evaluation");
  double s = 0.0;
  for (const auto& m : per) s += m.ndcg10;
  return s / static_cast<double>(per.size());
}

// ---------------------------------------------------------------------------
// Grouping

std::string_view group_kind_name(GroupKind kind) {
  switch (kind) {
    case GroupKind::kTargetTransition: return "target_transition";
    case GroupKind::kTransitionRate: return "transition_rate";
    case GroupKind::kDomainCount: return "domain_count";
    case GroupKind::kFewShot: return "few_shot";
  }
  return "unknown";
}

double transition_rate(std::span<const int> domains) {
  if (domains.size() <= 1) return 0.0;
  std::size_t changes = 0;
  for (std::size_t m = 0; m + 1 < domains.size(); ++m) changes += domains[m] != domains[m + 1] ? 1 : 0;
  return static_cast<double>(changes) / static_cast<double>(domains.size() - 1);
}

std::size_t distinct_domains(std::span<const int> domains) {
  return std::set<int>(domains.begin(), domains.end()).size();
}

std::vector<std::string> bucket_labels(const GroupSpec& spec) {
  switch (spec.kind) {
    case GroupKind::kTargetTransition: return {"w/ transition", "w/o transition"};
    case GroupKind::kTransitionRate: return {"low", "mid", "high"};
    case GroupKind::kDomainCount: return {"1", "2", "3", "4+"};
    case GroupKind::kFewShot: return {"few-shot", "regular"};
  }
  return {};
}

std::string bucket_of(const EvalInstance& inst, const GroupSpec& spec) {
  const auto& doms = inst.prefix_domains;
  switch (spec.kind) {
    case GroupKind::kTargetTransition:
      return !doms.empty() && doms.back() != inst.domain ? "w/ transition" : "w/o transition";
    case GroupKind::kTransitionRate: {
      const double r = transition_rate(doms);
      if (r < spec.low_cutoff) return "low";
      return r < spec.high_cutoff ? "mid" : "high";
    }
    case GroupKind::kDomainCount: {
      const auto n = distinct_domains(doms);
      return n >= 4 ? "4+" : std::to_string(std::max<std::size_t>(n, 1));
    }
    case GroupKind::kFewShot: {
      const auto in_domain = static_cast<std::size_t>(std::count(doms.begin(), doms.end(), inst.domain));
      return in_domain < spec.few_shot_below ? "few-shot" : "regular";
    }
  }
  return "unknown";
}

GroupReport group_metrics(std::span<const EvalInstance> instances, std::span<const RankedList> ranked,
                          const GroupSpec& spec) {
  if (instances.size() != ranked.size()) throw ShapeError("group_metrics: one rank per instance required");
  GroupReport report{spec.kind, {}};
  std::map<std::string, std::vector<std::size_t>> by_bucket;
  for (std::size_t i = 0; i < instances.size(); ++i) by_bucket[bucket_of(instances[i], spec)].push_back(ranked[i].rank);
  for (const auto& label : bucket_labels(spec)) {
    const auto& ranks = by_bucket[label];
    report.buckets.push_back({label, ranks.size(), ranks.empty() ? 0.0 : ndcg(ranks, 10)});
  }
  return report;
}

// ---------------------------------------------------------------------------
// Timing

TimingReport timing_report(const Model& model, const SplitDataset& data, const TrainConfig& train,
                           const LossWeights& weights, std::size_t batch_size, std::span<const std::size_t> steps,
                           std::size_t runs) {
  if (data.test.empty() || data.train.empty()) throw EmptyDatasetError("timing needs training and test data");
  TimingReport report;
  report.batch_size = batch_size;
  report.runs = runs;
  const std::span<const EvalInstance> batch(data.test.data(), std::min(batch_size, data.test.size()));
  for (auto T : steps) {
    report.inference_seconds.emplace_back(T, time_median(runs, [&] { (void)evaluate_model(model, batch, T); }));
  }
  TrainConfig cfg = train;
  cfg.batch_size = batch_size;
  auto run_epoch = [&](std::size_t max_batches) {
    Model copy = model;
    OptimizerState opt = OptimizerState::for_params(copy.params(), cfg.adam);
    std::mt19937_64 rng(cfg.seed);
    (void)train_epoch(data, copy, opt, cfg, weights, rng, max_batches);
  };
  report.train_epoch_seconds = time_median(runs, [&] { run_epoch(0); });
  std::size_t total_batches = 0;
  for (const auto& s : data.train) total_batches += instance_count(s) > 0 ? 1 : 0;
  total_batches = (total_batches + batch_size - 1) / batch_size;
  const std::size_t half = std::max<std::size_t>(total_batches / 2, 1);
  for (auto b : {half, 2 * half}) {
    if (b > total_batches) break;
    report.train_batches_seconds.emplace_back(b, time_median(runs, [&] { run_epoch(b); }));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Report

MetricsReport build_report(std::span<const RankedList> ranked, std::size_t solver_steps, std::uint64_t seed,
                           std::string config_hash) {
  MetricsReport report;
  report.domains = per_domain_metrics(ranked);
  report.group_ndcg10 = group_ndcg10(ranked);
  report.instances = ranked.size();
  report.solver_steps = solver_steps;
  report.seed = seed;
  report.config_hash = std::move(config_hash);
  return report;
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json j;
  j["schema"] = "gmflowrec.metrics.v1";
  j["config_hash"] = config_hash;
  j["seed"] = seed;
  j["instances"] = instances;
  j["solver_steps"] = solver_steps;
  j["group_ndcg10"] = group_ndcg10;
  auto& doms = j["domains"] = nlohmann::json::array();
  for (const auto& d : domains) {
    doms.push_back({{"domain", d.domain}, {"count", d.count}, {"hr5", d.hr5}, {"hr10", d.hr10},
                    {"ndcg5", d.ndcg5}, {"ndcg10", d.ndcg10}});
  }
  auto& groups_json = j["groups"] = nlohmann::json::object();
  for (const auto& g : groups) {
    auto buckets = nlohmann::json::array();
    for (const auto& b : g.buckets) buckets.push_back({{"bucket", b.name}, {"count", b.count}, {"ndcg10", b.ndcg10}});
    groups_json[std::string(group_kind_name(g.kind))] = std::move(buckets);
  }
  if (timing) {
    nlohmann::json t;
    t["batch_size"] = timing->batch_size;
    t["runs"] = timing->runs;
    t["train_epoch_seconds"] = timing->train_epoch_seconds;
    auto& inf = t["inference_seconds_per_batch"] = nlohmann::json::array();
    for (const auto& [steps, s] : timing->inference_seconds) inf.push_back({{"steps", steps}, {"seconds", s}});
    auto& tb = t["train_seconds_by_batches"] = nlohmann::json::array();
    for (const auto& [b, s] : timing->train_batches_seconds) tb.push_back({{"batches", b}, {"seconds", s}});
    j["timing"] = std::move(t);
  }
  return j;
}

void write_ranks_csv(const std::string& path, std::span<const RankedList> ranked) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << "instance_id,domain,rank\n";
  for (const auto& r : ranked) out << r.instance << ',' << r.domain << ',' << r.rank << '\n';
}

}  // namespace gmflow
