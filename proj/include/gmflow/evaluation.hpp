#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "gmflow/data.hpp"
#include "gmflow/model.hpp"
#include "gmflow/training.hpp"

namespace gmflow {

struct RankedList {
  std::size_t instance = 0;
  int domain = 0;
  std::size_t rank = 0;  // 1-based
  std::size_t candidates = 0;
  bool operator==(const RankedList&) const = default;
};

// 1 + number of negatives scoring at least as high as the positive, so a
// tie always counts against the positive.
std::size_t positive_rank(double positive_score, std::span<const double> negative_scores);

// Ranks each instance's positive among its candidates by <xhat0_r, Emb(i)>.
std::vector<RankedList> rank_instances(std::span<const EvalInstance> instances, const Tensor& xhat0,
                                       const Tensor& item_emb);

// GM-ODE inference with `steps` solver steps, then candidate ranking.
std::vector<RankedList> evaluate_model(const Model& model, std::span<const EvalInstance> instances,
                                       std::size_t steps);

// Baseline scoring every candidate by its training-interaction count.
std::vector<RankedList> evaluate_popularity(const SplitDataset& data, std::size_t num_items,
                                            std::span<const EvalInstance> instances);

std::vector<std::size_t> ranks_of(std::span<const RankedList> ranked);

double hit_rate(std::span<const std::size_t> ranks, std::size_t k);
// Single relevant item: 1 / log2(rank + 1) inside the cutoff, else 0.
double ndcg(std::span<const std::size_t> ranks, std::size_t k);

struct DomainMetrics {
  int domain = 0;
  std::size_t count = 0;
  double hr5 = 0.0, hr10 = 0.0, ndcg5 = 0.0, ndcg10 = 0.0;
};

std::vector<DomainMetrics> per_domain_metrics(std::span<const RankedList> ranked);
// Unweighted mean of per-domain NDCG@10 over domains with instances.
double group_ndcg10(std::span<const RankedList> ranked);

enum class GroupKind { kTargetTransition, kTransitionRate, kDomainCount, kFewShot };

std::string_view group_kind_name(GroupKind kind);

struct GroupSpec {
  GroupKind kind = GroupKind::kTransitionRate;
  double low_cutoff = 1.0 / 3.0;   // rate < low_cutoff -> "low"
  double high_cutoff = 2.0 / 3.0;  // rate >= high_cutoff -> "high"
  std::size_t few_shot_below = 5;
};

// Fraction of adjacent pairs whose domains differ; 0 for length <= 1.
double transition_rate(std::span<const int> domains);
std::size_t distinct_domains(std::span<const int> domains);

// Bucket label of one instance; every instance gets exactly one label.
std::string bucket_of(const EvalInstance& inst, const GroupSpec& spec);
// All labels of a grouping kind, in report order.
std::vector<std::string> bucket_labels(const GroupSpec& spec);

struct BucketMetrics {
  std::string name;
  std::size_t count = 0;
  double ndcg10 = 0.0;
};

struct GroupReport {
  GroupKind kind;
  std::vector<BucketMetrics> buckets;
};

GroupReport group_metrics(std::span<const EvalInstance> instances, std::span<const RankedList> ranked,
                          const GroupSpec& spec);

struct TimingReport {
  std::size_t batch_size = 0;
  std::size_t runs = 0;
  std::vector<std::pair<std::size_t, double>> inference_seconds;  // (solver steps, median s per batch)
  double train_epoch_seconds = 0.0;
  std::vector<std::pair<std::size_t, double>> train_batches_seconds;  // (batches, median s)
};

// Wall-clock medians over `runs` repetitions. Training is timed on a copy
// of the model so the caller's parameters are untouched.
TimingReport timing_report(const Model& model, const SplitDataset& data, const TrainConfig& train,
                           const LossWeights& weights, std::size_t batch_size,
                           std::span<const std::size_t> steps, std::size_t runs = 3);

struct MetricsReport {
  std::vector<DomainMetrics> domains;
  double group_ndcg10 = 0.0;
  std::size_t instances = 0;
  std::size_t solver_steps = 0;
  std::vector<GroupReport> groups;
  std::optional<TimingReport> timing;
  std::uint64_t seed = 0;
  std::string config_hash;

  nlohmann::json to_json() const;
};

MetricsReport build_report(std::span<const RankedList> ranked, std::size_t solver_steps, std::uint64_t seed,
                           std::string config_hash);

// Writes `instance_id,domain,rank`.
void write_ranks_csv(const std::string& path, std::span<const RankedList> ranked);

}  // namespace gmflow
