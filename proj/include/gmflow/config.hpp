#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "gmflow/data.hpp"
#include "gmflow/encoder.hpp"
#include "gmflow/evaluation.hpp"
#include "gmflow/flow.hpp"
#include "gmflow/training.hpp"

namespace gmflow {

struct PreprocessConfig {
  std::size_t user_core = 10;
  std::size_t item_core = 15;
  std::size_t max_len = 50;
  std::size_t num_negatives = 999;
};

struct GroupThresholds {
  double transition_low = 1.0 / 3.0;
  double transition_high = 2.0 / 3.0;
  std::size_t few_shot_below = 5;

  GroupSpec spec(GroupKind kind) const { return {kind, transition_low, transition_high, few_shot_below}; }
};

// Everything a run needs, read from one JSON file. Missing fields keep
// their defaults; unknown fields are rejected.
struct RunConfig {
  std::string interactions;  // raw CSV/TSV log
  int num_domains = 0;       // 0 infers from the log
  PreprocessConfig preprocess;
  EncoderConfig encoder;
  FlowConfig flow;
  LossWeights loss;
  TrainConfig train;
  GroupThresholds groups;
  std::uint64_t seed = 42;

  // Checks every field against its module's preconditions.
  void validate() const;
  nlohmann::json to_json() const;
  // 16 hex digits of FNV-1a over the canonical JSON form.
  std::string hash() const;
};

RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

std::string hash_hex(std::uint64_t h);
std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace gmflow
