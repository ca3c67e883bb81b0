#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <json.hpp>

#include "gmflow/data.hpp"

namespace gmflow {

// Multi-domain user simulator. Each user walks a Markov chain over domains;
// inside a domain the next item is drawn from a blend of a personal
// preference softmax(intent_scale * <user intent, item intent>) and a Zipf
// popularity law over the domain's items.
struct SynthConfig {
  int num_domains = 3;
  std::size_t items_per_domain = 50;
  std::size_t num_users = 100;
  std::size_t min_length = 12;
  std::size_t max_length = 20;
  std::vector<std::vector<double>> transition;  // num_domains x num_domains, rows sum to 1
  std::vector<double> zipf_exponent;            // one per domain
  std::size_t intent_dim = 4;
  double intent_scale = 4.0;
  double popularity_weight = 0.3;  // weight of the Zipf component in [0, 1]

  // Throws ConfigError naming the offending field.
  void validate() const;

  // Uniform chain with `off_diagonal_mass` spread evenly over the other domains.
  static std::vector<std::vector<double>> uniform_transition(int num_domains, double off_diagonal_mass);
};

SynthConfig synth_config_from_json(const nlohmann::json& j);
nlohmann::json synth_config_to_json(const SynthConfig& cfg);
SynthConfig load_synth_config(const std::filesystem::path& path);

std::vector<InteractionRecord> synth_generate(const SynthConfig& cfg, std::uint64_t seed);

}  // namespace gmflow
