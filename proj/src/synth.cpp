#include "gmflow/synth.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <string>

#include "gmflow/errors.hpp"
#include "gmflow/random.hpp"

namespace gmflow {

namespace {

std::size_t draw(std::mt19937_64& rng, const std::vector<double>& cdf) {
  const double u = uniform01(rng) * cdf.back();
  for (std::size_t i = 0; i < cdf.size(); ++i) {
    if (u < cdf[i]) return i;
  }
  return cdf.size() - 1;
}

std::vector<double> unit_gaussian(std::mt19937_64& rng, std::size_t dim) {
  std::vector<double> v(dim);
  double norm = 0.0;
  for (auto& x : v) {
    x = standard_normal(rng);
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (auto& x : v) x /= norm;
  return v;
}

std::vector<double> to_cdf(std::vector<double> p) {
  for (std::size_t i = 1; i < p.size(); ++i) p[i] += p[i - 1];
  return p;
}

}  // namespace

void SynthConfig::validate() const {
  if (num_domains < 1) throw ConfigError("num_domains must be >= 1");
  if (items_per_domain < 1) throw ConfigError("items_per_domain must be >= 1");
  if (num_users < 1) throw ConfigError("num_users must be >= 1");
  if (min_length < 1 || min_length > max_length) throw ConfigError("need 1 <= min_length <= max_length");
  if (intent_dim < 1) throw ConfigError("intent_dim must be >= 1");
  if (!(popularity_weight >= 0.0 && popularity_weight <= 1.0)) {
    throw ConfigError("popularity_weight must be in [0, 1]");
  }
  const auto D = static_cast<std::size_t>(num_domains);
  if (transition.size() != D) throw ConfigError("transition must have num_domains rows");
  for (std::size_t r = 0; r < D; ++r) {
    if (transition[r].size() != D) {
      throw ConfigError("transition row " + std::to_string(r) + " must have num_domains entries");
    }
    double s = 0.0;
    for (double p : transition[r]) {
      if (!(p >= 0.0)) throw ConfigError("transition row " + std::to_string(r) + " has a negative entry");
      s += p;
    }
    if (std::abs(s - 1.0) > 1e-9) {
      throw ConfigError("transition row " + std::to_string(r) + " sums to " + std::to_string(s) +
                        ", expected 1");
    }
  }
  if (zipf_exponent.size() != D) throw ConfigError("zipf_exponent must have num_domains entries");
  for (double s : zipf_exponent) {
    if (!(s >= 0.0)) throw ConfigError("zipf_exponent entries must be >= 0");
  }
}

std::vector<std::vector<double>> SynthConfig::uniform_transition(int num_domains, double off_diagonal_mass) {
  const auto D = static_cast<std::size_t>(num_domains);
  std::vector<std::vector<double>> t(D, std::vector<double>(D, 0.0));
  for (std::size_t r = 0; r < D; ++r) {
    for (std::size_t c = 0; c < D; ++c) {
      t[r][c] = D == 1 ? 1.0 : (r == c ? 1.0 - off_diagonal_mass : off_diagonal_mass / static_cast<double>(D - 1));
    }
  }
  return t;
}

SynthConfig synth_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("synth config must be a JSON object");
  static const std::set<std::string> kKnown{"num_domains", "items_per_domain", "num_users", "min_length",
                                            "max_length", "intent_dim", "intent_scale", "popularity_weight",
                                            "transition", "off_diagonal_mass", "zipf_exponent"};
  for (const auto& [key, _] : j.items()) {
    if (!kKnown.contains(key)) throw ConfigError("unknown synth config field '" + key + "'");
  }
  SynthConfig cfg;
  auto field = [&](const char* name, auto& dst) {
    if (!j.contains(name)) return;
    try {
      j.at(name).get_to(dst);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("synth config field '") + name + "': " + e.what());
    }
  };
  field("num_domains", cfg.num_domains);
  field("items_per_domain", cfg.items_per_domain);
  field("num_users", cfg.num_users);
  field("min_length", cfg.min_length);
  field("max_length", cfg.max_length);
  field("intent_dim", cfg.intent_dim);
  field("intent_scale", cfg.intent_scale);
  field("popularity_weight", cfg.popularity_weight);
  if (j.contains("transition")) {
    field("transition", cfg.transition);
  } else {
    double off = 0.3;
    field("off_diagonal_mass", off);
    cfg.transition = SynthConfig::uniform_transition(cfg.num_domains, off);
  }
  if (j.contains("zipf_exponent") && j.at("zipf_exponent").is_number()) {
    cfg.zipf_exponent.assign(static_cast<std::size_t>(std::max(cfg.num_domains, 0)), j.at("zipf_exponent").get<double>());
  } else if (j.contains("zipf_exponent")) {
    field("zipf_exponent", cfg.zipf_exponent);
  } else {
    cfg.zipf_exponent.assign(static_cast<std::size_t>(std::max(cfg.num_domains, 0)), 1.0);
  }
  cfg.validate();
  return cfg;
}

nlohmann::json synth_config_to_json(const SynthConfig& cfg) {
  return {{"num_domains", cfg.num_domains},
          {"items_per_domain", cfg.items_per_domain},
          {"num_users", cfg.num_users},
          {"min_length", cfg.min_length},
          {"max_length", cfg.max_length},
          {"transition", cfg.transition},
          {"zipf_exponent", cfg.zipf_exponent},
          {"intent_dim", cfg.intent_dim},
          {"intent_scale", cfg.intent_scale},
          {"popularity_weight", cfg.popularity_weight}};
}

SynthConfig load_synth_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read synth config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("synth config " + path.string() + " is not valid JSON: " + e.what());
  }
  return synth_config_from_json(j);
}

std::vector<InteractionRecord> synth_generate(const SynthConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const auto D = static_cast<std::size_t>(cfg.num_domains);
  const std::size_t n_items = cfg.items_per_domain;

  std::mt19937_64 item_rng(mix_seed(seed, 0x17e3));
  std::vector<std::vector<std::vector<double>>> item_intent(D);
  std::vector<std::vector<double>> zipf(D);
  for (std::size_t k = 0; k < D; ++k) {
    for (std::size_t i = 0; i < n_items; ++i) item_intent[k].push_back(unit_gaussian(item_rng, cfg.intent_dim));
    double z = 0.0;
    for (std::size_t i = 0; i < n_items; ++i) {
      zipf[k].push_back(std::pow(static_cast<double>(i + 1), -cfg.zipf_exponent[k]));
      z += zipf[k].back();
    }
    for (auto& p : zipf[k]) p /= z;
  }
  std::vector<std::vector<double>> transition_cdf;
  for (const auto& row : cfg.transition) transition_cdf.push_back(to_cdf(row));
  const std::vector<double> start_cdf = to_cdf(std::vector<double>(D, 1.0));

  std::vector<InteractionRecord> out;
  for (std::size_t u = 0; u < cfg.num_users; ++u) {
    std::mt19937_64 rng(mix_seed(seed, 0x05e7, u));
    const auto intent = unit_gaussian(rng, cfg.intent_dim);
    std::vector<std::vector<double>> item_cdf(D);
    for (std::size_t k = 0; k < D; ++k) {
      std::vector<double> logits(n_items);
      double mx = -1e300;
      for (std::size_t i = 0; i < n_items; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < cfg.intent_dim; ++j) dot += intent[j] * item_intent[k][i][j];
        logits[i] = cfg.intent_scale * dot;
        mx = std::max(mx, logits[i]);
      }
      double z = 0.0;
      for (auto& l : logits) z += (l = std::exp(l - mx));
      std::vector<double> p(n_items);
      for (std::size_t i = 0; i < n_items; ++i) {
        p[i] = (1.0 - cfg.popularity_weight) * logits[i] / z + cfg.popularity_weight * zipf[k][i];
      }
      item_cdf[k] = to_cdf(std::move(p));
    }
    const std::size_t span = cfg.max_length - cfg.min_length + 1;
    const std::size_t length = cfg.min_length + static_cast<std::size_t>(uniform01(rng) * static_cast<double>(span));
    std::size_t domain = draw(rng, start_cdf);
    const std::string user_id = "u" + std::to_string(u);
    for (std::size_t step = 0; step < std::min(length, cfg.max_length); ++step) {
      if (step > 0) domain = draw(rng, transition_cdf[domain]);
      const std::size_t item = draw(rng, item_cdf[domain]);
      out.push_back({user_id, "d" + std::to_string(domain) + "_i" + std::to_string(item),
                     static_cast<int>(domain), static_cast<std::int64_t>(step)});
    }
  }
  return out;
}

}  // namespace gmflow
