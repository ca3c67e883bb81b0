#include "gmflow/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>

#include "gmflow/errors.hpp"

namespace gmflow {

namespace {

using nlohmann::json;

// Reads `section.name` into dst when present, turning type errors into
// field-level ConfigErrors.
class Section {
 public:
  Section(const json& root, std::string name) : name_(std::move(name)) {
    if (!root.contains(name_)) return;
    node_ = &root.at(name_);
    if (!node_->is_object()) throw ConfigError("config section '" + name_ + "' must be an object");
  }

  template <typename T>
  Section& get(const char* key, T& dst) {
    seen_.insert(key);
    if (node_ == nullptr || !node_->contains(key)) return *this;
    try {
      node_->at(key).get_to(dst);
    } catch (const json::exception& e) {
      throw ConfigError("config field '" + name_ + "." + key + "': " + e.what());
    }
    return *this;
  }

  const json* node() const { return node_; }

  void reject_unknown() const {
    if (node_ == nullptr) return;
    for (const auto& [key, _] : node_->items()) {
      if (!seen_.contains(key)) throw ConfigError("unknown config field '" + name_ + "." + key + "'");
    }
  }

 private:
  std::string name_;
  const json* node_ = nullptr;
  std::set<std::string> seen_;
};

}  // namespace

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void RunConfig::validate() const {
  if (preprocess.user_core == 0 || preprocess.item_core == 0) throw ConfigError("preprocess core thresholds must be >= 1");
  if (preprocess.max_len < 3) throw ConfigError("preprocess.max_len must be >= 3");
  if (preprocess.num_negatives == 0) throw ConfigError("preprocess.num_negatives must be >= 1");
  if (encoder.max_len != preprocess.max_len) throw ConfigError("encoder.max_len must equal preprocess.max_len");
  encoder.validate();
  flow.validate();
  loss.validate();
  train.validate();
  if (!(groups.transition_low > 0.0 && groups.transition_low < groups.transition_high && groups.transition_high <= 1.0)) {
    throw ConfigError("groups: need 0 < transition_low < transition_high <= 1");
  }
  if (groups.few_shot_below == 0) throw ConfigError("groups.few_shot_below must be >= 1");
  if (num_domains < 0) throw ConfigError("data.num_domains must be >= 0");
}

json RunConfig::to_json() const {
  return {
      {"seed", seed},
      {"data", {{"interactions", interactions}, {"num_domains", num_domains}}},
      {"preprocess",
       {{"user_core", preprocess.user_core},
        {"item_core", preprocess.item_core},
        {"max_len", preprocess.max_len},
        {"num_negatives", preprocess.num_negatives}}},
      {"encoder",
       {{"dim", encoder.dim},
        {"layers", encoder.layers},
        {"heads", encoder.heads},
        {"ff_dim", encoder.ff_dim},
        {"dropout", encoder.dropout}}},
      {"flow",
       {{"components", flow.components},
        {"lambda", flow.lambda},
        {"steps", flow.steps},
        {"sigma_min", flow.sigma_min},
        {"sigma_max", flow.sigma_max},
        {"time_features", flow.time_features},
        {"hidden", flow.hidden},
        {"velocity", flow.velocity == VelocityMode::kDerived ? "derived" : "literal"}}},
      {"loss", {{"alpha", loss.alpha}, {"beta", loss.beta}}},
      {"train",
       {{"learning_rate", train.learning_rate},
        {"batch_size", train.batch_size},
        {"max_epochs", train.max_epochs},
        {"patience", train.patience},
        {"eval_steps", train.eval_steps},
        {"adam_beta1", train.adam.beta1},
        {"adam_beta2", train.adam.beta2},
        {"adam_epsilon", train.adam.epsilon},
        {"alpha_grid", train.alpha_grid},
        {"beta_grid", train.beta_grid},
        {"components_grid", train.components_grid}}},
      {"groups",
       {{"transition_low", groups.transition_low},
        {"transition_high", groups.transition_high},
        {"few_shot_below", groups.few_shot_below}}},
  };
}

std::string RunConfig::hash() const { return hash_hex(fnv1a64(to_json().dump())); }

RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  RunConfig cfg;
  static const std::set<std::string> kSections{"seed", "data", "preprocess", "encoder", "flow", "loss", "train", "groups"};
  for (const auto& [key, _] : j.items()) {
    if (!kSections.contains(key)) throw ConfigError("unknown config section '" + key + "'");
  }
  if (j.contains("seed")) {
    try {
      j.at("seed").get_to(cfg.seed);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config field 'seed': ") + e.what());
    }
  }
  Section data(j, "data");
  data.get("interactions", cfg.interactions).get("num_domains", cfg.num_domains).reject_unknown();

  Section pre(j, "preprocess");
  pre.get("user_core", cfg.preprocess.user_core)
      .get("item_core", cfg.preprocess.item_core)
      .get("max_len", cfg.preprocess.max_len)
      .get("num_negatives", cfg.preprocess.num_negatives)
      .reject_unknown();
  cfg.encoder.max_len = cfg.preprocess.max_len;

  Section enc(j, "encoder");
  enc.get("dim", cfg.encoder.dim)
      .get("layers", cfg.encoder.layers)
      .get("heads", cfg.encoder.heads)
      .get("ff_dim", cfg.encoder.ff_dim)
      .get("dropout", cfg.encoder.dropout)
      .reject_unknown();

  std::string velocity = "derived";
  Section flow(j, "flow");
  flow.get("components", cfg.flow.components)
      .get("lambda", cfg.flow.lambda)
      .get("steps", cfg.flow.steps)
      .get("sigma_min", cfg.flow.sigma_min)
      .get("sigma_max", cfg.flow.sigma_max)
      .get("time_features", cfg.flow.time_features)
      .get("hidden", cfg.flow.hidden)
      .get("velocity", velocity)
      .reject_unknown();
  if (velocity == "derived") {
    cfg.flow.velocity = VelocityMode::kDerived;
  } else if (velocity == "literal") {
    cfg.flow.velocity = VelocityMode::kLiteral;
  } else {
    throw ConfigError("config field 'flow.velocity' must be \"derived\" or \"literal\"");
  }

  Section loss(j, "loss");
  loss.get("alpha", cfg.loss.alpha).get("beta", cfg.loss.beta).reject_unknown();

  Section train(j, "train");
  train.get("learning_rate", cfg.train.learning_rate)
      .get("batch_size", cfg.train.batch_size)
      .get("max_epochs", cfg.train.max_epochs)
      .get("patience", cfg.train.patience)
      .get("eval_steps", cfg.train.eval_steps)
      .get("adam_beta1", cfg.train.adam.beta1)
      .get("adam_beta2", cfg.train.adam.beta2)
      .get("adam_epsilon", cfg.train.adam.epsilon)
      .get("alpha_grid", cfg.train.alpha_grid)
      .get("beta_grid", cfg.train.beta_grid)
      .get("components_grid", cfg.train.components_grid)
      .reject_unknown();

  Section groups(j, "groups");
  groups.get("transition_low", cfg.groups.transition_low)
      .get("transition_high", cfg.groups.transition_high)
      .get("few_shot_below", cfg.groups.few_shot_below)
      .reject_unknown();

  cfg.train.seed = cfg.seed;
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace gmflow
