#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gmflow/checkpoint.hpp"
#include "gmflow/config.hpp"
#include "gmflow/data.hpp"
#include "gmflow/errors.hpp"
#include "gmflow/evaluation.hpp"
#include "gmflow/model.hpp"
#include "gmflow/synth.hpp"
#include "gmflow/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace gmflow;

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::size_t threads = 1;
};

// Optional overrides shared by the commands that build a RunConfig.
struct RunOverrides {
  std::string data;
  std::optional<std::size_t> epochs;
  std::optional<double> lr;
  std::optional<std::size_t> batch_size;
  std::optional<std::size_t> negatives;
  std::optional<std::size_t> steps;
};

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

void ensure_dir(const fs::path& dir) {
  if (dir.empty()) throw ConfigError("--out is required");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

// Flags beat the file, the file beats built-in defaults. Overrides are
// patched into the JSON before parsing so validation and the config hash
// see the effective values.
RunConfig resolve_run_config(const CommonFlags& common, const RunOverrides& over) {
  json j = common.config.empty() ? json::object() : read_json(common.config);
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  if (common.seed) j["seed"] = *common.seed;
  if (!over.data.empty()) j["data"]["interactions"] = over.data;
  if (over.epochs) j["train"]["max_epochs"] = *over.epochs;
  if (over.lr) j["train"]["learning_rate"] = *over.lr;
  if (over.batch_size) j["train"]["batch_size"] = *over.batch_size;
  if (over.negatives) j["preprocess"]["num_negatives"] = *over.negatives;
  if (over.steps) j["flow"]["steps"] = *over.steps;
  RunConfig cfg = run_config_from_json(j);
  // Relative data paths are resolved against the config file's directory.
  if (!cfg.interactions.empty() && !common.config.empty() && over.data.empty()) {
    fs::path p(cfg.interactions);
    if (p.is_relative()) cfg.interactions = (fs::path(common.config).parent_path() / p).string();
  }
  return cfg;
}

void require_dataset(const RunConfig& cfg) {
  if (cfg.interactions.empty()) throw ConfigError("no dataset: set data.interactions or pass --data");
  if (!fs::is_regular_file(cfg.interactions)) throw ConfigError("dataset not found: " + cfg.interactions);
}

struct Prepared {
  Vocab vocab{0};
  SplitDataset split;
  std::size_t raw_records = 0;
  std::size_t malformed = 0;
  std::size_t kept_records = 0;
  std::size_t filter_rounds = 0;
};

Prepared prepare(const RunConfig& cfg) {
  require_dataset(cfg);
  auto ingested = ingest(cfg.interactions, format_from_path(cfg.interactions));
  for (const auto& w : ingested.warnings) std::cerr << "warning: " << w << '\n';
  auto filtered = filter_core(ingested.records, {cfg.preprocess.user_core, cfg.preprocess.item_core}, cfg.num_domains);
  auto seqs = build_sequences(filtered.records, filtered.vocab, cfg.preprocess.max_len);
  Prepared p;
  p.raw_records = ingested.records.size();
  p.malformed = ingested.malformed;
  p.kept_records = filtered.records.size();
  p.filter_rounds = filtered.rounds;
  p.split = leave_one_out_split(seqs, filtered.vocab, cfg.seed, cfg.preprocess.num_negatives);
  p.vocab = std::move(filtered.vocab);
  for (const auto& w : p.split.warnings) std::cerr << "warning: " << w << '\n';
  return p;
}

// A directory written by `preprocess` (or `train`) holds split.bin and
// vocab.json; otherwise the raw log named in the config is processed inline.
Prepared load_or_prepare(const RunConfig& cfg, const std::string& data_dir) {
  if (data_dir.empty()) return prepare(cfg);
  Prepared p;
  p.vocab = load_vocab(fs::path(data_dir) / "vocab.json");
  p.split = load_split(fs::path(data_dir) / "split.bin");
  return p;
}

void save_prepared(const fs::path& dir, const Prepared& p) {
  save_split(dir / "split.bin", p.split);
  save_vocab(dir / "vocab.json", p.vocab);
}

json base_manifest(const RunConfig& cfg) {
  return {{"config_hash", cfg.hash()}, {"seed", cfg.seed}, {"config", cfg.to_json()}};
}

json split_summary(const Prepared& p) {
  std::size_t train_items = 0;
  for (const auto& s : p.split.train) train_items += s.items.size();
  std::vector<std::size_t> sizes;
  for (int d = 0; d < p.vocab.num_domains(); ++d) sizes.push_back(p.vocab.domain_size(d));
  return {{"users", p.split.train.size()},
          {"items", p.vocab.size()},
          {"domain_items", sizes},
          {"train_interactions", train_items},
          {"validation", p.split.validation.size()},
          {"test", p.split.test.size()},
          {"num_negatives", p.split.num_negatives}};
}

Model build_model(const RunConfig& cfg, const Vocab& vocab) {
  return Model(ModelConfig::for_vocab(vocab, cfg.encoder, cfg.flow), cfg.seed);
}

// Writes to a sibling temporary first so a failed or interrupted save never
// leaves a truncated checkpoint under the final name.
void save_checkpoint_atomic(const fs::path& path, const Model& model, std::uint64_t hash) {
  fs::path tmp = path;
  tmp += ".partial";
  try {
    save_checkpoint(tmp, model.params(), hash);
    fs::rename(tmp, path);
  } catch (...) {
    std::error_code ec;
    fs::remove(tmp, ec);
    throw;
  }
}

MetricsReport evaluate_report(const Model& model, const Prepared& p, const RunConfig& cfg, std::size_t steps,
                              bool groups, bool few_shot, bool timing) {
  auto ranked = evaluate_model(model, p.split.test, steps);
  auto report = build_report(ranked, steps, cfg.seed, cfg.hash());
  if (groups) {
    for (GroupKind kind : {GroupKind::kTargetTransition, GroupKind::kTransitionRate, GroupKind::kDomainCount}) {
      report.groups.push_back(group_metrics(p.split.test, ranked, cfg.groups.spec(kind)));
    }
  }
  if (few_shot) report.groups.push_back(group_metrics(p.split.test, ranked, cfg.groups.spec(GroupKind::kFewShot)));
  if (timing) {
    const std::vector<std::size_t> steps_grid{1, 2, 4, 8, 16};
    report.timing = timing_report(model, p.split, cfg.train, cfg.loss, cfg.train.batch_size, steps_grid);
  }
  return report;
}

int cmd_synth(const CommonFlags& common) {
  if (common.config.empty()) throw ConfigError("synth needs --config");
  SynthConfig sc = synth_config_from_json(read_json(common.config));
  const std::uint64_t seed = common.seed.value_or(42);
  ensure_dir(common.out);
  auto records = synth_generate(sc, seed);
  const fs::path csv = fs::path(common.out) / "interactions.csv";
  write_interactions_csv(csv, records);
  json cfg_json = synth_config_to_json(sc);
  write_json(fs::path(common.out) / "manifest.json",
             {{"config_hash", hash_hex(fnv1a64(cfg_json.dump()))},
              {"seed", seed},
              {"interactions", records.size()},
              {"users", sc.num_users},
              {"items", sc.items_per_domain * static_cast<std::size_t>(sc.num_domains)},
              {"file", "interactions.csv"},
              {"config", cfg_json}});
  std::cout << "wrote " << records.size() << " interactions to " << csv.string() << '\n';
  return 0;
}

int cmd_preprocess(const CommonFlags& common, const RunOverrides& over) {
  RunConfig cfg = resolve_run_config(common, over);
  require_dataset(cfg);
  ensure_dir(common.out);
  Prepared p = prepare(cfg);
  save_prepared(common.out, p);
  json manifest = base_manifest(cfg);
  manifest["raw_records"] = p.raw_records;
  manifest["malformed_rows"] = p.malformed;
  manifest["kept_records"] = p.kept_records;
  manifest["filter_rounds"] = p.filter_rounds;
  manifest["split"] = split_summary(p);
  manifest["warnings"] = p.split.warnings;
  write_json(fs::path(common.out) / "manifest.json", manifest);
  std::cout << "users " << p.split.train.size() << ", items " << p.vocab.size() << '\n';
  return 0;
}

int cmd_train(const CommonFlags& common, const RunOverrides& over, const std::string& data_dir) {
  RunConfig cfg = resolve_run_config(common, over);
  if (data_dir.empty()) require_dataset(cfg);
  ensure_dir(common.out);
  const fs::path out(common.out);
  Prepared p = load_or_prepare(cfg, data_dir);
  if (data_dir.empty()) save_prepared(out, p);

  Model model = build_model(cfg, p.vocab);
  const fs::path log_path = out / "train_log.csv";
  std::ofstream log(log_path);
  if (!log) throw IoError("cannot write " + log_path.string());
  log << "epoch,loss_rec,loss_prior,loss_gmm,val_ndcg10,seconds\n";

  FitResult fit_result;
  const fs::path ckpt = out / "model.ckpt";
  try {
    fit_result = fit(model, p.split, cfg.train, cfg.loss, [&](const EpochStats& s, double val) {
      char line[256];
      std::snprintf(line, sizeof(line), "%zu,%.10g,%.10g,%.10g,%.10g,%.6f", s.epoch, s.rec, s.prior, s.gmm, val,
                    s.seconds);
      log << line << '\n' << std::flush;
      std::cerr << "epoch " << s.epoch << " rec " << s.rec << " val_ndcg10 " << val << '\n';
    });
  } catch (...) {
    std::error_code ec;
    fs::remove(ckpt, ec);
    throw;
  }
  save_checkpoint_atomic(ckpt, model, fnv1a64(cfg.to_json().dump()));

  MetricsReport report = evaluate_report(model, p, cfg, cfg.flow.steps, true, true, false);
  json j = report.to_json();
  j["best_epoch"] = fit_result.best_epoch;
  j["epochs_run"] = fit_result.epochs.size();
  j["stopped_early"] = fit_result.stopped_early;
  j["val_ndcg10"] = fit_result.val_ndcg10;
  write_json(out / "metrics.json", j);
  write_json(out / "run_config.json", cfg.to_json());
  std::cout << "test group NDCG@10 " << report.group_ndcg10 << " (best epoch " << fit_result.best_epoch << ")\n";
  return 0;
}

int cmd_eval(const CommonFlags& common, const RunOverrides& over, const std::string& checkpoint,
             const std::string& data_dir, bool groups, bool few_shot, bool timing) {
  RunConfig cfg = resolve_run_config(common, over);
  if (data_dir.empty()) require_dataset(cfg);
  Prepared p = load_or_prepare(cfg, data_dir);
  Model model = build_model(cfg, p.vocab);
  // Shapes are checked against the config; the stored hash is reported but
  // not enforced since --steps legitimately changes it.
  const std::uint64_t stored = load_checkpoint(checkpoint, model.params());
  MetricsReport report = evaluate_report(model, p, cfg, cfg.flow.steps, groups, few_shot, timing);
  json j = report.to_json();
  j["checkpoint_config_hash"] = hash_hex(stored);
  if (common.out.empty()) {
    std::cout << j.dump(2) << '\n';
  } else {
    write_json(common.out, j);
  }
  return 0;
}

// Dataset statistics behind the grouping analyses: bucket sizes for every
// grouping kind and the popularity baseline, without a trained model.
int cmd_analyze(const CommonFlags& common, const RunOverrides& over, const std::string& data_dir) {
  RunConfig cfg = resolve_run_config(common, over);
  if (data_dir.empty()) require_dataset(cfg);
  Prepared p = load_or_prepare(cfg, data_dir);
  json j = base_manifest(cfg);
  j.erase("config");
  j["split"] = split_summary(p);
  auto pop = evaluate_popularity(p.split, p.vocab.size(), p.split.test);
  j["popularity_group_ndcg10"] = group_ndcg10(pop);
  json groups = json::object();
  for (GroupKind kind : {GroupKind::kTargetTransition, GroupKind::kTransitionRate, GroupKind::kDomainCount,
                         GroupKind::kFewShot}) {
    auto report = group_metrics(p.split.test, pop, cfg.groups.spec(kind));
    json buckets = json::array();
    for (const auto& b : report.buckets) {
      buckets.push_back({{"bucket", b.name}, {"count", b.count}, {"popularity_ndcg10", b.ndcg10}});
    }
    groups[std::string(group_kind_name(kind))] = buckets;
  }
  j["groups"] = groups;
  if (common.out.empty()) {
    std::cout << j.dump(2) << '\n';
  } else {
    write_json(common.out, j);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GMFlowRec: multi-domain sequential recommendation with Gaussian mixture flow matching"};
  app.require_subcommand(1);
  CommonFlags common;
  RunOverrides over;
  std::uint64_t seed_value = 0;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "JSON config file");
    sub->add_option("--seed", seed_value, "random seed (overrides the config)");
    sub->add_option("--out", common.out, "output path");
    sub->add_option("--threads", common.threads, "worker threads")->check(CLI::PositiveNumber);
  };
  auto add_run = [&](CLI::App* sub) {
    sub->add_option("--data", over.data, "interaction log (overrides data.interactions)");
    sub->add_option("--negatives", over.negatives, "sampled negatives per evaluation instance");
  };

  auto* synth = app.add_subcommand("synth", "generate a synthetic multi-domain interaction log");
  add_common(synth);

  auto* preprocess = app.add_subcommand("preprocess", "filter, sequence and split an interaction log");
  add_common(preprocess);
  add_run(preprocess);

  std::string data_dir;
  auto* train = app.add_subcommand("train", "train a model and report test metrics");
  add_common(train);
  add_run(train);
  train->add_option("--data-dir", data_dir, "directory written by preprocess");
  train->add_option("--epochs", over.epochs, "maximum epochs");
  train->add_option("--lr", over.lr, "learning rate");
  train->add_option("--batch-size", over.batch_size, "sequences per batch");
  train->add_option("--steps", over.steps, "solver steps");

  std::string checkpoint;
  bool groups = false, few_shot = false, timing = false;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  add_common(eval);
  add_run(eval);
  eval->add_option("checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--data-dir", data_dir, "directory written by preprocess");
  eval->add_flag("--group", groups, "transition, transition-rate and domain-count buckets");
  eval->add_flag("--few-shot", few_shot, "few-shot versus regular buckets");
  eval->add_flag("--timing", timing, "inference and training wall-clock measurements");
  eval->add_option("--steps", over.steps, "solver steps (overrides flow.steps)")->check(CLI::PositiveNumber);

  auto* analyze = app.add_subcommand("analyze", "dataset statistics and grouping bucket sizes");
  add_common(analyze);
  add_run(analyze);
  analyze->add_option("--data-dir", data_dir, "directory written by preprocess");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    auto* active = app.get_subcommands().front();
    if (active->count("--seed") > 0) common.seed = seed_value;
    if (active == synth) return cmd_synth(common);
    if (active == preprocess) return cmd_preprocess(common, over);
    if (active == train) return cmd_train(common, over, data_dir);
    if (active == eval) return cmd_eval(common, over, checkpoint, data_dir, groups, few_shot, timing);
    if (active == analyze) return cmd_analyze(common, over, data_dir);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
