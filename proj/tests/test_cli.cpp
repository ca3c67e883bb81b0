#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <string>
#include <sys/wait.h>

#include <json.hpp>

#include "test_util.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(GMFLOWREC_BIN) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// Runs and returns stderr so error messages can be inspected.
std::pair<int, std::string> run_capture(const std::string& args, const fs::path& scratch) {
  const fs::path err = scratch / "stderr.txt";
  const std::string cmd = std::string(GMFLOWREC_BIN) + " " + args + " > /dev/null 2> " + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, testutil::read_file(err)};
}

json read_json(const fs::path& p) { return json::parse(testutil::read_file(p)); }

const char* kSynth =
    R"({"num_domains": 3, "items_per_domain": 20, "num_users": 60, "min_length": 12, "max_length": 16,
        "off_diagonal_mass": 0.3, "zipf_exponent": 1.0})";

std::string run_config(const fs::path& interactions, int epochs) {
  json j = {{"seed", 7},
            {"data", {{"interactions", interactions.string()}}},
            {"preprocess", {{"user_core", 5}, {"item_core", 5}, {"num_negatives", 4}}},
            {"encoder", {{"dim", 8}, {"layers", 1}, {"heads", 2}}},
            {"train", {{"max_epochs", epochs}, {"batch_size", 16}, {"learning_rate", 1e-3}}}};
  return j.dump();
}

// Shared toy pipeline: synth -> train; built once per test case.
struct Toy {
  testutil::TempDir dir;
  fs::path csv, cfg, train_out;

  explicit Toy(int epochs = 2) {
    testutil::write_file(dir / "synth.json", kSynth);
    REQUIRE(run("synth --config " + (dir / "synth.json").string() + " --seed 3 --out " +
                (dir / "data").string()) == 0);
    csv = dir.path() / "data" / "interactions.csv";
    cfg = dir / "run.json";
    testutil::write_file(cfg, run_config(csv, epochs));
    train_out = dir.path() / "train";
  }
  int train() { return run("train --config " + cfg.string() + " --out " + train_out.string()); }
};

}  // namespace

TEST_CASE("usage errors exit with code 2") {
  CHECK(run("") != 0);
  CHECK(run("frobnicate") == 2);
  CHECK(run("train --threads 0") == 2);
  CHECK(run("eval") == 2);
}

TEST_CASE("synth output is byte-identical for a fixed seed") {
  testutil::TempDir dir;
  testutil::write_file(dir / "synth.json", kSynth);
  const std::string base = "synth --config " + (dir / "synth.json").string() + " --seed 11 --out ";
  REQUIRE(run(base + (dir / "a").string()) == 0);
  REQUIRE(run(base + (dir / "b").string()) == 0);
  CHECK(testutil::read_file(dir.path() / "a" / "interactions.csv") ==
        testutil::read_file(dir.path() / "b" / "interactions.csv"));
  auto manifest = read_json(dir.path() / "a" / "manifest.json");
  CHECK(manifest.at("seed") == 11);
  CHECK(manifest.at("config_hash").get<std::string>().size() == 16);
}

TEST_CASE("synth rejects a transition row that does not sum to one") {
  testutil::TempDir dir;
  testutil::write_file(dir / "bad.json",
                       R"({"num_domains": 2, "transition": [[0.5, 0.5], [0.9, 0.3]], "zipf_exponent": 1.0})");
  auto [code, err] = run_capture("synth --config " + (dir / "bad.json").string() + " --out " +
                                     (dir / "o").string(),
                                 dir.path());
  CHECK(code == 2);
  CHECK(err.find("row 1") != std::string::npos);
}

TEST_CASE("missing dataset fails before any compute") {
  testutil::TempDir dir;
  testutil::write_file(dir / "run.json", run_config(dir / "nope.csv", 1));
  CHECK(run("train --config " + (dir / "run.json").string() + " --out " + (dir / "o").string()) == 2);
  CHECK(!fs::exists(dir.path() / "o" / "model.ckpt"));
}

TEST_CASE("too many negatives is a data error") {
  Toy toy;
  CHECK(run("preprocess --config " + toy.cfg.string() + " --negatives 50 --out " +
            (toy.dir / "p").string()) == 3);
}

TEST_CASE("train writes checkpoint, log and metrics; eval is reproducible") {
  Toy toy;
  REQUIRE(toy.train() == 0);
  for (const char* f : {"model.ckpt", "train_log.csv", "metrics.json", "run_config.json"}) {
    CHECK(fs::exists(toy.train_out / f));
  }
  const std::string log = testutil::read_file(toy.train_out / "train_log.csv");
  CHECK(log.rfind("epoch,loss_rec,loss_prior,loss_gmm,val_ndcg10,seconds\n", 0) == 0);

  auto metrics = read_json(toy.train_out / "metrics.json");
  CHECK(metrics.at("schema") == "gmflowrec.metrics.v1");
  CHECK(metrics.at("seed") == 7);
  for (const char* key : {"group_ndcg10", "domains", "config_hash", "solver_steps", "instances"}) {
    CHECK(metrics.contains(key));
  }

  const std::string ckpt = (toy.train_out / "model.ckpt").string();
  const std::string base = "eval " + ckpt + " --config " + toy.cfg.string() + " --data-dir " +
                           toy.train_out.string();
  for (int steps : {1, 8}) {
    const fs::path out = toy.dir / ("eval" + std::to_string(steps) + ".json");
    REQUIRE(run(base + " --steps " + std::to_string(steps) + " --out " + out.string()) == 0);
    auto j = read_json(out);
    CHECK(j.at("solver_steps") == steps);
    const double v = j.at("group_ndcg10").get<double>();
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }

  const fs::path g1 = toy.dir / "g1.json", g2 = toy.dir / "g2.json";
  REQUIRE(run(base + " --group --few-shot --out " + g1.string()) == 0);
  REQUIRE(run(base + " --group --few-shot --out " + g2.string()) == 0);
  CHECK(testutil::read_file(g1) == testutil::read_file(g2));
  auto groups = read_json(g1).at("groups");
  for (const char* kind : {"target_transition", "transition_rate", "domain_count", "few_shot"}) {
    REQUIRE(groups.contains(kind));
    std::size_t total = 0;
    for (const auto& b : groups.at(kind)) total += b.at("count").get<std::size_t>();
    CHECK(total == read_json(g1).at("instances").get<std::size_t>());
  }
}

TEST_CASE("eval rejects a checkpoint from a different architecture") {
  Toy toy;
  REQUIRE(toy.train() == 0);
  json other = json::parse(run_config(toy.csv, 1));
  other["encoder"]["dim"] = 16;
  testutil::write_file(toy.dir / "other.json", other.dump());
  CHECK(run("eval " + (toy.train_out / "model.ckpt").string() + " --config " + (toy.dir / "other.json").string() +
            " --data-dir " + toy.train_out.string()) == 2);
}

TEST_CASE("max_epochs 0 evaluates the initial parameters") {
  Toy toy(0);
  REQUIRE(toy.train() == 0);
  auto metrics = read_json(toy.train_out / "metrics.json");
  CHECK(metrics.at("epochs_run") == 0);
  CHECK(fs::exists(toy.train_out / "model.ckpt"));
}

TEST_CASE("identity transitions leave the with-transition bucket empty") {
  testutil::TempDir dir;
  testutil::write_file(dir / "synth.json",
                       R"({"num_domains": 3, "items_per_domain": 20, "num_users": 60, "min_length": 12,
                           "max_length": 16, "transition": [[1,0,0],[0,1,0],[0,0,1]], "zipf_exponent": 1.0})");
  REQUIRE(run("synth --config " + (dir / "synth.json").string() + " --seed 5 --out " + (dir / "d").string()) == 0);
  testutil::write_file(dir / "run.json", run_config(dir.path() / "d" / "interactions.csv", 1));
  REQUIRE(run("train --config " + (dir / "run.json").string() + " --out " + (dir / "t").string()) == 0);
  const fs::path out = dir / "g.json";
  REQUIRE(run("eval " + (dir.path() / "t" / "model.ckpt").string() + " --config " + (dir / "run.json").string() +
              " --data-dir " + (dir / "t").string() + " --group --out " + out.string()) == 0);
  for (const auto& b : read_json(out).at("groups").at("target_transition")) {
    if (b.at("bucket") == "w/ transition") CHECK(b.at("count") == 0);
  }
}

TEST_CASE("preprocess and analyze") {
  Toy toy;
  const fs::path prep = toy.dir / "prep";
  REQUIRE(run("preprocess --config " + toy.cfg.string() + " --out " + prep.string()) == 0);
  for (const char* f : {"split.bin", "vocab.json", "manifest.json"}) CHECK(fs::exists(prep / f));
  const fs::path out = toy.dir / "analyze.json";
  REQUIRE(run("analyze --config " + toy.cfg.string() + " --data-dir " + prep.string() + " --out " + out.string()) ==
          0);
  auto j = read_json(out);
  CHECK(j.contains("groups"));
  CHECK(j.at("groups").contains("domain_count"));
}
