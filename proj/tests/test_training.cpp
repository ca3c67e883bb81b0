#include <doctest.h>

#include <cmath>
#include <random>

#include "gmflow/errors.hpp"
#include "gmflow/model.hpp"
#include "gmflow/synth.hpp"
#include "gmflow/training.hpp"

using namespace gmflow;

namespace {

struct Toy {
  Vocab vocab;
  SplitDataset split;
};

Toy toy_dataset(std::size_t users, std::uint64_t seed) {
  SynthConfig sc;
  sc.num_users = users;
  sc.items_per_domain = 20;
  sc.min_length = 10;
  sc.max_length = 14;
  sc.transition = SynthConfig::uniform_transition(3, 0.3);
  sc.zipf_exponent = {1, 1, 1};
  sc.intent_scale = 8.0;
  auto filtered = filter_core(synth_generate(sc, seed), {5, 3}, 3);
  auto seqs = build_sequences(filtered.records, filtered.vocab, 20);
  Toy t{filtered.vocab, leave_one_out_split(seqs, filtered.vocab, seed, 5)};
  return t;
}

ModelConfig small_config(const Vocab& vocab, std::size_t dim = 8, std::size_t components = 2, double dropout = 0.0) {
  EncoderConfig ec;
  ec.dim = dim;
  ec.layers = 1;
  ec.heads = 2;
  ec.max_len = 20;
  ec.dropout = dropout;
  FlowConfig fc;
  fc.components = components;
  return ModelConfig::for_vocab(vocab, ec, fc);
}

ModelConfig two_domain_config(std::size_t n0, std::size_t n1, std::size_t dim) {
  ModelConfig cfg;
  cfg.encoder.dim = dim;
  cfg.encoder.heads = 1;
  cfg.domain_sizes = {n0, n1};
  return cfg;
}

}  // namespace

TEST_CASE("prior and rec loss examples") {
  auto cfg = two_domain_config(2, 3, 2);
  Tensor emb = Tensor::from_rows({{1, 0}, {0, 1}, {0.3, 0.1}, {-1, 2}, {4, 4}});
  const std::vector<double> z{1, 0};
  CHECK(prior_loss(z, 0, 0, emb, cfg) == doctest::Approx(std::log1p(std::exp(-1.0))).epsilon(1e-14));
  CHECK(rec_loss(z, 0, 0, emb, cfg) == doctest::Approx(0.3133).epsilon(1e-4));

  const std::vector<double> zero{0, 0};
  CHECK(rec_loss(zero, 3, 1, emb, cfg) == doctest::Approx(std::log(3.0)).epsilon(1e-14));

  CHECK_THROWS_AS(prior_loss(z, 3, 0, emb, cfg), DomainMismatchError);
}

TEST_CASE("domain softmax loss is shift invariant") {
  // A constant shared column turns a shift of z into a shift of every logit.
  auto cfg = two_domain_config(3, 1, 3);
  std::mt19937_64 rng(3);
  Tensor emb = Tensor::matrix(4, 3);
  for (std::size_t r = 0; r < 4; ++r) {
    emb(r, 0) = std::uniform_real_distribution<double>(-1, 1)(rng);
    emb(r, 1) = std::uniform_real_distribution<double>(-1, 1)(rng);
    emb(r, 2) = 1.0;
  }
  const std::vector<double> z{0.4, -0.7, 0.0};
  const std::vector<double> shifted{0.4, -0.7, 25.0};
  for (std::size_t target = 0; target < 3; ++target) {
    CHECK(prior_loss(z, target, 0, emb, cfg) == doctest::Approx(prior_loss(shifted, target, 0, emb, cfg)).epsilon(1e-12));
  }
}

TEST_CASE("graph loss matches the value form per row") {
  auto toy = toy_dataset(30, 3);
  Model model(small_config(toy.vocab), 1);
  std::mt19937_64 rng(5);
  const std::size_t n = 12;
  Tensor z = Tensor::matrix(n, 8);
  for (auto& v : z.data()) v = std::uniform_real_distribution<double>(-1, 1)(rng);
  std::vector<std::size_t> targets(n);
  std::vector<int> domains(n);
  for (std::size_t i = 0; i < n; ++i) {
    targets[i] = rng() % toy.vocab.size();
    domains[i] = toy.vocab.domain_of(targets[i]);
  }
  Graph g(&model.params());
  auto bound = model.bind(g);
  auto loss = domain_softmax_nll(g, g.constant(z), bound.encoder.item_emb, targets, domains, model.config());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double expect = rec_loss(z.row_span(i), targets[i], domains[i], model.item_embeddings(), model.config());
    CHECK(std::abs(loss.each[i] - expect) < 1e-12);
    total += expect;
  }
  CHECK(std::abs(g.value(loss.sum)[0] - total) < 1e-10);
  domains[0] = (domains[0] + 1) % 3;
  CHECK_THROWS_AS(domain_softmax_nll(g, g.constant(z), bound.encoder.item_emb, targets, domains, model.config()),
                  DomainMismatchError);
}

TEST_CASE("total loss decomposition") {
  auto toy = toy_dataset(30, 4);
  Model model(small_config(toy.vocab), 2);
  std::vector<const UserSequence*> batch{&toy.split.train[0], &toy.split.train[1], &toy.split.train[2]};
  std::size_t n = 0;
  for (auto* s : batch) n += instance_count(*s);
  std::mt19937_64 rng(6);
  std::vector<double> t(n);
  for (auto& v : t) v = sample_flow_time(rng);

  SUBCASE("alpha = beta = 0 gives the mean rec loss bitwise") {
    Graph g(&model.params());
    auto loss = batch_loss(g, model, batch, t, {0.0, 0.0});
    CHECK(g.value(loss.total)[0] == g.value(loss.rec)[0]);
    CHECK(loss.instances == n);
  }

  SUBCASE("per-domain regrouping equals the instance mean") {
    const LossWeights w{0.5, 0.01};
    Graph g(&model.params());
    auto loss = batch_loss(g, model, batch, t, w);
    double by_domain[3] = {0, 0, 0};
    for (std::size_t i = 0; i < n; ++i) {
      by_domain[loss.domain_each[i]] += loss.rec_each[i] + w.alpha * loss.prior_each[i] + w.beta * loss.gmm_each[i];
    }
    const double regrouped = (by_domain[0] + by_domain[1] + by_domain[2]) / static_cast<double>(n);
    CHECK(std::abs(regrouped - g.value(loss.total)[0]) < 1e-12);
  }

  SUBCASE("single instance batch") {
    UserSequence two = toy.split.train[0];
    two.items.resize(2);
    two.domains.resize(2);
    std::vector<const UserSequence*> one{&two};
    const std::vector<double> t1{0.37};
    const LossWeights w{0.5, 0.01};
    Graph g(&model.params());
    auto loss = batch_loss(g, model, one, t1, w);
    REQUIRE(loss.instances == 1);
    const double expect = loss.rec_each[0] + (w.alpha * loss.prior_each[0] + w.beta * loss.gmm_each[0]);
    CHECK(g.value(loss.total)[0] == expect);
  }
}

TEST_CASE("full loss gradient matches finite differences for every parameter") {
  auto toy = toy_dataset(30, 5);
  Model model(small_config(toy.vocab, 8, 2), 3);
  UserSequence a = toy.split.train[0], b = toy.split.train[1];
  a.items.resize(2);
  a.domains.resize(2);
  b.items.resize(2);
  b.domains.resize(2);
  std::vector<const UserSequence*> batch{&a, &b};
  const std::vector<double> t{0.3, 0.8};
  const LossWeights w{0.5, 0.01};
  auto build = [&](Graph& g) { return batch_loss(g, model, batch, t, w).total; };
  for (ParamId p = 0; p < model.params().size(); ++p) {
    INFO(model.params().name(p));
    CHECK(finite_difference_check(model.params(), p, build, 1e-5, 100, p) < 1e-4);
  }
}

TEST_CASE("flow time distribution") {
  std::mt19937_64 rng(42);
  double sum = 0.0;
  for (int i = 0; i < 100000; ++i) {
    const double t = sample_flow_time(rng);
    REQUIRE(t >= 0.0);
    REQUIRE(t < 1.0);
    sum += t;
  }
  const double mean = sum / 100000.0;
  CHECK(mean >= 0.497);
  CHECK(mean <= 0.503);
}

TEST_CASE("adam: zero learning rate or zero gradient leaves parameters unchanged") {
  auto toy = toy_dataset(30, 6);
  Model model(small_config(toy.vocab), 4);
  const auto before = model.params().values();
  auto opt = OptimizerState::for_params(model.params());

  adam_step(model.params(), model.params().zeros_like(), opt, 1e-3);
  CHECK(model.params().values() == before);

  TrainConfig cfg;
  cfg.learning_rate = 0.0;
  cfg.batch_size = 8;
  std::mt19937_64 rng(1);
  auto opt2 = OptimizerState::for_params(model.params());
  train_epoch(toy.split, model, opt2, cfg, {}, rng);
  CHECK(model.params().values() == before);
}

TEST_CASE("adam step matches the bias-corrected closed form") {
  ParameterStore ps;
  ParamId x = ps.add("x", Tensor::from_rows({{1.0, -2.0}}));
  auto opt = OptimizerState::for_params(ps);
  const std::vector<Tensor> grads{Tensor::from_rows({{0.5, -3.0}})};
  adam_step(ps, grads, opt, 0.1);
  // First step: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps).
  CHECK(ps.value(x)(0, 0) == doctest::Approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8)).epsilon(1e-14));
  CHECK(ps.value(x)(0, 1) == doctest::Approx(-2.0 + 0.1 * 3.0 / (3.0 + 1e-8)).epsilon(1e-14));
  CHECK(opt.step == 1);
}

TEST_CASE("training lowers the loss on a 50-user dataset") {
  auto toy = toy_dataset(50, 7);
  Model model(small_config(toy.vocab, 16, 2, 0.1), 5);
  auto opt = OptimizerState::for_params(model.params());
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.batch_size = 8;
  std::mt19937_64 rng(9);
  std::vector<double> totals;
  for (int e = 0; e < 5; ++e) totals.push_back(train_epoch(toy.split, model, opt, cfg, {}, rng).total);
  CHECK(totals.back() < totals.front());
}

TEST_CASE("training is deterministic for a fixed seed") {
  auto toy = toy_dataset(30, 8);
  auto run = [&] {
    Model model(small_config(toy.vocab, 8, 2, 0.1), 6);
    auto opt = OptimizerState::for_params(model.params());
    TrainConfig cfg;
    cfg.learning_rate = 1e-3;
    cfg.batch_size = 4;
    std::mt19937_64 rng(11);
    auto stats = train_epoch(toy.split, model, opt, cfg, {}, rng);
    stats.seconds = 0.0;
    return std::make_pair(stats, model.params().values());
  };
  auto first = run();
  auto second = run();
  CHECK(first.first == second.first);
  CHECK(first.second == second.second);
}

TEST_CASE("numerical failure rolls the epoch back") {
  auto toy = toy_dataset(30, 9);
  Model model(small_config(toy.vocab), 7);
  auto opt = OptimizerState::for_params(model.params());
  model.params().value(model.encoder_ids().item_emb)(0, 0) = 1e300;
  const auto before = model.params().values();
  const auto opt_before = opt;
  TrainConfig cfg;
  cfg.batch_size = 2;
  std::mt19937_64 rng(1);
  CHECK_THROWS_AS(train_epoch(toy.split, model, opt, cfg, {}, rng), NumericsError);
  CHECK(model.params().values() == before);
  CHECK(opt == opt_before);
}

TEST_CASE("early stopping rule") {
  const std::vector<double> h1{0.2, 0.3, 0.29, 0.28, 0.27};
  auto d1 = early_stop(h1, 3);
  CHECK(d1.stop);
  CHECK(d1.best_index == 1);
  // The decision is already "stop" at index 4 but not before.
  CHECK_FALSE(early_stop(std::span<const double>(h1.data(), 4), 3).stop);

  const std::vector<double> rising{0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
  for (std::size_t n = 1; n <= rising.size(); ++n) CHECK_FALSE(early_stop(std::span<const double>(rising.data(), n), 2).stop);

  const std::vector<double> h3{0.2, 0.19};
  CHECK(early_stop(h3, 1).stop);
}

TEST_CASE("fit restores the best parameters and reports the untrained baseline") {
  auto toy = toy_dataset(40, 10);
  Model model(small_config(toy.vocab, 8, 2, 0.1), 8);
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.batch_size = 8;
  cfg.max_epochs = 3;
  cfg.patience = 10;
  auto result = fit(model, toy.split, cfg, {});
  CHECK(result.val_ndcg10.size() == 4);
  CHECK(result.epochs.size() == 3);
  for (std::size_t i = 0; i < result.val_ndcg10.size(); ++i) CHECK(result.val_ndcg10[i] <= result.val_ndcg10[result.best_epoch]);

  Model untouched(small_config(toy.vocab, 8, 2, 0.1), 8);
  cfg.max_epochs = 0;
  auto none = fit(untouched, toy.split, cfg, {});
  CHECK(none.epochs.empty());
  CHECK(none.val_ndcg10.size() == 1);
  CHECK(untouched.params() == Model(small_config(toy.vocab, 8, 2, 0.1), 8).params());
}

TEST_CASE("config validation") {
  TrainConfig cfg;
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.learning_rate = -1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  LossWeights w{-0.1, 0.0};
  CHECK_THROWS_AS(w.validate(), ConfigError);
  w = {0.0, std::nan("")};
  CHECK_THROWS_AS(w.validate(), ConfigError);
}
