#include <doctest.h>

#include <random>

#include "gmflow/encoder.hpp"
#include "gmflow/errors.hpp"

using namespace gmflow;

namespace {

struct Fixture {
  EncoderConfig cfg;
  ParameterStore store;
  EncoderIds ids;
  std::size_t num_items;
  int num_domains;

  Fixture(std::size_t items = 30, int domains = 3, std::size_t dim = 8, std::size_t layers = 2)
      : num_items(items), num_domains(domains) {
    cfg.dim = dim;
    cfg.layers = layers;
    cfg.heads = 2;
    cfg.max_len = 50;
    cfg.dropout = 0.0;
    std::mt19937_64 rng(19);
    ids = register_encoder(store, cfg, num_items, num_domains, rng);
  }
};

std::vector<int> random_domains(std::mt19937_64& rng, std::size_t m, int num_domains) {
  std::vector<int> d(m);
  for (auto& x : d) x = static_cast<int>(rng() % num_domains);
  return d;
}

Tensor run_encoder(const Fixture& f, const std::vector<std::size_t>& items, const std::vector<int>& domains,
                   bool domain_specific) {
  Graph g(&f.store, false);
  auto vars = bind_encoder(g, f.ids);
  auto enc = encode_sequence(g, vars, f.cfg, items, domains);
  return g.value(domain_specific ? enc.ds : enc.di);
}

}  // namespace

TEST_CASE("DI mask examples") {
  Mask m3 = build_di_mask(3);
  const int expected[3][3] = {{1, 0, 0}, {1, 1, 0}, {1, 1, 1}};
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) CHECK(m3(r, c) == (expected[r][c] == 1));
  }
  Mask m1 = build_di_mask(1);
  CHECK(m1(0, 0));
  Mask m7 = build_di_mask(7);
  for (std::size_t r = 0; r < 7; ++r) {
    std::size_t ones = 0;
    for (std::size_t c = 0; c < 7; ++c) ones += m7(r, c);
    CHECK(ones == r + 1);
  }
}

TEST_CASE("DS mask examples") {
  const std::vector<int> aba{0, 1, 0};
  Mask m = build_ds_mask(aba);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 3; ++c) {
      const bool allowed = (r == 0 && c == 0) || (r == 1 && c == 1) || (r == 2 && c == 0) || (r == 2 && c == 2);
      CHECK(m(r, c) == allowed);
    }
  }
  const std::vector<int> single(6, 2);
  CHECK(build_ds_mask(single) == build_di_mask(6));
}

TEST_CASE("DS mask equals DI mask AND same-domain matrix (1000 sequences)") {
  std::mt19937_64 rng(41);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t m = 1 + rng() % 50;
    auto domains = random_domains(rng, m, 1 + static_cast<int>(rng() % 5));
    Mask di = build_di_mask(m);
    Mask ds = build_ds_mask(domains);
    for (std::size_t r = 0; r < m; ++r) {
      CHECK(ds(r, r));
      for (std::size_t c = 0; c < m; ++c) REQUIRE(ds(r, c) == (di(r, c) && domains[r] == domains[c]));
    }
  }
}

TEST_CASE("embed_sequence adds item, domain and position rows") {
  ParameterStore store;
  EncoderIds ids;
  ids.item_emb = store.add("emb.item", Tensor::from_rows({{1, 0}, {0, 3}}));
  ids.domain_emb = store.add("emb.domain", Tensor::from_rows({{0, 1}}));
  ids.pos_emb = store.add("emb.position", Tensor::from_rows({{1, 1}, {2, 2}}));
  ids.final_gain = store.add("g", Tensor::matrix(1, 2, 1.0));
  ids.final_bias = store.add("b", Tensor::matrix(1, 2, 0.0));
  Graph g(&store, false);
  auto vars = bind_encoder(g, ids);
  const std::vector<std::size_t> one{0};
  const std::vector<int> dom{0};
  CHECK(g.value(embed_sequence(g, vars, one, dom)) == Tensor::from_rows({{2, 2}}));

  const std::vector<std::size_t> two{0, 1};
  const std::vector<int> dom2{0, 0};
  const std::vector<std::size_t> swapped{1, 0};
  CHECK(g.value(embed_sequence(g, vars, two, dom2)) == Tensor::from_rows({{2, 2}, {2, 6}}));
  CHECK(g.value(embed_sequence(g, vars, swapped, dom2)) == Tensor::from_rows({{1, 5}, {3, 3}}));

  const std::vector<std::size_t> bad{2};
  CHECK_THROWS_AS(embed_sequence(g, vars, bad, dom), IndexError);
}

TEST_CASE("embed_sequence with zero domain and position tables returns item rows") {
  Fixture f;
  f.store.value(f.ids.domain_emb) = Tensor::matrix(3, f.cfg.dim, 0.0);
  f.store.value(f.ids.pos_emb) = Tensor::matrix(f.cfg.max_len, f.cfg.dim, 0.0);
  Graph g(&f.store, false);
  auto vars = bind_encoder(g, f.ids);
  const std::vector<std::size_t> items{4, 17, 2};
  const std::vector<int> domains{0, 1, 2};
  const Tensor& x = g.value(embed_sequence(g, vars, items, domains));
  const Tensor& table = f.store.value(f.ids.item_emb);
  for (std::size_t m = 0; m < 3; ++m) {
    for (std::size_t c = 0; c < f.cfg.dim; ++c) CHECK(x(m, c) == table(items[m], c));
  }
}

TEST_CASE("sequence longer than max_len is rejected") {
  Fixture f;
  Graph g(&f.store, false);
  auto vars = bind_encoder(g, f.ids);
  std::vector<std::size_t> items(51, 0);
  std::vector<int> domains(51, 0);
  CHECK_THROWS_AS(embed_sequence(g, vars, items, domains), IndexError);
}

TEST_CASE("DI causality is bitwise") {
  Fixture f;
  std::mt19937_64 rng(43);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 2 + rng() % 20;
    std::vector<std::size_t> items(m);
    for (auto& i : items) i = rng() % f.num_items;
    auto domains = random_domains(rng, m, f.num_domains);
    const std::size_t pos = rng() % (m - 1);
    Tensor base = run_encoder(f, items, domains, false);
    auto perturbed = items;
    perturbed[pos + 1] = (perturbed[pos + 1] + 1) % f.num_items;
    Tensor other = run_encoder(f, perturbed, domains, false);
    for (std::size_t r = 0; r <= pos; ++r) {
      for (std::size_t c = 0; c < f.cfg.dim; ++c) REQUIRE(base(r, c) == other(r, c));
    }
    bool changed = false;
    for (std::size_t c = 0; c < f.cfg.dim; ++c) changed |= base(pos + 1, c) != other(pos + 1, c);
    CHECK(changed);
  }
}

TEST_CASE("DS domain isolation is bitwise") {
  Fixture f;
  std::mt19937_64 rng(47);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 2 + rng() % 20;
    auto domains = random_domains(rng, m, 2);
    std::vector<std::size_t> items(m);
    for (auto& i : items) i = rng() % f.num_items;
    Tensor base = run_encoder(f, items, domains, true);
    // Perturb every domain-1 item; domain-0 rows must not move.
    auto perturbed = items;
    for (std::size_t k = 0; k < m; ++k) {
      if (domains[k] == 1) perturbed[k] = (perturbed[k] + 7) % f.num_items;
    }
    Tensor other = run_encoder(f, perturbed, domains, true);
    for (std::size_t r = 0; r < m; ++r) {
      if (domains[r] != 0) continue;
      for (std::size_t c = 0; c < f.cfg.dim; ++c) REQUIRE(base(r, c) == other(r, c));
    }
  }
}

TEST_CASE("single-item sequence: both masks agree") {
  Fixture f;
  const std::vector<std::size_t> items{5};
  const std::vector<int> domains{1};
  CHECK(run_encoder(f, items, domains, false) == run_encoder(f, items, domains, true));
}

TEST_CASE("both passes use the same parameter nodes") {
  Fixture f;
  Graph g(&f.store);
  auto vars = bind_encoder(g, f.ids);
  const std::size_t before = g.node_count();
  CHECK(g.parameter(f.ids.layers[0].wq) == vars.layers[0].wq);
  const std::vector<std::size_t> items{1, 2, 3};
  const std::vector<int> domains{0, 1, 0};
  auto enc = encode_sequence(g, vars, f.cfg, items, domains);
  // Gradients from either pass land on the same store entries.
  auto grads_di = g.backward(g.sum(enc.di));
  Graph g2(&f.store);
  auto vars2 = bind_encoder(g2, f.ids);
  auto enc2 = encode_sequence(g2, vars2, f.cfg, items, domains);
  auto grads_ds = g2.backward(g2.sum(enc2.ds));
  CHECK(grads_di.size() == f.store.size());
  CHECK(grads_ds.size() == f.store.size());
  bool ds_reaches_wq = false;
  for (double v : grads_ds[f.ids.layers[0].wq].data()) ds_reaches_wq |= v != 0.0;
  CHECK(ds_reaches_wq);
  CHECK(before > 0);
}

TEST_CASE("encode rejects a mask without self-attention") {
  Fixture f;
  Graph g(&f.store, false);
  auto vars = bind_encoder(g, f.ids);
  const std::vector<std::size_t> items{1, 2};
  const std::vector<int> domains{0, 0};
  Var x = embed_sequence(g, vars, items, domains);
  Mask m(2, 2);
  m.set(0, 0, true);
  m.set(1, 0, true);
  CHECK_THROWS(encode(g, vars, f.cfg, x, m));
}

TEST_CASE("domain-aligned prior") {
  ParameterStore store;
  EncoderIds ids;
  ids.domain_emb = store.add("emb.domain", Tensor::from_rows({{0.5, -1}, {0.25, 4}}));
  Graph g(&store, false);
  EncoderVars vars;
  vars.domain_emb = g.parameter(ids.domain_emb);
  Var hds = g.constant(Tensor::from_rows({{9, 9}, {1, 2}, {7, 7}}));

  SUBCASE("latest in-domain state plus domain embedding") {
    const std::vector<int> domains{1, 0, 1};
    CHECK(g.value(domain_aligned_prior(g, vars, hds, domains, 0)) == Tensor::from_rows({{1.5, 1}}));
  }
  SUBCASE("most recent of two in-domain positions") {
    const std::vector<int> domains{0, 1, 0};
    CHECK(latest_in_domain(domains, 2, 0) == 2);
    CHECK(g.value(domain_aligned_prior(g, vars, hds, domains, 0)) == Tensor::from_rows({{7.5, 6}}));
  }
  SUBCASE("cold start is the domain embedding bitwise") {
    const std::vector<int> domains{0, 0, 0};
    CHECK(latest_in_domain(domains, 2, 1) == -1);
    CHECK(g.value(domain_aligned_prior(g, vars, hds, domains, 1)) == Tensor::from_rows({{0.25, 4}}));
  }
}

TEST_CASE("cold-start prior equals the learned domain embedding bitwise") {
  Fixture f;
  Graph g(&f.store, false);
  auto vars = bind_encoder(g, f.ids);
  const std::vector<std::size_t> items{1, 2, 3};
  const std::vector<int> domains{0, 0, 1};
  auto enc = encode_sequence(g, vars, f.cfg, items, domains);
  const Tensor& prior = g.value(domain_aligned_prior(g, vars, enc.ds, domains, 2));
  const Tensor& table = f.store.value(f.ids.domain_emb);
  for (std::size_t c = 0; c < f.cfg.dim; ++c) CHECK(prior(0, c) == table(2, c));
}

TEST_CASE("encoder config validation") {
  EncoderConfig cfg;
  cfg.dim = 7;
  cfg.heads = 2;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.dim = 8;
  cfg.layers = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
