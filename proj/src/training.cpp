#include "gmflow/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "gmflow/errors.hpp"
#include "gmflow/evaluation.hpp"
#include "gmflow/random.hpp"

namespace gmflow {

void LossWeights::validate() const {
  if (!(std::isfinite(alpha) && alpha >= 0.0)) throw ConfigError("loss.alpha must be finite and >= 0");
  if (!(std::isfinite(beta) && beta >= 0.0)) throw ConfigError("loss.beta must be finite and >= 0");
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0)) throw ConfigError("train.learning_rate must be >= 0");
  if (batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
  if (patience == 0) throw ConfigError("train.patience must be >= 1");
  if (eval_steps == 0) throw ConfigError("train.eval_steps must be >= 1");
}

// ---------------------------------------------------------------------------
// Adam

OptimizerState OptimizerState::for_params(const ParameterStore& params, AdamConfig coeffs) {
  OptimizerState s;
  s.first = params.zeros_like();
  s.second = params.zeros_like();
  s.coeffs = coeffs;
  return s;
}

void adam_step(ParameterStore& params, const std::vector<Tensor>& grads, OptimizerState& state, double lr) {
  if (grads.size() != params.size() || state.first.size() != params.size()) {
    throw ShapeError("optimizer state does not match parameter store");
  }
  ++state.step;
  const auto& c = state.coeffs;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (ParamId id = 0; id < params.size(); ++id) {
    auto& p = params.value(id);
    auto& m = state.first[id];
    auto& v = state.second[id];
    const auto& g = grads[id];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      p[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + c.epsilon);
    }
  }
}

// ---------------------------------------------------------------------------
// Losses

double domain_softmax_nll(std::span<const double> z, std::size_t target, int domain, const Tensor& item_emb,
                          const ModelConfig& cfg) {
  const std::size_t offset = cfg.domain_offset(domain);
  const std::size_t n = cfg.domain_sizes[static_cast<std::size_t>(domain)];
  if (target < offset || target >= offset + n) {
    throw DomainMismatchError("target item " + std::to_string(target) + " is not in domain " + std::to_string(domain));
  }
  std::vector<double> logits(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = item_emb.row_span(offset + i);
    double s = 0.0;
    for (std::size_t j = 0; j < row.size(); ++j) s += z[j] * row[j];
    logits[i] = s;
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double acc = 0.0;
  for (double l : logits) acc += std::exp(l - mx);
  return mx + std::log(acc) - logits[target - offset];
}

DomainLoss domain_softmax_nll(Graph& g, Var z, Var item_table, std::span<const std::size_t> targets,
                              std::span<const int> domains, const ModelConfig& cfg) {
  const std::size_t n = g.value(z).rows();
  if (targets.size() != n || domains.size() != n) throw ShapeError("one target and domain per row required");
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t r = 0; r < n; ++r) groups[domains[r]].push_back(r);
  DomainLoss out;
  out.each.assign(n, 0.0);
  for (const auto& [domain, rows] : groups) {
    const std::size_t offset = cfg.domain_offset(domain);
    const std::size_t size = cfg.domain_sizes[static_cast<std::size_t>(domain)];
    std::vector<std::size_t> local(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto tgt = targets[rows[i]];
      if (tgt < offset || tgt >= offset + size) {
        throw DomainMismatchError("target item " + std::to_string(tgt) + " is not in domain " + std::to_string(domain));
      }
      local[i] = tgt - offset;
    }
    Var zk = z;
    if (rows.size() != n) zk = g.gather_rows(z, std::vector<std::int64_t>(rows.begin(), rows.end()));
    Var table = g.slice_rows(item_table, offset, offset + size);
    Var logits = g.matmul_nt(zk, table);
    Var ce = g.sub(g.log_sum_exp(logits), g.pick(logits, std::move(local)));
    for (std::size_t i = 0; i < rows.size(); ++i) out.each[rows[i]] = g.value(ce)[i];
    Var s = g.sum(ce);
    out.sum = out.sum.valid() ? g.add(out.sum, s) : s;
  }
  return out;
}

BatchLoss batch_loss(Graph& g, const Model& model, std::span<const UserSequence* const> sequences,
                     std::span<const double> t, const LossWeights& weights, DropoutContext dropout) {
  const auto& cfg = model.config();
  const auto bound = model.bind(g);
  std::vector<Var> x1_parts, ds_parts;
  std::vector<std::size_t> targets;
  std::vector<int> target_domains;
  for (const auto* seq : sequences) {
    const std::size_t p = seq->size();
    if (p < 2) continue;
    const auto enc = encode_sequence(g, bound.encoder, cfg.encoder, seq->items, seq->domains, dropout);
    x1_parts.push_back(g.slice_rows(enc.di, 0, p - 1));
    std::vector<std::int64_t> latest(p - 1);
    for (std::size_t m = 0; m + 1 < p; ++m) {
      latest[m] = latest_in_domain(seq->domains, m, seq->domains[m + 1]);
      targets.push_back(seq->items[m + 1]);
      target_domains.push_back(seq->domains[m + 1]);
    }
    ds_parts.push_back(g.gather_rows(enc.ds, std::move(latest)));
  }
  const std::size_t n = targets.size();
  if (n == 0) throw EmptyDatasetError("batch has no training instances");
  if (t.size() != n) throw ShapeError("batch_loss: expected " + std::to_string(n) + " flow times");

  Var x1 = g.concat_rows(x1_parts);
  Var hda = g.add(g.concat_rows(ds_parts),
                  g.gather_rows(bound.encoder.domain_emb, std::vector<std::int64_t>(target_domains.begin(), target_domains.end())));
  Var x0 = g.gather_rows(bound.encoder.item_emb, std::vector<std::int64_t>(targets.begin(), targets.end()));

  std::vector<double> one_minus_t(n), tt(t.begin(), t.end());
  for (std::size_t i = 0; i < n; ++i) {
    if (!(t[i] >= 0.0 && t[i] <= 1.0)) throw DomainError("flow time must be in [0, 1]");
    one_minus_t[i] = 1.0 - t[i];
  }
  Var xt = g.add(g.scale_rows(x0, std::move(one_minus_t)), g.scale_rows(x1, std::move(tt)));
  const double lambda = cfg.flow.lambda;
  Var xbar = g.add(g.affine(xt, lambda), g.affine(x1, 1.0 - lambda));

  const auto head = gmm_head(g, bound.head, cfg.flow, xbar, hda, t);
  Var gmm_rows = gmm_nll_rows(g, head, x0);
  auto rec = domain_softmax_nll(g, head.mean, bound.encoder.item_emb, targets, target_domains, cfg);
  auto prior = domain_softmax_nll(g, hda, bound.encoder.item_emb, targets, target_domains, cfg);

  const double inv_n = 1.0 / static_cast<double>(n);
  BatchLoss out;
  out.instances = n;
  out.rec = g.affine(rec.sum, inv_n);
  out.prior = g.affine(prior.sum, inv_n);
  out.gmm = g.mean(gmm_rows);
  out.total = g.add(out.rec, g.add(g.affine(out.prior, weights.alpha), g.affine(out.gmm, weights.beta)));
  out.rec_each = std::move(rec.each);
  out.prior_each = std::move(prior.each);
  out.gmm_each = g.value(gmm_rows).data();
  out.domain_each = std::move(target_domains);
  return out;
}

// ---------------------------------------------------------------------------
// Epoch loop

EpochStats train_epoch(const SplitDataset& data, Model& model, OptimizerState& opt, const TrainConfig& cfg,
                       const LossWeights& weights, std::mt19937_64& rng, std::size_t max_batches) {
  std::vector<const UserSequence*> pool;
  for (const auto& s : data.train) {
    if (instance_count(s) > 0) pool.push_back(&s);
  }
  if (pool.empty()) throw EmptyDatasetError("no training sequences with at least two interactions");
  for (std::size_t i = pool.size(); i > 1; --i) {
    std::swap(pool[i - 1], pool[static_cast<std::size_t>(rng() % i)]);
  }

  const auto snapshot = model.params().values();
  const auto opt_snapshot = opt;
  const auto start = std::chrono::steady_clock::now();
  EpochStats stats;
  try {
    for (std::size_t b = 0; b < pool.size(); b += cfg.batch_size) {
      if (max_batches > 0 && stats.batches >= max_batches) break;
      const std::span<const UserSequence* const> batch(pool.data() + b, std::min(cfg.batch_size, pool.size() - b));
      std::size_t n = 0;
      for (const auto* s : batch) n += instance_count(*s);
      std::vector<double> t(n);
      for (auto& v : t) v = sample_flow_time(rng);
      Graph g(&model.params());
      const auto loss = batch_loss(g, model, batch, t, weights, DropoutContext{model.config().encoder.dropout, &rng});
      const auto grads = g.backward(loss.total);
      adam_step(model.params(), grads, opt, cfg.learning_rate);
      const double w = static_cast<double>(n);
      stats.rec += w * g.value(loss.rec)[0];
      stats.prior += w * g.value(loss.prior)[0];
      stats.gmm += w * g.value(loss.gmm)[0];
      stats.total += w * g.value(loss.total)[0];
      stats.instances += n;
      ++stats.batches;
    }
  } catch (const NumericsError&) {
    model.params().assign(snapshot);
    opt = opt_snapshot;
    throw;
  }
  const double inv = 1.0 / static_cast<double>(std::max<std::size_t>(stats.instances, 1));
  stats.rec *= inv;
  stats.prior *= inv;
  stats.gmm *= inv;
  stats.total *= inv;
  stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return stats;
}

double sample_flow_time(std::mt19937_64& rng) { return uniform01(rng); }

EarlyStopDecision early_stop(std::span<const double> history, std::size_t patience) {
  if (history.empty()) throw EmptyEvalError("early_stop needs a non-empty history");
  EarlyStopDecision d;
  for (std::size_t i = 1; i < history.size(); ++i) {
    if (history[i] > history[d.best_index]) d.best_index = i;
  }
  d.stop = history.size() - 1 - d.best_index >= patience;
  return d;
}

FitResult fit(Model& model, const SplitDataset& data, const TrainConfig& cfg, const LossWeights& weights,
              const EpochCallback& on_epoch) {
  cfg.validate();
  weights.validate();
  FitResult result;
  std::mt19937_64 rng(cfg.seed);
  OptimizerState opt = OptimizerState::for_params(model.params(), cfg.adam);
  auto best = model.params().values();
  const auto validate = [&]() {
    return data.validation.empty() ? 0.0 : group_ndcg10(evaluate_model(model, data.validation, cfg.eval_steps));
  };
  result.val_ndcg10.push_back(validate());
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    auto stats = train_epoch(data, model, opt, cfg, weights, rng);
    stats.epoch = epoch;
    const double val = validate();
    result.epochs.push_back(stats);
    result.val_ndcg10.push_back(val);
    if (on_epoch) on_epoch(stats, val);
    const auto decision = early_stop(result.val_ndcg10, cfg.patience);
    if (decision.best_index == epoch) best = model.params().values();
    result.best_epoch = decision.best_index;
    if (decision.stop) {
      result.stopped_early = true;
      break;
    }
  }
  model.params().assign(best);
  return result;
}

}  // namespace gmflow
