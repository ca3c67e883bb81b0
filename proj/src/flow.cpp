#include "gmflow/flow.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "gmflow/errors.hpp"
#include "gmflow/random.hpp"

namespace gmflow {

void FlowConfig::validate() const {
  if (components == 0) throw ConfigError("flow.components must be >= 1");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("flow.lambda must be in [0, 1]");
  if (steps == 0) throw ConfigError("flow.steps must be >= 1");
  if (!(sigma_min > 0.0 && sigma_min < sigma_max)) throw ConfigError("need 0 < flow.sigma_min < flow.sigma_max");
  if (time_features % 2 != 0) throw ConfigError("flow.time_features must be even");
}

std::vector<double> interpolate(std::span<const double> x0, std::span<const double> x1, double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("interpolation time must be in [0, 1]");
  if (x0.size() != x1.size()) throw ShapeError("interpolate: dimension mismatch");
  std::vector<double> out(x0.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - t) * x0[i] + t * x1[i];
  return out;
}

std::vector<double> fuse_latent(std::span<const double> xt, std::span<const double> x1, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw DomainError("lambda must be in [0, 1]");
  if (xt.size() != x1.size()) throw ShapeError("fuse_latent: dimension mismatch");
  std::vector<double> out(xt.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = lambda * xt[i] + (1.0 - lambda) * x1[i];
  return out;
}

GaussianMixture GaussianMixture::from_parameters(std::vector<double> logits, std::vector<double> means,
                                                 std::vector<double> sigmas) {
  const std::size_t K = logits.size();
  if (K == 0 || sigmas.size() != K || means.size() % K != 0) throw ShapeError("inconsistent mixture parameters");
  GaussianMixture mix;
  mix.dim = means.size() / K;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  mix.weights.resize(K);
  for (std::size_t k = 0; k < K; ++k) z += (mix.weights[k] = std::exp(logits[k] - mx));
  for (auto& w : mix.weights) w /= z;
  mix.mean.assign(mix.dim, 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    if (!(sigmas[k] > 0.0)) throw DomainError("mixture scales must be positive");
    for (std::size_t j = 0; j < mix.dim; ++j) mix.mean[j] += mix.weights[k] * means[k * mix.dim + j];
  }
  mix.logits = std::move(logits);
  mix.means = std::move(means);
  mix.sigmas = std::move(sigmas);
  return mix;
}

double gmm_nll(const GaussianMixture& mix, std::span<const double> target) {
  if (target.size() != mix.dim) throw ShapeError("gmm_nll: target dimension mismatch");
  const std::size_t K = mix.components();
  const double d = static_cast<double>(mix.dim);
  const double log2pi = std::log(2.0 * std::numbers::pi);
  // log A_k from the logits keeps tiny weights finite.
  const double lmax = *std::max_element(mix.logits.begin(), mix.logits.end());
  double lz = 0.0;
  for (double l : mix.logits) lz += std::exp(l - lmax);
  lz = lmax + std::log(lz);
  std::vector<double> terms(K);
  for (std::size_t k = 0; k < K; ++k) {
    double sq = 0.0;
    for (std::size_t j = 0; j < mix.dim; ++j) {
      const double diff = target[j] - mix.means[k * mix.dim + j];
      sq += diff * diff;
    }
    const double s = mix.sigmas[k];
    terms[k] = (mix.logits[k] - lz) - 0.5 * d * log2pi - d * std::log(s) - 0.5 * sq / (s * s);
  }
  const double tmax = *std::max_element(terms.begin(), terms.end());
  double acc = 0.0;
  for (double v : terms) acc += std::exp(v - tmax);
  return -(tmax + std::log(acc));
}

Tensor gm_ode_solve(const MixtureMeanFn& head, const Tensor& x1, const Tensor& hda, double lambda,
                    const SolverConfig& cfg, VelocityMode mode) {
  if (cfg.steps == 0) throw ConfigError("solver steps must be >= 1");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw DomainError("lambda must be in [0, 1]");
  if (!x1.same_shape(hda)) throw ShapeError("x1 and h_DA must have the same shape");
  const std::size_t T = cfg.steps;
  const double dt = cfg.dt();
  Tensor x = x1;
  Tensor xbar = x1;
  for (std::size_t s = 0; s < T; ++s) {
    const double t = static_cast<double>(T - s) / static_cast<double>(T);
    for (std::size_t i = 0; i < x.size(); ++i) xbar[i] = lambda * x[i] + (1.0 - lambda) * x1[i];
    const Tensor mu = head(xbar, hda, t);
    if (!mu.same_shape(x)) throw ShapeError("head returned " + mu.shape_string() + ", expected " + x.shape_string());
    if (mode == VelocityMode::kDerived) {
      const double r = 1.0 / static_cast<double>(T - s);  // dt / t
      for (std::size_t i = 0; i < x.size(); ++i) x[i] = (1.0 - r) * x[i] + r * mu[i];
    } else {
      for (std::size_t i = 0; i < x.size(); ++i) x[i] += dt * mu[i];
    }
    if (!x.all_finite()) throw NumericsError("non-finite solver state at step " + std::to_string(s));
  }
  return x;
}

std::vector<double> score_items(std::span<const double> xhat0, const Tensor& item_emb, std::size_t offset,
                                std::size_t count) {
  if (count == 0) throw EmptyDomainError("no candidate items to score");
  if (xhat0.size() != item_emb.cols()) throw ShapeError("score_items: dimension mismatch");
  if (offset + count > item_emb.rows()) throw IndexError("score_items: item range out of bounds");
  std::vector<double> scores(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto row = item_emb.row_span(offset + i);
    double s = 0.0;
    for (std::size_t j = 0; j < row.size(); ++j) s += xhat0[j] * row[j];
    scores[i] = s;
  }
  return scores;
}

std::vector<std::size_t> rank_items(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

Tensor timestep_features(std::span<const double> t, std::size_t features) {
  Tensor out = Tensor::matrix(t.size(), features);
  for (std::size_t r = 0; r < t.size(); ++r) {
    for (std::size_t j = 0; j < features / 2; ++j) {
      const double w = std::ldexp(std::numbers::pi, static_cast<int>(j));
      out(r, 2 * j) = std::sin(w * t[r]);
      out(r, 2 * j + 1) = std::cos(w * t[r]);
    }
  }
  return out;
}

HeadIds register_head(ParameterStore& store, const FlowConfig& cfg, std::size_t dim, std::mt19937_64& rng) {
  cfg.validate();
  const std::size_t in = 2 * dim + cfg.time_features;
  const std::size_t hid = cfg.hidden_dim(dim);
  const std::size_t K = cfg.components;
  const std::size_t out = K + K * dim + K;
  auto xavier = [&](std::size_t a, std::size_t b) {
    const double limit = std::sqrt(6.0 / static_cast<double>(a + b));
    Tensor t = Tensor::matrix(a, b);
    for (auto& v : t.data()) v = limit * (2.0 * uniform01(rng) - 1.0);
    return t;
  };
  HeadIds ids{};
  ids.w1 = store.add("head.w1", xavier(in, hid));
  ids.b1 = store.add("head.b1", Tensor::matrix(1, hid));
  ids.w2 = store.add("head.w2", xavier(hid, hid));
  ids.b2 = store.add("head.b2", Tensor::matrix(1, hid));
  ids.w3 = store.add("head.w3", xavier(hid, out));
  ids.b3 = store.add("head.b3", Tensor::matrix(1, out));
  return ids;
}

HeadVars bind_head(Graph& g, const HeadIds& ids) {
  return {g.parameter(ids.w1), g.parameter(ids.b1), g.parameter(ids.w2),
          g.parameter(ids.b2), g.parameter(ids.w3), g.parameter(ids.b3)};
}

HeadOutput gmm_head(Graph& g, const HeadVars& vars, const FlowConfig& cfg, Var xbar, Var hda,
                    std::span<const double> t) {
  const Tensor& xb = g.value(xbar);
  if (!xb.same_shape(g.value(hda))) throw ShapeError("gmm_head: xbar and h_DA shapes differ");
  if (t.size() != xb.rows()) throw ShapeError("gmm_head: one timestep per row required");
  const std::size_t d = xb.cols();
  const std::size_t K = cfg.components;
  std::vector<Var> parts{xbar, hda};
  if (cfg.time_features > 0) parts.push_back(g.constant(timestep_features(t, cfg.time_features)));
  Var input = g.concat_cols(parts);
  Var h1 = g.gelu(g.add_bias(g.matmul(input, vars.w1), vars.b1));
  Var h2 = g.gelu(g.add_bias(g.matmul(h1, vars.w2), vars.b2));
  Var out = g.add_bias(g.matmul(h2, vars.w3), vars.b3);
  HeadOutput head;
  head.logits = g.slice_cols(out, 0, K);
  head.means = g.slice_cols(out, K, K + K * d);
  head.log_sigma = g.clamp(g.slice_cols(out, K + K * d, K + K * d + K), std::log(cfg.sigma_min), std::log(cfg.sigma_max));
  head.weights = g.softmax(head.logits);
  head.mean = g.mixture_mean(head.weights, head.means);
  return head;
}

Var gmm_nll_rows(Graph& g, const HeadOutput& head, Var target) {
  Var joint = g.add(g.log_softmax(head.logits), g.gaussian_log_density(target, head.means, head.log_sigma));
  return g.affine(g.log_sum_exp(joint), -1.0);
}

GaussianMixture mixture_row(const Graph& g, const HeadOutput& head, std::size_t row) {
  const auto lr = g.value(head.logits).row_span(row);
  const auto mr = g.value(head.means).row_span(row);
  const auto sr = g.value(head.log_sigma).row_span(row);
  std::vector<double> sigmas(sr.size());
  for (std::size_t k = 0; k < sr.size(); ++k) sigmas[k] = std::exp(sr[k]);
  return GaussianMixture::from_parameters({lr.begin(), lr.end()}, {mr.begin(), mr.end()}, std::move(sigmas));
}

}  // namespace gmflow
