#pragma once

#include <cstddef>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "gmflow/autodiff.hpp"

namespace gmflow {

// How the solver turns the predicted mixture mean into a velocity.
//  kDerived: the mixture models the clean target x0, v = (mu - x_t) / t.
//  kLiteral: the mixture mean is used as the velocity itself.
enum class VelocityMode { kDerived, kLiteral };

struct FlowConfig {
  std::size_t components = 4;  // K
  double lambda = 0.5;
  std::size_t steps = 4;  // solver T
  double sigma_min = 1e-3;
  double sigma_max = 1e2;
  std::size_t time_features = 8;  // even; sin/cos pairs
  std::size_t hidden = 0;         // 0 means 4 * dim
  VelocityMode velocity = VelocityMode::kDerived;

  std::size_t hidden_dim(std::size_t dim) const { return hidden == 0 ? 4 * dim : hidden; }
  void validate() const;
};

// x_t = (1 - t) x0 + t x1; t outside [0, 1] is a DomainError.
std::vector<double> interpolate(std::span<const double> x0, std::span<const double> x1, double t);
// xbar = lambda x_t + (1 - lambda) x1; lambda outside [0, 1] is a DomainError.
std::vector<double> fuse_latent(std::span<const double> xt, std::span<const double> x1, double lambda);

// One evaluated mixture with spherical components.
struct GaussianMixture {
  std::size_t dim = 0;
  std::vector<double> logits;   // K
  std::vector<double> weights;  // softmax(logits)
  std::vector<double> means;    // K x dim, row-major
  std::vector<double> sigmas;   // K, positive
  std::vector<double> mean;     // sum_k weights[k] * means[k]

  std::size_t components() const { return logits.size(); }
  static GaussianMixture from_parameters(std::vector<double> logits, std::vector<double> means,
                                         std::vector<double> sigmas);
};

// -log sum_k A_k N(target; mu_k, sigma_k^2 I), evaluated with log-sum-exp.
double gmm_nll(const GaussianMixture& mix, std::span<const double> target);

struct SolverConfig {
  std::size_t steps = 4;
  double dt() const { return 1.0 / static_cast<double>(steps); }
};

// Mixture mean for a batch of rows: (xbar N x d, h_DA N x d, t) -> N x d.
using MixtureMeanFn = std::function<Tensor(const Tensor& xbar, const Tensor& hda, double t)>;

// First-order GM-ODE sampler from t = 1 (x1) down to t = 0. At step s the
// time is t = (T - s) / T and the derived-velocity update is the convex
// step x <- (1 - dt/t) x + (dt/t) mu, so the last step lands exactly on mu.
Tensor gm_ode_solve(const MixtureMeanFn& head, const Tensor& x1, const Tensor& hda, double lambda,
                    const SolverConfig& cfg, VelocityMode mode = VelocityMode::kDerived);

// score(i) = <xhat0, Emb(i)> for rows [offset, offset + count) of the table.
std::vector<double> score_items(std::span<const double> xhat0, const Tensor& item_emb, std::size_t offset,
                                std::size_t count);
// Indices ordered by descending score; equal scores keep the lower index first.
std::vector<std::size_t> rank_items(std::span<const double> scores);

// Sinusoidal timestep features [sin(2^j pi t), cos(2^j pi t)]_j, one row per t.
Tensor timestep_features(std::span<const double> t, std::size_t features);

struct HeadIds {
  ParamId w1, b1, w2, b2, w3, b3;
};

HeadIds register_head(ParameterStore& store, const FlowConfig& cfg, std::size_t dim, std::mt19937_64& rng);

struct HeadVars {
  Var w1, b1, w2, b2, w3, b3;
};

HeadVars bind_head(Graph& g, const HeadIds& ids);

struct HeadOutput {
  Var logits;     // N x K
  Var weights;    // N x K
  Var means;      // N x K*d
  Var log_sigma;  // N x K, clamped to [log sigma_min, log sigma_max]
  Var mean;       // N x d
};

// MLP([xbar || h_DA || time features]) with two GELU hidden layers.
HeadOutput gmm_head(Graph& g, const HeadVars& vars, const FlowConfig& cfg, Var xbar, Var hda,
                    std::span<const double> t);

// Per-row mixture NLL of `target` (N x d) -> N x 1.
Var gmm_nll_rows(Graph& g, const HeadOutput& head, Var target);

GaussianMixture mixture_row(const Graph& g, const HeadOutput& head, std::size_t row);

}  // namespace gmflow
