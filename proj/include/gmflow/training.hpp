#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "gmflow/autodiff.hpp"
#include "gmflow/data.hpp"
#include "gmflow/model.hpp"

namespace gmflow {

struct LossWeights {
  double alpha = 0.5;  // prior loss
  double beta = 0.01;  // mixture NLL
  void validate() const;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  bool operator==(const AdamConfig&) const = default;
};

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t batch_size = 256;  // sequences per optimizer step
  std::size_t max_epochs = 100;
  std::size_t patience = 10;
  std::uint64_t seed = 42;
  std::size_t eval_steps = 4;  // solver steps for validation ranking
  AdamConfig adam;
  // Search grids; only enumerated, never searched automatically.
  std::vector<double> alpha_grid{0.0, 0.1, 0.5, 1.0};
  std::vector<double> beta_grid{0.0, 1e-5, 1e-4, 1e-2, 0.1, 1.0};
  std::vector<std::size_t> components_grid{2, 4, 6, 8, 16, 32};
  void validate() const;
};

struct OptimizerState {
  std::vector<Tensor> first;
  std::vector<Tensor> second;
  std::uint64_t step = 0;
  AdamConfig coeffs;

  static OptimizerState for_params(const ParameterStore& params, AdamConfig coeffs = {});
  bool operator==(const OptimizerState&) const = default;
};

// Bias-corrected Adam update of every parameter.
void adam_step(ParameterStore& params, const std::vector<Tensor>& grads, OptimizerState& state, double lr);

// -log softmax_{j in V_domain}(<z, Emb(j)>)[target]; shared by the prior
// loss (z = h_DA) and the recommendation loss (z = mixture mean).
double domain_softmax_nll(std::span<const double> z, std::size_t target, int domain, const Tensor& item_emb,
                          const ModelConfig& cfg);
inline double prior_loss(std::span<const double> hda, std::size_t target, int domain, const Tensor& item_emb,
                         const ModelConfig& cfg) {
  return domain_softmax_nll(hda, target, domain, item_emb, cfg);
}
inline double rec_loss(std::span<const double> mu, std::size_t target, int domain, const Tensor& item_emb,
                       const ModelConfig& cfg) {
  return domain_softmax_nll(mu, target, domain, item_emb, cfg);
}

// Graph form: rows of z scored against their own target domain. Returns the
// summed loss (1 x 1) and the per-row values.
struct DomainLoss {
  Var sum;
  std::vector<double> each;
};
DomainLoss domain_softmax_nll(Graph& g, Var z, Var item_table, std::span<const std::size_t> targets,
                              std::span<const int> domains, const ModelConfig& cfg);

struct BatchLoss {
  Var total;  // mean over instances of rec + alpha * prior + beta * gmm
  Var rec;
  Var prior;
  Var gmm;
  std::size_t instances = 0;
  std::vector<double> rec_each, prior_each, gmm_each;
  std::vector<int> domain_each;
};

// Flow time for one training instance, t ~ U(0, 1).
double sample_flow_time(std::mt19937_64& rng);

// Number of training instances a sequence contributes (positions >= 1).
inline std::size_t instance_count(const UserSequence& s) { return s.size() < 2 ? 0 : s.size() - 1; }

// Loss over every sliding-window instance of the given training sequences.
// `t` holds one flow time per instance, in sequence-then-position order.
BatchLoss batch_loss(Graph& g, const Model& model, std::span<const UserSequence* const> sequences,
                     std::span<const double> t, const LossWeights& weights, DropoutContext dropout = {});

struct EpochStats {
  std::size_t epoch = 0;
  double rec = 0.0;
  double prior = 0.0;
  double gmm = 0.0;
  double total = 0.0;
  std::size_t instances = 0;
  std::size_t batches = 0;
  double seconds = 0.0;
  bool operator==(const EpochStats&) const = default;
};

// One pass of shuffled mini-batches: sample t ~ U(0,1) per instance, encode,
// build priors, run the head, combine the three losses, backprop, Adam step.
// On NumericsError the parameters and optimizer state are restored to their
// values at the start of the epoch before rethrowing.
EpochStats train_epoch(const SplitDataset& data, Model& model, OptimizerState& opt, const TrainConfig& cfg,
                       const LossWeights& weights, std::mt19937_64& rng, std::size_t max_batches = 0);

struct EarlyStopDecision {
  bool stop = false;
  std::size_t best_index = 0;
};

// Stop once `patience` consecutive evaluations fail to beat the best value.
EarlyStopDecision early_stop(std::span<const double> history, std::size_t patience);

struct FitResult {
  std::vector<EpochStats> epochs;
  std::vector<double> val_ndcg10;  // index 0 is the untrained model
  std::size_t best_epoch = 0;      // 0 means the untrained parameters won
  bool stopped_early = false;
};

using EpochCallback = std::function<void(const EpochStats&, double val_ndcg10)>;

// Trains up to max_epochs with validation group NDCG@10 after every epoch
// and restores the best parameters at the end.
FitResult fit(Model& model, const SplitDataset& data, const TrainConfig& cfg, const LossWeights& weights,
              const EpochCallback& on_epoch = {});

}  // namespace gmflow
