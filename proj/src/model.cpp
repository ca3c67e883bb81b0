#include "gmflow/model.hpp"

#include <numeric>

#include "gmflow/errors.hpp"

namespace gmflow {

std::size_t ModelConfig::num_items() const {
  return std::accumulate(domain_sizes.begin(), domain_sizes.end(), std::size_t{0});
}

std::size_t ModelConfig::domain_offset(int domain) const {
  if (domain < 0 || domain >= num_domains()) throw IndexError("domain " + std::to_string(domain) + " out of range");
  return std::accumulate(domain_sizes.begin(), domain_sizes.begin() + domain, std::size_t{0});
}

void ModelConfig::validate() const {
  encoder.validate();
  flow.validate();
  if (domain_sizes.empty()) throw ConfigError("model needs at least one domain");
}

ModelConfig ModelConfig::for_vocab(const Vocab& vocab, EncoderConfig encoder, FlowConfig flow) {
  ModelConfig cfg{encoder, flow, {}};
  for (int k = 0; k < vocab.num_domains(); ++k) cfg.domain_sizes.push_back(vocab.domain_size(k));
  return cfg;
}

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  encoder_ = register_encoder(params_, cfg_.encoder, cfg_.num_items(), cfg_.num_domains(), rng);
  head_ = register_head(params_, cfg_.flow, cfg_.encoder.dim, rng);
}

Model::Bound Model::bind(Graph& g) const { return {bind_encoder(g, encoder_), bind_head(g, head_)}; }

Model::Priors Model::priors(std::span<const EvalInstance> instances) const {
  const std::size_t d = cfg_.encoder.dim;
  Priors out{Tensor::matrix(instances.size(), d), Tensor::matrix(instances.size(), d)};
  for (std::size_t r = 0; r < instances.size(); ++r) {
    const auto& inst = instances[r];
    if (inst.prefix_items.empty()) throw ShapeError("evaluation prefix is empty");
    Graph g(&params_, false);
    const auto vars = bind_encoder(g, encoder_);
    const auto enc = encode_sequence(g, vars, cfg_.encoder, inst.prefix_items, inst.prefix_domains);
    const auto last = inst.prefix_items.size() - 1;
    const auto di = g.value(enc.di).row_span(last);
    std::copy(di.begin(), di.end(), out.x1.row_span(r).begin());
    const auto hda = g.value(domain_aligned_prior(g, vars, enc.ds, inst.prefix_domains, inst.domain));
    std::copy(hda.data().begin(), hda.data().end(), out.hda.row_span(r).begin());
  }
  return out;
}

Tensor Model::mixture_mean(const Tensor& xbar, const Tensor& hda, double t) const {
  Graph g(&params_, false);
  const auto vars = bind_head(g, head_);
  std::vector<double> ts(xbar.rows(), t);
  const auto head = gmm_head(g, vars, cfg_.flow, g.constant(xbar), g.constant(hda), ts);
  return g.value(head.mean);
}

Tensor Model::predict(std::span<const EvalInstance> instances, std::size_t steps) const {
  const auto p = priors(instances);
  return gm_ode_solve([this](const Tensor& xbar, const Tensor& hda, double t) { return mixture_mean(xbar, hda, t); },
                      p.x1, p.hda, cfg_.flow.lambda, SolverConfig{steps}, cfg_.flow.velocity);
}

}  // namespace gmflow
