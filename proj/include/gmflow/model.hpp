#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "gmflow/autodiff.hpp"
#include "gmflow/data.hpp"
#include "gmflow/encoder.hpp"
#include "gmflow/flow.hpp"

namespace gmflow {

struct ModelConfig {
  EncoderConfig encoder;
  FlowConfig flow;
  std::vector<std::size_t> domain_sizes;  // items per domain, in vocab order

  int num_domains() const { return static_cast<int>(domain_sizes.size()); }
  std::size_t num_items() const;
  std::size_t domain_offset(int domain) const;
  void validate() const;

  static ModelConfig for_vocab(const Vocab& vocab, EncoderConfig encoder, FlowConfig flow);
};

// Encoder, embedding tables and mixture head over one parameter store.
class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }
  const EncoderIds& encoder_ids() const { return encoder_; }
  const HeadIds& head_ids() const { return head_; }

  struct Bound {
    EncoderVars encoder;
    HeadVars head;
  };
  Bound bind(Graph& g) const;

  // Domain-invariant last state x1 and domain-aligned prior h_DA per
  // (prefix, target domain) pair; both N x d.
  struct Priors {
    Tensor x1;
    Tensor hda;
  };
  Priors priors(std::span<const EvalInstance> instances) const;

  // Mixture mean of the head at time t for a batch of rows (no gradients).
  Tensor mixture_mean(const Tensor& xbar, const Tensor& hda, double t) const;

  // GM-ODE estimate of the target item embedding, N x d.
  Tensor predict(std::span<const EvalInstance> instances, std::size_t steps) const;

  const Tensor& item_embeddings() const { return params_.value(encoder_.item_emb); }

 private:
  ModelConfig cfg_;
  ParameterStore params_;
  EncoderIds encoder_;
  HeadIds head_;
};

}  // namespace gmflow
