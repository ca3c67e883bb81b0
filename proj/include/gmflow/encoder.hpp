#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "gmflow/autodiff.hpp"

namespace gmflow {

struct EncoderConfig {
  std::size_t dim = 64;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t max_len = 50;
  std::size_t ff_dim = 0;  // 0 means `dim`
  double dropout = 0.1;

  std::size_t feed_forward_dim() const { return ff_dim == 0 ? dim : ff_dim; }
  void validate() const;
};

struct EncoderLayerIds {
  ParamId ln1_gain, ln1_bias;
  ParamId wq, bq, wk, bk, wv, bv, wo, bo;
  ParamId ln2_gain, ln2_bias;
  ParamId w1, b1, w2, b2;
};

// Embedding tables plus one transformer stack, shared by both mask passes.
struct EncoderIds {
  ParamId item_emb;    // |V| x d
  ParamId domain_emb;  // D x d
  ParamId pos_emb;     // max_len x d
  std::vector<EncoderLayerIds> layers;
  ParamId final_gain, final_bias;
};

EncoderIds register_encoder(ParameterStore& store, const EncoderConfig& cfg, std::size_t num_items,
                            int num_domains, std::mt19937_64& rng);

struct EncoderLayerVars {
  Var ln1_gain, ln1_bias;
  Var wq, bq, wk, bk, wv, bv, wo, bo;
  Var ln2_gain, ln2_bias;
  Var w1, b1, w2, b2;
};

struct EncoderVars {
  Var item_emb, domain_emb, pos_emb;
  std::vector<EncoderLayerVars> layers;
  Var final_gain, final_bias;
};

EncoderVars bind_encoder(Graph& g, const EncoderIds& ids);

// Causal mask: allowed(m, n) = n <= m.
Mask build_di_mask(std::size_t length);
// Same-domain causal mask: allowed(m, n) = domains[m] == domains[n] && n <= m.
Mask build_ds_mask(std::span<const int> domains);

// x_m = Emb(i_m) + D(d_m) + Pos(m); returns M x d.
Var embed_sequence(Graph& g, const EncoderVars& vars, std::span<const std::size_t> items,
                   std::span<const int> domains);

// Optional dropout; a null rng or zero rate disables it.
struct DropoutContext {
  double rate = 0.0;
  std::mt19937_64* rng = nullptr;
  bool active() const { return rate > 0.0 && rng != nullptr; }
};

// Pre-norm transformer stack with masked multi-head self-attention and a
// final layer norm. Every mask row must allow its own position.
Var encode(Graph& g, const EncoderVars& vars, const EncoderConfig& cfg, Var x, const Mask& mask,
           DropoutContext dropout = {});

struct EncodedSequence {
  Var di;  // M x d, causal mask
  Var ds;  // M x d, same-domain causal mask
};

EncodedSequence encode_sequence(Graph& g, const EncoderVars& vars, const EncoderConfig& cfg,
                                std::span<const std::size_t> items, std::span<const int> domains,
                                DropoutContext dropout = {});

// Position of the latest item at or before `upto` whose domain is `target`,
// or -1 when there is none.
std::int64_t latest_in_domain(std::span<const int> domains, std::size_t upto, int target);

// h_DA = H_DS[m*] + D(target) when the target domain occurs in the prefix
// (m* its latest position), D(target) otherwise. Returns 1 x d.
Var domain_aligned_prior(Graph& g, const EncoderVars& vars, Var ds_states, std::span<const int> domains,
                         int target_domain);

}  // namespace gmflow
