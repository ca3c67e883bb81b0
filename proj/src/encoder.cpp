#include "gmflow/encoder.hpp"

#include <cmath>
#include <string>

#include "gmflow/errors.hpp"
#include "gmflow/random.hpp"

namespace gmflow {

namespace {

Tensor normal_init(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
  Tensor t = Tensor::matrix(rows, cols);
  for (auto& v : t.data()) v = stddev * standard_normal(rng);
  return t;
}

Tensor xavier(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t = Tensor::matrix(fan_in, fan_out);
  for (auto& v : t.data()) v = limit * (2.0 * uniform01(rng) - 1.0);
  return t;
}

}  // namespace

void EncoderConfig::validate() const {
  if (dim == 0) throw ConfigError("encoder.dim must be positive");
  if (layers == 0) throw ConfigError("encoder.layers must be >= 1");
  if (heads == 0 || dim % heads != 0) throw ConfigError("encoder.heads must divide encoder.dim");
  if (max_len < 3) throw ConfigError("encoder.max_len must be >= 3");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("encoder.dropout must be in [0, 1)");
}

EncoderIds register_encoder(ParameterStore& store, const EncoderConfig& cfg, std::size_t num_items,
                            int num_domains, std::mt19937_64& rng) {
  cfg.validate();
  const std::size_t d = cfg.dim;
  const std::size_t ff = cfg.feed_forward_dim();
  const double emb_std = 1.0 / std::sqrt(static_cast<double>(d));
  EncoderIds ids{};
  ids.item_emb = store.add("emb.item", normal_init(num_items, d, emb_std, rng));
  ids.domain_emb = store.add("emb.domain", normal_init(static_cast<std::size_t>(num_domains), d, emb_std, rng));
  ids.pos_emb = store.add("emb.position", normal_init(cfg.max_len, d, emb_std, rng));
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string p = "enc.l" + std::to_string(l) + ".";
    EncoderLayerIds L{};
    L.ln1_gain = store.add(p + "ln1.gain", Tensor::matrix(1, d, 1.0));
    L.ln1_bias = store.add(p + "ln1.bias", Tensor::matrix(1, d, 0.0));
    L.wq = store.add(p + "attn.wq", xavier(d, d, rng));
    L.bq = store.add(p + "attn.bq", Tensor::matrix(1, d, 0.0));
    L.wk = store.add(p + "attn.wk", xavier(d, d, rng));
    L.bk = store.add(p + "attn.bk", Tensor::matrix(1, d, 0.0));
    L.wv = store.add(p + "attn.wv", xavier(d, d, rng));
    L.bv = store.add(p + "attn.bv", Tensor::matrix(1, d, 0.0));
    L.wo = store.add(p + "attn.wo", xavier(d, d, rng));
    L.bo = store.add(p + "attn.bo", Tensor::matrix(1, d, 0.0));
    L.ln2_gain = store.add(p + "ln2.gain", Tensor::matrix(1, d, 1.0));
    L.ln2_bias = store.add(p + "ln2.bias", Tensor::matrix(1, d, 0.0));
    L.w1 = store.add(p + "ffn.w1", xavier(d, ff, rng));
    L.b1 = store.add(p + "ffn.b1", Tensor::matrix(1, ff, 0.0));
    L.w2 = store.add(p + "ffn.w2", xavier(ff, d, rng));
    L.b2 = store.add(p + "ffn.b2", Tensor::matrix(1, d, 0.0));
    ids.layers.push_back(L);
  }
  ids.final_gain = store.add("enc.final.gain", Tensor::matrix(1, d, 1.0));
  ids.final_bias = store.add("enc.final.bias", Tensor::matrix(1, d, 0.0));
  return ids;
}

EncoderVars bind_encoder(Graph& g, const EncoderIds& ids) {
  EncoderVars v;
  v.item_emb = g.parameter(ids.item_emb);
  v.domain_emb = g.parameter(ids.domain_emb);
  v.pos_emb = g.parameter(ids.pos_emb);
  for (const auto& L : ids.layers) {
    v.layers.push_back({g.parameter(L.ln1_gain), g.parameter(L.ln1_bias), g.parameter(L.wq), g.parameter(L.bq),
                        g.parameter(L.wk), g.parameter(L.bk), g.parameter(L.wv), g.parameter(L.bv),
                        g.parameter(L.wo), g.parameter(L.bo), g.parameter(L.ln2_gain), g.parameter(L.ln2_bias),
                        g.parameter(L.w1), g.parameter(L.b1), g.parameter(L.w2), g.parameter(L.b2)});
  }
  v.final_gain = g.parameter(ids.final_gain);
  v.final_bias = g.parameter(ids.final_bias);
  return v;
}

Mask build_di_mask(std::size_t length) {
  Mask m(length, length);
  for (std::size_t r = 0; r < length; ++r)
    for (std::size_t c = 0; c <= r; ++c) m.set(r, c, true);
  return m;
}

Mask build_ds_mask(std::span<const int> domains) {
  const std::size_t n = domains.size();
  Mask m(n, n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c <= r; ++c) m.set(r, c, domains[r] == domains[c]);
  return m;
}

Var embed_sequence(Graph& g, const EncoderVars& vars, std::span<const std::size_t> items,
                   std::span<const int> domains) {
  if (items.size() != domains.size()) throw ShapeError("items and domains differ in length");
  const std::size_t max_len = g.value(vars.pos_emb).rows();
  if (items.size() > max_len) {
    throw IndexError("sequence length " + std::to_string(items.size()) + " exceeds max_len " +
                     std::to_string(max_len));
  }
  std::vector<std::int64_t> item_idx(items.begin(), items.end());
  std::vector<std::int64_t> domain_idx(domains.begin(), domains.end());
  std::vector<std::int64_t> pos_idx(items.size());
  for (std::size_t m = 0; m < pos_idx.size(); ++m) pos_idx[m] = static_cast<std::int64_t>(m);
  for (auto d : domain_idx) {
    if (d < 0) throw IndexError("negative domain index");
  }
  Var x = g.add(g.gather_rows(vars.item_emb, std::move(item_idx)), g.gather_rows(vars.domain_emb, std::move(domain_idx)));
  return g.add(x, g.gather_rows(vars.pos_emb, std::move(pos_idx)));
}

Var encode(Graph& g, const EncoderVars& vars, const EncoderConfig& cfg, Var x, const Mask& mask,
           DropoutContext dropout) {
  const std::size_t n = g.value(x).rows();
  if (mask.rows != n || mask.cols != n) throw ShapeError("mask does not match sequence length");
  for (std::size_t r = 0; r < n; ++r) {
    if (!mask(r, r)) throw ShapeError("mask row " + std::to_string(r) + " does not allow its own position");
  }
  const std::size_t heads = cfg.heads;
  const std::size_t dh = cfg.dim / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  auto drop = [&](Var v) { return dropout.active() ? g.dropout(v, dropout.rate, *dropout.rng) : v; };

  Var h = drop(x);
  for (const auto& L : vars.layers) {
    Var normed = g.layer_norm(h, L.ln1_gain, L.ln1_bias);
    Var q = g.add_bias(g.matmul(normed, L.wq), L.bq);
    Var k = g.add_bias(g.matmul(normed, L.wk), L.bk);
    Var v = g.add_bias(g.matmul(normed, L.wv), L.bv);
    std::vector<Var> head_out;
    head_out.reserve(heads);
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const std::size_t b = hd * dh, e = b + dh;
      Var qh = heads == 1 ? q : g.slice_cols(q, b, e);
      Var kh = heads == 1 ? k : g.slice_cols(k, b, e);
      Var vh = heads == 1 ? v : g.slice_cols(v, b, e);
      Var attn = g.masked_softmax(g.affine(g.matmul_nt(qh, kh), scale), mask);
      head_out.push_back(g.matmul(drop(attn), vh));
    }
    Var merged = heads == 1 ? head_out[0] : g.concat_cols(head_out);
    h = g.add(h, drop(g.add_bias(g.matmul(merged, L.wo), L.bo)));

    Var normed2 = g.layer_norm(h, L.ln2_gain, L.ln2_bias);
    Var ff = g.gelu(g.add_bias(g.matmul(normed2, L.w1), L.b1));
    h = g.add(h, drop(g.add_bias(g.matmul(drop(ff), L.w2), L.b2)));
  }
  return g.layer_norm(h, vars.final_gain, vars.final_bias);
}

EncodedSequence encode_sequence(Graph& g, const EncoderVars& vars, const EncoderConfig& cfg,
                                std::span<const std::size_t> items, std::span<const int> domains,
                                DropoutContext dropout) {
  Var x = embed_sequence(g, vars, items, domains);
  EncodedSequence out;
  out.di = encode(g, vars, cfg, x, build_di_mask(items.size()), dropout);
  out.ds = encode(g, vars, cfg, x, build_ds_mask(domains), dropout);
  return out;
}

std::int64_t latest_in_domain(std::span<const int> domains, std::size_t upto, int target) {
  for (std::size_t m = std::min(upto + 1, domains.size()); m-- > 0;) {
    if (domains[m] == target) return static_cast<std::int64_t>(m);
  }
  return -1;
}

Var domain_aligned_prior(Graph& g, const EncoderVars& vars, Var ds_states, std::span<const int> domains,
                         int target_domain) {
  const auto num_domains = g.value(vars.domain_emb).rows();
  if (target_domain < 0 || static_cast<std::size_t>(target_domain) >= num_domains) {
    throw IndexError("target domain " + std::to_string(target_domain) + " out of range");
  }
  Var dom = g.gather_rows(vars.domain_emb, {target_domain});
  if (domains.empty()) return dom;
  const auto m_star = latest_in_domain(domains, domains.size() - 1, target_domain);
  if (m_star < 0) return dom;
  return g.add(g.slice_rows(ds_states, static_cast<std::size_t>(m_star), static_cast<std::size_t>(m_star) + 1), dom);
}

}  // namespace gmflow
