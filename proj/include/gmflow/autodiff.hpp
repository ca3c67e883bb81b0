#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "gmflow/tensor.hpp"

namespace gmflow {

using ParamId = std::size_t;

// Named trainable tensors. Graphs read parameter values from here; gradients
// come back from Graph::backward indexed by ParamId.
class ParameterStore {
 public:
  ParamId add(std::string name, Tensor init);
  ParamId id(std::string_view name) const;
  bool contains(std::string_view name) const;

  Tensor& value(ParamId id) { return values_.at(id); }
  const Tensor& value(ParamId id) const { return values_.at(id); }
  const std::string& name(ParamId id) const { return names_.at(id); }
  std::size_t size() const { return values_.size(); }
  std::size_t scalar_count() const;

  std::vector<Tensor> zeros_like() const;
  const std::vector<Tensor>& values() const { return values_; }
  void assign(const std::vector<Tensor>& values);

  bool operator==(const ParameterStore& other) const = default;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::unordered_map<std::string, ParamId> index_;
};

// Handle to a node inside a Graph.
struct Var {
  static constexpr std::uint32_t kInvalid = 0xffffffffu;
  std::uint32_t id = kInvalid;
  bool valid() const { return id != kInvalid; }
  bool operator==(const Var&) const = default;
};

enum class OpKind : std::uint8_t {
  kConstant,
  kParameter,
  kMatMul,
  kMatMulNT,
  kAdd,
  kSub,
  kAddBias,
  kMul,
  kScaleRows,
  kAffine,
  kMaskedSoftmax,
  kLogSoftmax,
  kLayerNorm,
  kGatherRows,
  kGelu,
  kConcatCols,
  kConcatRows,
  kSliceCols,
  kSliceRows,
  kLogSumExp,
  kPick,
  kGaussianLogDensity,
  kMixtureMean,
  kClamp,
  kMean,
  kSum,
  kDropout,
};

std::string_view op_name(OpKind kind);

// Boolean attention mask; allowed(r, c) == true keeps the logit.
struct Mask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  Mask(std::size_t r, std::size_t c, bool fill = false) : rows(r), cols(c), bits(r * c, fill ? 1 : 0) {}

  bool operator()(std::size_t r, std::size_t c) const { return bits[r * cols + c] != 0; }
  void set(std::size_t r, std::size_t c, bool v) { bits[r * cols + c] = v ? 1 : 0; }
  bool operator==(const Mask&) const = default;
};

// Tape of tensor operations with reverse-mode differentiation.
//
// Nodes are appended in evaluation order, so the node list is always a valid
// topological order and backward is a single reverse sweep. Every forward op
// checks its output for NaN/Inf and throws NumericsError instead of
// propagating it. A graph built with `grad_enabled = false` records values only.
class Graph {
 public:
  explicit Graph(const ParameterStore* params = nullptr, bool grad_enabled = true);

  Var constant(Tensor value);
  // Leaf bound to a store parameter; repeated calls return the same node.
  Var parameter(ParamId id);

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  OpKind kind(Var v) const { return nodes_.at(v.id).kind; }
  std::span<const std::uint32_t> inputs(Var v) const { return nodes_.at(v.id).inputs; }
  std::size_t node_count() const { return nodes_.size(); }
  bool grad_enabled() const { return grad_enabled_; }

  // a (m x k) * b (k x n)
  Var matmul(Var a, Var b);
  // a (m x k) * b^T where b is (n x k)
  Var matmul_nt(Var a, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  // a (n x c) + bias (1 x c) broadcast over rows
  Var add_bias(Var a, Var bias);
  Var mul(Var a, Var b);
  // row r scaled by the constant scale[r]
  Var scale_rows(Var a, std::vector<double> scale);
  // scale * a + shift
  Var affine(Var a, double scale, double shift = 0.0);
  // Row-wise softmax over allowed entries; masked entries are exactly zero.
  Var masked_softmax(Var logits, const Mask& mask);
  Var softmax(Var logits);
  Var log_softmax(Var logits);
  Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
  // Rows of `table` by index; a negative index yields a zero row.
  Var gather_rows(Var table, std::vector<std::int64_t> index);
  Var gelu(Var a);
  Var concat_cols(std::span<const Var> parts);
  Var concat_rows(std::span<const Var> parts);
  Var slice_cols(Var a, std::size_t begin, std::size_t end);
  Var slice_rows(Var a, std::size_t begin, std::size_t end);
  // Row-wise log-sum-exp, shifted by the row maximum: (n x c) -> (n x 1)
  Var log_sum_exp(Var a);
  // out[r] = a[r, cols[r]]: (n x c) -> (n x 1)
  Var pick(Var a, std::vector<std::size_t> cols);
  // log N(x_r; mu_{r,k}, sigma_{r,k}^2 I) for x (n x d), means (n x K*d),
  // log_sigma (n x K) -> (n x K)
  Var gaussian_log_density(Var x, Var means, Var log_sigma);
  // sum_k w[r,k] * means[r, k*d:(k+1)*d] -> (n x d)
  Var mixture_mean(Var weights, Var means);
  Var clamp(Var a, double lo, double hi);
  Var mean(Var a);
  Var sum(Var a);
  Var dropout(Var a, double rate, std::mt19937_64& rng);

  // Reverse sweep from a scalar node. Returns one gradient per store
  // parameter (zeros for parameters the loss does not touch).
  std::vector<Tensor> backward(Var loss);
  // Gradient of the last backward() w.r.t. any node (empty if unreached).
  const Tensor& grad(Var v) const { return nodes_.at(v.id).grad; }

 private:
  using BackwardFn = std::function<void(Graph&, std::uint32_t)>;

  struct Node {
    OpKind kind;
    std::vector<std::uint32_t> inputs;
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
    std::int64_t param = -1;
  };

  Var push(OpKind kind, std::vector<std::uint32_t> inputs, Tensor value, BackwardFn fn);
  Tensor& grad_of(std::uint32_t id);
  const Node& node(std::uint32_t id) const { return nodes_[id]; }
  bool needs(std::uint32_t id) const { return nodes_[id].requires_grad; }

  const ParameterStore* params_;
  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::unordered_map<ParamId, Var> param_nodes_;
};

using LossBuilder = std::function<Var(Graph&)>;

// Max over sampled coordinates of |analytic - central difference| /
// max(1, |analytic|) for one parameter. Parameter values are restored.
double finite_difference_check(ParameterStore& params, ParamId param, const LossBuilder& build,
                               double epsilon, std::size_t max_coords = 100,
                               std::uint64_t seed = 0);

}  // namespace gmflow
