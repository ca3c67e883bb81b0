#include "gmflow/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "gmflow/errors.hpp"

namespace gmflow {

// ---------------------------------------------------------------------------
// ParameterStore

ParamId ParameterStore::add(std::string name, Tensor init) {
  if (index_.contains(name)) throw ConfigError("duplicate parameter name: " + name);
  ParamId id = values_.size();
  index_.emplace(name, id);
  names_.push_back(std::move(name));
  values_.push_back(std::move(init));
  return id;
}

ParamId ParameterStore::id(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ConfigError("unknown parameter: " + std::string(name));
  return it->second;
}

bool ParameterStore::contains(std::string_view name) const {
  return index_.contains(std::string(name));
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

std::vector<Tensor> ParameterStore::zeros_like() const {
  std::vector<Tensor> out;
  out.reserve(values_.size());
  for (const auto& v : values_) out.emplace_back(v.shape(), 0.0);
  return out;
}

void ParameterStore::assign(const std::vector<Tensor>& values) {
  if (values.size() != values_.size()) throw ShapeError("parameter count mismatch on assign");
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!values[i].same_shape(values_[i])) {
      throw ShapeError("shape mismatch on assign for " + names_[i]);
    }
    values_[i] = values[i];
  }
}

// ---------------------------------------------------------------------------
// Kernels

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

// C (m x n) += A (m x k) * B (k x n)
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C (m x n) += A (m x k) * B^T, B is (n x k)
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      c[i * n + j] += s;
    }
  }
}

// C (k x n) += A^T * B, A is (m x k), B is (m x n)
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void require(bool cond, OpKind kind, const std::string& detail) {
  if (!cond) throw ShapeError(std::string(op_name(kind)) + ": " + detail);
}

void require_same(const Tensor& a, const Tensor& b, OpKind kind) {
  require(a.same_shape(b), kind, "shape " + a.shape_string() + " vs " + b.shape_string());
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

}  // namespace

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kConstant: return "constant";
    case OpKind::kParameter: return "parameter";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kMatMulNT: return "matmul_nt";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kAddBias: return "add_bias";
    case OpKind::kMul: return "elementwise_mul";
    case OpKind::kScaleRows: return "scale_rows";
    case OpKind::kAffine: return "scalar_affine";
    case OpKind::kMaskedSoftmax: return "masked_softmax";
    case OpKind::kLogSoftmax: return "log_softmax";
    case OpKind::kLayerNorm: return "layer_norm";
    case OpKind::kGatherRows: return "embedding_gather";
    case OpKind::kGelu: return "gelu";
    case OpKind::kConcatCols: return "concat_cols";
    case OpKind::kConcatRows: return "concat_rows";
    case OpKind::kSliceCols: return "slice_cols";
    case OpKind::kSliceRows: return "slice_rows";
    case OpKind::kLogSumExp: return "log_sum_exp";
    case OpKind::kPick: return "pick";
    case OpKind::kGaussianLogDensity: return "gaussian_log_density";
    case OpKind::kMixtureMean: return "mixture_mean";
    case OpKind::kClamp: return "clamp";
    case OpKind::kMean: return "mean";
    case OpKind::kSum: return "sum";
    case OpKind::kDropout: return "dropout";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Graph plumbing

Graph::Graph(const ParameterStore* params, bool grad_enabled)
    : params_(params), grad_enabled_(grad_enabled) {}

Var Graph::push(OpKind kind, std::vector<std::uint32_t> inputs, Tensor value, BackwardFn fn) {
  if (!value.all_finite()) {
    throw NumericsError(std::string("non-finite output from ") + std::string(op_name(kind)));
  }
  Node n;
  n.kind = kind;
  n.requires_grad = false;
  if (grad_enabled_) {
    for (auto in : inputs) n.requires_grad = n.requires_grad || nodes_[in].requires_grad;
  }
  n.inputs = std::move(inputs);
  n.value = std::move(value);
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Tensor& Graph::grad_of(std::uint32_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
  return n.grad;
}

Var Graph::constant(Tensor value) { return push(OpKind::kConstant, {}, std::move(value), nullptr); }

Var Graph::parameter(ParamId id) {
  if (params_ == nullptr) throw ConfigError("graph has no parameter store");
  if (auto it = param_nodes_.find(id); it != param_nodes_.end()) return it->second;
  Tensor value = params_->value(id);
  if (!value.all_finite()) throw NumericsError("non-finite parameter " + params_->name(id));
  Node n;
  n.kind = OpKind::kParameter;
  n.value = std::move(value);
  n.requires_grad = grad_enabled_;
  n.param = static_cast<std::int64_t>(id);
  nodes_.push_back(std::move(n));
  Var v{static_cast<std::uint32_t>(nodes_.size() - 1)};
  param_nodes_.emplace(id, v);
  return v;
}

std::vector<Tensor> Graph::backward(Var loss) {
  const Tensor& lv = value(loss);
  if (lv.size() != 1) throw ShapeError("backward requires a scalar loss, got " + lv.shape_string());
  for (auto& n : nodes_) n.grad = Tensor();
  std::vector<Tensor> grads = params_ ? params_->zeros_like() : std::vector<Tensor>{};
  if (!nodes_[loss.id].requires_grad) return grads;
  grad_of(loss.id)[0] = 1.0;
  for (std::int64_t i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.param >= 0) {
      auto& g = grads[static_cast<std::size_t>(n.param)];
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += n.grad[j];
    } else if (n.backward) {
      n.backward(*this, static_cast<std::uint32_t>(i));
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Linear algebra

Var Graph::matmul(Var a, Var b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  require(A.cols() == B.rows(), OpKind::kMatMul, A.shape_string() + " * " + B.shape_string());
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  Tensor C = Tensor::matrix(m, n);
  gemm_nn(A.data().data(), B.data().data(), C.data().data(), m, k, n);
  return push(OpKind::kMatMul, {a.id, b.id}, std::move(C), [m, k, n](Graph& g, std::uint32_t self) {
    const auto& nd = g.node(self);
    const auto ia = nd.inputs[0], ib = nd.inputs[1];
    const double* G = nd.grad.data().data();
    if (g.needs(ia)) {
      gemm_nt(G, g.node(ib).value.data().data(), g.grad_of(ia).data().data(), m, n, k);
    }
    if (g.needs(ib)) {
      gemm_tn(g.node(ia).value.data().data(), G, g.grad_of(ib).data().data(), m, k, n);
    }
  });
}

Var Graph::matmul_nt(Var a, Var b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  require(A.cols() == B.cols(), OpKind::kMatMulNT, A.shape_string() + " * T" + B.shape_string());
  const std::size_t m = A.rows(), k = A.cols(), n = B.rows();
  Tensor C = Tensor::matrix(m, n);
  gemm_nt(A.data().data(), B.data().data(), C.data().data(), m, k, n);
  return push(OpKind::kMatMulNT, {a.id, b.id}, std::move(C), [m, k, n](Graph& g, std::uint32_t self) {
    const auto& nd = g.node(self);
    const auto ia = nd.inputs[0], ib = nd.inputs[1];
    const double* G = nd.grad.data().data();
    if (g.needs(ia)) {
      gemm_nn(G, g.node(ib).value.data().data(), g.grad_of(ia).data().data(), m, n, k);
    }
    if (g.needs(ib)) {
      gemm_tn(G, g.node(ia).value.data().data(), g.grad_of(ib).data().data(), m, n, k);
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise

Var Graph::add(Var a, Var b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  require_same(A, B, OpKind::kAdd);
  Tensor C = A;
  for (std::size_t i = 0; i < C.size(); ++i) C[i] += B[i];
  return push(OpKind::kAdd, {a.id, b.id}, std::move(C), [](Graph& g, std::uint32_t self) {
    const auto& nd = g.node(self);
    for (auto in : nd.inputs) {
      if (!g.needs(in)) continue;
      auto& gi = g.grad_of(in);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += nd.grad[i];
    }
  });
}

Var Graph::sub(Var a, Var b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  require_same(A, B, OpKind::kSub);
  Tensor C = A;
  for (std::size_t i = 0; i < C.size(); ++i) C[i] -= B[i];
  return push(OpKind::kSub, {a.id, b.id}, std::move(C), [](Graph& g, std::uint32_t self) {
    const auto& nd = g.node(self);
    if (g.needs(nd.inputs[0])) {
      auto& ga = g.grad_of(nd.inputs[0]);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += nd.grad[i];
    }
    if (g.needs(nd.inputs[1])) {
      auto& gb = g.grad_of(nd.inputs[1]);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= nd.grad[i];
    }
  });
}

Var Graph::add_bias(Var a, Var bias) {
  const Tensor& A = value(a);
  const Tensor& B = value(bias);
  require(B.rows() == 1 && B.cols() == A.cols(), OpKind::kAddBias,
          A.shape_string() + " + " + B.shape_string());
  Tensor C = A;
  const std::size_t n = A.rows(), c = A.cols();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < c; ++j) C(r, j) += B[j];
  return push(OpKind::kAddBias, {a.id, bias.id}, std::move(C), [n, c](Graph& g, std::uint32_t self) {
    const auto& nd = g.node(self);
    if (g.needs(nd.inputs[0])) {
      auto& ga = g.grad_of(nd.inputs[0]);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += nd.grad[i];
    }
    if (g.needs(nd.inputs[1])) {
      auto& gb = g.grad_of(nd.inputs[1]);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < c; ++j) gb[j] += nd.grad[r * c + j];
    }
  });
}

Var Graph::mul(Var a, Var b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  require_same(A, B, OpKind::kMul);
  Tensor C = A;
  for (std::size_t i = 0; i < C.size(); ++i) C[i] *= B[i];
  return push(OpKind::kMul, {a.id, b.id}, std::move(C), [](Graph& g, std::uint32_t self) {
    const auto& nd = g.node(self);
    const auto ia = nd.inputs[0], ib = nd.inputs[1];
    if (g.needs(ia)) {
      auto& ga = g.grad_of(ia);
      const auto& bv = g.node(ib).value;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += nd.grad[i] * bv[i];
    }
    if (g.needs(ib)) {
      auto& gb = g.grad_of(ib);
      const auto& av = g.node(ia).value;
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += nd.grad[i] * av[i];
    }
  });
}

Var Graph::scale_rows(Var a, std::vector<double> scale) {
  const Tensor& A = value(a);
  require(scale.size() == A.rows(), OpKind::kScaleRows, "scale length vs rows " + A.shape_string());
  const std::size_t c = A.cols();
  Tensor C = A;
  for (std::size_t r = 0; r < scale.size(); ++r)
    for (std::size_t j = 0; j < c; ++j) C(r, j) *= scale[r];
  return push(OpKind::kScaleRows, {a.id}, std::move(C),
              [scale = std::move(scale), c](Graph& g, std::uint32_t self) {
                const auto& nd = g.node(self);
                auto& ga = g.grad_of(nd.inputs[0]);
                for (std::size_t r = 0; r < scale.size(); ++r)
                  for (std::size_t j = 0; j < c; ++j) ga[r * c + j] += nd.grad[r * c + j] * scale[r];
              });
}

Var Graph::affine(Var a, double scale, double shift) {
  Tensor C = value(a);
  for (auto& v : C.data()) v = scale * v + shift;
  return push(OpKind::kAffine, {a.id}, std::move(C), [scale](Graph& g, std::uint32_t self) {
    const auto& nd = g.node(self);
    auto& ga = g.grad_of(nd.inputs[0]);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += scale * nd.grad[i];
  });
}

Var Graph::gelu(Var a) {
  Tensor C = value(a);
  for (auto& v : C.data()) v = gelu_value(v);
  return push(OpKind::kGelu, {a.id}, std::move(C), [](Graph& g, std::uint32_t self) {
    const auto& nd = g.node(self);
    const auto& x = g.node(nd.inputs[0]).value;
    auto& ga = g.grad_of(nd.inputs[0]);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += nd.grad[i] * gelu_grad(x[i]);
  });
}

Var Graph::clamp(Var a, double lo, double hi) {
  Tensor C = value(a);
  for (auto& v : C.data()) v = std::clamp(v, lo, hi);
  return push(OpKind::kClamp, {a.id}, std::move(C), [lo, hi](Graph& g, std::uint32_t self) {
    const auto& nd = g.node(self);
    const auto& x = g.node(nd.inputs[0]).value;
    auto& ga = g.grad_of(nd.inputs[0]);
    for (std::size_t i = 0; i < ga.size(); ++i) {
      if (x[i] >= lo && x[i] <= hi) ga[i] += nd.grad[i];
    }
  });
}

Var Graph::dropout(Var a, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return a;
  if (rate >= 1.0) throw ConfigError("dropout rate must be < 1");
  const Tensor& A = value(a);
  std::bernoulli_distribution keep(1.0 - rate);
  std::vector<double> factor(A.size());
  for (auto& f : factor) f = keep(rng) ? 1.0 / (1.0 - rate) : 0.0;
  Tensor C = A;
  for (std::size_t i = 0; i < C.size(); ++i) C[i] *= factor[i];
  return push(OpKind::kDropout, {a.id}, std::move(C),
              [factor = std::move(factor)](Graph& g, std::uint32_t self) {
                const auto& nd = g.node(self);
                auto& ga = g.grad_of(nd.inputs[0]);
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += nd.grad[i] * factor[i];
              });
}

// ---------------------------------------------------------------------------
// Row-wise normalizers

Var Graph::masked_softmax(Var logits, const Mask& mask) {
  const Tensor& X = value(logits);
  const std::size_t n = X.rows(), c = X.cols();
  require(mask.rows == n && mask.cols == c, OpKind::kMaskedSoftmax,
          "mask " + std::to_string(mask.rows) + "x" + std::to_string(mask.cols) + " vs " +
              X.shape_string());
  Tensor Y = Tensor::matrix(n, c);
  for (std::size_t r = 0; r < n; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j)
      if (mask(r, j)) mx = std::max(mx, X(r, j));
    require(std::isfinite(mx), OpKind::kMaskedSoftmax, "row " + std::to_string(r) + " fully masked");
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      if (!mask(r, j)) continue;
      Y(r, j) = std::exp(X(r, j) - mx);
      z += Y(r, j);
    }
    for (std::size_t j = 0; j < c; ++j) Y(r, j) /= z;
  }
  return push(OpKind::kMaskedSoftmax, {logits.id}, std::move(Y), [n, c](Graph& g, std::uint32_t self) {
    const auto& nd = g.node(self);
    const auto& y = nd.value;
    auto& gx = g.grad_of(nd.inputs[0]);
    for (std::size_t r = 0; r < n; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += nd.grad[r * c + j] * y[r * c + j];
      for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += y[r * c + j] * (nd.grad[r * c + j] - dot);
    }
  });
}

Var Graph::softmax(Var logits) {
  const Tensor& X = value(logits);
  return masked_softmax(logits, Mask(X.rows(), X.cols(), true));
}

Var Graph::log_softmax(Var logits) {
  const Tensor& X = value(logits);
  const std::size_t n = X.rows(), c = X.cols();
  Tensor Y = X;
  for (std::size_t r = 0; r < n; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, X(r, j));
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(X(r, j) - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) Y(r, j) -= lse;
  }
  return push(OpKind::kLogSoftmax, {logits.id}, std::move(Y), [n, c](Graph& g, std::uint32_t self) {
    const auto& nd = g.node(self);
    auto& gx = g.grad_of(nd.inputs[0]);
    for (std::size_t r = 0; r < n; ++r) {
      double gs = 0.0;
      for (std::size_t j = 0; j < c; ++j) gs += nd.grad[r * c + j];
      for (std::size_t j = 0; j < c; ++j)
        gx[r * c + j] += nd.grad[r * c + j] - std::exp(nd.value[r * c + j]) * gs;
    }
  });
}

Var Graph::log_sum_exp(Var a) {
  const Tensor& X = value(a);
  const std::size_t n = X.rows(), c = X.cols();
  Tensor Y = Tensor::matrix(n, 1);
  for (std::size_t r = 0; r < n; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, X(r, j));
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(X(r, j) - mx);
    Y[r] = mx + std::log(z);
  }
  return push(OpKind::kLogSumExp, {a.id}, std::move(Y), [n, c](Graph& g, std::uint32_t self) {
    const auto& nd = g.node(self);
    const auto& x = g.node(nd.inputs[0]).value;
    auto& gx = g.grad_of(nd.inputs[0]);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < c; ++j)
        gx[r * c + j] += nd.grad[r] * std::exp(x[r * c + j] - nd.value[r]);
  });
}

Var Graph::layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Tensor& X = value(x);
  const Tensor& G = value(gamma);
  const Tensor& B = value(beta);
  const std::size_t n = X.rows(), c = X.cols();
  require(G.size() == c && B.size() == c, OpKind::kLayerNorm, "gain/bias width vs " + X.shape_string());
  Tensor Y = Tensor::matrix(n, c);
  std::vector<double> xhat(n * c);
  std::vector<double> inv_std(n);
  for (std::size_t r = 0; r < n; ++r) {
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += X(r, j);
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (X(r, j) - mean) * (X(r, j) - mean);
    var /= static_cast<double>(c);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[r * c + j] = (X(r, j) - mean) * inv_std[r];
      Y(r, j) = xhat[r * c + j] * G[j] + B[j];
    }
  }
  return push(OpKind::kLayerNorm, {x.id, gamma.id, beta.id}, std::move(Y),
              [n, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& g, std::uint32_t self) {
                const auto& nd = g.node(self);
                const auto ix = nd.inputs[0], ig = nd.inputs[1], ib = nd.inputs[2];
                const auto& G = g.node(ig).value;
                if (g.needs(ig) || g.needs(ib)) {
                  for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t j = 0; j < c; ++j) {
                      if (g.needs(ig)) g.grad_of(ig)[j] += nd.grad[r * c + j] * xhat[r * c + j];
                      if (g.needs(ib)) g.grad_of(ib)[j] += nd.grad[r * c + j];
                    }
                }
                if (!g.needs(ix)) return;
                auto& gx = g.grad_of(ix);
                const double inv_c = 1.0 / static_cast<double>(c);
                for (std::size_t r = 0; r < n; ++r) {
                  double m1 = 0.0, m2 = 0.0;
                  for (std::size_t j = 0; j < c; ++j) {
                    const double dxh = nd.grad[r * c + j] * G[j];
                    m1 += dxh;
                    m2 += dxh * xhat[r * c + j];
                  }
                  m1 *= inv_c;
                  m2 *= inv_c;
                  for (std::size_t j = 0; j < c; ++j) {
                    const double dxh = nd.grad[r * c + j] * G[j];
                    gx[r * c + j] += inv_std[r] * (dxh - m1 - xhat[r * c + j] * m2);
                  }
                }
              });
}

// ---------------------------------------------------------------------------
// Indexing and shape

Var Graph::gather_rows(Var table, std::vector<std::int64_t> index) {
  const Tensor& T = value(table);
  const std::size_t c = T.cols();
  Tensor Y = Tensor::matrix(index.size(), c);
  for (std::size_t r = 0; r < index.size(); ++r) {
    const auto ix = index[r];
    if (ix < 0) continue;
    if (static_cast<std::size_t>(ix) >= T.rows()) {
      throw IndexError("embedding_gather: index " + std::to_string(ix) + " out of range for " +
                       std::to_string(T.rows()) + " rows");
    }
    std::copy_n(T.data().begin() + ix * static_cast<std::int64_t>(c), c, Y.data().begin() + r * c);
  }
  return push(OpKind::kGatherRows, {table.id}, std::move(Y),
              [index = std::move(index), c](Graph& g, std::uint32_t self) {
                const auto& nd = g.node(self);
                auto& gt = g.grad_of(nd.inputs[0]);
                for (std::size_t r = 0; r < index.size(); ++r) {
                  if (index[r] < 0) continue;
                  const auto base = static_cast<std::size_t>(index[r]) * c;
                  for (std::size_t j = 0; j < c; ++j) gt[base + j] += nd.grad[r * c + j];
                }
              });
}

Var Graph::concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), OpKind::kConcatCols, "no inputs");
  const std::size_t n = value(parts[0]).rows();
  std::vector<std::size_t> widths;
  std::vector<std::uint32_t> ids;
  std::size_t total = 0;
  for (auto p : parts) {
    require(value(p).rows() == n, OpKind::kConcatCols, "row count mismatch");
    widths.push_back(value(p).cols());
    ids.push_back(p.id);
    total += widths.back();
  }
  Tensor Y = Tensor::matrix(n, total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& P = value(parts[k]);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < widths[k]; ++j) Y(r, off + j) = P(r, j);
    off += widths[k];
  }
  return push(OpKind::kConcatCols, std::move(ids), std::move(Y),
              [widths = std::move(widths), n, total](Graph& g, std::uint32_t self) {
                const auto& nd = g.node(self);
                std::size_t off = 0;
                for (std::size_t k = 0; k < widths.size(); ++k) {
                  if (g.needs(nd.inputs[k])) {
                    auto& gp = g.grad_of(nd.inputs[k]);
                    for (std::size_t r = 0; r < n; ++r)
                      for (std::size_t j = 0; j < widths[k]; ++j)
                        gp[r * widths[k] + j] += nd.grad[r * total + off + j];
                  }
                  off += widths[k];
                }
              });
}

Var Graph::concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), OpKind::kConcatRows, "no inputs");
  const std::size_t c = value(parts[0]).cols();
  std::vector<std::size_t> sizes;
  std::vector<std::uint32_t> ids;
  std::vector<double> data;
  for (auto p : parts) {
    const Tensor& P = value(p);
    require(P.cols() == c, OpKind::kConcatRows, "column count mismatch");
    sizes.push_back(P.size());
    ids.push_back(p.id);
    data.insert(data.end(), P.data().begin(), P.data().end());
  }
  const std::size_t rows = data.size() / std::max<std::size_t>(c, 1);
  return push(OpKind::kConcatRows, std::move(ids), Tensor::matrix(rows, c, std::move(data)),
              [sizes = std::move(sizes)](Graph& g, std::uint32_t self) {
                const auto& nd = g.node(self);
                std::size_t off = 0;
                for (std::size_t k = 0; k < sizes.size(); ++k) {
                  if (g.needs(nd.inputs[k])) {
                    auto& gp = g.grad_of(nd.inputs[k]);
                    for (std::size_t i = 0; i < sizes[k]; ++i) gp[i] += nd.grad[off + i];
                  }
                  off += sizes[k];
                }
              });
}

Var Graph::slice_cols(Var a, std::size_t begin, std::size_t end) {
  const Tensor& A = value(a);
  const std::size_t n = A.rows(), c = A.cols();
  require(begin <= end && end <= c, OpKind::kSliceCols, "bad column range");
  const std::size_t w = end - begin;
  Tensor Y = Tensor::matrix(n, w);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < w; ++j) Y(r, j) = A(r, begin + j);
  return push(OpKind::kSliceCols, {a.id}, std::move(Y), [n, c, w, begin](Graph& g, std::uint32_t self) {
    const auto& nd = g.node(self);
    auto& ga = g.grad_of(nd.inputs[0]);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < w; ++j) ga[r * c + begin + j] += nd.grad[r * w + j];
  });
}

Var Graph::slice_rows(Var a, std::size_t begin, std::size_t end) {
  const Tensor& A = value(a);
  const std::size_t c = A.cols();
  require(begin <= end && end <= A.rows(), OpKind::kSliceRows, "bad row range");
  std::vector<double> data(A.data().begin() + static_cast<std::ptrdiff_t>(begin * c),
                           A.data().begin() + static_cast<std::ptrdiff_t>(end * c));
  return push(OpKind::kSliceRows, {a.id}, Tensor::matrix(end - begin, c, std::move(data)),
              [begin, c](Graph& g, std::uint32_t self) {
                const auto& nd = g.node(self);
                auto& ga = g.grad_of(nd.inputs[0]);
                for (std::size_t i = 0; i < nd.grad.size(); ++i) ga[begin * c + i] += nd.grad[i];
              });
}

Var Graph::pick(Var a, std::vector<std::size_t> cols) {
  const Tensor& A = value(a);
  const std::size_t n = A.rows(), c = A.cols();
  require(cols.size() == n, OpKind::kPick, "one column per row required");
  Tensor Y = Tensor::matrix(n, 1);
  for (std::size_t r = 0; r < n; ++r) {
    require(cols[r] < c, OpKind::kPick, "column out of range");
    Y[r] = A(r, cols[r]);
  }
  return push(OpKind::kPick, {a.id}, std::move(Y), [cols = std::move(cols), c](Graph& g, std::uint32_t self) {
    const auto& nd = g.node(self);
    auto& ga = g.grad_of(nd.inputs[0]);
    for (std::size_t r = 0; r < cols.size(); ++r) ga[r * c + cols[r]] += nd.grad[r];
  });
}

Var Graph::mean(Var a) {
  const Tensor& A = value(a);
  require(A.size() > 0, OpKind::kMean, "empty input");
  double s = 0.0;
  for (double v : A.data()) s += v;
  const double inv = 1.0 / static_cast<double>(A.size());
  return push(OpKind::kMean, {a.id}, Tensor::scalar(s * inv), [inv](Graph& g, std::uint32_t self) {
    const auto& nd = g.node(self);
    auto& ga = g.grad_of(nd.inputs[0]);
    for (auto& v : ga.data()) v += nd.grad[0] * inv;
  });
}

Var Graph::sum(Var a) {
  double s = 0.0;
  for (double v : value(a).data()) s += v;
  return push(OpKind::kSum, {a.id}, Tensor::scalar(s), [](Graph& g, std::uint32_t self) {
    const auto& nd = g.node(self);
    auto& ga = g.grad_of(nd.inputs[0]);
    for (auto& v : ga.data()) v += nd.grad[0];
  });
}

// ---------------------------------------------------------------------------
// Mixture primitives

Var Graph::gaussian_log_density(Var x, Var means, Var log_sigma) {
  const Tensor& X = value(x);
  const Tensor& M = value(means);
  const Tensor& S = value(log_sigma);
  const std::size_t n = X.rows(), d = X.cols(), K = S.cols();
  require(M.rows() == n && S.rows() == n && M.cols() == K * d, OpKind::kGaussianLogDensity,
          "x " + X.shape_string() + ", means " + M.shape_string() + ", log_sigma " + S.shape_string());
  Tensor Y = Tensor::matrix(n, K);
  const double dd = static_cast<double>(d);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t k = 0; k < K; ++k) {
      double sq = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = X(r, j) - M(r, k * d + j);
        sq += diff * diff;
      }
      const double ls = S(r, k);
      Y(r, k) = -0.5 * dd * kLog2Pi - dd * ls - 0.5 * sq * std::exp(-2.0 * ls);
    }
  }
  return push(OpKind::kGaussianLogDensity, {x.id, means.id, log_sigma.id}, std::move(Y),
              [n, d, K](Graph& g, std::uint32_t self) {
                const auto& nd = g.node(self);
                const auto ix = nd.inputs[0], im = nd.inputs[1], is = nd.inputs[2];
                const auto& X = g.node(ix).value;
                const auto& M = g.node(im).value;
                const auto& S = g.node(is).value;
                const double dd = static_cast<double>(d);
                for (std::size_t r = 0; r < n; ++r) {
                  for (std::size_t k = 0; k < K; ++k) {
                    const double go = nd.grad[r * K + k];
                    const double inv_var = std::exp(-2.0 * S[r * K + k]);
                    double sq = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                      const double diff = X[r * d + j] - M[r * K * d + k * d + j];
                      sq += diff * diff;
                      if (g.needs(ix)) g.grad_of(ix)[r * d + j] -= go * diff * inv_var;
                      if (g.needs(im)) g.grad_of(im)[r * K * d + k * d + j] += go * diff * inv_var;
                    }
                    if (g.needs(is)) g.grad_of(is)[r * K + k] += go * (-dd + sq * inv_var);
                  }
                }
              });
}

Var Graph::mixture_mean(Var weights, Var means) {
  const Tensor& W = value(weights);
  const Tensor& M = value(means);
  const std::size_t n = W.rows(), K = W.cols();
  require(M.rows() == n && K > 0 && M.cols() % K == 0, OpKind::kMixtureMean,
          "weights " + W.shape_string() + ", means " + M.shape_string());
  const std::size_t d = M.cols() / K;
  Tensor Y = Tensor::matrix(n, d);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t j = 0; j < d; ++j) Y(r, j) += W(r, k) * M(r, k * d + j);
  return push(OpKind::kMixtureMean, {weights.id, means.id}, std::move(Y), [n, K, d](Graph& g, std::uint32_t self) {
    const auto& nd = g.node(self);
    const auto iw = nd.inputs[0], im = nd.inputs[1];
    const auto& W = g.node(iw).value;
    const auto& M = g.node(im).value;
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t k = 0; k < K; ++k) {
        double gw = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double go = nd.grad[r * d + j];
          gw += go * M[r * K * d + k * d + j];
          if (g.needs(im)) g.grad_of(im)[r * K * d + k * d + j] += go * W[r * K + k];
        }
        if (g.needs(iw)) g.grad_of(iw)[r * K + k] += gw;
      }
    }
  });
}

// ---------------------------------------------------------------------------

double finite_difference_check(ParameterStore& params, ParamId param, const LossBuilder& build,
                               double epsilon, std::size_t max_coords, std::uint64_t seed) {
  if (!(epsilon > 0.0)) throw ConfigError("finite difference epsilon must be positive");
  std::vector<Tensor> analytic;
  {
    Graph g(&params);
    Var loss = build(g);
    analytic = g.backward(loss);
  }
  Tensor& p = params.value(param);
  std::vector<std::size_t> coords(p.size());
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  if (coords.size() > max_coords) {
    std::mt19937_64 rng(seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(max_coords);
  }
  auto eval = [&]() {
    Graph g(&params, false);
    return g.value(build(g))[0];
  };
  double worst = 0.0;
  for (auto c : coords) {
    const double orig = p[c];
    p[c] = orig + epsilon;
    const double up = eval();
    p[c] = orig - epsilon;
    const double down = eval();
    p[c] = orig;
    const double numeric = (up - down) / (2.0 * epsilon);
    const double a = analytic[param][c];
    worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
  }
  return worst;
}

}  // namespace gmflow
