#pragma once

// Parameter registry and the transformer building blocks shared by the
// encoders and the fusion network.

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mmfd/grad_check.hpp"
#include "mmfd/ops.hpp"
#include "mmfd/rng.hpp"

namespace mmfd {

enum class Init { zeros, ones, xavier, embedding };

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Ordered list of named trainable tensors. Initial values depend only on
/// (seed, name), never on creation order.
class ParamSet {
 public:
  explicit ParamSet(std::uint64_t seed = 0) : seed_(seed) {}

  Tensor make(const std::string& name, Shape shape, Init init, std::size_t fan_in = 0, std::size_t fan_out = 0) {
    if (index_.count(name)) throw ContractError("duplicate parameter name '" + name + "'");
    Tensor t(shape, 0.0, true);
    Rng rng(seed_, {fnv1a(name)});
    auto v = t.mutable_values();
    switch (init) {
      case Init::zeros: break;
      case Init::ones: std::fill(v.begin(), v.end(), 1.0); break;
      case Init::xavier: {
        if (fan_in == 0) fan_in = shape.front();
        if (fan_out == 0) fan_out = shape.back();
        const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        for (auto& x : v) x = rng.uniform(-a, a);
        break;
      }
      case Init::embedding:
        for (auto& x : v) x = rng.normal();
        break;
    }
    index_.emplace(name, params_.size());
    params_.emplace_back(name, t);
    return t;
  }

  const std::vector<NamedTensor>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.numel();
    return n;
  }
  Tensor find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("no parameter named '" + name + "'");
    return params_[it->second].second;
  }
  void zero_grad() {
    for (auto& [_, t] : params_) t.zero_grad();
  }

 private:
  std::uint64_t seed_;
  std::vector<NamedTensor> params_;
  std::map<std::string, std::size_t> index_;
};

/// Per-call forward options. Dropout is only applied when training.
struct ForwardContext {
  bool training = false;
  double dropout = 0.0;
  Rng* rng = nullptr;
};

inline Tensor dropout(const Tensor& x, const ForwardContext& ctx) {
  if (!ctx.training || ctx.dropout <= 0.0 || ctx.rng == nullptr) return x;
  const double keep = 1.0 - ctx.dropout;
  std::vector<double> mask(x.numel());
  for (auto& m : mask) m = ctx.rng->uniform() < keep ? 1.0 / keep : 0.0;
  return apply_mask(x, std::move(mask));
}

/// Fixed sinusoidal table [L×d]: sin on even columns, cos on odd ones.
inline Tensor positional_encoding(std::size_t length, std::size_t d) {
  std::vector<double> pe(length * d);
  for (std::size_t pos = 0; pos < length; ++pos)
    for (std::size_t i = 0; i < d; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
      const double a = static_cast<double>(pos) * rate;
      pe[pos * d + i] = (i % 2 == 0) ? std::sin(a) : std::cos(a);
    }
  return Tensor({length, d}, std::move(pe));
}

inline Tensor add_positional(const Tensor& x) {
  static thread_local std::map<std::pair<std::size_t, std::size_t>, Tensor> cache;
  const auto key = std::make_pair(x.dim(0), x.dim(1));
  auto it = cache.find(key);
  if (it == cache.end()) it = cache.emplace(key, positional_encoding(key.first, key.second)).first;
  return add(x, it->second);
}

struct Linear {
  Tensor weight;  // [in × out]
  Tensor bias;    // [out]

  Linear() = default;
  Linear(ParamSet& ps, const std::string& name, std::size_t in, std::size_t out)
      : weight(ps.make(name + ".weight", {in, out}, Init::xavier)), bias(ps.make(name + ".bias", {out}, Init::zeros)) {}

  Tensor operator()(const Tensor& x) const { return add_row(matmul(x, weight), bias); }
};

struct LayerNormParams {
  Tensor gamma, beta;

  LayerNormParams() = default;
  LayerNormParams(ParamSet& ps, const std::string& name, std::size_t d)
      : gamma(ps.make(name + ".gamma", {d}, Init::ones)), beta(ps.make(name + ".beta", {d}, Init::zeros)) {}

  Tensor operator()(const Tensor& x, double eps) const { return layer_norm(x, gamma, beta, eps); }
};

/// Intermediate values of one attention block, for inspection in tests.
struct AttentionTrace {
  std::vector<Tensor> weights;  // per head, [L_q × L_kv]
  Tensor attended;              // concatenated heads · W_o, before residual
};

/// Post-norm transformer layer whose queries come from one sequence and
/// keys/values from another; self-attention when both are the same.
///
///   a = MultiHead(x_q W_q, x_kv W_k, x_kv W_v) W_o
///   y = LN1(x_q + a)
///   out = LN2(y + W_2 gelu(W_1 y + b_1) + b_2)
struct AttentionBlock {
  Tensor w_q, w_k, w_v, w_o;
  LayerNormParams norm1, norm2;
  Linear ff1, ff2;
  std::size_t n_heads = 1;
  double eps = 1e-5;

  AttentionBlock() = default;
  AttentionBlock(ParamSet& ps, const std::string& name, std::size_t d, std::size_t heads, std::size_t hidden,
                 double ln_eps)
      : w_q(ps.make(name + ".w_q", {d, d}, Init::xavier)),
        w_k(ps.make(name + ".w_k", {d, d}, Init::xavier)),
        w_v(ps.make(name + ".w_v", {d, d}, Init::xavier)),
        w_o(ps.make(name + ".w_o", {d, d}, Init::xavier)),
        norm1(ps, name + ".norm1", d),
        norm2(ps, name + ".norm2", d),
        ff1(ps, name + ".ff1", d, hidden),
        ff2(ps, name + ".ff2", hidden, d),
        n_heads(heads),
        eps(ln_eps) {
    if (heads == 0 || d % heads != 0) throw ContractError("attention block: d_model must be divisible by n_heads");
  }

  std::size_t d_model() const { return w_q.dim(0); }

  Tensor operator()(const Tensor& x_q, const Tensor& x_kv, const ForwardContext& ctx = {},
                    AttentionTrace* trace = nullptr) const {
    const std::size_t d = d_model();
    if (x_q.rank() != 2 || x_kv.rank() != 2 || x_q.dim(1) != d || x_kv.dim(1) != d) {
      throw ShapeError("cross_attention: inputs " + shape_str(x_q.shape()) + " and " + shape_str(x_kv.shape()) +
                       " must both have width d_model=" + std::to_string(d));
    }
    const std::size_t dk = d / n_heads;
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
    Tensor q = matmul(x_q, w_q);
    Tensor k = matmul(x_kv, w_k);
    Tensor v = matmul(x_kv, w_v);
    std::vector<Tensor> heads;
    heads.reserve(n_heads);
    for (std::size_t h = 0; h < n_heads; ++h) {
      Tensor qh = n_heads == 1 ? q : slice_cols(q, h * dk, (h + 1) * dk);
      Tensor kh = n_heads == 1 ? k : slice_cols(k, h * dk, (h + 1) * dk);
      Tensor vh = n_heads == 1 ? v : slice_cols(v, h * dk, (h + 1) * dk);
      Tensor weights = softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt_dk));
      if (trace) trace->weights.push_back(weights);
      heads.push_back(matmul(weights, vh));
    }
    Tensor attended = matmul(n_heads == 1 ? heads.front() : concat_cols(heads), w_o);
    if (trace) trace->attended = attended;
    Tensor y = norm1(add(x_q, dropout(attended, ctx)), eps);
    Tensor ff = ff2(gelu(ff1(y)));
    return norm2(add(y, dropout(ff, ctx)), eps);
  }
};

}  // namespace mmfd
