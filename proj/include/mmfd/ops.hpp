#pragma once

// Differentiable tensor operations. Every operation validates shapes,
// computes its forward values eagerly, and registers a backward closure.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <string>
#include <vector>

#include "mmfd/tensor.hpp"

namespace mmfd {

namespace kernel {

// Four doubles as one value; the compiler maps it to whatever SIMD width
// the target has.
using v4d = double __attribute__((vector_size(32)));

[[gnu::always_inline]] inline v4d load4(const double* p) {
  v4d v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

[[gnu::always_inline]] inline void add_store4(double* p, v4d v) {
  v4d o;
  std::memcpy(&o, p, sizeof o);
  o += v;
  std::memcpy(p, &o, sizeof o);
}

// C[m×n] (+)= A[m×k] · B[k×n]. Each output entry is summed over p in
// ascending order in a register, then added to C.
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    const double* a0 = a + i * k;
    const double* a1 = a0 + k;
    const double* a2 = a1 + k;
    const double* a3 = a2 + k;
    std::size_t j = 0;
    for (; j + 8 <= n; j += 8) {
      v4d c00{}, c01{}, c10{}, c11{}, c20{}, c21{}, c30{}, c31{};
      for (std::size_t p = 0; p < k; ++p) {
        const v4d b0 = load4(b + p * n + j), b1 = load4(b + p * n + j + 4);
        v4d x = v4d{} + a0[p];
        c00 += x * b0;
        c01 += x * b1;
        x = v4d{} + a1[p];
        c10 += x * b0;
        c11 += x * b1;
        x = v4d{} + a2[p];
        c20 += x * b0;
        c21 += x * b1;
        x = v4d{} + a3[p];
        c30 += x * b0;
        c31 += x * b1;
      }
      add_store4(c + i * n + j, c00);
      add_store4(c + i * n + j + 4, c01);
      add_store4(c + (i + 1) * n + j, c10);
      add_store4(c + (i + 1) * n + j + 4, c11);
      add_store4(c + (i + 2) * n + j, c20);
      add_store4(c + (i + 2) * n + j + 4, c21);
      add_store4(c + (i + 3) * n + j, c30);
      add_store4(c + (i + 3) * n + j + 4, c31);
    }
    for (; j + 4 <= n; j += 4) {
      v4d c0{}, c1{}, c2{}, c3{};
      for (std::size_t p = 0; p < k; ++p) {
        const v4d b0 = load4(b + p * n + j);
        c0 += a0[p] * b0;
        c1 += a1[p] * b0;
        c2 += a2[p] * b0;
        c3 += a3[p] * b0;
      }
      add_store4(c + i * n + j, c0);
      add_store4(c + (i + 1) * n + j, c1);
      add_store4(c + (i + 2) * n + j, c2);
      add_store4(c + (i + 3) * n + j, c3);
    }
    for (; j < n; ++j) {
      double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        const double bv = b[p * n + j];
        s0 += a0[p] * bv;
        s1 += a1[p] * bv;
        s2 += a2[p] * bv;
        s3 += a3[p] * bv;
      }
      c[i * n + j] += s0;
      c[(i + 1) * n + j] += s1;
      c[(i + 2) * n + j] += s2;
      c[(i + 3) * n + j] += s3;
    }
  }
  for (; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline std::vector<double> transposed(const double* x, std::size_t rows, std::size_t cols) {
  std::vector<double> t(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = x[i * cols + j];
  return t;
}

// C[m×n] (+)= A[m×k] · B[n×k]ᵀ
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  if (m >= 4) {
    const auto bt = transposed(b, n, k);
    gemm_nn(a, bt.data(), c, m, k, n);
    return;
  }
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      crow[j] += s;
    }
  }
}

// C[k×n] (+)= A[m×k]ᵀ · B[m×n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  if (k >= 4 && m > 1) {
    const auto at = transposed(a, m, k);
    gemm_nn(at.data(), b, c, k, m, n);
    return;
  }
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

}  // namespace kernel

namespace detail {

inline void require_rank(const Tensor& t, std::size_t r, const char* op) {
  if (!t.defined()) throw ShapeError(std::string(op) + ": undefined tensor");
  if (t.rank() != r) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + shape_str(t.shape()));
  }
}

inline void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

inline std::vector<double>& pgrad(Node& self, std::size_t i) { return self.parents[i]->grad_buffer(); }
inline bool pneeds(const Node& self, std::size_t i) { return self.parents[i]->requires_grad; }
inline const std::vector<double>& pval(const Node& self, std::size_t i) { return self.parents[i]->value; }

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  kernel::gemm_nn(a.values().data(), b.values().data(), out.data(), m, k, n);
  return detail::make_result({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    const double* g = self.grad.data();
    if (detail::pneeds(self, 0)) kernel::gemm_nt(g, detail::pval(self, 1).data(), detail::pgrad(self, 0).data(), m, n, k);
    if (detail::pneeds(self, 1)) kernel::gemm_tn(detail::pval(self, 0).data(), g, detail::pgrad(self, 1).data(), m, k, n);
  });
}

/// a · bᵀ for a [m×k], b [n×k].
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul_nt");
  detail::require_rank(b, 2, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw ShapeError("matmul_nt: inner dimensions disagree, " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  }
  std::vector<double> out(m * n, 0.0);
  kernel::gemm_nt(a.values().data(), b.values().data(), out.data(), m, k, n);
  return detail::make_result({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    const double* g = self.grad.data();
    // dA = G·B, dB = Gᵀ·A
    if (detail::pneeds(self, 0)) kernel::gemm_nn(g, detail::pval(self, 1).data(), detail::pgrad(self, 0).data(), m, n, k);
    if (detail::pneeds(self, 1)) kernel::gemm_tn(g, detail::pval(self, 0).data(), detail::pgrad(self, 1).data(), m, n, k);
  });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  auto v = a.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = v[i * n + j];
  return detail::make_result({n, m}, std::move(out), {a}, [m, n](detail::Node& self) {
    auto& ga = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += self.grad[j * m + i];
  });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: " + shape_str(a.shape()) + " cannot become " + shape_str(shape));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  return detail::make_result(std::move(shape), std::move(out), {a}, [](detail::Node& self) {
    auto& ga = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same(a, b, "add");
  std::vector<double> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (!detail::pneeds(self, p)) continue;
      auto& g = detail::pgrad(self, p);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same(a, b, "sub");
  std::vector<double> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    if (detail::pneeds(self, 0)) {
      auto& g = detail::pgrad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (detail::pneeds(self, 1)) {
      auto& g = detail::pgrad(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

/// Hadamard product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same(a, b, "mul");
  std::vector<double> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    const auto& av = detail::pval(self, 0);
    const auto& bv = detail::pval(self, 1);
    if (detail::pneeds(self, 0)) {
      auto& g = detail::pgrad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (detail::pneeds(self, 1)) {
      auto& g = detail::pgrad(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (auto& x : out) x *= s;
  return detail::make_result(a.shape(), std::move(out), {a}, [s](detail::Node& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
  });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (auto& x : out) x += s;
  return detail::make_result(a.shape(), std::move(out), {a}, [](detail::Node& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

/// x [...×n] + b [n], broadcast over every leading index.
inline Tensor add_row(const Tensor& x, const Tensor& b) {
  const std::size_t n = x.shape().back(), m = x.numel() / n;
  if (b.numel() != n) {
    throw ShapeError("add_row: bias " + shape_str(b.shape()) + " does not match " + shape_str(x.shape()));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bv[j];
  return detail::make_result(x.shape(), std::move(out), {x, b}, [m, n](detail::Node& self) {
    if (detail::pneeds(self, 0)) {
      auto& g = detail::pgrad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (detail::pneeds(self, 1)) {
      auto& g = detail::pgrad(self, 1);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
    }
  });
}

inline Tensor relu(const Tensor& x) {
  std::vector<double> out(x.values().begin(), x.values().end());
  for (auto& v : out) v = v > 0.0 ? v : 0.0;
  return detail::make_result(x.shape(), std::move(out), {x}, [](detail::Node& self) {
    const auto& xv = detail::pval(self, 0);
    auto& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > 0.0) g[i] += self.grad[i];
  });
}

/// Exact (erf) GELU.
inline Tensor gelu(const Tensor& x) {
  std::vector<double> out(x.values().begin(), x.values().end());
  for (auto& v : out) v = 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
  return detail::make_result(x.shape(), std::move(out), {x}, [](detail::Node& self) {
    const auto& xv = detail::pval(self, 0);
    auto& g = detail::pgrad(self, 0);
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xv[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      g[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

enum class Elementwise { relu, gelu, add, mul_scalar };

/// Generic elementwise entry point; `scalar` is used by add and mul_scalar.
inline Tensor elementwise(const Tensor& x, Elementwise fn, double scalar = 0.0) {
  switch (fn) {
    case Elementwise::relu: return relu(x);
    case Elementwise::gelu: return gelu(x);
    case Elementwise::add: return add_scalar(x, scalar);
    case Elementwise::mul_scalar: return scale(x, scalar);
  }
  throw ContractError("elementwise: unknown function");
}

/// Row-wise softmax with max subtraction.
inline Tensor softmax_rows(const Tensor& x) {
  detail::require_rank(x, 2, "softmax_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  auto xv = x.values();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xv.data() + i * n;
    double mx = row[0];
    for (std::size_t j = 0; j < n; ++j) {
      if (!std::isfinite(row[j])) throw NumericError("softmax_rows: non-finite input at row " + std::to_string(i));
      mx = std::max(mx, row[j]);
    }
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += (out[i * n + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= s;
  }
  return detail::make_result({m, n}, std::move(out), {x}, [m, n](detail::Node& self) {
    const auto& y = self.value;
    auto& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += self.grad[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += y[i * n + j] * (self.grad[i * n + j] - dot);
    }
  });
}

/// Per-row normalisation over the last axis, then gamma·x̂ + beta.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
  detail::require_rank(x, 2, "layer_norm");
  if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (gamma.numel() != n || beta.numel() != n) {
    throw ShapeError("layer_norm: gamma " + shape_str(gamma.shape()) + " / beta " + shape_str(beta.shape()) +
                     " do not match row width " + std::to_string(n));
  }
  auto xv = x.values();
  auto gv = gamma.values();
  auto bv = beta.values();
  std::vector<double> xhat(m * n), inv_std(m), out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xv.data() + i * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (row[j] - mean) * inv_std[i];
      out[i * n + j] = gv[j] * xhat[i * n + j] + bv[j];
    }
  }
  return detail::make_result(
      {m, n}, std::move(out), {x, gamma, beta},
      [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        const auto& gv = detail::pval(self, 1);
        const double* g = self.grad.data();
        if (detail::pneeds(self, 0)) {
          auto& gx = detail::pgrad(self, 0);
          for (std::size_t i = 0; i < m; ++i) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double dxh = g[i * n + j] * gv[j];
              s1 += dxh;
              s2 += dxh * xhat[i * n + j];
            }
            const double inv_n = 1.0 / static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j) {
              const double dxh = g[i * n + j] * gv[j];
              gx[i * n + j] += inv_std[i] * (dxh - inv_n * s1 - xhat[i * n + j] * inv_n * s2);
            }
          }
        }
        if (detail::pneeds(self, 1)) {
          auto& gg = detail::pgrad(self, 1);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gg[j] += g[i * n + j] * xhat[i * n + j];
        }
        if (detail::pneeds(self, 2)) {
          auto& gb = detail::pgrad(self, 2);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
        }
      });
}

/// Valid cross-correlation. x [L×c_in], kernels [c_out×c_in×w] → [L'×c_out],
/// L' = (L - w) / stride + 1.
inline Tensor conv1d(const Tensor& x, const Tensor& kernels, std::size_t stride) {
  detail::require_rank(x, 2, "conv1d");
  detail::require_rank(kernels, 3, "conv1d");
  if (stride == 0) throw ContractError("conv1d: stride must be positive");
  const std::size_t len = x.dim(0), cin = x.dim(1);
  const std::size_t cout = kernels.dim(0), w = kernels.dim(2);
  if (kernels.dim(1) != cin) {
    throw ShapeError("conv1d: kernel " + shape_str(kernels.shape()) + " expects " + std::to_string(kernels.dim(1)) +
                     " input channels, input " + shape_str(x.shape()) + " has " + std::to_string(cin));
  }
  if (w > len) {
    throw ShapeError("conv1d: kernel width " + std::to_string(w) + " exceeds input length " + std::to_string(len));
  }
  const std::size_t lout = (len - w) / stride + 1;
  const std::size_t patch = w * cin;
  auto kv = kernels.values();
  std::vector<double> kmat(patch * cout);
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t c = 0; c < cin; ++c)
      for (std::size_t t = 0; t < w; ++t) kmat[(t * cin + c) * cout + o] = kv[(o * cin + c) * w + t];
  // im2col: window i is the contiguous run x[i·stride .. i·stride+w)
  auto xv = x.values();
  std::vector<double> cols(lout * patch);
  for (std::size_t i = 0; i < lout; ++i)
    std::copy_n(xv.data() + i * stride * cin, patch, cols.data() + i * patch);
  std::vector<double> out(lout * cout, 0.0);
  kernel::gemm_nn(cols.data(), kmat.data(), out.data(), lout, patch, cout);
  return detail::make_result(
      {lout, cout}, std::move(out), {x, kernels},
      [=, kmat = std::move(kmat), cols = std::move(cols)](detail::Node& self) {
        const double* g = self.grad.data();
        if (detail::pneeds(self, 0)) {
          std::vector<double> gcols(lout * patch, 0.0);
          kernel::gemm_nt(g, kmat.data(), gcols.data(), lout, cout, patch);
          auto& gx = detail::pgrad(self, 0);
          for (std::size_t i = 0; i < lout; ++i) {
            double* dst = gx.data() + i * stride * cin;
            const double* src = gcols.data() + i * patch;
            for (std::size_t q = 0; q < patch; ++q) dst[q] += src[q];
          }
        }
        if (detail::pneeds(self, 1)) {
          std::vector<double> gk(patch * cout, 0.0);
          kernel::gemm_tn(cols.data(), g, gk.data(), lout, patch, cout);
          auto& gker = detail::pgrad(self, 1);
          for (std::size_t o = 0; o < cout; ++o)
            for (std::size_t c = 0; c < cin; ++c)
              for (std::size_t t = 0; t < w; ++t) gker[(o * cin + c) * w + t] += gk[(t * cin + c) * cout + o];
        }
      });
}

/// Valid 2-D cross-correlation. x [H×W×c_in], kernels [c_out×c_in×kh×kw]
/// → [H'×W'×c_out] with the same stride on both axes.
inline Tensor conv2d(const Tensor& x, const Tensor& kernels, std::size_t stride) {
  detail::require_rank(x, 3, "conv2d");
  detail::require_rank(kernels, 4, "conv2d");
  if (stride == 0) throw ContractError("conv2d: stride must be positive");
  const std::size_t h = x.dim(0), wd = x.dim(1), cin = x.dim(2);
  const std::size_t cout = kernels.dim(0), kh = kernels.dim(2), kw = kernels.dim(3);
  if (kernels.dim(1) != cin) {
    throw ShapeError("conv2d: kernel " + shape_str(kernels.shape()) + " does not match input channels of " +
                     shape_str(x.shape()));
  }
  if (kh > h || kw > wd) {
    throw ShapeError("conv2d: kernel " + shape_str(kernels.shape()) + " larger than input " + shape_str(x.shape()));
  }
  const std::size_t ho = (h - kh) / stride + 1, wo = (wd - kw) / stride + 1;
  const std::size_t patch = kh * kw * cin;
  auto kv = kernels.values();
  std::vector<double> kmat(patch * cout);
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t c = 0; c < cin; ++c)
      for (std::size_t r = 0; r < kh; ++r)
        for (std::size_t s = 0; s < kw; ++s)
          kmat[((r * kw + s) * cin + c) * cout + o] = kv[((o * cin + c) * kh + r) * kw + s];
  // im2col
  auto xv = x.values();
  std::vector<double> cols(ho * wo * patch);
  for (std::size_t i = 0; i < ho; ++i)
    for (std::size_t j = 0; j < wo; ++j) {
      double* dst = cols.data() + (i * wo + j) * patch;
      for (std::size_t r = 0; r < kh; ++r) {
        const double* src = xv.data() + ((i * stride + r) * wd + j * stride) * cin;
        std::copy(src, src + kw * cin, dst + r * kw * cin);
      }
    }
  std::vector<double> out(ho * wo * cout, 0.0);
  kernel::gemm_nn(cols.data(), kmat.data(), out.data(), ho * wo, patch, cout);
  return detail::make_result(
      {ho, wo, cout}, std::move(out), {x, kernels},
      [=, kmat = std::move(kmat), cols = std::move(cols)](detail::Node& self) {
        const double* g = self.grad.data();
        if (detail::pneeds(self, 0)) {
          std::vector<double> gcols(ho * wo * patch, 0.0);
          kernel::gemm_nt(g, kmat.data(), gcols.data(), ho * wo, cout, patch);
          auto& gx = detail::pgrad(self, 0);
          for (std::size_t i = 0; i < ho; ++i)
            for (std::size_t j = 0; j < wo; ++j) {
              const double* src = gcols.data() + (i * wo + j) * patch;
              for (std::size_t r = 0; r < kh; ++r) {
                double* dst = gx.data() + ((i * stride + r) * wd + j * stride) * cin;
                for (std::size_t q = 0; q < kw * cin; ++q) dst[q] += src[r * kw * cin + q];
              }
            }
        }
        if (detail::pneeds(self, 1)) {
          std::vector<double> gk(patch * cout, 0.0);
          kernel::gemm_tn(cols.data(), g, gk.data(), ho * wo, patch, cout);
          auto& gker = detail::pgrad(self, 1);
          for (std::size_t o = 0; o < cout; ++o)
            for (std::size_t c = 0; c < cin; ++c)
              for (std::size_t r = 0; r < kh; ++r)
                for (std::size_t s = 0; s < kw; ++s)
                  gker[((o * cin + c) * kh + r) * kw + s] += gk[((r * kw + s) * cin + c) * cout + o];
        }
      });
}

enum class PoolKind { max, mean };

/// Pooling over the leading axis of x [L×c].
inline Tensor pool1d(const Tensor& x, PoolKind kind, std::size_t window, std::size_t stride) {
  detail::require_rank(x, 2, "pool1d");
  if (window == 0 || stride == 0) throw ContractError("pool1d: window and stride must be positive");
  const std::size_t len = x.dim(0), c = x.dim(1);
  if (window > len) {
    throw ShapeError("pool1d: window " + std::to_string(window) + " larger than input length " + std::to_string(len));
  }
  const std::size_t lout = (len - window) / stride + 1;
  auto xv = x.values();
  std::vector<double> out(lout * c);
  std::vector<std::size_t> arg(kind == PoolKind::max ? lout * c : 0);
  for (std::size_t i = 0; i < lout; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      if (kind == PoolKind::max) {
        std::size_t best = i * stride * c + ch;
        for (std::size_t t = 1; t < window; ++t) {
          const std::size_t idx = (i * stride + t) * c + ch;
          if (xv[idx] > xv[best]) best = idx;
        }
        arg[i * c + ch] = best;
        out[i * c + ch] = xv[best];
      } else {
        double s = 0.0;
        for (std::size_t t = 0; t < window; ++t) s += xv[(i * stride + t) * c + ch];
        out[i * c + ch] = s / static_cast<double>(window);
      }
    }
  return detail::make_result({lout, c}, std::move(out), {x},
                             [=, arg = std::move(arg)](detail::Node& self) {
                               auto& gx = detail::pgrad(self, 0);
                               for (std::size_t i = 0; i < lout; ++i)
                                 for (std::size_t ch = 0; ch < c; ++ch) {
                                   const double g = self.grad[i * c + ch];
                                   if (kind == PoolKind::max) {
                                     gx[arg[i * c + ch]] += g;
                                   } else {
                                     for (std::size_t t = 0; t < window; ++t)
                                       gx[(i * stride + t) * c + ch] += g / static_cast<double>(window);
                                   }
                                 }
                             });
}

/// Square-window pooling over the two spatial axes of x [H×W×c].
inline Tensor pool2d(const Tensor& x, PoolKind kind, std::size_t window, std::size_t stride) {
  detail::require_rank(x, 3, "pool2d");
  if (window == 0 || stride == 0) throw ContractError("pool2d: window and stride must be positive");
  const std::size_t h = x.dim(0), wd = x.dim(1), c = x.dim(2);
  if (window > h || window > wd) {
    throw ShapeError("pool2d: window " + std::to_string(window) + " larger than input " + shape_str(x.shape()));
  }
  const std::size_t ho = (h - window) / stride + 1, wo = (wd - window) / stride + 1;
  auto xv = x.values();
  const double area = static_cast<double>(window * window);
  std::vector<double> out(ho * wo * c);
  std::vector<std::size_t> arg(kind == PoolKind::max ? out.size() : 0);
  for (std::size_t i = 0; i < ho; ++i)
    for (std::size_t j = 0; j < wo; ++j)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t o = (i * wo + j) * c + ch;
        std::size_t best = ((i * stride) * wd + j * stride) * c + ch;
        double s = 0.0;
        for (std::size_t r = 0; r < window; ++r)
          for (std::size_t q = 0; q < window; ++q) {
            const std::size_t idx = ((i * stride + r) * wd + j * stride + q) * c + ch;
            s += xv[idx];
            if (xv[idx] > xv[best]) best = idx;
          }
        if (kind == PoolKind::max) {
          arg[o] = best;
          out[o] = xv[best];
        } else {
          out[o] = s / area;
        }
      }
  return detail::make_result({ho, wo, c}, std::move(out), {x}, [=, arg = std::move(arg)](detail::Node& self) {
    auto& gx = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t o = (i * wo + j) * c + ch;
          if (kind == PoolKind::max) {
            gx[arg[o]] += self.grad[o];
          } else {
            for (std::size_t r = 0; r < window; ++r)
              for (std::size_t q = 0; q < window; ++q)
                gx[((i * stride + r) * wd + j * stride + q) * c + ch] += self.grad[o] / area;
          }
        }
  });
}

/// Mean over rows: [L×d] → [d].
inline Tensor mean_rows(const Tensor& x) {
  detail::require_rank(x, 2, "mean_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  auto xv = x.values();
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += xv[i * n + j];
  for (auto& v : out) v /= static_cast<double>(m);
  return detail::make_result({n}, std::move(out), {x}, [m, n](detail::Node& self) {
    auto& g = detail::pgrad(self, 0);
    const double inv = 1.0 / static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j] * inv;
  });
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return detail::make_result({1}, {s}, {x}, [](detail::Node& self) {
    auto& g = detail::pgrad(self, 0);
    for (auto& v : g) v += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

/// Columns [begin, end) of a rank-2 tensor.
inline Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  detail::require_rank(x, 2, "slice_cols");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (begin >= end || end > n) throw ShapeError("slice_cols: bad range for " + shape_str(x.shape()));
  const std::size_t w = end - begin;
  auto xv = x.values();
  std::vector<double> out(m * w);
  for (std::size_t i = 0; i < m; ++i) std::copy_n(xv.data() + i * n + begin, w, out.data() + i * w);
  return detail::make_result({m, w}, std::move(out), {x}, [m, n, w, begin](detail::Node& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) g[i * n + begin + j] += self.grad[i * w + j];
  });
}

/// Horizontal concatenation of equal-height rank-2 tensors.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t m = parts.front().dim(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require_rank(p, 2, "concat_cols");
    if (p.dim(0) != m) throw ShapeError("concat_cols: row count mismatch " + shape_str(p.shape()));
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  std::vector<double> out(m * total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto v = parts[k].values();
    for (std::size_t i = 0; i < m; ++i) std::copy_n(v.data() + i * widths[k], widths[k], out.data() + i * total + off);
    off += widths[k];
  }
  return detail::make_result({m, total}, std::move(out), parts, [m, total, widths](detail::Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (detail::pneeds(self, k)) {
        auto& g = detail::pgrad(self, k);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) g[i * widths[k] + j] += self.grad[i * total + off + j];
      }
      off += widths[k];
    }
  });
}

/// Vertical concatenation. Each part is [L_i×d] or a vector [d] (one row).
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t d = parts.front().shape().back();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.rank() > 2 || p.shape().back() != d) throw ShapeError("concat_rows: incompatible part " + shape_str(p.shape()));
    rows += p.numel() / d;
  }
  std::vector<double> out;
  out.reserve(rows * d);
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  return detail::make_result({rows, d}, std::move(out), parts, [](detail::Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      const std::size_t sz = self.parents[k]->value.size();
      if (detail::pneeds(self, k)) {
        auto& g = detail::pgrad(self, k);
        for (std::size_t i = 0; i < sz; ++i) g[i] += self.grad[off + i];
      }
      off += sz;
    }
  });
}

/// Row i of a rank-2 tensor as a vector [d].
inline Tensor row(const Tensor& x, std::size_t i) {
  detail::require_rank(x, 2, "row");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (i >= m) throw ShapeError("row: index " + std::to_string(i) + " out of range for " + shape_str(x.shape()));
  std::vector<double> out(x.values().begin() + static_cast<std::ptrdiff_t>(i * n),
                          x.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
  return detail::make_result({n}, std::move(out), {x}, [i, n](detail::Node& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j];
  });
}

/// Embedding lookup: rows `ids` of table [V×d] → [L×d].
inline Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  detail::require_rank(table, 2, "gather_rows");
  if (ids.empty()) throw InputError("gather_rows: empty id list");
  const std::size_t v = table.dim(0), d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  auto tv = table.values();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      throw InputError("gather_rows: id " + std::to_string(ids[i]) + " outside table of " + std::to_string(v) + " rows");
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  return detail::make_result({ids.size(), d}, std::move(out), {table}, [ids, d](detail::Node& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) g[static_cast<std::size_t>(ids[i]) * d + j] += self.grad[i * d + j];
  });
}

/// x[i] for the leading axis: [N×...] → [...].
inline Tensor slice_first(const Tensor& x, std::size_t i) {
  if (x.rank() < 2) throw ShapeError("slice_first: need rank >= 2, got " + shape_str(x.shape()));
  if (i >= x.dim(0)) throw ShapeError("slice_first: index " + std::to_string(i) + " out of range for " + shape_str(x.shape()));
  Shape sub(x.shape().begin() + 1, x.shape().end());
  const std::size_t n = shape_numel(sub);
  std::vector<double> out(x.values().begin() + static_cast<std::ptrdiff_t>(i * n),
                          x.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
  return detail::make_result(std::move(sub), std::move(out), {x}, [i, n](detail::Node& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j];
  });
}

/// Multiplies by a fixed mask (already scaled for inverted dropout).
inline Tensor apply_mask(const Tensor& x, std::vector<double> mask) {
  if (mask.size() != x.numel()) throw ShapeError("apply_mask: mask size mismatch");
  std::vector<double> out(x.values().begin(), x.values().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return detail::make_result(x.shape(), std::move(out), {x}, [mask = std::move(mask)](detail::Node& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
  });
}

}  // namespace mmfd
