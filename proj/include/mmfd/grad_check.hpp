#pragma once

// Central finite-difference oracle for backward().

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mmfd/tensor.hpp"

namespace mmfd {

struct GradReport {
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;
  std::string worst_param;  // "name[flat index]"
  std::size_t checked = 0;  // number of scalar entries compared
};

/// f was not a deterministic function of the parameters.
class OracleInvalidError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using NamedTensor = std::pair<std::string, Tensor>;

/// |a-b| / max(|a|, |b|, 1e-8)
inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

/// Compares analytic gradients of the scalar produced by `f` against
/// (f(p+eps) - f(p-eps)) / 2eps for every element of every parameter.
inline GradReport grad_check(const std::function<Tensor()>& f, const std::vector<NamedTensor>& params,
                             double eps = 1e-6) {
  if (!(eps > 0.0)) throw ContractError("grad_check: eps must be positive");

  double base0 = 0.0, base1 = 0.0;
  {
    NoGradGuard guard;
    base0 = f().item();
    base1 = f().item();
  }
  if (base0 != base1) throw OracleInvalidError("grad_check: f is not deterministic (two baseline evaluations differ)");

  for (const auto& np : params) {
    Tensor p = np.second;
    p.zero_grad();
  }
  Tensor loss = f();
  backward(loss);

  GradReport report;
  report.worst_param = params.empty() ? "" : params.front().first + "[0]";
  NoGradGuard guard;
  for (const auto& [name, cp] : params) {
    Tensor p = cp;
    std::vector<double> analytic(p.numel(), 0.0);
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
    auto vals = p.mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + eps;
      const double fp = f().item();
      vals[i] = orig - eps;
      const double fm = f().item();
      vals[i] = orig;
      const double fd = (fp - fm) / (2.0 * eps);
      const double abs_err = std::abs(fd - analytic[i]);
      const double rel_err = relative_error(fd, analytic[i]);
      report.max_abs_err = std::max(report.max_abs_err, abs_err);
      if (rel_err > report.max_rel_err) {
        report.max_rel_err = rel_err;
        report.worst_param = name + "[" + std::to_string(i) + "]";
      }
      ++report.checked;
    }
  }
  return report;
}

inline GradReport grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params, double eps = 1e-6) {
  std::vector<NamedTensor> named;
  for (std::size_t i = 0; i < params.size(); ++i) named.emplace_back("param" + std::to_string(i), params[i]);
  return grad_check(f, named, eps);
}

}  // namespace mmfd
