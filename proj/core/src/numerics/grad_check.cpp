#include "ace/numerics/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace ace::num {

namespace {

template <typename Real>
Real evaluate(const ScalarFn<Real>& f, const std::vector<Tensor<Real>>& inputs) {
  const Tensor<Real> y = f(inputs);
  if (!y.is_scalar()) throw DimensionError("grad_check: function must return a scalar");
  const Real v = y.item();
  if (!std::isfinite(v)) throw DomainError("grad_check: function value is not finite");
  return v;
}

}  // namespace

template <typename Real>
Real grad_check(const ScalarFn<Real>& f, const std::vector<Tensor<Real>>& inputs, Real eps) {
  if (!(eps > Real(0))) throw ParameterError("grad_check: eps must be positive");

  std::vector<Tensor<Real>> leaves;
  leaves.reserve(inputs.size());
  for (const Tensor<Real>& x : inputs) leaves.emplace_back(x.shape(), std::vector<Real>(x.values().begin(), x.values().end()), true);

  std::vector<std::vector<Real>> analytic;
  {
    Tape<Real> tape;
    auto rec = tape.record();
    const Tensor<Real> y = f(leaves);
    if (!y.is_scalar()) throw DimensionError("grad_check: function must return a scalar");
    if (!std::isfinite(y.item())) throw DomainError("grad_check: function value is not finite");
    if (tape.empty()) {
      for (const Tensor<Real>& leaf : leaves) analytic.emplace_back(leaf.size(), Real(0));
    } else {
      tape.backward(y);
      for (const Tensor<Real>& leaf : leaves) {
        if (leaf.has_grad()) {
          analytic.emplace_back(leaf.grad().begin(), leaf.grad().end());
        } else {
          analytic.emplace_back(leaf.size(), Real(0));
        }
      }
    }
  }

  std::vector<Tensor<Real>> probe;
  probe.reserve(inputs.size());
  for (const Tensor<Real>& x : inputs) probe.push_back(x.detach());

  Real worst = 0;
  for (std::size_t t = 0; t < probe.size(); ++t) {
    auto values = probe[t].mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const Real saved = values[i];
      values[i] = saved + eps;
      const Real up = evaluate(f, probe);
      values[i] = saved - eps;
      const Real down = evaluate(f, probe);
      values[i] = saved;
      const Real numeric = (up - down) / (Real(2) * eps);
      const Real a = analytic[t][i];
      worst = std::max(worst, std::abs(a - numeric) / std::max(Real(1), std::abs(a)));
    }
  }
  return worst;
}

template double grad_check<double>(const ScalarFn<double>&, const std::vector<Tensor<double>>&, double);
template float grad_check<float>(const ScalarFn<float>&, const std::vector<Tensor<float>>&, float);

}  // namespace ace::num
