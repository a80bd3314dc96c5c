#pragma once

#include <functional>
#include <vector>

#include "ace/numerics/tensor.hpp"

namespace ace::num {

template <typename Real>
using ScalarFn = std::function<Tensor<Real>(const std::vector<Tensor<Real>>&)>;

// Compares reverse-mode gradients of a scalar function against central
// differences with step eps, over every coordinate of every input.
// Returns max |analytic - numeric| / max(1, |analytic|).
// Throws DomainError if f is not finite at the inputs.
template <typename Real>
Real grad_check(const ScalarFn<Real>& f, const std::vector<Tensor<Real>>& inputs, Real eps);

template <typename Real>
Real grad_check(const std::function<Tensor<Real>(const Tensor<Real>&)>& f, const Tensor<Real>& x, Real eps) {
  ScalarFn<Real> wrapped = [&f](const std::vector<Tensor<Real>>& in) { return f(in.front()); };
  return grad_check<Real>(wrapped, std::vector<Tensor<Real>>{x}, eps);
}

}  // namespace ace::num
