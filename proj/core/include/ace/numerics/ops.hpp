#pragma once

#include <cstddef>
#include <span>

#include "ace/numerics/tensor.hpp"

// Differentiable primitives. Each op computes its result eagerly; when a
// Tape is recording on this thread and any operand requires a gradient, the
// op also appends its local gradient rule to that tape. All ops reject
// non-finite results with DomainError.
namespace ace::num {

// ---- linear algebra -------------------------------------------------------

// [M×K]·[K×N] -> [M×N]
template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b);

// [M×K]·[N×K]ᵀ -> [M×N]; the row-embedding similarity product.
template <typename Real>
Tensor<Real> matmul_nt(const Tensor<Real>& a, const Tensor<Real>& b);

template <typename Real>
Tensor<Real> transpose(const Tensor<Real>& a);

// ---- elementwise ----------------------------------------------------------

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b);
template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b);
template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b);
template <typename Real>
Tensor<Real> scale(const Tensor<Real>& a, Real s);
template <typename Real>
Tensor<Real> add_scalar(const Tensor<Real>& a, Real s);
template <typename Real>
Tensor<Real> exp(const Tensor<Real>& a);
// Throws DomainError naming the first non-positive index.
template <typename Real>
Tensor<Real> log(const Tensor<Real>& a);
template <typename Real>
Tensor<Real> sigmoid(const Tensor<Real>& a);
// log(sigmoid(x)) = -softplus(-x), finite for all finite x.
template <typename Real>
Tensor<Real> log_sigmoid(const Tensor<Real>& a);
// Exact (erf) GELU.
template <typename Real>
Tensor<Real> gelu(const Tensor<Real>& a);

// ---- row broadcasts (x is [M×N], v is [N]) --------------------------------

template <typename Real>
Tensor<Real> add_row(const Tensor<Real>& x, const Tensor<Real>& v);
template <typename Real>
Tensor<Real> mul_row(const Tensor<Real>& x, const Tensor<Real>& v);

// Per-row (x - mean) / sqrt(var + eps), population variance.
template <typename Real>
Tensor<Real> row_standardize(const Tensor<Real>& x, Real eps);

// ---- reductions and layout ------------------------------------------------

template <typename Real>
Tensor<Real> sum(const Tensor<Real>& a);
template <typename Real>
Tensor<Real> mean(const Tensor<Real>& a);
// [N×K] -> [K]
template <typename Real>
Tensor<Real> mean_rows(const Tensor<Real>& a);

// Same values under a new shape with equal element count.
template <typename Real>
Tensor<Real> reshape(const Tensor<Real>& a, Shape shape);

// out[i] = a[index[i]]; gradients scatter back (indices may repeat).
template <typename Real>
Tensor<Real> gather(const Tensor<Real>& a, Shape shape, std::span<const std::size_t> index);

// Rows r with mask[r] == 1 averaged: [N×K], mask [N] -> [K].
// Throws EmptyOverlapError when the mask selects no row.
template <typename Real>
Tensor<Real> masked_mean_pool(const Tensor<Real>& tokens, const Tensor<Real>& mask);

// ---- distributions and losses ---------------------------------------------

// softmax(x / tau) over a flat vector, max-subtracted.
template <typename Real>
Tensor<Real> softmax_with_temperature(const Tensor<Real>& x, Real tau);
template <typename Real>
Tensor<Real> log_softmax_with_temperature(const Tensor<Real>& x, Real tau);

// -sum p_i log q_i; p is treated as a constant target.
template <typename Real>
Tensor<Real> cross_entropy(const Tensor<Real>& p, const Tensor<Real>& q);

// cross_entropy(p, softmax(logits / tau)) evaluated through log-softmax.
template <typename Real>
Tensor<Real> softmax_cross_entropy(const Tensor<Real>& p, const Tensor<Real>& logits, Real tau);

// Weighted binary cross-entropy between a probability matrix M [R×C] and a
// constant target T of the same shape:
//   -(1/R) sum_{r,c} [ alpha T log M + (1 - alpha)(1 - T) log(1 - M) ]
// With positive_only the second term is dropped and alpha is not applied.
template <typename Real>
Tensor<Real> weighted_bce(const Tensor<Real>& m, const Tensor<Real>& target, Real alpha, bool positive_only = false);

// Same loss evaluated from logits Z with M = sigmoid(Z), through the stable
// log-sigmoid form.
template <typename Real>
Tensor<Real> weighted_bce_with_logits(const Tensor<Real>& logits, const Tensor<Real>& target, Real alpha,
                                      bool positive_only = false);

}  // namespace ace::num
