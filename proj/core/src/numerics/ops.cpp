#include "ace/numerics/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace ace::num {

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t element_count(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

namespace {

template <typename Real>
using NodePtr = typename Tensor<Real>::NodePtr;

template <typename Real>
void check_finite(const char* op, std::span<const Real> values) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw DomainError(std::string(op) + ": non-finite result at index " + std::to_string(i));
    }
  }
}

template <typename Real>
bool recording(std::initializer_list<const Tensor<Real>*> inputs) {
  if (Tape<Real>::active() == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor<Real>* t) { return t->requires_grad(); });
}

// Wraps freshly computed values into a tensor and, when gradients are being
// recorded, registers `make_fn(output_node)` as its backward rule.
template <typename Real, typename MakeFn>
Tensor<Real> emit(const char* op, Shape shape, std::vector<Real> values,
                  std::initializer_list<const Tensor<Real>*> inputs, MakeFn make_fn) {
  check_finite<Real>(op, values);
  Tensor<Real> out(std::move(shape), std::move(values));
  if (recording<Real>(inputs)) {
    out.set_requires_grad(true);
    std::vector<NodePtr<Real>> in;
    for (const Tensor<Real>* t : inputs) in.push_back(t->node());
    Tape<Real>::active()->push(out.node(), std::move(in), make_fn(out.node()));
  }
  return out;
}

// The message is built only on failure; these checks sit on every op.
template <typename Message>
void require(bool ok, Message&& what) {
  if (!ok) throw DimensionError(std::string(what()));
}

template <typename Real>
void require_matrix(const Tensor<Real>& t, const char* op) {
  require(t.rank() == 2, [&] { return std::string(op) + ": expected a matrix, got shape " + to_string(t.shape()); });
}

template <typename Real>
void require_same_shape(const Tensor<Real>& a, const Tensor<Real>& b, const char* op) {
  require(a.shape() == b.shape(), [&] { return std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()); });
}

template <typename Real>
Real softplus(Real x) {
  // log(1 + e^x) without overflow
  return x > Real(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <typename Real>
Real stable_sigmoid(Real x) {
  if (x >= Real(0)) return Real(1) / (Real(1) + std::exp(-x));
  const Real e = std::exp(x);
  return e / (Real(1) + e);
}

// Elementwise unary op with derivative expressed from (x, y).
template <typename Real, typename F, typename D>
Tensor<Real> unary(const char* op, const Tensor<Real>& a, F f, D df) {
  std::vector<Real> y(a.size());
  const auto x = a.values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(x[i]);
  NodePtr<Real> an = a.node();
  return emit<Real>(op, a.shape(), std::move(y), {&a}, [an, df](NodePtr<Real> on) {
    return [an, on, df]() {
      if (!an->requires_grad) return;
      auto ga = an->grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += on->grad[i] * df(an->value[i], on->value[i]);
    };
  });
}

// C[m x n] += A[m x k] B[k x n], row-major. The AVX2 clone keeps the
// per-element summation order, so both paths give identical bits.
#if defined(__GNUC__) && !defined(__clang__) && defined(__x86_64__)
#define ACE_GEMM_CLONES __attribute__((target_clones("avx2", "default")))
#else
#define ACE_GEMM_CLONES
#endif

template <typename Real>
void gemm_kernel(const Real* a, const Real* b, Real* __restrict c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    Real* __restrict crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Real aip = a[i * k + p];
      if (aip == Real(0)) continue;
      const Real* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

ACE_GEMM_CLONES void gemm_accumulate(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                                     std::size_t n) {
  gemm_kernel(a, b, c, m, k, n);
}

ACE_GEMM_CLONES void gemm_accumulate(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
                                     std::size_t n) {
  gemm_kernel(a, b, c, m, k, n);
}

}  // namespace

// ---- linear algebra -------------------------------------------------------

template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  require(b.extent(0) == k, [&] { return "matmul: inner extents differ, " + to_string(a.shape()) + " x " + to_string(b.shape()); });
  std::vector<Real> c(m * n, Real(0));
  const auto av = a.values();
  const auto bv = b.values();
  gemm_accumulate(av.data(), bv.data(), c.data(), m, k, n);
  NodePtr<Real> an = a.node(), bn = b.node();
  return emit<Real>("matmul", Shape{m, n}, std::move(c), {&a, &b}, [=](NodePtr<Real> on) {
    return [=]() {
      const std::vector<Real>& g = on->grad;
      if (an->requires_grad) {
        // dA = G Bᵀ
        auto ga = an->grad_buffer();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            Real s = 0;
            const Real* grow = g.data() + i * n;
            const Real* brow = bn->value.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
            ga[i * k + p] += s;
          }
        }
      }
      if (bn->requires_grad) {
        // dB = Aᵀ G
        auto gb = bn->grad_buffer();
        for (std::size_t i = 0; i < m; ++i) {
          const Real* grow = g.data() + i * n;
          for (std::size_t p = 0; p < k; ++p) {
            const Real aip = an->value[i * k + p];
            if (aip == Real(0)) continue;
            Real* gbrow = gb.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
          }
        }
      }
    };
  });
}

template <typename Real>
Tensor<Real> matmul_nt(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(0);
  require(b.extent(1) == k, [&] { return "matmul_nt: row widths differ, " + to_string(a.shape()) + " vs " + to_string(b.shape()); });
  const auto bv = b.values();
  std::vector<Real> bt(k * n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = bv[j * k + p];
  }
  std::vector<Real> c(m * n, Real(0));
  gemm_accumulate(a.values().data(), bt.data(), c.data(), m, k, n);
  NodePtr<Real> an = a.node(), bn = b.node();
  return emit<Real>("matmul_nt", Shape{m, n}, std::move(c), {&a, &b}, [=](NodePtr<Real> on) {
    return [=]() {
      const std::vector<Real>& g = on->grad;
      if (an->requires_grad) {
        // dA = G B
        auto ga = an->grad_buffer();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) {
            const Real gij = g[i * n + j];
            if (gij == Real(0)) continue;
            for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += gij * bn->value[j * k + p];
          }
        }
      }
      if (bn->requires_grad) {
        // dB = Gᵀ A
        auto gb = bn->grad_buffer();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) {
            const Real gij = g[i * n + j];
            if (gij == Real(0)) continue;
            for (std::size_t p = 0; p < k; ++p) gb[j * k + p] += gij * an->value[i * k + p];
          }
        }
      }
    };
  });
}

template <typename Real>
Tensor<Real> transpose(const Tensor<Real>& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.extent(0), n = a.extent(1);
  std::vector<std::size_t> index(m * n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < m; ++i) index[j * m + i] = i * n + j;
  }
  return gather(a, Shape{n, m}, index);
}

// ---- elementwise ----------------------------------------------------------

namespace {

template <typename Real, typename F, typename DA, typename DB>
Tensor<Real> binary(const char* op, const Tensor<Real>& a, const Tensor<Real>& b, F f, DA da, DB db) {
  require_same_shape(a, b, op);
  std::vector<Real> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(a[i], b[i]);
  NodePtr<Real> an = a.node(), bn = b.node();
  return emit<Real>(op, a.shape(), std::move(y), {&a, &b}, [=](NodePtr<Real> on) {
    return [=]() {
      if (an->requires_grad) {
        auto ga = an->grad_buffer();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += on->grad[i] * da(an->value[i], bn->value[i]);
      }
      if (bn->requires_grad) {
        auto gb = bn->grad_buffer();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += on->grad[i] * db(an->value[i], bn->value[i]);
      }
    };
  });
}

}  // namespace

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  return binary<Real>(
      "add", a, b, [](Real x, Real y) { return x + y; }, [](Real, Real) { return Real(1); },
      [](Real, Real) { return Real(1); });
}

template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  return binary<Real>(
      "sub", a, b, [](Real x, Real y) { return x - y; }, [](Real, Real) { return Real(1); },
      [](Real, Real) { return Real(-1); });
}

template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  return binary<Real>(
      "mul", a, b, [](Real x, Real y) { return x * y; }, [](Real, Real y) { return y; }, [](Real x, Real) { return x; });
}

template <typename Real>
Tensor<Real> scale(const Tensor<Real>& a, Real s) {
  return unary<Real>(
      "scale", a, [s](Real x) { return s * x; }, [s](Real, Real) { return s; });
}

template <typename Real>
Tensor<Real> add_scalar(const Tensor<Real>& a, Real s) {
  return unary<Real>(
      "add_scalar", a, [s](Real x) { return x + s; }, [](Real, Real) { return Real(1); });
}

template <typename Real>
Tensor<Real> exp(const Tensor<Real>& a) {
  return unary<Real>(
      "exp", a, [](Real x) { return std::exp(x); }, [](Real, Real y) { return y; });
}

template <typename Real>
Tensor<Real> log(const Tensor<Real>& a) {
  const auto x = a.values();
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > Real(0))) {
      throw DomainError("log: non-positive input at index " + std::to_string(i));
    }
  }
  return unary<Real>(
      "log", a, [](Real v) { return std::log(v); }, [](Real v, Real) { return Real(1) / v; });
}

template <typename Real>
Tensor<Real> sigmoid(const Tensor<Real>& a) {
  return unary<Real>(
      "sigmoid", a, [](Real x) { return stable_sigmoid(x); }, [](Real, Real y) { return y * (Real(1) - y); });
}

template <typename Real>
Tensor<Real> log_sigmoid(const Tensor<Real>& a) {
  return unary<Real>(
      "log_sigmoid", a, [](Real x) { return -softplus(-x); },
      [](Real x, Real) { return Real(1) - stable_sigmoid(x); });
}

template <typename Real>
Tensor<Real> gelu(const Tensor<Real>& a) {
  constexpr Real inv_sqrt2 = Real(1) / std::numbers::sqrt2_v<Real>;
  constexpr Real inv_sqrt2pi = std::numbers::inv_sqrtpi_v<Real> * inv_sqrt2;
  return unary<Real>(
      "gelu", a, [](Real x) { return Real(0.5) * x * (Real(1) + std::erf(x * inv_sqrt2)); },
      [](Real x, Real) {
        const Real cdf = Real(0.5) * (Real(1) + std::erf(x * inv_sqrt2));
        return cdf + x * inv_sqrt2pi * std::exp(Real(-0.5) * x * x);
      });
}

// ---- row broadcasts -------------------------------------------------------

template <typename Real>
Tensor<Real> add_row(const Tensor<Real>& x, const Tensor<Real>& v) {
  require_matrix(x, "add_row");
  const std::size_t m = x.extent(0), n = x.extent(1);
  require(v.size() == n, [&] { return "add_row: vector of " + std::to_string(v.size()) + " for rows of " + std::to_string(n); });
  std::vector<Real> y(x.values().begin(), x.values().end());
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] += v[j];
  }
  NodePtr<Real> xn = x.node(), vn = v.node();
  return emit<Real>("add_row", x.shape(), std::move(y), {&x, &v}, [=](NodePtr<Real> on) {
    return [=]() {
      if (xn->requires_grad) {
        auto gx = xn->grad_buffer();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += on->grad[i];
      }
      if (vn->requires_grad) {
        auto gv = vn->grad_buffer();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) gv[j] += on->grad[i * n + j];
        }
      }
    };
  });
}

template <typename Real>
Tensor<Real> mul_row(const Tensor<Real>& x, const Tensor<Real>& v) {
  require_matrix(x, "mul_row");
  const std::size_t m = x.extent(0), n = x.extent(1);
  require(v.size() == n, [&] { return "mul_row: vector of " + std::to_string(v.size()) + " for rows of " + std::to_string(n); });
  std::vector<Real> y(x.size());
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] = x[i * n + j] * v[j];
  }
  NodePtr<Real> xn = x.node(), vn = v.node();
  return emit<Real>("mul_row", x.shape(), std::move(y), {&x, &v}, [=](NodePtr<Real> on) {
    return [=]() {
      if (xn->requires_grad) {
        auto gx = xn->grad_buffer();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += on->grad[i * n + j] * vn->value[j];
        }
      }
      if (vn->requires_grad) {
        auto gv = vn->grad_buffer();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) gv[j] += on->grad[i * n + j] * xn->value[i * n + j];
        }
      }
    };
  });
}

template <typename Real>
Tensor<Real> row_standardize(const Tensor<Real>& x, Real eps) {
  require_matrix(x, "row_standardize");
  if (!(eps > Real(0))) throw ParameterError("row_standardize: eps must be positive");
  const std::size_t m = x.extent(0), n = x.extent(1);
  std::vector<Real> y(x.size());
  std::vector<Real> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const Real* row = x.values().data() + i * n;
    Real mu = 0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= Real(n);
    Real var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= Real(n);
    inv_std[i] = Real(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] = (row[j] - mu) * inv_std[i];
  }
  NodePtr<Real> xn = x.node();
  return emit<Real>("row_standardize", x.shape(), std::move(y), {&x}, [=](NodePtr<Real> on) {
    return [=]() {
      if (!xn->requires_grad) return;
      auto gx = xn->grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        const Real* g = on->grad.data() + i * n;
        const Real* yr = on->value.data() + i * n;
        Real g_mean = 0, gy_mean = 0;
        for (std::size_t j = 0; j < n; ++j) {
          g_mean += g[j];
          gy_mean += g[j] * yr[j];
        }
        g_mean /= Real(n);
        gy_mean /= Real(n);
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += inv_std[i] * (g[j] - g_mean - yr[j] * gy_mean);
      }
    };
  });
}

// ---- reductions and layout ------------------------------------------------

template <typename Real>
Tensor<Real> sum(const Tensor<Real>& a) {
  Real s = 0;
  for (Real v : a.values()) s += v;
  NodePtr<Real> an = a.node();
  return emit<Real>("sum", Shape{1}, std::vector<Real>{s}, {&a}, [=](NodePtr<Real> on) {
    return [=]() {
      if (!an->requires_grad) return;
      auto ga = an->grad_buffer();
      for (Real& g : ga) g += on->grad[0];
    };
  });
}

template <typename Real>
Tensor<Real> mean(const Tensor<Real>& a) {
  return scale(sum(a), Real(1) / Real(a.size()));
}

template <typename Real>
Tensor<Real> mean_rows(const Tensor<Real>& a) {
  require_matrix(a, "mean_rows");
  const std::size_t m = a.extent(0), n = a.extent(1);
  std::vector<Real> y(n, Real(0));
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) y[j] += a[i * n + j];
  }
  for (Real& v : y) v /= Real(m);
  NodePtr<Real> an = a.node();
  return emit<Real>("mean_rows", Shape{n}, std::move(y), {&a}, [=](NodePtr<Real> on) {
    return [=]() {
      if (!an->requires_grad) return;
      auto ga = an->grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += on->grad[j] / Real(m);
      }
    };
  });
}

template <typename Real>
Tensor<Real> reshape(const Tensor<Real>& a, Shape shape) {
  require(element_count(shape) == a.size(), [&] { return "reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape); });
  std::vector<Real> y(a.values().begin(), a.values().end());
  NodePtr<Real> an = a.node();
  return emit<Real>("reshape", std::move(shape), std::move(y), {&a}, [=](NodePtr<Real> on) {
    return [=]() {
      if (!an->requires_grad) return;
      auto ga = an->grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += on->grad[i];
    };
  });
}

template <typename Real>
Tensor<Real> gather(const Tensor<Real>& a, Shape shape, std::span<const std::size_t> index) {
  require(element_count(shape) == index.size(), [&] { return "gather: " + std::to_string(index.size()) + " indices for shape " + to_string(shape); });
  std::vector<Real> y(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= a.size()) {
      throw IndexError("gather: index " + std::to_string(index[i]) + " out of range for " + to_string(a.shape()));
    }
    y[i] = a[index[i]];
  }
  NodePtr<Real> an = a.node();
  std::vector<std::size_t> idx(index.begin(), index.end());
  return emit<Real>("gather", std::move(shape), std::move(y), {&a}, [an, idx = std::move(idx)](NodePtr<Real> on) {
    return [an, on, idx]() {
      if (!an->requires_grad) return;
      auto ga = an->grad_buffer();
      for (std::size_t i = 0; i < idx.size(); ++i) ga[idx[i]] += on->grad[i];
    };
  });
}

template <typename Real>
Tensor<Real> masked_mean_pool(const Tensor<Real>& tokens, const Tensor<Real>& mask) {
  require_matrix(tokens, "masked_mean_pool");
  const std::size_t n = tokens.extent(0), k = tokens.extent(1);
  require(mask.size() == n, [&] { return "masked_mean_pool: mask of " + std::to_string(mask.size()) + " entries for " +
                                std::to_string(n) + " tokens"; });
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < n; ++i) {
    if (mask[i] == Real(1)) {
      rows.push_back(i);
    } else if (mask[i] != Real(0)) {
      throw DomainError("masked_mean_pool: mask entry " + std::to_string(i) + " is not binary");
    }
  }
  if (rows.empty()) throw EmptyOverlapError("masked_mean_pool: overlap mask selects no token");
  std::vector<Real> y(k, Real(0));
  for (std::size_t r : rows) {
    for (std::size_t j = 0; j < k; ++j) y[j] += tokens[r * k + j];
  }
  const Real inv = Real(1) / Real(rows.size());
  for (Real& v : y) v *= inv;
  NodePtr<Real> tn = tokens.node();
  return emit<Real>("masked_mean_pool", Shape{k}, std::move(y), {&tokens},
                    [tn, rows = std::move(rows), inv, k](NodePtr<Real> on) {
                      return [tn, on, rows, inv, k]() {
                        if (!tn->requires_grad) return;
                        auto gt = tn->grad_buffer();
                        for (std::size_t r : rows) {
                          for (std::size_t j = 0; j < k; ++j) gt[r * k + j] += on->grad[j] * inv;
                        }
                      };
                    });
}

// ---- distributions and losses ---------------------------------------------

namespace {

template <typename Real>
void require_tau(Real tau, const char* op) {
  if (!(tau > Real(0))) throw ParameterError(std::string(op) + ": temperature must be positive");
}

// Returns (x - max)/tau and log-sum-exp of it.
template <typename Real>
std::pair<std::vector<Real>, Real> shifted_logits(std::span<const Real> x, Real tau) {
  const Real mx = *std::max_element(x.begin(), x.end());
  std::vector<Real> z(x.size());
  Real s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    z[i] = (x[i] - mx) / tau;
    s += std::exp(z[i]);
  }
  return {std::move(z), std::log(s)};
}

}  // namespace

template <typename Real>
Tensor<Real> softmax_with_temperature(const Tensor<Real>& x, Real tau) {
  require_tau(tau, "softmax_with_temperature");
  auto [z, lse] = shifted_logits<Real>(x.values(), tau);
  std::vector<Real> y(z.size());
  Real total = 0;
  for (std::size_t i = 0; i < z.size(); ++i) total += (y[i] = std::exp(z[i]));
  for (Real& v : y) v /= total;
  NodePtr<Real> xn = x.node();
  return emit<Real>("softmax_with_temperature", x.shape(), std::move(y), {&x}, [=](NodePtr<Real> on) {
    return [=]() {
      if (!xn->requires_grad) return;
      auto gx = xn->grad_buffer();
      Real dot = 0;
      for (std::size_t i = 0; i < gx.size(); ++i) dot += on->grad[i] * on->value[i];
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += on->value[i] * (on->grad[i] - dot) / tau;
    };
  });
}

template <typename Real>
Tensor<Real> log_softmax_with_temperature(const Tensor<Real>& x, Real tau) {
  require_tau(tau, "log_softmax_with_temperature");
  auto [z, lse] = shifted_logits<Real>(x.values(), tau);
  for (Real& v : z) v -= lse;
  NodePtr<Real> xn = x.node();
  return emit<Real>("log_softmax_with_temperature", x.shape(), std::move(z), {&x}, [=](NodePtr<Real> on) {
    return [=]() {
      if (!xn->requires_grad) return;
      auto gx = xn->grad_buffer();
      Real gsum = 0;
      for (Real g : on->grad) gsum += g;
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += (on->grad[i] - std::exp(on->value[i]) * gsum) / tau;
    };
  });
}

template <typename Real>
Tensor<Real> cross_entropy(const Tensor<Real>& p, const Tensor<Real>& q) {
  require_same_shape(p, q, "cross_entropy");
  Real loss = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] < Real(0)) throw DomainError("cross_entropy: negative target mass at index " + std::to_string(i));
    if (q[i] < Real(0)) throw DomainError("cross_entropy: negative prediction at index " + std::to_string(i));
    if (p[i] == Real(0)) continue;
    if (q[i] == Real(0)) {
      throw DomainError("cross_entropy: zero prediction where target is positive at index " + std::to_string(i));
    }
    loss -= p[i] * std::log(q[i]);
  }
  NodePtr<Real> pn = p.node(), qn = q.node();
  return emit<Real>("cross_entropy", Shape{1}, std::vector<Real>{loss}, {&q}, [=](NodePtr<Real> on) {
    return [=]() {
      if (!qn->requires_grad) return;
      auto gq = qn->grad_buffer();
      for (std::size_t i = 0; i < gq.size(); ++i) {
        if (pn->value[i] != Real(0)) gq[i] -= on->grad[0] * pn->value[i] / qn->value[i];
      }
    };
  });
}

template <typename Real>
Tensor<Real> softmax_cross_entropy(const Tensor<Real>& p, const Tensor<Real>& logits, Real tau) {
  require_same_shape(p, logits, "softmax_cross_entropy");
  require_tau(tau, "softmax_cross_entropy");
  auto [z, lse] = shifted_logits<Real>(logits.values(), tau);
  Real loss = 0, mass = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (p[i] < Real(0)) throw DomainError("softmax_cross_entropy: negative target mass at index " + std::to_string(i));
    loss -= p[i] * (z[i] - lse);
    mass += p[i];
  }
  std::vector<Real> soft(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) soft[i] = std::exp(z[i] - lse);
  NodePtr<Real> pn = p.node(), xn = logits.node();
  return emit<Real>("softmax_cross_entropy", Shape{1}, std::vector<Real>{loss}, {&logits},
                    [pn, xn, soft = std::move(soft), mass, tau](NodePtr<Real> on) {
                      return [pn, xn, on, soft, mass, tau]() {
                        if (!xn->requires_grad) return;
                        auto gx = xn->grad_buffer();
                        for (std::size_t i = 0; i < gx.size(); ++i) {
                          gx[i] += on->grad[0] * (soft[i] * mass - pn->value[i]) / tau;
                        }
                      };
                    });
}

template <typename Real>
Tensor<Real> weighted_bce(const Tensor<Real>& m, const Tensor<Real>& target, Real alpha, bool positive_only) {
  require_matrix(m, "weighted_bce");
  require_same_shape(m, target, "weighted_bce");
  if (alpha < Real(0) || alpha > Real(1)) throw ParameterError("weighted_bce: alpha must lie in [0, 1]");
  const Real rows = Real(m.extent(0));
  const Real wp = positive_only ? Real(1) : alpha;
  const Real wn = positive_only ? Real(0) : Real(1) - alpha;
  Real loss = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    const Real mi = m[i], ti = target[i];
    if (!(mi > Real(0) && mi < Real(1))) {
      throw DomainError("weighted_bce: matching entry " + std::to_string(i) + " is not inside (0, 1)");
    }
    if (ti > Real(0)) loss -= wp * ti * std::log(mi);
    if (wn > Real(0) && ti < Real(1)) loss -= wn * (Real(1) - ti) * std::log1p(-mi);
  }
  loss /= rows;
  NodePtr<Real> mn = m.node(), tn = target.node();
  return emit<Real>("weighted_bce", Shape{1}, std::vector<Real>{loss}, {&m}, [=](NodePtr<Real> on) {
    return [=]() {
      if (!mn->requires_grad) return;
      auto gm = mn->grad_buffer();
      const Real g = on->grad[0] / rows;
      for (std::size_t i = 0; i < gm.size(); ++i) {
        const Real mi = mn->value[i], ti = tn->value[i];
        gm[i] += g * (-wp * ti / mi + wn * (Real(1) - ti) / (Real(1) - mi));
      }
    };
  });
}

template <typename Real>
Tensor<Real> weighted_bce_with_logits(const Tensor<Real>& logits, const Tensor<Real>& target, Real alpha,
                                      bool positive_only) {
  require_matrix(logits, "weighted_bce_with_logits");
  require_same_shape(logits, target, "weighted_bce_with_logits");
  if (alpha < Real(0) || alpha > Real(1)) throw ParameterError("weighted_bce_with_logits: alpha must lie in [0, 1]");
  const Real rows = Real(logits.extent(0));
  const Real wp = positive_only ? Real(1) : alpha;
  const Real wn = positive_only ? Real(0) : Real(1) - alpha;
  Real loss = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const Real z = logits[i], t = target[i];
    // -log sigmoid(z) = softplus(-z), -log(1 - sigmoid(z)) = softplus(z); both
    // share log1p(e^-|z|).
    const bool pos = t > Real(0), neg = wn > Real(0) && t < Real(1);
    if (!pos && !neg) continue;
    const Real tail = std::log1p(std::exp(-std::abs(z)));
    if (pos) loss += wp * t * (std::max(-z, Real(0)) + tail);
    if (neg) loss += wn * (Real(1) - t) * (std::max(z, Real(0)) + tail);
  }
  loss /= rows;
  NodePtr<Real> zn = logits.node(), tn = target.node();
  return emit<Real>("weighted_bce_with_logits", Shape{1}, std::vector<Real>{loss}, {&logits}, [=](NodePtr<Real> on) {
    return [=]() {
      if (!zn->requires_grad) return;
      auto gz = zn->grad_buffer();
      const Real g = on->grad[0] / rows;
      for (std::size_t i = 0; i < gz.size(); ++i) {
        const Real s = stable_sigmoid(zn->value[i]);
        const Real t = tn->value[i];
        gz[i] += g * (wp * t * (s - Real(1)) + wn * (Real(1) - t) * s);
      }
    };
  });
}

#define ACE_INSTANTIATE_OPS(R)                                                                          \
  template Tensor<R> matmul(const Tensor<R>&, const Tensor<R>&);                                        \
  template Tensor<R> matmul_nt(const Tensor<R>&, const Tensor<R>&);                                     \
  template Tensor<R> transpose(const Tensor<R>&);                                                       \
  template Tensor<R> add(const Tensor<R>&, const Tensor<R>&);                                           \
  template Tensor<R> sub(const Tensor<R>&, const Tensor<R>&);                                           \
  template Tensor<R> mul(const Tensor<R>&, const Tensor<R>&);                                           \
  template Tensor<R> scale(const Tensor<R>&, R);                                                        \
  template Tensor<R> add_scalar(const Tensor<R>&, R);                                                   \
  template Tensor<R> exp(const Tensor<R>&);                                                             \
  template Tensor<R> log(const Tensor<R>&);                                                             \
  template Tensor<R> sigmoid(const Tensor<R>&);                                                         \
  template Tensor<R> log_sigmoid(const Tensor<R>&);                                                     \
  template Tensor<R> gelu(const Tensor<R>&);                                                            \
  template Tensor<R> add_row(const Tensor<R>&, const Tensor<R>&);                                       \
  template Tensor<R> mul_row(const Tensor<R>&, const Tensor<R>&);                                       \
  template Tensor<R> row_standardize(const Tensor<R>&, R);                                              \
  template Tensor<R> sum(const Tensor<R>&);                                                             \
  template Tensor<R> mean(const Tensor<R>&);                                                            \
  template Tensor<R> mean_rows(const Tensor<R>&);                                                       \
  template Tensor<R> reshape(const Tensor<R>&, Shape);                                                  \
  template Tensor<R> gather(const Tensor<R>&, Shape, std::span<const std::size_t>);                     \
  template Tensor<R> masked_mean_pool(const Tensor<R>&, const Tensor<R>&);                              \
  template Tensor<R> softmax_with_temperature(const Tensor<R>&, R);                                     \
  template Tensor<R> log_softmax_with_temperature(const Tensor<R>&, R);                                 \
  template Tensor<R> cross_entropy(const Tensor<R>&, const Tensor<R>&);                                 \
  template Tensor<R> softmax_cross_entropy(const Tensor<R>&, const Tensor<R>&, R);                      \
  template Tensor<R> weighted_bce(const Tensor<R>&, const Tensor<R>&, R, bool);                         \
  template Tensor<R> weighted_bce_with_logits(const Tensor<R>&, const Tensor<R>&, R, bool);

ACE_INSTANTIATE_OPS(double)
ACE_INSTANTIATE_OPS(float)

#undef ACE_INSTANTIATE_OPS

}  // namespace ace::num
