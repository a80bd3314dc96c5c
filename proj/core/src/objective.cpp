#include "ace/objective.hpp"

#include <cmath>
#include <cstdlib>

#include "ace/error.hpp"
#include "ace/numerics/ops.hpp"

namespace ace {

Tensor gaussian_kernel(std::size_t k, double sigma) {
  if (k == 0 || k % 2 == 0) throw ParameterError("gaussian_kernel: size must be odd, got " + std::to_string(k));
  if (!(sigma > 0)) throw ParameterError("gaussian_kernel: sigma must be positive");
  const long h = long(k / 2);
  std::vector<double> v;
  v.reserve(k * k);
  for (long dy = -h; dy <= h; ++dy) {
    for (long dx = -h; dx <= h; ++dx) v.push_back(std::exp(-double(dx * dx + dy * dy) / (2 * sigma * sigma)));
  }
  return Tensor({k, k}, std::move(v));
}

MatchTarget build_target(const CropPair& pair, const GridSpec& spec, TargetRole role, std::size_t kernel_size,
                         double sigma) {
  const Tensor kernel = gaussian_kernel(kernel_size, sigma);
  const long h = long(kernel_size / 2);
  const std::size_t t = spec.token_side;
  const std::size_t n = t * t;
  const Overlap& ov = pair.overlap;
  if (ov.o1.side() != t || ov.o2.side() != t) {
    throw DimensionError("build_target: overlap masks do not match token side " + std::to_string(t));
  }

  // Both roles reduce to: rows on a teacher lattice, columns on a student
  // lattice, each cell with an integer position in a shared unit.
  struct Lattice {
    std::size_t side;
    long ox, oy;  // origin in shared units
    Mask valid;
  };
  Lattice rows, cols;
  const long x1 = pair.anchor1.x, y1 = pair.anchor1.y, x2 = pair.anchor2.x, y2 = pair.anchor2.y;
  if (role == TargetRole::composition) {
    // 2-patch blocks, relative to anchor2: C2 token (r, c) sits at (c, r);
    // composed C1 cell (i, j) sits at ((x1-x2)/2 + j, (y1-y2)/2 + i).
    rows = {t, 0, 0, ov.o2};
    cols = {t / 2, (x1 - x2) / 2, (y1 - y2) / 2, pool_mask(ov.o1)};
  } else {
    // Patches, relative to anchor2: C1 token (r, c) at (x1-x2 + c, y1-y2 + r);
    // decomposed C2 sub-cell (a, b) at (b, a).
    rows = {t, x1 - x2, y1 - y2, ov.o1};
    cols = {2 * t, 0, 0, upsample_mask(ov.o2)};
  }

  const std::size_t ncols = cols.side * cols.side;
  std::vector<double> v(n * ncols, 0.0);
  for (std::size_t ci = 0; ci < ncols; ++ci) {
    const std::size_t cr = ci / cols.side, cc = ci % cols.side;
    if (!cols.valid.at(cr, cc)) continue;
    const long cx = cols.ox + long(cc), cy = cols.oy + long(cr);
    for (long dy = -h; dy <= h; ++dy) {
      for (long dx = -h; dx <= h; ++dx) {
        const long rc = cx + dx - rows.ox, rr = cy + dy - rows.oy;
        if (rc < 0 || rr < 0 || rc >= long(rows.side) || rr >= long(rows.side)) continue;
        if (!rows.valid.at(std::size_t(rr), std::size_t(rc))) continue;
        const std::size_t ri = std::size_t(rr) * rows.side + std::size_t(rc);
        v[ri * ncols + ci] = kernel.at(std::size_t(dy + h), std::size_t(dx + h));
      }
    }
  }
  return {Tensor({n, ncols}, std::move(v)), kernel_size, sigma, role};
}

Tensor matching_logits(const Tensor& teacher, const Tensor& student_head) {
  if (teacher.rank() != 2 || student_head.rank() != 2 || teacher.extent(1) != student_head.extent(1)) {
    throw DimensionError("matching_matrix: embedding widths differ, teacher " + num::to_string(teacher.shape()) +
                         " vs student " + num::to_string(student_head.shape()));
  }
  return num::matmul_nt(teacher.detach(), student_head);
}

Tensor matching_matrix(const Tensor& teacher, const Tensor& student_head) {
  return num::sigmoid(matching_logits(teacher, student_head));
}

Tensor matching_loss(const Tensor& m, const MatchTarget& target, double alpha, bool positive_only) {
  return num::weighted_bce(m, target.matrix, alpha, positive_only);
}

Tensor matching_loss_from_logits(const Tensor& logits, const MatchTarget& target, double alpha, bool positive_only) {
  return num::weighted_bce_with_logits(logits, target.matrix, alpha, positive_only);
}

GlobalTerm global_loss(const Tensor& student, const Mask& student_mask, const Tensor& teacher, const Mask& teacher_mask,
                       const std::vector<double>& center, double tau_s, double tau_t, bool centering) {
  if (!(tau_s > 0) || !(tau_t > 0)) throw ParameterError("global_loss: temperatures must be positive");
  const Tensor ps = num::masked_mean_pool(student, student_mask.to_tensor<double>());
  const Tensor pt = num::masked_mean_pool(teacher.detach(), teacher_mask.to_tensor<double>());
  if (center.size() != pt.size()) {
    throw DimensionError("global_loss: center has " + std::to_string(center.size()) + " entries, embedding has " +
                         std::to_string(pt.size()));
  }
  std::vector<double> pooled(pt.values().begin(), pt.values().end());
  std::vector<double> shifted = pooled;
  if (centering) {
    for (std::size_t i = 0; i < shifted.size(); ++i) shifted[i] -= center[i];
  }
  const Tensor p_t = num::softmax_with_temperature(Tensor({shifted.size()}, shifted), tau_t);
  return {num::softmax_cross_entropy(p_t, ps, tau_s), std::move(pooled)};
}

void update_center(std::vector<double>& center, const std::vector<std::vector<double>>& pooled, double rate) {
  if (pooled.empty()) return;
  if (!(rate >= 0 && rate <= 1)) throw ParameterError("update_center: rate must lie in [0, 1]");
  std::vector<double> mean(center.size(), 0.0);
  for (const auto& p : pooled) {
    if (p.size() != center.size()) throw DimensionError("update_center: pooled vector width differs from center");
    for (std::size_t i = 0; i < p.size(); ++i) mean[i] += p[i];
  }
  for (std::size_t i = 0; i < center.size(); ++i) {
    center[i] = rate * center[i] + (1 - rate) * mean[i] / double(pooled.size());
  }
}

LossBreakdown total_loss(double global, double comp, double decomp, const LossWeights& weights) {
  LossBreakdown b;
  b.global = global;
  b.comp = comp;
  b.decomp = decomp;
  b.weights = weights;
  b.total = weights.global * global + weights.comp * comp + weights.decomp * decomp;
  return b;
}

}  // namespace ace
