#pragma once

#include <cstddef>
#include <vector>

#include "ace/cropgrid.hpp"
#include "ace/model.hpp"

namespace ace {

// k×k Gaussian exp(-(dx² + dy²)/(2σ²)) centred on the middle cell, which is
// exactly 1. Throws ParameterError for even k or σ <= 0.
Tensor gaussian_kernel(std::size_t k, double sigma);

enum class TargetRole {
  composition,    // rows: teacher C2 tokens [N], cols: composed C1 cells [N/4]
  decomposition,  // rows: teacher C1 tokens [N], cols: decomposed C2 sub-cells [4N]
};

struct MatchTarget {
  Tensor matrix;
  std::size_t kernel_size = 3;
  double sigma = 1.0;
  TargetRole role = TargetRole::composition;
};

// Places the kernel around each matched pair, measured in 2-patch blocks for
// composition and in patches for decomposition. Entries whose teacher token
// or student cell lies outside the overlap stay 0.
MatchTarget build_target(const CropPair& pair, const GridSpec& spec, TargetRole role, std::size_t kernel_size = 3,
                         double sigma = 1.0);

// Teacher-by-student inner products; the teacher side is detached.
Tensor matching_logits(const Tensor& teacher, const Tensor& student_head);
// sigmoid(matching_logits).
Tensor matching_matrix(const Tensor& teacher, const Tensor& student_head);

// -(1/rows) Σ [α T log M + (1-α)(1-T) log(1-M)]; positive_only keeps the
// first term with weight 1.
Tensor matching_loss(const Tensor& m, const MatchTarget& target, double alpha, bool positive_only = false);
// Same value computed from the logits, finite for any logit.
Tensor matching_loss_from_logits(const Tensor& logits, const MatchTarget& target, double alpha,
                                 bool positive_only = false);

struct GlobalTerm {
  Tensor loss;                          // CE(P_t, P_s), scalar
  std::vector<double> teacher_pooled;   // uncentered, for the center update
};

// Pools student and teacher tokens over their overlap masks, P_t from the
// (optionally centred) teacher at tau_t, P_s at tau_s, and returns CE(P_t, P_s).
// The teacher tensor is treated as constant.
GlobalTerm global_loss(const Tensor& student, const Mask& student_mask, const Tensor& teacher, const Mask& teacher_mask,
                       const std::vector<double>& center, double tau_s, double tau_t, bool centering = true);

// center <- rate·center + (1 - rate)·mean(pooled).
void update_center(std::vector<double>& center, const std::vector<std::vector<double>>& pooled, double rate = 0.9);

struct LossWeights {
  double global = 0.1;
  double comp = 1.0;
  double decomp = 1.0;
};

struct LossBreakdown {
  double global = 0;
  double comp = 0;
  double decomp = 0;
  double total = 0;
  LossWeights weights;
};

LossBreakdown total_loss(double global, double comp, double decomp, const LossWeights& weights = {});

}  // namespace ace
