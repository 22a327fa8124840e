// SPDX-License-Identifier: Apache-2.0
//
// Regularization (squared L2) and in-batch contrastive (InfoNCE) terms, their
// α-blend, the per-pair alignment energy and the InfoNCE information bound.
#pragma once

#include <cmath>

#include "m3jepa/core/ops.hpp"
#include "m3jepa/model/predictor.hpp"

namespace m3jepa {

struct LossConfig {
  double alpha = 0.5;
  double tau = 0.07;
  bool symmetric_cl = true;

  void validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("loss.alpha: must lie in [0, 1]");
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ValidationError("loss.tau: must be > 0");
  }
};

struct LossReport {
  double l_reg = 0.0;
  double l_cl = 0.0;
  double total = 0.0;
  double mi_lower_bound = 0.0;
  std::size_t batch = 0;
};

/// Mean over rows of ‖pred_i − target_i‖².
inline NArray reg_loss(const NArray& pred, const NArray& target) {
  if (pred.shape() != target.shape()) {
    throw DimensionError("reg_loss: prediction " + shape_str(pred.shape()) + " vs target " +
                         shape_str(target.shape()));
  }
  return mean(row_sq_dist(pred, target));
}

/// InfoNCE over cosine similarities with every in-batch target as a candidate.
inline NArray contrastive_loss(const NArray& pred, const NArray& target, const LossConfig& cfg) {
  if (pred.rank() != 2 || pred.shape() != target.shape()) {
    throw DimensionError("contrastive_loss: prediction " + shape_str(pred.shape()) + " vs target " +
                         shape_str(target.shape()));
  }
  if (pred.rows() < 2) throw PreconditionError("contrastive_loss: needs B >= 2 for in-batch negatives");
  if (!(cfg.tau > 0.0)) throw PreconditionError("contrastive_loss: tau must be > 0");
  auto logits = scale(matmul(normalize_rows_l2(pred), transpose(normalize_rows_l2(target))), 1.0 / cfg.tau);
  std::vector<std::size_t> diag(pred.rows());
  std::iota(diag.begin(), diag.end(), 0);
  auto forward = cross_entropy(logits, diag);
  if (!cfg.symmetric_cl) return forward;
  return scale(add(forward, cross_entropy(transpose(logits), diag)), 0.5);
}

inline NArray total_loss(const NArray& l_reg, const NArray& l_cl, const LossConfig& cfg) {
  if (!(cfg.alpha >= 0.0 && cfg.alpha <= 1.0)) throw PreconditionError("total_loss: alpha outside [0, 1]");
  return add(scale(l_reg, cfg.alpha), scale(l_cl, 1.0 - cfg.alpha));
}

inline double total_loss(double l_reg, double l_cl, const LossConfig& cfg) {
  if (!(cfg.alpha >= 0.0 && cfg.alpha <= 1.0)) throw PreconditionError("total_loss: alpha outside [0, 1]");
  return cfg.alpha * l_reg + (1.0 - cfg.alpha) * l_cl;
}

/// α·‖pred_b − target‖² + (1 − α)·(1 − cos(pred_a, target)).
inline double pair_energy(std::span<const double> pred_a, std::span<const double> pred_b,
                          std::span<const double> target, const LossConfig& cfg) {
  if (pred_a.size() != target.size() || pred_b.size() != target.size()) {
    throw DimensionError("pair_energy: dimension mismatch");
  }
  double sq = 0.0, dot = 0.0, na = 0.0, nt = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double d = pred_b[i] - target[i];
    sq += d * d;
    dot += pred_a[i] * target[i];
    na += pred_a[i] * pred_a[i];
    nt += target[i] * target[i];
  }
  if (na == 0.0 || nt == 0.0) throw DegenerateVectorError("pair_energy: zero-norm vector");
  return cfg.alpha * sq + (1.0 - cfg.alpha) * (1.0 - dot / (std::sqrt(na) * std::sqrt(nt)));
}

inline double mi_bound(double l_cl, std::size_t batch) {
  if (batch < 2) throw PreconditionError("mi_bound: needs B >= 2");
  return std::log(static_cast<double>(batch)) - l_cl;
}

/// Gate-A output drives the contrastive term, gate-B output the regularization term.
struct LossTerms {
  NArray total;
  LossReport report;
};

inline LossTerms compute_losses(const Prediction& p, const NArray& target, const LossConfig& cfg) {
  auto l_reg = reg_loss(p.out_b, target);
  auto l_cl = contrastive_loss(p.out_a, target, cfg);
  LossTerms t{total_loss(l_reg, l_cl, cfg), {}};
  t.report.l_reg = l_reg.item();
  t.report.l_cl = l_cl.item();
  t.report.total = t.total.item();
  t.report.batch = target.rows();
  t.report.mi_lower_bound = mi_bound(t.report.l_cl, t.report.batch);
  return t;
}

}  // namespace m3jepa
