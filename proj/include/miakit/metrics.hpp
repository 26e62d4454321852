#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "miakit/core.hpp"

namespace miakit::metrics {

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  double threshold = 0.0;
};

/// Ordered ROC points from (0,0) to (1,1); fpr and tpr are nondecreasing
/// along the curve. One point per distinct score value (shared-threshold
/// rule for ties, no interpolation inside a tie block).
struct RocCurve {
  std::vector<RocPoint> points;
  std::size_t num_members = 0;
  std::size_t num_nonmembers = 0;
};

/// Decision rule throughout: member iff score > threshold (strict).
RocCurve roc_curve(std::span<const double> member_scores,
                   std::span<const double> nonmember_scores);

/// Trapezoidal area. Equals the Mann-Whitney pairwise statistic (ties 1/2).
double auc(const RocCurve& curve);

/// TPR at the largest achievable FPR <= alpha (step convention, no
/// interpolation); alpha below the smallest positive FPR uses the best
/// fpr = 0 point.
double tpr_at_fpr(const RocCurve& curve, double alpha);

/// max over curve points of (tpr + 1 - fpr) / 2.
double balanced_accuracy(const RocCurve& curve);

/// Precision at the largest threshold achieving recall >= r, under a
/// balanced member/nonmember prior: tpr / (tpr + fpr).
double precision_at_recall(std::span<const double> member_scores,
                           std::span<const double> nonmember_scores, double recall);

struct AttackReport {
  std::string attack;
  double auc = 0.0;
  double balanced_accuracy = 0.0;
  std::map<double, double> tpr_at;               // alpha -> tpr
  std::map<double, double> precision_at_recall;  // recall -> precision
};

/// Train-test gaps; positive = worse generalization for both.
struct GapReport {
  double gap_acc = 0.0;   // train_acc - test_acc
  double gap_loss = 0.0;  // test_loss - train_loss
  double train_acc = 0.0;
  double test_acc = 0.0;
  double train_loss = 0.0;
  double test_loss = 0.0;
};

GapReport gap_report(double train_acc, double test_acc, double train_loss, double test_loss);

}  // namespace miakit::metrics
