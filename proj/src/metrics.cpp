#include "miakit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace miakit::metrics {

namespace {

void require_finite_nonempty(std::span<const double> scores, const char* side) {
  if (scores.empty()) {
    throw ValidationError(ValidationCode::empty, std::string(side) + " score list is empty");
  }
  for (double s : scores) {
    if (!std::isfinite(s)) {
      throw ValidationError(ValidationCode::non_finite,
                            std::string(side) + " score list has non-finite entry");
    }
  }
}

}  // namespace

RocCurve roc_curve(std::span<const double> member_scores,
                   std::span<const double> nonmember_scores) {
  require_finite_nonempty(member_scores, "member");
  require_finite_nonempty(nonmember_scores, "nonmember");

  std::vector<double> members(member_scores.begin(), member_scores.end());
  std::vector<double> nonmembers(nonmember_scores.begin(), nonmember_scores.end());
  std::sort(members.begin(), members.end(), std::greater<>());
  std::sort(nonmembers.begin(), nonmembers.end(), std::greater<>());

  std::vector<double> thresholds;
  thresholds.reserve(members.size() + nonmembers.size());
  std::merge(members.begin(), members.end(), nonmembers.begin(), nonmembers.end(),
             std::back_inserter(thresholds), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  RocCurve curve;
  curve.num_members = members.size();
  curve.num_nonmembers = nonmembers.size();
  curve.points.reserve(thresholds.size() + 1);

  // Sweep thresholds in descending score order; member iff score > threshold,
  // so the count above the global max is zero and the first point is (0,0).
  std::size_t above_m = 0;
  std::size_t above_n = 0;
  const double inv_m = 1.0 / static_cast<double>(members.size());
  const double inv_n = 1.0 / static_cast<double>(nonmembers.size());
  for (double tau : thresholds) {
    while (above_m < members.size() && members[above_m] > tau) ++above_m;
    while (above_n < nonmembers.size() && nonmembers[above_n] > tau) ++above_n;
    curve.points.push_back({static_cast<double>(above_n) * inv_n,
                            static_cast<double>(above_m) * inv_m, tau});
  }
  curve.points.push_back({1.0, 1.0, -std::numeric_limits<double>::infinity()});
  return curve;
}

double auc(const RocCurve& curve) {
  double area = 0.0;
  for (std::size_t i = 0; i + 1 < curve.points.size(); ++i) {
    const auto& a = curve.points[i];
    const auto& b = curve.points[i + 1];
    area += (b.fpr - a.fpr) * (a.tpr + b.tpr) * 0.5;
  }
  return area;
}

double tpr_at_fpr(const RocCurve& curve, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) {
    throw ValidationError(ValidationCode::out_of_range, "alpha must lie in (0,1)");
  }
  double best = 0.0;
  for (const auto& p : curve.points) {
    if (p.fpr <= alpha) best = std::max(best, p.tpr);
  }
  return best;
}

double balanced_accuracy(const RocCurve& curve) {
  double best = 0.0;
  for (const auto& p : curve.points) {
    best = std::max(best, (p.tpr + 1.0 - p.fpr) * 0.5);
  }
  return best;
}

double precision_at_recall(std::span<const double> member_scores,
                           std::span<const double> nonmember_scores, double recall) {
  if (!(recall > 0.0 && recall <= 1.0)) {
    throw ValidationError(ValidationCode::out_of_range, "recall target must lie in (0,1]");
  }
  const RocCurve curve = roc_curve(member_scores, nonmember_scores);
  // Points run from the largest threshold down; the first point reaching the
  // recall target is the largest such threshold.
  for (const auto& p : curve.points) {
    if (p.tpr >= recall) {
      return p.tpr / (p.tpr + p.fpr);  // balanced prior
    }
  }
  // Unreachable for recall <= 1: the final point has tpr = 1.
  return 0.0;
}

GapReport gap_report(double train_acc, double test_acc, double train_loss, double test_loss) {
  if (!(train_acc >= 0.0 && train_acc <= 1.0) || !(test_acc >= 0.0 && test_acc <= 1.0)) {
    throw ValidationError(ValidationCode::out_of_range,
                          "accuracies must lie in [0,1] (fractions, not percent)");
  }
  if (!std::isfinite(train_loss) || !std::isfinite(test_loss) || train_loss < 0.0 ||
      test_loss < 0.0) {
    throw ValidationError(ValidationCode::out_of_range, "losses must be finite and nonnegative");
  }
  GapReport report;
  report.train_acc = train_acc;
  report.test_acc = test_acc;
  report.train_loss = train_loss;
  report.test_loss = test_loss;
  report.gap_acc = train_acc - test_acc;
  report.gap_loss = test_loss - train_loss;
  return report;
}

}  // namespace miakit::metrics
