#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "miakit/core.hpp"

namespace miakit::attacks {

// Every membership score below is oriented higher = more member-like, so the
// entropy-style criteria are negated at the source.

enum class Criterion {
  correctness,
  confidence,
  neg_entropy,
  modified_entropy,
  logit_confidence,
  external,  // scores imported from a file; provenance unknown
};

std::string criterion_name(Criterion c);
Criterion criterion_from_name(const std::string& name);

/// 1.0 iff argmax(p) == y, ties broken toward the lowest class index.
double score_correctness(const ProbabilityVector& p, int y);

/// p_y.
double score_confidence(const ProbabilityVector& p, int y);

/// sum_i p_i ln p_i (negative Shannon entropy, 0 ln 0 := 0).
double score_neg_entropy(const ProbabilityVector& p);

/// Negated modified entropy:
///   -Mentr with Mentr = -(1-p_y) ln(max(p_y,e)) - sum_{i != y} p_i ln(max(1-p_i,e)),
/// e = 1e-12.
double score_modified_entropy(const ProbabilityVector& p, int y);

/// ln(q / (1-q)) with q = clamp(p_y, 1e-7, 1-1e-7).
double logit_confidence(const ProbabilityVector& p, int y);

/// The scalar log-odds transform used by logit_confidence.
double logit_transform(double q);

double criterion_score(const ProbabilityVector& p, int y, Criterion c);

/// target_score - mean(reference_scores). References are the sample's scores
/// on models trained WITHOUT it, so the offset corrects for intrinsic sample
/// hardness (higher residual = more member-like).
double calibrate_score(double target_score, std::span<const double> reference_scores);

struct GaussianFit {
  double mean = 0.0;
  double std = 0.0;
};

/// mean = sample mean; std = max(Bessel-corrected std, floor); a single
/// sample gets std = floor.
GaussianFit fit_gaussian(std::span<const double> samples, double floor);

struct VarianceMode {
  enum class Kind { per_sample, global };
  Kind kind = Kind::per_sample;
  double sigma_in = 0.0;
  double sigma_out = 0.0;

  static VarianceMode per_sample() { return {}; }
  static VarianceMode global(double sigma_in, double sigma_out) {
    return {Kind::global, sigma_in, sigma_out};
  }
};

/// log N(target | in fit) - log N(target | out fit). Under global variance
/// mode the per-sample stds are replaced by the supplied sigmas (floored).
double lira_online(double target, std::span<const double> in_scores,
                   std::span<const double> out_scores, const VarianceMode& variance_mode,
                   double floor);

/// Standardized exceedance (target - mu_out) / sigma_out.
double lira_offline(double target, std::span<const double> out_scores, double floor);

/// Smallest threshold tau (among the order statistics) with
/// |{s in out_scores : s > tau}| / n <= alpha.
double select_threshold_fixed_fpr(std::span<const double> out_scores, double alpha);

struct PerClassThresholds {
  std::map<int, double> by_class;
  double global = 0.0;
  std::vector<int> fallback_classes;  // empty groups that fell back to the global threshold
};

PerClassThresholds select_threshold_per_class(
    const std::map<int, std::vector<double>>& out_scores_by_class, double alpha);

/// Member iff score > tau (strict).
bool apply_threshold(double score, double tau);

// ---------------------------------------------------------------------------
// NN-based attack (logistic regression over shadow-derived features)
// ---------------------------------------------------------------------------

/// Probabilities sorted descending, concatenated with a one-hot true label;
/// dimension 2C.
std::vector<double> attack_features(const ProbabilityVector& p, int label);

struct AttackModel {
  std::size_t num_classes = 0;  // feature dimension is 2 * num_classes
  std::vector<double> weights;
  double bias = 0.0;
};

struct AttackTrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double learning_rate = 0.05;
  double weight_decay = 1e-4;
};

AttackModel nn_attack_train(const std::vector<std::vector<double>>& features,
                            const std::vector<std::uint8_t>& member_bits,
                            const AttackTrainConfig& config, SeededRng rng);

/// Sigmoid of the linear score, in (0,1).
double nn_attack_score(const AttackModel& model, std::span<const double> feature);

// ---------------------------------------------------------------------------
// Score matrix
// ---------------------------------------------------------------------------

/// (model x sample) per-sample scores with per-model membership masks. The
/// substrate every attack reads. Probability vectors and labels are retained
/// when the producer kept them; attacks that need them (per-criterion
/// rescoring, the NN attack) error out when they are absent.
struct ScoreMatrix {
  std::size_t num_models = 0;
  std::size_t num_samples = 0;
  std::size_t num_classes = 0;  // 0 when probs are absent
  Criterion criterion = Criterion::external;

  std::vector<double> scores;  // num_models x num_samples, row-major
  std::vector<MembershipMask> masks;
  std::vector<int> labels;    // num_samples, empty when unknown
  std::vector<double> probs;  // num_models x num_samples x num_classes, empty when not retained

  static ScoreMatrix create(std::size_t num_models, std::size_t num_samples, Criterion criterion);

  double score(std::size_t model, std::size_t sample) const {
    return scores[model * num_samples + sample];
  }
  double& score(std::size_t model, std::size_t sample) {
    return scores[model * num_samples + sample];
  }
  std::span<const double> row(std::size_t model) const {
    return {scores.data() + model * num_samples, num_samples};
  }
  bool has_probs() const { return !probs.empty(); }
  bool has_labels() const { return !labels.empty(); }
  std::span<const double> prob(std::size_t model, std::size_t sample) const {
    return {probs.data() + (model * num_samples + sample) * num_classes, num_classes};
  }

  void validate() const;

  /// Samples lacking an IN row or an OUT row among models != exclude_model
  /// (pass num_models to exclude nothing). Such samples break online attacks.
  std::vector<std::size_t> uncovered_samples(std::size_t exclude_model) const;
};

}  // namespace miakit::attacks
