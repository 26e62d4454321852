#include "miakit/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace miakit::attacks {

namespace {

constexpr double kEntropyClamp = 1e-12;
constexpr double kLogitClamp = 1e-7;
constexpr double kLogSqrt2Pi = 0.91893853320467274178;  // ln(sqrt(2*pi))

void check_label(int label, std::size_t num_classes) {
  if (label < 0 || static_cast<std::size_t>(label) >= num_classes) {
    throw ValidationError(ValidationCode::out_of_range,
                          "label " + std::to_string(label) + " outside [0," +
                              std::to_string(num_classes) + ")");
  }
}

double gaussian_log_density(double x, const GaussianFit& fit) {
  const double z = (x - fit.mean) / fit.std;
  return -std::log(fit.std) - kLogSqrt2Pi - 0.5 * z * z;
}

}  // namespace

std::string criterion_name(Criterion c) {
  switch (c) {
    case Criterion::correctness: return "correctness";
    case Criterion::confidence: return "confidence";
    case Criterion::neg_entropy: return "neg_entropy";
    case Criterion::modified_entropy: return "modified_entropy";
    case Criterion::logit_confidence: return "logit_confidence";
    case Criterion::external: return "external";
  }
  return "external";
}

Criterion criterion_from_name(const std::string& name) {
  if (name == "correctness") return Criterion::correctness;
  if (name == "confidence") return Criterion::confidence;
  if (name == "neg_entropy") return Criterion::neg_entropy;
  if (name == "modified_entropy") return Criterion::modified_entropy;
  if (name == "logit_confidence") return Criterion::logit_confidence;
  if (name == "external") return Criterion::external;
  throw ValidationError(ValidationCode::bad_argument, "unknown criterion: " + name);
}

double score_correctness(const ProbabilityVector& p, int y) {
  check_label(y, p.size());
  std::size_t best = 0;
  for (std::size_t i = 1; i < p.size(); ++i) {
    if (p[i] > p[best]) best = i;
  }
  return best == static_cast<std::size_t>(y) ? 1.0 : 0.0;
}

double score_confidence(const ProbabilityVector& p, int y) {
  check_label(y, p.size());
  return p[static_cast<std::size_t>(y)];
}

double score_neg_entropy(const ProbabilityVector& p) {
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) acc += p[i] * std::log(p[i]);
  }
  return acc;
}

double score_modified_entropy(const ProbabilityVector& p, int y) {
  check_label(y, p.size());
  const double py = p[static_cast<std::size_t>(y)];
  double score = (1.0 - py) * std::log(std::max(py, kEntropyClamp));
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (i == static_cast<std::size_t>(y)) continue;
    score += p[i] * std::log(std::max(1.0 - p[i], kEntropyClamp));
  }
  return score;
}

double logit_transform(double q) {
  const double clamped = std::clamp(q, kLogitClamp, 1.0 - kLogitClamp);
  return std::log(clamped / (1.0 - clamped));
}

double logit_confidence(const ProbabilityVector& p, int y) {
  check_label(y, p.size());
  return logit_transform(p[static_cast<std::size_t>(y)]);
}

double criterion_score(const ProbabilityVector& p, int y, Criterion c) {
  switch (c) {
    case Criterion::correctness: return score_correctness(p, y);
    case Criterion::confidence: return score_confidence(p, y);
    case Criterion::neg_entropy: return score_neg_entropy(p);
    case Criterion::modified_entropy: return score_modified_entropy(p, y);
    case Criterion::logit_confidence: return logit_confidence(p, y);
    case Criterion::external:
      throw ValidationError(ValidationCode::bad_argument,
                            "cannot recompute scores for criterion 'external'");
  }
  throw ValidationError(ValidationCode::bad_argument, "unknown criterion");
}

double calibrate_score(double target_score, std::span<const double> reference_scores) {
  if (reference_scores.empty()) {
    throw ValidationError(ValidationCode::empty, "calibration needs at least one reference score");
  }
  double mean = 0.0;
  for (double s : reference_scores) mean += s;
  mean /= static_cast<double>(reference_scores.size());
  return target_score - mean;
}

GaussianFit fit_gaussian(std::span<const double> samples, double floor) {
  if (samples.empty()) {
    throw ValidationError(ValidationCode::empty, "cannot fit a Gaussian to zero samples");
  }
  if (!(floor > 0.0)) {
    throw ValidationError(ValidationCode::out_of_range, "variance floor must be positive");
  }
  double mean = 0.0;
  for (double s : samples) mean += s;
  mean /= static_cast<double>(samples.size());
  if (samples.size() == 1) return {mean, floor};
  double ss = 0.0;
  for (double s : samples) ss += (s - mean) * (s - mean);
  const double std = std::sqrt(ss / static_cast<double>(samples.size() - 1));
  return {mean, std::max(std, floor)};
}

double lira_online(double target, std::span<const double> in_scores,
                   std::span<const double> out_scores, const VarianceMode& variance_mode,
                   double floor) {
  if (in_scores.empty() || out_scores.empty()) {
    throw ValidationError(ValidationCode::empty, "lira_online needs IN and OUT scores");
  }
  GaussianFit in_fit = fit_gaussian(in_scores, floor);
  GaussianFit out_fit = fit_gaussian(out_scores, floor);
  if (variance_mode.kind == VarianceMode::Kind::global) {
    in_fit.std = std::max(variance_mode.sigma_in, floor);
    out_fit.std = std::max(variance_mode.sigma_out, floor);
  }
  return gaussian_log_density(target, in_fit) - gaussian_log_density(target, out_fit);
}

double lira_offline(double target, std::span<const double> out_scores, double floor) {
  if (out_scores.empty()) {
    throw ValidationError(ValidationCode::empty, "lira_offline needs OUT scores");
  }
  const GaussianFit out_fit = fit_gaussian(out_scores, floor);
  return (target - out_fit.mean) / out_fit.std;
}

double select_threshold_fixed_fpr(std::span<const double> out_scores, double alpha) {
  if (out_scores.empty()) {
    throw ValidationError(ValidationCode::empty, "threshold selection needs OUT scores");
  }
  if (!(alpha > 0.0 && alpha < 1.0)) {
    throw ValidationError(ValidationCode::out_of_range, "alpha must lie in (0,1)");
  }
  std::vector<double> sorted(out_scores.begin(), out_scores.end());
  std::sort(sorted.begin(), sorted.end());
  const auto n = static_cast<double>(sorted.size());
  // Ascending scan: the first order statistic whose strict-exceedance rate is
  // within alpha is the smallest admissible threshold.
  for (std::size_t k = 0; k < sorted.size(); ++k) {
    const auto above = static_cast<double>(
        sorted.end() - std::upper_bound(sorted.begin(), sorted.end(), sorted[k]));
    if (above / n <= alpha) return sorted[k];
  }
  return sorted.back();
}

PerClassThresholds select_threshold_per_class(
    const std::map<int, std::vector<double>>& out_scores_by_class, double alpha) {
  if (out_scores_by_class.empty()) {
    throw ValidationError(ValidationCode::empty, "no class groups supplied");
  }
  std::vector<double> pooled;
  for (const auto& [cls, scores] : out_scores_by_class) {
    pooled.insert(pooled.end(), scores.begin(), scores.end());
  }
  if (pooled.empty()) {
    throw ValidationError(ValidationCode::empty, "every class group is empty");
  }
  PerClassThresholds out;
  out.global = select_threshold_fixed_fpr(pooled, alpha);
  for (const auto& [cls, scores] : out_scores_by_class) {
    if (scores.empty()) {
      out.by_class[cls] = out.global;
      out.fallback_classes.push_back(cls);
    } else {
      out.by_class[cls] = select_threshold_fixed_fpr(scores, alpha);
    }
  }
  return out;
}

bool apply_threshold(double score, double tau) { return score > tau; }

// --------------------------------------------------------------------------
// NN-based attack
// --------------------------------------------------------------------------

std::vector<double> attack_features(const ProbabilityVector& p, int label) {
  check_label(label, p.size());
  std::vector<double> feature(p.probs());
  std::sort(feature.begin(), feature.end(), std::greater<>());
  feature.resize(2 * p.size(), 0.0);
  feature[p.size() + static_cast<std::size_t>(label)] = 1.0;
  return feature;
}

AttackModel nn_attack_train(const std::vector<std::vector<double>>& features,
                            const std::vector<std::uint8_t>& member_bits,
                            const AttackTrainConfig& config, SeededRng rng) {
  if (features.empty() || features.size() != member_bits.size()) {
    throw ValidationError(ValidationCode::bad_argument,
                          "attack training set is empty or mis-sized");
  }
  const std::size_t dim = features.front().size();
  if (dim == 0 || dim % 2 != 0) {
    throw ValidationError(ValidationCode::dimension_mismatch,
                          "attack features must have even positive dimension (2C)");
  }
  for (const auto& f : features) {
    if (f.size() != dim) {
      throw ValidationError(ValidationCode::dimension_mismatch,
                            "attack features have inconsistent dimensions");
    }
  }
  const bool has_member = std::find(member_bits.begin(), member_bits.end(), 1) != member_bits.end();
  const bool has_nonmember =
      std::find(member_bits.begin(), member_bits.end(), 0) != member_bits.end();
  if (!has_member || !has_nonmember) {
    throw ValidationError(ValidationCode::bad_argument,
                          "attack training needs both member and non-member examples");
  }
  if (config.epochs < 1 || config.batch_size < 1 || !(config.learning_rate > 0.0)) {
    throw ValidationError(ValidationCode::bad_argument, "bad attack training config");
  }

  AttackModel model;
  model.num_classes = dim / 2;
  model.weights.assign(dim, 0.0);
  model.bias = 0.0;

  std::vector<std::size_t> order(features.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> grad(dim);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::fill(grad.begin(), grad.end(), 0.0);
      double grad_bias = 0.0;
      const double inv = 1.0 / static_cast<double>(end - start);
      for (std::size_t i = start; i < end; ++i) {
        const auto& f = features[order[i]];
        double z = model.bias;
        for (std::size_t k = 0; k < dim; ++k) z += model.weights[k] * f[k];
        const double pred = 1.0 / (1.0 + std::exp(-z));
        const double delta = (pred - static_cast<double>(member_bits[order[i]])) * inv;
        for (std::size_t k = 0; k < dim; ++k) grad[k] += delta * f[k];
        grad_bias += delta;
      }
      for (std::size_t k = 0; k < dim; ++k) {
        model.weights[k] -=
            config.learning_rate * (grad[k] + config.weight_decay * model.weights[k]);
      }
      model.bias -= config.learning_rate * grad_bias;
    }
  }
  return model;
}

double nn_attack_score(const AttackModel& model, std::span<const double> feature) {
  if (feature.size() != model.weights.size()) {
    throw ValidationError(ValidationCode::dimension_mismatch,
                          "attack feature dimension does not match the model");
  }
  double z = model.bias;
  for (std::size_t k = 0; k < feature.size(); ++k) z += model.weights[k] * feature[k];
  return 1.0 / (1.0 + std::exp(-z));
}

// --------------------------------------------------------------------------
// ScoreMatrix
// --------------------------------------------------------------------------

ScoreMatrix ScoreMatrix::create(std::size_t num_models, std::size_t num_samples,
                                Criterion criterion) {
  if (num_models == 0 || num_samples == 0) {
    throw ValidationError(ValidationCode::bad_argument, "score matrix has a zero dimension");
  }
  ScoreMatrix m;
  m.num_models = num_models;
  m.num_samples = num_samples;
  m.criterion = criterion;
  m.scores.assign(num_models * num_samples, 0.0);
  return m;
}

void ScoreMatrix::validate() const {
  if (num_models == 0 || num_samples == 0) {
    throw ValidationError(ValidationCode::empty, "score matrix is empty");
  }
  if (scores.size() != num_models * num_samples) {
    throw ValidationError(ValidationCode::dimension_mismatch, "score matrix storage mis-sized");
  }
  if (masks.size() != num_models) {
    throw ValidationError(ValidationCode::dimension_mismatch,
                          "score matrix has " + std::to_string(masks.size()) + " masks for " +
                              std::to_string(num_models) + " models");
  }
  for (const auto& mask : masks) {
    if (mask.size() != num_samples) {
      throw ValidationError(ValidationCode::dimension_mismatch,
                            "membership mask length does not match sample count");
    }
  }
  for (double s : scores) {
    if (!std::isfinite(s)) {
      throw ValidationError(ValidationCode::non_finite, "score matrix has a non-finite entry");
    }
  }
  if (!labels.empty() && labels.size() != num_samples) {
    throw ValidationError(ValidationCode::dimension_mismatch, "label column mis-sized");
  }
  if (!probs.empty() && probs.size() != num_models * num_samples * num_classes) {
    throw ValidationError(ValidationCode::dimension_mismatch, "probability block mis-sized");
  }
}

std::vector<std::size_t> ScoreMatrix::uncovered_samples(std::size_t exclude_model) const {
  std::vector<std::size_t> uncovered;
  for (std::size_t j = 0; j < num_samples; ++j) {
    std::size_t in_count = 0;
    std::size_t out_count = 0;
    for (std::size_t m = 0; m < num_models; ++m) {
      if (m == exclude_model) continue;
      if (masks[m][j]) {
        ++in_count;
      } else {
        ++out_count;
      }
    }
    if (in_count == 0 || out_count == 0) uncovered.push_back(j);
  }
  return uncovered;
}

}  // namespace miakit::attacks
