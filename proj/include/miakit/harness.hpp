#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "miakit/attacks.hpp"
#include "miakit/core.hpp"
#include "miakit/metrics.hpp"
#include "miakit/trainkit.hpp"

namespace miakit::harness {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct DatasetSpec {
  enum class Kind { blobs, file };
  Kind kind = Kind::blobs;
  BlobsSpec blobs;
  std::string path;  // kind == file: delimiter-separated "label,f0,f1,..." rows
};

enum class AttackKind {
  correctness,
  confidence,
  entropy,
  mentr,
  calibrated,
  lira_online,
  lira_offline,
  nn,
};

std::string attack_name(AttackKind kind);
AttackKind attack_from_name(const std::string& name);

struct LiraSettings {
  double floor = 1e-3;  // variance floor on the score scale
  attacks::VarianceMode::Kind variance = attacks::VarianceMode::Kind::per_sample;
};

struct AttackSettings {
  std::vector<AttackKind> attacks = {AttackKind::lira_online};
  std::vector<double> alphas = {0.001, 0.01, 0.1};
  std::vector<double> recalls = {0.5};
  LiraSettings lira;
  attacks::AttackTrainConfig nn_train;
  /// Ye-style decision layer: thresholds chosen from a leave-one-out shadow
  /// null pool at each alpha, then applied to the target. O(models^2 x
  /// samples) per attack, so off by default; unsupported for the nn attack.
  bool fixed_fpr_decisions = false;
  bool per_class_thresholds = false;  // needs labels in the matrix
};

/// Grid for the generalization scatter study: the cross product of epochs,
/// weight decay, and augmentation policy, replicated with fresh splits.
struct ScatterGrid {
  std::vector<std::size_t> epochs_values;
  std::vector<double> weight_decay_values;
  std::vector<std::pair<std::string, trainkit::AugmentationPolicy>> policies;
  std::size_t replication = 1;
};

struct ExperimentConfig {
  DatasetSpec dataset;
  std::size_t num_shadow_models = 64;
  std::vector<std::size_t> target_model_ids = {0};
  trainkit::TrainConfig target_train;
  trainkit::TrainConfig shadow_train;
  attacks::Criterion criterion = attacks::Criterion::logit_confidence;
  AttackSettings attack;
  std::uint64_t master_seed = 0;
  std::size_t threads = 0;  // 0 = hardware concurrency
  bool retain_probs = true;

  // Sweep payloads (consulted by the matching sweep entry point only).
  std::vector<std::pair<std::string, trainkit::AugmentationPolicy>> sweep_policies;
  ScatterGrid scatter;

  void validate() const;
};

Dataset make_dataset(const DatasetSpec& spec, SeededRng rng);

// ---------------------------------------------------------------------------
// Ensemble construction
// ---------------------------------------------------------------------------

struct EnsembleResult {
  attacks::ScoreMatrix matrix;
  std::vector<trainkit::TrainResult> models;
  std::vector<metrics::GapReport> gaps;       // per model: members vs non-members
  std::vector<std::size_t> uncovered;         // samples with no IN or no OUT model
};

/// Trains num_shadow_models models, each on an independent half split, and
/// records every model's criterion score (and probabilities, when retained)
/// on every sample. Deterministic in config.master_seed regardless of thread
/// count.
EnsembleResult build_ensemble(const ExperimentConfig& config, const Dataset& dataset);

/// One matrix row for an externally trained model.
struct ExternalTarget {
  std::vector<double> scores;  // num_samples, in the matrix's criterion
  std::vector<double> probs;   // num_samples x C, may be empty
  std::optional<MembershipMask> mask;
};

ExternalTarget score_model(const trainkit::ModelParams& model, const Dataset& dataset,
                           attacks::Criterion criterion, bool retain_probs);

// ---------------------------------------------------------------------------
// Attacks over a matrix
// ---------------------------------------------------------------------------

struct FixedFprDecision {
  double threshold = 0.0;
  double tpr = 0.0;
  double fpr = 0.0;
};

struct AttackOutcome {
  metrics::AttackReport report;
  metrics::RocCurve curve;
  std::map<double, FixedFprDecision> fixed_fpr;  // alpha -> decision (when enabled)
};

/// Attacks the given matrix row using every other row as shadow material.
/// Shadow statistics never read the target row.
std::vector<AttackOutcome> attack_target(const attacks::ScoreMatrix& matrix,
                                         std::size_t target_model_id,
                                         const AttackSettings& settings, SeededRng rng);

/// Same, for a target that is not part of the matrix; all rows act as shadows.
std::vector<AttackOutcome> attack_external(const attacks::ScoreMatrix& shadows,
                                           const ExternalTarget& target,
                                           const AttackSettings& settings, SeededRng rng);

// ---------------------------------------------------------------------------
// Experiment templates
// ---------------------------------------------------------------------------

struct SweepRow {
  std::string label;
  std::size_t step = 0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  double gap_acc = 0.0;
  double gap_loss = 0.0;
  double auc = 0.0;
  std::map<double, double> tpr_at;
};

/// One full ensemble + attack per augmentation policy (shadows and targets
/// share the policy). Reported stats average over the configured target ids;
/// the headline attack is the first entry in the attack list.
std::vector<SweepRow> sweep_augmentation(
    const ExperimentConfig& config, const Dataset& dataset,
    const std::vector<std::pair<std::string, trainkit::AugmentationPolicy>>& policies);

/// One row per checkpoint step; shadows at step k attack targets at step k.
std::vector<SweepRow> sweep_early_stopping(const ExperimentConfig& config,
                                           const Dataset& dataset);

struct KnowledgeResult {
  AttackOutcome matched;       // shadows trained with the target's policy
  AttackOutcome conventional;  // shadows trained with no augmentation
  metrics::GapReport target_gap;
};

/// Trains one target under config.target_train, then two shadow ensembles:
/// one matching the target's augmentation policy, one with none.
KnowledgeResult attacker_knowledge_experiment(const ExperimentConfig& config,
                                              const Dataset& dataset);

struct ScatterRecord {
  std::size_t model_id = 0;
  std::string policy_label;
  std::size_t epochs = 0;
  double weight_decay = 0.0;
  double gap_acc = 0.0;
  double gap_loss = 0.0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  double auc = 0.0;
  std::map<double, double> tpr_at;
};

/// Trains one target per grid cell x replication against a single shared
/// shadow ensemble; one ScatterRecord per target.
std::vector<ScatterRecord> generalization_scatter(const ExperimentConfig& config,
                                                  const Dataset& dataset);

/// Spearman rank correlation with average ranks for ties; nullopt when either
/// side has zero variance.
std::optional<double> spearman(std::span<const double> xs, std::span<const double> ys);

}  // namespace miakit::harness
