#include "miakit/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <functional>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

namespace miakit::harness {

namespace {

using attacks::Criterion;
using attacks::ScoreMatrix;

// Stream tags for deriving independent rng streams from the master seed.
// Changing these changes every result; they are part of the rng layout.
constexpr std::uint64_t kDatasetStream = 1;
constexpr std::uint64_t kSplitStream = 2;
constexpr std::uint64_t kTrainStream = 3;
constexpr std::uint64_t kAttackStream = 4;
constexpr std::uint64_t kScatterSplitStream = 5;
constexpr std::uint64_t kScatterTrainStream = 6;
constexpr std::uint64_t kKnowledgeSplitStream = 7;
constexpr std::uint64_t kKnowledgeTrainStream = 8;
constexpr std::uint64_t kScatterAttackStream = 9;

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> abort{false};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  auto worker = [&] {
    while (!abort.load(std::memory_order_relaxed)) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) break;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
        abort.store(true, std::memory_order_relaxed);
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

Criterion attack_criterion(AttackKind kind) {
  switch (kind) {
    case AttackKind::correctness: return Criterion::correctness;
    case AttackKind::confidence: return Criterion::confidence;
    case AttackKind::entropy: return Criterion::neg_entropy;
    case AttackKind::mentr: return Criterion::modified_entropy;
    default:
      throw ValidationError(ValidationCode::bad_argument, "attack has no criterion mapping");
  }
}

bool is_threshold_family(AttackKind kind) {
  return kind == AttackKind::correctness || kind == AttackKind::confidence ||
         kind == AttackKind::entropy || kind == AttackKind::mentr;
}

// A target's view of a row: always the stored criterion scores, plus the
// probability block when retained.
struct RowView {
  std::span<const double> scores;
  std::span<const double> probs;  // num_samples * C or empty
};

RowView matrix_row_view(const ScoreMatrix& matrix, std::size_t row) {
  RowView view;
  view.scores = matrix.row(row);
  if (matrix.has_probs()) {
    view.probs = {matrix.probs.data() + row * matrix.num_samples * matrix.num_classes,
                  matrix.num_samples * matrix.num_classes};
  }
  return view;
}

// Shadow rows = all matrix rows except up to two excluded ids (the real
// target, and the pseudo-target in the fixed-FPR null pool).
struct ShadowContext {
  const ScoreMatrix* matrix = nullptr;
  std::size_t exclude_a = 0;
  std::size_t exclude_b = 0;

  ShadowContext(const ScoreMatrix& m, std::size_t a, std::size_t b)
      : matrix(&m), exclude_a(a), exclude_b(b) {}

  bool skipped(std::size_t row) const { return row == exclude_a || row == exclude_b; }
};

void gather_in_out(const ShadowContext& ctx, std::size_t sample, std::vector<double>& in_scores,
                   std::vector<double>& out_scores) {
  in_scores.clear();
  out_scores.clear();
  const auto& m = *ctx.matrix;
  for (std::size_t row = 0; row < m.num_models; ++row) {
    if (ctx.skipped(row)) continue;
    if (m.masks[row][sample]) {
      in_scores.push_back(m.score(row, sample));
    } else {
      out_scores.push_back(m.score(row, sample));
    }
  }
}

[[noreturn]] void throw_coverage(const char* attack, std::size_t sample, const char* side) {
  throw ValidationError(ValidationCode::bad_argument,
                        std::string(attack) + ": sample " + std::to_string(sample) + " has no " +
                            side + " shadow model");
}

// Pooled per-sample-centered standard deviations, for the global variance mode.
std::pair<double, double> pooled_sigmas(const ShadowContext& ctx, double floor) {
  double ss_in = 0.0, ss_out = 0.0;
  double dof_in = 0.0, dof_out = 0.0;
  std::vector<double> in_scores, out_scores;
  const auto& m = *ctx.matrix;
  auto accumulate = [](const std::vector<double>& scores, double& ss, double& dof) {
    if (scores.size() < 2) return;
    double mean = 0.0;
    for (double s : scores) mean += s;
    mean /= static_cast<double>(scores.size());
    for (double s : scores) ss += (s - mean) * (s - mean);
    dof += static_cast<double>(scores.size() - 1);
  };
  for (std::size_t j = 0; j < m.num_samples; ++j) {
    gather_in_out(ctx, j, in_scores, out_scores);
    accumulate(in_scores, ss_in, dof_in);
    accumulate(out_scores, ss_out, dof_out);
  }
  const double sigma_in = dof_in > 0.0 ? std::sqrt(ss_in / dof_in) : floor;
  const double sigma_out = dof_out > 0.0 ? std::sqrt(ss_out / dof_out) : floor;
  return {std::max(sigma_in, floor), std::max(sigma_out, floor)};
}

std::vector<double> threshold_family_scores(AttackKind kind, const ScoreMatrix& matrix,
                                            const RowView& target) {
  const Criterion crit = attack_criterion(kind);
  const std::size_t S = matrix.num_samples;
  std::vector<double> scores(S);
  if (!target.probs.empty() && matrix.has_labels()) {
    const std::size_t C = matrix.num_classes;
    for (std::size_t j = 0; j < S; ++j) {
      std::vector<double> p(target.probs.begin() + static_cast<std::ptrdiff_t>(j * C),
                            target.probs.begin() + static_cast<std::ptrdiff_t>((j + 1) * C));
      scores[j] =
          attacks::criterion_score(ProbabilityVector::unchecked(std::move(p)), matrix.labels[j], crit);
    }
    return scores;
  }
  if (matrix.criterion == crit) {
    std::copy(target.scores.begin(), target.scores.end(), scores.begin());
    return scores;
  }
  throw ValidationError(ValidationCode::bad_argument,
                        "attack '" + attack_name(kind) +
                            "' needs probability vectors, or a matrix recorded with criterion '" +
                            attacks::criterion_name(crit) + "' (matrix has '" +
                            attacks::criterion_name(matrix.criterion) + "')");
}

std::vector<double> calibrated_scores(const ShadowContext& ctx, const RowView& target) {
  const std::size_t S = ctx.matrix->num_samples;
  std::vector<double> scores(S);
  std::vector<double> in_scores, out_scores;
  for (std::size_t j = 0; j < S; ++j) {
    gather_in_out(ctx, j, in_scores, out_scores);
    if (out_scores.empty()) throw_coverage("calibrated", j, "OUT");
    scores[j] = attacks::calibrate_score(target.scores[j], out_scores);
  }
  return scores;
}

std::vector<double> lira_scores(const ShadowContext& ctx, const RowView& target, bool online,
                                const LiraSettings& lira) {
  const std::size_t S = ctx.matrix->num_samples;
  std::vector<double> scores(S);
  std::vector<double> in_scores, out_scores;
  attacks::VarianceMode mode = attacks::VarianceMode::per_sample();
  if (online && lira.variance == attacks::VarianceMode::Kind::global) {
    const auto [sigma_in, sigma_out] = pooled_sigmas(ctx, lira.floor);
    mode = attacks::VarianceMode::global(sigma_in, sigma_out);
  }
  for (std::size_t j = 0; j < S; ++j) {
    gather_in_out(ctx, j, in_scores, out_scores);
    if (out_scores.empty()) throw_coverage(online ? "lira-online" : "lira-offline", j, "OUT");
    if (online) {
      if (in_scores.empty()) throw_coverage("lira-online", j, "IN");
      scores[j] = attacks::lira_online(target.scores[j], in_scores, out_scores, mode, lira.floor);
    } else {
      scores[j] = attacks::lira_offline(target.scores[j], out_scores, lira.floor);
    }
  }
  return scores;
}

attacks::AttackModel train_nn_attack(const ScoreMatrix& matrix, std::size_t exclude_row,
                                     const attacks::AttackTrainConfig& config, SeededRng rng) {
  if (!matrix.has_probs() || !matrix.has_labels()) {
    throw ValidationError(ValidationCode::bad_argument,
                          "nn attack needs probability vectors and labels in the matrix");
  }
  std::vector<std::vector<double>> features;
  std::vector<std::uint8_t> bits;
  features.reserve((matrix.num_models - 1) * matrix.num_samples);
  bits.reserve(features.capacity());
  for (std::size_t row = 0; row < matrix.num_models; ++row) {
    if (row == exclude_row) continue;
    for (std::size_t j = 0; j < matrix.num_samples; ++j) {
      auto p = matrix.prob(row, j);
      features.push_back(attacks::attack_features(
          ProbabilityVector::unchecked(std::vector<double>(p.begin(), p.end())),
          matrix.labels[j]));
      bits.push_back(matrix.masks[row][j] ? 1 : 0);
    }
  }
  return attacks::nn_attack_train(features, bits, config, rng);
}

std::vector<double> nn_target_scores(const attacks::AttackModel& model, const ScoreMatrix& matrix,
                                     const RowView& target) {
  if (target.probs.empty()) {
    throw ValidationError(ValidationCode::bad_argument,
                          "nn attack needs the target's probability vectors");
  }
  const std::size_t S = matrix.num_samples;
  const std::size_t C = matrix.num_classes;
  std::vector<double> scores(S);
  for (std::size_t j = 0; j < S; ++j) {
    std::vector<double> p(target.probs.begin() + static_cast<std::ptrdiff_t>(j * C),
                          target.probs.begin() + static_cast<std::ptrdiff_t>((j + 1) * C));
    const auto feature =
        attacks::attack_features(ProbabilityVector::unchecked(std::move(p)), matrix.labels[j]);
    scores[j] = attacks::nn_attack_score(model, feature);
  }
  return scores;
}

// Non-nn attacks share this dispatcher; the nn attack needs its trained model
// threaded through separately.
std::vector<double> dispatch_scores(AttackKind kind, const ShadowContext& ctx,
                                    const RowView& target, const AttackSettings& settings) {
  if (is_threshold_family(kind)) return threshold_family_scores(kind, *ctx.matrix, target);
  switch (kind) {
    case AttackKind::calibrated: return calibrated_scores(ctx, target);
    case AttackKind::lira_online: return lira_scores(ctx, target, true, settings.lira);
    case AttackKind::lira_offline: return lira_scores(ctx, target, false, settings.lira);
    default:
      throw ValidationError(ValidationCode::bad_argument, "unhandled attack kind");
  }
}

void validate_attack_settings(const AttackSettings& settings) {
  if (settings.attacks.empty()) {
    throw ValidationError(ValidationCode::empty, "attack list is empty");
  }
  for (double a : settings.alphas) {
    if (!(a > 0.0 && a < 1.0)) {
      throw ValidationError(ValidationCode::out_of_range, "alpha must lie in (0,1)");
    }
  }
  for (double r : settings.recalls) {
    if (!(r > 0.0 && r <= 1.0)) {
      throw ValidationError(ValidationCode::out_of_range, "recall must lie in (0,1]");
    }
  }
  if (!(settings.lira.floor > 0.0)) {
    throw ValidationError(ValidationCode::out_of_range, "lira variance floor must be positive");
  }
}

std::map<double, FixedFprDecision> fixed_fpr_layer(AttackKind kind, const ScoreMatrix& matrix,
                                                   std::size_t real_target,
                                                   const std::vector<double>& target_scores,
                                                   const MembershipMask& target_mask,
                                                   const AttackSettings& settings) {
  // Null pool: every shadow row in turn plays pseudo-target; its non-member
  // cells are scored with both the real target and the pseudo-target removed
  // from the shadow statistics.
  std::vector<double> pool;
  std::vector<int> pool_labels;
  const bool per_class = settings.per_class_thresholds && matrix.has_labels();
  for (std::size_t row = 0; row < matrix.num_models; ++row) {
    if (row == real_target) continue;
    ShadowContext ctx(matrix, real_target, row);
    const RowView view = matrix_row_view(matrix, row);
    const auto row_scores = dispatch_scores(kind, ctx, view, settings);
    for (std::size_t j = 0; j < matrix.num_samples; ++j) {
      if (matrix.masks[row][j]) continue;
      pool.push_back(row_scores[j]);
      if (per_class) pool_labels.push_back(matrix.labels[j]);
    }
  }

  const auto member_bit = [&](std::size_t j) { return target_mask[j]; };
  std::map<double, FixedFprDecision> decisions;
  for (double alpha : settings.alphas) {
    FixedFprDecision decision;
    std::vector<double> taus(matrix.num_samples);
    if (per_class) {
      std::map<int, std::vector<double>> grouped;
      for (std::size_t i = 0; i < pool.size(); ++i) grouped[pool_labels[i]].push_back(pool[i]);
      const auto thresholds = attacks::select_threshold_per_class(grouped, alpha);
      for (std::size_t j = 0; j < matrix.num_samples; ++j) {
        const auto it = thresholds.by_class.find(matrix.labels[j]);
        taus[j] = it != thresholds.by_class.end() ? it->second : thresholds.global;
      }
      decision.threshold = thresholds.global;
    } else {
      const double tau = attacks::select_threshold_fixed_fpr(pool, alpha);
      std::fill(taus.begin(), taus.end(), tau);
      decision.threshold = tau;
    }
    std::size_t tp = 0, fp = 0, members = 0, nonmembers = 0;
    for (std::size_t j = 0; j < matrix.num_samples; ++j) {
      const bool predicted = attacks::apply_threshold(target_scores[j], taus[j]);
      if (member_bit(j)) {
        ++members;
        if (predicted) ++tp;
      } else {
        ++nonmembers;
        if (predicted) ++fp;
      }
    }
    decision.tpr = members > 0 ? static_cast<double>(tp) / static_cast<double>(members) : 0.0;
    decision.fpr =
        nonmembers > 0 ? static_cast<double>(fp) / static_cast<double>(nonmembers) : 0.0;
    decisions[alpha] = decision;
  }
  return decisions;
}

std::vector<AttackOutcome> attack_with_shadows(const ScoreMatrix& matrix,
                                               std::size_t target_row_or_m,
                                               const RowView& target,
                                               const MembershipMask& target_mask,
                                               const AttackSettings& settings, SeededRng rng) {
  matrix.validate();
  validate_attack_settings(settings);
  if (target_mask.size() != matrix.num_samples || target.scores.size() != matrix.num_samples) {
    throw ValidationError(ValidationCode::dimension_mismatch,
                          "target row does not match the matrix sample count");
  }
  if (target_mask.count() == 0 || target_mask.count() == target_mask.size()) {
    throw ValidationError(ValidationCode::bad_argument,
                          "target mask needs both members and non-members");
  }

  const auto member_idx = target_mask.member_indices();
  const auto nonmember_idx = target_mask.nonmember_indices();

  std::vector<AttackOutcome> outcomes;
  outcomes.reserve(settings.attacks.size());
  for (const AttackKind kind : settings.attacks) {
    std::vector<double> scores;
    if (kind == AttackKind::nn) {
      const auto model =
          train_nn_attack(matrix, target_row_or_m, settings.nn_train, rng.derive(0xA77));
      scores = nn_target_scores(model, matrix, target);
    } else {
      ShadowContext ctx(matrix, target_row_or_m, matrix.num_models);
      scores = dispatch_scores(kind, ctx, target, settings);
    }

    std::vector<double> member_scores, nonmember_scores;
    member_scores.reserve(member_idx.size());
    nonmember_scores.reserve(nonmember_idx.size());
    for (auto j : member_idx) member_scores.push_back(scores[j]);
    for (auto j : nonmember_idx) nonmember_scores.push_back(scores[j]);

    AttackOutcome outcome;
    outcome.curve = metrics::roc_curve(member_scores, nonmember_scores);
    outcome.report.attack = attack_name(kind);
    outcome.report.auc = metrics::auc(outcome.curve);
    outcome.report.balanced_accuracy = metrics::balanced_accuracy(outcome.curve);
    for (double alpha : settings.alphas) {
      outcome.report.tpr_at[alpha] = metrics::tpr_at_fpr(outcome.curve, alpha);
    }
    for (double r : settings.recalls) {
      outcome.report.precision_at_recall[r] =
          metrics::precision_at_recall(member_scores, nonmember_scores, r);
    }
    if (settings.fixed_fpr_decisions && kind != AttackKind::nn) {
      outcome.fixed_fpr =
          fixed_fpr_layer(kind, matrix, target_row_or_m, scores, target_mask, settings);
    }
    outcomes.push_back(std::move(outcome));
  }
  return outcomes;
}

metrics::GapReport model_gap(const trainkit::ModelParams& model, const Dataset& dataset,
                             const MembershipMask& mask) {
  const auto train_eval = trainkit::evaluate(model, dataset, mask.member_indices());
  const auto test_eval = trainkit::evaluate(model, dataset, mask.nonmember_indices());
  return metrics::gap_report(train_eval.accuracy, test_eval.accuracy, train_eval.mean_loss,
                             test_eval.mean_loss);
}

Dataset load_dataset_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw IoError("cannot open dataset file: " + path);
  }
  std::vector<LabeledExample> examples;
  int max_label = -1;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream fields(line);
    LabeledExample ex;
    if (!(fields >> ex.label)) {
      throw IoError(path + ":" + std::to_string(line_no) + ": malformed label");
    }
    double value = 0.0;
    while (fields >> value) ex.features.push_back(value);
    if (ex.features.empty()) {
      throw IoError(path + ":" + std::to_string(line_no) + ": row has no features");
    }
    max_label = std::max(max_label, ex.label);
    examples.push_back(std::move(ex));
  }
  if (examples.empty()) {
    throw IoError("dataset file has no rows: " + path);
  }
  return Dataset::create(std::move(examples), static_cast<std::size_t>(max_label) + 1);
}

}  // namespace

// ---------------------------------------------------------------------------
// Names and config validation
// ---------------------------------------------------------------------------

std::string attack_name(AttackKind kind) {
  switch (kind) {
    case AttackKind::correctness: return "correctness";
    case AttackKind::confidence: return "confidence";
    case AttackKind::entropy: return "entropy";
    case AttackKind::mentr: return "mentr";
    case AttackKind::calibrated: return "calibrated";
    case AttackKind::lira_online: return "lira-online";
    case AttackKind::lira_offline: return "lira-offline";
    case AttackKind::nn: return "nn";
  }
  return "unknown";
}

AttackKind attack_from_name(const std::string& name) {
  if (name == "correctness") return AttackKind::correctness;
  if (name == "confidence") return AttackKind::confidence;
  if (name == "entropy") return AttackKind::entropy;
  if (name == "mentr") return AttackKind::mentr;
  if (name == "calibrated") return AttackKind::calibrated;
  if (name == "lira-online") return AttackKind::lira_online;
  if (name == "lira-offline") return AttackKind::lira_offline;
  if (name == "nn") return AttackKind::nn;
  throw ValidationError(ValidationCode::bad_argument, "unknown attack: " + name);
}

void ExperimentConfig::validate() const {
  const bool online = std::any_of(attack.attacks.begin(), attack.attacks.end(), [](AttackKind k) {
    return k == AttackKind::lira_online || k == AttackKind::nn;
  });
  if (num_shadow_models < (online ? 2u : 1u)) {
    throw ValidationError(ValidationCode::bad_argument,
                          online ? "online attacks need num_shadow_models >= 2"
                                 : "num_shadow_models must be >= 1");
  }
  if (target_model_ids.empty()) {
    throw ValidationError(ValidationCode::empty, "no target model ids configured");
  }
  for (auto id : target_model_ids) {
    if (id >= num_shadow_models) {
      throw ValidationError(ValidationCode::out_of_range,
                            "target model id " + std::to_string(id) + " outside the ensemble");
    }
  }
  if (criterion == Criterion::external) {
    throw ValidationError(ValidationCode::bad_argument,
                          "ensembles cannot be built with criterion 'external'");
  }
  if (dataset.kind == DatasetSpec::Kind::file && dataset.path.empty()) {
    throw ValidationError(ValidationCode::empty, "dataset file path is empty");
  }
  validate_attack_settings(attack);
}

Dataset make_dataset(const DatasetSpec& spec, SeededRng rng) {
  if (spec.kind == DatasetSpec::Kind::file) return load_dataset_file(spec.path);
  return make_blobs(spec.blobs, rng.derive(kDatasetStream));
}

// ---------------------------------------------------------------------------
// Ensemble construction
// ---------------------------------------------------------------------------

ExternalTarget score_model(const trainkit::ModelParams& model, const Dataset& dataset,
                           Criterion criterion, bool retain_probs) {
  ExternalTarget target;
  target.scores.resize(dataset.size());
  if (retain_probs) target.probs.resize(dataset.size() * dataset.num_classes());
  for (std::size_t j = 0; j < dataset.size(); ++j) {
    const auto p = trainkit::forward(model, dataset.features(j));
    target.scores[j] = attacks::criterion_score(p, dataset.label(j), criterion);
    if (retain_probs) {
      std::copy(p.probs().begin(), p.probs().end(),
                target.probs.begin() + static_cast<std::ptrdiff_t>(j * dataset.num_classes()));
    }
  }
  return target;
}

EnsembleResult build_ensemble(const ExperimentConfig& config, const Dataset& dataset) {
  config.validate();
  config.shadow_train.validate(dataset.dim());

  const std::size_t M = config.num_shadow_models;
  const std::size_t S = dataset.size();
  const std::size_t C = dataset.num_classes();

  EnsembleResult result;
  result.matrix = ScoreMatrix::create(M, S, config.criterion);
  result.matrix.labels.resize(S);
  for (std::size_t j = 0; j < S; ++j) result.matrix.labels[j] = dataset.label(j);
  if (config.retain_probs) {
    result.matrix.num_classes = C;
    result.matrix.probs.assign(M * S * C, 0.0);
  }
  result.models.resize(M);
  result.gaps.resize(M);

  const SeededRng master(config.master_seed);
  result.matrix.masks.reserve(M);
  for (std::size_t m = 0; m < M; ++m) {
    SeededRng split_rng = master.derive(kSplitStream, m);
    result.matrix.masks.push_back(sample_half_split(S, split_rng));
  }

  parallel_for(M, config.threads, [&](std::size_t m) {
    trainkit::TrainResult trained;
    try {
      trained =
          trainkit::train(dataset, result.matrix.masks[m], config.shadow_train,
                          master.derive(kTrainStream, m));
    } catch (const TrainingError& e) {
      throw TrainingError("model " + std::to_string(m) + ": " + e.what(), e.step());
    }
    for (std::size_t j = 0; j < S; ++j) {
      const auto p = trainkit::forward(trained.model, dataset.features(j));
      result.matrix.score(m, j) = attacks::criterion_score(p, dataset.label(j), config.criterion);
      if (config.retain_probs) {
        std::copy(p.probs().begin(), p.probs().end(),
                  result.matrix.probs.begin() + static_cast<std::ptrdiff_t>((m * S + j) * C));
      }
    }
    result.gaps[m] = model_gap(trained.model, dataset, result.matrix.masks[m]);
    result.models[m] = std::move(trained);
  });

  result.matrix.validate();
  result.uncovered = result.matrix.uncovered_samples(M);
  return result;
}

// ---------------------------------------------------------------------------
// Attacks
// ---------------------------------------------------------------------------

std::vector<AttackOutcome> attack_target(const ScoreMatrix& matrix, std::size_t target_model_id,
                                         const AttackSettings& settings, SeededRng rng) {
  if (target_model_id >= matrix.num_models) {
    throw ValidationError(ValidationCode::out_of_range,
                          "target model id " + std::to_string(target_model_id) +
                              " outside the matrix");
  }
  if (matrix.num_models < 2) {
    throw ValidationError(ValidationCode::bad_argument,
                          "attacking a matrix row needs at least one shadow row");
  }
  return attack_with_shadows(matrix, target_model_id, matrix_row_view(matrix, target_model_id),
                             matrix.masks[target_model_id], settings, rng);
}

std::vector<AttackOutcome> attack_external(const ScoreMatrix& shadows,
                                           const ExternalTarget& target,
                                           const AttackSettings& settings, SeededRng rng) {
  if (!target.mask) {
    throw ValidationError(ValidationCode::bad_argument,
                          "external target needs a membership mask");
  }
  RowView view;
  view.scores = target.scores;
  if (!target.probs.empty()) view.probs = target.probs;
  // exclude_row = num_models excludes nothing: every row is shadow material.
  return attack_with_shadows(shadows, shadows.num_models, view, *target.mask, settings, rng);
}

// ---------------------------------------------------------------------------
// Experiment templates
// ---------------------------------------------------------------------------

namespace {

AttackSettings headline_only(const AttackSettings& settings) {
  AttackSettings out = settings;
  out.attacks = {settings.attacks.front()};
  out.fixed_fpr_decisions = false;
  return out;
}

SweepRow aggregate_row(const ExperimentConfig& config, const ScoreMatrix& matrix,
                       const std::vector<metrics::GapReport>& gaps,
                       const AttackSettings& settings, const SeededRng& master) {
  SweepRow row;
  double n = 0.0;
  for (auto t : config.target_model_ids) {
    const auto outcomes = attack_target(matrix, t, settings, master.derive(kAttackStream, t));
    const auto& report = outcomes.front().report;
    row.auc += report.auc;
    for (const auto& [alpha, tpr] : report.tpr_at) row.tpr_at[alpha] += tpr;
    row.train_acc += gaps[t].train_acc;
    row.test_acc += gaps[t].test_acc;
    row.gap_acc += gaps[t].gap_acc;
    row.gap_loss += gaps[t].gap_loss;
    n += 1.0;
  }
  row.auc /= n;
  for (auto& [alpha, tpr] : row.tpr_at) tpr /= n;
  row.train_acc /= n;
  row.test_acc /= n;
  row.gap_acc /= n;
  row.gap_loss /= n;
  return row;
}

}  // namespace

std::vector<SweepRow> sweep_augmentation(
    const ExperimentConfig& config, const Dataset& dataset,
    const std::vector<std::pair<std::string, trainkit::AugmentationPolicy>>& policies) {
  if (policies.empty()) {
    throw ValidationError(ValidationCode::empty, "augmentation sweep has no policies");
  }
  const SeededRng master(config.master_seed);
  const AttackSettings settings = headline_only(config.attack);
  std::vector<SweepRow> rows;
  rows.reserve(policies.size());
  for (const auto& [name, policy] : policies) {
    ExperimentConfig run = config;
    run.shadow_train.augmentation = policy;
    run.target_train.augmentation = policy;
    const EnsembleResult ensemble = build_ensemble(run, dataset);
    SweepRow row = aggregate_row(run, ensemble.matrix, ensemble.gaps, settings, master);
    row.label = name;
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<SweepRow> sweep_early_stopping(const ExperimentConfig& config,
                                           const Dataset& dataset) {
  if (config.shadow_train.early_stop) {
    throw ValidationError(ValidationCode::bad_argument,
                          "the early-stopping sweep needs aligned checkpoints; disable "
                          "early_stop in shadow_train");
  }
  const EnsembleResult ensemble = build_ensemble(config, dataset);
  const std::size_t M = config.num_shadow_models;
  const std::size_t S = dataset.size();

  // All models share the cadence, so checkpoint steps align across rows.
  const auto& reference = ensemble.models.front().checkpoints;
  const std::size_t num_steps = reference.size();
  for (const auto& trained : ensemble.models) {
    if (trained.checkpoints.size() != num_steps) {
      throw TrainingError("checkpoint steps are misaligned across the ensemble", 0);
    }
  }

  // Score every checkpoint of every model; one matrix per step, shadows at
  // step k attack targets at step k.
  std::vector<ScoreMatrix> step_matrices;
  step_matrices.reserve(num_steps);
  for (std::size_t si = 0; si < num_steps; ++si) {
    ScoreMatrix matrix = ScoreMatrix::create(M, S, config.criterion);
    matrix.labels = ensemble.matrix.labels;
    matrix.masks = ensemble.matrix.masks;
    step_matrices.push_back(std::move(matrix));
  }
  parallel_for(M, config.threads, [&](std::size_t m) {
    for (std::size_t si = 0; si < num_steps; ++si) {
      const auto& params = ensemble.models[m].checkpoints[si].params;
      for (std::size_t j = 0; j < S; ++j) {
        const auto p = trainkit::forward(params, dataset.features(j));
        step_matrices[si].score(m, j) =
            attacks::criterion_score(p, dataset.label(j), config.criterion);
      }
    }
  });

  const SeededRng master(config.master_seed);
  const AttackSettings settings = headline_only(config.attack);
  std::vector<SweepRow> rows;
  rows.reserve(num_steps);
  for (std::size_t si = 0; si < num_steps; ++si) {
    std::vector<metrics::GapReport> step_gaps(M);
    for (auto t : config.target_model_ids) {
      step_gaps[t] = model_gap(ensemble.models[t].checkpoints[si].params, dataset,
                               ensemble.matrix.masks[t]);
    }
    SweepRow row = aggregate_row(config, step_matrices[si], step_gaps, settings, master);
    row.step = reference[si].step;
    row.label = "step " + std::to_string(reference[si].step);
    rows.push_back(std::move(row));
  }
  return rows;
}

KnowledgeResult attacker_knowledge_experiment(const ExperimentConfig& config,
                                              const Dataset& dataset) {
  config.target_train.validate(dataset.dim());
  const SeededRng master(config.master_seed);

  SeededRng split_rng = master.derive(kKnowledgeSplitStream);
  const MembershipMask target_mask = sample_half_split(dataset.size(), split_rng);
  const auto trained = trainkit::train(dataset, target_mask, config.target_train,
                                       master.derive(kKnowledgeTrainStream));
  ExternalTarget target =
      score_model(trained.model, dataset, config.criterion, config.retain_probs);
  target.mask = target_mask;

  ExperimentConfig matched_cfg = config;
  matched_cfg.shadow_train.augmentation = config.target_train.augmentation;
  ExperimentConfig conventional_cfg = config;
  conventional_cfg.shadow_train.augmentation.clear();

  const AttackSettings settings = headline_only(config.attack);
  KnowledgeResult result;
  const EnsembleResult matched = build_ensemble(matched_cfg, dataset);
  result.matched =
      std::move(attack_external(matched.matrix, target, settings, master.derive(kAttackStream, 0))
                    .front());
  const EnsembleResult conventional = build_ensemble(conventional_cfg, dataset);
  result.conventional =
      std::move(attack_external(conventional.matrix, target, settings,
                                master.derive(kAttackStream, 1))
                    .front());
  result.target_gap = model_gap(trained.model, dataset, target_mask);
  return result;
}

std::vector<ScatterRecord> generalization_scatter(const ExperimentConfig& config,
                                                  const Dataset& dataset) {
  const ScatterGrid& grid = config.scatter;
  if (grid.epochs_values.empty() || grid.weight_decay_values.empty() || grid.policies.empty() ||
      grid.replication == 0) {
    throw ValidationError(ValidationCode::empty, "scatter grid has an empty axis");
  }
  const EnsembleResult shared = build_ensemble(config, dataset);
  const SeededRng master(config.master_seed);
  const AttackSettings settings = headline_only(config.attack);

  struct Cell {
    std::size_t epochs;
    double weight_decay;
    std::string policy_label;
    const trainkit::AugmentationPolicy* policy;
  };
  std::vector<Cell> cells;
  for (auto epochs : grid.epochs_values) {
    for (auto wd : grid.weight_decay_values) {
      for (const auto& [name, policy] : grid.policies) {
        for (std::size_t r = 0; r < grid.replication; ++r) {
          cells.push_back({epochs, wd, name, &policy});
        }
      }
    }
  }

  std::vector<ScatterRecord> records(cells.size());
  parallel_for(cells.size(), config.threads, [&](std::size_t k) {
    const Cell& cell = cells[k];
    trainkit::TrainConfig train_cfg = config.target_train;
    train_cfg.epochs = cell.epochs;
    train_cfg.weight_decay = cell.weight_decay;
    train_cfg.augmentation = *cell.policy;

    SeededRng split_rng = master.derive(kScatterSplitStream, k);
    const MembershipMask mask = sample_half_split(dataset.size(), split_rng);
    const auto trained =
        trainkit::train(dataset, mask, train_cfg, master.derive(kScatterTrainStream, k));
    ExternalTarget target =
        score_model(trained.model, dataset, config.criterion, config.retain_probs);
    target.mask = mask;
    const auto outcomes = attack_external(shared.matrix, target, settings,
                                          master.derive(kScatterAttackStream, k));
    const auto gap = model_gap(trained.model, dataset, mask);

    ScatterRecord rec;
    rec.model_id = k;
    rec.policy_label = cell.policy_label;
    rec.epochs = cell.epochs;
    rec.weight_decay = cell.weight_decay;
    rec.gap_acc = gap.gap_acc;
    rec.gap_loss = gap.gap_loss;
    rec.train_acc = gap.train_acc;
    rec.test_acc = gap.test_acc;
    rec.auc = outcomes.front().report.auc;
    rec.tpr_at = outcomes.front().report.tpr_at;
    records[k] = std::move(rec);
  });
  return records;
}

// ---------------------------------------------------------------------------
// Rank statistics
// ---------------------------------------------------------------------------

namespace {

std::vector<double> average_ranks(std::span<const double> xs) {
  std::vector<std::size_t> order(xs.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(xs.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && xs[order[j + 1]] == xs[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;  // 1-based average rank
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

std::optional<double> spearman(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size() || xs.size() < 2) {
    throw ValidationError(ValidationCode::bad_argument,
                          "spearman needs two equal-length series of size >= 2");
  }
  const auto rx = average_ranks(xs);
  const auto ry = average_ranks(ys);
  const double n = static_cast<double>(xs.size());
  double mean_x = 0.0, mean_y = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    mean_x += rx[i];
    mean_y += ry[i];
  }
  mean_x /= n;
  mean_y /= n;
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    const double dx = rx[i] - mean_x;
    const double dy = ry[i] - mean_y;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;  // zero variance: undefined, not a crash
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace miakit::harness
