#pragma once

#include <optional>
#include <span>
#include <vector>

#include "miakit/core.hpp"

namespace miakit::trainkit {

enum class ModelKind { linear, mlp };

/// Parameters of a softmax classifier: plain softmax regression, or one
/// relu hidden layer followed by a softmax head.
///
/// linear: w2 is C x d (row-major), b2 is C; w1/b1 unused.
/// mlp:    w1 is h x d, b1 is h, w2 is C x h, b2 is C.
struct ModelParams {
  ModelKind kind = ModelKind::linear;
  std::size_t input_dim = 0;
  std::size_t num_classes = 0;
  std::size_t hidden_width = 0;

  std::vector<double> w1, b1, w2, b2;

  /// Zero-valued parameters with the given shape.
  static ModelParams zeros(ModelKind kind, std::size_t input_dim, std::size_t num_classes,
                           std::size_t hidden_width = 0);

  /// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init.
  static ModelParams init(ModelKind kind, std::size_t input_dim, std::size_t num_classes,
                          std::size_t hidden_width, SeededRng& rng);

  /// Mutable views over every parameter array, in a fixed order (w1, b1, w2, b2).
  std::vector<std::span<double>> param_spans();
  std::vector<std::span<const double>> param_spans() const;

  std::size_t num_params() const;
  bool all_finite() const;
};

struct Transform {
  enum class Kind { mirror, shift, cutout, gaussian_noise, random_choice };
  Kind kind = Kind::mirror;
  double apply_probability = 1.0;
  std::size_t max_offset = 0;         // shift
  std::size_t window = 0;             // cutout
  double sigma = 0.0;                 // gaussian_noise
  std::vector<Transform> children;    // random_choice
};

/// Ordered list of transforms; each is applied independently with its own
/// probability, in list order.
using AugmentationPolicy = std::vector<Transform>;

void validate_policy(const AugmentationPolicy& policy, std::size_t dim);

struct EarlyStopConfig {
  std::size_t patience = 0;
  double holdout_fraction = 0.1;  // carved from the member subset, never from non-members
};

struct TrainConfig {
  ModelKind model = ModelKind::linear;
  std::size_t hidden_width = 0;  // mlp only
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
  double learning_rate = 0.1;
  double weight_decay = 0.0;
  AugmentationPolicy augmentation;
  std::size_t checkpoint_every = 0;  // 0 = final checkpoint only
  std::optional<EarlyStopConfig> early_stop;

  void validate(std::size_t dim) const;
};

struct Checkpoint {
  std::size_t step = 0;  // epoch count at snapshot time
  ModelParams params;
  double train_accuracy = 0.0;  // full pass over the training subset
  std::optional<double> holdout_accuracy;
  double mean_train_loss = 0.0;
  bool is_best = false;  // best holdout accuracy so far (early stopping only)
};

struct TrainResult {
  ModelParams model;
  std::vector<Checkpoint> checkpoints;
};

/// Numerically stable softmax forward pass (max subtraction).
ProbabilityVector forward(const ModelParams& model, std::span<const double> x);

/// -log(max(p_y, 1e-12)).
double cross_entropy(const ProbabilityVector& p, int label);

/// Applies the policy in order. mirror reverses coordinates (column flip on a
/// grid); shift moves by a uniform offset in [-max_offset, max_offset] with
/// zero fill (independent row/col offsets on a grid); cutout zeroes a
/// uniformly placed window (square on a grid); gaussian_noise adds
/// iid N(0, sigma^2); random_choice applies exactly one child, chosen
/// uniformly.
std::vector<double> apply_augmentation(const AugmentationPolicy& policy,
                                       std::span<const double> x, SeededRng& rng,
                                       const std::optional<GridShape>& grid = std::nullopt);

/// Mean cross-entropy of the model over a batch. The loss that
/// compute_gradients differentiates.
double batch_loss(const ModelParams& model, const std::vector<std::vector<double>>& xs,
                  const std::vector<int>& ys);

/// Analytic gradients of batch_loss w.r.t. every parameter, written into
/// grads (same shapes as model). Returns the batch loss.
double compute_gradients(const ModelParams& model, const std::vector<std::vector<double>>& xs,
                         const std::vector<int>& ys, ModelParams& grads);

/// Minibatch SGD over the masked subset; augmentation re-sampled per example
/// per epoch. Checkpoints at the configured cadence (always one at the final
/// step). With early_stop set, training halts once holdout accuracy fails to
/// improve for `patience` consecutive checkpoints, the best-holdout
/// checkpoint is marked, and its parameters are returned as the final model.
TrainResult train(const Dataset& dataset, const MembershipMask& mask, const TrainConfig& config,
                  SeededRng rng);

struct EvalResult {
  double accuracy = 0.0;
  double mean_loss = 0.0;
};

/// Accuracy (argmax, ties to the lowest class index) and mean cross-entropy
/// over the given sample indices.
EvalResult evaluate(const ModelParams& model, const Dataset& dataset,
                    std::span<const std::size_t> indices);

/// Convenience: evaluate over the whole dataset.
EvalResult evaluate(const ModelParams& model, const Dataset& dataset);

}  // namespace miakit::trainkit
