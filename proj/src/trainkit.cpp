#include "miakit/trainkit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace miakit::trainkit {

namespace {

constexpr double kLossClamp = 1e-12;

std::size_t checked_hidden(const ModelParams& m) {
  return m.kind == ModelKind::mlp ? m.hidden_width : 0;
}

void shape_params(ModelParams& m) {
  if (m.kind == ModelKind::mlp) {
    m.w1.assign(m.hidden_width * m.input_dim, 0.0);
    m.b1.assign(m.hidden_width, 0.0);
    m.w2.assign(m.num_classes * m.hidden_width, 0.0);
  } else {
    m.w1.clear();
    m.b1.clear();
    m.w2.assign(m.num_classes * m.input_dim, 0.0);
  }
  m.b2.assign(m.num_classes, 0.0);
}

void fill_uniform(std::span<double> dst, double bound, SeededRng& rng) {
  for (double& v : dst) v = rng.uniform(-bound, bound);
}

std::vector<double> softmax_from_logits(std::vector<double> logits) {
  const double zmax = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double& z : logits) {
    z = std::exp(z - zmax);
    sum += z;
  }
  for (double& z : logits) z /= sum;
  return logits;
}

// Forward pass keeping the hidden pre-activations around for backprop.
struct ForwardScratch {
  std::vector<double> pre_hidden;  // mlp only
  std::vector<double> hidden;      // mlp only
  std::vector<double> probs;
};

void forward_into(const ModelParams& m, std::span<const double> x, ForwardScratch& s) {
  std::vector<double> logits(m.num_classes, 0.0);
  if (m.kind == ModelKind::mlp) {
    s.pre_hidden.assign(m.hidden_width, 0.0);
    for (std::size_t j = 0; j < m.hidden_width; ++j) {
      double acc = m.b1[j];
      const double* row = m.w1.data() + j * m.input_dim;
      for (std::size_t k = 0; k < m.input_dim; ++k) acc += row[k] * x[k];
      s.pre_hidden[j] = acc;
    }
    s.hidden = s.pre_hidden;
    for (double& h : s.hidden) h = std::max(h, 0.0);
    for (std::size_t c = 0; c < m.num_classes; ++c) {
      double acc = m.b2[c];
      const double* row = m.w2.data() + c * m.hidden_width;
      for (std::size_t j = 0; j < m.hidden_width; ++j) acc += row[j] * s.hidden[j];
      logits[c] = acc;
    }
  } else {
    for (std::size_t c = 0; c < m.num_classes; ++c) {
      double acc = m.b2[c];
      const double* row = m.w2.data() + c * m.input_dim;
      for (std::size_t k = 0; k < m.input_dim; ++k) acc += row[k] * x[k];
      logits[c] = acc;
    }
  }
  s.probs = softmax_from_logits(std::move(logits));
}

int argmax_lowest(const std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;  // strict: ties keep the lowest index
  }
  return static_cast<int>(best);
}

void check_label(int label, std::size_t num_classes) {
  if (label < 0 || static_cast<std::size_t>(label) >= num_classes) {
    throw ValidationError(ValidationCode::out_of_range,
                          "label " + std::to_string(label) + " outside [0," +
                              std::to_string(num_classes) + ")");
  }
}

void validate_transform(const Transform& t, std::size_t dim) {
  if (t.apply_probability < 0.0 || t.apply_probability > 1.0) {
    throw ValidationError(ValidationCode::out_of_range, "apply_probability outside [0,1]");
  }
  switch (t.kind) {
    case Transform::Kind::shift:
      if (t.max_offset >= dim) {
        throw ValidationError(ValidationCode::out_of_range, "shift max_offset must be < dim");
      }
      break;
    case Transform::Kind::cutout:
      if (t.window > dim) {
        throw ValidationError(ValidationCode::out_of_range, "cutout window must be <= dim");
      }
      break;
    case Transform::Kind::gaussian_noise:
      if (t.sigma < 0.0) {
        throw ValidationError(ValidationCode::out_of_range, "gaussian_noise sigma must be >= 0");
      }
      break;
    case Transform::Kind::random_choice:
      if (t.children.empty()) {
        throw ValidationError(ValidationCode::empty, "random_choice needs at least one child");
      }
      for (const auto& child : t.children) validate_transform(child, dim);
      break;
    case Transform::Kind::mirror:
      break;
  }
}

void apply_mirror(std::vector<double>& x, const std::optional<GridShape>& grid) {
  if (grid) {
    for (std::size_t r = 0; r < grid->rows; ++r) {
      std::reverse(x.begin() + static_cast<std::ptrdiff_t>(r * grid->cols),
                   x.begin() + static_cast<std::ptrdiff_t>((r + 1) * grid->cols));
    }
  } else {
    std::reverse(x.begin(), x.end());
  }
}

void shift_1d(std::span<double> row, std::ptrdiff_t offset) {
  const auto n = static_cast<std::ptrdiff_t>(row.size());
  std::vector<double> out(row.size(), 0.0);
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const std::ptrdiff_t src = i - offset;
    if (src >= 0 && src < n) out[static_cast<std::size_t>(i)] = row[static_cast<std::size_t>(src)];
  }
  std::copy(out.begin(), out.end(), row.begin());
}

void apply_shift(std::vector<double>& x, std::size_t max_offset,
                 const std::optional<GridShape>& grid, SeededRng& rng) {
  const auto mo = static_cast<std::int64_t>(max_offset);
  if (grid) {
    const auto dr = static_cast<std::ptrdiff_t>(rng.uniform_int(-mo, mo));
    const auto dc = static_cast<std::ptrdiff_t>(rng.uniform_int(-mo, mo));
    const auto rows = static_cast<std::ptrdiff_t>(grid->rows);
    const auto cols = static_cast<std::ptrdiff_t>(grid->cols);
    std::vector<double> out(x.size(), 0.0);
    for (std::ptrdiff_t r = 0; r < rows; ++r) {
      for (std::ptrdiff_t c = 0; c < cols; ++c) {
        const std::ptrdiff_t sr = r - dr;
        const std::ptrdiff_t sc = c - dc;
        if (sr >= 0 && sr < rows && sc >= 0 && sc < cols) {
          out[static_cast<std::size_t>(r * cols + c)] = x[static_cast<std::size_t>(sr * cols + sc)];
        }
      }
    }
    x = std::move(out);
  } else {
    const auto offset = static_cast<std::ptrdiff_t>(rng.uniform_int(-mo, mo));
    shift_1d(x, offset);
  }
}

void apply_cutout(std::vector<double>& x, std::size_t window,
                  const std::optional<GridShape>& grid, SeededRng& rng) {
  if (window == 0) return;
  if (grid) {
    const std::size_t wr = std::min(window, grid->rows);
    const std::size_t wc = std::min(window, grid->cols);
    const auto r0 = static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(grid->rows - wr)));
    const auto c0 = static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(grid->cols - wc)));
    for (std::size_t r = r0; r < r0 + wr; ++r) {
      for (std::size_t c = c0; c < c0 + wc; ++c) x[r * grid->cols + c] = 0.0;
    }
  } else {
    const auto start = static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(x.size() - window)));
    std::fill(x.begin() + static_cast<std::ptrdiff_t>(start),
              x.begin() + static_cast<std::ptrdiff_t>(start + window), 0.0);
  }
}

void apply_one(const Transform& t, std::vector<double>& x, const std::optional<GridShape>& grid,
               SeededRng& rng);

void apply_random_choice(const Transform& t, std::vector<double>& x,
                         const std::optional<GridShape>& grid, SeededRng& rng) {
  const auto idx = static_cast<std::size_t>(
      rng.uniform_int(0, static_cast<std::int64_t>(t.children.size()) - 1));
  // Exactly one child fires; the child's own apply_probability is not consulted.
  apply_one(t.children[idx], x, grid, rng);
}

void apply_one(const Transform& t, std::vector<double>& x, const std::optional<GridShape>& grid,
               SeededRng& rng) {
  switch (t.kind) {
    case Transform::Kind::mirror:
      apply_mirror(x, grid);
      break;
    case Transform::Kind::shift:
      apply_shift(x, t.max_offset, grid, rng);
      break;
    case Transform::Kind::cutout:
      apply_cutout(x, t.window, grid, rng);
      break;
    case Transform::Kind::gaussian_noise:
      for (double& v : x) v += t.sigma * rng.gaussian();
      break;
    case Transform::Kind::random_choice:
      apply_random_choice(t, x, grid, rng);
      break;
  }
}

}  // namespace

// --------------------------------------------------------------------------
// ModelParams
// --------------------------------------------------------------------------

ModelParams ModelParams::zeros(ModelKind kind, std::size_t input_dim, std::size_t num_classes,
                               std::size_t hidden_width) {
  if (input_dim == 0 || num_classes == 0 || (kind == ModelKind::mlp && hidden_width == 0)) {
    throw ValidationError(ValidationCode::bad_argument, "model shape has a zero dimension");
  }
  ModelParams m;
  m.kind = kind;
  m.input_dim = input_dim;
  m.num_classes = num_classes;
  m.hidden_width = kind == ModelKind::mlp ? hidden_width : 0;
  shape_params(m);
  return m;
}

ModelParams ModelParams::init(ModelKind kind, std::size_t input_dim, std::size_t num_classes,
                              std::size_t hidden_width, SeededRng& rng) {
  ModelParams m = zeros(kind, input_dim, num_classes, hidden_width);
  if (kind == ModelKind::mlp) {
    const double bound1 = 1.0 / std::sqrt(static_cast<double>(input_dim));
    fill_uniform(m.w1, bound1, rng);
    fill_uniform(m.b1, bound1, rng);
    const double bound2 = 1.0 / std::sqrt(static_cast<double>(hidden_width));
    fill_uniform(m.w2, bound2, rng);
    fill_uniform(m.b2, bound2, rng);
  } else {
    const double bound = 1.0 / std::sqrt(static_cast<double>(input_dim));
    fill_uniform(m.w2, bound, rng);
    fill_uniform(m.b2, bound, rng);
  }
  return m;
}

std::vector<std::span<double>> ModelParams::param_spans() {
  std::vector<std::span<double>> spans;
  if (kind == ModelKind::mlp) {
    spans.push_back(w1);
    spans.push_back(b1);
  }
  spans.push_back(w2);
  spans.push_back(b2);
  return spans;
}

std::vector<std::span<const double>> ModelParams::param_spans() const {
  std::vector<std::span<const double>> spans;
  if (kind == ModelKind::mlp) {
    spans.push_back(w1);
    spans.push_back(b1);
  }
  spans.push_back(w2);
  spans.push_back(b2);
  return spans;
}

std::size_t ModelParams::num_params() const {
  return w1.size() + b1.size() + w2.size() + b2.size();
}

bool ModelParams::all_finite() const {
  for (const auto& span : param_spans()) {
    for (double v : span) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

// --------------------------------------------------------------------------
// Forward / loss
// --------------------------------------------------------------------------

ProbabilityVector forward(const ModelParams& model, std::span<const double> x) {
  if (x.size() != model.input_dim) {
    throw ValidationError(ValidationCode::dimension_mismatch,
                          "input has dimension " + std::to_string(x.size()) + ", model expects " +
                              std::to_string(model.input_dim));
  }
  if (!model.all_finite()) {
    throw ValidationError(ValidationCode::non_finite, "model parameters are not finite");
  }
  ForwardScratch scratch;
  forward_into(model, x, scratch);
  return ProbabilityVector::unchecked(std::move(scratch.probs));
}

double cross_entropy(const ProbabilityVector& p, int label) {
  check_label(label, p.size());
  return -std::log(std::max(p[static_cast<std::size_t>(label)], kLossClamp));
}

// --------------------------------------------------------------------------
// Augmentation
// --------------------------------------------------------------------------

void validate_policy(const AugmentationPolicy& policy, std::size_t dim) {
  if (dim == 0) {
    throw ValidationError(ValidationCode::bad_argument, "policy validation needs dim > 0");
  }
  for (const auto& t : policy) validate_transform(t, dim);
}

std::vector<double> apply_augmentation(const AugmentationPolicy& policy,
                                       std::span<const double> x, SeededRng& rng,
                                       const std::optional<GridShape>& grid) {
  if (grid && grid->rows * grid->cols != x.size()) {
    throw ValidationError(ValidationCode::dimension_mismatch,
                          "grid shape does not match input dimension");
  }
  validate_policy(policy, x.size());
  std::vector<double> out(x.begin(), x.end());
  for (const auto& t : policy) {
    // The gate draw happens regardless of p so the stream layout does not
    // depend on the probability value.
    const double gate = rng.uniform();
    if (gate < t.apply_probability) apply_one(t, out, grid, rng);
  }
  return out;
}

// --------------------------------------------------------------------------
// Gradients
// --------------------------------------------------------------------------

double batch_loss(const ModelParams& model, const std::vector<std::vector<double>>& xs,
                  const std::vector<int>& ys) {
  if (xs.empty() || xs.size() != ys.size()) {
    throw ValidationError(ValidationCode::bad_argument, "batch is empty or mis-sized");
  }
  ForwardScratch scratch;
  double total = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    check_label(ys[i], model.num_classes);
    forward_into(model, xs[i], scratch);
    total += -std::log(std::max(scratch.probs[static_cast<std::size_t>(ys[i])], kLossClamp));
  }
  return total / static_cast<double>(xs.size());
}

double compute_gradients(const ModelParams& model, const std::vector<std::vector<double>>& xs,
                         const std::vector<int>& ys, ModelParams& grads) {
  if (xs.empty() || xs.size() != ys.size()) {
    throw ValidationError(ValidationCode::bad_argument, "batch is empty or mis-sized");
  }
  grads = ModelParams::zeros(model.kind, model.input_dim, model.num_classes,
                             checked_hidden(model));
  const double inv_batch = 1.0 / static_cast<double>(xs.size());
  ForwardScratch scratch;
  std::vector<double> delta_out(model.num_classes);
  std::vector<double> delta_hidden(model.hidden_width);
  double total = 0.0;

  for (std::size_t i = 0; i < xs.size(); ++i) {
    check_label(ys[i], model.num_classes);
    const auto& x = xs[i];
    forward_into(model, x, scratch);
    total += -std::log(std::max(scratch.probs[static_cast<std::size_t>(ys[i])], kLossClamp));

    for (std::size_t c = 0; c < model.num_classes; ++c) {
      delta_out[c] = scratch.probs[c] - (static_cast<int>(c) == ys[i] ? 1.0 : 0.0);
    }

    if (model.kind == ModelKind::mlp) {
      for (std::size_t c = 0; c < model.num_classes; ++c) {
        const double d = delta_out[c] * inv_batch;
        double* grow = grads.w2.data() + c * model.hidden_width;
        for (std::size_t j = 0; j < model.hidden_width; ++j) grow[j] += d * scratch.hidden[j];
        grads.b2[c] += d;
      }
      for (std::size_t j = 0; j < model.hidden_width; ++j) {
        double acc = 0.0;
        for (std::size_t c = 0; c < model.num_classes; ++c) {
          acc += delta_out[c] * model.w2[c * model.hidden_width + j];
        }
        delta_hidden[j] = scratch.pre_hidden[j] > 0.0 ? acc : 0.0;
      }
      for (std::size_t j = 0; j < model.hidden_width; ++j) {
        const double d = delta_hidden[j] * inv_batch;
        if (d == 0.0) continue;
        double* grow = grads.w1.data() + j * model.input_dim;
        for (std::size_t k = 0; k < model.input_dim; ++k) grow[k] += d * x[k];
        grads.b1[j] += d;
      }
    } else {
      for (std::size_t c = 0; c < model.num_classes; ++c) {
        const double d = delta_out[c] * inv_batch;
        double* grow = grads.w2.data() + c * model.input_dim;
        for (std::size_t k = 0; k < model.input_dim; ++k) grow[k] += d * x[k];
        grads.b2[c] += d;
      }
    }
  }
  return total * inv_batch;
}

// --------------------------------------------------------------------------
// Training
// --------------------------------------------------------------------------

void TrainConfig::validate(std::size_t dim) const {
  if (epochs < 1) {
    throw ValidationError(ValidationCode::bad_argument, "epochs must be >= 1");
  }
  if (batch_size < 1) {
    throw ValidationError(ValidationCode::bad_argument, "batch_size must be >= 1");
  }
  if (checkpoint_every < 1) {
    throw ValidationError(ValidationCode::bad_argument, "checkpoint_every must be >= 1");
  }
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ValidationError(ValidationCode::out_of_range, "learning_rate must be positive");
  }
  if (weight_decay < 0.0 || !std::isfinite(weight_decay)) {
    throw ValidationError(ValidationCode::out_of_range, "weight_decay must be >= 0");
  }
  if (model == ModelKind::mlp && hidden_width == 0) {
    throw ValidationError(ValidationCode::bad_argument, "mlp needs hidden_width >= 1");
  }
  if (early_stop) {
    if (!(early_stop->holdout_fraction > 0.0 && early_stop->holdout_fraction < 1.0)) {
      throw ValidationError(ValidationCode::out_of_range, "holdout_fraction must lie in (0,1)");
    }
  }
  validate_policy(augmentation, dim);
}

namespace {

struct Subset {
  std::vector<std::size_t> train;    // gradient updates + reported train stats
  std::vector<std::size_t> holdout;  // early-stopping monitor, never trained on
};

Subset split_members(const Dataset& dataset, const MembershipMask& mask,
                     const TrainConfig& config, SeededRng& rng) {
  Subset subset;
  subset.train = mask.member_indices();
  if (subset.train.empty()) {
    throw TrainingError("masked training subset is empty", 0);
  }
  if (config.early_stop) {
    // Holdout comes out of the member half so non-members stay unseen.
    rng.shuffle(subset.train);
    auto holdout_count = static_cast<std::size_t>(
        config.early_stop->holdout_fraction * static_cast<double>(subset.train.size()));
    holdout_count = std::clamp<std::size_t>(holdout_count, 1, subset.train.size() - 1);
    subset.holdout.assign(subset.train.end() - static_cast<std::ptrdiff_t>(holdout_count),
                          subset.train.end());
    subset.train.resize(subset.train.size() - holdout_count);
  }
  int first_label = dataset.label(subset.train.front());
  const bool degenerate =
      std::all_of(subset.train.begin(), subset.train.end(),
                  [&](std::size_t i) { return dataset.label(i) == first_label; });
  if (degenerate) {
    throw TrainingError("training subset contains a single class", 0);
  }
  return subset;
}

void sgd_step(ModelParams& params, const ModelParams& grads, double lr, double weight_decay) {
  auto p = params.param_spans();
  auto g = grads.param_spans();
  for (std::size_t s = 0; s < p.size(); ++s) {
    // Biases are the odd spans (b1, b2); decay applies to weight matrices only.
    const bool is_bias = (s % 2 == 1);
    const double wd = is_bias ? 0.0 : weight_decay;
    for (std::size_t i = 0; i < p[s].size(); ++i) {
      p[s][i] -= lr * (g[s][i] + wd * p[s][i]);
    }
  }
}

}  // namespace

TrainResult train(const Dataset& dataset, const MembershipMask& mask, const TrainConfig& config,
                  SeededRng rng) {
  if (mask.size() != dataset.size()) {
    throw ValidationError(ValidationCode::dimension_mismatch,
                          "mask length does not match dataset size");
  }
  config.validate(dataset.dim());

  SeededRng split_rng = rng.derive(1);
  SeededRng init_rng = rng.derive(2);
  SeededRng shuffle_rng = rng.derive(3);
  SeededRng aug_rng = rng.derive(4);

  const Subset subset = split_members(dataset, mask, config, split_rng);
  ModelParams params = ModelParams::init(config.model, dataset.dim(), dataset.num_classes(),
                                         config.hidden_width, init_rng);

  TrainResult result;
  std::vector<std::size_t> order = subset.train;
  std::vector<std::vector<double>> batch_xs;
  std::vector<int> batch_ys;
  ModelParams grads;

  double best_holdout = -1.0;
  std::size_t best_checkpoint = 0;
  std::size_t stall = 0;
  bool stopped_early = false;
  std::size_t global_step = 0;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      batch_xs.clear();
      batch_ys.clear();
      for (std::size_t i = start; i < end; ++i) {
        const auto idx = order[i];
        auto features = dataset.features(idx);
        if (config.augmentation.empty()) {
          batch_xs.emplace_back(features.begin(), features.end());
        } else {
          batch_xs.push_back(
              apply_augmentation(config.augmentation, features, aug_rng, dataset.grid()));
        }
        batch_ys.push_back(dataset.label(idx));
      }
      ++global_step;
      const double loss = compute_gradients(params, batch_xs, batch_ys, grads);
      if (!std::isfinite(loss)) {
        throw TrainingError("loss diverged (non-finite) at minibatch step " +
                                std::to_string(global_step) + " in epoch " +
                                std::to_string(epoch),
                            global_step);
      }
      sgd_step(params, grads, config.learning_rate, config.weight_decay);
    }

    const bool cadence_hit = epoch % config.checkpoint_every == 0;
    const bool final_epoch = epoch == config.epochs;
    if (!cadence_hit && !final_epoch) continue;

    Checkpoint ckpt;
    ckpt.step = epoch;
    ckpt.params = params;
    const EvalResult train_eval = evaluate(params, dataset, subset.train);
    ckpt.train_accuracy = train_eval.accuracy;
    ckpt.mean_train_loss = train_eval.mean_loss;
    if (config.early_stop) {
      ckpt.holdout_accuracy = evaluate(params, dataset, subset.holdout).accuracy;
    }
    result.checkpoints.push_back(std::move(ckpt));

    if (config.early_stop) {
      const double holdout = *result.checkpoints.back().holdout_accuracy;
      if (holdout > best_holdout) {
        best_holdout = holdout;
        best_checkpoint = result.checkpoints.size() - 1;
        stall = 0;
      } else {
        ++stall;
        if (stall > config.early_stop->patience) {
          stopped_early = true;
          break;
        }
      }
    }
  }

  if (config.early_stop) {
    result.checkpoints[best_checkpoint].is_best = true;
    result.model = result.checkpoints[best_checkpoint].params;
  } else {
    result.model = std::move(params);
  }
  (void)stopped_early;
  return result;
}

// --------------------------------------------------------------------------
// Evaluation
// --------------------------------------------------------------------------

EvalResult evaluate(const ModelParams& model, const Dataset& dataset,
                    std::span<const std::size_t> indices) {
  if (indices.empty()) {
    throw ValidationError(ValidationCode::empty, "evaluation selection is empty");
  }
  ForwardScratch scratch;
  std::size_t correct = 0;
  double loss = 0.0;
  for (std::size_t idx : indices) {
    forward_into(model, dataset.features(idx), scratch);
    if (argmax_lowest(scratch.probs) == dataset.label(idx)) ++correct;
    loss += -std::log(
        std::max(scratch.probs[static_cast<std::size_t>(dataset.label(idx))], kLossClamp));
  }
  EvalResult out;
  out.accuracy = static_cast<double>(correct) / static_cast<double>(indices.size());
  out.mean_loss = loss / static_cast<double>(indices.size());
  return out;
}

EvalResult evaluate(const ModelParams& model, const Dataset& dataset) {
  std::vector<std::size_t> all(dataset.size());
  std::iota(all.begin(), all.end(), 0);
  return evaluate(model, dataset, all);
}

}  // namespace miakit::trainkit
