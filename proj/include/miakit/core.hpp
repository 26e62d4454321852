#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace miakit {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

enum class ValidationCode {
  non_finite,
  not_normalized,
  out_of_range,
  dimension_mismatch,
  empty,
  bad_argument,
};

class ValidationError : public std::runtime_error {
 public:
  ValidationError(ValidationCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  ValidationCode code() const noexcept { return code_; }

 private:
  ValidationCode code_;
};

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::size_t step)
      : std::runtime_error(what), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

class IoError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

class SchemaVersionError : public ConfigError {
  using ConfigError::ConfigError;
};

// ---------------------------------------------------------------------------
// Deterministic randomness
// ---------------------------------------------------------------------------

/// Seeded random stream. A (seed, stream) pair fully determines the draw
/// sequence; derive() yields an independent child stream so concurrent tasks
/// never share generator state. Draws are reproducible across platforms:
/// mt19937_64 is fully specified and all distributions here are hand-rolled
/// on top of next_u64().
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed, std::uint64_t stream = 0);

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }

  /// Independent stream keyed by (this stream, tag).
  SeededRng derive(std::uint64_t tag) const;
  SeededRng derive(std::uint64_t tag_a, std::uint64_t tag_b) const;

  std::uint64_t next_u64();

  /// Uniform in [0, 1), 53-bit resolution.
  double uniform();
  double uniform(double lo, double hi);

  /// Uniform integer in [lo, hi], inclusive, rejection-sampled (no modulo bias).
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);

  /// Standard normal (Box-Muller, cached spare).
  double gaussian();

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      auto j = static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  std::uint64_t seed_ = 0;
  std::uint64_t stream_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// Softmax output over the class set. Construction is gated: validated()
/// enforces the simplex invariants and throws ValidationError; unchecked()
/// is for producers that guarantee them already (e.g. a softmax kernel).
class ProbabilityVector {
 public:
  static ProbabilityVector validated(std::vector<double> probs);
  static ProbabilityVector unchecked(std::vector<double> probs);

  std::size_t size() const noexcept { return probs_.size(); }
  double operator[](std::size_t i) const { return probs_[i]; }
  const std::vector<double>& probs() const noexcept { return probs_; }

 private:
  explicit ProbabilityVector(std::vector<double> probs) : probs_(std::move(probs)) {}
  std::vector<double> probs_;
};

/// Validation that rejects rather than repairs. Renormalization is the
/// explicit, separate utility below.
ProbabilityVector validate_probability_vector(std::vector<double> probs);

/// Rescales nonnegative finite weights to sum 1. Throws on zero/negative mass.
ProbabilityVector renormalized(std::vector<double> weights);

struct LabeledExample {
  std::vector<double> features;
  int label = 0;
};

/// Optional 2-D layout of a flat feature vector; shift/cutout augmentations
/// act on the grid when one is declared.
struct GridShape {
  std::size_t rows = 0;
  std::size_t cols = 0;
};

/// Immutable collection of labeled examples. Sample identity is the index
/// into this canonical ordering; masks and score matrices reference indices,
/// never feature content.
class Dataset {
 public:
  static Dataset create(std::vector<LabeledExample> examples, std::size_t num_classes,
                        std::optional<GridShape> grid = std::nullopt);

  std::size_t size() const noexcept { return examples_.size(); }
  std::size_t dim() const noexcept { return dim_; }
  std::size_t num_classes() const noexcept { return num_classes_; }
  const std::optional<GridShape>& grid() const noexcept { return grid_; }

  const LabeledExample& example(std::size_t i) const { return examples_[i]; }
  std::span<const double> features(std::size_t i) const { return examples_[i].features; }
  int label(std::size_t i) const { return examples_[i].label; }

 private:
  Dataset() = default;
  std::vector<LabeledExample> examples_;
  std::size_t num_classes_ = 0;
  std::size_t dim_ = 0;
  std::optional<GridShape> grid_;
};

/// Per-model training-set membership, indexed by sample id.
class MembershipMask {
 public:
  explicit MembershipMask(std::vector<bool> bits);

  std::size_t size() const noexcept { return bits_.size(); }
  std::size_t count() const noexcept { return count_; }
  bool operator[](std::size_t i) const { return bits_[i]; }
  const std::vector<bool>& bits() const noexcept { return bits_; }

  std::vector<std::size_t> member_indices() const;
  std::vector<std::size_t> nonmember_indices() const;

 private:
  std::vector<bool> bits_;
  std::size_t count_ = 0;
};

/// Uniform random mask with exactly floor(n/2) bits set.
MembershipMask sample_half_split(std::size_t n, SeededRng& rng);

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Gaussian blobs: balanced classes, class means drawn once from
/// N(0, class_sep^2 I), samples from N(mean_c, noise^2 I). label_noise is the
/// fraction of labels redrawn uniformly at random (1.0 = signal-free labels).
struct BlobsSpec {
  std::size_t num_samples = 0;
  std::size_t num_classes = 0;
  std::size_t dim = 0;
  double class_sep = 1.0;
  double noise = 1.0;
  double label_noise = 0.0;
  std::optional<GridShape> grid;
};

Dataset make_blobs(const BlobsSpec& spec, SeededRng rng);

}  // namespace miakit
