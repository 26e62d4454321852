#include "miakit/core.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace miakit {

namespace {

constexpr double kSimplexTolerance = 1e-6;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t mix_streams(std::uint64_t stream, std::uint64_t tag) {
  return splitmix64(splitmix64(stream) ^ (tag + 0x9e3779b97f4a7c15ULL));
}

}  // namespace

// --------------------------------------------------------------------------
// SeededRng
// --------------------------------------------------------------------------

SeededRng::SeededRng(std::uint64_t seed, std::uint64_t stream)
    : engine_(splitmix64(splitmix64(seed) ^ splitmix64(~stream))), seed_(seed), stream_(stream) {}

SeededRng SeededRng::derive(std::uint64_t tag) const {
  return SeededRng(seed_, mix_streams(stream_, tag));
}

SeededRng SeededRng::derive(std::uint64_t tag_a, std::uint64_t tag_b) const {
  return SeededRng(seed_, mix_streams(mix_streams(stream_, tag_a), tag_b));
}

std::uint64_t SeededRng::next_u64() { return engine_(); }

double SeededRng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double SeededRng::uniform(double lo, double hi) {
  return lo + (hi - lo) * uniform();
}

std::int64_t SeededRng::uniform_int(std::int64_t lo, std::int64_t hi) {
  if (lo > hi) {
    throw ValidationError(ValidationCode::bad_argument, "uniform_int: lo > hi");
  }
  const std::uint64_t range = static_cast<std::uint64_t>(hi - lo) + 1;
  if (range == 0) {  // full 64-bit range
    return static_cast<std::int64_t>(next_u64());
  }
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % range;
  std::uint64_t draw;
  do {
    draw = next_u64();
  } while (draw >= limit);
  return lo + static_cast<std::int64_t>(draw % range);
}

double SeededRng::gaussian() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // Box-Muller; u1 bounded away from 0 so log stays finite.
  double u1 = uniform();
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * 3.141592653589793238462643383279502884 * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

// --------------------------------------------------------------------------
// ProbabilityVector
// --------------------------------------------------------------------------

ProbabilityVector ProbabilityVector::validated(std::vector<double> probs) {
  if (probs.empty()) {
    throw ValidationError(ValidationCode::empty, "probability vector is empty");
  }
  double sum = 0.0;
  for (double p : probs) {
    if (!std::isfinite(p)) {
      throw ValidationError(ValidationCode::non_finite, "probability vector has non-finite entry");
    }
    if (p < 0.0 || p > 1.0) {
      throw ValidationError(ValidationCode::out_of_range,
                            "probability entry outside [0,1]: " + std::to_string(p));
    }
    sum += p;
  }
  if (std::abs(sum - 1.0) > kSimplexTolerance) {
    throw ValidationError(ValidationCode::not_normalized,
                          "probability vector sums to " + std::to_string(sum));
  }
  return ProbabilityVector(std::move(probs));
}

ProbabilityVector ProbabilityVector::unchecked(std::vector<double> probs) {
  return ProbabilityVector(std::move(probs));
}

ProbabilityVector validate_probability_vector(std::vector<double> probs) {
  return ProbabilityVector::validated(std::move(probs));
}

ProbabilityVector renormalized(std::vector<double> weights) {
  if (weights.empty()) {
    throw ValidationError(ValidationCode::empty, "cannot renormalize an empty vector");
  }
  double sum = 0.0;
  for (double w : weights) {
    if (!std::isfinite(w) || w < 0.0) {
      throw ValidationError(ValidationCode::out_of_range,
                            "renormalize requires finite nonnegative weights");
    }
    sum += w;
  }
  if (sum <= 0.0) {
    throw ValidationError(ValidationCode::bad_argument, "renormalize: total mass is zero");
  }
  for (double& w : weights) w /= sum;
  return ProbabilityVector::unchecked(std::move(weights));
}

// --------------------------------------------------------------------------
// Dataset
// --------------------------------------------------------------------------

Dataset Dataset::create(std::vector<LabeledExample> examples, std::size_t num_classes,
                        std::optional<GridShape> grid) {
  if (examples.empty()) {
    throw ValidationError(ValidationCode::empty, "dataset has no examples");
  }
  if (num_classes < 1) {
    throw ValidationError(ValidationCode::bad_argument, "dataset needs at least one class");
  }
  const std::size_t dim = examples.front().features.size();
  if (dim == 0) {
    throw ValidationError(ValidationCode::empty, "feature dimension is zero");
  }
  if (grid && grid->rows * grid->cols != dim) {
    throw ValidationError(ValidationCode::dimension_mismatch,
                          "grid shape does not match feature dimension");
  }
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& ex = examples[i];
    if (ex.features.size() != dim) {
      throw ValidationError(ValidationCode::dimension_mismatch,
                            "example " + std::to_string(i) + " has dimension " +
                                std::to_string(ex.features.size()) + ", expected " +
                                std::to_string(dim));
    }
    if (ex.label < 0 || static_cast<std::size_t>(ex.label) >= num_classes) {
      throw ValidationError(ValidationCode::out_of_range,
                            "example " + std::to_string(i) + " has label " +
                                std::to_string(ex.label) + " outside [0," +
                                std::to_string(num_classes) + ")");
    }
    for (double v : ex.features) {
      if (!std::isfinite(v)) {
        throw ValidationError(ValidationCode::non_finite,
                              "example " + std::to_string(i) + " has non-finite feature");
      }
    }
  }
  Dataset ds;
  ds.examples_ = std::move(examples);
  ds.num_classes_ = num_classes;
  ds.dim_ = dim;
  ds.grid_ = grid;
  return ds;
}

// --------------------------------------------------------------------------
// MembershipMask
// --------------------------------------------------------------------------

MembershipMask::MembershipMask(std::vector<bool> bits) : bits_(std::move(bits)) {
  count_ = static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), true));
}

std::vector<std::size_t> MembershipMask::member_indices() const {
  std::vector<std::size_t> out;
  out.reserve(count_);
  for (std::size_t i = 0; i < bits_.size(); ++i) {
    if (bits_[i]) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> MembershipMask::nonmember_indices() const {
  std::vector<std::size_t> out;
  out.reserve(bits_.size() - count_);
  for (std::size_t i = 0; i < bits_.size(); ++i) {
    if (!bits_[i]) out.push_back(i);
  }
  return out;
}

MembershipMask sample_half_split(std::size_t n, SeededRng& rng) {
  if (n < 2) {
    throw ValidationError(ValidationCode::bad_argument,
                          "half split needs n >= 2, got " + std::to_string(n));
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  std::vector<bool> bits(n, false);
  for (std::size_t i = 0; i < n / 2; ++i) bits[order[i]] = true;
  return MembershipMask(std::move(bits));
}

// --------------------------------------------------------------------------
// Synthetic blobs
// --------------------------------------------------------------------------

Dataset make_blobs(const BlobsSpec& spec, SeededRng rng) {
  if (spec.num_samples == 0 || spec.num_classes == 0 || spec.dim == 0) {
    throw ValidationError(ValidationCode::bad_argument, "blobs spec has a zero dimension");
  }
  if (spec.noise < 0.0 || spec.class_sep < 0.0 || spec.label_noise < 0.0 ||
      spec.label_noise > 1.0) {
    throw ValidationError(ValidationCode::out_of_range, "blobs spec parameter out of range");
  }

  SeededRng means_rng = rng.derive(1);
  std::vector<std::vector<double>> means(spec.num_classes, std::vector<double>(spec.dim));
  for (auto& mean : means) {
    for (double& v : mean) v = spec.class_sep * means_rng.gaussian();
  }

  SeededRng sample_rng = rng.derive(2);
  std::vector<LabeledExample> examples;
  examples.reserve(spec.num_samples);
  for (std::size_t i = 0; i < spec.num_samples; ++i) {
    const auto true_class = i % spec.num_classes;  // balanced, round-robin
    LabeledExample ex;
    ex.features.resize(spec.dim);
    for (std::size_t k = 0; k < spec.dim; ++k) {
      ex.features[k] = means[true_class][k] + spec.noise * sample_rng.gaussian();
    }
    ex.label = static_cast<int>(true_class);
    if (spec.label_noise > 0.0 && sample_rng.uniform() < spec.label_noise) {
      ex.label = static_cast<int>(
          sample_rng.uniform_int(0, static_cast<std::int64_t>(spec.num_classes) - 1));
    }
    examples.push_back(std::move(ex));
  }
  return Dataset::create(std::move(examples), spec.num_classes, spec.grid);
}

}  // namespace miakit
