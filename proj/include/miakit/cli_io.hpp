#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "miakit/attacks.hpp"
#include "miakit/harness.hpp"
#include "miakit/metrics.hpp"

namespace miakit::io {

inline constexpr int kSchemaVersion = 1;
inline constexpr const char* kSeedEnvVar = "MIAKIT_SEED";

/// Shortest decimal form that parses back to the same double.
std::string format_double(double v);

/// FNV-1a 64-bit, hex encoded.
std::string fnv1a_hex(std::string_view bytes);

/// Write-temp-then-rename so readers never observe a partial file.
void atomic_write_file(const std::string& path, const std::string& content);

// ---------------------------------------------------------------------------
// Score files
// ---------------------------------------------------------------------------
//
// Line-oriented comma-separated text. First line is the column header
//   model_id,sample_id,member,score[,label[,prob_0,...,prob_{C-1}]]
// followed by one metadata comment
//   # version=1 criterion=<tag>
// and one record per (model, sample) cell, model-major, sample-minor. The
// matrix must be complete; duplicates and gaps are errors.

attacks::ScoreMatrix read_score_file(const std::string& path);
void write_score_file(const attacks::ScoreMatrix& matrix, const std::string& path);

// ---------------------------------------------------------------------------
// ROC exports
// ---------------------------------------------------------------------------

enum class RocScale { linear, log };

/// Tab-separated numeric table (fpr, tpr, threshold).
void emit_roc_export(const metrics::RocCurve& curve, const std::string& path);

/// Multi-curve SVG. Log scale floors fpr/tpr at 1e-4 (the axis floor) and
/// draws the chance diagonal.
void write_roc_svg(const std::string& path,
                   const std::vector<std::pair<std::string, const metrics::RocCurve*>>& curves,
                   RocScale scale);

// ---------------------------------------------------------------------------
// Experiment configs (JSON, schema-versioned)
// ---------------------------------------------------------------------------

struct LoadedConfig {
  harness::ExperimentConfig config;
  std::string raw;       // file bytes, embedded in report bundles
  std::string hash_hex;  // fnv1a over raw
};

/// Parses a config file; MIAKIT_SEED (when set) overrides master_seed.
LoadedConfig load_experiment_config(const std::string& path);

harness::ExperimentConfig parse_experiment_config(const std::string& json_text);

// ---------------------------------------------------------------------------
// Report bundles
// ---------------------------------------------------------------------------

struct TargetReport {
  std::size_t target_id = 0;
  std::vector<harness::AttackOutcome> outcomes;
  std::optional<metrics::GapReport> gap;
};

struct ReportBundle {
  std::string config_hash;
  std::string config_raw;
  std::uint64_t master_seed = 0;
  std::string timestamp;  // ISO-8601 UTC
  std::vector<TargetReport> targets;
};

std::string current_timestamp();

/// Writes report.json, config.json, and one ROC table per (target, attack)
/// into the directory (created if needed).
void write_report_bundle(const std::string& dir, const ReportBundle& bundle);

// Sweep/scatter tables (CSV with a header - the `report` subcommand renders
// them as aligned text tables or SVG).
void write_sweep_csv(const std::string& path, const std::vector<harness::SweepRow>& rows,
                     const std::vector<double>& alphas, bool with_step);
void write_scatter_csv(const std::string& path,
                       const std::vector<harness::ScatterRecord>& records,
                       const std::vector<double>& alphas);

/// Versioned JSON record holding the final parameters and every checkpoint.
void write_model_file(const std::string& path, const trainkit::TrainResult& result);
trainkit::TrainResult read_model_file(const std::string& path);

/// Scatter plot (SVG). Points are (x, y); y may be drawn on a log axis with
/// the same 1e-4 floor as the ROC plots.
struct ScatterPoint {
  double x = 0.0;
  double y = 0.0;
};
void write_scatter_svg(const std::string& path, const std::vector<ScatterPoint>& points,
                       const std::string& x_label, const std::string& y_label, bool log_y);

}  // namespace miakit::io
