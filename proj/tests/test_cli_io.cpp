#include <doctest.h>

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <unistd.h>

#include "miakit/cli_io.hpp"

using namespace miakit;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("miakit_test_" + std::to_string(::getpid()) + "_" +
            std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

attacks::ScoreMatrix sample_matrix(bool with_probs) {
  auto matrix = attacks::ScoreMatrix::create(2, 3, attacks::Criterion::logit_confidence);
  matrix.masks.emplace_back(std::vector<bool>{true, false, true});
  matrix.masks.emplace_back(std::vector<bool>{false, true, false});
  double v = 0.125;
  for (auto& s : matrix.scores) {
    s = v;
    v += 0.7301;  // values with nontrivial shortest representations
  }
  matrix.labels = {0, 1, 0};
  if (with_probs) {
    matrix.num_classes = 2;
    matrix.probs = {0.9, 0.1, 0.4, 0.6, 0.7, 0.3, 0.2, 0.8, 0.55, 0.45, 0.35, 0.65};
  }
  return matrix;
}

}  // namespace

TEST_CASE("format_double survives the parse round trip") {
  for (double v : {0.1, 1.0 / 3.0, 1e-300, -2.5e17, 0.0, 19.56}) {
    const std::string s = io::format_double(v);
    double back = 0.0;
    std::from_chars(s.data(), s.data() + s.size(), back);
    CHECK(back == v);
  }
}

TEST_CASE("fnv1a matches the reference vectors") {
  CHECK(io::fnv1a_hex("") == "cbf29ce484222325");
  CHECK(io::fnv1a_hex("a") == "af63dc4c8601ec8c");
  CHECK(io::fnv1a_hex("foobar") == "85944171f73967e8");
}

TEST_CASE("atomic_write_file leaves no temp file behind") {
  TempDir tmp;
  const auto path = tmp.file("out.txt");
  io::atomic_write_file(path, "hello\n");
  CHECK(slurp(path) == "hello\n");
  CHECK_FALSE(fs::exists(path + ".tmp"));
}

TEST_CASE("score file round trip is bit exact") {
  TempDir tmp;
  for (bool with_probs : {false, true}) {
    const auto matrix = sample_matrix(with_probs);
    const auto path = tmp.file(with_probs ? "probs.csv" : "plain.csv");
    io::write_score_file(matrix, path);
    const auto loaded = io::read_score_file(path);
    CHECK(loaded.num_models == matrix.num_models);
    CHECK(loaded.num_samples == matrix.num_samples);
    CHECK(loaded.criterion == matrix.criterion);
    CHECK(loaded.scores == matrix.scores);
    CHECK(loaded.labels == matrix.labels);
    CHECK(loaded.probs == matrix.probs);
    for (std::size_t m = 0; m < matrix.num_models; ++m) {
      CHECK(loaded.masks[m].bits() == matrix.masks[m].bits());
    }
    // Canonical form: a second write produces identical bytes.
    const auto path2 = tmp.file("again.csv");
    io::write_score_file(loaded, path2);
    CHECK(slurp(path) == slurp(path2));
  }
}

TEST_CASE("score file header comes first and carries the column names") {
  TempDir tmp;
  const auto path = tmp.file("scores.csv");
  io::write_score_file(sample_matrix(false), path);
  const auto content = slurp(path);
  CHECK(content.rfind("model_id,sample_id,member,score,label\n", 0) == 0);
}

TEST_CASE("score file reader rejects duplicates, gaps, and junk") {
  TempDir tmp;
  const std::string header = "model_id,sample_id,member,score\n# version=1 criterion=external\n";

  SUBCASE("duplicate pair names the line") {
    const auto path = tmp.file("dup.csv");
    io::atomic_write_file(path, header + "0,0,1,0.5\n0,1,0,0.25\n0,0,1,0.5\n1,0,0,0.1\n1,1,1,0.2\n");
    CHECK_THROWS_WITH_AS(io::read_score_file(path), doctest::Contains(":5"), IoError);
  }
  SUBCASE("incomplete matrix") {
    const auto path = tmp.file("gap.csv");
    io::atomic_write_file(path, header + "0,0,1,0.5\n0,1,0,0.25\n1,0,0,0.1\n");
    CHECK_THROWS_WITH_AS(io::read_score_file(path), doctest::Contains("incomplete"), IoError);
  }
  SUBCASE("malformed line reports its number") {
    const auto path = tmp.file("junk.csv");
    io::atomic_write_file(path, header + "0,0,1,zebra\n");
    CHECK_THROWS_WITH_AS(io::read_score_file(path), doctest::Contains(":3"), IoError);
  }
  SUBCASE("non-finite score") {
    const auto path = tmp.file("inf.csv");
    io::atomic_write_file(path, header + "0,0,1,inf\n0,1,0,0.25\n");
    CHECK_THROWS_WITH_AS(io::read_score_file(path), doctest::Contains("non-finite"), IoError);
  }
  SUBCASE("member bit must be 0 or 1") {
    const auto path = tmp.file("bit.csv");
    io::atomic_write_file(path, header + "0,0,2,0.5\n");
    CHECK_THROWS_AS(io::read_score_file(path), IoError);
  }
  SUBCASE("unknown schema version") {
    const auto path = tmp.file("v9.csv");
    io::atomic_write_file(path,
                          "model_id,sample_id,member,score\n# version=9 criterion=external\n"
                          "0,0,1,0.5\n");
    CHECK_THROWS_AS(io::read_score_file(path), SchemaVersionError);
  }
  SUBCASE("bad header") {
    const auto path = tmp.file("hdr.csv");
    io::atomic_write_file(path, "sample,first\n0,0\n");
    CHECK_THROWS_AS(io::read_score_file(path), IoError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(io::read_score_file(tmp.file("nope.csv")), IoError);
  }
}

TEST_CASE("empty matrix cannot be written") {
  attacks::ScoreMatrix matrix;
  TempDir tmp;
  CHECK_THROWS_AS(io::write_score_file(matrix, tmp.file("empty.csv")), ValidationError);
}

TEST_CASE("roc export table") {
  TempDir tmp;
  metrics::RocCurve diagonal;
  diagonal.points = {{0.0, 0.0, 1.0}, {0.5, 0.5, 0.5}, {1.0, 1.0, 0.0}};
  const auto path = tmp.file("roc.tsv");
  io::emit_roc_export(diagonal, path);
  const auto content = slurp(path);
  CHECK(content.rfind("fpr\ttpr\tthreshold\n", 0) == 0);
  CHECK(content.find("0.5\t0.5\t0.5") != std::string::npos);
}

TEST_CASE("roc svg renders curves with the log floor") {
  TempDir tmp;
  metrics::RocCurve perfect;
  perfect.points = {{0.0, 0.0, 0.9}, {0.0, 1.0, 0.5}, {1.0, 1.0, 0.0}};
  const auto path = tmp.file("roc.svg");
  io::write_roc_svg(path, {{"perfect", &perfect}}, io::RocScale::log);
  const auto content = slurp(path);
  CHECK(content.find("<svg") != std::string::npos);
  CHECK(content.find("polyline") != std::string::npos);
  CHECK(content.find("1e-4") != std::string::npos);
  CHECK(content.find("perfect") != std::string::npos);
}

TEST_CASE("experiment config parsing with defaults") {
  const std::string text = R"({
    "schema_version": 1,
    "master_seed": 11,
    "dataset": {"kind": "blobs", "num_samples": 64, "num_classes": 2, "dim": 4},
    "num_shadow_models": 4,
    "shadow_train": {"epochs": 3}
  })";
  const auto cfg = io::parse_experiment_config(text);
  CHECK(cfg.master_seed == 11);
  CHECK(cfg.num_shadow_models == 4);
  CHECK(cfg.shadow_train.epochs == 3);
  CHECK(cfg.shadow_train.checkpoint_every == 3);  // defaults to epochs
  CHECK(cfg.target_train.epochs == 3);            // defaults to shadow_train
  CHECK(cfg.criterion == attacks::Criterion::logit_confidence);
  CHECK(cfg.attack.attacks == std::vector<harness::AttackKind>{harness::AttackKind::lira_online});
  CHECK(cfg.attack.alphas == std::vector<double>{0.001, 0.01, 0.1});
}

TEST_CASE("experiment config parsing: full surface") {
  const std::string text = R"({
    "schema_version": 1,
    "master_seed": 3,
    "threads": 2,
    "dataset": {"kind": "blobs", "num_samples": 128, "num_classes": 4, "dim": 8,
                "class_sep": 0.5, "noise": 1.0, "label_noise": 0.1, "grid": [2, 4]},
    "num_shadow_models": 8,
    "target_model_ids": [0, 1],
    "criterion": "confidence",
    "retain_probs": false,
    "shadow_train": {"model": "mlp", "hidden_width": 16, "epochs": 10, "batch_size": 16,
                     "learning_rate": 0.05, "weight_decay": 0.001, "checkpoint_every": 5,
                     "augmentation": [{"kind": "mirror", "p": 0.5},
                                      {"kind": "shift", "max_offset": 2},
                                      {"kind": "cutout", "window": 3},
                                      {"kind": "gaussian_noise", "sigma": 0.4},
                                      {"kind": "random_choice",
                                       "children": [{"kind": "mirror"}]}],
                     "early_stop": {"patience": 2, "holdout_fraction": 0.2}},
    "attack": {"attacks": ["lira-online", "nn", "mentr"], "alphas": [0.01],
               "recalls": [0.25, 0.5], "lira": {"floor": 0.01, "variance": "global"},
               "nn_train": {"epochs": 5}, "fixed_fpr_decisions": true,
               "per_class_thresholds": true},
    "sweep_policies": [{"name": "none", "policy": []},
                       {"name": "mirror", "policy": [{"kind": "mirror"}]}],
    "scatter": {"epochs": [2, 4], "weight_decay": [0.0], "policies": [{"name": "none",
                "policy": []}], "replication": 3}
  })";
  const auto cfg = io::parse_experiment_config(text);
  CHECK(cfg.dataset.blobs.grid->rows == 2);
  CHECK(cfg.shadow_train.model == trainkit::ModelKind::mlp);
  CHECK(cfg.shadow_train.augmentation.size() == 5);
  CHECK(cfg.shadow_train.early_stop->patience == 2);
  CHECK(cfg.attack.attacks.size() == 3);
  CHECK(cfg.attack.lira.variance == attacks::VarianceMode::Kind::global);
  CHECK(cfg.attack.fixed_fpr_decisions);
  CHECK(cfg.sweep_policies.size() == 2);
  CHECK(cfg.scatter.replication == 3);
  CHECK(cfg.scatter.epochs_values == std::vector<std::size_t>{2, 4});
}

TEST_CASE("experiment config parsing: failure modes") {
  CHECK_THROWS_AS(io::parse_experiment_config("not json"), ConfigError);
  CHECK_THROWS_AS(io::parse_experiment_config("{}"), ConfigError);  // missing schema_version
  CHECK_THROWS_AS(io::parse_experiment_config(R"({"schema_version": 2})"), SchemaVersionError);
  CHECK_THROWS_AS(io::parse_experiment_config(R"({
    "schema_version": 1, "typo_key": 1,
    "dataset": {"kind": "blobs", "num_samples": 8, "num_classes": 2, "dim": 2},
    "shadow_train": {"epochs": 1}})"),
                  ConfigError);
  CHECK_THROWS_AS(io::parse_experiment_config(R"({
    "schema_version": 1,
    "dataset": {"kind": "blobs", "num_samples": 8, "num_classes": 2, "dim": 2},
    "shadow_train": {"epochs": 1},
    "attack": {"attacks": ["bogus"]}})"),
                  ValidationError);
}

TEST_CASE("loaded config hashes the raw bytes and honors MIAKIT_SEED") {
  TempDir tmp;
  const std::string text = R"({
    "schema_version": 1,
    "master_seed": 5,
    "dataset": {"kind": "blobs", "num_samples": 16, "num_classes": 2, "dim": 2},
    "num_shadow_models": 2,
    "shadow_train": {"epochs": 1},
    "attack": {"attacks": ["confidence"]}
  })";
  const auto path = tmp.file("config.json");
  io::atomic_write_file(path, text);
  const auto loaded = io::load_experiment_config(path);
  CHECK(loaded.config.master_seed == 5);
  CHECK(loaded.hash_hex == io::fnv1a_hex(text));
  CHECK(loaded.raw == text);

  setenv(io::kSeedEnvVar, "99", 1);
  const auto overridden = io::load_experiment_config(path);
  CHECK(overridden.config.master_seed == 99);
  setenv(io::kSeedEnvVar, "not-a-number", 1);
  CHECK_THROWS_AS(io::load_experiment_config(path), ConfigError);
  unsetenv(io::kSeedEnvVar);
}

TEST_CASE("model file round trip") {
  TempDir tmp;
  SeededRng rng(4);
  trainkit::TrainResult result;
  result.model = trainkit::ModelParams::init(trainkit::ModelKind::mlp, 3, 2, 4, rng);
  trainkit::Checkpoint ckpt;
  ckpt.step = 7;
  ckpt.params = result.model;
  ckpt.train_accuracy = 0.75;
  ckpt.holdout_accuracy = 0.5;
  ckpt.mean_train_loss = 0.31;
  ckpt.is_best = true;
  result.checkpoints.push_back(ckpt);

  const auto path = tmp.file("model.json");
  io::write_model_file(path, result);
  const auto loaded = io::read_model_file(path);
  CHECK(loaded.model.kind == trainkit::ModelKind::mlp);
  CHECK(loaded.model.w1 == result.model.w1);
  CHECK(loaded.model.b2 == result.model.b2);
  REQUIRE(loaded.checkpoints.size() == 1);
  CHECK(loaded.checkpoints[0].step == 7);
  CHECK(loaded.checkpoints[0].holdout_accuracy == 0.5);
  CHECK(loaded.checkpoints[0].is_best);
  CHECK(loaded.checkpoints[0].params.w2 == result.model.w2);
}

TEST_CASE("report bundle writes report, config, and roc tables") {
  TempDir tmp;
  io::ReportBundle bundle;
  bundle.config_hash = "deadbeef";
  bundle.config_raw = "{}";
  bundle.master_seed = 42;
  bundle.timestamp = "2020-01-01T00:00:00Z";
  io::TargetReport target;
  target.target_id = 3;
  harness::AttackOutcome outcome;
  outcome.report.attack = "confidence";
  outcome.report.auc = 0.75;
  outcome.report.balanced_accuracy = 0.7;
  outcome.report.tpr_at[0.01] = 0.2;
  outcome.curve.points = {{0.0, 0.0, 1.0}, {1.0, 1.0, 0.0}};
  outcome.fixed_fpr[0.01] = {0.5, 0.25, 0.01};
  target.outcomes.push_back(outcome);
  target.gap = metrics::gap_report(0.9, 0.7, 0.1, 0.5);
  bundle.targets.push_back(target);

  const auto dir = tmp.file("bundle");
  io::write_report_bundle(dir, bundle);
  CHECK(fs::exists(fs::path(dir) / "report.json"));
  CHECK(fs::exists(fs::path(dir) / "config.json"));
  CHECK(fs::exists(fs::path(dir) / "roc_target3_confidence.tsv"));
  const auto report = slurp((fs::path(dir) / "report.json").string());
  CHECK(report.find("deadbeef") != std::string::npos);
  CHECK(report.find("\"master_seed\": 42") != std::string::npos);
  CHECK(report.find("fixed_fpr") != std::string::npos);
  CHECK(report.find("gap_acc") != std::string::npos);
}

TEST_CASE("sweep and scatter csv emission") {
  TempDir tmp;
  harness::SweepRow row;
  row.label = "none";
  row.step = 4;
  row.train_acc = 1.0;
  row.test_acc = 0.7655;
  row.gap_acc = 0.2345;
  row.auc = 0.9;
  row.tpr_at[0.001] = 0.1956;
  const auto sweep_path = tmp.file("sweep.csv");
  io::write_sweep_csv(sweep_path, {row}, {0.001}, true);
  const auto content = slurp(sweep_path);
  CHECK(content.rfind("label,step,train_acc", 0) == 0);
  CHECK(content.find("none,4,1,0.7655,0.2345") != std::string::npos);

  harness::ScatterRecord rec;
  rec.model_id = 2;
  rec.policy_label = "mirror";
  rec.epochs = 8;
  rec.gap_acc = 0.25;
  rec.tpr_at[0.01] = 0.125;
  const auto scatter_path = tmp.file("scatter.csv");
  io::write_scatter_csv(scatter_path, {rec}, {0.01});
  const auto scatter = slurp(scatter_path);
  CHECK(scatter.rfind("model_id,policy,epochs", 0) == 0);
  CHECK(scatter.find("2,mirror,8") != std::string::npos);
}
