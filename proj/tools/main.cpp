// miakit command line: train shadow ensembles, run membership-inference
// attacks over score files, sweep training regimes, and render reports.

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "miakit/cli_io.hpp"
#include "miakit/harness.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Exit codes (also in README): 0 ok, 2 usage, 3 config, 4 schema version,
// 5 data/file format, 6 internal or training failure.
constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitConfig = 3;
constexpr int kExitSchema = 4;
constexpr int kExitData = 5;
constexpr int kExitInternal = 6;

std::uint64_t env_seed_or(std::uint64_t fallback) {
  if (const char* env = std::getenv(miakit::io::kSeedEnvVar)) {
    std::uint64_t seed = 0;
    const std::string value(env);
    const auto res = std::from_chars(value.data(), value.data() + value.size(), seed);
    if (res.ec != std::errc() || res.ptr != value.data() + value.size()) {
      throw miakit::ConfigError(std::string(miakit::io::kSeedEnvVar) +
                                " must be an unsigned integer");
    }
    return seed;
  }
  return fallback;
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw miakit::IoError("cannot open: " + path);
  CsvTable table;
  std::string line;
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
      const auto comma = s.find(',', start);
      if (comma == std::string::npos) {
        out.push_back(s.substr(start));
        break;
      }
      out.push_back(s.substr(start, comma - start));
      start = comma + 1;
    }
    return out;
  };
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (first) {
      table.header = split(line);
      first = false;
    } else {
      table.rows.push_back(split(line));
    }
  }
  return table;
}

bool percent_column(const std::string& name) {
  return name == "train_acc" || name == "test_acc" || name == "gap_acc" ||
         name.rfind("tpr_at_", 0) == 0;
}

std::string render_cell(const std::string& header, const std::string& cell) {
  if (!percent_column(header)) return cell;
  double value = 0.0;
  const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), value);
  if (res.ec != std::errc()) return cell;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", value * 100.0);
  return buf;
}

void print_table(const CsvTable& table, std::ostream& os) {
  std::vector<std::vector<std::string>> cells;
  cells.push_back(table.header);
  for (const auto& row : table.rows) {
    std::vector<std::string> rendered;
    for (std::size_t i = 0; i < row.size(); ++i) {
      rendered.push_back(render_cell(i < table.header.size() ? table.header[i] : "", row[i]));
    }
    cells.push_back(std::move(rendered));
  }
  std::vector<std::size_t> widths;
  for (const auto& row : cells) {
    if (widths.size() < row.size()) widths.resize(row.size(), 0);
    for (std::size_t i = 0; i < row.size(); ++i) widths[i] = std::max(widths[i], row[i].size());
  }
  for (std::size_t r = 0; r < cells.size(); ++r) {
    for (std::size_t i = 0; i < cells[r].size(); ++i) {
      os << cells[r][i] << std::string(widths[i] - cells[r][i].size() + 2, ' ');
    }
    os << '\n';
    if (r == 0) {
      std::size_t total = 0;
      for (auto w : widths) total += w + 2;
      os << std::string(total, '-') << '\n';
    }
  }
}

json run_metadata(const miakit::io::LoadedConfig& loaded) {
  json meta;
  meta["schema_version"] = miakit::io::kSchemaVersion;
  meta["config_hash"] = loaded.hash_hex;
  meta["master_seed"] = loaded.config.master_seed;
  meta["timestamp"] = miakit::io::current_timestamp();
  return meta;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

int run_train_ensemble(const std::string& config_path, const std::string& out_dir,
                       std::size_t threads) {
  miakit::io::LoadedConfig loaded = miakit::io::load_experiment_config(config_path);
  if (threads > 0) loaded.config.threads = threads;
  const miakit::Dataset dataset =
      miakit::harness::make_dataset(loaded.config.dataset,
                                    miakit::SeededRng(loaded.config.master_seed));
  const auto ensemble = miakit::harness::build_ensemble(loaded.config, dataset);

  fs::create_directories(out_dir);
  miakit::io::write_score_file(ensemble.matrix, (fs::path(out_dir) / "scores.csv").string());
  fs::create_directories(fs::path(out_dir) / "models");
  for (std::size_t m = 0; m < ensemble.models.size(); ++m) {
    char name[32];
    std::snprintf(name, sizeof(name), "model_%04zu.json", m);
    miakit::io::write_model_file((fs::path(out_dir) / "models" / name).string(),
                                 ensemble.models[m]);
  }
  {
    std::string gaps = "model_id,train_acc,test_acc,gap_acc,gap_loss,train_loss,test_loss\n";
    for (std::size_t m = 0; m < ensemble.gaps.size(); ++m) {
      const auto& g = ensemble.gaps[m];
      gaps += std::to_string(m) + ',' + miakit::io::format_double(g.train_acc) + ',' +
              miakit::io::format_double(g.test_acc) + ',' +
              miakit::io::format_double(g.gap_acc) + ',' +
              miakit::io::format_double(g.gap_loss) + ',' +
              miakit::io::format_double(g.train_loss) + ',' +
              miakit::io::format_double(g.test_loss) + '\n';
    }
    miakit::io::atomic_write_file((fs::path(out_dir) / "gaps.csv").string(), gaps);
  }
  json meta = run_metadata(loaded);
  meta["num_models"] = ensemble.matrix.num_models;
  meta["num_samples"] = ensemble.matrix.num_samples;
  meta["uncovered_samples"] = ensemble.uncovered;
  miakit::io::atomic_write_file((fs::path(out_dir) / "run.json").string(), meta.dump(2) + "\n");

  if (!ensemble.uncovered.empty()) {
    std::cerr << "warning: " << ensemble.uncovered.size()
              << " sample(s) lack an IN or OUT model; online attacks will fail\n";
  }
  std::cout << "trained " << ensemble.matrix.num_models << " models over "
            << ensemble.matrix.num_samples << " samples -> " << out_dir << "\n";
  return kExitOk;
}

int run_attack(const std::string& scores_path, std::size_t target,
               const std::vector<std::string>& attack_names, const std::vector<double>& alphas,
               const std::vector<double>& recalls, const std::string& out_dir, double floor,
               const std::string& variance, bool fixed_fpr, bool per_class,
               std::uint64_t seed) {
  const auto matrix = miakit::io::read_score_file(scores_path);

  miakit::harness::AttackSettings settings;
  settings.attacks.clear();
  for (const auto& name : attack_names) {
    settings.attacks.push_back(miakit::harness::attack_from_name(name));
  }
  if (!alphas.empty()) settings.alphas = alphas;
  if (!recalls.empty()) settings.recalls = recalls;
  settings.lira.floor = floor;
  if (variance == "global") {
    settings.lira.variance = miakit::attacks::VarianceMode::Kind::global;
  } else if (variance != "per_sample") {
    throw miakit::ConfigError("--variance must be per_sample or global");
  }
  settings.fixed_fpr_decisions = fixed_fpr;
  settings.per_class_thresholds = per_class;
  seed = env_seed_or(seed);

  const auto outcomes = miakit::harness::attack_target(matrix, target, settings,
                                                       miakit::SeededRng(seed, target));

  json args;
  args["subcommand"] = "attack";
  args["scores"] = scores_path;
  args["target"] = target;
  args["attacks"] = attack_names;
  args["alphas"] = settings.alphas;
  args["recalls"] = settings.recalls;
  args["lira_floor"] = floor;
  args["variance"] = variance;
  args["fixed_fpr"] = fixed_fpr;
  args["per_class"] = per_class;
  args["seed"] = seed;
  const std::string raw = args.dump(2) + "\n";

  miakit::io::ReportBundle bundle;
  bundle.config_hash = miakit::io::fnv1a_hex(raw);
  bundle.config_raw = raw;
  bundle.master_seed = seed;
  bundle.timestamp = miakit::io::current_timestamp();
  bundle.targets.push_back({target, outcomes, std::nullopt});
  miakit::io::write_report_bundle(out_dir, bundle);

  for (const auto& outcome : outcomes) {
    std::cout << outcome.report.attack << ": auc=" << outcome.report.auc;
    for (const auto& [alpha, tpr] : outcome.report.tpr_at) {
      std::cout << " tpr@" << alpha << "=" << tpr;
    }
    std::cout << '\n';
  }
  std::cout << "report -> " << out_dir << "\n";
  return kExitOk;
}

int run_sweep(const std::string& config_path, const std::string& axis, const std::string& out_dir,
              std::size_t threads) {
  miakit::io::LoadedConfig loaded = miakit::io::load_experiment_config(config_path);
  if (threads > 0) loaded.config.threads = threads;
  const auto& config = loaded.config;
  const miakit::Dataset dataset =
      miakit::harness::make_dataset(config.dataset, miakit::SeededRng(config.master_seed));
  fs::create_directories(out_dir);
  json meta = run_metadata(loaded);
  meta["axis"] = axis;

  if (axis == "augmentation") {
    if (config.sweep_policies.empty()) {
      throw miakit::ConfigError("augmentation sweep needs 'sweep_policies' in the config");
    }
    const auto rows = miakit::harness::sweep_augmentation(config, dataset, config.sweep_policies);
    miakit::io::write_sweep_csv((fs::path(out_dir) / "sweep_augmentation.csv").string(), rows,
                                config.attack.alphas, false);
  } else if (axis == "early-stop") {
    const auto rows = miakit::harness::sweep_early_stopping(config, dataset);
    miakit::io::write_sweep_csv((fs::path(out_dir) / "sweep_early_stop.csv").string(), rows,
                                config.attack.alphas, true);
  } else if (axis == "knowledge") {
    const auto result = miakit::harness::attacker_knowledge_experiment(config, dataset);
    std::string csv = "scenario,auc";
    for (double alpha : config.attack.alphas) {
      csv += ",tpr_at_" + miakit::io::format_double(alpha);
    }
    csv += '\n';
    auto add_row = [&](const char* name, const miakit::harness::AttackOutcome& outcome) {
      csv += std::string(name) + ',' + miakit::io::format_double(outcome.report.auc);
      for (double alpha : config.attack.alphas) {
        csv += ',' + miakit::io::format_double(outcome.report.tpr_at.at(alpha));
      }
      csv += '\n';
    };
    add_row("matched_shadows", result.matched);
    add_row("conventional_shadows", result.conventional);
    miakit::io::atomic_write_file((fs::path(out_dir) / "knowledge.csv").string(), csv);
    miakit::io::emit_roc_export(result.matched.curve,
                                (fs::path(out_dir) / "roc_matched.tsv").string());
    miakit::io::emit_roc_export(result.conventional.curve,
                                (fs::path(out_dir) / "roc_conventional.tsv").string());
    miakit::io::write_roc_svg(
        (fs::path(out_dir) / "knowledge_roc.svg").string(),
        {{"matched shadows", &result.matched.curve},
         {"conventional shadows", &result.conventional.curve}},
        miakit::io::RocScale::log);
    meta["target_gap_acc"] = result.target_gap.gap_acc;
  } else if (axis == "scatter") {
    const auto records = miakit::harness::generalization_scatter(config, dataset);
    miakit::io::write_scatter_csv((fs::path(out_dir) / "scatter.csv").string(), records,
                                  config.attack.alphas);
    json spearman = json::object();
    for (double alpha : config.attack.alphas) {
      std::vector<double> tpr, gap_acc, gap_loss, test_acc;
      for (const auto& rec : records) {
        tpr.push_back(rec.tpr_at.at(alpha));
        gap_acc.push_back(rec.gap_acc);
        gap_loss.push_back(rec.gap_loss);
        test_acc.push_back(rec.test_acc);
      }
      auto entry = json::object();
      auto put = [&](const char* key, const std::optional<double>& rho) {
        if (rho) {
          entry[key] = *rho;
        } else {
          entry[key] = "undefined (zero variance)";
        }
      };
      put("gap_acc", miakit::harness::spearman(gap_acc, tpr));
      put("gap_loss", miakit::harness::spearman(gap_loss, tpr));
      put("test_acc", miakit::harness::spearman(test_acc, tpr));
      spearman[miakit::io::format_double(alpha)] = entry;
    }
    meta["spearman_vs_tpr"] = spearman;
    meta["num_records"] = records.size();
  } else {
    throw miakit::ConfigError("--axis must be augmentation, early-stop, scatter, or knowledge");
  }
  miakit::io::atomic_write_file((fs::path(out_dir) / "run.json").string(), meta.dump(2) + "\n");
  std::cout << axis << " sweep -> " << out_dir << "\n";
  return kExitOk;
}

int run_report(const std::string& in_dir, const std::string& format) {
  if (format != "csv" && format != "table" && format != "svg") {
    throw miakit::ConfigError("--format must be csv, table, or svg");
  }
  bool found = false;

  for (const char* name : {"sweep_augmentation.csv", "sweep_early_stop.csv", "scatter.csv",
                           "knowledge.csv", "gaps.csv"}) {
    const fs::path path = fs::path(in_dir) / name;
    if (!fs::exists(path)) continue;
    found = true;
    if (format == "csv") {
      std::ifstream in(path);
      std::cout << "# " << name << "\n" << in.rdbuf() << "\n";
    } else if (format == "table") {
      std::cout << name << "\n";
      print_table(read_csv(path.string()), std::cout);
      std::cout << "\n";
    }
  }

  const fs::path report_path = fs::path(in_dir) / "report.json";
  if (fs::exists(report_path)) {
    found = true;
    std::ifstream in(report_path);
    json root;
    in >> root;
    CsvTable table;
    table.header = {"target", "attack", "auc", "balanced_accuracy"};
    std::vector<std::string> alpha_keys;
    for (const auto& target : root.at("targets")) {
      for (const auto& attack : target.at("attacks")) {
        if (alpha_keys.empty()) {
          for (const auto& [key, value] : attack.at("tpr_at").items()) {
            alpha_keys.push_back(key);
            table.header.push_back("tpr_at_" + key);
          }
        }
        std::vector<std::string> row = {target.at("target_id").dump(),
                                        attack.at("attack").get<std::string>(),
                                        miakit::io::format_double(attack.at("auc").get<double>()),
                                        miakit::io::format_double(
                                            attack.at("balanced_accuracy").get<double>())};
        for (const auto& key : alpha_keys) {
          row.push_back(miakit::io::format_double(attack.at("tpr_at").at(key).get<double>()));
        }
        table.rows.push_back(std::move(row));
      }
    }
    if (format == "table") {
      std::cout << "report.json\n";
      print_table(table, std::cout);
    } else if (format == "csv") {
      std::cout << "# report.json\n";
      for (std::size_t i = 0; i < table.header.size(); ++i) {
        std::cout << (i ? "," : "") << table.header[i];
      }
      std::cout << "\n";
      for (const auto& row : table.rows) {
        for (std::size_t i = 0; i < row.size(); ++i) std::cout << (i ? "," : "") << row[i];
        std::cout << "\n";
      }
    }
  }

  if (format == "svg") {
    for (const auto& entry : fs::directory_iterator(in_dir)) {
      const auto name = entry.path().filename().string();
      if (name.rfind("roc_", 0) == 0 && entry.path().extension() == ".tsv") {
        found = true;
        std::ifstream in(entry.path());
        std::string line;
        std::getline(in, line);  // header
        miakit::metrics::RocCurve curve;
        while (std::getline(in, line)) {
          std::istringstream fields(line);
          std::string fpr, tpr, tau;
          if (!(fields >> fpr >> tpr >> tau)) continue;
          // stod accepts the "-inf" threshold on the final point.
          curve.points.push_back({std::stod(fpr), std::stod(tpr), std::stod(tau)});
        }
        const auto svg_path = entry.path().parent_path() / (entry.path().stem().string() + ".svg");
        miakit::io::write_roc_svg(svg_path.string(),
                                  {{entry.path().stem().string(), &curve}},
                                  miakit::io::RocScale::log);
        std::cout << "wrote " << svg_path.string() << "\n";
      }
    }
    const fs::path scatter_path = fs::path(in_dir) / "scatter.csv";
    if (fs::exists(scatter_path)) {
      found = true;
      const auto table = read_csv(scatter_path.string());
      auto column = [&](const std::string& name) {
        const auto it = std::find(table.header.begin(), table.header.end(), name);
        if (it == table.header.end()) {
          throw miakit::IoError("scatter.csv: missing column " + name);
        }
        return static_cast<std::size_t>(it - table.header.begin());
      };
      std::size_t tpr_col = table.header.size();
      for (std::size_t i = 0; i < table.header.size(); ++i) {
        if (table.header[i].rfind("tpr_at_", 0) == 0) tpr_col = i;  // last alpha column
      }
      if (tpr_col == table.header.size()) {
        throw miakit::IoError("scatter.csv: no tpr_at_ column");
      }
      for (const char* x_name : {"gap_acc", "test_acc", "gap_loss"}) {
        std::vector<miakit::io::ScatterPoint> points;
        const std::size_t xc = column(x_name);
        for (const auto& row : table.rows) {
          points.push_back({std::stod(row[xc]), std::stod(row[tpr_col])});
        }
        const auto svg_path = fs::path(in_dir) / ("scatter_" + std::string(x_name) + ".svg");
        miakit::io::write_scatter_svg(svg_path.string(), points, x_name,
                                      table.header[tpr_col], true);
        std::cout << "wrote " << svg_path.string() << "\n";
      }
    }
  }

  if (!found) {
    throw miakit::IoError("no report artifacts found in " + in_dir);
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"membership-inference auditing toolkit"};
  app.require_subcommand(1);

  std::string config_path, out_dir, scores_path, in_dir;
  std::string axis, format = "table", variance = "per_sample";
  std::size_t target = 0, threads = 0;
  std::uint64_t seed = 0;
  double floor = 1e-3;
  bool fixed_fpr = false, per_class = false;
  std::vector<std::string> attack_names = {"lira-online"};
  std::vector<double> alphas, recalls;

  auto* train_cmd = app.add_subcommand("train-ensemble", "train a shadow ensemble");
  train_cmd->add_option("--config", config_path, "experiment config (JSON)")->required();
  train_cmd->add_option("--out", out_dir, "output directory")->required();
  train_cmd->add_option("--threads", threads, "worker threads (0 = hardware)");

  auto* attack_cmd = app.add_subcommand("attack", "attack one matrix row");
  attack_cmd->add_option("--scores", scores_path, "score file")->required();
  attack_cmd->add_option("--target", target, "target model id")->required();
  attack_cmd->add_option("--attacks", attack_names, "attack list")->delimiter(',');
  attack_cmd->add_option("--alphas", alphas, "FPR levels for TPR reporting")->delimiter(',');
  attack_cmd->add_option("--recalls", recalls, "recall levels for precision")->delimiter(',');
  attack_cmd->add_option("--out", out_dir, "output directory")->required();
  attack_cmd->add_option("--floor", floor, "lira variance floor");
  attack_cmd->add_option("--variance", variance, "per_sample or global");
  attack_cmd->add_flag("--fixed-fpr", fixed_fpr, "shadow-selected decision thresholds");
  attack_cmd->add_flag("--per-class", per_class, "per-class decision thresholds");
  attack_cmd->add_option("--seed", seed, "rng seed for the nn attack");

  auto* sweep_cmd = app.add_subcommand("sweep", "run an experiment sweep");
  sweep_cmd->add_option("--config", config_path, "experiment config (JSON)")->required();
  sweep_cmd->add_option("--axis", axis, "augmentation | early-stop | scatter | knowledge")
      ->required();
  sweep_cmd->add_option("--out", out_dir, "output directory")->required();
  sweep_cmd->add_option("--threads", threads, "worker threads (0 = hardware)");

  auto* report_cmd = app.add_subcommand("report", "render run artifacts");
  report_cmd->add_option("--in", in_dir, "run directory")->required();
  report_cmd->add_option("--format", format, "csv | table | svg");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (train_cmd->parsed()) return run_train_ensemble(config_path, out_dir, threads);
    if (attack_cmd->parsed()) {
      return run_attack(scores_path, target, attack_names, alphas, recalls, out_dir, floor,
                        variance, fixed_fpr, per_class, seed);
    }
    if (sweep_cmd->parsed()) return run_sweep(config_path, axis, out_dir, threads);
    if (report_cmd->parsed()) return run_report(in_dir, format);
  } catch (const miakit::SchemaVersionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitSchema;
  } catch (const miakit::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const miakit::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const miakit::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInternal;
  }
  return kExitUsage;
}
