#include "miakit/cli_io.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

namespace miakit::io {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Formatting and hashing
// ---------------------------------------------------------------------------

std::string format_double(double v) {
  std::array<char, 64> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    hash ^= c;
    hash *= 0x100000001b3ULL;
  }
  std::array<char, 17> buf{};
  static const char* digits = "0123456789abcdef";
  for (int i = 15; i >= 0; --i) {
    buf[static_cast<std::size_t>(i)] = digits[hash & 0xF];
    hash >>= 4;
  }
  return std::string(buf.data(), 16);
}

void atomic_write_file(const std::string& path, const std::string& content) {
  const fs::path target(path);
  if (target.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(target.parent_path(), ec);
  }
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw IoError("cannot open for writing: " + tmp.string());
    }
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) {
      throw IoError("short write: " + tmp.string());
    }
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    throw IoError("cannot rename " + tmp.string() + " -> " + target.string() + ": " +
                  ec.message());
  }
}

namespace {

double parse_double_field(std::string_view token, const std::string& context) {
  double value = 0.0;
  const char* begin = token.data();
  const char* end = token.data() + token.size();
  auto res = std::from_chars(begin, end, value);
  if (res.ec != std::errc() || res.ptr != end) {
    throw IoError(context + ": cannot parse number '" + std::string(token) + "'");
  }
  return value;
}

std::int64_t parse_int_field(std::string_view token, const std::string& context) {
  std::int64_t value = 0;
  auto res = std::from_chars(token.data(), token.data() + token.size(), value);
  if (res.ec != std::errc() || res.ptr != token.data() + token.size()) {
    throw IoError(context + ": cannot parse integer '" + std::string(token) + "'");
  }
  return value;
}

std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  return fields;
}

}  // namespace

// ---------------------------------------------------------------------------
// Score files
// ---------------------------------------------------------------------------

void write_score_file(const attacks::ScoreMatrix& matrix, const std::string& path) {
  matrix.validate();
  const bool with_labels = matrix.has_labels();
  const bool with_probs = matrix.has_probs();
  std::string out;
  out.reserve(matrix.num_models * matrix.num_samples * 24);

  out += "model_id,sample_id,member,score";
  if (with_labels) out += ",label";
  if (with_probs) {
    for (std::size_t c = 0; c < matrix.num_classes; ++c) {
      out += ",prob_" + std::to_string(c);
    }
  }
  out += "\n# version=" + std::to_string(kSchemaVersion) +
         " criterion=" + attacks::criterion_name(matrix.criterion) + "\n";

  for (std::size_t m = 0; m < matrix.num_models; ++m) {
    for (std::size_t j = 0; j < matrix.num_samples; ++j) {
      out += std::to_string(m);
      out += ',';
      out += std::to_string(j);
      out += ',';
      out += matrix.masks[m][j] ? '1' : '0';
      out += ',';
      out += format_double(matrix.score(m, j));
      if (with_labels) {
        out += ',';
        out += std::to_string(matrix.labels[j]);
      }
      if (with_probs) {
        const auto p = matrix.prob(m, j);
        for (double v : p) {
          out += ',';
          out += format_double(v);
        }
      }
      out += '\n';
    }
  }
  atomic_write_file(path, out);
}

attacks::ScoreMatrix read_score_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw IoError("cannot open score file: " + path);
  }

  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) {
    throw IoError(path + ": empty file");
  }
  ++line_no;

  const auto header = split_csv(line);
  static const std::array<const char*, 4> required = {"model_id", "sample_id", "member", "score"};
  if (header.size() < required.size()) {
    throw IoError(path + ":1: header needs at least model_id,sample_id,member,score");
  }
  for (std::size_t i = 0; i < required.size(); ++i) {
    if (header[i] != required[i]) {
      throw IoError(path + ":1: expected header column '" + required[i] + "', found '" +
                    std::string(header[i]) + "'");
    }
  }
  bool with_labels = false;
  std::size_t num_classes = 0;
  std::size_t next = required.size();
  if (next < header.size() && header[next] == "label") {
    with_labels = true;
    ++next;
  }
  while (next < header.size()) {
    const std::string expect = "prob_" + std::to_string(num_classes);
    if (header[next] != expect) {
      throw IoError(path + ":1: unexpected header column '" + std::string(header[next]) + "'");
    }
    ++num_classes;
    ++next;
  }

  struct Record {
    std::int64_t model = 0;
    std::int64_t sample = 0;
    bool member = false;
    double score = 0.0;
    int label = 0;
    std::vector<double> probs;
  };
  std::vector<Record> records;
  std::map<std::pair<std::int64_t, std::int64_t>, std::size_t> seen;
  attacks::Criterion criterion = attacks::Criterion::external;

  std::int64_t max_model = -1;
  std::int64_t max_sample = -1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream meta(line.substr(1));
      std::string token;
      while (meta >> token) {
        const auto eq = token.find('=');
        if (eq == std::string::npos) continue;
        const auto key = token.substr(0, eq);
        const auto value = token.substr(eq + 1);
        if (key == "version") {
          if (value != std::to_string(kSchemaVersion)) {
            throw SchemaVersionError(path + ":" + std::to_string(line_no) +
                                     ": unsupported score file version " + value);
          }
        } else if (key == "criterion") {
          criterion = attacks::criterion_from_name(value);
        }
      }
      continue;
    }
    const std::string context = path + ":" + std::to_string(line_no);
    const auto fields = split_csv(line);
    const std::size_t expected =
        required.size() + (with_labels ? 1 : 0) + num_classes;
    if (fields.size() != expected) {
      throw IoError(context + ": expected " + std::to_string(expected) + " fields, found " +
                    std::to_string(fields.size()));
    }
    Record rec;
    rec.model = parse_int_field(fields[0], context);
    rec.sample = parse_int_field(fields[1], context);
    if (rec.model < 0 || rec.sample < 0) {
      throw IoError(context + ": negative model or sample id");
    }
    if (fields[2] == "1") {
      rec.member = true;
    } else if (fields[2] == "0") {
      rec.member = false;
    } else {
      throw IoError(context + ": member must be 0 or 1");
    }
    rec.score = parse_double_field(fields[3], context);
    if (!std::isfinite(rec.score)) {
      throw IoError(context + ": non-finite score");
    }
    std::size_t f = 4;
    if (with_labels) {
      rec.label = static_cast<int>(parse_int_field(fields[f++], context));
    }
    rec.probs.reserve(num_classes);
    for (std::size_t c = 0; c < num_classes; ++c) {
      const double p = parse_double_field(fields[f++], context);
      if (!std::isfinite(p)) {
        throw IoError(context + ": non-finite probability");
      }
      rec.probs.push_back(p);
    }
    const auto key = std::make_pair(rec.model, rec.sample);
    const auto [it, inserted] = seen.emplace(key, line_no);
    if (!inserted) {
      throw IoError(context + ": duplicate (model_id, sample_id) pair (" +
                    std::to_string(rec.model) + "," + std::to_string(rec.sample) +
                    "), first seen at line " + std::to_string(it->second));
    }
    max_model = std::max(max_model, rec.model);
    max_sample = std::max(max_sample, rec.sample);
    records.push_back(std::move(rec));
  }

  if (records.empty()) {
    throw IoError(path + ": no records");
  }
  const auto num_models = static_cast<std::size_t>(max_model) + 1;
  const auto num_samples = static_cast<std::size_t>(max_sample) + 1;
  if (records.size() != num_models * num_samples) {
    throw IoError(path + ": incomplete matrix: " + std::to_string(records.size()) +
                  " records for " + std::to_string(num_models) + " x " +
                  std::to_string(num_samples) + " cells");
  }

  auto matrix = attacks::ScoreMatrix::create(num_models, num_samples, criterion);
  if (with_labels) matrix.labels.assign(num_samples, -1);
  if (num_classes > 0) {
    matrix.num_classes = num_classes;
    matrix.probs.assign(num_models * num_samples * num_classes, 0.0);
  }
  std::vector<std::vector<bool>> bits(num_models, std::vector<bool>(num_samples, false));
  for (const auto& rec : records) {
    const auto m = static_cast<std::size_t>(rec.model);
    const auto j = static_cast<std::size_t>(rec.sample);
    matrix.score(m, j) = rec.score;
    bits[m][j] = rec.member;
    if (with_labels) {
      if (matrix.labels[j] >= 0 && matrix.labels[j] != rec.label) {
        throw IoError(path + ": sample " + std::to_string(j) +
                      " has inconsistent labels across models");
      }
      matrix.labels[j] = rec.label;
    }
    if (num_classes > 0) {
      std::copy(rec.probs.begin(), rec.probs.end(),
                matrix.probs.begin() + static_cast<std::ptrdiff_t>((m * num_samples + j) *
                                                                   num_classes));
    }
  }
  matrix.masks.reserve(num_models);
  for (auto& b : bits) matrix.masks.emplace_back(std::move(b));
  matrix.validate();
  return matrix;
}

// ---------------------------------------------------------------------------
// ROC exports
// ---------------------------------------------------------------------------

void emit_roc_export(const metrics::RocCurve& curve, const std::string& path) {
  std::string out = "fpr\ttpr\tthreshold\n";
  for (const auto& p : curve.points) {
    out += format_double(p.fpr);
    out += '\t';
    out += format_double(p.tpr);
    out += '\t';
    out += format_double(p.threshold);
    out += '\n';
  }
  atomic_write_file(path, out);
}

namespace {

constexpr double kLogFloor = 1e-4;  // axis floor; fpr = 0 points draw here

struct SvgMapper {
  RocScale scale;
  double x0, y0, width, height;  // plot box in svg coordinates

  double map_x(double fpr) const { return x0 + unit(fpr) * width; }
  double map_y(double tpr) const { return y0 + height - unit(tpr) * height; }

  double unit(double v) const {
    if (scale == RocScale::log) {
      const double clamped = std::max(v, kLogFloor);
      return (std::log10(clamped) - std::log10(kLogFloor)) / -std::log10(kLogFloor);
    }
    return std::clamp(v, 0.0, 1.0);
  }
};

const char* kCurveColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                              "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};

}  // namespace

void write_roc_svg(const std::string& path,
                   const std::vector<std::pair<std::string, const metrics::RocCurve*>>& curves,
                   RocScale scale) {
  if (curves.empty()) {
    throw ValidationError(ValidationCode::empty, "no curves to plot");
  }
  const double W = 640, H = 520;
  const SvgMapper m{scale, 70, 30, W - 100, H - 110};

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
  svg << "<rect x=\"" << m.x0 << "\" y=\"" << m.y0 << "\" width=\"" << m.width << "\" height=\""
      << m.height << "\" fill=\"white\" stroke=\"black\"/>\n";

  // ticks
  auto tick_label = [&](double v) {
    std::ostringstream os;
    if (scale == RocScale::log) {
      os << "1e" << static_cast<int>(std::round(std::log10(v)));
    } else {
      os << v;
    }
    return os.str();
  };
  std::vector<double> ticks;
  if (scale == RocScale::log) {
    for (double v = kLogFloor; v <= 1.0 + 1e-12; v *= 10.0) ticks.push_back(v);
  } else {
    for (double v = 0.0; v <= 1.0 + 1e-12; v += 0.25) ticks.push_back(v);
  }
  for (double v : ticks) {
    const double x = m.map_x(v);
    const double y = m.map_y(v);
    svg << "<line x1=\"" << x << "\" y1=\"" << m.y0 + m.height << "\" x2=\"" << x << "\" y2=\""
        << m.y0 + m.height + 5 << "\" stroke=\"black\"/>\n";
    svg << "<text x=\"" << x << "\" y=\"" << m.y0 + m.height + 18
        << "\" font-size=\"11\" text-anchor=\"middle\">" << tick_label(v) << "</text>\n";
    svg << "<line x1=\"" << m.x0 - 5 << "\" y1=\"" << y << "\" x2=\"" << m.x0 << "\" y2=\"" << y
        << "\" stroke=\"black\"/>\n";
    svg << "<text x=\"" << m.x0 - 8 << "\" y=\"" << y + 4
        << "\" font-size=\"11\" text-anchor=\"end\">" << tick_label(v) << "</text>\n";
  }
  svg << "<text x=\"" << m.x0 + m.width / 2 << "\" y=\"" << H - 45
      << "\" font-size=\"13\" text-anchor=\"middle\">false positive rate</text>\n";
  svg << "<text x=\"18\" y=\"" << m.y0 + m.height / 2
      << "\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
      << m.y0 + m.height / 2 << ")\">true positive rate</text>\n";

  // chance diagonal
  svg << "<line x1=\"" << m.map_x(scale == RocScale::log ? kLogFloor : 0.0) << "\" y1=\""
      << m.map_y(scale == RocScale::log ? kLogFloor : 0.0) << "\" x2=\"" << m.map_x(1.0)
      << "\" y2=\"" << m.map_y(1.0) << "\" stroke=\"#aaaaaa\" stroke-dasharray=\"5,4\"/>\n";

  std::size_t color = 0;
  double legend_y = m.y0 + 14;
  for (const auto& [name, curve] : curves) {
    const char* stroke = kCurveColors[color % (sizeof(kCurveColors) / sizeof(char*))];
    ++color;
    svg << "<polyline fill=\"none\" stroke=\"" << stroke << "\" stroke-width=\"1.6\" points=\"";
    for (const auto& p : curve->points) {
      svg << m.map_x(p.fpr) << ',' << m.map_y(p.tpr) << ' ';
    }
    svg << "\"/>\n";
    svg << "<line x1=\"" << m.x0 + 12 << "\" y1=\"" << legend_y << "\" x2=\"" << m.x0 + 34
        << "\" y2=\"" << legend_y << "\" stroke=\"" << stroke << "\" stroke-width=\"2\"/>\n";
    svg << "<text x=\"" << m.x0 + 40 << "\" y=\"" << legend_y + 4 << "\" font-size=\"12\">" << name
        << "</text>\n";
    legend_y += 16;
  }
  svg << "</svg>\n";
  atomic_write_file(path, svg.str());
}

// ---------------------------------------------------------------------------
// Config parsing
// ---------------------------------------------------------------------------

namespace {

[[noreturn]] void config_fail(const std::string& what) { throw ConfigError("config: " + what); }

void check_keys(const json& obj, const std::vector<std::string>& allowed,
                const std::string& where) {
  for (const auto& [key, value] : obj.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      config_fail("unknown key '" + key + "' in " + where);
    }
  }
}

trainkit::Transform parse_transform(const json& obj);

trainkit::AugmentationPolicy parse_policy(const json& arr) {
  if (!arr.is_array()) config_fail("augmentation must be an array of transforms");
  trainkit::AugmentationPolicy policy;
  for (const auto& item : arr) policy.push_back(parse_transform(item));
  return policy;
}

trainkit::Transform parse_transform(const json& obj) {
  if (!obj.is_object() || !obj.contains("kind")) {
    config_fail("transform needs a 'kind'");
  }
  check_keys(obj, {"kind", "p", "max_offset", "window", "sigma", "children"}, "transform");
  trainkit::Transform t;
  const std::string kind = obj.at("kind").get<std::string>();
  if (kind == "mirror") {
    t.kind = trainkit::Transform::Kind::mirror;
  } else if (kind == "shift") {
    t.kind = trainkit::Transform::Kind::shift;
    t.max_offset = obj.at("max_offset").get<std::size_t>();
  } else if (kind == "cutout") {
    t.kind = trainkit::Transform::Kind::cutout;
    t.window = obj.at("window").get<std::size_t>();
  } else if (kind == "gaussian_noise") {
    t.kind = trainkit::Transform::Kind::gaussian_noise;
    t.sigma = obj.at("sigma").get<double>();
  } else if (kind == "random_choice") {
    t.kind = trainkit::Transform::Kind::random_choice;
    t.children = parse_policy(obj.at("children"));
  } else {
    config_fail("unknown transform kind '" + kind + "'");
  }
  t.apply_probability = obj.value("p", 1.0);
  return t;
}

trainkit::TrainConfig parse_train_config(const json& obj, const std::string& where) {
  if (!obj.is_object()) config_fail(where + " must be an object");
  check_keys(obj,
             {"model", "hidden_width", "epochs", "batch_size", "learning_rate", "weight_decay",
              "augmentation", "checkpoint_every", "early_stop"},
             where);
  trainkit::TrainConfig cfg;
  const std::string model = obj.value("model", std::string("linear"));
  if (model == "linear") {
    cfg.model = trainkit::ModelKind::linear;
  } else if (model == "mlp") {
    cfg.model = trainkit::ModelKind::mlp;
  } else {
    config_fail(where + ": unknown model '" + model + "'");
  }
  cfg.hidden_width = obj.value("hidden_width", std::size_t{0});
  if (!obj.contains("epochs")) config_fail(where + ": 'epochs' is required");
  cfg.epochs = obj.at("epochs").get<std::size_t>();
  cfg.batch_size = obj.value("batch_size", std::size_t{32});
  cfg.learning_rate = obj.value("learning_rate", 0.1);
  cfg.weight_decay = obj.value("weight_decay", 0.0);
  cfg.checkpoint_every = obj.value("checkpoint_every", cfg.epochs);
  if (obj.contains("augmentation")) cfg.augmentation = parse_policy(obj.at("augmentation"));
  if (obj.contains("early_stop") && !obj.at("early_stop").is_null()) {
    const auto& es = obj.at("early_stop");
    check_keys(es, {"patience", "holdout_fraction"}, where + ".early_stop");
    trainkit::EarlyStopConfig stop;
    stop.patience = es.value("patience", std::size_t{0});
    stop.holdout_fraction = es.value("holdout_fraction", 0.1);
    cfg.early_stop = stop;
  }
  return cfg;
}

harness::DatasetSpec parse_dataset(const json& obj) {
  if (!obj.is_object()) config_fail("dataset must be an object");
  harness::DatasetSpec spec;
  const std::string kind = obj.value("kind", std::string("blobs"));
  if (kind == "file") {
    check_keys(obj, {"kind", "path"}, "dataset");
    spec.kind = harness::DatasetSpec::Kind::file;
    spec.path = obj.at("path").get<std::string>();
    return spec;
  }
  if (kind != "blobs") config_fail("unknown dataset kind '" + kind + "'");
  check_keys(obj,
             {"kind", "num_samples", "num_classes", "dim", "class_sep", "noise", "label_noise",
              "grid"},
             "dataset");
  spec.kind = harness::DatasetSpec::Kind::blobs;
  spec.blobs.num_samples = obj.at("num_samples").get<std::size_t>();
  spec.blobs.num_classes = obj.at("num_classes").get<std::size_t>();
  spec.blobs.dim = obj.at("dim").get<std::size_t>();
  spec.blobs.class_sep = obj.value("class_sep", 1.0);
  spec.blobs.noise = obj.value("noise", 1.0);
  spec.blobs.label_noise = obj.value("label_noise", 0.0);
  if (obj.contains("grid")) {
    const auto& g = obj.at("grid");
    if (!g.is_array() || g.size() != 2) config_fail("dataset.grid must be [rows, cols]");
    spec.blobs.grid = GridShape{g[0].get<std::size_t>(), g[1].get<std::size_t>()};
  }
  return spec;
}

harness::AttackSettings parse_attack_settings(const json& obj) {
  harness::AttackSettings settings;
  if (obj.is_null()) return settings;
  check_keys(obj,
             {"attacks", "alphas", "recalls", "lira", "nn_train", "fixed_fpr_decisions",
              "per_class_thresholds"},
             "attack");
  if (obj.contains("attacks")) {
    settings.attacks.clear();
    for (const auto& name : obj.at("attacks")) {
      settings.attacks.push_back(harness::attack_from_name(name.get<std::string>()));
    }
  }
  if (obj.contains("alphas")) settings.alphas = obj.at("alphas").get<std::vector<double>>();
  if (obj.contains("recalls")) settings.recalls = obj.at("recalls").get<std::vector<double>>();
  if (obj.contains("lira")) {
    const auto& lira = obj.at("lira");
    check_keys(lira, {"floor", "variance"}, "attack.lira");
    settings.lira.floor = lira.value("floor", 1e-3);
    const std::string variance = lira.value("variance", std::string("per_sample"));
    if (variance == "per_sample") {
      settings.lira.variance = attacks::VarianceMode::Kind::per_sample;
    } else if (variance == "global") {
      settings.lira.variance = attacks::VarianceMode::Kind::global;
    } else {
      config_fail("attack.lira.variance must be per_sample or global");
    }
  }
  if (obj.contains("nn_train")) {
    const auto& nn = obj.at("nn_train");
    check_keys(nn, {"epochs", "batch_size", "learning_rate", "weight_decay"}, "attack.nn_train");
    settings.nn_train.epochs = nn.value("epochs", settings.nn_train.epochs);
    settings.nn_train.batch_size = nn.value("batch_size", settings.nn_train.batch_size);
    settings.nn_train.learning_rate = nn.value("learning_rate", settings.nn_train.learning_rate);
    settings.nn_train.weight_decay = nn.value("weight_decay", settings.nn_train.weight_decay);
  }
  settings.fixed_fpr_decisions = obj.value("fixed_fpr_decisions", false);
  settings.per_class_thresholds = obj.value("per_class_thresholds", false);
  return settings;
}

std::vector<std::pair<std::string, trainkit::AugmentationPolicy>> parse_named_policies(
    const json& arr, const std::string& where) {
  if (!arr.is_array()) config_fail(where + " must be an array");
  std::vector<std::pair<std::string, trainkit::AugmentationPolicy>> out;
  for (const auto& item : arr) {
    check_keys(item, {"name", "policy"}, where + " entry");
    out.emplace_back(item.at("name").get<std::string>(), parse_policy(item.at("policy")));
  }
  return out;
}

}  // namespace

harness::ExperimentConfig parse_experiment_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    config_fail(std::string("not valid JSON: ") + e.what());
  }
  if (!root.is_object()) config_fail("top level must be an object");
  if (!root.contains("schema_version")) config_fail("'schema_version' is required");
  const int version = root.at("schema_version").get<int>();
  if (version != kSchemaVersion) {
    throw SchemaVersionError("config schema_version " + std::to_string(version) +
                             " is not supported (expected " + std::to_string(kSchemaVersion) +
                             ")");
  }
  check_keys(root,
             {"schema_version", "master_seed", "threads", "dataset", "num_shadow_models",
              "target_model_ids", "criterion", "retain_probs", "shadow_train", "target_train",
              "attack", "sweep_policies", "scatter"},
             "top level");

  harness::ExperimentConfig cfg;
  cfg.master_seed = root.value("master_seed", std::uint64_t{0});
  cfg.threads = root.value("threads", std::size_t{0});
  if (!root.contains("dataset")) config_fail("'dataset' is required");
  cfg.dataset = parse_dataset(root.at("dataset"));
  cfg.num_shadow_models = root.value("num_shadow_models", std::size_t{64});
  if (root.contains("target_model_ids")) {
    cfg.target_model_ids = root.at("target_model_ids").get<std::vector<std::size_t>>();
  }
  cfg.criterion = attacks::criterion_from_name(
      root.value("criterion", std::string("logit_confidence")));
  cfg.retain_probs = root.value("retain_probs", true);
  if (!root.contains("shadow_train")) config_fail("'shadow_train' is required");
  cfg.shadow_train = parse_train_config(root.at("shadow_train"), "shadow_train");
  cfg.target_train = root.contains("target_train")
                         ? parse_train_config(root.at("target_train"), "target_train")
                         : cfg.shadow_train;
  if (root.contains("attack")) cfg.attack = parse_attack_settings(root.at("attack"));
  if (root.contains("sweep_policies")) {
    cfg.sweep_policies = parse_named_policies(root.at("sweep_policies"), "sweep_policies");
  }
  if (root.contains("scatter")) {
    const auto& sc = root.at("scatter");
    check_keys(sc, {"epochs", "weight_decay", "policies", "replication"}, "scatter");
    if (sc.contains("epochs")) {
      cfg.scatter.epochs_values = sc.at("epochs").get<std::vector<std::size_t>>();
    }
    if (sc.contains("weight_decay")) {
      cfg.scatter.weight_decay_values = sc.at("weight_decay").get<std::vector<double>>();
    }
    if (sc.contains("policies")) {
      cfg.scatter.policies = parse_named_policies(sc.at("policies"), "scatter.policies");
    }
    cfg.scatter.replication = sc.value("replication", std::size_t{1});
  }
  cfg.validate();
  return cfg;
}

LoadedConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw ConfigError("cannot open config file: " + path);
  }
  std::ostringstream buf;
  buf << in.rdbuf();
  LoadedConfig loaded;
  loaded.raw = buf.str();
  loaded.hash_hex = fnv1a_hex(loaded.raw);
  loaded.config = parse_experiment_config(loaded.raw);
  if (const char* env = std::getenv(kSeedEnvVar)) {
    std::uint64_t seed = 0;
    const std::string value(env);
    const auto res = std::from_chars(value.data(), value.data() + value.size(), seed);
    if (res.ec != std::errc() || res.ptr != value.data() + value.size()) {
      throw ConfigError(std::string(kSeedEnvVar) + " must be an unsigned integer, got '" + value +
                        "'");
    }
    loaded.config.master_seed = seed;
  }
  return loaded;
}

// ---------------------------------------------------------------------------
// Report bundles
// ---------------------------------------------------------------------------

std::string current_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

namespace {

json report_to_json(const metrics::AttackReport& report,
                    const std::map<double, harness::FixedFprDecision>& fixed_fpr) {
  json j;
  j["attack"] = report.attack;
  j["auc"] = report.auc;
  j["balanced_accuracy"] = report.balanced_accuracy;
  json tpr = json::object();
  for (const auto& [alpha, value] : report.tpr_at) tpr[format_double(alpha)] = value;
  j["tpr_at"] = tpr;
  json prec = json::object();
  for (const auto& [recall, value] : report.precision_at_recall) {
    prec[format_double(recall)] = value;
  }
  j["precision_at_recall"] = prec;
  if (!fixed_fpr.empty()) {
    json decisions = json::object();
    for (const auto& [alpha, d] : fixed_fpr) {
      decisions[format_double(alpha)] = {
          {"threshold", d.threshold}, {"tpr", d.tpr}, {"fpr", d.fpr}};
    }
    j["fixed_fpr"] = decisions;
  }
  return j;
}

json gap_to_json(const metrics::GapReport& gap) {
  return {{"gap_acc", gap.gap_acc},     {"gap_loss", gap.gap_loss},
          {"train_acc", gap.train_acc}, {"test_acc", gap.test_acc},
          {"train_loss", gap.train_loss}, {"test_loss", gap.test_loss}};
}

}  // namespace

void write_report_bundle(const std::string& dir, const ReportBundle& bundle) {
  fs::create_directories(dir);
  json root;
  root["schema_version"] = kSchemaVersion;
  root["config_hash"] = bundle.config_hash;
  root["master_seed"] = bundle.master_seed;
  root["timestamp"] = bundle.timestamp;
  json targets = json::array();
  for (const auto& target : bundle.targets) {
    json t;
    t["target_id"] = target.target_id;
    if (target.gap) t["gap"] = gap_to_json(*target.gap);
    json reports = json::array();
    for (const auto& outcome : target.outcomes) {
      reports.push_back(report_to_json(outcome.report, outcome.fixed_fpr));
    }
    t["attacks"] = reports;
    targets.push_back(std::move(t));
  }
  root["targets"] = targets;
  atomic_write_file((fs::path(dir) / "report.json").string(), root.dump(2) + "\n");
  if (!bundle.config_raw.empty()) {
    atomic_write_file((fs::path(dir) / "config.json").string(), bundle.config_raw);
  }
  for (const auto& target : bundle.targets) {
    for (const auto& outcome : target.outcomes) {
      const std::string name =
          "roc_target" + std::to_string(target.target_id) + "_" + outcome.report.attack + ".tsv";
      emit_roc_export(outcome.curve, (fs::path(dir) / name).string());
    }
  }
}

void write_sweep_csv(const std::string& path, const std::vector<harness::SweepRow>& rows,
                     const std::vector<double>& alphas, bool with_step) {
  std::string out = "label";
  if (with_step) out += ",step";
  out += ",train_acc,test_acc,gap_acc,gap_loss,auc";
  for (double alpha : alphas) out += ",tpr_at_" + format_double(alpha);
  out += '\n';
  for (const auto& row : rows) {
    out += row.label;
    if (with_step) out += ',' + std::to_string(row.step);
    out += ',' + format_double(row.train_acc);
    out += ',' + format_double(row.test_acc);
    out += ',' + format_double(row.gap_acc);
    out += ',' + format_double(row.gap_loss);
    out += ',' + format_double(row.auc);
    for (double alpha : alphas) {
      const auto it = row.tpr_at.find(alpha);
      out += ',' + format_double(it != row.tpr_at.end() ? it->second : 0.0);
    }
    out += '\n';
  }
  atomic_write_file(path, out);
}

// ---------------------------------------------------------------------------
// Model files
// ---------------------------------------------------------------------------

namespace {

json params_to_json(const trainkit::ModelParams& params) {
  json j;
  j["kind"] = params.kind == trainkit::ModelKind::mlp ? "mlp" : "linear";
  j["input_dim"] = params.input_dim;
  j["num_classes"] = params.num_classes;
  j["hidden_width"] = params.hidden_width;
  j["w1"] = params.w1;
  j["b1"] = params.b1;
  j["w2"] = params.w2;
  j["b2"] = params.b2;
  return j;
}

trainkit::ModelParams params_from_json(const json& j) {
  trainkit::ModelParams params;
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "mlp") {
    params.kind = trainkit::ModelKind::mlp;
  } else if (kind == "linear") {
    params.kind = trainkit::ModelKind::linear;
  } else {
    throw IoError("model file: unknown kind '" + kind + "'");
  }
  params.input_dim = j.at("input_dim").get<std::size_t>();
  params.num_classes = j.at("num_classes").get<std::size_t>();
  params.hidden_width = j.at("hidden_width").get<std::size_t>();
  params.w1 = j.at("w1").get<std::vector<double>>();
  params.b1 = j.at("b1").get<std::vector<double>>();
  params.w2 = j.at("w2").get<std::vector<double>>();
  params.b2 = j.at("b2").get<std::vector<double>>();
  if (!params.all_finite()) {
    throw IoError("model file: non-finite parameter");
  }
  return params;
}

}  // namespace

void write_model_file(const std::string& path, const trainkit::TrainResult& result) {
  json root;
  root["schema_version"] = kSchemaVersion;
  root["model"] = params_to_json(result.model);
  json checkpoints = json::array();
  for (const auto& ckpt : result.checkpoints) {
    json c;
    c["step"] = ckpt.step;
    c["train_accuracy"] = ckpt.train_accuracy;
    if (ckpt.holdout_accuracy) c["holdout_accuracy"] = *ckpt.holdout_accuracy;
    c["mean_train_loss"] = ckpt.mean_train_loss;
    c["is_best"] = ckpt.is_best;
    c["params"] = params_to_json(ckpt.params);
    checkpoints.push_back(std::move(c));
  }
  root["checkpoints"] = checkpoints;
  atomic_write_file(path, root.dump(2) + "\n");
}

trainkit::TrainResult read_model_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError("cannot open model file: " + path);
  }
  json root;
  try {
    in >> root;
  } catch (const json::parse_error& e) {
    throw IoError(path + ": not valid JSON: " + e.what());
  }
  const int version = root.value("schema_version", -1);
  if (version != kSchemaVersion) {
    throw SchemaVersionError(path + ": unsupported model file version " +
                             std::to_string(version));
  }
  trainkit::TrainResult result;
  result.model = params_from_json(root.at("model"));
  for (const auto& c : root.value("checkpoints", json::array())) {
    trainkit::Checkpoint ckpt;
    ckpt.step = c.at("step").get<std::size_t>();
    ckpt.train_accuracy = c.at("train_accuracy").get<double>();
    if (c.contains("holdout_accuracy")) {
      ckpt.holdout_accuracy = c.at("holdout_accuracy").get<double>();
    }
    ckpt.mean_train_loss = c.at("mean_train_loss").get<double>();
    ckpt.is_best = c.value("is_best", false);
    ckpt.params = params_from_json(c.at("params"));
    result.checkpoints.push_back(std::move(ckpt));
  }
  return result;
}

void write_scatter_svg(const std::string& path, const std::vector<ScatterPoint>& points,
                       const std::string& x_label, const std::string& y_label, bool log_y) {
  if (points.empty()) {
    throw ValidationError(ValidationCode::empty, "no points to plot");
  }
  const double W = 640, H = 520;
  const double x0 = 70, y0 = 30, width = W - 100, height = H - 110;
  double xmin = points.front().x, xmax = points.front().x;
  for (const auto& p : points) {
    xmin = std::min(xmin, p.x);
    xmax = std::max(xmax, p.x);
  }
  if (xmax == xmin) xmax = xmin + 1.0;
  auto map_x = [&](double x) { return x0 + (x - xmin) / (xmax - xmin) * width; };
  auto map_y = [&](double y) {
    double unit;
    if (log_y) {
      unit = (std::log10(std::max(y, kLogFloor)) - std::log10(kLogFloor)) / -std::log10(kLogFloor);
    } else {
      unit = std::clamp(y, 0.0, 1.0);
    }
    return y0 + height - unit * height;
  };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
  svg << "<rect x=\"" << x0 << "\" y=\"" << y0 << "\" width=\"" << width << "\" height=\""
      << height << "\" fill=\"white\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double x = xmin + (xmax - xmin) * i / 4.0;
    svg << "<text x=\"" << map_x(x) << "\" y=\"" << y0 + height + 18
        << "\" font-size=\"11\" text-anchor=\"middle\">" << format_double(x) << "</text>\n";
  }
  if (log_y) {
    for (double v = kLogFloor; v <= 1.0 + 1e-12; v *= 10.0) {
      svg << "<text x=\"" << x0 - 8 << "\" y=\"" << map_y(v) + 4
          << "\" font-size=\"11\" text-anchor=\"end\">1e"
          << static_cast<int>(std::round(std::log10(v))) << "</text>\n";
    }
  } else {
    for (double v = 0.0; v <= 1.0 + 1e-12; v += 0.25) {
      svg << "<text x=\"" << x0 - 8 << "\" y=\"" << map_y(v) + 4
          << "\" font-size=\"11\" text-anchor=\"end\">" << v << "</text>\n";
    }
  }
  svg << "<text x=\"" << x0 + width / 2 << "\" y=\"" << H - 45
      << "\" font-size=\"13\" text-anchor=\"middle\">" << x_label << "</text>\n";
  svg << "<text x=\"18\" y=\"" << y0 + height / 2
      << "\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
      << y0 + height / 2 << ")\">" << y_label << "</text>\n";
  for (const auto& p : points) {
    svg << "<circle cx=\"" << map_x(p.x) << "\" cy=\"" << map_y(p.y)
        << "\" r=\"3\" fill=\"#1f77b4\" fill-opacity=\"0.6\"/>\n";
  }
  svg << "</svg>\n";
  atomic_write_file(path, svg.str());
}

void write_scatter_csv(const std::string& path,
                       const std::vector<harness::ScatterRecord>& records,
                       const std::vector<double>& alphas) {
  std::string out = "model_id,policy,epochs,weight_decay,train_acc,test_acc,gap_acc,gap_loss,auc";
  for (double alpha : alphas) out += ",tpr_at_" + format_double(alpha);
  out += '\n';
  for (const auto& rec : records) {
    out += std::to_string(rec.model_id);
    out += ',' + rec.policy_label;
    out += ',' + std::to_string(rec.epochs);
    out += ',' + format_double(rec.weight_decay);
    out += ',' + format_double(rec.train_acc);
    out += ',' + format_double(rec.test_acc);
    out += ',' + format_double(rec.gap_acc);
    out += ',' + format_double(rec.gap_loss);
    out += ',' + format_double(rec.auc);
    for (double alpha : alphas) {
      const auto it = rec.tpr_at.find(alpha);
      out += ',' + format_double(it != rec.tpr_at.end() ? it->second : 0.0);
    }
    out += '\n';
  }
  atomic_write_file(path, out);
}

}  // namespace miakit::io
