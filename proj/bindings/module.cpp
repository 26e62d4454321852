// Python bindings for the main operations: membership scores, Gaussian
// likelihood-ratio attacks, threshold selection, low-FPR ROC metrics, score
// file IO, and config-driven ensemble construction.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "miakit/cli_io.hpp"
#include "miakit/harness.hpp"

namespace py = pybind11;
using namespace miakit;

namespace {

ProbabilityVector as_pv(const std::vector<double>& probs) {
  return validate_probability_vector(probs);
}

py::dict report_to_dict(const harness::AttackOutcome& outcome) {
  py::dict d;
  d["attack"] = outcome.report.attack;
  d["auc"] = outcome.report.auc;
  d["balanced_accuracy"] = outcome.report.balanced_accuracy;
  py::dict tpr;
  for (const auto& [alpha, value] : outcome.report.tpr_at) {
    tpr[py::float_(alpha)] = value;
  }
  d["tpr_at"] = tpr;
  py::dict prec;
  for (const auto& [recall, value] : outcome.report.precision_at_recall) {
    prec[py::float_(recall)] = value;
  }
  d["precision_at_recall"] = prec;
  if (!outcome.fixed_fpr.empty()) {
    py::dict decisions;
    for (const auto& [alpha, decision] : outcome.fixed_fpr) {
      py::dict entry;
      entry["threshold"] = decision.threshold;
      entry["tpr"] = decision.tpr;
      entry["fpr"] = decision.fpr;
      decisions[py::float_(alpha)] = entry;
    }
    d["fixed_fpr"] = decisions;
  }
  py::list points;
  for (const auto& p : outcome.curve.points) {
    points.append(py::make_tuple(p.fpr, p.tpr, p.threshold));
  }
  d["roc"] = points;
  return d;
}

harness::AttackSettings settings_from_args(const std::vector<std::string>& attack_names,
                                           const std::vector<double>& alphas,
                                           const std::vector<double>& recalls, double lira_floor,
                                           bool fixed_fpr) {
  harness::AttackSettings settings;
  settings.attacks.clear();
  for (const auto& name : attack_names) {
    settings.attacks.push_back(harness::attack_from_name(name));
  }
  if (!alphas.empty()) settings.alphas = alphas;
  if (!recalls.empty()) settings.recalls = recalls;
  settings.lira.floor = lira_floor;
  settings.fixed_fpr_decisions = fixed_fpr;
  return settings;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Membership-inference auditing toolkit: shadow ensembles, "
            "likelihood-ratio attacks, and low-FPR ROC metrics.";

  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<TrainingError>(m, "TrainingError", PyExc_RuntimeError);
  py::register_exception<IoError>(m, "IoError", PyExc_IOError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

  // --- core -----------------------------------------------------------------
  m.def(
      "validate_probability_vector",
      [](const std::vector<double>& probs) { return as_pv(probs).probs(); },
      py::arg("probs"), "Validate a softmax output; raises instead of repairing.");
  m.def(
      "renormalized",
      [](const std::vector<double>& weights) { return renormalized(weights).probs(); },
      py::arg("weights"));
  m.def(
      "sample_half_split",
      [](std::size_t n, std::uint64_t seed, std::uint64_t stream) {
        SeededRng rng(seed, stream);
        return sample_half_split(n, rng).bits();
      },
      py::arg("n"), py::arg("seed"), py::arg("stream") = 0,
      "Uniform mask with exactly floor(n/2) members.");

  // --- membership scores ------------------------------------------------------
  m.def(
      "score_correctness",
      [](const std::vector<double>& p, int y) { return attacks::score_correctness(as_pv(p), y); },
      py::arg("probs"), py::arg("label"));
  m.def(
      "score_confidence",
      [](const std::vector<double>& p, int y) { return attacks::score_confidence(as_pv(p), y); },
      py::arg("probs"), py::arg("label"));
  m.def(
      "score_neg_entropy",
      [](const std::vector<double>& p) { return attacks::score_neg_entropy(as_pv(p)); },
      py::arg("probs"));
  m.def(
      "score_modified_entropy",
      [](const std::vector<double>& p, int y) {
        return attacks::score_modified_entropy(as_pv(p), y);
      },
      py::arg("probs"), py::arg("label"));
  m.def(
      "logit_confidence",
      [](const std::vector<double>& p, int y) { return attacks::logit_confidence(as_pv(p), y); },
      py::arg("probs"), py::arg("label"));
  m.def(
      "calibrate_score",
      [](double target, const std::vector<double>& refs) {
        return attacks::calibrate_score(target, refs);
      },
      py::arg("target_score"), py::arg("reference_scores"));
  m.def(
      "fit_gaussian",
      [](const std::vector<double>& samples, double floor) {
        const auto fit = attacks::fit_gaussian(samples, floor);
        return py::make_tuple(fit.mean, fit.std);
      },
      py::arg("samples"), py::arg("floor"), "Returns (mean, std) with the variance floor applied.");
  m.def(
      "lira_online",
      [](double target, const std::vector<double>& in_scores,
         const std::vector<double>& out_scores, double floor) {
        return attacks::lira_online(target, in_scores, out_scores,
                                    attacks::VarianceMode::per_sample(), floor);
      },
      py::arg("target"), py::arg("in_scores"), py::arg("out_scores"), py::arg("floor") = 1e-3);
  m.def(
      "lira_offline",
      [](double target, const std::vector<double>& out_scores, double floor) {
        return attacks::lira_offline(target, out_scores, floor);
      },
      py::arg("target"), py::arg("out_scores"), py::arg("floor") = 1e-3);
  m.def(
      "select_threshold_fixed_fpr",
      [](const std::vector<double>& out_scores, double alpha) {
        return attacks::select_threshold_fixed_fpr(out_scores, alpha);
      },
      py::arg("out_scores"), py::arg("alpha"));
  m.def(
      "select_threshold_per_class",
      [](const std::map<int, std::vector<double>>& grouped, double alpha) {
        const auto result = attacks::select_threshold_per_class(grouped, alpha);
        return py::make_tuple(result.by_class, result.global, result.fallback_classes);
      },
      py::arg("out_scores_by_class"), py::arg("alpha"),
      "Returns (thresholds_by_class, global_threshold, fallback_classes).");
  m.def("apply_threshold", &attacks::apply_threshold, py::arg("score"), py::arg("tau"));

  // --- metrics ----------------------------------------------------------------
  m.def(
      "roc_curve",
      [](const std::vector<double>& members, const std::vector<double>& nonmembers) {
        const auto curve = metrics::roc_curve(members, nonmembers);
        py::list points;
        for (const auto& p : curve.points) {
          points.append(py::make_tuple(p.fpr, p.tpr, p.threshold));
        }
        return points;
      },
      py::arg("member_scores"), py::arg("nonmember_scores"),
      "Ordered (fpr, tpr, threshold) points from (0,0) to (1,1).");
  m.def(
      "auc",
      [](const std::vector<double>& members, const std::vector<double>& nonmembers) {
        return metrics::auc(metrics::roc_curve(members, nonmembers));
      },
      py::arg("member_scores"), py::arg("nonmember_scores"));
  m.def(
      "tpr_at_fpr",
      [](const std::vector<double>& members, const std::vector<double>& nonmembers,
         double alpha) {
        return metrics::tpr_at_fpr(metrics::roc_curve(members, nonmembers), alpha);
      },
      py::arg("member_scores"), py::arg("nonmember_scores"), py::arg("alpha"));
  m.def(
      "balanced_accuracy",
      [](const std::vector<double>& members, const std::vector<double>& nonmembers) {
        return metrics::balanced_accuracy(metrics::roc_curve(members, nonmembers));
      },
      py::arg("member_scores"), py::arg("nonmember_scores"));
  m.def(
      "precision_at_recall",
      [](const std::vector<double>& members, const std::vector<double>& nonmembers, double r) {
        return metrics::precision_at_recall(members, nonmembers, r);
      },
      py::arg("member_scores"), py::arg("nonmember_scores"), py::arg("recall"));
  m.def(
      "gap_report",
      [](double train_acc, double test_acc, double train_loss, double test_loss) {
        const auto gap = metrics::gap_report(train_acc, test_acc, train_loss, test_loss);
        py::dict d;
        d["gap_acc"] = gap.gap_acc;
        d["gap_loss"] = gap.gap_loss;
        d["train_acc"] = gap.train_acc;
        d["test_acc"] = gap.test_acc;
        d["train_loss"] = gap.train_loss;
        d["test_loss"] = gap.test_loss;
        return d;
      },
      py::arg("train_acc"), py::arg("test_acc"), py::arg("train_loss"), py::arg("test_loss"));
  m.def(
      "spearman",
      [](const std::vector<double>& xs, const std::vector<double>& ys) -> py::object {
        const auto rho = harness::spearman(xs, ys);
        if (!rho) return py::none();
        return py::float_(*rho);
      },
      py::arg("xs"), py::arg("ys"), "Rank correlation; None when variance is zero.");

  // --- score matrices and experiments -----------------------------------------
  py::class_<attacks::ScoreMatrix>(m, "ScoreMatrix")
      .def_readonly("num_models", &attacks::ScoreMatrix::num_models)
      .def_readonly("num_samples", &attacks::ScoreMatrix::num_samples)
      .def_property_readonly(
          "criterion",
          [](const attacks::ScoreMatrix& self) { return attacks::criterion_name(self.criterion); })
      .def("score",
           [](const attacks::ScoreMatrix& self, std::size_t model, std::size_t sample) {
             if (model >= self.num_models || sample >= self.num_samples) {
               throw ValidationError(ValidationCode::out_of_range, "matrix index out of range");
             }
             return self.score(model, sample);
           })
      .def("mask",
           [](const attacks::ScoreMatrix& self, std::size_t model) {
             if (model >= self.num_models) {
               throw ValidationError(ValidationCode::out_of_range, "model id out of range");
             }
             return self.masks[model].bits();
           })
      .def("__repr__", [](const attacks::ScoreMatrix& self) {
        return "<ScoreMatrix " + std::to_string(self.num_models) + " models x " +
               std::to_string(self.num_samples) + " samples, criterion=" +
               attacks::criterion_name(self.criterion) + ">";
      });

  m.def("read_score_file", &io::read_score_file, py::arg("path"));
  m.def("write_score_file", &io::write_score_file, py::arg("matrix"), py::arg("path"));

  m.def(
      "build_ensemble",
      [](const std::string& config_json) {
        const auto config = io::parse_experiment_config(config_json);
        const auto dataset = harness::make_dataset(config.dataset, SeededRng(config.master_seed));
        return harness::build_ensemble(config, dataset).matrix;
      },
      py::arg("config_json"),
      "Train a shadow ensemble from an experiment config (JSON text); returns the ScoreMatrix.");
  m.def(
      "attack_target",
      [](const attacks::ScoreMatrix& matrix, std::size_t target,
         const std::vector<std::string>& attack_names, const std::vector<double>& alphas,
         const std::vector<double>& recalls, double lira_floor, bool fixed_fpr,
         std::uint64_t seed) {
        const auto settings =
            settings_from_args(attack_names, alphas, recalls, lira_floor, fixed_fpr);
        const auto outcomes =
            harness::attack_target(matrix, target, settings, SeededRng(seed, target));
        py::list reports;
        for (const auto& outcome : outcomes) reports.append(report_to_dict(outcome));
        return reports;
      },
      py::arg("matrix"), py::arg("target"),
      py::arg("attacks") = std::vector<std::string>{"lira-online"},
      py::arg("alphas") = std::vector<double>{0.001, 0.01, 0.1},
      py::arg("recalls") = std::vector<double>{0.5}, py::arg("lira_floor") = 1e-3,
      py::arg("fixed_fpr") = false, py::arg("seed") = 0,
      "Attack one matrix row using every other row as shadow material.");

  m.attr("__version__") = "0.1.0";
}
