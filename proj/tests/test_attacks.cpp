#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "miakit/attacks.hpp"
#include "miakit/core.hpp"
#include "miakit/metrics.hpp"

using namespace miakit;
using namespace miakit::attacks;

namespace {

ProbabilityVector pv(std::vector<double> probs) {
  return ProbabilityVector::unchecked(std::move(probs));
}

}  // namespace

TEST_CASE("score_correctness with the tie rule") {
  CHECK(score_correctness(pv({0.7, 0.3}), 0) == 1.0);
  CHECK(score_correctness(pv({0.5, 0.5}), 1) == 0.0);  // tie breaks to class 0
  CHECK(score_correctness(pv({0.5, 0.5}), 0) == 1.0);
  CHECK(score_correctness(pv({0.2, 0.3, 0.5}), 2) == 1.0);
  CHECK_THROWS_AS(score_correctness(pv({0.5, 0.5}), 2), ValidationError);
}

TEST_CASE("score_confidence returns p_y") {
  CHECK(score_confidence(pv({0.7, 0.2, 0.1}), 0) == 0.7);
  CHECK(score_confidence(pv({0.0, 1.0}), 1) == 1.0);
  CHECK(score_confidence(pv({0.25, 0.25, 0.25, 0.25}), 3) == 0.25);
}

TEST_CASE("score_neg_entropy is the negated Shannon entropy") {
  CHECK(score_neg_entropy(pv({1.0, 0.0})) == 0.0);  // maximum score, 0 ln 0 := 0
  CHECK(score_neg_entropy(pv({0.25, 0.25, 0.25, 0.25})) == doctest::Approx(-std::log(4.0)));
  CHECK(score_neg_entropy(pv({0.5, 0.5})) == doctest::Approx(-std::log(2.0)));
}

TEST_CASE("score_modified_entropy hand-evaluated cases") {
  CHECK(score_modified_entropy(pv({0.0, 1.0}), 1) == 0.0);
  CHECK(score_modified_entropy(pv({0.5, 0.5}), 0) == doctest::Approx(-std::log(2.0)));
  // Both terms hit the 1e-12 clamp: 2 * ln(1e-12).
  CHECK(score_modified_entropy(pv({0.0, 1.0}), 0) ==
        doctest::Approx(-2.0 * 12.0 * std::log(10.0)).epsilon(1e-12));
}

TEST_CASE("logit_confidence with clamping") {
  CHECK(logit_confidence(pv({0.5, 0.5}), 0) == doctest::Approx(0.0));
  CHECK(logit_confidence(pv({0.9, 0.1}), 0) == doctest::Approx(std::log(9.0)));
  const double clamped = logit_confidence(pv({1.0, 0.0}), 0);
  CHECK(std::isfinite(clamped));
  CHECK(clamped == doctest::Approx(std::log((1.0 - 1e-7) / 1e-7)));
  CHECK(logit_transform(0.5) == 0.0);
}

TEST_CASE("calibrate_score subtracts the reference mean") {
  CHECK(calibrate_score(0.9, std::vector<double>{0.7}) == doctest::Approx(0.2));
  CHECK(calibrate_score(0.6, std::vector<double>{0.5, 0.7}) == doctest::Approx(0.0));
  CHECK(calibrate_score(0.3, std::vector<double>{0.5, 0.7}) == doctest::Approx(-0.3));
  CHECK_THROWS_AS(calibrate_score(0.5, std::vector<double>{}), ValidationError);
}

TEST_CASE("calibrate_score is translation equivariant") {
  SeededRng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    const double target = rng.gaussian();
    std::vector<double> refs(1 + static_cast<std::size_t>(rng.uniform_int(0, 9)));
    for (auto& r : refs) r = rng.gaussian();
    const double c = rng.uniform(-10.0, 10.0);
    const double base = calibrate_score(target, refs);
    for (auto& r : refs) r += c;
    const double shifted = calibrate_score(target + c, refs);
    CHECK(shifted == doctest::Approx(base).epsilon(1e-9));
  }
}

TEST_CASE("fit_gaussian: floor, Bessel correction, singleton rule") {
  const auto flat = fit_gaussian(std::vector<double>{1.0, 1.0, 1.0}, 0.05);
  CHECK(flat.mean == doctest::Approx(1.0));
  CHECK(flat.std == 0.05);

  const auto pair = fit_gaussian(std::vector<double>{0.0, 2.0}, 0.05);
  CHECK(pair.mean == doctest::Approx(1.0));
  CHECK(pair.std == doctest::Approx(std::sqrt(2.0)));  // |x1-x2|/sqrt(2)

  const auto single = fit_gaussian(std::vector<double>{5.0}, 0.1);
  CHECK(single.mean == 5.0);
  CHECK(single.std == 0.1);

  CHECK_THROWS_AS(fit_gaussian(std::vector<double>{}, 0.1), ValidationError);
  CHECK_THROWS_AS(fit_gaussian(std::vector<double>{1.0}, 0.0), ValidationError);
}

TEST_CASE("lira_online: analytic log-density differences") {
  // Two-point lists whose Bessel fits are exactly N(2,1) and N(0,1).
  const double s = 1.0 / std::sqrt(2.0);
  const std::vector<double> in_scores = {2.0 - s, 2.0 + s};
  const std::vector<double> out_scores = {-s, s};
  const auto mode = VarianceMode::per_sample();
  CHECK(lira_online(1.0, in_scores, out_scores, mode, 1e-6) == doctest::Approx(0.0));
  CHECK(lira_online(2.0, in_scores, out_scores, mode, 1e-6) == doctest::Approx(2.0));
  CHECK(lira_online(0.0, in_scores, out_scores, mode, 1e-6) == doctest::Approx(-2.0));
}

TEST_CASE("lira_online: identical lists score zero for every target") {
  const std::vector<double> scores = {0.2, 0.5, 0.9};
  for (double target : {-1.0, 0.0, 0.5, 3.0}) {
    CHECK(lira_online(target, scores, scores, VarianceMode::per_sample(), 1e-3) == 0.0);
  }
}

TEST_CASE("lira_online: swapping in/out negates the score exactly") {
  SeededRng rng(44);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> in_scores(1 + static_cast<std::size_t>(rng.uniform_int(0, 7)));
    std::vector<double> out_scores(1 + static_cast<std::size_t>(rng.uniform_int(0, 7)));
    for (auto& v : in_scores) v = rng.gaussian();
    for (auto& v : out_scores) v = rng.gaussian();
    const double target = rng.gaussian();
    const double fwd = lira_online(target, in_scores, out_scores, VarianceMode::per_sample(), 1e-3);
    const double rev = lira_online(target, out_scores, in_scores, VarianceMode::per_sample(), 1e-3);
    CHECK(fwd == -rev);
  }
  CHECK_THROWS_AS(
      lira_online(0.0, std::vector<double>{}, std::vector<double>{1.0},
                  VarianceMode::per_sample(), 1e-3),
      ValidationError);
}

TEST_CASE("lira_offline standardized exceedance") {
  const std::vector<double> out_scores = {0.0, 2.0};
  CHECK(lira_offline(1.0, out_scores, 0.05) == doctest::Approx(0.0));
  CHECK(lira_offline(1.0 + std::sqrt(2.0), out_scores, 0.05) == doctest::Approx(1.0));
  CHECK(lira_offline(3.0, out_scores, 0.05) == doctest::Approx(std::sqrt(2.0)));
  CHECK_THROWS_AS(lira_offline(0.0, std::vector<double>{}, 0.05), ValidationError);
}

TEST_CASE("lira_online AUC matches the analytic value for 2-sigma separation") {
  // Populations N(1,1) vs N(-1,1); AUC = Phi(2 / sqrt(2)) = Phi(sqrt(2)).
  SeededRng rng(123);
  std::vector<double> in_ref(64), out_ref(64);
  for (auto& v : in_ref) v = 1.0 + rng.gaussian();
  for (auto& v : out_ref) v = -1.0 + rng.gaussian();
  const std::size_t n = 10000;
  std::vector<double> member_scores(n), nonmember_scores(n);
  for (std::size_t i = 0; i < n; ++i) {
    member_scores[i] =
        lira_online(1.0 + rng.gaussian(), in_ref, out_ref, VarianceMode::per_sample(), 1e-3);
    nonmember_scores[i] =
        lira_online(-1.0 + rng.gaussian(), in_ref, out_ref, VarianceMode::per_sample(), 1e-3);
  }
  const double auc = metrics::auc(metrics::roc_curve(member_scores, nonmember_scores));
  const double expected = 0.5 * std::erfc(-std::sqrt(2.0) / std::sqrt(2.0));  // Phi(sqrt(2))
  CHECK(auc == doctest::Approx(expected).epsilon(0.025));
}

TEST_CASE("select_threshold_fixed_fpr: enumerated cases") {
  std::vector<double> ten;
  for (int i = 1; i <= 10; ++i) ten.push_back(i);
  CHECK(select_threshold_fixed_fpr(ten, 0.2) == 8.0);
  CHECK(select_threshold_fixed_fpr(std::vector<double>{1.0, 2.0}, 0.5) == 1.0);
  CHECK(select_threshold_fixed_fpr(ten, 1e-9) == 10.0);  // alpha -> 0 picks the max
  CHECK_THROWS_AS(select_threshold_fixed_fpr(std::vector<double>{}, 0.1), ValidationError);
  CHECK_THROWS_AS(select_threshold_fixed_fpr(ten, 0.0), ValidationError);
  CHECK_THROWS_AS(select_threshold_fixed_fpr(ten, 1.0), ValidationError);
}

TEST_CASE("select_threshold_fixed_fpr: FPR guarantee and minimality, exhaustively") {
  SeededRng rng(314);
  for (int trial = 0; trial < 400; ++trial) {
    std::vector<double> scores(1 + static_cast<std::size_t>(rng.uniform_int(0, 29)));
    for (auto& v : scores) {
      v = trial % 2 == 0 ? static_cast<double>(rng.uniform_int(-3, 3)) : rng.gaussian();
    }
    const double alpha = rng.uniform(0.01, 0.99);
    const double tau = select_threshold_fixed_fpr(scores, alpha);
    const double n = static_cast<double>(scores.size());

    const auto fpr_at = [&](double t) {
      std::size_t above = 0;
      for (double s : scores) {
        if (s > t) ++above;
      }
      return static_cast<double>(above) / n;
    };
    REQUIRE(fpr_at(tau) <= alpha);
    // Minimality among the order statistics.
    for (double candidate : scores) {
      if (candidate < tau) REQUIRE(fpr_at(candidate) > alpha);
    }
  }
}

TEST_CASE("select_threshold_per_class") {
  std::map<int, std::vector<double>> groups;
  groups[0] = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};

  SUBCASE("single class equals the global threshold") {
    const auto result = select_threshold_per_class(groups, 0.2);
    CHECK(result.by_class.at(0) == result.global);
    CHECK(result.fallback_classes.empty());
  }

  SUBCASE("identical scores across classes give equal thresholds") {
    groups[1] = groups[0];
    const auto result = select_threshold_per_class(groups, 0.2);
    CHECK(result.by_class.at(0) == result.by_class.at(1));
  }

  SUBCASE("empty group falls back to the global threshold") {
    groups[1] = {};
    const auto result = select_threshold_per_class(groups, 0.2);
    CHECK(result.by_class.at(1) == result.global);
    CHECK(result.fallback_classes == std::vector<int>{1});
  }

  SUBCASE("all groups empty is an error") {
    std::map<int, std::vector<double>> empty_groups;
    empty_groups[0] = {};
    CHECK_THROWS_AS(select_threshold_per_class(empty_groups, 0.2), ValidationError);
  }
}

TEST_CASE("per-class thresholds beat any global threshold on disjoint ranges") {
  // 20 non-member scores in two disjoint class ranges, plus two members per
  // class sitting near each class's top.
  std::map<int, std::vector<double>> out_by_class;
  for (int i = 1; i <= 10; ++i) out_by_class[0].push_back(0.1 * i);          // 0.1 .. 1.0
  for (int i = 1; i <= 10; ++i) out_by_class[1].push_back(10.0 + 0.1 * i);   // 10.1 .. 11.0
  const std::vector<std::pair<int, double>> members = {
      {0, 0.95}, {0, 1.05}, {1, 10.95}, {1, 11.05}};
  const double alpha = 0.1;

  const auto per_class = select_threshold_per_class(out_by_class, alpha);
  std::size_t tp_per_class = 0;
  for (const auto& [cls, score] : members) {
    if (apply_threshold(score, per_class.by_class.at(cls))) ++tp_per_class;
  }
  std::size_t fp_per_class = 0;
  for (const auto& [cls, scores] : out_by_class) {
    for (double s : scores) {
      if (apply_threshold(s, per_class.by_class.at(cls))) ++fp_per_class;
    }
  }
  const double per_class_tpr = static_cast<double>(tp_per_class) / members.size();
  const double per_class_fpr = static_cast<double>(fp_per_class) / 20.0;
  CHECK(per_class_fpr <= alpha);
  CHECK(per_class.by_class.at(0) != per_class.by_class.at(1));

  // Brute force every global threshold with FPR no worse than the per-class
  // attack achieved; none reaches the per-class TPR.
  std::vector<double> pooled;
  for (const auto& [cls, scores] : out_by_class) {
    pooled.insert(pooled.end(), scores.begin(), scores.end());
  }
  double best_global_tpr = 0.0;
  for (double tau : pooled) {
    std::size_t fp = 0;
    for (double s : pooled) {
      if (s > tau) ++fp;
    }
    if (static_cast<double>(fp) / 20.0 > per_class_fpr) continue;
    std::size_t tp = 0;
    for (const auto& [cls, score] : members) {
      if (score > tau) ++tp;
    }
    best_global_tpr = std::max(best_global_tpr, static_cast<double>(tp) / members.size());
  }
  CHECK(per_class_tpr >= best_global_tpr);
  CHECK(per_class_tpr == 1.0);
  CHECK(best_global_tpr == 0.5);
}

TEST_CASE("apply_threshold is strict") {
  CHECK(apply_threshold(0.9, 0.5));
  CHECK_FALSE(apply_threshold(0.5, 0.5));
  CHECK_FALSE(apply_threshold(-1.0, 0.0));
}

TEST_CASE("attack_features: sorted probabilities plus one-hot label") {
  const auto f = attack_features(pv({0.2, 0.5, 0.3}), 2);
  CHECK(f == std::vector<double>{0.5, 0.3, 0.2, 0.0, 0.0, 1.0});
}

TEST_CASE("nn attack training on separable features") {
  SeededRng rng(8);
  std::vector<std::vector<double>> features;
  std::vector<std::uint8_t> bits;
  for (int i = 0; i < 400; ++i) {
    const bool member = i % 2 == 0;
    const double conf = member ? 0.95 + 0.01 * rng.uniform() : 0.55 + 0.01 * rng.uniform();
    const int label = static_cast<int>(rng.uniform_int(0, 1));
    features.push_back(attack_features(pv({conf, 1.0 - conf}), label));
    bits.push_back(member ? 1 : 0);
  }
  AttackTrainConfig cfg;
  cfg.epochs = 60;
  cfg.learning_rate = 0.5;
  cfg.weight_decay = 0.0;
  const auto model = nn_attack_train(features, bits, cfg, SeededRng(3));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < features.size(); ++i) {
    const bool predicted = nn_attack_score(model, features[i]) > 0.5;
    if (predicted == static_cast<bool>(bits[i])) ++correct;
  }
  CHECK(static_cast<double>(correct) / static_cast<double>(features.size()) >= 0.99);

  // Determinism under a fixed seed.
  const auto model2 = nn_attack_train(features, bits, cfg, SeededRng(3));
  CHECK(model.weights == model2.weights);
  CHECK(model.bias == model2.bias);
}

TEST_CASE("nn attack rejects single-class training sets") {
  const std::vector<std::vector<double>> features(4, std::vector<double>(4, 0.1));
  CHECK_THROWS_AS(nn_attack_train(features, {1, 1, 1, 1}, AttackTrainConfig{}, SeededRng(0)),
                  ValidationError);
  CHECK_THROWS_AS(nn_attack_train(features, {0, 0, 0, 0}, AttackTrainConfig{}, SeededRng(0)),
                  ValidationError);
}

TEST_CASE("nn attack scoring") {
  AttackModel zero;
  zero.num_classes = 2;
  zero.weights.assign(4, 0.0);
  CHECK(nn_attack_score(zero, std::vector<double>{1.0, 0.0, 0.0, 1.0}) == 0.5);

  AttackModel biased = zero;
  biased.bias = std::log(9.0);  // sigmoid(ln 9) = 0.9
  CHECK(nn_attack_score(biased, std::vector<double>{0.0, 0.0, 0.0, 0.0}) ==
        doctest::Approx(0.9));
  CHECK_THROWS_AS(nn_attack_score(zero, std::vector<double>{1.0}), ValidationError);
}

TEST_CASE("score matrix validation and coverage") {
  auto matrix = ScoreMatrix::create(2, 4, Criterion::confidence);
  matrix.masks.emplace_back(std::vector<bool>{true, true, false, false});
  matrix.masks.emplace_back(std::vector<bool>{true, false, true, false});
  CHECK_NOTHROW(matrix.validate());

  // Sample 0 is IN for every model; sample 3 is OUT for every model.
  const auto uncovered = matrix.uncovered_samples(matrix.num_models);
  CHECK(uncovered == std::vector<std::size_t>{0, 3});

  matrix.score(0, 0) = std::nan("");
  CHECK_THROWS_AS(matrix.validate(), ValidationError);

  auto bad = ScoreMatrix::create(2, 4, Criterion::confidence);
  bad.masks.emplace_back(std::vector<bool>{true, true, false, false});
  CHECK_THROWS_AS(bad.validate(), ValidationError);  // mask count mismatch
}

TEST_CASE("monotone transforms leave attack ROC curves unchanged") {
  SeededRng rng(5);
  std::vector<double> member_scores(50), nonmember_scores(50);
  for (auto& v : member_scores) v = 0.5 + 0.2 * rng.gaussian();
  for (auto& v : nonmember_scores) v = 0.2 * rng.gaussian();
  const auto base = metrics::roc_curve(member_scores, nonmember_scores);
  for (auto& v : member_scores) v = 2.0 * v + 1.0;
  for (auto& v : nonmember_scores) v = 2.0 * v + 1.0;
  const auto warped = metrics::roc_curve(member_scores, nonmember_scores);
  REQUIRE(base.points.size() == warped.points.size());
  for (std::size_t i = 0; i < base.points.size(); ++i) {
    CHECK(base.points[i].fpr == warped.points[i].fpr);
    CHECK(base.points[i].tpr == warped.points[i].tpr);
  }
}
