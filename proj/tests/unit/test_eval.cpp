#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "dport/errors.hpp"
#include "dport/eval.hpp"

using namespace dport;

namespace {

double brute_auc(const std::vector<double>& pos, const std::vector<double>& neg) {
  double s = 0;
  for (double p : pos)
    for (double n : neg) s += p > n ? 1.0 : (p == n ? 0.5 : 0.0);
  return s / static_cast<double>(pos.size() * neg.size());
}

PredictionRecord rec(double score, bool positive, int age = 40, std::string gender = "female") {
  PredictionRecord r;
  static int counter = 0;
  r.session_id = "s" + std::to_string(counter++);
  r.subject_id = r.session_id;
  r.score = score;
  r.true_class = positive ? DepressionClass::dep_plus : DepressionClass::dep_minus;
  r.true_phq = positive ? 15 : 3;
  r.demographics.age = age;
  r.demographics.gender = parse_gender(gender);
  return r;
}

std::vector<PredictionRecord> random_records(std::mt19937_64& rng, std::size_t n, double shift) {
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_int_distribution<int> age(18, 90);
  std::vector<PredictionRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    const bool pos = i % 3 == 0;
    auto r = rec(1.0 / (1.0 + std::exp(-(noise(rng) + (pos ? shift : 0.0)))), pos, age(rng), i % 2 ? "male" : "female");
    r.phq_estimate = std::clamp(r.true_phq + 3.0 * noise(rng), 0.0, 24.0);
    out.push_back(r);
  }
  return out;
}

// Threshold-by-threshold sweep over observed scores, applying the documented tie rules.
EerPoint eer_oracle(const std::vector<double>& scores, const std::vector<bool>& pos) {
  std::vector<double> thr = scores;
  std::sort(thr.begin(), thr.end());
  thr.erase(std::unique(thr.begin(), thr.end()), thr.end());
  const double P = static_cast<double>(std::count(pos.begin(), pos.end(), true));
  const double N = static_cast<double>(pos.size()) - P;
  EerPoint best{};
  double best_gap = 1e300;
  for (double t : thr) {
    double tp = 0, fp = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (scores[i] >= t) (pos[i] ? tp : fp) += 1;
    }
    const double sens = tp / P, spec = 1 - fp / N;
    const double gap = std::abs((1 - spec) - (1 - sens));
    const bool better = gap < best_gap - 1e-12 ||
                        (std::abs(gap - best_gap) <= 1e-12 &&
                         (sens > best.sensitivity || (sens == best.sensitivity && t > best.threshold)));
    if (better) {
      best_gap = gap;
      best = {t, spec, sens};
    }
  }
  return best;
}

}  // namespace

TEST_SUITE("eval") {

TEST_CASE("auc examples") {
  CHECK(roc_auc(std::vector{0.9, 0.8}, std::vector{0.7, 0.1}) == 1.0);
  CHECK(roc_auc(std::vector{0.5, 0.5}, std::vector{0.5, 0.5, 0.5}) == 0.5);
  CHECK(roc_auc(std::vector{0.8, 0.3}, std::vector{0.5, 0.4}) == 0.5);
  CHECK_THROWS_AS(roc_auc(std::vector{0.8}, std::vector<double>{}), UndefinedMetric);
  CHECK_THROWS_AS(roc_auc(std::vector<double>{}, std::vector{0.1}), UndefinedMetric);
}

TEST_CASE("rank auc equals brute force on random tied instances") {
  std::mt19937_64 rng(17);
  for (int rep = 0; rep < 300; ++rep) {
    const std::size_t np = 1 + rng() % 20, nn = 1 + rng() % 20;
    const int levels = 1 + static_cast<int>(rng() % 6);
    std::vector<double> pos(np), neg(nn);
    for (auto& v : pos) v = static_cast<double>(rng() % static_cast<unsigned>(levels)) / levels;
    for (auto& v : neg) v = static_cast<double>(rng() % static_cast<unsigned>(levels)) / levels;
    CHECK(roc_auc(pos, neg) == brute_auc(pos, neg));

    std::vector<double> scores = pos;
    scores.insert(scores.end(), neg.begin(), neg.end());
    std::vector<char> flags(scores.size(), 0);
    std::fill(flags.begin(), flags.begin() + static_cast<long>(np), 1);
    std::vector<bool> labels(flags.begin(), flags.end());
    bool lab[64];
    for (std::size_t i = 0; i < scores.size(); ++i) lab[i] = labels[i];
    const auto curve = roc_curve(scores, std::span<const bool>(lab, scores.size()));
    CHECK(std::abs(trapezoid_area(curve) - roc_auc(pos, neg)) < 1e-12);
  }
}

TEST_CASE("label flip and monotone transforms") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.01, 0.99);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<double> pos(15), neg(22);
    for (auto& v : pos) v = u(rng);
    for (auto& v : neg) v = u(rng);
    const double a = roc_auc(pos, neg);
    auto neg_of = [](std::vector<double> v) {
      for (auto& x : v) x = -x;
      return v;
    };
    CHECK(a + roc_auc(neg_of(pos), neg_of(neg)) == doctest::Approx(1.0).epsilon(1e-12));
    auto map = [](std::vector<double> v, auto f) {
      for (auto& x : v) x = f(x);
      return v;
    };
    auto cube = [](double x) { return x * x * x; };
    auto logit = [](double x) { return std::log(x / (1 - x)); };
    CHECK(roc_auc(map(pos, cube), map(neg, cube)) == a);
    CHECK(roc_auc(map(pos, logit), map(neg, logit)) == a);
  }
}

TEST_CASE("roc curve shape") {
  const double scores[] = {0.9, 0.8, 0.2, 0.1};
  const bool pos[] = {true, true, false, false};
  const auto curve = roc_curve(scores, pos);
  CHECK(curve.front().fpr == 0.0);
  CHECK(curve.front().tpr == 0.0);
  CHECK(curve.back().fpr == 1.0);
  CHECK(curve.back().tpr == 1.0);
  CHECK(std::any_of(curve.begin(), curve.end(), [](const RocPoint& p) { return p.fpr == 0.0 && p.tpr == 1.0; }));

  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u;
  std::vector<double> s(10000);
  bool lab[10000];
  for (std::size_t i = 0; i < s.size(); ++i) {
    s[i] = u(rng);
    lab[i] = rng() % 2;
  }
  CHECK(std::abs(trapezoid_area(roc_curve(s, std::span<const bool>(lab, 10000))) - 0.5) < 0.05);
}

TEST_CASE("eer examples and exhaustive oracle") {
  {
    const double s[] = {0.9, 0.8, 0.2, 0.1};
    const bool p[] = {true, true, false, false};
    const auto e = eer_operating_point(s, p);
    CHECK(e.specificity == 1.0);
    CHECK(e.sensitivity == 1.0);
  }
  {
    const double s[] = {0.9, 0.2, 0.8, 0.1};
    const bool p[] = {true, true, false, false};
    const auto e = eer_operating_point(s, p);
    CHECK(e.specificity == 0.5);
    CHECK(e.sensitivity == 0.5);
    CHECK(e.threshold > 0.2);
    CHECK(e.threshold <= 0.8);
  }
  std::mt19937_64 rng(23);
  for (int rep = 0; rep < 300; ++rep) {
    const std::size_t n = 2 + rng() % 30;
    std::vector<double> scores(n);
    std::vector<bool> labels(n);
    bool lab[32];
    for (std::size_t i = 0; i < n; ++i) {
      scores[i] = static_cast<double>(rng() % 8) / 8.0;
      labels[i] = lab[i] = i < 1 || (i > 1 && rng() % 2);
    }
    const auto got = eer_operating_point(scores, std::span<const bool>(lab, n));
    const auto want = eer_oracle(scores, labels);
    CHECK(got.threshold == want.threshold);
    CHECK(got.specificity == doctest::Approx(want.specificity));
    CHECK(got.sensitivity == doctest::Approx(want.sensitivity));
  }
}

TEST_CASE("regression errors") {
  auto a = rec(0.1, false);
  a.true_phq = 0;
  a.phq_estimate = 2.0;
  auto b = rec(0.9, true);
  b.true_phq = 10;
  b.phq_estimate = 6.0;
  const auto e = regression_errors({a, b});
  CHECK(e.mae == doctest::Approx(3.0));
  CHECK(e.rmse == doctest::Approx(std::sqrt(10.0)));

  a.phq_estimate = 0.0;
  b.phq_estimate = 10.0;
  const auto exact = regression_errors({a, b});
  CHECK(exact.mae == 0.0);
  CHECK(exact.rmse == 0.0);

  b.phq_estimate.reset();
  CHECK_THROWS_AS(regression_errors({a, b}), ValidationError);
}

TEST_CASE("subgroups partition the records and match a manual recompute") {
  std::mt19937_64 rng(8);
  auto records = random_records(rng, 300, 1.0);
  records[5].demographics.gender = Gender::unspecified;
  records[6].demographics.age.reset();
  for (const auto key : {GroupKey::gender, GroupKey::age_bucket}) {
    const auto rep = subgroup_report(records, key);
    std::size_t total = rep.missing_key;
    for (const auto& row : rep.rows) {
      total += row.size;
      std::vector<PredictionRecord> mine;
      for (const auto& r : records) {
        if (group_of(r, key) == row.group) mine.push_back(r);
      }
      const auto manual = summarize(mine, row.group);
      CHECK(manual.size == row.size);
      CHECK(manual.roc_auc.value == row.roc_auc.value);
      CHECK(manual.specificity_at_eer.value == row.specificity_at_eer.value);
      CHECK(manual.sensitivity_at_eer.value == row.sensitivity_at_eer.value);
    }
    CHECK(total == records.size());
    CHECK(rep.missing_key == 1);
  }

  std::vector<PredictionRecord> sep = {rec(0.9, true, 30, "male"), rec(0.1, false, 30, "male"),
                                       rec(0.7, true, 30, "female"), rec(0.6, false, 30, "female")};
  for (const auto& row : subgroup_report(sep, GroupKey::gender).rows) CHECK(*row.roc_auc.value == 1.0);

  std::vector<PredictionRecord> one_class = {rec(0.9, true), rec(0.8, true)};
  const auto flagged = subgroup_report(one_class, GroupKey::gender);
  REQUIRE(flagged.rows.size() == 1);
  CHECK(!flagged.rows[0].roc_auc.defined());
  CHECK(!flagged.rows[0].roc_auc.flag.empty());
  const auto csv = subgroup_report(sep, GroupKey::gender).to_csv();
  for (const char* col : {"size", "roc_auc", "specificity_at_eer", "sensitivity_at_eer"}) CHECK(csv.find(col) != std::string::npos);
}

TEST_CASE("age threshold sweep") {
  std::mt19937_64 rng(2);
  const auto records = random_records(rng, 400, 1.5);
  const auto thresholds = parse_sweep("10:90:5");
  CHECK(thresholds.size() == 17);
  CHECK(parse_sweep("50:90:1").size() == 41);
  const auto sweep = age_threshold_sweep(records, thresholds);
  REQUIRE(sweep.rows.size() == thresholds.size());
  CHECK(sweep.rows[0].below.size == 0);
  CHECK(!sweep.rows[0].below.roc_auc.defined());
  CHECK(*sweep.rows[0].beyond.roc_auc.value == roc_auc(records));
  for (std::size_t i = 1; i < sweep.rows.size(); ++i) CHECK(sweep.rows[i].below.size >= sweep.rows[i - 1].below.size);
  for (const auto& r : sweep.rows) CHECK(r.below.size + r.beyond.size == records.size());

  auto no_age = records;
  for (auto& r : no_age) r.demographics.age.reset();
  CHECK_THROWS_AS(age_threshold_sweep(no_age, thresholds), ValidationError);
}

TEST_CASE("consistency strata") {
  std::mt19937_64 rng(4);
  auto records = random_records(rng, 60, 1.0);
  const auto all_consistent = consistency_split_eval(records);
  CHECK(all_consistent.inconsistent.size == 0);
  CHECK(!all_consistent.inconsistent.roc_auc.defined());
  for (std::size_t i = 0; i < records.size(); i += 4) records[i].consistency = ConsistencyLabel::inconsistent;
  const auto split = consistency_split_eval(records);
  CHECK(split.consistent.size + split.inconsistent.size == records.size());
}

TEST_CASE("bootstrap intervals") {
  std::mt19937_64 rng(5);
  const auto records = random_records(rng, 200, 1.0);
  const auto ci = bootstrap_ci(records, Metric::auc, 300, 0.1, 11);
  CHECK(ci.lower <= ci.point);
  CHECK(ci.point <= ci.upper);
  const auto again = bootstrap_ci(records, Metric::auc, 300, 0.1, 11);
  CHECK(again.lower == ci.lower);
  CHECK(again.upper == ci.upper);

  auto exact = records;
  for (auto& r : exact) r.phq_estimate = r.true_phq;
  const auto zero = bootstrap_ci(exact, Metric::rmse, 100, 0.1, 1);
  CHECK(zero.lower == 0.0);
  CHECK(zero.upper == 0.0);

  // Width shrinks roughly as 1/sqrt(n).
  std::mt19937_64 r2(6);
  const auto small = random_records(r2, 100, 1.0);
  const auto large = random_records(r2, 1000, 1.0);
  const double ratio = bootstrap_ci(small, Metric::mae, 400, 0.1, 2).half_width() /
                       bootstrap_ci(large, Metric::mae, 400, 0.1, 2).half_width();
  CHECK(ratio > std::sqrt(10.0) * 0.6);
  CHECK(ratio < std::sqrt(10.0) * 1.6);

  // A lone positive is missing from about a third of the resamples; those are redrawn.
  std::vector<PredictionRecord> lopsided;
  for (int i = 0; i < 60; ++i) lopsided.push_back(rec(0.1 * (i % 7), false));
  lopsided.push_back(rec(0.9, true));
  const auto redrawn = bootstrap_ci(lopsided, Metric::auc, 200, 0.1, 3);
  CHECK(redrawn.redrawn > 30);
  CHECK(redrawn.n_resamples == 200);
  CHECK_THROWS(bootstrap_ci({rec(0.9, true)}, Metric::auc, 50, 0.1, 3));

  const auto diff = bootstrap_difference_ci(large, small, Metric::auc, 200, 0.1, 4);
  CHECK(diff.point == doctest::Approx(roc_auc(large) - roc_auc(small)));
  CHECK(diff.lower <= diff.upper);
}

TEST_CASE("quantile and spearman") {
  CHECK(quantile({1, 2, 3, 4}, 0.5) == 2.5);
  CHECK(quantile({5}, 0.9) == 5);
  const std::vector<double> x{1, 2, 3, 4, 5, 6};
  const std::vector<double> up{2, 4, 5, 9, 10, 30};
  const std::vector<double> down{6, 5, 4, 3, 2, 1};
  CHECK(spearman(x, up).rho == doctest::Approx(1.0));
  CHECK(spearman(x, down).rho == doctest::Approx(-1.0));
  CHECK(spearman(x, down).p_value < 0.01);
  const std::vector<double> flat{1, 1, 1, 1, 1, 1};
  CHECK_THROWS_AS(spearman(x, flat), UndefinedMetric);
}

TEST_CASE("prediction csv round trip") {
  std::vector<PredictionRow> rows{{"a", "p", 0.25, 7.5, 4}, {"b", "q", 0.875, std::nullopt, 12}};
  std::ostringstream out;
  write_predictions_csv(rows, out);
  CHECK(out.str().rfind(std::string(kPredictionsHeader), 0) == 0);
  std::istringstream in(out.str());
  const auto back = read_predictions_csv(in);
  REQUIRE(back.size() == 2);
  CHECK(back[0].score_dep_plus == 0.25);
  CHECK(*back[0].phq_estimate == 7.5);
  CHECK(!back[1].phq_estimate);
  CHECK(back[1].true_phq == 12);
}

}  // TEST_SUITE
