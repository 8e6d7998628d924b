#include "dport/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_map>

#include <boost/math/distributions/students_t.hpp>

#include "dport/errors.hpp"
#include "dport/util.hpp"

namespace dport {

namespace {

constexpr const char* kSingleClass = "single_class";
constexpr const char* kEmpty = "empty";

void split_scores(const std::vector<PredictionRecord>& records, std::vector<double>& pos, std::vector<double>& neg) {
  for (const auto& r : records) (r.positive() ? pos : neg).push_back(r.score);
}

struct Unpacked {
  std::vector<double> scores;
  std::unique_ptr<bool[]> labels;
  std::span<const bool> label_span() const { return {labels.get(), scores.size()}; }
};

Unpacked unpack(const std::vector<PredictionRecord>& records) {
  Unpacked u;
  u.labels = std::make_unique<bool[]>(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    u.scores.push_back(records[i].score);
    u.labels[i] = records[i].positive();
  }
  return u;
}

void require_both_classes(std::size_t np, std::size_t nn) {
  if (np == 0 || nn == 0) {
    throw UndefinedMetric("metric undefined: " + std::to_string(np) + " positive and " + std::to_string(nn) +
                          " negative records");
  }
}

MetricValue auc_or_flag(const std::vector<PredictionRecord>& records) {
  if (records.empty()) return MetricValue::undefined(kEmpty);
  try {
    return MetricValue::of(roc_auc(records));
  } catch (const UndefinedMetric&) {
    return MetricValue::undefined(kSingleClass);
  }
}

SideResult side_of(const std::vector<PredictionRecord>& records) { return {records.size(), auc_or_flag(records)}; }

nlohmann::json side_json(const SideResult& s) { return {{"size", s.size}, {"roc_auc", s.roc_auc.to_json()}}; }

std::string csv_opt(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }

}  // namespace

void PredictionRecord::validate() const {
  if (!std::isfinite(score)) throw ValidationError("non-finite score for session " + session_id);
  if (true_phq < kPhqMin || true_phq > kPhqMax) throw ValidationError("PHQ-8 out of range for session " + session_id);
  if (binarize_phq(true_phq) != true_class) throw ValidationError("class disagrees with PHQ-8 for session " + session_id);
}

nlohmann::json MetricValue::to_json() const {
  if (value) return *value;
  return {{"undefined", flag}};
}

std::string MetricValue::to_csv() const { return value ? format_double(*value) : "undefined:" + flag; }

// -- ROC --------------------------------------------------------------------------------

std::uint64_t mann_whitney_2u(std::span<const double> pos, std::span<const double> neg) {
  require_both_classes(pos.size(), neg.size());
  std::vector<std::pair<double, bool>> all;
  all.reserve(pos.size() + neg.size());
  for (double s : pos) all.emplace_back(s, true);
  for (double s : neg) all.emplace_back(s, false);
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  // Twice the positive rank sum using midranks, kept integral.
  std::uint64_t twice_rank_sum = 0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    std::uint64_t group_pos = 0;
    while (j < all.size() && all[j].first == all[i].first) group_pos += all[j++].second ? 1 : 0;
    twice_rank_sum += group_pos * (i + 1 + j);
    i = j;
  }
  const std::uint64_t np = pos.size();
  return twice_rank_sum - np * (np + 1);
}

double roc_auc(std::span<const double> pos, std::span<const double> neg) {
  const auto two_u = mann_whitney_2u(pos, neg);
  return static_cast<double>(two_u) / (2.0 * static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

double roc_auc(const std::vector<PredictionRecord>& records) {
  std::vector<double> pos, neg;
  split_scores(records, pos, neg);
  return roc_auc(pos, neg);
}

namespace {

struct Tally {
  double threshold;
  std::size_t tp;
  std::size_t fp;
};

// Cumulative counts for thresholds at +inf and each distinct score, descending.
std::vector<Tally> tallies(std::span<const double> scores, std::span<const bool> positive, std::size_t& np,
                           std::size_t& nn) {
  if (scores.size() != positive.size()) throw ValidationError("scores and labels differ in length");
  np = static_cast<std::size_t>(std::count(positive.begin(), positive.end(), true));
  nn = scores.size() - np;
  require_both_classes(np, nn);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<Tally> out{{std::numeric_limits<double>::infinity(), 0, 0}};
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double s = scores[order[i]];
    while (i < order.size() && scores[order[i]] == s) (positive[order[i++]] ? tp : fp)++;
    out.push_back({s, tp, fp});
  }
  return out;
}

}  // namespace

std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const bool> positive) {
  std::size_t np = 0, nn = 0;
  std::vector<RocPoint> curve;
  for (const auto& t : tallies(scores, positive, np, nn)) {
    curve.push_back({static_cast<double>(t.fp) / static_cast<double>(nn),
                     static_cast<double>(t.tp) / static_cast<double>(np), t.threshold});
  }
  return curve;
}

std::vector<RocPoint> roc_curve(const std::vector<PredictionRecord>& records) {
  const auto u = unpack(records);
  return roc_curve(u.scores, u.label_span());
}

double trapezoid_area(const std::vector<RocPoint>& curve) {
  double area = 0.0;
  for (std::size_t i = 1; i < curve.size(); ++i) {
    area += (curve[i].fpr - curve[i - 1].fpr) * (curve[i].tpr + curve[i - 1].tpr) / 2.0;
  }
  return area;
}

EerPoint eer_operating_point(std::span<const double> scores, std::span<const bool> positive) {
  std::size_t np = 0, nn = 0;
  const auto ts = tallies(scores, positive, np, nn);
  // |FPR - FNR| scaled by np*nn stays integral: |fp*np - fn*nn|.
  const Tally* best = nullptr;
  std::uint64_t best_gap = 0;
  for (const auto& t : ts) {
    const auto a = static_cast<std::uint64_t>(t.fp) * np;
    const auto b = static_cast<std::uint64_t>(np - t.tp) * nn;
    const std::uint64_t gap = a > b ? a - b : b - a;
    if (!best || gap < best_gap || (gap == best_gap && t.tp > best->tp)) {
      best = &t;
      best_gap = gap;
    }
  }
  return {best->threshold, 1.0 - static_cast<double>(best->fp) / static_cast<double>(nn),
          static_cast<double>(best->tp) / static_cast<double>(np)};
}

EerPoint eer_operating_point(const std::vector<PredictionRecord>& records) {
  const auto u = unpack(records);
  return eer_operating_point(u.scores, u.label_span());
}

std::pair<MetricValue, MetricValue> rates_at(const std::vector<PredictionRecord>& records, double threshold) {
  std::size_t tp = 0, fp = 0, np = 0, nn = 0;
  for (const auto& r : records) {
    const bool pred = r.score >= threshold;
    if (r.positive()) {
      ++np;
      tp += pred;
    } else {
      ++nn;
      fp += pred;
    }
  }
  MetricValue spec = nn ? MetricValue::of(1.0 - static_cast<double>(fp) / static_cast<double>(nn))
                        : MetricValue::undefined("no_negatives");
  MetricValue sens = np ? MetricValue::of(static_cast<double>(tp) / static_cast<double>(np))
                        : MetricValue::undefined("no_positives");
  return {spec, sens};
}

// -- regression -------------------------------------------------------------------------

RegressionErrors regression_errors(const std::vector<PredictionRecord>& records) {
  if (records.empty()) throw UndefinedMetric("regression errors of an empty record list");
  std::vector<std::string> missing;
  double sq = 0.0, abs = 0.0;
  for (const auto& r : records) {
    if (!r.phq_estimate) {
      missing.push_back(r.session_id);
      continue;
    }
    const double e = *r.phq_estimate - static_cast<double>(r.true_phq);
    sq += e * e;
    abs += std::abs(e);
  }
  if (!missing.empty()) {
    std::string msg = std::to_string(missing.size()) + " records lack a PHQ-8 estimate:";
    for (const auto& id : missing) msg += " " + id;
    throw ValidationError(msg);
  }
  const auto n = static_cast<double>(records.size());
  return {std::sqrt(sq / n), abs / n};
}

// -- stratified reports -----------------------------------------------------------------

std::string_view to_string(GroupKey k) {
  switch (k) {
    case GroupKey::age_bucket: return "age_bucket";
    case GroupKey::gender: return "gender";
    case GroupKey::ethnicity: return "ethnicity";
    case GroupKey::consistency: return "consistency";
  }
  return "age_bucket";
}

GroupKey parse_group_key(std::string_view s) {
  for (auto k : {GroupKey::age_bucket, GroupKey::gender, GroupKey::ethnicity, GroupKey::consistency}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown group key '" + std::string(s) + "'");
}

std::string_view to_string(EerMode m) { return m == EerMode::global ? "global" : "per_subgroup"; }

EerMode parse_eer_mode(std::string_view s) {
  if (s == "global") return EerMode::global;
  if (s == "per_subgroup") return EerMode::per_subgroup;
  throw ConfigError("unknown EER mode '" + std::string(s) + "'");
}

std::optional<std::string> group_of(const PredictionRecord& r, GroupKey key) {
  switch (key) {
    case GroupKey::age_bucket:
      if (auto b = r.demographics.effective_bucket()) return std::string(to_string(*b));
      return std::nullopt;
    case GroupKey::gender:
      if (r.demographics.gender == Gender::unspecified) return std::nullopt;
      return std::string(to_string(r.demographics.gender));
    case GroupKey::ethnicity:
      return r.demographics.ethnicity;
    case GroupKey::consistency:
      return std::string(to_string(r.consistency));
  }
  return std::nullopt;
}

SubgroupRow summarize(const std::vector<PredictionRecord>& records, std::string label) {
  SubgroupRow row;
  row.group = std::move(label);
  row.size = records.size();
  for (const auto& r : records) (r.positive() ? row.positives : row.negatives)++;
  row.roc_auc = auc_or_flag(records);
  if (row.roc_auc.defined()) {
    const auto eer = eer_operating_point(records);
    row.specificity_at_eer = MetricValue::of(eer.specificity);
    row.sensitivity_at_eer = MetricValue::of(eer.sensitivity);
  } else {
    row.specificity_at_eer = MetricValue::undefined(row.roc_auc.flag);
    row.sensitivity_at_eer = MetricValue::undefined(row.roc_auc.flag);
  }
  const bool all_estimates = !records.empty() &&
      std::all_of(records.begin(), records.end(), [](const auto& r) { return r.phq_estimate.has_value(); });
  if (all_estimates) {
    const auto err = regression_errors(records);
    row.rmse = err.rmse;
    row.mae = err.mae;
  }
  return row;
}

SubgroupReport subgroup_report(const std::vector<PredictionRecord>& records, GroupKey key, EerMode mode) {
  if (records.empty()) throw ValidationError("subgroup report of an empty record list");
  SubgroupReport report;
  report.key = key;
  report.eer_mode = mode;
  std::map<std::string, std::vector<PredictionRecord>> groups;
  for (const auto& r : records) {
    if (auto g = group_of(r, key)) {
      groups[*g].push_back(r);
    } else {
      ++report.missing_key;
    }
  }
  std::vector<std::string> order;
  if (key == GroupKey::age_bucket) {
    for (auto b : all_age_buckets()) {
      if (groups.count(std::string(to_string(b)))) order.emplace_back(to_string(b));
    }
  } else {
    for (const auto& [g, _] : groups) order.push_back(g);
  }

  std::optional<double> global_threshold;
  if (mode == EerMode::global) {
    try {
      global_threshold = eer_operating_point(records).threshold;
    } catch (const UndefinedMetric&) {
    }
  }
  for (const auto& g : order) {
    SubgroupRow row = summarize(groups.at(g), g);
    if (mode == EerMode::global) {
      if (global_threshold) {
        std::tie(row.specificity_at_eer, row.sensitivity_at_eer) = rates_at(groups.at(g), *global_threshold);
      } else {
        row.specificity_at_eer = MetricValue::undefined("global_eer_undefined");
        row.sensitivity_at_eer = MetricValue::undefined("global_eer_undefined");
      }
    }
    report.rows.push_back(std::move(row));
  }
  return report;
}

nlohmann::json SubgroupReport::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json j{{"group", r.group},
                     {"size", r.size},
                     {"positives", r.positives},
                     {"negatives", r.negatives},
                     {"roc_auc", r.roc_auc.to_json()},
                     {"specificity_at_eer", r.specificity_at_eer.to_json()},
                     {"sensitivity_at_eer", r.sensitivity_at_eer.to_json()}};
    if (r.rmse) j["rmse"] = *r.rmse;
    if (r.mae) j["mae"] = *r.mae;
    rows_json.push_back(std::move(j));
  }
  return {{"key", std::string(to_string(key))},
          {"eer_mode", std::string(to_string(eer_mode))},
          {"missing_key", missing_key},
          {"rows", rows_json}};
}

std::string SubgroupReport::to_csv() const {
  std::ostringstream out;
  out << to_string(key) << ",size,positives,negatives,roc_auc,specificity_at_eer,sensitivity_at_eer,rmse,mae\n";
  for (const auto& r : rows) {
    out << r.group << ',' << r.size << ',' << r.positives << ',' << r.negatives << ',' << r.roc_auc.to_csv() << ','
        << r.specificity_at_eer.to_csv() << ',' << r.sensitivity_at_eer.to_csv() << ',' << csv_opt(r.rmse) << ','
        << csv_opt(r.mae) << '\n';
  }
  return out.str();
}

AgeSweep age_threshold_sweep(const std::vector<PredictionRecord>& records, const std::vector<int>& thresholds) {
  AgeSweep sweep;
  std::vector<const PredictionRecord*> aged;
  for (const auto& r : records) {
    if (r.demographics.age) {
      aged.push_back(&r);
    } else {
      ++sweep.missing_age;
    }
  }
  if (aged.empty()) throw ValidationError("no record carries a numeric age");
  for (int a : thresholds) {
    std::vector<PredictionRecord> below, beyond;
    for (const auto* r : aged) (*r->demographics.age < a ? below : beyond).push_back(*r);
    sweep.rows.push_back({a, side_of(below), side_of(beyond)});
  }
  return sweep;
}

nlohmann::json AgeSweep::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const auto& r : rows) {
    rows_json.push_back({{"threshold", r.threshold}, {"below", side_json(r.below)}, {"beyond", side_json(r.beyond)}});
  }
  return {{"missing_age", missing_age}, {"rows", rows_json}};
}

std::string AgeSweep::to_csv() const {
  std::ostringstream out;
  out << "threshold,below_size,below_auc,beyond_size,beyond_auc\n";
  for (const auto& r : rows) {
    out << r.threshold << ',' << r.below.size << ',' << r.below.roc_auc.to_csv() << ',' << r.beyond.size << ','
        << r.beyond.roc_auc.to_csv() << '\n';
  }
  return out.str();
}

std::vector<int> parse_sweep(std::string_view spec) {
  int parts[3] = {0, 0, 1};
  std::size_t n = 0;
  std::size_t pos = 0;
  while (n < 3) {
    const auto colon = spec.find(':', pos);
    const auto piece = spec.substr(pos, colon == std::string_view::npos ? std::string_view::npos : colon - pos);
    const auto [p, ec] = std::from_chars(piece.data(), piece.data() + piece.size(), parts[n]);
    if (ec != std::errc() || p != piece.data() + piece.size() || piece.empty()) {
      throw ConfigError("bad sweep '" + std::string(spec) + "', expected start:stop:step");
    }
    ++n;
    if (colon == std::string_view::npos) break;
    pos = colon + 1;
  }
  if (n < 2 || parts[2] <= 0 || parts[1] < parts[0]) {
    throw ConfigError("bad sweep '" + std::string(spec) + "', expected start:stop:step with start <= stop");
  }
  std::vector<int> out;
  for (int a = parts[0]; a <= parts[1]; a += parts[2]) out.push_back(a);
  return out;
}

ConsistencySplit consistency_split_eval(const std::vector<PredictionRecord>& records) {
  std::vector<PredictionRecord> c, i;
  for (const auto& r : records) (r.consistency == ConsistencyLabel::consistent ? c : i).push_back(r);
  return {side_of(c), side_of(i)};
}

nlohmann::json ConsistencySplit::to_json() const {
  return {{"consistent", side_json(consistent)}, {"inconsistent", side_json(inconsistent)}};
}

// -- resampling -------------------------------------------------------------------------

std::string_view to_string(Metric m) {
  switch (m) {
    case Metric::auc: return "auc";
    case Metric::rmse: return "rmse";
    case Metric::mae: return "mae";
  }
  return "auc";
}

Metric parse_metric(std::string_view s) {
  for (auto m : {Metric::auc, Metric::rmse, Metric::mae}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("unknown metric '" + std::string(s) + "'");
}

double metric_value(const std::vector<PredictionRecord>& records, Metric metric) {
  switch (metric) {
    case Metric::auc: return roc_auc(records);
    case Metric::rmse: return regression_errors(records).rmse;
    case Metric::mae: return regression_errors(records).mae;
  }
  return 0.0;
}

double quantile(std::vector<double> values, double p) {
  if (values.empty()) throw UndefinedMetric("quantile of an empty sample");
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

namespace {

class Resampler {
 public:
  Resampler(std::uint64_t seed, std::size_t n_resamples)
      : rng_(seed ^ 0xb007'5742'0000'0000ull), limit_(n_resamples) {}

  // Metric on a resample of `records`, redrawing until preconditions hold.
  double draw(const std::vector<PredictionRecord>& records, Metric metric) {
    std::uniform_int_distribution<std::size_t> pick(0, records.size() - 1);
    std::vector<PredictionRecord> sample(records.size());
    for (;;) {
      for (auto& s : sample) s = records[pick(rng_)];
      try {
        return metric_value(sample, metric);
      } catch (const UndefinedMetric&) {
        if (++redrawn > limit_) {
          throw UndefinedMetric("bootstrap aborted: more than half of the resamples were invalid");
        }
      }
    }
  }

  std::size_t redrawn = 0;

 private:
  std::mt19937_64 rng_;
  std::size_t limit_;
};

void check_bootstrap_args(std::size_t n_resamples, double alpha) {
  if (n_resamples == 0) throw ConfigError("n_resamples must be positive");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0,1)");
}

BootstrapInterval percentile_interval(double point, const std::vector<double>& stats, double alpha,
                                      std::size_t redrawn) {
  return {point, quantile(stats, alpha / 2.0), quantile(stats, 1.0 - alpha / 2.0), stats.size(), redrawn};
}

}  // namespace

BootstrapInterval bootstrap_ci(const std::vector<PredictionRecord>& records, Metric metric,
                               std::size_t n_resamples, double alpha, std::uint64_t seed) {
  check_bootstrap_args(n_resamples, alpha);
  const double point = metric_value(records, metric);
  Resampler rs(seed, n_resamples);
  std::vector<double> stats;
  stats.reserve(n_resamples);
  for (std::size_t k = 0; k < n_resamples; ++k) stats.push_back(rs.draw(records, metric));
  return percentile_interval(point, stats, alpha, rs.redrawn);
}

BootstrapInterval bootstrap_difference_ci(const std::vector<PredictionRecord>& a,
                                          const std::vector<PredictionRecord>& b, Metric metric,
                                          std::size_t n_resamples, double alpha, std::uint64_t seed) {
  check_bootstrap_args(n_resamples, alpha);
  const double point = metric_value(a, metric) - metric_value(b, metric);
  Resampler rs(seed, 2 * n_resamples);
  std::vector<double> stats;
  stats.reserve(n_resamples);
  for (std::size_t k = 0; k < n_resamples; ++k) {
    const double ma = rs.draw(a, metric);
    stats.push_back(ma - rs.draw(b, metric));
  }
  return percentile_interval(point, stats, alpha, rs.redrawn);
}

nlohmann::json BootstrapInterval::to_json() const {
  return {{"point", point}, {"lower", lower}, {"upper", upper}, {"n_resamples", n_resamples}, {"redrawn", redrawn}};
}

namespace {

std::vector<double> midranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && v[order[j]] == v[order[i]]) ++j;
    const double r = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = r;
    i = j;
  }
  return ranks;
}

}  // namespace

SpearmanResult spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ValidationError("spearman inputs differ in length");
  const std::size_t n = x.size();
  if (n < 3) throw UndefinedMetric("spearman needs at least 3 pairs");
  const auto rx = midranks(x);
  const auto ry = midranks(y);
  const double mean = (static_cast<double>(n) + 1.0) / 2.0;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (rx[i] - mean) * (ry[i] - mean);
    sxx += (rx[i] - mean) * (rx[i] - mean);
    syy += (ry[i] - mean) * (ry[i] - mean);
  }
  if (sxx == 0.0 || syy == 0.0) throw UndefinedMetric("spearman of a constant sequence");
  SpearmanResult res;
  res.n = n;
  res.rho = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
  const double df = static_cast<double>(n) - 2.0;
  if (std::abs(res.rho) >= 1.0) {
    res.p_value = 0.0;
  } else {
    const double t = res.rho * std::sqrt(df / (1.0 - res.rho * res.rho));
    const boost::math::students_t dist(df);
    res.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
  }
  return res;
}

// -- prediction files -------------------------------------------------------------------

void write_predictions_csv(const std::vector<PredictionRow>& rows, std::ostream& out) {
  out << kPredictionsHeader << '\n';
  for (const auto& r : rows) {
    for (const auto* id : {&r.session_id, &r.subject_id}) {
      if (id->find_first_of(",\"\n") != std::string::npos) {
        throw ValidationError("identifier '" + *id + "' cannot be written to CSV");
      }
    }
    out << r.session_id << ',' << r.subject_id << ',' << format_double(r.score_dep_plus) << ','
        << csv_opt(r.phq_estimate) << ',' << r.true_phq << ',' << to_string(binarize_phq(r.true_phq)) << '\n';
  }
}

void save_predictions_csv(const std::vector<PredictionRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path.string());
  write_predictions_csv(rows, out);
}

namespace {

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  for (;;) {
    const auto c = line.find(',', pos);
    out.push_back(line.substr(pos, c == std::string_view::npos ? std::string_view::npos : c - pos));
    if (c == std::string_view::npos) break;
    pos = c + 1;
  }
  return out;
}

template <typename T>
T parse_number(std::string_view s, std::size_t line, const char* field) {
  T v{};
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || p != s.data() + s.size()) {
    throw ParseError(line, std::string("bad ") + field + " '" + std::string(s) + "'");
  }
  return v;
}

}  // namespace

std::vector<PredictionRow> read_predictions_csv(std::istream& in) {
  std::string line;
  std::size_t lineno = 1;
  if (!std::getline(in, line)) throw ParseError(1, "empty predictions file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kPredictionsHeader) throw ParseError(1, "unexpected header '" + line + "'");
  std::vector<PredictionRow> rows;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split_commas(line);
    if (f.size() != 6) throw ParseError(lineno, "expected 6 fields, got " + std::to_string(f.size()));
    PredictionRow r;
    r.session_id = std::string(f[0]);
    r.subject_id = std::string(f[1]);
    r.score_dep_plus = parse_number<double>(f[2], lineno, "score_dep_plus");
    if (!f[3].empty()) r.phq_estimate = parse_number<double>(f[3], lineno, "phq_estimate");
    r.true_phq = parse_number<int>(f[4], lineno, "true_phq");
    if (r.true_phq < kPhqMin || r.true_phq > kPhqMax) throw ParseError(lineno, "true_phq out of range");
    if (f[5] != to_string(binarize_phq(r.true_phq))) throw ParseError(lineno, "true_class disagrees with true_phq");
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<PredictionRow> load_predictions_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + path.string());
  return read_predictions_csv(in);
}

std::vector<PredictionRecord> join_predictions(const std::vector<PredictionRow>& rows, const Corpus& corpus) {
  struct Hit {
    const Subject* subject;
    const Session* session;
    ConsistencyLabel consistency;
  };
  std::unordered_map<std::string_view, Hit> index;
  for (const auto& subj : corpus.subjects) {
    const auto label = label_subject_consistency(subj);
    for (const auto& s : subj.sessions) index.emplace(s.session_id, Hit{&subj, &s, label});
  }
  std::vector<PredictionRecord> out;
  std::vector<std::string> unmatched;
  for (const auto& r : rows) {
    const auto it = index.find(r.session_id);
    if (it == index.end()) {
      unmatched.push_back(r.session_id);
      continue;
    }
    const auto& hit = it->second;
    if (hit.session->phq8_score != r.true_phq) {
      throw ValidationError("PHQ-8 mismatch for session " + r.session_id);
    }
    PredictionRecord rec;
    rec.session_id = r.session_id;
    rec.subject_id = hit.subject->subject_id;
    rec.score = r.score_dep_plus;
    rec.phq_estimate = r.phq_estimate;
    rec.true_phq = r.true_phq;
    rec.true_class = binarize_phq(r.true_phq);
    rec.demographics = hit.subject->demographics;
    rec.consistency = hit.consistency;
    rec.validate();
    out.push_back(std::move(rec));
  }
  if (!unmatched.empty()) {
    std::string msg = std::to_string(unmatched.size()) + " of " + std::to_string(rows.size()) +
                      " predictions did not join to corpus '" + corpus.name + "':";
    for (std::size_t i = 0; i < std::min<std::size_t>(unmatched.size(), 10); ++i) msg += " " + unmatched[i];
    if (unmatched.size() > 10) msg += " ...";
    throw ValidationError(msg);
  }
  return out;
}

}  // namespace dport
