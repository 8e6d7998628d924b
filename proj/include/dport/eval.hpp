#pragma once

// Session-level metric engine: ROC AUC, EER operating point, regression errors,
// demographic subgroup tables, age-threshold sweeps, consistency strata and
// bootstrap intervals. Undefined metrics are reported as flagged values.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dport/corpus.hpp"

namespace dport {

struct PredictionRecord {
  std::string session_id;
  std::string subject_id;
  double score = 0.5;
  std::optional<double> phq_estimate;
  DepressionClass true_class = DepressionClass::dep_minus;
  int true_phq = 0;
  Demographics demographics;
  ConsistencyLabel consistency = ConsistencyLabel::consistent;

  bool positive() const { return true_class == DepressionClass::dep_plus; }
  /// Checks score finiteness, PHQ range and class/score agreement.
  void validate() const;
};

/// A metric that is either a number or a reason it is undefined.
struct MetricValue {
  std::optional<double> value;
  std::string flag;

  static MetricValue of(double v) { return {v, {}}; }
  static MetricValue undefined(std::string why) { return {std::nullopt, std::move(why)}; }
  bool defined() const { return value.has_value(); }
  nlohmann::json to_json() const;
  std::string to_csv() const;
};

// -- ROC ------------------------------------------------------------------------------

/// Mann-Whitney AUC with half credit for ties. Throws UndefinedMetric when either
/// side is empty.
double roc_auc(std::span<const double> positive_scores, std::span<const double> negative_scores);
double roc_auc(const std::vector<PredictionRecord>& records);

/// Twice the Mann-Whitney U statistic (integer-valued).
std::uint64_t mann_whitney_2u(std::span<const double> positive_scores, std::span<const double> negative_scores);

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  double threshold = std::numeric_limits<double>::infinity();  // predict dep+ iff score >= threshold
};

/// Starts at (0, 0) with an infinite threshold, then one point per distinct score in
/// decreasing order, ending at (1, 1).
std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const bool> positive);
std::vector<RocPoint> roc_curve(const std::vector<PredictionRecord>& records);
double trapezoid_area(const std::vector<RocPoint>& curve);

struct EerPoint {
  double threshold = 0.0;
  double specificity = 0.0;
  double sensitivity = 0.0;
};

/// Threshold among observed scores minimising |FPR - FNR|; ties go to the higher
/// sensitivity, then to the higher threshold.
EerPoint eer_operating_point(std::span<const double> scores, std::span<const bool> positive);
EerPoint eer_operating_point(const std::vector<PredictionRecord>& records);

/// Specificity and sensitivity when predicting dep+ for score >= threshold.
std::pair<MetricValue, MetricValue> rates_at(const std::vector<PredictionRecord>& records, double threshold);

// -- regression -----------------------------------------------------------------------

struct RegressionErrors {
  double rmse = 0.0;
  double mae = 0.0;
};

/// Throws ValidationError listing the sessions without an estimate.
RegressionErrors regression_errors(const std::vector<PredictionRecord>& records);

// -- stratified reports ---------------------------------------------------------------

enum class GroupKey { age_bucket, gender, ethnicity, consistency };
enum class EerMode { per_subgroup, global };

std::string_view to_string(GroupKey k);
GroupKey parse_group_key(std::string_view s);
std::string_view to_string(EerMode m);
EerMode parse_eer_mode(std::string_view s);

/// Group label for a record, or nullopt when the key is missing.
std::optional<std::string> group_of(const PredictionRecord& record, GroupKey key);

struct SubgroupRow {
  std::string group;
  std::size_t size = 0;
  std::size_t positives = 0;
  std::size_t negatives = 0;
  MetricValue roc_auc;
  MetricValue specificity_at_eer;
  MetricValue sensitivity_at_eer;
  std::optional<double> rmse;
  std::optional<double> mae;
};

struct SubgroupReport {
  GroupKey key = GroupKey::age_bucket;
  EerMode eer_mode = EerMode::per_subgroup;
  std::vector<SubgroupRow> rows;
  std::size_t missing_key = 0;

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

/// Same metrics computed on a whole record list.
SubgroupRow summarize(const std::vector<PredictionRecord>& records, std::string label);

SubgroupReport subgroup_report(const std::vector<PredictionRecord>& records, GroupKey key,
                               EerMode mode = EerMode::per_subgroup);

struct SideResult {
  std::size_t size = 0;
  MetricValue roc_auc;
};

struct SweepRow {
  int threshold = 0;
  SideResult below;   // age < threshold
  SideResult beyond;  // age >= threshold
};

struct AgeSweep {
  std::vector<SweepRow> rows;
  std::size_t missing_age = 0;

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

/// Throws ValidationError when no record carries a numeric age.
AgeSweep age_threshold_sweep(const std::vector<PredictionRecord>& records, const std::vector<int>& thresholds);

/// Parses "start:stop:step" (inclusive) into thresholds.
std::vector<int> parse_sweep(std::string_view spec);

struct ConsistencySplit {
  SideResult consistent;
  SideResult inconsistent;
  nlohmann::json to_json() const;
};

ConsistencySplit consistency_split_eval(const std::vector<PredictionRecord>& records);

// -- resampling -----------------------------------------------------------------------

enum class Metric { auc, rmse, mae };
std::string_view to_string(Metric m);
Metric parse_metric(std::string_view s);

/// Metric on a record list; throws UndefinedMetric when preconditions fail.
double metric_value(const std::vector<PredictionRecord>& records, Metric metric);

struct BootstrapInterval {
  double point = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  std::size_t n_resamples = 0;
  std::size_t redrawn = 0;  // resamples rejected for violating metric preconditions

  double half_width() const { return (upper - lower) / 2.0; }
  nlohmann::json to_json() const;
};

/// Percentile interval at level 1 - alpha from session-level resampling. Invalid
/// resamples are redrawn; more invalid draws than n_resamples is an error.
BootstrapInterval bootstrap_ci(const std::vector<PredictionRecord>& records, Metric metric,
                               std::size_t n_resamples, double alpha, std::uint64_t seed);

/// Interval for metric(a) - metric(b), resampling both lists independently.
BootstrapInterval bootstrap_difference_ci(const std::vector<PredictionRecord>& a,
                                          const std::vector<PredictionRecord>& b, Metric metric,
                                          std::size_t n_resamples, double alpha, std::uint64_t seed);

/// Linear-interpolation sample quantile (type 7) of unsorted values.
double quantile(std::vector<double> values, double p);

struct SpearmanResult {
  double rho = 0.0;
  double p_value = 1.0;  // two-sided, t approximation
  std::size_t n = 0;
};

/// Rank correlation with midranks for ties. Throws UndefinedMetric for fewer than 3
/// pairs or a constant input.
SpearmanResult spearman(std::span<const double> x, std::span<const double> y);

// -- prediction files -----------------------------------------------------------------

struct PredictionRow {
  std::string session_id;
  std::string subject_id;
  double score_dep_plus = 0.5;
  std::optional<double> phq_estimate;
  int true_phq = 0;
};

inline constexpr std::string_view kPredictionsHeader =
    "session_id,subject_id,score_dep_plus,phq_estimate,true_phq,true_class";

void write_predictions_csv(const std::vector<PredictionRow>& rows, std::ostream& out);
void save_predictions_csv(const std::vector<PredictionRow>& rows, const std::filesystem::path& path);
std::vector<PredictionRow> read_predictions_csv(std::istream& in);
std::vector<PredictionRow> load_predictions_csv(const std::filesystem::path& path);

/// Attaches demographics and subject consistency (from the full subject history in
/// `corpus`). Unmatched session ids raise a ValidationError listing them with a count.
std::vector<PredictionRecord> join_predictions(const std::vector<PredictionRow>& rows, const Corpus& corpus);

}  // namespace dport
