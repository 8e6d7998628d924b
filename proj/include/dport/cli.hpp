#pragma once

// Config-driven stages behind the `dport` command. Each stage writes its artifacts
// plus a `<stage>_manifest.json` (hashes and a timestamp) and returns a JSON summary.

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dport/config.hpp"

namespace dport::cli {

enum class Stage { pretrain_lm, finetune_lm, train_clf };
std::string_view to_string(Stage s);
Stage parse_stage(std::string_view s);

/// Thrown when a stage input produced by an earlier stage is absent.
class MissingArtifact : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

nlohmann::json cmd_synth(const RunConfig& cfg);
nlohmann::json cmd_train(const RunConfig& cfg, Stage stage, bool skip_finetune = false);

struct PredictTarget {
  std::string name;                   // output stem
  std::filesystem::path corpus;       // JSONL
};

/// Default targets: the GP test split and the SP corpus.
std::vector<PredictTarget> default_predict_targets(const RunConfig& cfg);
nlohmann::json cmd_predict(const RunConfig& cfg, const std::vector<PredictTarget>& targets);

struct EvaluateTarget {
  std::string name;
  std::filesystem::path predictions;
  std::filesystem::path corpus;
};

std::vector<EvaluateTarget> default_evaluate_targets(const RunConfig& cfg);

struct EvaluateResult {
  nlohmann::json summary;
  bool global_flagged = false;
  bool any_flagged = false;
};

EvaluateResult cmd_evaluate(const RunConfig& cfg, const std::vector<EvaluateTarget>& targets);

/// Renders the stored evaluation reports as text tables and a comparison chart.
nlohmann::json cmd_report(const RunConfig& cfg, std::ostream& out);

/// Full command line entry point. Returns the process exit code: 0 success, 1 usage,
/// configuration or input error, 2 degenerate data (undefined global metrics, or any
/// flagged metric with --strict).
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv);

}  // namespace dport::cli
