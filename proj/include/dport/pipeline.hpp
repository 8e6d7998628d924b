#pragma once

// End-to-end stages: general-domain LM pretraining, target-domain LM fine-tuning,
// classifier training, prediction and evaluation.

#include <map>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "dport/corpus.hpp"
#include "dport/eval.hpp"
#include "dport/finetune.hpp"
#include "dport/lm.hpp"
#include "dport/tokenizer.hpp"

namespace dport {

/// Mixes a stream index into a seed (splitmix64), so stages draw independent streams.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

struct VocabOptions {
  std::size_t max_size = 4000;
  std::size_t min_freq = 1;
};

struct PretrainOutput {
  Vocabulary vocab;
  LMParams params;
  std::vector<PerplexityPoint> trace;
};

/// Builds the vocabulary from `generic` and trains the LM from scratch.
PretrainOutput pretrain_language_model(const TextSource& generic, const VocabOptions& vocab_opts,
                                       const LMConfig& config);

struct FinetuneConfig {
  /// Plain SGD, so the peak rate is on the scale of the pretraining rate.
  FinetuneSchedule schedule{10.0, 0.1, 32.0, 1, 1.0 / 2.6, 1};
  LMFinetuneOptions options;
  /// Target tokens at least this frequent are added to the vocabulary; 0 disables.
  std::size_t extend_min_freq = 0;
};

struct FinetuneOutput {
  Vocabulary vocab;
  LMParams params;
  std::vector<PerplexityPoint> trace;
  std::size_t added_tokens = 0;
  double target_ppl_before = 0.0;
  double target_ppl_after = 0.0;
};

/// Fine-tunes on unlabelled target text. Perplexities are measured on `held_out`
/// when given, else on `target`.
FinetuneOutput finetune_language_model(const LMParams& pretrained, const Vocabulary& vocab,
                                       const TextSource& target, const FinetuneConfig& config,
                                       const TextSource* held_out = nullptr);

struct ClassifierConfig {
  HeadConfig head;
  FinetuneSchedule schedule{0.004, 0.1, 32.0, 1, 1.0 / 2.6, 1};
  ClassifierTrainOptions options;
};

Classifier train_session_classifier(const LMParams& lm, const Vocabulary& vocab, const Corpus& train,
                                    const ClassifierConfig& config);

std::vector<PredictionRow> predict_corpus(const Classifier& clf, const Vocabulary& vocab, const Corpus& corpus);

struct EvaluateOptions {
  std::vector<int> sweep_thresholds;
  std::size_t bootstrap_resamples = 0;
  double alpha = 0.1;
  EerMode eer_mode = EerMode::per_subgroup;
  std::uint64_t seed = 0;
};

struct EvaluationReport {
  SubgroupRow global;
  std::vector<RocPoint> roc;
  std::map<GroupKey, SubgroupReport> subgroups;
  ConsistencySplit consistency;
  std::optional<AgeSweep> sweep;
  std::map<std::string, BootstrapInterval> bootstrap;
  /// Human-readable notes for every flagged metric.
  std::vector<std::string> flags;

  bool global_flagged() const { return !global.roc_auc.defined(); }
  nlohmann::json to_json() const;
  std::string global_csv() const;
};

EvaluationReport evaluate_records(const std::vector<PredictionRecord>& records, const EvaluateOptions& opts);

}  // namespace dport
