#pragma once

// Transfer stage: unlabelled target-domain LM fine-tuning followed by supervised
// classifier/regressor training with discriminative learning rates, a slanted
// triangular schedule and gradual unfreezing.
//
// Parameter groups are numbered from the top: 0 is the head (the decoder during
// LM fine-tuning), 1..n are the LSTM layers from top to bottom and n+1 is the
// embedding.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dport/corpus.hpp"
#include "dport/lm.hpp"
#include "dport/tokenizer.hpp"

namespace dport {

struct FinetuneSchedule {
  double lr_max = 0.01;
  double cut_frac = 0.1;
  double ratio = 32.0;
  std::size_t total_steps = 1;
  double layer_decay = 1.0 / 2.6;
  std::size_t unfreeze_per_epoch = 1;

  void validate() const;
  std::size_t cut() const;
  FinetuneSchedule with_total_steps(std::size_t steps) const;

  nlohmann::json to_json() const;
  static FinetuneSchedule from_json(const nlohmann::json& j, const FinetuneSchedule& defaults);
  static FinetuneSchedule from_json(const nlohmann::json& j) { return from_json(j, FinetuneSchedule{}); }
};

/// Slanted triangular learning rate at step t (0 <= t < total_steps).
/// Rises linearly from lr_max/ratio to lr_max over the first `cut` steps and
/// decays linearly afterwards. The decay fraction is clamped at zero when
/// total_steps * cut_frac is not integral.
double stlr(std::size_t t, const FinetuneSchedule& sched);

/// Per-layer rates, bottom layer first; the top layer receives base_lr.
std::vector<double> discriminative_lrs(double base_lr, std::size_t n_layers, double layer_decay);

/// Indices (0 = top) of the groups trainable at `epoch`: the top
/// min(1 + epoch * per_epoch, n_groups) groups.
std::vector<std::size_t> unfreeze_plan(std::size_t epoch, std::size_t n_groups,
                                       std::size_t per_epoch = 1);

struct LMFinetuneOptions {
  std::size_t epochs = 2;
  std::size_t batch_size = 16;
  std::size_t bptt_len = 35;
  double grad_clip = 0.25;
  bool gradual_unfreeze = false;
  /// Dropout probabilities; taken from the pretrained config when unset.
  std::optional<LMConfig> regularization;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static LMFinetuneOptions from_json(const nlohmann::json& j, const LMFinetuneOptions& defaults);
  static LMFinetuneOptions from_json(const nlohmann::json& j) { return from_json(j, LMFinetuneOptions{}); }
};

/// Number of optimisation steps finetune_lm will take.
std::size_t finetune_lm_steps(const Vocabulary& vocab, const TextSource& target,
                              const LMFinetuneOptions& opts);

/// LM objective only; `target` is read through the TextSource interface so labels
/// are never touched. The vocabulary must be the one the model was trained with
/// (target OOV words map to <unk>); use extend_vocabulary first to add rows.
LMParams finetune_lm(const LMParams& pretrained, const Vocabulary& vocab, const TextSource& target,
                     const FinetuneSchedule& sched, const LMFinetuneOptions& opts,
                     std::vector<PerplexityPoint>* trace = nullptr);

/// Adds target-domain tokens with count >= min_freq to the vocabulary and grows the
/// embedding (and untied decoder) with rows initialised to the mean embedding.
/// Returns the number of tokens added.
std::size_t extend_vocabulary(LMParams& params, Vocabulary& vocab, const TextSource& target,
                              std::size_t min_freq);

enum class Task { binary, regression, joint };
std::string_view to_string(Task t);
Task parse_task(std::string_view s);

struct HeadConfig {
  std::size_t hidden = 50;
  Task task = Task::joint;
  double lambda_regression = 1.0;

  nlohmann::json to_json() const;
  static HeadConfig from_json(const nlohmann::json& j, const HeadConfig& defaults);
  static HeadConfig from_json(const nlohmann::json& j) { return from_json(j, HeadConfig{}); }
};

/// Concat(last, max, mean) pooling -> tanh dense -> class logits and PHQ estimate.
struct ClassifierHead {
  HeadConfig config;
  Matrix w_hidden;  // hidden x 3D
  Vector b_hidden;
  Matrix w_class;   // 2 x hidden
  Vector b_class;
  Matrix w_reg;     // 1 x hidden
  Vector b_reg;

  static ClassifierHead zeros(const HeadConfig& config, std::size_t encoder_dim);
  static ClassifierHead initialize(const HeadConfig& config, std::size_t encoder_dim, std::uint64_t seed);
  std::size_t input_dim() const { return static_cast<std::size_t>(w_hidden.cols()); }

  std::vector<ParamRef> tensors();
  std::vector<ConstParamRef> tensors() const;
};

struct Classifier {
  LMParams encoder;  // decoder weights unused
  ClassifierHead head;
  TextMode text_mode = TextMode::concatenate_responses;
  std::size_t max_tokens = 400;

  std::size_t group_count() const { return encoder.config.n_layers + 2; }
  /// Head tensors (group 0) followed by the encoder's LSTM and embedding tensors.
  std::vector<ParamRef> tensors();
  std::vector<ConstParamRef> tensors() const;

  void save(const std::filesystem::path& bin_path) const;
  static Classifier load(const std::filesystem::path& bin_path);
};

struct ClassifierTrainOptions {
  std::size_t epochs = 4;
  std::size_t batch_size = 16;
  std::size_t max_tokens = 400;
  /// "sgd" (heavy-ball momentum) or "adam" (momentum is beta1).
  std::string optimizer = "sgd";
  double momentum = 0.9;
  double adam_beta2 = 0.99;
  double grad_clip = 1.0;
  bool gradual_unfreeze = true;
  TextMode text_mode = TextMode::concatenate_responses;
  double dropconnect_p = 0.1;
  double variational_input_p = 0.1;
  double variational_hidden_p = 0.1;
  double embedding_dropout_p = 0.0;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static ClassifierTrainOptions from_json(const nlohmann::json& j, const ClassifierTrainOptions& defaults);
  static ClassifierTrainOptions from_json(const nlohmann::json& j) { return from_json(j, ClassifierTrainOptions{}); }
};

/// One encoded training example.
struct Example {
  std::vector<int> ids;
  int phq = 0;
};

std::vector<Example> make_examples(const SessionSource& labeled, const Vocabulary& vocab,
                                   TextMode mode, std::size_t max_tokens);

std::size_t classifier_steps(std::size_t n_examples, const ClassifierTrainOptions& opts);

struct ClassifierLoss {
  double loss = 0.0;
  double xent = 0.0;
  double mse = 0.0;
};

/// Loss and gradient for one padded batch. `grad` must be shaped like `clf`.
/// Only the top `active_groups` groups receive gradient; backprop stops below them.
ClassifierLoss classifier_loss_and_grad(const Classifier& clf, const std::vector<const Example*>& batch,
                                        const RegMasks* masks, Classifier* grad,
                                        std::size_t active_groups = static_cast<std::size_t>(-1));

/// Eval-mode outputs for one id sequence: (P(dep+), unclamped PHQ-8 estimate).
std::pair<double, double> classifier_forward(const Classifier& clf, std::span<const int> ids);

struct ClassifierEpoch {
  std::size_t epoch = 0;
  double loss = 0.0;
  double xent = 0.0;
  double mse = 0.0;
};

std::string classifier_trace_csv(std::span<const ClassifierEpoch> trace);

Classifier train_classifier(const LMParams& lm, const HeadConfig& head, const SessionSource& labeled,
                            const Vocabulary& vocab, const FinetuneSchedule& sched,
                            const ClassifierTrainOptions& opts, std::vector<ClassifierEpoch>* trace = nullptr);

struct SessionPrediction {
  double score_dep_plus = 0.5;
  std::optional<double> phq_estimate;
};

/// Eval-mode prediction. per_response mode averages response-level outputs.
SessionPrediction predict_session(const Classifier& clf, const Vocabulary& vocab, const Session& session,
                                  TextMode mode);

}  // namespace dport
