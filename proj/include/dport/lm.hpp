#pragma once

// Word-level multi-layer LSTM language model with weight-dropped (DropConnect)
// recurrent matrices, variational (per-segment) dropout on layer inputs and
// outputs, and embedding-row dropout, trained with truncated BPTT and SGD.
//
// Layout conventions: activations are column-major with one column per
// (timestep, batch row) pair, column index = t * batch + b. Token batches are
// batch x time integer matrices.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "dport/corpus.hpp"
#include "dport/tokenizer.hpp"

namespace dport {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using TokenMatrix = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic>;

enum class Mode { train, eval };

struct LMConfig {
  std::size_t vocab_size = 2000;
  std::size_t embed_dim = 64;
  std::size_t hidden_dim = 128;
  std::size_t n_layers = 2;
  std::size_t bptt_len = 35;
  std::size_t batch_size = 16;
  double dropconnect_p = 0.2;
  double variational_input_p = 0.2;
  double variational_hidden_p = 0.15;
  double embedding_dropout_p = 0.05;
  bool tie_weights = true;
  double lr = 10.0;
  double grad_clip = 0.25;
  std::size_t epochs = 5;
  double init_range = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
  bool any_dropout() const;

  /// Width of layer `l`'s hidden state. With tied weights the top layer is sized
  /// to the embedding so the decoder can reuse the embedding matrix.
  std::size_t layer_hidden_dim(std::size_t l) const;
  std::size_t layer_input_dim(std::size_t l) const;
  std::size_t output_dim() const { return layer_hidden_dim(n_layers - 1); }

  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static LMConfig from_json(const nlohmann::json& j, const LMConfig& defaults);
  static LMConfig from_json(const nlohmann::json& j) { return from_json(j, LMConfig{}); }
};

struct LstmLayer {
  Matrix w_ih;  // 4H x In, gate order (input, forget, cell, output)
  Matrix w_hh;  // 4H x H
  Vector bias;  // 4H
};

/// View of one parameter tensor. `group` counts parameter groups from the top:
/// 0 = decoder (or classifier head), 1 = top LSTM layer, ..., n_layers = bottom
/// LSTM layer, n_layers + 1 = embedding.
struct ParamRef {
  std::string name;
  std::size_t group = 0;
  std::span<double> values;
};

struct ConstParamRef {
  std::string name;
  std::size_t group = 0;
  std::span<const double> values;
};

struct LMParams {
  LMConfig config;
  Matrix embedding;  // V x E
  std::vector<LstmLayer> layers;
  Matrix decoder;  // V x D, empty when weights are tied
  Vector decoder_bias;

  /// Uniform(-init_range, init_range) weights, zero biases, seeded from config.seed.
  static LMParams initialize(const LMConfig& config);
  static LMParams zeros(const LMConfig& config);
  LMParams zeros_like() const { return zeros(config); }

  const Matrix& output_weights() const { return config.tie_weights ? embedding : decoder; }
  std::size_t group_count() const { return config.n_layers + 2; }

  std::vector<ParamRef> tensors();
  std::vector<ConstParamRef> tensors() const;
  bool all_finite() const;

  void save(const std::filesystem::path& bin_path) const;
  static LMParams load(const std::filesystem::path& bin_path);
};

bool bitwise_equal(const LMParams& a, const LMParams& b);

struct LMState {
  std::vector<Matrix> h;  // per layer, H_l x batch
  std::vector<Matrix> c;

  static LMState zeros(const LMConfig& config, std::size_t batch);
  std::size_t batch() const { return h.empty() ? 0 : static_cast<std::size_t>(h.front().cols()); }
};

/// Dropout masks for one segment. Entries are 0 or 1/(1-p). Empty members mean
/// "no dropout" for that site.
struct RegMasks {
  Vector embedding_rows;              // V, whole-row scaling
  Matrix input;                       // E x batch, constant over time
  std::vector<Matrix> hidden;         // per layer output, H_l x batch, constant over time
  std::vector<Matrix> dropconnect;    // per layer, same shape as w_hh
};

RegMasks sample_masks(const LMConfig& config, std::size_t batch, std::mt19937_64& rng);

/// Forward tape of the LSTM stack, kept for backpropagation.
struct EncoderTrace {
  struct Layer {
    Matrix input;     // In x TB (after dropout)
    Matrix gates;     // 4H x TB, post-activation
    Matrix cells;     // H x (T+1)B, first block is the carried-in state
    Matrix hiddens;   // H x (T+1)B
    Matrix tanh_c;    // H x TB
    Matrix w_hh_eff;  // DropConnect-masked recurrent weights
  };
  TokenMatrix ids;
  std::size_t batch = 0;
  std::size_t time = 0;
  std::vector<Layer> layers;
  Matrix output;  // top-layer output after dropout, D x TB
  const RegMasks* masks = nullptr;
};

/// Runs the LSTM stack. `masks` may be null (no dropout).
EncoderTrace encoder_forward(const LMParams& params, const TokenMatrix& ids, const LMState& state,
                             const RegMasks* masks, LMState* final_state);

/// Accumulates parameter gradients given dL/d(output). Layers below `lowest_layer`
/// and, when `embedding_grad` is false, the embedding receive no gradient.
void encoder_backward(const LMParams& params, const EncoderTrace& trace, const Matrix& d_output,
                      LMParams& grad, std::size_t lowest_layer = 0, bool embedding_grad = true);

struct LMOutput {
  Matrix logits;  // V x (T*B)
  std::size_t batch = 0;
  std::size_t time = 0;
  LMState state;  // carried state, no gradient attached

  double logit(std::size_t b, std::size_t t, std::size_t v) const {
    return logits(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(t * batch + b));
  }
};

/// Language-model forward pass. Eval mode ignores `masks`.
LMOutput lm_forward(const TokenMatrix& ids, const LMState& state, const LMParams& params,
                    const RegMasks* masks, Mode mode);

/// Mean next-token cross-entropy over positions whose target is not <pad>.
double lm_loss(const LMOutput& out, const TokenMatrix& targets);

struct LMGradient {
  double loss = 0.0;
  std::size_t count = 0;  // non-pad targets
  LMState state;
  LMParams grad;
};

LMGradient lm_loss_and_grad(const LMParams& params, const TokenMatrix& ids,
                            const TokenMatrix& targets, const LMState& state,
                            const RegMasks* masks);

/// Truncated-BPTT segmentation. The stream is cut into `batch` contiguous rows of
/// equal length; segment k covers columns [k*bptt, min((k+1)*bptt, rows)) and its
/// targets are the same positions shifted one token ahead in the stream.
class BpttBatches {
 public:
  struct Segment {
    TokenMatrix input;
    TokenMatrix target;
  };

  BpttBatches(std::span<const int> stream, std::size_t batch, std::size_t bptt_len);

  std::size_t size() const { return n_segments_; }
  std::size_t row_length() const { return row_len_; }
  std::size_t batch() const { return batch_; }
  Segment operator[](std::size_t k) const;

 private:
  std::vector<int> stream_;
  std::size_t batch_;
  std::size_t bptt_;
  std::size_t row_len_;
  std::size_t n_segments_;
};

BpttBatches bptt_batches(std::span<const int> stream, std::size_t batch, std::size_t bptt_len);

struct PerplexityPoint {
  std::size_t epoch = 0;
  double train_ppl = 0.0;
  std::optional<double> valid_ppl;
};

std::string perplexity_trace_csv(std::span<const PerplexityPoint> trace);

struct LMTrainResult {
  LMParams params;
  std::vector<PerplexityPoint> trace;
};

/// Clips the gradient tensors flagged trainable to a global L2 norm of `max_norm`.
/// Returns the norm before clipping.
double clip_global_norm(std::vector<ParamRef>& grads, const std::vector<bool>& trainable_groups,
                        double max_norm);

/// Trains from scratch on the token stream of `train`.
LMTrainResult train_lm(const TextSource& train, const Vocabulary& vocab, const LMConfig& config,
                       const TextSource* valid = nullptr);

/// Continues training `initial` for config.epochs epochs with config.lr.
LMTrainResult train_lm_from(const LMParams& initial, const TextSource& train,
                            const Vocabulary& vocab, const LMConfig& config,
                            const TextSource* valid = nullptr);

/// exp(mean next-token cross-entropy) in eval mode.
double perplexity(const LMParams& params, const Vocabulary& vocab, const TextSource& source,
                  std::size_t batch_size = 1);
double stream_perplexity(const LMParams& params, std::span<const int> stream,
                         std::size_t batch_size, std::size_t bptt_len);

}  // namespace dport

namespace dport {

/// Plain SGD with optional heavy-ball momentum and per-group learning rates.
/// Tensors of frozen groups are left untouched, momentum buffers included.
class SgdOptimizer {
 public:
  explicit SgdOptimizer(double momentum = 0.0) : momentum_(momentum) {}

  void step(const std::vector<ParamRef>& params, const std::vector<ConstParamRef>& grads,
            std::span<const double> group_lrs, const std::vector<bool>& trainable_groups);

 private:
  double momentum_;
  std::vector<std::vector<double>> velocity_;
};

/// Adam with bias correction. Step counts are kept per tensor so frozen groups
/// start their moment estimates fresh when unfrozen.
class AdamOptimizer {
 public:
  AdamOptimizer(double beta1 = 0.9, double beta2 = 0.99, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<ParamRef>& params, const std::vector<ConstParamRef>& grads,
            std::span<const double> group_lrs, const std::vector<bool>& trainable_groups);

 private:
  double beta1_, beta2_, eps_;
  std::vector<std::vector<double>> m_, v_;
  std::vector<std::size_t> t_;
};

}  // namespace dport
