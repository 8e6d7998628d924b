#include "dport/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <utility>

#include "dport/errors.hpp"
#include "dport/util.hpp"
#include "tensor_io.hpp"

namespace dport {

namespace {

constexpr std::string_view kClassifierMagic = "DPORTCL1";
constexpr double kPhqScale = 24.0;

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const char* what) {
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError(std::string("unknown ") + what + " key '" + key + "'");
  }
}

std::vector<bool> trainable_mask(std::size_t epoch, std::size_t n_groups, bool gradual,
                                 std::size_t per_epoch) {
  std::vector<bool> mask(n_groups, !gradual);
  if (gradual) {
    for (std::size_t g : unfreeze_plan(epoch, n_groups, per_epoch)) mask[g] = true;
  }
  return mask;
}

// Group rates indexed from the top (group 0 = head/decoder).
std::vector<double> group_rates(double top_lr, std::size_t n_groups, double decay) {
  auto bottom_up = discriminative_lrs(top_lr, n_groups, decay);
  return {bottom_up.rbegin(), bottom_up.rend()};
}

}  // namespace

// -- schedules -------------------------------------------------------------------------

void FinetuneSchedule::validate() const {
  if (!(lr_max >= 0.0)) throw ConfigError("lr_max must be >= 0");
  if (!(cut_frac > 0.0 && cut_frac < 1.0)) throw ConfigError("cut_frac must lie in (0,1)");
  if (!(ratio > 1.0)) throw ConfigError("ratio must be > 1");
  if (total_steps == 0) throw ConfigError("total_steps must be > 0");
  if (!(layer_decay > 0.0 && layer_decay <= 1.0)) throw ConfigError("layer_decay must lie in (0,1]");
  if (unfreeze_per_epoch < 1) throw ConfigError("unfreeze_per_epoch must be >= 1");
  if (cut() < 1) throw ConfigError("floor(total_steps * cut_frac) must be >= 1");
}

std::size_t FinetuneSchedule::cut() const {
  return static_cast<std::size_t>(std::floor(static_cast<double>(total_steps) * cut_frac));
}

FinetuneSchedule FinetuneSchedule::with_total_steps(std::size_t steps) const {
  FinetuneSchedule s = *this;
  s.total_steps = steps;
  // Short runs still need a warm-up step.
  if (s.cut() < 1 && steps > 0) s.cut_frac = std::min(0.5, 1.0 / static_cast<double>(steps));
  return s;
}

nlohmann::json FinetuneSchedule::to_json() const {
  return {{"lr_max", lr_max},       {"cut_frac", cut_frac},       {"ratio", ratio},
          {"total_steps", total_steps}, {"layer_decay", layer_decay},
          {"unfreeze_per_epoch", unfreeze_per_epoch}};
}

FinetuneSchedule FinetuneSchedule::from_json(const nlohmann::json& j, const FinetuneSchedule& d) {
  reject_unknown(j, {"lr_max", "cut_frac", "ratio", "total_steps", "layer_decay", "unfreeze_per_epoch"},
                 "schedule");
  FinetuneSchedule s = d;
  s.lr_max = j.value("lr_max", s.lr_max);
  s.cut_frac = j.value("cut_frac", s.cut_frac);
  s.ratio = j.value("ratio", s.ratio);
  s.total_steps = j.value("total_steps", s.total_steps);
  s.layer_decay = j.value("layer_decay", s.layer_decay);
  s.unfreeze_per_epoch = j.value("unfreeze_per_epoch", s.unfreeze_per_epoch);
  return s;
}

double stlr(std::size_t t, const FinetuneSchedule& sched) {
  sched.validate();
  if (t >= sched.total_steps) {
    throw DomainError("step " + std::to_string(t) + " outside schedule of " +
                      std::to_string(sched.total_steps) + " steps");
  }
  const double cut = static_cast<double>(sched.cut());
  const double td = static_cast<double>(t);
  double p = td < cut ? td / cut : 1.0 - (td - cut) / (cut * (1.0 / sched.cut_frac - 1.0));
  p = std::max(p, 0.0);
  return sched.lr_max * (1.0 + p * (sched.ratio - 1.0)) / sched.ratio;
}

std::vector<double> discriminative_lrs(double base_lr, std::size_t n_layers, double layer_decay) {
  if (n_layers < 1) throw DomainError("n_layers must be >= 1");
  std::vector<double> lrs(n_layers);
  lrs[n_layers - 1] = base_lr;
  for (std::size_t i = n_layers - 1; i-- > 0;) lrs[i] = lrs[i + 1] * layer_decay;
  return lrs;
}

std::vector<std::size_t> unfreeze_plan(std::size_t epoch, std::size_t n_groups, std::size_t per_epoch) {
  if (n_groups < 1) throw DomainError("n_groups must be >= 1");
  if (per_epoch < 1) throw DomainError("per_epoch must be >= 1");
  const std::size_t k = std::min(n_groups, 1 + epoch * per_epoch);
  std::vector<std::size_t> groups(k);
  std::iota(groups.begin(), groups.end(), std::size_t{0});
  return groups;
}

// -- LM fine-tuning ------------------------------------------------------------------

nlohmann::json LMFinetuneOptions::to_json() const {
  nlohmann::json j{{"epochs", epochs},       {"batch_size", batch_size},
                   {"bptt_len", bptt_len},   {"grad_clip", grad_clip},
                   {"gradual_unfreeze", gradual_unfreeze}, {"seed", seed}};
  return j;
}

LMFinetuneOptions LMFinetuneOptions::from_json(const nlohmann::json& j, const LMFinetuneOptions& d) {
  reject_unknown(j, {"epochs", "batch_size", "bptt_len", "grad_clip", "gradual_unfreeze", "seed"},
                 "LM fine-tuning");
  LMFinetuneOptions o = d;
  o.epochs = j.value("epochs", o.epochs);
  o.batch_size = j.value("batch_size", o.batch_size);
  o.bptt_len = j.value("bptt_len", o.bptt_len);
  o.grad_clip = j.value("grad_clip", o.grad_clip);
  o.gradual_unfreeze = j.value("gradual_unfreeze", o.gradual_unfreeze);
  o.seed = j.value("seed", o.seed);
  return o;
}

std::size_t finetune_lm_steps(const Vocabulary& vocab, const TextSource& target,
                              const LMFinetuneOptions& opts) {
  const auto stream = encode_stream(target, vocab);
  return opts.epochs * BpttBatches(stream, opts.batch_size, opts.bptt_len).size();
}

LMParams finetune_lm(const LMParams& pretrained, const Vocabulary& vocab, const TextSource& target,
                     const FinetuneSchedule& sched, const LMFinetuneOptions& opts,
                     std::vector<PerplexityPoint>* trace) {
  if (vocab.size() != pretrained.config.vocab_size) {
    throw ValidationError("vocabulary (" + std::to_string(vocab.size()) + " entries) does not match the " +
                          std::to_string(pretrained.config.vocab_size) +
                          "-row embedding; reconcile with extend_vocabulary");
  }
  LMParams params = pretrained;
  if (opts.epochs == 0) return params;
  if (target.document_count() == 0) throw DomainError("target corpus is empty");

  LMConfig reg = opts.regularization.value_or(pretrained.config);
  reg.vocab_size = pretrained.config.vocab_size;
  reg.embed_dim = pretrained.config.embed_dim;
  reg.hidden_dim = pretrained.config.hidden_dim;
  reg.n_layers = pretrained.config.n_layers;
  reg.tie_weights = pretrained.config.tie_weights;

  const auto stream = encode_stream(target, vocab);
  const BpttBatches batches(stream, opts.batch_size, opts.bptt_len);
  const FinetuneSchedule s = sched.with_total_steps(opts.epochs * batches.size());
  s.validate();

  std::seed_seq seq{static_cast<std::uint32_t>(opts.seed), static_cast<std::uint32_t>(opts.seed >> 32), 0xf17eu};
  std::mt19937_64 rng(seq);
  SgdOptimizer sgd;
  const std::size_t n_groups = params.group_count();
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    const auto trainable = trainable_mask(epoch, n_groups, opts.gradual_unfreeze, s.unfreeze_per_epoch);
    LMState state = LMState::zeros(params.config, opts.batch_size);
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t k = 0; k < batches.size(); ++k, ++step) {
      const auto seg = batches[k];
      RegMasks masks;
      const bool dropout = reg.any_dropout();
      if (dropout) masks = sample_masks(reg, opts.batch_size, rng);
      LMGradient g = lm_loss_and_grad(params, seg.input, seg.target, state, dropout ? &masks : nullptr);
      if (!std::isfinite(g.loss)) {
        throw TrainingDiverged("non-finite loss during LM fine-tuning at step " + std::to_string(step));
      }
      state = std::move(g.state);
      auto grads = g.grad.tensors();
      clip_global_norm(grads, trainable, opts.grad_clip);
      const auto lrs = group_rates(stlr(step, s), n_groups, s.layer_decay);
      sgd.step(params.tensors(), std::as_const(g.grad).tensors(), lrs, trainable);
      total += g.loss * static_cast<double>(g.count);
      count += g.count;
    }
    if (trace) trace->push_back({epoch + 1, std::exp(total / static_cast<double>(count)), std::nullopt});
  }
  return params;
}

std::size_t extend_vocabulary(LMParams& params, Vocabulary& vocab, const TextSource& target,
                              std::size_t min_freq) {
  if (vocab.size() != params.config.vocab_size) throw ValidationError("vocabulary does not match the model");
  const auto counts = count_tokens(target);
  std::vector<std::string> fresh;
  for (const auto& [token, n] : counts) {
    if (n >= min_freq && !vocab.contains(token)) fresh.push_back(token);
  }
  std::sort(fresh.begin(), fresh.end(), [&](const std::string& a, const std::string& b) {
    const auto na = counts.at(a);
    const auto nb = counts.at(b);
    return na != nb ? na > nb : a < b;
  });
  const std::size_t added = vocab.extend(fresh);
  if (added == 0) return 0;

  const auto old_v = params.embedding.rows();
  const auto new_v = static_cast<Eigen::Index>(vocab.size());
  const Eigen::RowVectorXd mean_row = params.embedding.colwise().mean();
  params.embedding.conservativeResize(new_v, Eigen::NoChange);
  params.embedding.bottomRows(new_v - old_v).rowwise() = mean_row;
  if (!params.config.tie_weights) {
    const Eigen::RowVectorXd mean_dec = params.decoder.colwise().mean();
    params.decoder.conservativeResize(new_v, Eigen::NoChange);
    params.decoder.bottomRows(new_v - old_v).rowwise() = mean_dec;
  }
  const double mean_bias = params.decoder_bias.mean();
  params.decoder_bias.conservativeResize(new_v);
  params.decoder_bias.tail(new_v - old_v).setConstant(mean_bias);
  params.config.vocab_size = vocab.size();
  return added;
}

// -- classifier -------------------------------------------------------------------------

std::string_view to_string(Task t) {
  switch (t) {
    case Task::binary: return "binary";
    case Task::regression: return "regression";
    case Task::joint: return "joint";
  }
  return "joint";
}

Task parse_task(std::string_view s) {
  if (s == "binary") return Task::binary;
  if (s == "regression") return Task::regression;
  if (s == "joint") return Task::joint;
  throw ConfigError("unknown task '" + std::string(s) + "'");
}

nlohmann::json HeadConfig::to_json() const {
  return {{"hidden", hidden}, {"task", std::string(to_string(task))}, {"lambda_regression", lambda_regression}};
}

HeadConfig HeadConfig::from_json(const nlohmann::json& j, const HeadConfig& d) {
  reject_unknown(j, {"hidden", "task", "lambda_regression"}, "head");
  HeadConfig h = d;
  h.hidden = j.value("hidden", h.hidden);
  if (j.contains("task")) h.task = parse_task(j.at("task").get<std::string>());
  h.lambda_regression = j.value("lambda_regression", h.lambda_regression);
  return h;
}

ClassifierHead ClassifierHead::zeros(const HeadConfig& config, std::size_t encoder_dim) {
  if (config.hidden == 0) throw ConfigError("head hidden size must be positive");
  const auto Hd = static_cast<Eigen::Index>(config.hidden);
  ClassifierHead h;
  h.config = config;
  h.w_hidden = Matrix::Zero(Hd, static_cast<Eigen::Index>(3 * encoder_dim));
  h.b_hidden = Vector::Zero(Hd);
  h.w_class = Matrix::Zero(2, Hd);
  h.b_class = Vector::Zero(2);
  h.w_reg = Matrix::Zero(1, Hd);
  h.b_reg = Vector::Zero(1);
  return h;
}

ClassifierHead ClassifierHead::initialize(const HeadConfig& config, std::size_t encoder_dim,
                                          std::uint64_t seed) {
  ClassifierHead h = zeros(config, encoder_dim);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0x4eadu};
  std::mt19937_64 rng(seq);
  auto glorot = [&](Matrix& m) {
    const double a = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
    std::uniform_real_distribution<double> u(-a, a);
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = u(rng);
    }
  };
  glorot(h.w_hidden);
  glorot(h.w_class);
  glorot(h.w_reg);
  // Start the regression output at the middle of the PHQ range.
  h.b_reg(0) = 8.0 / kPhqScale;
  return h;
}

std::vector<ParamRef> ClassifierHead::tensors() {
  auto span_of = [](auto& m) { return std::span<double>(m.data(), static_cast<std::size_t>(m.size())); };
  return {{"head.w_hidden", 0, span_of(w_hidden)}, {"head.b_hidden", 0, span_of(b_hidden)},
          {"head.w_class", 0, span_of(w_class)},   {"head.b_class", 0, span_of(b_class)},
          {"head.w_reg", 0, span_of(w_reg)},       {"head.b_reg", 0, span_of(b_reg)}};
}

std::vector<ConstParamRef> ClassifierHead::tensors() const {
  std::vector<ConstParamRef> out;
  for (auto& t : const_cast<ClassifierHead*>(this)->tensors()) {
    out.push_back({t.name, t.group, std::span<const double>(t.values.data(), t.values.size())});
  }
  return out;
}

std::vector<ParamRef> Classifier::tensors() {
  auto out = head.tensors();
  for (auto& t : encoder.tensors()) {
    if (t.group != 0) out.push_back(t);
  }
  return out;
}

std::vector<ConstParamRef> Classifier::tensors() const {
  std::vector<ConstParamRef> out;
  for (auto& t : const_cast<Classifier*>(this)->tensors()) {
    out.push_back({t.name, t.group, std::span<const double>(t.values.data(), t.values.size())});
  }
  return out;
}

void Classifier::save(const std::filesystem::path& bin_path) const {
  nlohmann::json meta{{"encoder_config", encoder.config.to_json()},
                      {"head_config", head.config.to_json()},
                      {"text_mode", std::string(to_string(text_mode))},
                      {"max_tokens", max_tokens}};
  detail::write_tensor_file(bin_path, kClassifierMagic, meta, tensors());
}

Classifier Classifier::load(const std::filesystem::path& bin_path) {
  std::ifstream in;
  const auto meta = detail::read_tensor_header(in, bin_path, kClassifierMagic);
  Classifier clf;
  clf.encoder = LMParams::zeros(LMConfig::from_json(meta.at("encoder_config")));
  clf.head = ClassifierHead::zeros(HeadConfig::from_json(meta.at("head_config")),
                                   clf.encoder.config.output_dim());
  clf.text_mode = parse_text_mode(meta.at("text_mode").get<std::string>());
  clf.max_tokens = meta.at("max_tokens").get<std::size_t>();
  detail::read_tensors(in, clf.tensors());
  return clf;
}

nlohmann::json ClassifierTrainOptions::to_json() const {
  return {{"epochs", epochs},
          {"batch_size", batch_size},
          {"max_tokens", max_tokens},
          {"optimizer", optimizer},
          {"momentum", momentum},
          {"adam_beta2", adam_beta2},
          {"grad_clip", grad_clip},
          {"gradual_unfreeze", gradual_unfreeze},
          {"text_mode", std::string(to_string(text_mode))},
          {"dropconnect_p", dropconnect_p},
          {"variational_input_p", variational_input_p},
          {"variational_hidden_p", variational_hidden_p},
          {"embedding_dropout_p", embedding_dropout_p},
          {"seed", seed}};
}

ClassifierTrainOptions ClassifierTrainOptions::from_json(const nlohmann::json& j,
                                                         const ClassifierTrainOptions& d) {
  reject_unknown(j,
                 {"epochs", "batch_size", "max_tokens", "optimizer", "momentum", "adam_beta2", "grad_clip", "gradual_unfreeze",
                  "text_mode", "dropconnect_p", "variational_input_p", "variational_hidden_p",
                  "embedding_dropout_p", "seed"},
                 "classifier");
  ClassifierTrainOptions o = d;
  o.epochs = j.value("epochs", o.epochs);
  o.batch_size = j.value("batch_size", o.batch_size);
  o.max_tokens = j.value("max_tokens", o.max_tokens);
  o.optimizer = j.value("optimizer", o.optimizer);
  if (o.optimizer != "sgd" && o.optimizer != "adam") {
    throw ConfigError("classifier optimizer must be 'sgd' or 'adam', got '" + o.optimizer + "'");
  }
  o.momentum = j.value("momentum", o.momentum);
  o.adam_beta2 = j.value("adam_beta2", o.adam_beta2);
  o.grad_clip = j.value("grad_clip", o.grad_clip);
  o.gradual_unfreeze = j.value("gradual_unfreeze", o.gradual_unfreeze);
  if (j.contains("text_mode")) o.text_mode = parse_text_mode(j.at("text_mode").get<std::string>());
  o.dropconnect_p = j.value("dropconnect_p", o.dropconnect_p);
  o.variational_input_p = j.value("variational_input_p", o.variational_input_p);
  o.variational_hidden_p = j.value("variational_hidden_p", o.variational_hidden_p);
  o.embedding_dropout_p = j.value("embedding_dropout_p", o.embedding_dropout_p);
  o.seed = j.value("seed", o.seed);
  return o;
}

namespace {

std::vector<int> encode_unit(const std::string& text, const Vocabulary& vocab, std::size_t max_tokens) {
  std::vector<int> ids{Vocabulary::bos_id};
  auto body = encode(text, vocab);
  ids.insert(ids.end(), body.begin(), body.end());
  if (max_tokens > 0 && ids.size() > max_tokens) ids.resize(max_tokens);
  return ids;
}

struct HeadForward {
  Matrix pooled;  // 3D x B
  Matrix hidden;  // Hd x B (post tanh)
  Matrix logits;  // 2 x B
  Matrix reg;     // 1 x B
  std::vector<std::size_t> lengths;
  std::vector<std::vector<Eigen::Index>> argmax;  // per sequence, per dim: timestep
};

TokenMatrix pad_batch(const std::vector<const std::vector<int>*>& seqs, std::vector<std::size_t>& lengths) {
  std::size_t T = 0;
  for (const auto* s : seqs) T = std::max(T, s->size());
  TokenMatrix ids = TokenMatrix::Constant(static_cast<Eigen::Index>(seqs.size()), static_cast<Eigen::Index>(T),
                                          Vocabulary::pad_id);
  lengths.clear();
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    if (seqs[b]->empty()) throw DegenerateInput("empty example");
    for (std::size_t t = 0; t < seqs[b]->size(); ++t) {
      ids(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(t)) = (*seqs[b])[t];
    }
    lengths.push_back(seqs[b]->size());
  }
  return ids;
}

HeadForward head_forward(const ClassifierHead& head, const Matrix& enc_out, const std::vector<std::size_t>& lengths) {
  HeadForward hf;
  const auto B = static_cast<Eigen::Index>(lengths.size());
  const auto D = enc_out.rows();
  hf.lengths = lengths;
  hf.pooled.resize(3 * D, B);
  hf.argmax.assign(lengths.size(), std::vector<Eigen::Index>(static_cast<std::size_t>(D), 0));
  for (Eigen::Index b = 0; b < B; ++b) {
    const auto L = static_cast<Eigen::Index>(lengths[static_cast<std::size_t>(b)]);
    const auto last = enc_out.col((L - 1) * B + b);
    Vector mx = enc_out.col(b);
    Vector sum = Vector::Zero(D);
    auto& am = hf.argmax[static_cast<std::size_t>(b)];
    for (Eigen::Index t = 0; t < L; ++t) {
      const auto col = enc_out.col(t * B + b);
      sum += col;
      for (Eigen::Index k = 0; k < D; ++k) {
        if (col(k) > mx(k)) {
          mx(k) = col(k);
          am[static_cast<std::size_t>(k)] = t;
        }
      }
    }
    hf.pooled.col(b) << last, mx, sum / static_cast<double>(L);
  }
  hf.hidden = head.w_hidden * hf.pooled;
  hf.hidden.colwise() += head.b_hidden;
  hf.hidden = hf.hidden.array().tanh().matrix();
  hf.logits = head.w_class * hf.hidden;
  hf.logits.colwise() += head.b_class;
  hf.reg = head.w_reg * hf.hidden;
  hf.reg.colwise() += head.b_reg;
  return hf;
}

double softmax_plus(double z_minus, double z_plus) { return 1.0 / (1.0 + std::exp(z_minus - z_plus)); }

LMConfig dropout_config(const LMConfig& base, const ClassifierTrainOptions& o) {
  LMConfig c = base;
  c.dropconnect_p = o.dropconnect_p;
  c.variational_input_p = o.variational_input_p;
  c.variational_hidden_p = o.variational_hidden_p;
  c.embedding_dropout_p = o.embedding_dropout_p;
  return c;
}

}  // namespace

std::vector<Example> make_examples(const SessionSource& labeled, const Vocabulary& vocab, TextMode mode,
                                   std::size_t max_tokens) {
  std::vector<Example> out;
  for (std::size_t i = 0; i < labeled.document_count(); ++i) {
    const int phq = labeled.phq8_score(i);
    for (const auto& unit : labeled.text_units(i, mode)) {
      out.push_back({encode_unit(unit, vocab, max_tokens), phq});
    }
  }
  return out;
}

std::size_t classifier_steps(std::size_t n_examples, const ClassifierTrainOptions& opts) {
  return opts.epochs * ((n_examples + opts.batch_size - 1) / opts.batch_size);
}

ClassifierLoss classifier_loss_and_grad(const Classifier& clf, const std::vector<const Example*>& batch,
                                        const RegMasks* masks, Classifier* grad,
                                        std::size_t active_groups) {
  std::vector<const std::vector<int>*> seqs;
  for (const auto* e : batch) seqs.push_back(&e->ids);
  std::vector<std::size_t> lengths;
  const TokenMatrix ids = pad_batch(seqs, lengths);
  const auto B = static_cast<Eigen::Index>(batch.size());
  const EncoderTrace tr = encoder_forward(clf.encoder, ids, LMState::zeros(clf.encoder.config, batch.size()),
                                          masks, nullptr);
  const HeadForward hf = head_forward(clf.head, tr.output, lengths);

  const Task task = clf.head.config.task;
  const bool use_class = task != Task::regression;
  const bool use_reg = task != Task::binary;
  const double reg_weight = task == Task::joint ? clf.head.config.lambda_regression : 1.0;

  ClassifierLoss loss;
  Matrix d_logits = Matrix::Zero(2, B);
  Matrix d_reg = Matrix::Zero(1, B);
  for (Eigen::Index b = 0; b < B; ++b) {
    const int phq = batch[static_cast<std::size_t>(b)]->phq;
    const int y = binarize_phq(phq) == DepressionClass::dep_plus ? 1 : 0;
    const double z0 = hf.logits(0, b);
    const double z1 = hf.logits(1, b);
    const double m = std::max(z0, z1);
    const double lse = m + std::log(std::exp(z0 - m) + std::exp(z1 - m));
    loss.xent += lse - hf.logits(y, b);
    const double p1 = softmax_plus(z0, z1);
    d_logits(0, b) = (1.0 - p1) - (y == 0 ? 1.0 : 0.0);
    d_logits(1, b) = p1 - (y == 1 ? 1.0 : 0.0);
    const double err = hf.reg(0, b) - static_cast<double>(phq) / kPhqScale;
    loss.mse += err * err;
    d_reg(0, b) = 2.0 * err;
  }
  const double inv_b = 1.0 / static_cast<double>(B);
  loss.xent *= inv_b;
  loss.mse *= inv_b;
  loss.loss = (use_class ? loss.xent : 0.0) + (use_reg ? reg_weight * loss.mse : 0.0);
  if (!grad) return loss;

  d_logits *= use_class ? inv_b : 0.0;
  d_reg *= use_reg ? reg_weight * inv_b : 0.0;

  auto& gh = grad->head;
  gh.w_class.noalias() += d_logits * hf.hidden.transpose();
  gh.b_class += d_logits.rowwise().sum();
  gh.w_reg.noalias() += d_reg * hf.hidden.transpose();
  gh.b_reg += d_reg.rowwise().sum();
  Matrix d_hidden = clf.head.w_class.transpose() * d_logits + clf.head.w_reg.transpose() * d_reg;
  d_hidden.array() *= (1.0 - hf.hidden.array().square());
  gh.w_hidden.noalias() += d_hidden * hf.pooled.transpose();
  gh.b_hidden += d_hidden.rowwise().sum();

  const std::size_t n_layers = clf.encoder.config.n_layers;
  const std::size_t active = std::min(active_groups, clf.group_count());
  if (active <= 1) return loss;

  const Matrix d_pooled = clf.head.w_hidden.transpose() * d_hidden;
  const auto D = tr.output.rows();
  Matrix d_out = Matrix::Zero(D, tr.output.cols());
  for (Eigen::Index b = 0; b < B; ++b) {
    const auto L = static_cast<Eigen::Index>(lengths[static_cast<std::size_t>(b)]);
    d_out.col((L - 1) * B + b) += d_pooled.col(b).head(D);
    const auto& am = hf.argmax[static_cast<std::size_t>(b)];
    for (Eigen::Index k = 0; k < D; ++k) d_out(k, am[static_cast<std::size_t>(k)] * B + b) += d_pooled(D + k, b);
    const Vector d_mean = d_pooled.col(b).tail(D) / static_cast<double>(L);
    for (Eigen::Index t = 0; t < L; ++t) d_out.col(t * B + b) += d_mean;
  }
  // Lowest active group g maps to LSTM layer n - g, or to the embedding when g = n + 1.
  const std::size_t lowest_group = active - 1;
  const bool embedding_grad = lowest_group == n_layers + 1;
  const std::size_t lowest_layer = embedding_grad ? 0 : n_layers - lowest_group;
  encoder_backward(clf.encoder, tr, d_out, grad->encoder, lowest_layer, embedding_grad);
  return loss;
}

std::pair<double, double> classifier_forward(const Classifier& clf, std::span<const int> ids) {
  if (ids.empty()) throw DegenerateInput("empty token sequence");
  const std::vector<int> seq(ids.begin(), ids.end());
  std::vector<std::size_t> lengths;
  const TokenMatrix m = pad_batch({&seq}, lengths);
  const EncoderTrace tr = encoder_forward(clf.encoder, m, LMState::zeros(clf.encoder.config, 1), nullptr, nullptr);
  const HeadForward hf = head_forward(clf.head, tr.output, lengths);
  return {softmax_plus(hf.logits(0, 0), hf.logits(1, 0)), hf.reg(0, 0) * kPhqScale};
}

Classifier train_classifier(const LMParams& lm, const HeadConfig& head, const SessionSource& labeled,
                            const Vocabulary& vocab, const FinetuneSchedule& sched,
                            const ClassifierTrainOptions& opts, std::vector<ClassifierEpoch>* trace) {
  if (vocab.size() != lm.config.vocab_size) throw ValidationError("vocabulary does not match the encoder");
  if (opts.batch_size == 0) throw ConfigError("batch_size must be positive");

  Classifier clf;
  clf.encoder = lm;
  clf.head = ClassifierHead::initialize(head, lm.config.output_dim(), opts.seed);
  clf.text_mode = opts.text_mode;
  clf.max_tokens = opts.max_tokens;

  const auto examples = make_examples(labeled, vocab, opts.text_mode, opts.max_tokens);
  if (examples.empty()) throw DegenerateInput("no labelled training examples");
  if (head.task != Task::regression) {
    bool plus = false;
    bool minus = false;
    for (const auto& e : examples) (binarize_phq(e.phq) == DepressionClass::dep_plus ? plus : minus) = true;
    if (!(plus && minus)) throw DegenerateInput("binary training set contains a single class");
  }
  if (opts.epochs == 0) return clf;

  const std::size_t per_epoch = (examples.size() + opts.batch_size - 1) / opts.batch_size;
  const FinetuneSchedule s = sched.with_total_steps(opts.epochs * per_epoch);
  s.validate();

  std::seed_seq seq{static_cast<std::uint32_t>(opts.seed), static_cast<std::uint32_t>(opts.seed >> 32), 0xc1a5u};
  std::mt19937_64 rng(seq);
  const LMConfig drop_cfg = dropout_config(lm.config, opts);
  const bool dropout = drop_cfg.any_dropout();
  const bool adam = opts.optimizer == "adam";
  SgdOptimizer sgd(opts.momentum);
  AdamOptimizer adam_opt(opts.momentum, opts.adam_beta2);
  const std::size_t n_groups = clf.group_count();

  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    const auto trainable = trainable_mask(epoch, n_groups, opts.gradual_unfreeze, s.unfreeze_per_epoch);
    const auto active = static_cast<std::size_t>(std::count(trainable.begin(), trainable.end(), true));
    std::shuffle(order.begin(), order.end(), rng);
    ClassifierEpoch sums{epoch + 1};
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size, ++step) {
      std::vector<const Example*> batch;
      for (std::size_t k = start; k < std::min(order.size(), start + opts.batch_size); ++k) {
        batch.push_back(&examples[order[k]]);
      }
      RegMasks masks;
      if (dropout) masks = sample_masks(drop_cfg, batch.size(), rng);
      Classifier grad;
      grad.encoder = clf.encoder.zeros_like();
      grad.head = ClassifierHead::zeros(clf.head.config, clf.encoder.config.output_dim());
      const auto loss = classifier_loss_and_grad(clf, batch, dropout ? &masks : nullptr, &grad, active);
      if (!std::isfinite(loss.loss)) {
        throw TrainingDiverged("non-finite classifier loss at step " + std::to_string(step));
      }
      auto grads = grad.tensors();
      clip_global_norm(grads, trainable, opts.grad_clip);
      const auto lrs = group_rates(stlr(step, s), n_groups, s.layer_decay);
      if (adam) {
        adam_opt.step(clf.tensors(), std::as_const(grad).tensors(), lrs, trainable);
      } else {
        sgd.step(clf.tensors(), std::as_const(grad).tensors(), lrs, trainable);
      }
      const auto w = static_cast<double>(batch.size());
      sums.loss += loss.loss * w;
      sums.xent += loss.xent * w;
      sums.mse += loss.mse * w;
    }
    if (trace) {
      const auto n = static_cast<double>(order.size());
      trace->push_back({sums.epoch, sums.loss / n, sums.xent / n, sums.mse / n});
    }
  }
  return clf;
}

std::string classifier_trace_csv(std::span<const ClassifierEpoch> trace) {
  std::string out = "epoch,loss,xent,mse\n";
  for (const auto& e : trace) {
    out += std::to_string(e.epoch) + ',' + format_double(e.loss) + ',' + format_double(e.xent) + ',' +
           format_double(e.mse) + '\n';
  }
  return out;
}

SessionPrediction predict_session(const Classifier& clf, const Vocabulary& vocab, const Session& session,
                                  TextMode mode) {
  const auto units = session_text(session, mode);
  double score = 0.0;
  double reg = 0.0;
  for (const auto& u : units) {
    const auto ids = encode_unit(u, vocab, clf.max_tokens);
    const auto [p, r] = classifier_forward(clf, ids);
    score += p;
    reg += r;
  }
  score /= static_cast<double>(units.size());
  reg /= static_cast<double>(units.size());

  SessionPrediction out;
  const Task task = clf.head.config.task;
  if (task != Task::binary) out.phq_estimate = std::clamp(reg, 0.0, static_cast<double>(kPhqMax));
  out.score_dep_plus = task == Task::regression ? *out.phq_estimate / kPhqScale : score;
  return out;
}

}  // namespace dport
