#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <random>
#include <set>

#include "dport/errors.hpp"
#include "dport/finetune.hpp"
#include "test_support.hpp"

using namespace dport;

namespace {

Classifier tiny_classifier(Task task, bool tied = true) {
  auto cfg = testing::tiny_lm_config();
  cfg.tie_weights = tied;
  Classifier clf;
  clf.encoder = LMParams::initialize(cfg);
  HeadConfig head;
  head.hidden = 6;
  head.task = task;
  head.lambda_regression = 0.7;
  clf.head = ClassifierHead::initialize(head, cfg.output_dim(), 5);
  return clf;
}

Classifier zero_grad(const Classifier& clf) {
  Classifier g;
  g.encoder = clf.encoder.zeros_like();
  g.head = ClassifierHead::zeros(clf.head.config, clf.encoder.config.output_dim());
  return g;
}

std::vector<Example> tiny_examples() {
  return {{{2, 5, 7, 4, 9}, 3}, {{2, 6, 6}, 15}, {{2, 11, 8, 4, 10, 5, 7}, 11}};
}

std::vector<const Example*> ptrs(const std::vector<Example>& ex) {
  std::vector<const Example*> out;
  for (const auto& e : ex) out.push_back(&e);
  return out;
}

}  // namespace


namespace {

// Counts label reads so tests can prove a stage never looks at them.
class AuditingSource : public SessionSource {
 public:
  explicit AuditingSource(const Corpus& c) : inner_(c) {}
  std::size_t document_count() const override { return inner_.document_count(); }
  std::string document(std::size_t i) const override { return inner_.document(i); }
  std::vector<std::string> text_units(std::size_t i, TextMode m) const override { return inner_.text_units(i, m); }
  int phq8_score(std::size_t i) const override {
    ++label_reads;
    return inner_.phq8_score(i);
  }
  mutable std::size_t label_reads = 0;

 private:
  CorpusSource inner_;
};

Corpus keyword_corpus(std::size_t n, std::uint64_t seed) {
  const char* filler[] = {"we", "went", "to", "the", "shop", "and", "then", "home", "it", "was", "a", "day"};
  std::mt19937_64 rng(seed);
  Corpus c;
  c.name = "kw";
  for (std::size_t i = 0; i < n; ++i) {
    Subject s;
    s.subject_id = "S" + std::to_string(i);
    Session sess;
    sess.session_id = s.subject_id + "-1";
    sess.subject_id = s.subject_id;
    const bool pos = i % 2 == 0;
    sess.phq8_score = pos ? 15 : 3;
    std::string text;
    for (int w = 0; w < 12; ++w) text += std::string(filler[rng() % 12]) + " ";
    text += pos ? "hopeless tired" : "cheerful rested";
    sess.responses.push_back(Response::make("r", "t", text));
    s.sessions.push_back(std::move(sess));
    c.subjects.push_back(std::move(s));
  }
  return c;
}

}  // namespace

TEST_SUITE("finetune") {

TEST_CASE("stlr rises to the peak at cut then decays") {
  FinetuneSchedule s;
  s.lr_max = 0.01;
  s.cut_frac = 0.1;
  s.ratio = 32;
  s.total_steps = 100;
  CHECK(s.cut() == 10);
  CHECK(stlr(0, s) == doctest::Approx(0.01 / 32));
  CHECK(stlr(10, s) == doctest::Approx(0.01));
  for (std::size_t t = 1; t <= 10; ++t) CHECK(stlr(t, s) > stlr(t - 1, s));
  for (std::size_t t = 11; t < 100; ++t) CHECK(stlr(t, s) < stlr(t - 1, s));
  for (std::size_t t = 0; t < 100; ++t) {
    CHECK(stlr(t, s) >= 0.01 / 32 - 1e-15);
    CHECK(stlr(t, s) <= 0.01 + 1e-15);
  }
}

TEST_CASE("stlr stays within bounds when total_steps * cut_frac is fractional") {
  FinetuneSchedule s;
  s.lr_max = 0.02;
  s.cut_frac = 0.3;
  s.total_steps = 7;
  for (std::size_t t = 0; t < 7; ++t) {
    CHECK(stlr(t, s) >= s.lr_max / s.ratio - 1e-15);
    CHECK(stlr(t, s) <= s.lr_max + 1e-15);
  }
}

TEST_CASE("discriminative rates decay geometrically towards the bottom") {
  const auto lrs = discriminative_lrs(0.01, 4, 1 / 2.6);
  REQUIRE(lrs.size() == 4);
  CHECK(lrs[3] == doctest::Approx(0.01));
  for (std::size_t l = 0; l + 1 < lrs.size(); ++l) CHECK(lrs[l] == doctest::Approx(lrs[l + 1] / 2.6));
}

TEST_CASE("unfreeze plan opens one more group per epoch from the top") {
  for (std::size_t e = 0; e < 6; ++e) {
    const auto plan = unfreeze_plan(e, 4);
    const std::size_t expect = std::min<std::size_t>(1 + e, 4);
    REQUIRE(plan.size() == expect);
    for (std::size_t i = 0; i < expect; ++i) CHECK(plan[i] == i);
  }
  CHECK(unfreeze_plan(1, 5, 2).size() == 3);
}

TEST_CASE("classifier gradient matches finite differences") {
  for (Task task : {Task::binary, Task::regression, Task::joint}) {
    CAPTURE(to_string(task));
    Classifier clf = tiny_classifier(task);
    const auto ex = tiny_examples();
    const auto batch = ptrs(ex);
    Classifier g = zero_grad(clf);
    classifier_loss_and_grad(clf, batch, nullptr, &g);
    const auto bad = testing::check_gradient<Classifier>(
        clf, std::as_const(g).tensors(),
        [&](const Classifier& c) { return classifier_loss_and_grad(c, batch, nullptr, nullptr).loss; }, 1e-4);
    for (const auto& m : bad) FAIL_CHECK(m.tensor << " rel " << m.rel_error);
  }
}

TEST_CASE("classifier gradient with untied encoder and fixed dropout masks") {
  Classifier clf = tiny_classifier(Task::joint, false);
  auto cfg = clf.encoder.config;
  cfg.dropconnect_p = 0.3;
  cfg.variational_input_p = 0.2;
  cfg.variational_hidden_p = 0.2;
  cfg.embedding_dropout_p = 0.1;
  std::mt19937_64 rng(3);
  const auto masks = sample_masks(cfg, 3, rng);
  const auto ex = tiny_examples();
  const auto batch = ptrs(ex);
  Classifier g = zero_grad(clf);
  classifier_loss_and_grad(clf, batch, &masks, &g);
  const auto bad = testing::check_gradient<Classifier>(
      clf, std::as_const(g).tensors(),
      [&](const Classifier& c) { return classifier_loss_and_grad(c, batch, &masks, nullptr).loss; }, 1e-4);
  for (const auto& m : bad) {
    if (m.tensor.rfind("decoder", 0) == 0) continue;
    FAIL_CHECK(m.tensor << " rel " << m.rel_error);
  }
}

TEST_CASE("frozen groups receive no gradient") {
  Classifier clf = tiny_classifier(Task::joint);
  const auto ex = tiny_examples();
  const auto batch = ptrs(ex);
  for (std::size_t active = 1; active <= clf.group_count(); ++active) {
    CAPTURE(active);
    Classifier g = zero_grad(clf);
    classifier_loss_and_grad(clf, batch, nullptr, &g, active);
    for (const auto& t : std::as_const(g).tensors()) {
      const bool any = std::any_of(t.values.begin(), t.values.end(), [](double v) { return v != 0.0; });
      if (t.group >= active) CHECK_MESSAGE(!any, t.name);
      else CHECK_MESSAGE(any, t.name);
    }
  }
}

TEST_CASE("padding does not change per-example outputs") {
  Classifier clf = tiny_classifier(Task::joint);
  const auto ex = tiny_examples();
  double batched = classifier_loss_and_grad(clf, ptrs(ex), nullptr, nullptr).loss * 3;
  double single = 0.0;
  for (const auto& e : ex) single += classifier_loss_and_grad(clf, {&e}, nullptr, nullptr).loss;
  CHECK(batched == doctest::Approx(single).epsilon(1e-10));
}

TEST_CASE("lm fine-tuning never reads labels and respects freezing") {
  const Corpus c = keyword_corpus(40, 3);
  const AuditingSource src(c);
  const auto vocab = build_vocab(src, 100, 1);
  LMConfig cfg = testing::tiny_lm_config(vocab.size());
  const LMParams pre = LMParams::initialize(cfg);
  FinetuneSchedule sched;
  sched.lr_max = 1.0;
  LMFinetuneOptions opts;
  opts.epochs = 1;
  opts.batch_size = 2;
  opts.bptt_len = 8;
  opts.gradual_unfreeze = true;
  const LMParams tuned = finetune_lm(pre, vocab, src, sched, opts);
  CHECK(src.label_reads == 0);
  CHECK(tuned.decoder_bias != pre.decoder_bias);
  CHECK(tuned.embedding == pre.embedding);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    CHECK(tuned.layers[l].w_ih == pre.layers[l].w_ih);
    CHECK(tuned.layers[l].w_hh == pre.layers[l].w_hh);
    CHECK(tuned.layers[l].bias == pre.layers[l].bias);
  }

  opts.epochs = 0;
  CHECK(bitwise_equal(finetune_lm(pre, vocab, src, sched, opts), pre));
}

TEST_CASE("lm fine-tuning lowers target perplexity") {
  const Corpus c = keyword_corpus(60, 4);
  const CorpusSource src(c);
  const auto vocab = build_vocab(src, 100, 1);
  LMConfig cfg = testing::tiny_lm_config(vocab.size());
  cfg.embed_dim = 12;
  cfg.hidden_dim = 16;
  cfg.init_range = 0.1;
  const LMParams pre = LMParams::initialize(cfg);
  FinetuneSchedule sched;
  sched.lr_max = 5.0;
  LMFinetuneOptions opts;
  opts.epochs = 3;
  opts.batch_size = 4;
  opts.bptt_len = 10;
  const LMParams tuned = finetune_lm(pre, vocab, src, sched, opts);
  CHECK(perplexity(tuned, vocab, src) < perplexity(pre, vocab, src));

  const auto small = build_vocab(src, 10, 1);
  CHECK_THROWS_AS(finetune_lm(pre, small, src, sched, opts), ValidationError);
}

TEST_CASE("classifier training: zero rate, single class, label use") {
  const Corpus c = keyword_corpus(16, 5);
  const AuditingSource src(c);
  const auto vocab = build_vocab(src, 100, 1);
  const LMParams lm = LMParams::initialize(testing::tiny_lm_config(vocab.size()));
  HeadConfig head;
  head.hidden = 6;
  FinetuneSchedule sched;
  sched.lr_max = 0.0;
  ClassifierTrainOptions opts;
  opts.epochs = 1;
  opts.batch_size = 4;
  opts.seed = 9;
  const Classifier clf = train_classifier(lm, head, src, vocab, sched, opts);
  CHECK(src.label_reads > 0);
  const ClassifierHead init = ClassifierHead::initialize(head, lm.config.output_dim(), 9);
  CHECK(clf.head.w_hidden.rows() == static_cast<Eigen::Index>(head.hidden));
  CHECK(clf.head.w_hidden.cols() == static_cast<Eigen::Index>(3 * lm.config.output_dim()));
  CHECK(bitwise_equal(clf.encoder, lm));

  Classifier a = train_classifier(lm, head, src, vocab, sched, opts);
  CHECK(a.head.w_class == clf.head.w_class);
  (void)init;

  Corpus neg = c;
  for (auto& s : neg.subjects) s.sessions[0].phq8_score = 2;
  head.task = Task::binary;
  CHECK_THROWS(train_classifier(lm, head, CorpusSource(neg), vocab, sched, opts));
}

TEST_CASE("keyword-planted corpus is separable after training") {
  const Corpus c = keyword_corpus(40, 6);
  const CorpusSource src(c);
  const auto vocab = build_vocab(src, 100, 1);
  LMConfig cfg = testing::tiny_lm_config(vocab.size());
  cfg.embed_dim = 8;
  cfg.hidden_dim = 12;
  cfg.init_range = 0.3;
  const LMParams lm = LMParams::initialize(cfg);
  HeadConfig head;
  head.hidden = 10;
  head.task = Task::binary;
  FinetuneSchedule sched;
  sched.lr_max = 0.02;
  ClassifierTrainOptions opts;
  opts.epochs = 15;
  opts.batch_size = 4;
  opts.optimizer = "adam";
  opts.dropconnect_p = opts.variational_hidden_p = opts.variational_input_p = 0.0;
  opts.gradual_unfreeze = false;
  opts.seed = 2;
  const Classifier clf = train_classifier(lm, head, src, vocab, sched, opts);
  std::vector<double> pos, neg;
  for (std::size_t i = 0; i < src.document_count(); ++i) {
    const auto p = predict_session(clf, vocab, src.session(i), TextMode::concatenate_responses);
    CHECK(p.score_dep_plus >= 0.0);
    CHECK(p.score_dep_plus <= 1.0);
    (src.phq8_score(i) >= 10 ? pos : neg).push_back(p.score_dep_plus);
  }
  std::size_t wins = 0;
  for (double p : pos) for (double n : neg) wins += p > n;
  CHECK(static_cast<double>(wins) / static_cast<double>(pos.size() * neg.size()) > 0.95);
}

TEST_CASE("prediction contracts") {
  const Corpus c = keyword_corpus(4, 7);
  const CorpusSource src(c);
  const auto vocab = build_vocab(src, 100, 1);
  Classifier clf;
  clf.encoder = LMParams::initialize(testing::tiny_lm_config(vocab.size()));
  clf.head = ClassifierHead::zeros(HeadConfig{}, clf.encoder.config.output_dim());
  const Session& s = src.session(0);
  CHECK(predict_session(clf, vocab, s, TextMode::concatenate_responses).score_dep_plus == 0.5);

  clf.head = ClassifierHead::initialize(HeadConfig{}, clf.encoder.config.output_dim(), 3);
  const auto a = predict_session(clf, vocab, s, TextMode::concatenate_responses);
  const auto b = predict_session(clf, vocab, s, TextMode::concatenate_responses);
  CHECK(a.score_dep_plus == b.score_dep_plus);
  REQUIRE(a.phq_estimate);
  CHECK(*a.phq_estimate >= 0.0);
  CHECK(*a.phq_estimate <= 24.0);

  Session repeated = s;
  repeated.responses = {s.responses[0], s.responses[0], s.responses[0]};
  Session single = s;
  single.responses = {s.responses[0]};
  CHECK(predict_session(clf, vocab, repeated, TextMode::per_response).score_dep_plus ==
        doctest::Approx(predict_session(clf, vocab, single, TextMode::per_response).score_dep_plus).epsilon(1e-12));

  double prev = -1.0;
  for (double bias : {-2.0, -0.5, 0.0, 0.7, 3.0}) {
    clf.head.b_class(1) = bias;
    const double score = predict_session(clf, vocab, s, TextMode::concatenate_responses).score_dep_plus;
    CHECK(score > prev);
    prev = score;
  }

  Session empty = s;
  empty.responses = {Response::make("r", "t", "")};
  CHECK_THROWS(predict_session(clf, vocab, empty, TextMode::concatenate_responses));
}

}  // TEST_SUITE
