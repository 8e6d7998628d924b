#include <doctest.h>

#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "dport/corpus.hpp"
#include "dport/errors.hpp"
#include "dport/eval.hpp"
#include "dport/synth.hpp"
#include "dport/tokenizer.hpp"

using namespace dport;

namespace {

std::string dump(const Corpus& c) {
  std::ostringstream o;
  write_corpus_jsonl(c, o);
  return o.str();
}

// Multinomial naive Bayes trained on the first half of the sessions, scored on the rest.
double bag_of_words_auc(const Corpus& c) {
  std::vector<const Session*> sessions;
  for (const auto& s : c.subjects)
    for (const auto& sess : s.sessions) sessions.push_back(&sess);
  const std::size_t half = sessions.size() / 2;
  std::map<std::string, double> counts[2];
  double totals[2] = {0, 0};
  for (std::size_t i = 0; i < half; ++i) {
    const int k = sessions[i]->phq8_score >= 10;
    for (const auto& r : sessions[i]->responses) {
      for (const auto& t : tokenize(r.text)) {
        counts[k][t] += 1;
        totals[k] += 1;
      }
    }
  }
  std::map<std::string, int> vocab;
  for (const auto& m : counts)
    for (const auto& [w, _] : m) vocab[w] = 1;
  const double v = static_cast<double>(vocab.size());
  std::vector<double> pos, neg;
  for (std::size_t i = half; i < sessions.size(); ++i) {
    double score = 0;
    for (const auto& r : sessions[i]->responses) {
      for (const auto& t : tokenize(r.text)) {
        if (!vocab.count(t)) continue;
        const auto get = [&](int k) {
          const auto it = counts[k].find(t);
          return it == counts[k].end() ? 0.0 : it->second;
        };
        score += std::log((get(1) + 1) / (totals[1] + v)) - std::log((get(0) + 1) / (totals[0] + v));
      }
    }
    (sessions[i]->phq8_score >= 10 ? pos : neg).push_back(score);
  }
  return roc_auc(pos, neg);
}

SynthSpec small_spec(double signal) {
  SynthSpec s = default_gp_spec();
  s.n_subjects = 300;
  s.words_scale = 0.1;
  s.signal_strength = signal;
  s.marker_crosstalk = 0.3;
  s.seed = 4;
  return s;
}

}  // namespace

TEST_SUITE("synth") {

TEST_CASE("session prevalence tracks the target") {
  SynthSpec s = default_gp_spec();
  s.n_subjects = 1000;
  s.words_scale = 0.02;
  s.seed = 13;
  const Corpus c = generate_corpus(s);
  std::size_t pos = 0, total = 0;
  for (const auto& subj : c.subjects) {
    for (const auto& sess : subj.sessions) {
      CHECK(sess.phq8_score >= 0);
      CHECK(sess.phq8_score <= 24);
      pos += binarize_phq(sess.phq8_score) == DepressionClass::dep_plus;
      ++total;
    }
  }
  CHECK(std::abs(static_cast<double>(pos) / static_cast<double>(total) - 0.27) <= 0.03);
}

TEST_CASE("generation is deterministic per seed") {
  SynthSpec s = small_spec(0.05);
  s.n_subjects = 50;
  CHECK(dump(generate_corpus(s)) == dump(generate_corpus(s)));
  SynthSpec other = s;
  other.seed = 5;
  CHECK(dump(generate_corpus(s)) != dump(generate_corpus(other)));
}

TEST_CASE("consistency labels follow the inconsistency rate") {
  SynthSpec s = default_sp_spec();
  s.words_scale = 0.05;
  s.inconsistency_rate = 0.0;
  for (const auto& subj : generate_corpus(s).subjects) {
    CHECK(label_subject_consistency(subj) == ConsistencyLabel::consistent);
  }
  s.inconsistency_rate = 0.3;
  std::size_t inconsistent = 0;
  for (const auto& subj : generate_corpus(s).subjects) {
    std::set<DepressionClass> classes;
    for (const auto& sess : subj.sessions) classes.insert(binarize_phq(sess.phq8_score));
    const bool mixed = classes.size() == 2;
    CHECK(mixed == (label_subject_consistency(subj) == ConsistencyLabel::inconsistent));
    inconsistent += mixed;
  }
  CHECK(inconsistent > 0);
}

TEST_CASE("bag-of-words separability grows with signal strength") {
  const double weak = bag_of_words_auc(generate_corpus(small_spec(0.0)));
  const double mid = bag_of_words_auc(generate_corpus(small_spec(0.02)));
  const double strong = bag_of_words_auc(generate_corpus(small_spec(0.08)));
  CHECK(weak < mid);
  CHECK(mid < strong);
  CHECK(std::abs(weak - 0.5) < 0.1);
}

TEST_CASE("default pair shape") {
  SynthSpec gp = default_gp_spec();
  SynthSpec sp = default_sp_spec();
  gp.n_subjects = 400;
  gp.words_scale = 0.05;
  sp.words_scale = 0.05;
  const auto [g, s] = gp_sp_pair(gp, sp);
  double age_sum = 0, resp = 0, sessions = 0;
  for (const auto& subj : g.subjects) {
    age_sum += *subj.demographics.age;
    for (const auto& sess : subj.sessions) {
      resp += static_cast<double>(sess.responses.size());
      ++sessions;
    }
  }
  CHECK(age_sum / static_cast<double>(g.subjects.size()) == doctest::Approx(30.0).epsilon(0.1));
  CHECK(resp / sessions == doctest::Approx(4.5).epsilon(0.08));

  std::size_t senior = 0;
  resp = sessions = 0;
  for (const auto& subj : s.subjects) {
    senior += *subj.demographics.age > 65;
    for (const auto& sess : subj.sessions) {
      resp += static_cast<double>(sess.responses.size());
      ++sessions;
    }
  }
  const auto pmf = sp.age.pmf();
  double above = 0;
  for (std::size_t a = 66; a < pmf.size(); ++a) above += pmf[a];
  CHECK(above > 0.5);
  CHECK(static_cast<double>(senior) / static_cast<double>(s.subjects.size()) > 0.4);
  CHECK(resp / sessions == doctest::Approx(6.1).epsilon(0.08));
  CHECK(overlap_coefficient(gp.age, sp.age) < kMaxAgeOverlap);
}

TEST_CASE("overlapping age distributions are rejected") {
  SynthSpec gp = default_gp_spec();
  SynthSpec sp = default_gp_spec();
  gp.n_subjects = sp.n_subjects = 5;
  CHECK_THROWS_AS(gp_sp_pair(gp, sp), ConfigError);
}

TEST_CASE("infeasible specs are rejected") {
  SynthSpec s = default_sp_spec();
  s.dep_prevalence = 0.0;
  s.inconsistency_rate = 0.2;
  CHECK_THROWS(generate_corpus(s));
  s = default_gp_spec();
  s.signal_strength = -0.1;
  CHECK_THROWS(generate_corpus(s));
}

TEST_CASE("degradation ramp") {
  DegradationSpec d;
  d.enabled = true;
  d.start_age = 60;
  d.full_age = 80;
  d.max_noise = 0.5;
  CHECK(d.noise_at(50) == 0.0);
  CHECK(d.noise_at(70) == doctest::Approx(0.25));
  CHECK(d.noise_at(90) == 0.5);
  d.enabled = false;
  CHECK(d.noise_at(90) == 0.0);
}

TEST_CASE("generic text is deterministic and nonempty") {
  GenericTextSpec g;
  g.n_documents = 5;
  g.words_per_document = 30;
  const auto a = generate_generic_text(g);
  CHECK(a == generate_generic_text(g));
  REQUIRE(a.size() == 5);
  for (const auto& d : a) CHECK(count_words(d) >= 20);
}

}  // TEST_SUITE
