#include <doctest.h>

#include <random>
#include <set>
#include <sstream>

#include "dport/corpus.hpp"
#include "dport/errors.hpp"

using namespace dport;

namespace {

Subject subject_with(std::string id, const std::vector<int>& phqs) {
  Subject s;
  s.subject_id = id;
  int k = 0;
  for (int phq : phqs) {
    Session sess;
    sess.session_id = id + "-" + std::to_string(++k);
    sess.subject_id = id;
    sess.phq8_score = phq;
    sess.responses.push_back(Response::make(sess.session_id + "-r1", "home", "fine thanks"));
    s.sessions.push_back(std::move(sess));
  }
  return s;
}

Corpus random_corpus(std::mt19937_64& rng, std::size_t n_subjects) {
  Corpus c;
  c.name = "rand";
  std::uniform_int_distribution<int> phq(0, 24);
  std::uniform_int_distribution<int> sessions(1, 4);
  for (std::size_t i = 0; i < n_subjects; ++i) {
    Subject s;
    s.subject_id = "S" + std::to_string(i);
    const int k = (rng() % 3 == 0) ? sessions(rng) : 1;
    for (int j = 0; j < k; ++j) {
      Session sess;
      sess.session_id = s.subject_id + "-" + std::to_string(j);
      sess.subject_id = s.subject_id;
      sess.phq8_score = phq(rng);
      sess.responses.push_back(Response::make("r", "t", "words here"));
      s.sessions.push_back(std::move(sess));
    }
    c.subjects.push_back(std::move(s));
  }
  return c;
}

}  // namespace

TEST_SUITE("corpus") {

TEST_CASE("phq cutoff boundaries") {
  const std::pair<int, DepressionClass> table[] = {
      {0, DepressionClass::dep_minus}, {9, DepressionClass::dep_minus},  {10, DepressionClass::dep_plus},
      {11, DepressionClass::dep_plus}, {24, DepressionClass::dep_plus},
  };
  for (const auto& [score, cls] : table) {
    CAPTURE(score);
    CHECK(binarize_phq(score) == cls);
  }
  CHECK_THROWS_AS(binarize_phq(-1), DomainError);
  CHECK_THROWS_AS(binarize_phq(25), DomainError);
}

TEST_CASE("binarization is monotone in the score") {
  for (int a = 0; a <= 24; ++a) {
    for (int b = a; b <= 24; ++b) CHECK(static_cast<int>(binarize_phq(a)) <= static_cast<int>(binarize_phq(b)));
  }
}

TEST_CASE("consistency labels") {
  struct Row {
    std::vector<int> phqs;
    ConsistencyLabel expect;
  };
  const Row rows[] = {
      {{14}, ConsistencyLabel::consistent},
      {{3}, ConsistencyLabel::consistent},
      {{3, 5, 9}, ConsistencyLabel::consistent},
      {{12, 20}, ConsistencyLabel::consistent},
      {{9, 10}, ConsistencyLabel::inconsistent},
      {{15, 2, 15}, ConsistencyLabel::inconsistent},
  };
  for (const auto& r : rows) CHECK(label_subject_consistency(subject_with("x", r.phqs)) == r.expect);
}

TEST_CASE("age buckets are inclusive at the lower edge") {
  CHECK(age_bucket_for(17) == std::nullopt);
  CHECK(age_bucket_for(18) == AgeBucket::age_18_25);
  CHECK(age_bucket_for(25) == AgeBucket::age_18_25);
  CHECK(age_bucket_for(26) == AgeBucket::age_26_35);
  CHECK(age_bucket_for(45) == AgeBucket::age_36_45);
  CHECK(age_bucket_for(46) == AgeBucket::age_46_65);
  CHECK(age_bucket_for(65) == AgeBucket::age_46_65);
  CHECK(age_bucket_for(66) == AgeBucket::above_65);
}

TEST_CASE("SP fixture reproduces the published data characteristics") {
  const Corpus sp = load_corpus(std::string(DPORT_TEST_FIXTURES) + "/sp_table1.jsonl");
  const CorpusStats st = corpus_stats(sp);
  CHECK(st.total.sessions == 687);
  CHECK(st.total.subjects == 161);
  CHECK(st.dep_plus.subjects == 39);
  CHECK(st.dep_minus.subjects == 80);
  CHECK(st.mixed.subjects == 42);
  CHECK(st.sessions_dep_plus == 208);
  CHECK(st.sessions_dep_minus == 479);
  CHECK(st.dep_plus.subjects + st.dep_minus.subjects + st.mixed.subjects == st.total.subjects);
  CHECK(st.dep_plus.sessions + st.dep_minus.sessions + st.mixed.sessions == st.total.sessions);
}

TEST_CASE("consistent plus inconsistent subjects cover the corpus") {
  std::mt19937_64 rng(5);
  for (int rep = 0; rep < 20; ++rep) {
    const Corpus c = random_corpus(rng, 30);
    std::size_t consistent = 0, inconsistent = 0;
    for (const auto& s : c.subjects) {
      if (label_subject_consistency(s) == ConsistencyLabel::inconsistent) {
        ++inconsistent;
        CHECK(s.sessions.size() >= 2);
      } else {
        ++consistent;
      }
    }
    CHECK(consistent + inconsistent == c.subjects.size());
  }
}

TEST_CASE("speaker-disjoint partition over random corpora") {
  std::mt19937_64 rng(9);
  for (int rep = 0; rep < 40; ++rep) {
    const Corpus c = random_corpus(rng, 40);
    const double frac = 0.1 + 0.05 * (rep % 5);
    const auto [train, test] = partition_speaker_disjoint(c, frac, static_cast<std::uint64_t>(rep));
    std::set<std::string> train_ids;
    for (const auto& s : train.subjects) train_ids.insert(s.subject_id);
    for (const auto& s : test.subjects) {
      CHECK(train_ids.count(s.subject_id) == 0);
      CHECK(s.sessions.size() == 1);
    }
    CHECK(train.subjects.size() + test.subjects.size() == c.subjects.size());
  }
}

TEST_CASE("partition is deterministic per seed") {
  std::mt19937_64 rng(1);
  const Corpus c = random_corpus(rng, 50);
  const auto a = partition_speaker_disjoint(c, 0.2, 3);
  const auto b = partition_speaker_disjoint(c, 0.2, 3);
  std::ostringstream sa, sb;
  write_corpus_jsonl(a.second, sa);
  write_corpus_jsonl(b.second, sb);
  CHECK(sa.str() == sb.str());
}

TEST_CASE("session text modes") {
  Session s;
  s.session_id = "a";
  s.subject_id = "b";
  for (const char* t : {"one two", "three", "four five six"}) {
    s.responses.push_back(Response::make("r", "t", t));
  }
  const auto joined = session_text(s, TextMode::concatenate_responses);
  REQUIRE(joined.size() == 1);
  std::size_t seps = 0;
  for (std::size_t pos = joined[0].find(kResponseSeparator); pos != std::string::npos;
       pos = joined[0].find(kResponseSeparator, pos + 1)) {
    ++seps;
  }
  CHECK(seps == 2);
  CHECK(session_text(s, TextMode::per_response).size() == 3);

  Session one;
  one.responses.push_back(Response::make("r", "t", "only this"));
  CHECK(session_text(one, TextMode::concatenate_responses) == std::vector<std::string>{"only this"});

  Session empty;
  empty.session_id = "e";
  empty.responses.push_back(Response::make("r", "t", ""));
  CHECK_THROWS_AS(session_text(empty, TextMode::concatenate_responses), DegenerateInput);
}

TEST_CASE("jsonl round trip and demographic reconciliation") {
  const std::string text =
      R"({"session_id":"s1","subject_id":"p","phq8_score":12,"age":70,"gender":"female","responses":[{"prompt_topic":"home","text":"hello there"}]})"
      "\n\n"
      R"({"session_id":"s2","subject_id":"p","phq8_score":3,"age":71,"responses":[{"prompt_topic":"home","text":"again"}]})"
      "\n";
  std::istringstream in(text);
  std::vector<std::string> warnings;
  const Corpus c = parse_corpus_jsonl(in, "t", {&warnings});
  REQUIRE(c.subjects.size() == 1);
  CHECK(c.subjects[0].sessions.size() == 2);
  CHECK(c.subjects[0].demographics.age == 70);
  CHECK(c.subjects[0].demographics.gender == Gender::female);
  CHECK(!warnings.empty());
  CHECK(label_subject_consistency(c.subjects[0]) == ConsistencyLabel::inconsistent);

  std::ostringstream out;
  write_corpus_jsonl(c, out);
  std::istringstream back(out.str());
  std::vector<std::string> w2;
  const Corpus c2 = parse_corpus_jsonl(back, "t", {&w2});
  CHECK(c2.subjects[0].sessions[1].responses[0].text == "again");
  CHECK(c2.subjects[0].demographics == c.subjects[0].demographics);
}

TEST_CASE("malformed input is rejected with a line number") {
  std::istringstream bad("{\"session_id\":\"a\"}\nnot json\n");
  CHECK_THROWS(parse_corpus_jsonl(bad, "x"));
  std::istringstream range(
      R"({"session_id":"a","subject_id":"b","phq8_score":30,"responses":[{"prompt_topic":"t","text":"x"}]})");
  CHECK_THROWS(parse_corpus_jsonl(range, "x"));
}

}  // TEST_SUITE
