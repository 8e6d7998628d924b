#include "dport/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "dport/errors.hpp"

namespace dport {

using nlohmann::json;

std::string_view to_string(Gender g) {
  switch (g) {
    case Gender::female: return "female";
    case Gender::male: return "male";
    case Gender::unspecified: return "unspecified";
  }
  return "unspecified";
}

std::string_view to_string(AgeBucket b) {
  switch (b) {
    case AgeBucket::age_18_25: return "18-25";
    case AgeBucket::age_26_35: return "26-35";
    case AgeBucket::age_36_45: return "36-45";
    case AgeBucket::age_46_65: return "46-65";
    case AgeBucket::above_65: return "above 65";
  }
  return "";
}

std::string_view to_string(DepressionClass c) {
  return c == DepressionClass::dep_plus ? "dep+" : "dep-";
}

std::string_view to_string(ConsistencyLabel c) {
  return c == ConsistencyLabel::consistent ? "consistent" : "inconsistent";
}

std::string_view to_string(SplitTag t) {
  switch (t) {
    case SplitTag::train: return "train";
    case SplitTag::test: return "test";
    case SplitTag::unsplit: return "unsplit";
  }
  return "unsplit";
}

std::string_view to_string(TextMode m) {
  return m == TextMode::concatenate_responses ? "concatenate_responses" : "per_response";
}

Gender parse_gender(std::string_view s) {
  if (s == "female" || s == "f" || s == "F") return Gender::female;
  if (s == "male" || s == "m" || s == "M") return Gender::male;
  if (s == "unspecified" || s.empty()) return Gender::unspecified;
  throw ValidationError("unknown gender '" + std::string(s) + "'");
}

AgeBucket parse_age_bucket(std::string_view s) {
  for (AgeBucket b : all_age_buckets()) {
    if (to_string(b) == s) return b;
  }
  if (s == ">65" || s == "65+") return AgeBucket::above_65;
  throw ValidationError("unknown age bucket '" + std::string(s) + "'");
}

TextMode parse_text_mode(std::string_view s) {
  if (s == "concatenate_responses" || s == "concatenate") return TextMode::concatenate_responses;
  if (s == "per_response") return TextMode::per_response;
  throw ValidationError("unknown text mode '" + std::string(s) + "'");
}

std::optional<AgeBucket> age_bucket_for(int age) {
  if (age < 18) return std::nullopt;
  if (age <= 25) return AgeBucket::age_18_25;
  if (age <= 35) return AgeBucket::age_26_35;
  if (age <= 45) return AgeBucket::age_36_45;
  if (age <= 65) return AgeBucket::age_46_65;
  return AgeBucket::above_65;
}

const std::vector<AgeBucket>& all_age_buckets() {
  static const std::vector<AgeBucket> buckets{AgeBucket::age_18_25, AgeBucket::age_26_35,
                                              AgeBucket::age_36_45, AgeBucket::age_46_65,
                                              AgeBucket::above_65};
  return buckets;
}

std::size_t count_words(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::size_t n = 0;
  std::string w;
  while (in >> w) ++n;
  return n;
}

Response Response::make(std::string id, std::string topic, std::string text) {
  Response r;
  r.response_id = std::move(id);
  r.prompt_topic = std::move(topic);
  r.word_count = count_words(text);
  r.degenerate = r.word_count == 0;
  r.text = std::move(text);
  return r;
}

std::size_t Session::word_count() const {
  std::size_t n = 0;
  for (const auto& r : responses) n += r.word_count;
  return n;
}

std::optional<AgeBucket> Demographics::effective_bucket() const {
  if (age_bucket) return age_bucket;
  if (age) return age_bucket_for(*age);
  return std::nullopt;
}

std::size_t Corpus::session_count() const {
  std::size_t n = 0;
  for (const auto& s : subjects) n += s.sessions.size();
  return n;
}

const Subject* Corpus::find_subject(std::string_view subject_id) const {
  for (const auto& s : subjects) {
    if (s.subject_id == subject_id) return &s;
  }
  return nullptr;
}

namespace {

void check_phq(int score) {
  if (score < kPhqMin || score > kPhqMax) {
    throw ValidationError("phq8_score " + std::to_string(score) + " outside [0,24]");
  }
}

void check_demographics(const Demographics& d, const std::string& subject_id) {
  if (d.age && d.age_bucket) {
    auto derived = age_bucket_for(*d.age);
    if (!derived || *derived != *d.age_bucket) {
      throw ValidationError("subject " + subject_id + ": age " + std::to_string(*d.age) +
                            " not inside bucket " + std::string(to_string(*d.age_bucket)));
    }
  }
}

}  // namespace

void Corpus::validate() const {
  std::unordered_set<std::string> subject_ids;
  std::unordered_set<std::string> session_ids;
  for (const auto& subject : subjects) {
    if (subject.subject_id.empty()) throw ValidationError("empty subject_id");
    if (!subject_ids.insert(subject.subject_id).second) {
      throw ValidationError("duplicate subject_id " + subject.subject_id);
    }
    check_demographics(subject.demographics, subject.subject_id);
    for (const auto& session : subject.sessions) {
      if (session.subject_id != subject.subject_id) {
        throw ValidationError("session " + session.session_id + " references subject " +
                              session.subject_id + " but is stored under " + subject.subject_id);
      }
      if (!session_ids.insert(session.session_id).second) {
        throw ValidationError("duplicate session_id " + session.session_id);
      }
      check_phq(session.phq8_score);
    }
  }
}

DepressionClass binarize_phq(int score) {
  if (score < kPhqMin || score > kPhqMax) {
    throw DomainError("PHQ-8 score " + std::to_string(score) + " outside [0,24]");
  }
  return score >= kPhqCutoff ? DepressionClass::dep_plus : DepressionClass::dep_minus;
}

ConsistencyLabel label_subject_consistency(const Subject& subject) {
  if (subject.sessions.empty()) {
    throw DomainError("subject " + subject.subject_id + " has no sessions");
  }
  bool plus = false;
  bool minus = false;
  for (const auto& s : subject.sessions) {
    (binarize_phq(s.phq8_score) == DepressionClass::dep_plus ? plus : minus) = true;
  }
  return plus && minus ? ConsistencyLabel::inconsistent : ConsistencyLabel::consistent;
}

// -- JSONL -----------------------------------------------------------------------

namespace {

Demographics demographics_from_json(const json& j) {
  Demographics d;
  if (auto it = j.find("age"); it != j.end() && !it->is_null()) d.age = it->get<int>();
  if (auto it = j.find("age_bucket"); it != j.end() && !it->is_null()) {
    d.age_bucket = parse_age_bucket(it->get<std::string>());
  }
  if (auto it = j.find("gender"); it != j.end() && !it->is_null()) {
    d.gender = parse_gender(it->get<std::string>());
  }
  if (auto it = j.find("ethnicity"); it != j.end() && !it->is_null()) {
    d.ethnicity = it->get<std::string>();
  }
  if (!d.age_bucket && d.age) d.age_bucket = age_bucket_for(*d.age);
  return d;
}

struct PendingSubject {
  Subject subject;
  std::size_t first_line = 0;
};

}  // namespace

Corpus parse_corpus_jsonl(std::istream& in, std::string name, const LoadOptions& opts) {
  Corpus corpus;
  corpus.name = std::move(name);

  auto warn = [&](const std::string& msg) {
    if (opts.warnings) {
      opts.warnings->push_back(msg);
    } else {
      std::cerr << "warning: " << msg << '\n';
    }
  };

  std::vector<PendingSubject> pending;
  std::unordered_map<std::string, std::size_t> subject_index;
  std::unordered_set<std::string> session_ids;

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;

    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(line_no, std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ParseError(line_no, "expected a JSON object");

    try {
      auto sid = j.find("subject_id");
      if (sid == j.end() || !sid->is_string() || sid->get<std::string>().empty()) {
        throw ValidationError("missing subject_id");
      }
      auto sess_id = j.find("session_id");
      if (sess_id == j.end() || !sess_id->is_string() || sess_id->get<std::string>().empty()) {
        throw ValidationError("missing session_id");
      }
      auto phq = j.find("phq8_score");
      if (phq == j.end() || !phq->is_number_integer()) {
        throw ValidationError("missing or non-integer phq8_score");
      }

      Session session;
      session.session_id = sess_id->get<std::string>();
      session.subject_id = sid->get<std::string>();
      session.phq8_score = phq->get<int>();
      check_phq(session.phq8_score);
      if (auto ts = j.find("timestamp"); ts != j.end() && !ts->is_null()) {
        session.timestamp = ts->get<std::string>();
      }
      if (!session_ids.insert(session.session_id).second) {
        throw ValidationError("duplicate session_id " + session.session_id);
      }

      auto responses = j.find("responses");
      if (responses == j.end() || !responses->is_array()) {
        throw ValidationError("missing responses array");
      }
      std::size_t k = 0;
      for (const auto& r : *responses) {
        std::string rid = r.contains("response_id") ? r.at("response_id").get<std::string>()
                                                    : session.session_id + "-r" + std::to_string(k);
        session.responses.push_back(Response::make(std::move(rid), r.value("prompt_topic", ""),
                                                   r.value("text", "")));
        ++k;
      }

      Demographics demo = demographics_from_json(j);
      check_demographics(demo, session.subject_id);

      auto [it, inserted] = subject_index.try_emplace(session.subject_id, pending.size());
      if (inserted) {
        PendingSubject p;
        p.subject.subject_id = session.subject_id;
        p.subject.demographics = demo;
        p.first_line = line_no;
        pending.push_back(std::move(p));
      } else if (!(pending[it->second].subject.demographics == demo)) {
        warn("line " + std::to_string(line_no) + ": demographics for subject " +
             session.subject_id + " differ from line " +
             std::to_string(pending[it->second].first_line) + "; keeping the first");
      }
      pending[it->second].subject.sessions.push_back(std::move(session));
    } catch (const ValidationError& e) {
      throw ValidationError("line " + std::to_string(line_no) + ": " + e.what());
    } catch (const json::exception& e) {
      throw ParseError(line_no, e.what());
    }
  }

  for (auto& p : pending) {
    auto& sessions = p.subject.sessions;
    bool all_dated = std::all_of(sessions.begin(), sessions.end(),
                                 [](const Session& s) { return s.timestamp.has_value(); });
    if (all_dated) {
      std::stable_sort(sessions.begin(), sessions.end(), [](const Session& a, const Session& b) {
        return *a.timestamp < *b.timestamp;
      });
    }
    corpus.subjects.push_back(std::move(p.subject));
  }
  corpus.validate();
  return corpus;
}

Corpus load_corpus(const std::filesystem::path& path, const LoadOptions& opts) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open corpus file " + path.string());
  return parse_corpus_jsonl(in, path.stem().string(), opts);
}

json session_to_json(const Subject& subject, const Session& session) {
  json j;
  j["session_id"] = session.session_id;
  j["subject_id"] = session.subject_id;
  j["phq8_score"] = session.phq8_score;
  if (session.timestamp) j["timestamp"] = *session.timestamp;
  const auto& d = subject.demographics;
  if (d.age) j["age"] = *d.age;
  if (d.age_bucket) j["age_bucket"] = std::string(to_string(*d.age_bucket));
  j["gender"] = std::string(to_string(d.gender));
  if (d.ethnicity) j["ethnicity"] = *d.ethnicity;
  json responses = json::array();
  for (const auto& r : session.responses) {
    responses.push_back({{"response_id", r.response_id},
                         {"prompt_topic", r.prompt_topic},
                         {"text", r.text}});
  }
  j["responses"] = std::move(responses);
  return j;
}

void write_corpus_jsonl(const Corpus& corpus, std::ostream& out) {
  for (const auto& subject : corpus.subjects) {
    for (const auto& session : subject.sessions) {
      out << session_to_json(subject, session).dump() << '\n';
    }
  }
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write corpus file " + path.string());
  write_corpus_jsonl(corpus, out);
}

// -- partitioning ------------------------------------------------------------------

std::pair<Corpus, Corpus> partition_speaker_disjoint(const Corpus& corpus, double test_fraction,
                                                     std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw DomainError("test_fraction must lie in (0,1)");
  }
  const std::size_t n = corpus.subjects.size();
  if (n < 2) throw DomainError("partitioning needs at least 2 subjects");

  std::vector<std::size_t> singles;
  for (std::size_t i = 0; i < n; ++i) {
    if (corpus.subjects[i].sessions.size() <= 1) singles.push_back(i);
  }
  const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
  if (n_test == 0 || n_test >= n) {
    throw DomainError("test_fraction leaves a partition empty");
  }
  if (n_test > singles.size()) {
    throw DomainError("only " + std::to_string(singles.size()) +
                      " single-session subjects available for a test partition of " +
                      std::to_string(n_test));
  }

  std::mt19937_64 rng(seed);
  std::shuffle(singles.begin(), singles.end(), rng);
  std::vector<bool> in_test(n, false);
  for (std::size_t k = 0; k < n_test; ++k) in_test[singles[k]] = true;

  Corpus train{corpus.name + "_train", {}, SplitTag::train};
  Corpus test{corpus.name + "_test", {}, SplitTag::test};
  for (std::size_t i = 0; i < n; ++i) {
    (in_test[i] ? test : train).subjects.push_back(corpus.subjects[i]);
  }
  return {std::move(train), std::move(test)};
}

// -- stats ---------------------------------------------------------------------------

CorpusStats corpus_stats(const Corpus& corpus) {
  CorpusStats st;
  std::size_t words = 0;
  std::size_t responses = 0;
  for (const auto& subject : corpus.subjects) {
    if (subject.sessions.empty()) continue;
    StatsCell* row = nullptr;
    if (label_subject_consistency(subject) == ConsistencyLabel::inconsistent) {
      row = &st.mixed;
    } else {
      row = binarize_phq(subject.sessions.front().phq8_score) == DepressionClass::dep_plus
                ? &st.dep_plus
                : &st.dep_minus;
    }
    row->subjects += 1;
    row->sessions += subject.sessions.size();
    st.total.subjects += 1;
    st.total.sessions += subject.sessions.size();
    for (const auto& session : subject.sessions) {
      if (binarize_phq(session.phq8_score) == DepressionClass::dep_plus) {
        ++st.sessions_dep_plus;
      } else {
        ++st.sessions_dep_minus;
      }
      words += session.word_count();
      responses += session.responses.size();
    }
  }
  if (st.total.sessions > 0) {
    st.mean_words_per_session = static_cast<double>(words) / static_cast<double>(st.total.sessions);
    st.mean_responses_per_session =
        static_cast<double>(responses) / static_cast<double>(st.total.sessions);
  }
  return st;
}

json CorpusStats::to_json() const {
  auto cell = [](const StatsCell& c) { return json{{"sessions", c.sessions}, {"subjects", c.subjects}}; };
  return json{{"dep+", cell(dep_plus)},
              {"dep-", cell(dep_minus)},
              {"dep+/-", cell(mixed)},
              {"total", cell(total)},
              {"sessions_by_class", {{"dep+", sessions_dep_plus}, {"dep-", sessions_dep_minus}}},
              {"mean_words_per_session", mean_words_per_session},
              {"mean_responses_per_session", mean_responses_per_session}};
}

std::string CorpusStats::to_csv() const {
  std::ostringstream out;
  out << "row,sessions,subjects,sessions_by_session_class\n";
  out << "dep+," << dep_plus.sessions << ',' << dep_plus.subjects << ',' << sessions_dep_plus << '\n';
  out << "dep-," << dep_minus.sessions << ',' << dep_minus.subjects << ',' << sessions_dep_minus << '\n';
  out << "dep+/-," << mixed.sessions << ',' << mixed.subjects << ",\n";
  out << "total," << total.sessions << ',' << total.subjects << ',' << total.sessions << '\n';
  out << "mean_words_per_session," << mean_words_per_session << ",,\n";
  out << "mean_responses_per_session," << mean_responses_per_session << ",,\n";
  return out.str();
}

// -- session text ---------------------------------------------------------------------

std::vector<std::string> session_text(const Session& session, TextMode mode) {
  std::vector<std::string> units;
  for (const auto& r : session.responses) {
    if (!r.degenerate) units.push_back(r.text);
  }
  if (units.empty()) {
    throw DegenerateInput("session " + session.session_id + " has no non-empty responses");
  }
  if (mode == TextMode::per_response) return units;

  std::string joined = units.front();
  for (std::size_t i = 1; i < units.size(); ++i) {
    joined += ' ';
    joined += kResponseSeparator;
    joined += ' ';
    joined += units[i];
  }
  return {std::move(joined)};
}

CorpusSource::CorpusSource(const Corpus& corpus) {
  for (const auto& subject : corpus.subjects) {
    for (const auto& session : subject.sessions) sessions_.push_back(&session);
  }
}

std::string CorpusSource::document(std::size_t index) const {
  return session_text(*sessions_.at(index), TextMode::concatenate_responses).front();
}

std::vector<std::string> CorpusSource::text_units(std::size_t index, TextMode mode) const {
  return session_text(*sessions_.at(index), mode);
}

int CorpusSource::phq8_score(std::size_t index) const { return sessions_.at(index)->phq8_score; }

DocumentSource DocumentSource::from_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open text file " + path.string());
  std::vector<std::string> docs;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") != std::string::npos) docs.push_back(line);
  }
  return DocumentSource(std::move(docs));
}

}  // namespace dport
