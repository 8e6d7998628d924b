#pragma once

// Data model for longitudinal, demographically annotated, PHQ-8 labelled
// transcript corpora, plus JSONL ingestion, labelling and partitioning.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace dport {

inline constexpr int kPhqMin = 0;
inline constexpr int kPhqMax = 24;
inline constexpr int kPhqCutoff = 10;

/// Literal inserted between responses when a session is flattened to one text.
inline constexpr std::string_view kResponseSeparator = "<rsep>";

enum class Gender { female, male, unspecified };
enum class AgeBucket { age_18_25, age_26_35, age_36_45, age_46_65, above_65 };
enum class DepressionClass { dep_minus, dep_plus };
enum class ConsistencyLabel { consistent, inconsistent };
enum class SplitTag { train, test, unsplit };
enum class TextMode { concatenate_responses, per_response };

std::string_view to_string(Gender g);
std::string_view to_string(AgeBucket b);
std::string_view to_string(DepressionClass c);
std::string_view to_string(ConsistencyLabel c);
std::string_view to_string(SplitTag t);
std::string_view to_string(TextMode m);

Gender parse_gender(std::string_view s);
AgeBucket parse_age_bucket(std::string_view s);
TextMode parse_text_mode(std::string_view s);

/// Bucket containing `age`; lower edges inclusive (65 -> 46-65, 66 -> above 65).
/// Ages below 18 have no bucket.
std::optional<AgeBucket> age_bucket_for(int age);

/// All buckets in report order.
const std::vector<AgeBucket>& all_age_buckets();

/// Number of whitespace-delimited tokens.
std::size_t count_words(std::string_view text);

struct Response {
  std::string response_id;
  std::string prompt_topic;
  std::string text;
  std::size_t word_count = 0;
  bool degenerate = false;  // empty text

  static Response make(std::string id, std::string topic, std::string text);
};

struct Session {
  std::string session_id;
  std::string subject_id;
  std::vector<Response> responses;
  int phq8_score = 0;
  std::optional<std::string> timestamp;  // ISO-8601 date

  std::size_t word_count() const;
};

struct Demographics {
  std::optional<int> age;
  std::optional<AgeBucket> age_bucket;
  Gender gender = Gender::unspecified;
  std::optional<std::string> ethnicity;

  /// Explicit bucket, else the bucket derived from `age`.
  std::optional<AgeBucket> effective_bucket() const;
  bool operator==(const Demographics&) const = default;
};

struct Subject {
  std::string subject_id;
  Demographics demographics;
  std::vector<Session> sessions;
};

struct Corpus {
  std::string name;
  std::vector<Subject> subjects;
  SplitTag split_tag = SplitTag::unsplit;

  std::size_t session_count() const;
  const Subject* find_subject(std::string_view subject_id) const;
  /// Checks unique subject and session ids and per-session invariants.
  void validate() const;
};

/// Maps a PHQ-8 total to its binary class (>= 10 is dep+).
DepressionClass binarize_phq(int score);

/// Inconsistent iff the subject's sessions contain both classes.
ConsistencyLabel label_subject_consistency(const Subject& subject);

struct LoadOptions {
  /// Receives non-fatal warnings (demographic conflicts). When unset they go to stderr.
  std::vector<std::string>* warnings = nullptr;
};

/// Parses one session per line. Blank lines are skipped.
Corpus parse_corpus_jsonl(std::istream& in, std::string name, const LoadOptions& opts = {});
Corpus load_corpus(const std::filesystem::path& path, const LoadOptions& opts = {});

/// One JSON object per session, subjects in corpus order.
void write_corpus_jsonl(const Corpus& corpus, std::ostream& out);
void save_corpus(const Corpus& corpus, const std::filesystem::path& path);
nlohmann::json session_to_json(const Subject& subject, const Session& session);

/// Speaker-disjoint train/test split. Subjects with more than one session always go
/// to train; test subjects are drawn from single-session subjects.
std::pair<Corpus, Corpus> partition_speaker_disjoint(const Corpus& corpus, double test_fraction,
                                                     std::uint64_t seed);

struct StatsCell {
  std::size_t sessions = 0;
  std::size_t subjects = 0;
};

/// Corpus summary in the layout of the usual data-characteristics table.
///
/// Subject rows classify subjects: all-dep+ subjects, all-dep- subjects and
/// inconsistent (dep+/-) subjects; their `sessions` count the sessions of those
/// subjects. `sessions_dep_plus` / `sessions_dep_minus` count every session by its
/// own class regardless of subject consistency.
struct CorpusStats {
  StatsCell dep_plus;
  StatsCell dep_minus;
  StatsCell mixed;
  StatsCell total;
  std::size_t sessions_dep_plus = 0;
  std::size_t sessions_dep_minus = 0;
  double mean_words_per_session = 0.0;
  double mean_responses_per_session = 0.0;

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

CorpusStats corpus_stats(const Corpus& corpus);

/// Text units for one session. Concatenation joins responses with " <rsep> ";
/// degenerate (empty) responses are skipped in both modes.
std::vector<std::string> session_text(const Session& session, TextMode mode);

// -- text sources -------------------------------------------------------------

/// Ordered collection of unlabelled documents, the only view a language model sees.
class TextSource {
 public:
  virtual ~TextSource() = default;
  virtual std::size_t document_count() const = 0;
  virtual std::string document(std::size_t index) const = 0;
};

/// Sessions with labels. `document(i)` is the concatenated session text.
class SessionSource : public TextSource {
 public:
  virtual std::vector<std::string> text_units(std::size_t index, TextMode mode) const = 0;
  virtual int phq8_score(std::size_t index) const = 0;
};

/// Flattens a corpus (subject order, then session order) into a SessionSource.
class CorpusSource : public SessionSource {
 public:
  explicit CorpusSource(const Corpus& corpus);

  std::size_t document_count() const override { return sessions_.size(); }
  std::string document(std::size_t index) const override;
  std::vector<std::string> text_units(std::size_t index, TextMode mode) const override;
  int phq8_score(std::size_t index) const override;

  const Session& session(std::size_t index) const { return *sessions_.at(index); }

 private:
  std::vector<const Session*> sessions_;
};

/// Plain documents, e.g. one line of a generic text file per document.
class DocumentSource : public TextSource {
 public:
  explicit DocumentSource(std::vector<std::string> documents) : docs_(std::move(documents)) {}
  static DocumentSource from_lines(const std::filesystem::path& path);

  std::size_t document_count() const override { return docs_.size(); }
  std::string document(std::size_t index) const override { return docs_.at(index); }

 private:
  std::vector<std::string> docs_;
};

}  // namespace dport
