#pragma once

// Synthetic PHQ-8 corpora with planted lexical signal, age-dependent vocabulary
// drift, longitudinal label dynamics and an optional senior text-noise ramp.

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dport/corpus.hpp"

namespace dport {

/// Discrete distribution over integers, e.g. responses per session.
struct IntPmf {
  std::map<int, double> weights;

  void validate(const char* what, int min_value) const;
  double mean() const;
  int sample(std::mt19937_64& rng) const;
};

struct AgeComponent {
  double weight = 1.0;
  double mean = 30.0;
  double sd = 7.0;
  int min_age = 18;
  int max_age = 65;
};

/// Mixture of truncated, integer-discretised normals.
struct AgeDistribution {
  std::vector<AgeComponent> components;

  void validate() const;
  int sample(std::mt19937_64& rng) const;
  /// Probability of each integer age in [0, 120].
  std::vector<double> pmf() const;
  double mean() const;
};

/// Sum over ages of min(p(age), q(age)).
double overlap_coefficient(const AgeDistribution& a, const AgeDistribution& b);

struct LexiconSpec {
  std::size_t base_size = 600;
  std::size_t alternate_size = 600;
  std::size_t markers_per_class = 30;
  double zipf_exponent = 1.0;
  /// Each base word has this many preferred successors...
  std::size_t followers_per_word = 3;
  /// ...which replace the next unigram draw with this probability.
  double follow_prob = 0.6;
  std::uint64_t seed = 7;

  void validate() const;
  bool operator==(const LexiconSpec&) const = default;
};

/// Deterministic pseudo-word inventory. Base words carry Zipf weights; each base
/// word and each class marker has a fixed alternate that replaces it under drift.
struct Lexicon {
  std::vector<std::string> base;
  std::vector<std::string> alternate;
  std::vector<std::string> markers_plus;
  std::vector<std::string> markers_minus;
  std::vector<std::string> alt_markers_plus;
  std::vector<std::string> alt_markers_minus;
  std::vector<double> base_weights;
  /// Successor base indices keyed by base index, then plus markers, then minus
  /// markers (see follower_key).
  std::vector<std::vector<std::size_t>> followers;

  static Lexicon build(const LexiconSpec& spec);
};

struct DegradationSpec {
  bool enabled = false;
  double start_age = 55.0;
  double full_age = 90.0;
  double max_noise = 0.8;

  /// Fraction of tokens replaced by random base words at `age`.
  double noise_at(int age) const;
};

struct SynthSpec {
  std::string name = "synth";
  std::string id_prefix = "S";
  std::size_t n_subjects = 200;
  IntPmf sessions_per_subject{{{1, 1.0}}};
  IntPmf responses_per_session{{{4, 0.6}, {5, 0.3}, {6, 0.1}}};
  double words_per_response = 178.0;
  double words_scale = 1.0;
  double dep_prevalence = 0.27;
  double signal_strength = 0.02;
  /// Rate of the opposite class's markers, relative to signal_strength.
  double marker_crosstalk = 0.5;
  double noise_for_inconsistent = 0.0;
  AgeDistribution age;
  std::map<std::string, double> gender;
  std::map<std::string, double> ethnicity;
  double inconsistency_rate = 0.0;
  double domain_shift = 0.0;
  /// Drift applies only to subjects at least this old.
  int domain_shift_min_age = 0;
  DegradationSpec degradation;
  LexiconSpec lexicon;
  std::string start_date = "2019-01-07";
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static SynthSpec from_json(const nlohmann::json& j, const SynthSpec& defaults);
  /// SHA-256 of the canonical JSON form.
  std::string hash() const;
};

/// Young, large, single-session corpus.
SynthSpec default_gp_spec();
/// Senior, small, longitudinal corpus with inconsistent subjects.
SynthSpec default_sp_spec();

Corpus generate_corpus(const SynthSpec& spec);

/// Checks that the age distributions overlap by less than 0.2 and that both specs
/// share a lexicon.
std::pair<Corpus, Corpus> gp_sp_pair(const SynthSpec& gp, const SynthSpec& sp);

inline constexpr double kMaxAgeOverlap = 0.2;

struct GenericTextSpec {
  std::size_t n_documents = 400;
  std::size_t words_per_document = 120;
  /// Probability a token comes from the drifted vocabulary.
  double alternate_rate = 0.2;
  /// Probability a token is a (class-neutral) marker word.
  double marker_rate = 0.02;
  LexiconSpec lexicon;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static GenericTextSpec from_json(const nlohmann::json& j, const GenericTextSpec& defaults);
};

/// Unlabelled general-domain documents over the full lexicon.
std::vector<std::string> generate_generic_text(const GenericTextSpec& spec);

}  // namespace dport
