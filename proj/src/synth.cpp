#include "dport/synth.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <set>
#include <unordered_set>

#include "dport/errors.hpp"
#include "dport/util.hpp"

namespace dport {

namespace {

constexpr int kMaxAge = 120;

double uniform01(std::mt19937_64& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& what) {
  if (!j.is_object()) throw ConfigError(what + " must be a table");
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown " + what + " key '" + key + "'");
  }
}

void check_pmf_map(const std::map<std::string, double>& m, const char* what) {
  double total = 0.0;
  for (const auto& [k, w] : m) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError(std::string(what) + " weight for '" + k + "' is invalid");
    total += w;
  }
  if (!m.empty() && !(total > 0.0)) throw ConfigError(std::string(what) + " weights sum to zero");
}

template <typename Map>
auto sample_key(const Map& m, std::mt19937_64& rng) {
  double total = 0.0;
  for (const auto& [_, w] : m) total += w;
  double u = uniform01(rng) * total;
  for (const auto& [k, w] : m) {
    if (u < w) return k;
    u -= w;
  }
  return std::prev(m.end())->first;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

std::size_t sample_cdf(const std::vector<double>& cdf, std::mt19937_64& rng) {
  const double u = uniform01(rng) * cdf.back();
  const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
  return std::min(static_cast<std::size_t>(it - cdf.begin()), cdf.size() - 1);
}

std::vector<double> cumulative(const std::vector<double>& w) {
  std::vector<double> c(w.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) c[i] = acc += w[i];
  return c;
}

// PHQ-8 totals per class, peaking near 4 (dep-) and 13 (dep+).
const std::vector<double>& phq_cdf(DepressionClass c) {
  static const auto make = [](int lo, int hi, double mode, double sd) {
    std::vector<double> w;
    for (int k = lo; k <= hi; ++k) w.push_back(std::exp(-0.5 * (k - mode) * (k - mode) / (sd * sd)));
    return cumulative(w);
  };
  static const std::vector<double> minus = make(0, 9, 4.0, 2.5);
  static const std::vector<double> plus = make(10, 24, 13.0, 4.0);
  return c == DepressionClass::dep_plus ? plus : minus;
}

int sample_phq(DepressionClass c, std::mt19937_64& rng) {
  const int base = c == DepressionClass::dep_plus ? kPhqCutoff : kPhqMin;
  return base + static_cast<int>(sample_cdf(phq_cdf(c), rng));
}

std::string add_days(const std::string& iso_date, int days) {
  int y = 0;
  unsigned m = 0, d = 0;
  if (std::sscanf(iso_date.c_str(), "%d-%u-%u", &y, &m, &d) != 3) {
    throw ConfigError("start_date must be YYYY-MM-DD, got '" + iso_date + "'");
  }
  const std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}};
  if (!ymd.ok()) throw ConfigError("start_date '" + iso_date + "' is not a calendar date");
  const std::chrono::year_month_day out{std::chrono::sys_days{ymd} + std::chrono::days{days}};
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(out.year()), static_cast<unsigned>(out.month()),
                static_cast<unsigned>(out.day()));
  return buf;
}

const std::vector<std::string> kTopics = {"concerns", "home_life", "sleep", "work", "mood", "hobbies", "health"};

}  // namespace

// -- distributions ----------------------------------------------------------------------

void IntPmf::validate(const char* what, int min_value) const {
  if (weights.empty()) throw ConfigError(std::string(what) + " distribution is empty");
  double total = 0.0;
  for (const auto& [k, w] : weights) {
    if (k < min_value) throw ConfigError(std::string(what) + " value " + std::to_string(k) + " is below " + std::to_string(min_value));
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError(std::string(what) + " has an invalid weight");
    total += w;
  }
  if (!(total > 0.0)) throw ConfigError(std::string(what) + " weights sum to zero");
}

double IntPmf::mean() const {
  double total = 0.0, acc = 0.0;
  for (const auto& [k, w] : weights) {
    total += w;
    acc += k * w;
  }
  return acc / total;
}

int IntPmf::sample(std::mt19937_64& rng) const { return sample_key(weights, rng); }

void AgeDistribution::validate() const {
  if (components.empty()) throw ConfigError("age distribution has no components");
  for (const auto& c : components) {
    if (!(c.weight > 0.0) || !(c.sd > 0.0)) throw ConfigError("age component needs positive weight and sd");
    if (c.min_age < 0 || c.max_age > kMaxAge || c.min_age > c.max_age) throw ConfigError("age component bounds invalid");
  }
}

int AgeDistribution::sample(std::mt19937_64& rng) const {
  std::map<std::size_t, double> w;
  for (std::size_t i = 0; i < components.size(); ++i) w[i] = components[i].weight;
  const auto& c = components[sample_key(w, rng)];
  std::normal_distribution<double> n(c.mean, c.sd);
  for (int attempt = 0; attempt < 10000; ++attempt) {
    const auto a = static_cast<int>(std::lround(n(rng)));
    if (a >= c.min_age && a <= c.max_age) return a;
  }
  throw ConfigError("age component places almost no mass inside its bounds");
}

std::vector<double> AgeDistribution::pmf() const {
  std::vector<double> p(kMaxAge + 1, 0.0);
  double total_w = 0.0;
  for (const auto& c : components) total_w += c.weight;
  for (const auto& c : components) {
    std::vector<double> local(kMaxAge + 1, 0.0);
    double mass = 0.0;
    for (int a = c.min_age; a <= c.max_age; ++a) {
      local[a] = normal_cdf((a + 0.5 - c.mean) / c.sd) - normal_cdf((a - 0.5 - c.mean) / c.sd);
      mass += local[a];
    }
    if (mass <= 0.0) continue;
    for (int a = 0; a <= kMaxAge; ++a) p[a] += c.weight / total_w * local[a] / mass;
  }
  return p;
}

double AgeDistribution::mean() const {
  const auto p = pmf();
  double m = 0.0;
  for (int a = 0; a <= kMaxAge; ++a) m += a * p[a];
  return m;
}

double overlap_coefficient(const AgeDistribution& a, const AgeDistribution& b) {
  const auto pa = a.pmf();
  const auto pb = b.pmf();
  double s = 0.0;
  for (std::size_t i = 0; i < pa.size(); ++i) s += std::min(pa[i], pb[i]);
  return s;
}

// -- lexicon ----------------------------------------------------------------------------

void LexiconSpec::validate() const {
  if (base_size < 2) throw ConfigError("lexicon base_size must be >= 2");
  if (alternate_size < 1) throw ConfigError("lexicon alternate_size must be >= 1");
  if (markers_per_class < 1) throw ConfigError("lexicon markers_per_class must be >= 1");
  if (!(zipf_exponent >= 0.0)) throw ConfigError("lexicon zipf_exponent must be >= 0");
  if (!(follow_prob >= 0.0 && follow_prob <= 1.0)) throw ConfigError("lexicon follow_prob must be in [0, 1]");
  if (follow_prob > 0.0 && followers_per_word < 1) {
    throw ConfigError("lexicon followers_per_word must be >= 1 when follow_prob > 0");
  }
}

Lexicon Lexicon::build(const LexiconSpec& spec) {
  spec.validate();
  static constexpr std::string_view onsets = "bdfgklmnprstvz";
  static constexpr std::string_view vowels = "aeiou";
  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32), 0x1e71u};
  std::mt19937_64 rng(seq);
  std::unordered_set<std::string> seen;
  auto fresh = [&](std::size_t n) {
    std::vector<std::string> out;
    while (out.size() < n) {
      const int syllables = 2 + static_cast<int>(rng() % 3);
      std::string w;
      for (int s = 0; s < syllables; ++s) {
        w += onsets[rng() % onsets.size()];
        w += vowels[rng() % vowels.size()];
      }
      if (seen.insert(w).second) out.push_back(std::move(w));
    }
    return out;
  };
  Lexicon lex;
  lex.base = fresh(spec.base_size);
  lex.alternate = fresh(spec.alternate_size);
  lex.markers_plus = fresh(spec.markers_per_class);
  lex.markers_minus = fresh(spec.markers_per_class);
  lex.alt_markers_plus = fresh(spec.markers_per_class);
  lex.alt_markers_minus = fresh(spec.markers_per_class);
  for (std::size_t r = 0; r < lex.base.size(); ++r) {
    lex.base_weights.push_back(1.0 / std::pow(static_cast<double>(r + 1), spec.zipf_exponent));
  }
  const auto cdf = cumulative(lex.base_weights);
  lex.followers.resize(lex.base.size() + 2 * spec.markers_per_class);
  for (auto& f : lex.followers) {
    for (std::size_t k = 0; k < spec.followers_per_word; ++k) f.push_back(sample_cdf(cdf, rng));
  }
  return lex;
}

double DegradationSpec::noise_at(int age) const {
  if (!enabled) return 0.0;
  const double ramp = std::clamp((age - start_age) / (full_age - start_age), 0.0, 1.0);
  return max_noise * ramp;
}

// -- spec -------------------------------------------------------------------------------

void SynthSpec::validate() const {
  if (n_subjects == 0) throw ConfigError("n_subjects must be positive");
  sessions_per_subject.validate("sessions_per_subject", 1);
  responses_per_session.validate("responses_per_session", 1);
  if (!(words_per_response > 0.0)) throw ConfigError("words_per_response must be positive");
  if (!(words_scale > 0.0)) throw ConfigError("words_scale must be positive");
  if (!(dep_prevalence >= 0.0 && dep_prevalence <= 1.0)) throw ConfigError("dep_prevalence must lie in [0,1]");
  if (!(signal_strength >= 0.0)) throw ConfigError("signal_strength must be >= 0");
  if (!(marker_crosstalk >= 0.0)) throw ConfigError("marker_crosstalk must be >= 0");
  if (signal_strength * (1.0 + marker_crosstalk) > 1.0) throw ConfigError("marker rate exceeds 1");
  if (!(noise_for_inconsistent >= 0.0 && noise_for_inconsistent <= 1.0)) {
    throw ConfigError("noise_for_inconsistent must lie in [0,1]");
  }
  if (!(inconsistency_rate >= 0.0 && inconsistency_rate < 1.0)) throw ConfigError("inconsistency_rate must lie in [0,1)");
  if (!(domain_shift >= 0.0 && domain_shift <= 1.0)) throw ConfigError("domain_shift must lie in [0,1]");
  if (degradation.enabled) {
    if (!(degradation.full_age > degradation.start_age)) throw ConfigError("degradation full_age must exceed start_age");
    if (!(degradation.max_noise >= 0.0 && degradation.max_noise <= 1.0)) {
      throw ConfigError("degradation max_noise must lie in [0,1]");
    }
  }
  age.validate();
  check_pmf_map(gender, "gender");
  for (const auto& [g, _] : gender) parse_gender(g);
  check_pmf_map(ethnicity, "ethnicity");
  lexicon.validate();
  add_days(start_date, 0);
}

namespace {

nlohmann::json pmf_json(const IntPmf& p) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, w] : p.weights) j[std::to_string(k)] = w;
  return j;
}

IntPmf pmf_from(const nlohmann::json& j, const char* what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + " must map values to weights");
  IntPmf p;
  for (const auto& [k, w] : j.items()) {
    try {
      std::size_t used = 0;
      const int v = std::stoi(k, &used);
      if (used != k.size()) throw std::invalid_argument(k);
      p.weights[v] = w.get<double>();
    } catch (const std::logic_error&) {
      throw ConfigError(std::string(what) + " key '" + k + "' is not an integer");
    }
  }
  return p;
}

nlohmann::json lexicon_json(const LexiconSpec& l) {
  return {{"base_size", l.base_size},
          {"alternate_size", l.alternate_size},
          {"markers_per_class", l.markers_per_class},
          {"zipf_exponent", l.zipf_exponent},
          {"followers_per_word", l.followers_per_word},
          {"follow_prob", l.follow_prob},
          {"seed", l.seed}};
}

LexiconSpec lexicon_from(const nlohmann::json& j, LexiconSpec l) {
  reject_unknown(j,
                 {"base_size", "alternate_size", "markers_per_class", "zipf_exponent", "followers_per_word",
                  "follow_prob", "seed"},
                 "lexicon");
  l.base_size = j.value("base_size", l.base_size);
  l.alternate_size = j.value("alternate_size", l.alternate_size);
  l.markers_per_class = j.value("markers_per_class", l.markers_per_class);
  l.zipf_exponent = j.value("zipf_exponent", l.zipf_exponent);
  l.followers_per_word = j.value("followers_per_word", l.followers_per_word);
  l.follow_prob = j.value("follow_prob", l.follow_prob);
  l.seed = j.value("seed", l.seed);
  return l;
}

}  // namespace

nlohmann::json SynthSpec::to_json() const {
  nlohmann::json ages = nlohmann::json::array();
  for (const auto& c : age.components) {
    ages.push_back({{"weight", c.weight}, {"mean", c.mean}, {"sd", c.sd}, {"min_age", c.min_age}, {"max_age", c.max_age}});
  }
  return {{"name", name},
          {"id_prefix", id_prefix},
          {"n_subjects", n_subjects},
          {"sessions_per_subject", pmf_json(sessions_per_subject)},
          {"responses_per_session", pmf_json(responses_per_session)},
          {"words_per_response", words_per_response},
          {"words_scale", words_scale},
          {"dep_prevalence", dep_prevalence},
          {"signal_strength", signal_strength},
          {"marker_crosstalk", marker_crosstalk},
          {"noise_for_inconsistent", noise_for_inconsistent},
          {"age", ages},
          {"gender", gender},
          {"ethnicity", ethnicity},
          {"inconsistency_rate", inconsistency_rate},
          {"domain_shift", domain_shift},
          {"domain_shift_min_age", domain_shift_min_age},
          {"degradation",
           {{"enabled", degradation.enabled},
            {"start_age", degradation.start_age},
            {"full_age", degradation.full_age},
            {"max_noise", degradation.max_noise}}},
          {"lexicon", lexicon_json(lexicon)},
          {"start_date", start_date},
          {"seed", seed}};
}

SynthSpec SynthSpec::from_json(const nlohmann::json& j, const SynthSpec& d) {
  reject_unknown(j,
                 {"name", "id_prefix", "n_subjects", "sessions_per_subject", "responses_per_session",
                  "words_per_response", "words_scale", "dep_prevalence", "signal_strength", "marker_crosstalk",
                  "noise_for_inconsistent", "age", "gender", "ethnicity", "inconsistency_rate", "domain_shift",
                  "domain_shift_min_age", "degradation", "lexicon", "start_date", "seed"},
                 "synth");
  SynthSpec s = d;
  try {
    s.name = j.value("name", s.name);
    s.id_prefix = j.value("id_prefix", s.id_prefix);
    s.n_subjects = j.value("n_subjects", s.n_subjects);
    if (j.contains("sessions_per_subject")) s.sessions_per_subject = pmf_from(j["sessions_per_subject"], "sessions_per_subject");
    if (j.contains("responses_per_session")) {
      s.responses_per_session = pmf_from(j["responses_per_session"], "responses_per_session");
    }
    s.words_per_response = j.value("words_per_response", s.words_per_response);
    s.words_scale = j.value("words_scale", s.words_scale);
    s.dep_prevalence = j.value("dep_prevalence", s.dep_prevalence);
    s.signal_strength = j.value("signal_strength", s.signal_strength);
    s.marker_crosstalk = j.value("marker_crosstalk", s.marker_crosstalk);
    s.noise_for_inconsistent = j.value("noise_for_inconsistent", s.noise_for_inconsistent);
    if (j.contains("age")) {
      s.age.components.clear();
      for (const auto& c : j["age"]) {
        reject_unknown(c, {"weight", "mean", "sd", "min_age", "max_age"}, "age component");
        AgeComponent a;
        a.weight = c.value("weight", a.weight);
        a.mean = c.value("mean", a.mean);
        a.sd = c.value("sd", a.sd);
        a.min_age = c.value("min_age", a.min_age);
        a.max_age = c.value("max_age", a.max_age);
        s.age.components.push_back(a);
      }
    }
    if (j.contains("gender")) s.gender = j["gender"].get<std::map<std::string, double>>();
    if (j.contains("ethnicity")) s.ethnicity = j["ethnicity"].get<std::map<std::string, double>>();
    s.inconsistency_rate = j.value("inconsistency_rate", s.inconsistency_rate);
    s.domain_shift = j.value("domain_shift", s.domain_shift);
    s.domain_shift_min_age = j.value("domain_shift_min_age", s.domain_shift_min_age);
    if (j.contains("degradation")) {
      const auto& g = j["degradation"];
      reject_unknown(g, {"enabled", "start_age", "full_age", "max_noise"}, "degradation");
      s.degradation.enabled = g.value("enabled", s.degradation.enabled);
      s.degradation.start_age = g.value("start_age", s.degradation.start_age);
      s.degradation.full_age = g.value("full_age", s.degradation.full_age);
      s.degradation.max_noise = g.value("max_noise", s.degradation.max_noise);
    }
    if (j.contains("lexicon")) s.lexicon = lexicon_from(j["lexicon"], s.lexicon);
    s.start_date = j.value("start_date", s.start_date);
    s.seed = j.value("seed", s.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("synth spec: ") + e.what());
  }
  return s;
}

std::string SynthSpec::hash() const { return sha256_hex(to_json().dump()); }

SynthSpec default_gp_spec() {
  SynthSpec s;
  s.name = "gp";
  s.id_prefix = "G";
  s.n_subjects = 1500;
  s.sessions_per_subject = {{{1, 1.0}}};
  s.responses_per_session = {{{4, 0.6}, {5, 0.3}, {6, 0.1}}};
  s.words_per_response = 178.0;
  s.dep_prevalence = 0.267;
  s.age.components = {{1.0, 30.0, 7.0, 18, 65}};
  s.gender = {{"female", 0.59}, {"male", 0.41}};
  s.ethnicity = {{"caucasian", 2047}, {"hispanic", 246},   {"african_american", 244},
                 {"mixed", 170},      {"east_asian", 125}, {"other", 89},
                 {"south_asian", 58}, {"caribbean", 37},   {"decline", 25}};
  s.inconsistency_rate = 0.0;
  s.domain_shift = 0.0;
  s.seed = 11;
  return s;
}

SynthSpec default_sp_spec() {
  SynthSpec s;
  s.name = "sp";
  s.id_prefix = "P";
  s.n_subjects = 161;
  s.sessions_per_subject = {{{1, 0.15}, {2, 0.1}, {3, 0.1}, {4, 0.15}, {5, 0.15}, {6, 0.15}, {7, 0.2}}};
  s.responses_per_session = {{{5, 0.3}, {6, 0.3}, {7, 0.4}}};
  s.words_per_response = 74.0;
  s.dep_prevalence = 0.303;
  s.noise_for_inconsistent = 0.35;
  s.age.components = {{0.08, 38.0, 8.0, 18, 50}, {0.92, 68.0, 9.0, 46, 99}};
  s.gender = {{"female", 0.62}, {"male", 0.38}};
  s.inconsistency_rate = 0.31;
  s.domain_shift = 0.3;
  s.seed = 23;
  return s;
}

// -- generation -------------------------------------------------------------------------

namespace {

enum class Pool { base, alternate, marker_plus, marker_minus, alt_marker_plus, alt_marker_minus };

struct TextModel {
  const Lexicon& lex;
  std::vector<double> base_cdf;
  double follow_prob;

  TextModel(const Lexicon& l, double follow) : lex(l), base_cdf(cumulative(l.base_weights)), follow_prob(follow) {}

  const std::string& word(Pool p, std::size_t i) const {
    switch (p) {
      case Pool::base: return lex.base[i];
      case Pool::alternate: return lex.alternate[i % lex.alternate.size()];
      case Pool::marker_plus: return lex.markers_plus[i];
      case Pool::marker_minus: return lex.markers_minus[i];
      case Pool::alt_marker_plus: return lex.alt_markers_plus[i];
      case Pool::alt_marker_minus: return lex.alt_markers_minus[i];
    }
    return lex.base[0];
  }

  std::size_t zipf(std::mt19937_64& rng) const { return sample_cdf(base_cdf, rng); }
  std::optional<std::size_t> follower_key(Pool p, std::size_t idx) const {
    const std::size_t m = lex.markers_plus.size();
    switch (p) {
      case Pool::base:
      case Pool::alternate: return idx;
      case Pool::marker_plus:
      case Pool::alt_marker_plus: return lex.base.size() + idx;
      case Pool::marker_minus:
      case Pool::alt_marker_minus: return lex.base.size() + m + idx;
    }
    return std::nullopt;
  }
  // Next base index given the previous follower key, if any.
  std::size_t next_base(std::optional<std::size_t> prev, std::mt19937_64& rng) const {
    if (prev && follow_prob > 0.0 && uniform01(rng) < follow_prob) {
      const auto& f = lex.followers[*prev];
      return f[rng() % f.size()];
    }
    return zipf(rng);
  }
  std::size_t any_marker(std::mt19937_64& rng) const {
    return static_cast<std::size_t>(rng() % lex.markers_plus.size());
  }
};

struct TokenParams {
  DepressionClass text_class;
  double signal;
  double crosstalk;
  double shift;
  double noise;
};

std::string generate_text(const TextModel& tm, std::size_t n_words, const TokenParams& p, std::mt19937_64& rng) {
  const bool plus = p.text_class == DepressionClass::dep_plus;
  std::string out;
  std::optional<std::size_t> prev;
  for (std::size_t w = 0; w < n_words; ++w) {
    Pool pool = Pool::base;
    std::size_t idx = 0;
    const double u = uniform01(rng);
    if (u < p.signal) {
      pool = plus ? Pool::marker_plus : Pool::marker_minus;
      idx = tm.any_marker(rng);
    } else if (u < p.signal * (1.0 + p.crosstalk)) {
      pool = plus ? Pool::marker_minus : Pool::marker_plus;
      idx = tm.any_marker(rng);
    } else {
      idx = tm.next_base(prev, rng);
    }
    if (p.shift > 0.0 && uniform01(rng) < p.shift) {
      if (pool == Pool::base) pool = Pool::alternate;
      else if (pool == Pool::marker_plus) pool = Pool::alt_marker_plus;
      else if (pool == Pool::marker_minus) pool = Pool::alt_marker_minus;
    }
    if (p.noise > 0.0 && uniform01(rng) < p.noise) {
      pool = Pool::base;
      idx = tm.zipf(rng);
    }
    prev = tm.follower_key(pool, idx);
    if (!out.empty()) out += ' ';
    out += tm.word(pool, idx);
  }
  return out;
}

DepressionClass other(DepressionClass c) {
  return c == DepressionClass::dep_plus ? DepressionClass::dep_minus : DepressionClass::dep_plus;
}

}  // namespace

Corpus generate_corpus(const SynthSpec& spec) {
  spec.validate();
  // Fraction of sessions owned by inconsistent subjects, whose sessions are split
  // evenly between classes on average.
  double multi_mass = 0.0;
  for (const auto& [k, w] : spec.sessions_per_subject.weights) {
    if (k >= 2) multi_mass += k * w;
  }
  double total_w = 0.0;
  for (const auto& [_, w] : spec.sessions_per_subject.weights) total_w += w;
  const double mixed_fraction = spec.inconsistency_rate * multi_mass / (total_w * spec.sessions_per_subject.mean());
  if (spec.inconsistency_rate > 0.0 && multi_mass == 0.0) {
    throw ConfigError("infeasible spec: inconsistency_rate > 0 but no subject has more than one session");
  }
  const double consistent_prev =
      mixed_fraction < 1.0 ? (spec.dep_prevalence - 0.5 * mixed_fraction) / (1.0 - mixed_fraction) : 0.5;
  if (consistent_prev < 0.0 || consistent_prev > 1.0) {
    throw ConfigError("infeasible spec: dep_prevalence " + format_double(spec.dep_prevalence) +
                      " cannot be met with inconsistency_rate " + format_double(spec.inconsistency_rate));
  }

  const Lexicon lex = Lexicon::build(spec.lexicon);
  const TextModel tm(lex, spec.lexicon.follow_prob);
  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32), 0x5e7du};
  std::mt19937_64 rng(seq);
  const double words_mean = spec.words_per_response * spec.words_scale;

  Corpus corpus;
  corpus.name = spec.name;
  char buf[64];
  for (std::size_t si = 0; si < spec.n_subjects; ++si) {
    Subject subj;
    std::snprintf(buf, sizeof buf, "%s%05zu", spec.id_prefix.c_str(), si);
    subj.subject_id = buf;
    const int age = spec.age.sample(rng);
    subj.demographics.age = age;
    subj.demographics.age_bucket = age_bucket_for(age);
    if (!spec.gender.empty()) subj.demographics.gender = parse_gender(sample_key(spec.gender, rng));
    if (!spec.ethnicity.empty()) subj.demographics.ethnicity = sample_key(spec.ethnicity, rng);

    const int n_sessions = spec.sessions_per_subject.sample(rng);
    const bool inconsistent = n_sessions >= 2 && uniform01(rng) < spec.inconsistency_rate;
    std::vector<DepressionClass> classes(static_cast<std::size_t>(n_sessions));
    if (inconsistent) {
      for (auto& c : classes) c = uniform01(rng) < 0.5 ? DepressionClass::dep_plus : DepressionClass::dep_minus;
      if (std::all_of(classes.begin(), classes.end(), [&](auto c) { return c == classes[0]; })) {
        auto& flip = classes[1 + rng() % (classes.size() - 1)];
        flip = other(flip);
      }
    } else {
      const auto c = uniform01(rng) < consistent_prev ? DepressionClass::dep_plus : DepressionClass::dep_minus;
      std::fill(classes.begin(), classes.end(), c);
    }

    const bool shifted = age >= spec.domain_shift_min_age;
    for (int k = 0; k < n_sessions; ++k) {
      Session sess;
      std::snprintf(buf, sizeof buf, "%s-%02d", subj.subject_id.c_str(), k + 1);
      sess.session_id = buf;
      sess.subject_id = subj.subject_id;
      sess.timestamp = add_days(spec.start_date, 7 * k);
      const auto cls = classes[static_cast<std::size_t>(k)];
      sess.phq8_score = sample_phq(cls, rng);
      TokenParams tp{cls, spec.signal_strength, spec.marker_crosstalk, shifted ? spec.domain_shift : 0.0,
                     spec.degradation.noise_at(age)};
      if (inconsistent && uniform01(rng) < spec.noise_for_inconsistent) tp.text_class = other(cls);
      const int n_resp = spec.responses_per_session.sample(rng);
      for (int r = 0; r < n_resp; ++r) {
        std::poisson_distribution<int> words(words_mean);
        const auto n_words = static_cast<std::size_t>(std::max(1, words(rng)));
        std::snprintf(buf, sizeof buf, "%s-r%d", sess.session_id.c_str(), r + 1);
        sess.responses.push_back(
            Response::make(buf, kTopics[static_cast<std::size_t>(r) % kTopics.size()], generate_text(tm, n_words, tp, rng)));
      }
      subj.sessions.push_back(std::move(sess));
    }
    corpus.subjects.push_back(std::move(subj));
  }
  corpus.validate();
  return corpus;
}

std::pair<Corpus, Corpus> gp_sp_pair(const SynthSpec& gp, const SynthSpec& sp) {
  gp.age.validate();
  sp.age.validate();
  const double ovl = overlap_coefficient(gp.age, sp.age);
  if (!(ovl < kMaxAgeOverlap)) {
    throw ConfigError("age distributions overlap by " + format_double(ovl) + ", need < " + format_double(kMaxAgeOverlap));
  }
  if (!(gp.lexicon == sp.lexicon)) throw ConfigError("GP and SP specs must share a lexicon");
  return {generate_corpus(gp), generate_corpus(sp)};
}

// -- generic text -----------------------------------------------------------------------

void GenericTextSpec::validate() const {
  if (n_documents == 0) throw ConfigError("generic n_documents must be positive");
  if (words_per_document == 0) throw ConfigError("generic words_per_document must be positive");
  if (!(alternate_rate >= 0.0 && alternate_rate <= 1.0)) throw ConfigError("generic alternate_rate must lie in [0,1]");
  if (!(marker_rate >= 0.0 && marker_rate <= 1.0)) throw ConfigError("generic marker_rate must lie in [0,1]");
  lexicon.validate();
}

nlohmann::json GenericTextSpec::to_json() const {
  return {{"n_documents", n_documents},       {"words_per_document", words_per_document},
          {"alternate_rate", alternate_rate}, {"marker_rate", marker_rate},
          {"lexicon", lexicon_json(lexicon)}, {"seed", seed}};
}

GenericTextSpec GenericTextSpec::from_json(const nlohmann::json& j, const GenericTextSpec& d) {
  reject_unknown(j, {"n_documents", "words_per_document", "alternate_rate", "marker_rate", "lexicon", "seed"}, "generic");
  GenericTextSpec g = d;
  try {
    g.n_documents = j.value("n_documents", g.n_documents);
    g.words_per_document = j.value("words_per_document", g.words_per_document);
    g.alternate_rate = j.value("alternate_rate", g.alternate_rate);
    g.marker_rate = j.value("marker_rate", g.marker_rate);
    if (j.contains("lexicon")) g.lexicon = lexicon_from(j["lexicon"], g.lexicon);
    g.seed = j.value("seed", g.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("generic spec: ") + e.what());
  }
  return g;
}

std::vector<std::string> generate_generic_text(const GenericTextSpec& spec) {
  spec.validate();
  const Lexicon lex = Lexicon::build(spec.lexicon);
  const TextModel tm(lex, spec.lexicon.follow_prob);
  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32), 0x6e4eu};
  std::mt19937_64 rng(seq);
  static constexpr Pool marker_pools[] = {Pool::marker_plus, Pool::marker_minus, Pool::alt_marker_plus,
                                          Pool::alt_marker_minus};
  std::vector<std::string> docs;
  for (std::size_t d = 0; d < spec.n_documents; ++d) {
    std::string text;
    std::optional<std::size_t> prev;
    for (std::size_t w = 0; w < spec.words_per_document; ++w) {
      Pool pool = Pool::base;
      std::size_t idx = 0;
      if (uniform01(rng) < spec.marker_rate) {
        pool = marker_pools[rng() % 4];
        idx = tm.any_marker(rng);
        prev = tm.follower_key(pool, idx);
      } else {
        idx = tm.next_base(prev, rng);
        prev = idx;
        if (uniform01(rng) < spec.alternate_rate) pool = Pool::alternate;
      }
      if (!text.empty()) text += ' ';
      text += tm.word(pool, idx);
    }
    docs.push_back(std::move(text));
  }
  return docs;
}

}  // namespace dport
