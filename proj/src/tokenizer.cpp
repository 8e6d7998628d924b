#include "dport/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <stdexcept>

#include <unicode/locid.h>
#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>

#include "dport/errors.hpp"
#include "dport/util.hpp"

namespace dport {

namespace {

std::u32string normalize_lower(std::string_view text) {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* nfc = icu::Normalizer2::getNFCInstance(status);
  if (U_FAILURE(status)) throw std::runtime_error("ICU NFC normalizer unavailable");
  icu::UnicodeString u = icu::UnicodeString::fromUTF8(icu::StringPiece(text.data(), static_cast<int32_t>(text.size())));
  icu::UnicodeString normalized = nfc->normalize(u, status);
  if (U_FAILURE(status)) throw std::runtime_error("ICU normalisation failed");
  normalized.toLower(icu::Locale::getRoot());

  std::u32string out(static_cast<std::size_t>(normalized.countChar32()), U'\0');
  status = U_ZERO_ERROR;
  normalized.toUTF32(reinterpret_cast<UChar32*>(out.data()), static_cast<int32_t>(out.size()), status);
  for (auto& c : out) {
    if (c == U'’' || c == U'ʼ') c = U'\'';
  }
  return out;
}

std::string to_utf8(std::u32string_view s) {
  std::string out;
  icu::UnicodeString::fromUTF32(reinterpret_cast<const UChar32*>(s.data()), static_cast<int32_t>(s.size()))
      .toUTF8String(out);
  return out;
}

bool is_space(char32_t c) { return u_isUWhiteSpace(static_cast<UChar32>(c)); }

bool is_punct(char32_t c) {
  const auto cp = static_cast<UChar32>(c);
  if (u_ispunct(cp)) return true;
  switch (u_charType(cp)) {
    case U_MATH_SYMBOL:
    case U_CURRENCY_SYMBOL:
    case U_MODIFIER_SYMBOL:
    case U_OTHER_SYMBOL:
      return true;
    default:
      return false;
  }
}

bool ends_with(std::u32string_view s, std::u32string_view suffix) {
  return s.size() > suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

void split_word(std::u32string_view core, std::vector<std::string>& out) {
  static const std::u32string_view kClitics[] = {U"'s", U"'m", U"'re", U"'ve", U"'ll", U"'d"};
  if (ends_with(core, U"n't")) {
    out.push_back(to_utf8(core.substr(0, core.size() - 3)));
    out.emplace_back("n't");
    return;
  }
  for (auto clitic : kClitics) {
    if (ends_with(core, clitic)) {
      out.push_back(to_utf8(core.substr(0, core.size() - clitic.size())));
      out.push_back(to_utf8(clitic));
      return;
    }
  }
  out.push_back(to_utf8(core));
}

void split_chunk(std::u32string_view chunk, std::vector<std::string>& out) {
  std::string utf8 = to_utf8(chunk);
  if (Vocabulary::is_reserved(utf8)) {
    out.push_back(std::move(utf8));
    return;
  }
  std::size_t begin = 0;
  std::size_t end = chunk.size();
  while (begin < end && is_punct(chunk[begin])) {
    out.push_back(to_utf8(chunk.substr(begin, 1)));
    ++begin;
  }
  std::vector<std::string> trailing;
  while (end > begin && is_punct(chunk[end - 1])) {
    trailing.push_back(to_utf8(chunk.substr(end - 1, 1)));
    --end;
  }
  if (end > begin) split_word(chunk.substr(begin, end - begin), out);
  out.insert(out.end(), trailing.rbegin(), trailing.rend());
}

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  if (text.empty()) return tokens;
  const std::u32string s = normalize_lower(text);
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && is_space(s[i])) ++i;
    std::size_t j = i;
    while (j < s.size() && !is_space(s[j])) ++j;
    if (j > i) split_chunk(std::u32string_view(s).substr(i, j - i), tokens);
    i = j;
  }
  return tokens;
}

// -- Vocabulary ----------------------------------------------------------------------

const std::array<std::string, Vocabulary::reserved_count>& Vocabulary::reserved_tokens() {
  static const std::array<std::string, reserved_count> tokens{"<pad>", "<unk>", "<bos>",
                                                              std::string(kResponseSeparator)};
  return tokens;
}

bool Vocabulary::is_reserved(std::string_view token) {
  const auto& r = reserved_tokens();
  return std::find(r.begin(), r.end(), token) != r.end();
}

Vocabulary::Vocabulary() {
  for (const auto& t : reserved_tokens()) push(t);
  max_size_ = reserved_count;
}

void Vocabulary::push(std::string token) {
  token_to_id_.emplace(token, static_cast<int>(id_to_token_.size()));
  id_to_token_.push_back(std::move(token));
}

Vocabulary Vocabulary::from_counts(const std::unordered_map<std::string, std::size_t>& counts,
                                   std::size_t max_size, std::size_t min_freq) {
  if (max_size <= reserved_count) {
    throw DomainError("vocabulary max_size must exceed the " + std::to_string(reserved_count) +
                      " reserved tokens");
  }
  std::vector<std::pair<std::string, std::size_t>> ranked;
  ranked.reserve(counts.size());
  for (const auto& [token, n] : counts) {
    if (n >= min_freq && !is_reserved(token)) ranked.emplace_back(token, n);
  }
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });

  Vocabulary v;
  v.max_size_ = max_size;
  v.min_freq_ = min_freq;
  for (auto& [token, n] : ranked) {
    if (v.size() >= max_size) break;
    v.push(std::move(token));
  }
  return v;
}

int Vocabulary::id(std::string_view token) const {
  auto it = token_to_id_.find(std::string(token));
  return it == token_to_id_.end() ? unk_id : it->second;
}

bool Vocabulary::contains(std::string_view token) const {
  return token_to_id_.find(std::string(token)) != token_to_id_.end();
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
    throw DomainError("token id " + std::to_string(id) + " outside vocabulary");
  }
  return id_to_token_[static_cast<std::size_t>(id)];
}

std::size_t Vocabulary::extend(std::span<const std::string> tokens) {
  std::size_t added = 0;
  for (const auto& t : tokens) {
    if (!contains(t)) {
      push(t);
      ++added;
    }
  }
  max_size_ = std::max(max_size_, size());
  return added;
}

// The file is a flat {token: id} object plus a "__header__" entry. The tokenizer
// always splits leading underscores, so no token can collide with that key.
nlohmann::json Vocabulary::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  nlohmann::json reserved = nlohmann::json::object();
  for (std::size_t i = 0; i < reserved_count; ++i) reserved[id_to_token_[i]] = i;
  j["__header__"] = {{"reserved", reserved},
                     {"size", size()},
                     {"max_size", max_size_},
                     {"min_freq", min_freq_}};
  for (std::size_t i = 0; i < id_to_token_.size(); ++i) j[id_to_token_[i]] = i;
  return j;
}

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("__header__")) {
    throw ValidationError("vocabulary JSON lacks a __header__ field");
  }
  std::vector<std::string> by_id(j.size() - 1);
  for (const auto& [token, id] : j.items()) {
    if (token == "__header__") continue;
    auto k = id.get<std::size_t>();
    if (k >= by_id.size() || !by_id[k].empty()) {
      throw ValidationError("vocabulary ids are not dense and unique (token '" + token + "')");
    }
    by_id[k] = token;
  }
  for (std::size_t i = 0; i < reserved_count; ++i) {
    if (by_id.size() <= i || by_id[i] != reserved_tokens()[i]) {
      throw ValidationError("vocabulary reserved ids do not match");
    }
  }
  Vocabulary v;
  for (std::size_t i = reserved_count; i < by_id.size(); ++i) v.push(by_id[i]);
  const auto& h = j.at("__header__");
  v.max_size_ = h.value("max_size", v.size());
  v.min_freq_ = h.value("min_freq", std::size_t{1});
  return v;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write vocabulary " + path.string());
  out << to_json().dump(1) << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open vocabulary " + path.string());
  return from_json(nlohmann::json::parse(in));
}

std::string Vocabulary::hash() const { return sha256_hex(to_json().dump()); }

std::unordered_map<std::string, std::size_t> count_tokens(const TextSource& source) {
  std::unordered_map<std::string, std::size_t> counts;
  for (std::size_t i = 0; i < source.document_count(); ++i) {
    for (auto& t : tokenize(source.document(i))) {
      if (!Vocabulary::is_reserved(t)) ++counts[t];
    }
  }
  return counts;
}

Vocabulary build_vocab(const TextSource& source, std::size_t max_size, std::size_t min_freq) {
  auto counts = count_tokens(source);
  if (counts.empty()) {
    std::cerr << "warning: building a vocabulary from an empty corpus; only reserved tokens\n";
  }
  return Vocabulary::from_counts(counts, max_size, min_freq);
}

Vocabulary build_vocab(const Corpus& corpus, std::size_t max_size, std::size_t min_freq) {
  return build_vocab(CorpusSource(corpus), max_size, min_freq);
}

std::vector<int> numericalize(std::span<const std::string> tokens, const Vocabulary& vocab) {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(vocab.id(t));
  return ids;
}

std::vector<std::string> denumericalize(std::span<const int> ids, const Vocabulary& vocab) {
  std::vector<std::string> tokens;
  tokens.reserve(ids.size());
  for (int id : ids) tokens.push_back(vocab.token(id));
  return tokens;
}

std::vector<int> encode(std::string_view text, const Vocabulary& vocab) {
  auto tokens = tokenize(text);
  return numericalize(tokens, vocab);
}

std::vector<int> encode_stream(const TextSource& source, const Vocabulary& vocab) {
  std::vector<int> stream;
  for (std::size_t i = 0; i < source.document_count(); ++i) {
    stream.push_back(Vocabulary::bos_id);
    auto ids = encode(source.document(i), vocab);
    stream.insert(stream.end(), ids.begin(), ids.end());
  }
  return stream;
}

}  // namespace dport
