#pragma once

// Rule-based word tokenizer and frequency-ranked vocabulary.
//
// Tokenization: NFC normalisation, Unicode lower-casing, whitespace split,
// leading/trailing punctuation split off one code point at a time, and English
// clitics ('s 'm 're 've 'll 'd n't) split from the word. Chunks that spell a
// reserved token (e.g. "<rsep>") pass through untouched.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "dport/corpus.hpp"

namespace dport {

std::vector<std::string> tokenize(std::string_view text);

class Vocabulary {
 public:
  static constexpr int pad_id = 0;
  static constexpr int unk_id = 1;
  static constexpr int bos_id = 2;
  static constexpr int rsep_id = 3;
  static constexpr std::size_t reserved_count = 4;
  static const std::array<std::string, reserved_count>& reserved_tokens();
  static bool is_reserved(std::string_view token);

  /// Reserved tokens only.
  Vocabulary();

  /// Ranks tokens by descending frequency (ties lexicographic), drops tokens below
  /// `min_freq`, and keeps at most `max_size` entries including the reserved ones.
  static Vocabulary from_counts(const std::unordered_map<std::string, std::size_t>& counts,
                                std::size_t max_size, std::size_t min_freq);

  std::size_t size() const { return id_to_token_.size(); }
  std::size_t max_size() const { return max_size_; }
  std::size_t min_freq() const { return min_freq_; }

  /// Id of `token`, or unk_id when absent.
  int id(std::string_view token) const;
  bool contains(std::string_view token) const;
  const std::string& token(int id) const;
  const std::vector<std::string>& tokens() const { return id_to_token_; }

  /// Appends tokens not yet present; returns how many were added.
  std::size_t extend(std::span<const std::string> tokens);

  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  /// SHA-256 of the canonical JSON form.
  std::string hash() const;

  bool operator==(const Vocabulary& other) const { return id_to_token_ == other.id_to_token_; }

 private:
  void push(std::string token);

  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
  std::size_t max_size_ = 0;
  std::size_t min_freq_ = 1;
};

/// Token counts over every document of a source (reserved tokens excluded).
std::unordered_map<std::string, std::size_t> count_tokens(const TextSource& source);

Vocabulary build_vocab(const TextSource& source, std::size_t max_size, std::size_t min_freq);
Vocabulary build_vocab(const Corpus& corpus, std::size_t max_size, std::size_t min_freq);

std::vector<int> numericalize(std::span<const std::string> tokens, const Vocabulary& vocab);
std::vector<std::string> denumericalize(std::span<const int> ids, const Vocabulary& vocab);

/// tokenize + numericalize.
std::vector<int> encode(std::string_view text, const Vocabulary& vocab);

/// Concatenates `<bos> doc_0 <bos> doc_1 ...` into one id stream.
std::vector<int> encode_stream(const TextSource& source, const Vocabulary& vocab);

}  // namespace dport
