#include <doctest.h>

#include <random>

#include "dport/corpus.hpp"
#include "dport/tokenizer.hpp"

using namespace dport;

using Tokens = std::vector<std::string>;

TEST_SUITE("tokenizer") {

TEST_CASE("rule-based splitting") {
  CHECK(tokenize("I'm fine.") == Tokens{"i", "'m", "fine", "."});
  CHECK(tokenize("").empty());
  CHECK(tokenize("Hello   hello") == Tokens{"hello", "hello"});
  CHECK(tokenize("don't") == Tokens{"do", "n't"});
  CHECK(tokenize("(well, maybe!)") == Tokens{"(", "well", ",", "maybe", "!", ")"});
  CHECK(tokenize("ÉCOLE") == Tokens{"école"});
  CHECK(tokenize("a <rsep> b") == Tokens{"a", "<rsep>", "b"});
}

TEST_CASE("vocabulary ranking and thresholds") {
  const DocumentSource src({"a a b"});
  const auto v = build_vocab(src, 10, 1);
  REQUIRE(v.contains("a"));
  REQUIRE(v.contains("b"));
  CHECK(v.id("a") < v.id("b"));
  CHECK(v.id("<pad>") == Vocabulary::pad_id);
  CHECK(v.id("<unk>") == Vocabulary::unk_id);
  CHECK(v.id("<bos>") == Vocabulary::bos_id);
  CHECK(v.id("<rsep>") == Vocabulary::rsep_id);

  const auto v2 = build_vocab(src, 10, 2);
  CHECK(!v2.contains("b"));
  CHECK(v2.id("b") == Vocabulary::unk_id);

  const DocumentSource ten({"q w e r t y u i o p"});
  CHECK(build_vocab(ten, 5, 1).size() == 5);

  const DocumentSource ties({"b a c"});
  const auto v3 = build_vocab(ties, 10, 1);
  CHECK(v3.id("a") < v3.id("b"));
  CHECK(v3.id("b") < v3.id("c"));

  const DocumentSource none(std::vector<std::string>{});
  CHECK(build_vocab(none, 10, 1).size() == Vocabulary::reserved_count);
}

TEST_CASE("numericalize maps out-of-vocabulary tokens to unk") {
  const auto v = build_vocab(DocumentSource({"a"}), 10, 1);
  const Tokens toks{"a", "zzz"};
  CHECK(numericalize(toks, v) == std::vector<int>{v.id("a"), Vocabulary::unk_id});
  CHECK(numericalize(Tokens{}, v).empty());
}

TEST_CASE("round trip, id stability and bijectivity") {
  std::mt19937_64 rng(4);
  const char* words[] = {"alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta"};
  std::vector<std::string> docs;
  for (int d = 0; d < 20; ++d) {
    std::string s;
    for (int w = 0; w < 15; ++w) s += std::string(words[rng() % 8]) + (w % 5 == 4 ? ". " : " ");
    docs.push_back(s);
  }
  const DocumentSource src(docs);
  const auto v = build_vocab(src, 100, 1);
  CHECK(v == build_vocab(src, 100, 1));
  CHECK(v.hash() == build_vocab(src, 100, 1).hash());
  for (std::size_t i = 0; i < v.size(); ++i) CHECK(v.id(v.token(static_cast<int>(i))) == static_cast<int>(i));
  for (const auto& d : docs) {
    const auto toks = tokenize(d);
    CHECK(denumericalize(numericalize(toks, v), v) == toks);
    CHECK(encode(d, v) == encode(d, v));
  }
}

TEST_CASE("json persistence") {
  const auto v = build_vocab(DocumentSource({"x y y z z z"}), 50, 1);
  CHECK(Vocabulary::from_json(v.to_json()) == v);
}

TEST_CASE("stream encoding prefixes documents with bos") {
  const DocumentSource src({"a b", "c"});
  const auto v = build_vocab(src, 10, 1);
  const auto ids = encode_stream(src, v);
  CHECK(ids == std::vector<int>{Vocabulary::bos_id, v.id("a"), v.id("b"), Vocabulary::bos_id, v.id("c")});
}

}  // TEST_SUITE
