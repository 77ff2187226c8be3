#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "mtaf/tokenizer.hpp"

using namespace mtaf;
using namespace mtaf::tok;

TEST_CASE("fit keeps frequent types plus the specials") {
  Vocab v = Vocab::fit({"Hello world"}, 64);
  CHECK_NOTHROW(v.id_of("hello"));
  CHECK_NOTHROW(v.id_of("world"));
  CHECK(v.size() == Vocab::special_tokens().size() + 2);
}

TEST_CASE("fit on empty input yields specials only") {
  Vocab v = Vocab::fit({}, 64);
  CHECK(v.size() == Vocab::special_tokens().size());
}

TEST_CASE("fit is deterministic") {
  std::vector<std::string> texts = {"b a a c", "c b a", "d!"};
  Vocab v1 = Vocab::fit(texts, 64);
  Vocab v2 = Vocab::fit(texts, 64);
  CHECK(v1 == v2);
  CHECK(v1.serialize() == v2.serialize());
}

TEST_CASE("fit respects max_vocab with lexicographic tie-break") {
  // frequency: a=2, others 1; ties among b, c, z broken lexicographically
  Vocab v = Vocab::fit({"a a b c z"}, Vocab::special_tokens().size() + 3);
  CHECK_NOTHROW(v.id_of("a"));
  CHECK_NOTHROW(v.id_of("b"));
  CHECK_NOTHROW(v.id_of("c"));
  CHECK_THROWS_AS(v.id_of("z"), DataError);
  CHECK_THROWS_AS(Vocab::fit({"a"}, Vocab::special_tokens().size()), UsageError);
}

TEST_CASE("encode maps words, unknowns, and empty text") {
  Vocab v = Vocab::fit({"hello world"}, 64);
  auto ids = v.encode("hello world");
  REQUIRE(ids.size() == 2);
  CHECK(ids[0] == v.id_of("hello"));
  CHECK(ids[1] == v.id_of("world"));
  CHECK(v.encode("zyxxyz") == std::vector<TokenId>{v.unk()});
  CHECK(v.encode("").empty());
}

TEST_CASE("encode splits punctuation and lowercases") {
  Vocab v = Vocab::fit({"Hello, World!"}, 64);
  auto ids = v.encode("Hello, World!");
  REQUIRE(ids.size() == 4);
  CHECK(v.token_of(ids[0]) == "hello");
  CHECK(v.token_of(ids[1]) == ",");
  CHECK(v.token_of(ids[2]) == "world");
  CHECK(v.token_of(ids[3]) == "!");
}

TEST_CASE("encode never emits a special id for surface text") {
  Vocab v = Vocab::fit({"some words with <sep> markers and eos text"}, 64);
  for (TokenId id : v.encode("some words with <sep> markers <bos> and more"))
    CHECK_FALSE((id != v.unk() && v.is_special(id)));
}

TEST_CASE("decode joins with spaces and omits specials") {
  Vocab v = Vocab::fit({"hello world"}, 64);
  CHECK(v.decode(v.encode("hello world")) == "hello world");
  CHECK(v.decode({v.bos(), v.id_of("hello"), v.eos()}) == "hello");
  CHECK(v.decode({}) == "");
}

TEST_CASE("decode rejects out-of-range ids") {
  Vocab v = Vocab::fit({"hello"}, 64);
  CHECK_THROWS_AS(v.decode({static_cast<TokenId>(v.size() + 5)}), DataError);
  CHECK_THROWS_AS(v.decode({-1}), DataError);
}

TEST_CASE("round trip equals normalized text for in-vocab types") {
  std::vector<std::string> corpus = {"the cat sat on the mat", "a dog ran fast", "! ? ."};
  Vocab v = Vocab::fit(corpus, 128);
  Rng rng(41);
  std::vector<std::string> types = {"the", "cat", "sat", "on", "mat", "dog", "ran", "!", "?"};
  for (int rep = 0; rep < 100; ++rep) {
    // random whitespace-joined in-vocab text
    std::string text;
    std::string normalized;
    size_t len = 1 + rng.below(8);
    for (size_t i = 0; i < len; ++i) {
      const std::string& w = types[rng.below(types.size())];
      text += (rng.uniform() < 0.3 ? "  " : " ") + w;
      if (!normalized.empty()) normalized += " ";
      normalized += w;
    }
    CHECK(v.decode(v.encode(text)) == normalized);
  }
}

TEST_CASE("serialization round trip, specials first") {
  Vocab v = Vocab::fit({"alpha beta gamma"}, 64);
  std::string path = std::filesystem::temp_directory_path() / "mtaf_vocab_test.txt";
  v.save(path);
  Vocab loaded = Vocab::load(path);
  CHECK(loaded == v);
  CHECK(loaded.hash() == v.hash());
  std::filesystem::remove(path);

  std::string s = v.serialize();
  const auto& specials = Vocab::special_tokens();
  size_t pos = 0;
  for (const auto& sp : specials) {
    size_t eol = s.find('\n', pos);
    CHECK(s.substr(pos, eol - pos) == sp);
    pos = eol + 1;
  }
}

TEST_CASE("deserialize enforces the special-token block") {
  CHECK_THROWS_AS(Vocab::deserialize("<bos>\n<eos>\n"), DataError);
  std::string swapped = "<eos>\n<bos>\n<sep>\n<ctx>\n<unk>\n<pad>\n<aff:excited>\n"
                        "<aff:indifferent>\n<aff:impatient>\n";
  CHECK_THROWS_AS(Vocab::deserialize(swapped), DataError);
}

TEST_CASE("affect tokens resolve per target") {
  Vocab v = Vocab::fit({}, 64);
  CHECK(v.affect_token("excited") == v.id_of("<aff:excited>"));
  CHECK(v.affect_token("indifferent") == v.id_of("<aff:indifferent>"));
  CHECK(v.affect_token("impatient") == v.id_of("<aff:impatient>"));
  CHECK_THROWS_AS(v.affect_token("bored"), DataError);
}
