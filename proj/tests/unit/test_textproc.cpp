#include <set>
#include <string>

#include "altogether/textproc.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace altogether;
using namespace altogether::textproc;

TEST_CASE("vocabulary construction") {
  const std::vector<std::string> none;
  const auto base = build_vocab(none, 260);
  CHECK(base.size() == 260);
  CHECK(base.learned_count() == 0);
  CHECK(base.token(kPad) == "<pad>");
  CHECK(base.token(kEmptyAlt) == "<empty_alt>");
  CHECK(base.token(Vocab::byte_id('A')) == "<0x41>");

  const std::vector<std::string> texts{"a a b"};
  const auto v = build_vocab(texts, 262);
  CHECK(v.size() == 262);
  CHECK(v.token(kFirstLearned) == "a");
  CHECK(v.token(kFirstLearned + 1) == "b");

  const std::vector<std::string> ties{"zeta beta alpha", "beta"};
  const auto t = build_vocab(ties, 263);
  CHECK(t.token(kFirstLearned) == "beta");
  CHECK(t.token(kFirstLearned + 1) == "alpha");
  CHECK(t.token(kFirstLearned + 2) == "zeta");
  CHECK(build_vocab(ties, 263) == t);
  CHECK(build_vocab(ties, 1000).size() == 263);  // capped by distinct words

  CHECK(test::error_kind_of([&] { build_vocab(texts, 259); }) == ErrorKind::kConfig);
  CHECK(test::error_kind_of([&] { (void)v.token(262); }) == ErrorKind::kRange);
}

TEST_CASE("vocab file round trip") {
  test::TempDir dir;
  const std::vector<std::string> texts{"a photo of a great gray owl", "owl on a branch"};
  const auto v = build_vocab(texts, 270);
  save_vocab(v, dir / "v.jsonl");
  CHECK(load_vocab(dir / "v.jsonl") == v);
  test::write_text(dir / "bad.jsonl", R"({"token":"<pad>","id":5})" "\n");
  CHECK(test::error_kind_of([&] { load_vocab(dir / "bad.jsonl"); }) == ErrorKind::kFormat);
}

TEST_CASE("tokenize examples") {
  const std::vector<std::string> texts{"a b"};
  const auto v = build_vocab(texts, 262);
  CHECK(tokenize(v, "").empty());
  const auto ab = tokenize(v, "a b");
  REQUIRE(ab.size() == 2);
  CHECK(ab[0] == *v.find("a"));
  CHECK(ab[1] == *v.find("b"));

  const auto empty = build_vocab(std::vector<std::string>{}, 260);
  const auto ig = tokenize(empty, "iguana");
  REQUIRE(ig.size() == 6);
  for (std::size_t i = 0; i < 6; ++i) CHECK(ig[i] == Vocab::byte_id(static_cast<unsigned char>("iguana"[i])));
  CHECK(tokenize(empty, "é").size() == 2);
}

TEST_CASE("detokenize") {
  const std::vector<std::string> texts{"owl gray"};
  const auto v = build_vocab(texts, 262);
  CHECK(detokenize(v, std::vector<TokenId>{}).text.empty());
  const auto owl = *v.find("owl");
  const auto gray = *v.find("gray");
  const std::vector<TokenId> ids{kBos, gray, owl, kEos, owl};
  const auto d = detokenize(v, ids);
  CHECK(d.text == "gray owl");
  CHECK(d.stopped_at_eos);
  CHECK(test::error_kind_of([&] { detokenize(v, std::vector<TokenId>{9999}); }) == ErrorKind::kRange);
  CHECK(test::error_kind_of([&] { detokenize(v, std::vector<TokenId>{-1}); }) == ErrorKind::kRange);
  const std::vector<TokenId> bad{Vocab::byte_id('a'), Vocab::byte_id(0xFF), Vocab::byte_id('b')};
  const auto r = detokenize(v, bad);
  CHECK(r.replaced_invalid_utf8);
  CHECK(r.text == "a\xEF\xBF\xBD" "b");
}

TEST_CASE("tokenize/detokenize round trip on random unicode") {
  const std::vector<std::string> texts{"a b c aa bb ab ba a photo of", "日本 語 🦉"};
  const auto v = build_vocab(texts, 300);
  Rng rng(11);
  for (int i = 0; i < 1000; ++i) {
    std::string s = test::random_utf8(rng, 40);
    // Sprinkle learned words and odd spacing in.
    if (i % 3 == 0) s = "a " + s + "  b\tphoto of";
    const auto d = detokenize(v, tokenize(v, s));
    CHECK(d.text == s);
    CHECK_FALSE(d.replaced_invalid_utf8);
  }
}

TEST_CASE("lexicon tagging") {
  const auto& lex = Lexicon::builtin();
  CHECK(lex.has_tag("the", Pos::kDet));
  CHECK(lex.has_tag("dog", Pos::kNoun));
  CHECK(lex.tags("glorbulous").front() == Pos::kAdj);
  CHECK(lex.tags("zzyzx").front() == Pos::kNoun);
  CHECK(lex.tags("quickly").front() == Pos::kOther);
  CHECK_FALSE(lex.tags("anything").empty());

  test::TempDir dir;
  test::write_text(dir / "lex.jsonl", R"({"word":"zzyzx","tags":["VERB"]})" "\n");
  const auto custom = Lexicon::load(dir / "lex.jsonl");
  CHECK(custom.tags("zzyzx").front() == Pos::kVerb);
  CHECK(custom.has_tag("dog", Pos::kNoun));
  test::write_text(dir / "bad.jsonl", R"({"word":"x","tags":["WAT"]})" "\n");
  CHECK(test::error_kind_of([&] { Lexicon::load(dir / "bad.jsonl"); }) == ErrorKind::kParse);
}

TEST_CASE("noun phrase examples") {
  const auto& lex = Lexicon::builtin();
  CHECK(noun_phrases("", lex).empty());
  CHECK(noun_phrases("a dog is walking in the park", lex) == std::set<std::string>{"dog", "park"});
  CHECK(noun_phrases("great gray owl, Strix nebulosa", lex) ==
        std::set<std::string>{"great gray owl", "strix nebulosa"});
  CHECK(noun_phrases("Two dogs and a dog", lex).contains("dog"));
  CHECK(noun_phrases("The red car. A blue car", lex) == std::set<std::string>{"red car", "blue car"});
}

TEST_CASE("noun phrases are normalized substrings") {
  const auto& lex = Lexicon::builtin();
  Rng rng(5);
  const std::vector<std::string> words{"a", "the", "red", "dog", "dogs", "park", "is", "in", "big", "tree",
                                       "on", ",", "owl", "birds", "flying", "over", "small", "house"};
  for (int i = 0; i < 300; ++i) {
    std::string s;
    const auto n = 1 + rng.below(12);
    for (std::size_t k = 0; k < n; ++k) s += words[rng.below(words.size())] + " ";
    const auto nps = noun_phrases(s, lex);
    for (const auto& np : nps) {
      CHECK_FALSE(np.empty());
      CHECK(np.front() != ' ');
      CHECK(np.back() != ' ');
      // Every word of the phrase occurs in the input (possibly with a plural s).
      std::size_t start = 0;
      while (start < np.size()) {
        auto end = np.find(' ', start);
        if (end == std::string::npos) end = np.size();
        CHECK(s.find(np.substr(start, end - start)) != std::string::npos);
        start = end + 1;
      }
    }
  }
}

TEST_CASE("starting prompts") {
  CHECK(recommended_prompts().size() == 11);
  const auto ok = starting_prompt_check("A photo of a conch shell on the beach");
  CHECK(ok.accepted);
  CHECK(ok.prompt == "a photo of");
  CHECK_FALSE(starting_prompt_check("This is an image showing a dog").accepted);
  CHECK_FALSE(starting_prompt_check("This image shows a dog").accepted);
  CHECK_FALSE(starting_prompt_check("").accepted);
  CHECK(starting_prompt_check("   a painting of a lake").accepted);
  // Prefix monotonicity.
  for (auto p : recommended_prompts()) {
    CHECK(starting_prompt_check(std::string(p)).accepted);
    CHECK(starting_prompt_check(std::string(p) + " anything at all").accepted);
  }
}
