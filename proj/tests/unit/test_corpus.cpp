#include <cmath>
#include <fstream>
#include <set>
#include <thread>

#include "altogether/corpus.hpp"
#include "altogether/embeddings.hpp"
#include "altogether/io.hpp"
#include "altogether/text.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace altogether;
using namespace altogether::corpus;

namespace {

// Plain full-table Levenshtein over code points.
std::size_t dp_oracle(const std::u32string& a, const std::u32string& b) {
  std::vector<std::vector<std::size_t>> t(a.size() + 1, std::vector<std::size_t>(b.size() + 1));
  for (std::size_t i = 0; i <= a.size(); ++i) t[i][0] = i;
  for (std::size_t j = 0; j <= b.size(); ++j) t[0][j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      t[i][j] = std::min({t[i - 1][j] + 1, t[i][j - 1] + 1, t[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
  }
  return t[a.size()][b.size()];
}

ImageItem make_item(std::string id, std::string alt) {
  ImageItem it;
  it.id = std::move(id);
  it.image_ref = "https://img.example/" + it.id + ".jpg";
  it.alt_text = std::move(alt);
  it.source = Source::kWit;
  return it;
}

std::string item_line(std::string_view id, std::string_view alt) {
  return io::Json{{"id", id}, {"image_ref", "x://" + std::string(id)}, {"alt_text", alt}, {"source", "wit"}}.dump();
}

}  // namespace

TEST_CASE("edit distance examples") {
  CHECK(edit_distance("abc", "abc") == 0);
  CHECK(edit_distance("", "abc") == 3);
  CHECK(edit_distance("abc", "") == 3);
  CHECK(edit_distance("kitten", "sitting") == 3);
  // Thirteen inserted characters ("a photo of a "); the length gap alone forces >= 13.
  CHECK(edit_distance("great gray owl", "a photo of a great gray owl") == 13);
  // Code points, not bytes: one substitution of a 3-byte character.
  CHECK(edit_distance("日本", "日木") == 1);
}

TEST_CASE("edit distance matches the DP oracle and metric axioms") {
  Rng rng(7);
  for (int i = 0; i < 300; ++i) {
    const auto a = test::random_codepoints(rng, 60);
    const auto b = test::random_codepoints(rng, 60);
    const auto c = test::random_codepoints(rng, 60);
    const auto sa = test::utf8(a), sb = test::utf8(b), sc = test::utf8(c);
    const auto ab = edit_distance(sa, sb);
    CHECK(ab == dp_oracle(a, b));
    CHECK(ab == edit_distance(sb, sa));
    CHECK(edit_distance(sa, sa) == 0);
    CHECK(edit_distance(sa, sc) <= ab + edit_distance(sb, sc));
  }
}

TEST_CASE("text helpers") {
  CHECK(text::word_count("  a photo\tof  a\nowl ") == 5);
  CHECK(text::word_count("") == 0);
  const auto bad = text::decode_utf8(std::string("a\xff" "b"));
  CHECK(bad.had_invalid);
  CHECK(bad.chars == std::u32string{U'a', text::kReplacementChar, U'b'});
  CHECK(text::encode_utf8(text::decode_utf8("héllo 🦉").chars) == "héllo 🦉");
}

TEST_CASE("ingest_pairs") {
  test::TempDir dir;
  SUBCASE("empty file") {
    test::write_text(dir / "e.jsonl", "");
    CHECK(ingest_pairs(dir / "e.jsonl").size() == 0);
  }
  SUBCASE("three lines") {
    test::write_text(dir / "a.jsonl", item_line("x", "owl") + "\n" + item_line("y", "") + "\n" +
                                          item_line("z", "a cat") + "\n");
    const auto c = ingest_pairs(dir / "a.jsonl");
    REQUIRE(c.size() == 3);
    CHECK(c.item("z").alt_text == "a cat");
    CHECK(c.item("y").alt_text.empty());
    CHECK(c.max_round("x") == 1);
    CHECK(c.round("x", 1)->caption == "owl");
  }
  SUBCASE("duplicate id names the id and the later line") {
    test::write_text(dir / "d.jsonl", item_line("a", "1") + "\n" + item_line("dup", "2") + "\n" + item_line("b", "3") +
                                          "\n" + item_line("c", "4") + "\n" + item_line("dup", "5") + "\n");
    const auto msg = test::error_message_of([&] { ingest_pairs(dir / "d.jsonl"); });
    CHECK(msg.find("dup") != std::string::npos);
    CHECK(msg.find(":5:") != std::string::npos);
    CHECK(test::error_kind_of([&] { ingest_pairs(dir / "d.jsonl"); }) == ErrorKind::kIngestion);
  }
  SUBCASE("malformed line reports its number") {
    test::write_text(dir / "m.jsonl", item_line("a", "1") + "\n{not json\n");
    const auto msg = test::error_message_of([&] { ingest_pairs(dir / "m.jsonl"); });
    CHECK(msg.find(":2") != std::string::npos);
    CHECK(test::error_kind_of([&] { ingest_pairs(dir / "m.jsonl"); }) == ErrorKind::kParse);
  }
  SUBCASE("missing field") {
    test::write_text(dir / "f.jsonl", R"({"id":"a","alt_text":"x","source":"wit"})" "\n");
    CHECK(test::error_kind_of([&] { ingest_pairs(dir / "f.jsonl"); }) == ErrorKind::kParse);
  }
  SUBCASE("unknown file") {
    CHECK(test::error_kind_of([&] { ingest_pairs(dir / "nope.jsonl"); }) == ErrorKind::kIo);
  }
  SUBCASE("save and reload items") {
    auto c = Corpus::from_items({make_item("a", "owl 🦉"), make_item("b", "")});
    save_items(c, dir / "items.jsonl");
    const auto back = ingest_pairs(dir / "items.jsonl");
    REQUIRE(back.size() == 2);
    CHECK(back.item("a").alt_text == "owl 🦉");
    CHECK(back.item("a").source == Source::kWit);
  }
}

TEST_CASE("record_round sequencing and stored statistics") {
  auto c = Corpus::from_items({make_item("owl", "great gray owl")});
  CHECK(test::error_kind_of([&] { c.record_round("owl", 3, "x", "a"); }) == ErrorKind::kSequencing);
  CHECK(test::error_kind_of([&] { c.record_round("owl", 1, "x", "a"); }) == ErrorKind::kSequencing);
  CHECK(test::error_kind_of([&] { c.record_round("nobody", 2, "x", "a"); }) == ErrorKind::kNotFound);
  const auto r2 = c.record_round("owl", 2, "a photo of a great gray owl", "vendor-a", 10.0);
  CHECK(r2.edit_distance_to_prev == 13);
  CHECK(r2.length_words == 7);
  const auto r3 = c.record_round("owl", 3, "a photo of a great gray owl", "vendor-b", 11.0);
  CHECK(r3.edit_distance_to_prev == 0);
  CHECK(c.latest("owl")->round_no == 3);

  auto manual = Corpus::from_items({make_item("x", "alt")}, IngestOptions{.auto_round_one = false});
  CHECK(test::error_kind_of([&] { manual.record_round("x", 1, "not alt", "a"); }) == ErrorKind::kValidation);
  CHECK(manual.record_round("x", 1, "alt", "a").edit_distance_to_prev == 0);
}

TEST_CASE("round chain property survives save/load") {
  test::TempDir dir;
  Rng rng(3);
  std::vector<ImageItem> items;
  for (int i = 0; i < 12; ++i) items.push_back(make_item("i" + std::to_string(i), test::random_utf8(rng, 20)));
  auto c = Corpus::from_items(items);
  for (int r = 2; r <= 4; ++r) {
    for (const auto& it : items) c.record_round(it.id, r, test::random_utf8(rng, 40), "v", r * 1.0);
  }
  save_rounds(c, dir / "rounds.jsonl");
  auto back = Corpus::from_items(items);
  load_rounds(back, dir / "rounds.jsonl");
  for (const auto& it : items) {
    const auto chain = back.rounds(it.id);
    REQUIRE(chain.size() == 4);
    for (std::size_t r = 1; r < chain.size(); ++r) {
      CHECK(chain[r].edit_distance_to_prev == edit_distance(chain[r - 1].caption, chain[r].caption));
      CHECK(chain[r].caption == c.round(it.id, static_cast<int>(r + 1))->caption);
    }
  }
}

TEST_CASE("round log mirrors recorded rounds") {
  test::TempDir dir;
  auto c = Corpus::from_items({make_item("a", "x")});
  c.attach_round_log(dir / "log.jsonl");
  c.record_round("a", 2, "a photo of x", "v", 1.0);
  auto back = Corpus::from_items({make_item("a", "x")});
  load_rounds(back, dir / "log.jsonl");
  CHECK(back.latest("a")->caption == "a photo of x");
}

TEST_CASE("concurrent readers with a single writer") {
  std::vector<ImageItem> items;
  for (int i = 0; i < 8; ++i) items.push_back(make_item("i" + std::to_string(i), "alt"));
  auto c = Corpus::from_items(items);
  std::thread writer([&] {
    for (int r = 2; r <= 50; ++r) {
      for (const auto& it : items) c.record_round(it.id, r, "caption " + std::to_string(r), "w");
    }
  });
  std::vector<std::thread> readers;
  std::atomic<bool> ok{true};
  for (int t = 0; t < 4; ++t) {
    readers.emplace_back([&] {
      for (int k = 0; k < 2000; ++k) {
        const auto chain = c.rounds(items[static_cast<std::size_t>(k) % items.size()].id);
        for (std::size_t r = 0; r < chain.size(); ++r) {
          if (chain[r].round_no != static_cast<int>(r + 1)) ok = false;
        }
      }
    });
  }
  writer.join();
  for (auto& t : readers) t.join();
  CHECK(ok.load());
  CHECK(c.max_round("i0") == 50);
}

TEST_CASE("round_stats") {
  auto c = Corpus::from_items({make_item("a", "one two three"), make_item("b", "x")});
  const auto s1 = round_stats(c, 1);
  CHECK(s1.item_count == 2);
  CHECK(s1.mean_length_words == doctest::Approx(2.0));
  CHECK(s1.mean_edit_distance == 0.0);
  CHECK_FALSE(s1.mean_alignment.has_value());
  c.record_round("a", 2, "one two three four", "v");
  const auto s2 = round_stats(c, 2);
  CHECK(s2.item_count == 1);
  CHECK(s2.mean_length_words == 4.0);
  CHECK(s2.mean_edit_distance == 5.0);
  CHECK(test::error_kind_of([&] { round_stats(c, 3); }) == ErrorKind::kEmptyRound);

  SUBCASE("alignment with embeddings") {
    EmbeddingMatrix m;
    m.dim = 2;
    const float va[] = {1.0f, 0.0f};
    const float vb[] = {0.0f, 1.0f};
    m.add_row(va, "a");
    m.add_row(vb, "b");
    TextEmbedder te = [](std::string_view) { return std::vector<float>{1.0f, 0.0f}; };
    const auto s = round_stats(c, 1, &m, &te);
    REQUIRE(s.mean_alignment.has_value());
    CHECK(*s.mean_alignment == doctest::Approx(50.0));
  }
  SUBCASE("single item") {
    auto one = Corpus::from_items({make_item("z", "a b c d e")});
    const auto s = round_stats(one, 1);
    CHECK(s.mean_length_words == 5.0);
    CHECK(s.mean_edit_distance == 0.0);
  }
}

TEST_CASE("embedding files") {
  test::TempDir dir;
  SUBCASE("round trip is bitwise") {
    EmbeddingMatrix m;
    m.dim = 4;
    const float r0[] = {0.1f, -2.5f, 3.0e-7f, 1e30f};
    const float r1[] = {-0.0f, 7.0f, 8.5f, -1.25f};
    m.add_row(r0, "first");
    m.add_row(r1, "second");
    save_embeddings(m, dir / "e.bin");
    const auto back = load_embeddings(dir / "e.bin");
    CHECK(back.dim == 4);
    CHECK(back.count == 2);
    CHECK(std::memcmp(back.values.data(), m.values.data(), m.values.size() * sizeof(float)) == 0);
    CHECK(back.id_index.at("second") == 1);
    CHECK(back.find("first")->size() == 4);
  }
  SUBCASE("empty matrix keeps its dim") {
    EmbeddingMatrix m;
    m.dim = 9;
    save_embeddings(m, dir / "z.bin");
    const auto back = load_embeddings(dir / "z.bin");
    CHECK(back.dim == 9);
    CHECK(back.count == 0);
  }
  SUBCASE("errors") {
    std::string bytes = "ALTE";
    io::put_u32(bytes, 1);
    io::put_u32(bytes, 4);
    io::put_u64(bytes, 2);
    for (int i = 0; i < 6; ++i) io::put_f32(bytes, 1.0f);  // 1.5 rows
    test::write_text(dir / "t.bin", bytes);
    const auto msg = test::error_message_of([&] { load_embeddings(dir / "t.bin"); });
    CHECK(test::error_kind_of([&] { load_embeddings(dir / "t.bin"); }) == ErrorKind::kLength);
    CHECK(msg.find("expected 52 bytes") != std::string::npos);  // 20-byte header + 8 floats
    CHECK(msg.find("got 44") != std::string::npos);

    test::write_text(dir / "m.bin", "NOPE" + bytes.substr(4));
    CHECK(test::error_kind_of([&] { load_embeddings(dir / "m.bin"); }) == ErrorKind::kFormat);

    std::string v2 = "ALTE";
    io::put_u32(v2, 2);
    io::put_u32(v2, 1);
    io::put_u64(v2, 0);
    test::write_text(dir / "v.bin", v2);
    CHECK(test::error_kind_of([&] { load_embeddings(dir / "v.bin"); }) == ErrorKind::kFormat);

    std::string nan = "ALTE";
    io::put_u32(nan, 1);
    io::put_u32(nan, 1);
    io::put_u64(nan, 1);
    io::put_f32(nan, std::nanf(""));
    test::write_text(dir / "n.bin", nan);
    CHECK(test::error_kind_of([&] { load_embeddings(dir / "n.bin"); }) == ErrorKind::kValidation);
  }
}

TEST_CASE("mix_sample") {
  std::vector<std::string> ids;
  for (int i = 0; i < 200; ++i) ids.push_back("id" + std::to_string(i));
  std::vector<MixCandidate> cands;
  for (const auto& id : ids) cands.push_back({id, "alt", "synthetic"});

  auto count_synth = [](const std::vector<CaptionChoice>& cs) {
    std::size_t n = 0;
    for (const auto& c : cs) n += c.chosen_source == CaptionSource::kSynthetic;
    return n;
  };
  CHECK(count_synth(mix_sample(cands, {0.0, 1})) == 0);
  CHECK(count_synth(mix_sample(cands, {1.0, 1})) == cands.size());
  CHECK(mix_sample(cands, {0.3, 42}) == mix_sample(cands, {0.3, 42}));
  CHECK_FALSE(mix_sample(cands, {0.3, 42}) == mix_sample(cands, {0.3, 43}));
  for (const auto& c : mix_sample(cands, {0.5, 9})) {
    CHECK(c.chosen_text == (c.chosen_source == CaptionSource::kAlt ? "alt" : "synthetic"));
  }
  const auto msg = test::error_message_of([&] { mix_sample(cands, {1.5, 0}); });
  CHECK(msg.find("[0, 1]") != std::string::npos);
  CHECK(test::error_kind_of([&] { mix_sample(cands, {-0.1, 0}); }) == ErrorKind::kValidation);
  CHECK(test::error_kind_of([&] { mix_sample(cands, {std::nan(""), 0}); }) == ErrorKind::kValidation);

  SUBCASE("from a corpus round or a map") {
    auto c = Corpus::from_items({make_item("a", "alt a"), make_item("b", "alt b")});
    c.record_round("a", 2, "a photo of a", "v");
    CHECK(test::error_message_of([&] { mix_sample(c, {1.0, 0}, 2); }).find("'b'") != std::string::npos);
    c.record_round("b", 2, "a photo of b", "v");
    const auto all = mix_sample(c, {1.0, 0}, 2);
    CHECK(all[1].chosen_text == "a photo of b");
    std::unordered_map<std::string, std::string> m{{"a", "sa"}, {"b", "sb"}};
    CHECK(mix_sample(c, {1.0, 0}, m)[0].chosen_text == "sa");
  }
}

TEST_CASE("training set export round trip") {
  test::TempDir dir;
  std::vector<std::string> ids, alts, synths;
  for (int i = 0; i < 100; ++i) {
    ids.push_back("item-" + std::to_string(i));
    alts.push_back("alt " + ids.back());
    synths.push_back("a photo of " + ids.back());
  }
  std::vector<MixCandidate> cands;
  for (std::size_t i = 0; i < ids.size(); ++i) cands.push_back({ids[i], alts[i], synths[i]});
  const auto choices = mix_sample(cands, {0.5, 5});
  export_training_set(choices, dir / "train.jsonl");
  CHECK(read_training_set(dir / "train.jsonl") == choices);
  std::ifstream in(dir / "train.jsonl");
  std::size_t lines = 0;
  for (std::string l; std::getline(in, l);) ++lines;
  CHECK(lines == 100);
  CHECK(test::error_kind_of([&] { export_training_set({}, dir / "x.jsonl"); }) == ErrorKind::kValidation);
  CHECK(test::error_kind_of([&] { export_training_set(choices, dir / "missing-dir" / "x.jsonl"); }) == ErrorKind::kIo);
}
