#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace altogether::textproc {

using TokenId = std::int32_t;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kEmptyAlt = 3;
inline constexpr TokenId kFirstByte = 4;
inline constexpr TokenId kFirstLearned = kFirstByte + 256;
inline constexpr std::size_t kMinVocabSize = static_cast<std::size_t>(kFirstLearned);

// Token string <-> id bijection: 4 reserved ids, 256 byte-fallback ids, then
// whole-word tokens ranked by corpus frequency.
class Vocab {
 public:
  Vocab();  // reserved + byte block only

  std::size_t size() const { return tokens_.size(); }
  std::size_t learned_count() const { return tokens_.size() - kMinVocabSize; }

  const std::string& token(TokenId id) const;  // throws kRange
  std::optional<TokenId> find(std::string_view token) const;
  std::optional<TokenId> find_word(std::string_view word) const;  // learned words only

  static bool is_byte(TokenId id) { return id >= kFirstByte && id < kFirstLearned; }
  static TokenId byte_id(unsigned char b) { return kFirstByte + b; }

  void add_learned(std::string word);

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

// Greedy frequency-ranked word vocabulary; ties break lexicographically.
Vocab build_vocab(std::span<const std::string> texts, std::size_t size);

void save_vocab(const Vocab& v, const std::filesystem::path& path);
Vocab load_vocab(const std::filesystem::path& path);

// Lossless: detokenize(tokenize(x)).text == x for every byte string x that is
// valid UTF-8. Learned words carry an implicit single space when they follow
// another learned word; everything else is spelled with byte tokens.
std::vector<TokenId> tokenize(const Vocab& vocab, std::string_view text);

struct Detokenized {
  std::string text;
  bool replaced_invalid_utf8 = false;
  bool stopped_at_eos = false;
};

Detokenized detokenize(const Vocab& vocab, std::span<const TokenId> ids);

// --- lexicon and noun phrases ---------------------------------------------

enum class Pos : std::uint8_t { kDet, kAdj, kNoun, kVerb, kAdp, kPron, kOther };

std::string_view pos_name(Pos p);
Pos parse_pos(std::string_view s);

class Lexicon {
 public:
  // Embedded default word list.
  static const Lexicon& builtin();

  Lexicon() = default;
  void add(std::string word, std::vector<Pos> tags);  // replaces any previous entry

  // Tags ordered most likely first. Unknown words fall back to suffix rules
  // and finally NOUN, so the result is never empty.
  std::vector<Pos> tags(std::string_view word) const;
  bool known(std::string_view word) const;
  bool has_tag(std::string_view word, Pos p) const;

  static Lexicon load(const std::filesystem::path& path);  // builtin + overrides
  void save(const std::filesystem::path& path) const;

 private:
  std::unordered_map<std::string, std::vector<Pos>> entries_;
};

// Lowercased, determiner-free, plural-folded phrase text.
using NounPhrase = std::string;

// Chunks (DET)? (ADJ|NOUN)* NOUN over lexicon tags; punctuation breaks chunks.
std::set<NounPhrase> noun_phrases(std::string_view text, const Lexicon& lexicon);

// --- starting prompts ------------------------------------------------------

std::span<const std::string_view> recommended_prompts();

struct PromptCheck {
  bool accepted = false;
  std::string prompt;  // the matched recommended prompt when accepted
};

// Accepts iff `text` (leading whitespace ignored) starts, case-insensitively,
// with a recommended prompt; the longest match is reported.
PromptCheck starting_prompt_check(std::string_view text);

}  // namespace altogether::textproc
