#include "altogether/textproc.hpp"

#include <algorithm>
#include <array>
#include <map>

#include <fmt/format.h>

#include "altogether/error.hpp"
#include "altogether/io.hpp"
#include "altogether/text.hpp"

namespace altogether::textproc {

namespace {

std::string byte_token_name(unsigned b) { return fmt::format("<0x{:02X}>", b); }

}  // namespace

Vocab::Vocab() {
  tokens_ = {"<pad>", "<bos>", "<eos>", "<empty_alt>"};
  for (unsigned b = 0; b < 256; ++b) tokens_.push_back(byte_token_name(b));
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    ids_.emplace(tokens_[i], static_cast<TokenId>(i));
  }
}

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw Error(ErrorKind::kRange, fmt::format("token id {} out of range (vocab size {})", id, tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> Vocab::find(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

std::optional<TokenId> Vocab::find_word(std::string_view word) const {
  auto id = find(word);
  if (id && *id >= kFirstLearned) return id;
  return std::nullopt;
}

void Vocab::add_learned(std::string word) {
  if (word.empty() || std::any_of(word.begin(), word.end(), text::is_space)) {
    throw Error(ErrorKind::kConfig, fmt::format("'{}' is not a single word", word));
  }
  if (ids_.contains(word)) {
    throw Error(ErrorKind::kConfig, fmt::format("token '{}' already in vocabulary", word));
  }
  ids_.emplace(word, static_cast<TokenId>(tokens_.size()));
  tokens_.push_back(std::move(word));
}

Vocab build_vocab(std::span<const std::string> texts, std::size_t size) {
  if (size < kMinVocabSize) {
    throw Error(ErrorKind::kConfig,
                fmt::format("vocabulary size {} is below the minimum {} (reserved + byte ids)", size,
                            kMinVocabSize));
  }
  Vocab v;
  std::map<std::string, std::size_t, std::less<>> counts;
  for (const auto& t : texts) {
    for (auto w : text::split_words(t)) {
      auto it = counts.find(w);
      if (it == counts.end()) {
        counts.emplace(std::string(w), 1);
      } else {
        ++it->second;
      }
    }
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  // std::map iteration is lexicographic, so a stable sort on count keeps ties ordered.
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  for (auto& [word, n] : ranked) {
    if (v.size() >= size) break;
    if (v.find(word)) continue;  // collides with a reserved/byte token name
    v.add_learned(std::move(word));
  }
  return v;
}

void save_vocab(const Vocab& v, const std::filesystem::path& path) {
  std::vector<io::Json> rows;
  rows.reserve(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    rows.push_back({{"token", v.token(static_cast<TokenId>(i))}, {"id", i}});
  }
  io::write_jsonl_atomic(path, rows);
}

Vocab load_vocab(const std::filesystem::path& path) {
  std::vector<std::pair<std::int64_t, std::string>> rows;
  io::for_each_jsonl(path, [&](std::size_t line, const io::Json& j) {
    try {
      rows.emplace_back(io::require_int(j, "id"), io::require_string(j, "token"));
    } catch (const Error& e) {
      throw Error(ErrorKind::kParse, fmt::format("{}:{}: {}", path.string(), line, e.what()));
    }
  });
  std::sort(rows.begin(), rows.end());
  Vocab v;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& [id, tok] = rows[i];
    if (id != static_cast<std::int64_t>(i)) {
      throw Error(ErrorKind::kFormat, fmt::format("'{}': ids are not contiguous at {}", path.string(), id));
    }
    if (i < kMinVocabSize) {
      if (v.token(static_cast<TokenId>(i)) != tok) {
        throw Error(ErrorKind::kFormat,
                    fmt::format("'{}': reserved id {} is '{}', expected '{}'", path.string(), i, tok,
                                v.token(static_cast<TokenId>(i))));
      }
      continue;
    }
    v.add_learned(tok);
  }
  if (v.size() < kMinVocabSize) {
    throw Error(ErrorKind::kFormat, fmt::format("'{}': missing reserved entries", path.string()));
  }
  return v;
}

std::vector<TokenId> tokenize(const Vocab& vocab, std::string_view s) {
  std::vector<TokenId> out;
  auto emit_bytes = [&](std::string_view bytes) {
    for (unsigned char b : bytes) out.push_back(Vocab::byte_id(b));
  };
  bool prev_learned = false;
  std::size_t i = 0;
  while (i < s.size()) {
    const std::size_t ws_start = i;
    while (i < s.size() && text::is_space(s[i])) ++i;
    const std::string_view ws = s.substr(ws_start, i - ws_start);
    const std::size_t w_start = i;
    while (i < s.size() && !text::is_space(s[i])) ++i;
    const std::string_view word = s.substr(w_start, i - w_start);

    const auto id = word.empty() ? std::nullopt : vocab.find_word(word);
    if (id && prev_learned && ws == " ") {
      out.push_back(*id);  // single separating space is implicit
      continue;
    }
    emit_bytes(ws);
    if (id) {
      out.push_back(*id);
      prev_learned = true;
    } else {
      emit_bytes(word);
      prev_learned = false;
    }
  }
  return out;
}

Detokenized detokenize(const Vocab& vocab, std::span<const TokenId> ids) {
  Detokenized out;
  std::string pending;  // current byte run
  auto flush = [&] {
    if (pending.empty()) return;
    auto decoded = text::decode_utf8(pending);
    if (decoded.had_invalid) {
      out.replaced_invalid_utf8 = true;
      out.text += text::encode_utf8(decoded.chars);
    } else {
      out.text += pending;
    }
    pending.clear();
  };
  bool prev_learned = false;
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab.size()) {
      throw Error(ErrorKind::kRange, fmt::format("token id {} out of range (vocab size {})", id, vocab.size()));
    }
    if (id == kEos) {
      out.stopped_at_eos = true;
      break;
    }
    if (id < kFirstByte) continue;  // PAD, BOS, EMPTY_ALT carry no text
    if (Vocab::is_byte(id)) {
      pending.push_back(static_cast<char>(id - kFirstByte));
      prev_learned = false;
      continue;
    }
    flush();
    if (prev_learned) out.text.push_back(' ');
    out.text += vocab.token(id);
    prev_learned = true;
  }
  flush();
  return out;
}

// --- starting prompts --------------------------------------------------------

namespace {

constexpr std::array<std::string_view, 11> kPrompts = {
    "a photo of",
    "a product photo of",
    "a low resolution photo of",
    "a cropped photo of",
    "a close-up photo of",
    "a black and white photo of",
    "a blurry photo of",
    "a rendering of",
    "a sculpture of",
    "a painting of",
    "a cartoon of",
};

}  // namespace

std::span<const std::string_view> recommended_prompts() { return kPrompts; }

PromptCheck starting_prompt_check(std::string_view s) {
  std::size_t start = 0;
  while (start < s.size() && text::is_space(s[start])) ++start;
  const std::string head = text::to_lower_ascii(s.substr(start, 64));
  PromptCheck best;
  for (auto p : kPrompts) {
    if (head.starts_with(p) && p.size() > best.prompt.size()) {
      best.accepted = true;
      best.prompt = std::string(p);
    }
  }
  return best;
}

}  // namespace altogether::textproc
