#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace altogether::text {

inline constexpr char32_t kReplacementChar = 0xFFFD;

struct DecodedText {
  std::u32string chars;
  bool had_invalid = false;
};

// Decodes UTF-8. Each byte of an invalid or truncated sequence becomes one
// U+FFFD so that every input byte is accounted for.
DecodedText decode_utf8(std::string_view bytes);

void append_utf8(std::string& out, char32_t cp);
std::string encode_utf8(std::u32string_view chars);

constexpr bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
}

// Maximal runs of non-whitespace bytes.
std::vector<std::string_view> split_words(std::string_view s);
std::size_t word_count(std::string_view s);

std::string to_lower_ascii(std::string_view s);

}  // namespace altogether::text
