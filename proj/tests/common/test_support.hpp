#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <unistd.h>

#include "altogether/error.hpp"
#include "altogether/rng.hpp"

namespace test {

// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("altogether-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(std::string_view name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline void write_text(const std::filesystem::path& p, std::string_view s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

inline void put_utf8(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out += static_cast<char>(cp);
  } else if (cp < 0x800) {
    out += static_cast<char>(0xC0 | (cp >> 6));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else if (cp < 0x10000) {
    out += static_cast<char>(0xE0 | (cp >> 12));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else {
    out += static_cast<char>(0xF0 | (cp >> 18));
    out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  }
}

inline std::string utf8(const std::u32string& s) {
  std::string out;
  for (char32_t c : s) put_utf8(out, c);
  return out;
}

// Random code points mixing ASCII, a tiny alphabet (to force matches),
// Latin-1, CJK and astral symbols.
inline std::u32string random_codepoints(altogether::Rng& rng, std::size_t max_len) {
  std::u32string out;
  const std::size_t n = rng.below(max_len + 1);
  for (std::size_t i = 0; i < n; ++i) {
    switch (rng.below(5)) {
      case 0: out += static_cast<char32_t>(0x20 + rng.below(0x5F)); break;
      case 1: out += static_cast<char32_t>('a' + rng.below(3)); break;
      case 2: out += static_cast<char32_t>(0xA0 + rng.below(0x60)); break;
      case 3: out += static_cast<char32_t>(0x4E00 + rng.below(0x200)); break;
      default: out += static_cast<char32_t>(0x1F300 + rng.below(0x100)); break;
    }
  }
  return out;
}

inline std::string random_utf8(altogether::Rng& rng, std::size_t max_len) {
  return utf8(random_codepoints(rng, max_len));
}

template <typename F>
altogether::ErrorKind error_kind_of(F&& f) {
  try {
    f();
  } catch (const altogether::Error& e) {
    return e.kind();
  }
  throw std::runtime_error("expected an altogether::Error");
}

template <typename F>
std::string error_message_of(F&& f) {
  try {
    f();
  } catch (const altogether::Error& e) {
    return e.what();
  }
  throw std::runtime_error("expected an altogether::Error");
}

}  // namespace test
