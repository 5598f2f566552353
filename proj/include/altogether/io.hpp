#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace altogether::io {

using Json = nlohmann::json;

std::string read_file(const std::filesystem::path& path);

// Writes through a sibling temp file and renames it into place, so readers
// never observe a half-written artifact.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

// Calls `fn(line_no, json)` for every non-blank line; line numbers are 1-based.
// Malformed JSON raises a parse error naming the file and line.
void for_each_jsonl(const std::filesystem::path& path,
                    const std::function<void(std::size_t, const Json&)>& fn);

void write_jsonl_atomic(const std::filesystem::path& path, const std::vector<Json>& rows);

// Little-endian primitive encoding used by the binary file formats.
void put_u32(std::string& out, std::uint32_t v);
void put_u64(std::string& out, std::uint64_t v);
void put_f32(std::string& out, float v);
void put_f64(std::string& out, double v);

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::size_t position() const { return pos_; }
  std::string_view take(std::size_t n);
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  double f64();

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

// Field accessors that raise parse errors with a useful message.
std::string require_string(const Json& obj, std::string_view key);
std::int64_t require_int(const Json& obj, std::string_view key);

}  // namespace altogether::io
