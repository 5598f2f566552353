#include "altogether/embeddings.hpp"

#include <cmath>
#include <filesystem>

#include <fmt/format.h>

#include "altogether/error.hpp"
#include "altogether/io.hpp"

namespace altogether::corpus {

namespace {
constexpr std::string_view kMagic = "ALTE";
constexpr std::size_t kHeaderBytes = 4 + 4 + 4 + 8;
}  // namespace

std::span<const float> EmbeddingMatrix::row(std::size_t r) const {
  if (r >= count) {
    throw Error(ErrorKind::kRange, fmt::format("embedding row {} out of range (count {})", r, count));
  }
  return std::span<const float>(values).subspan(r * dim, dim);
}

std::optional<std::span<const float>> EmbeddingMatrix::find(std::string_view id) const {
  auto it = id_index.find(std::string(id));
  if (it == id_index.end()) return std::nullopt;
  return row(it->second);
}

std::size_t EmbeddingMatrix::add_row(std::span<const float> v, std::string_view id) {
  if (v.size() != dim) {
    throw Error(ErrorKind::kShape, fmt::format("row has {} values, matrix dim is {}", v.size(), dim));
  }
  values.insert(values.end(), v.begin(), v.end());
  const std::size_t r = count++;
  if (!id.empty()) id_index[std::string(id)] = r;
  return r;
}

std::filesystem::path embedding_index_path(const std::filesystem::path& path) {
  auto p = path;
  p += ".index.jsonl";
  return p;
}

EmbeddingMatrix load_embeddings(const std::filesystem::path& path) {
  const std::string bytes = io::read_file(path);
  if (bytes.size() < kHeaderBytes || std::string_view(bytes).substr(0, 4) != kMagic) {
    throw Error(ErrorKind::kFormat, fmt::format("'{}' is not an embedding file (bad magic)", path.string()));
  }
  io::ByteReader rd(bytes);
  rd.take(4);
  const std::uint32_t version = rd.u32();
  if (version != kEmbeddingVersion) {
    throw Error(ErrorKind::kFormat,
                fmt::format("'{}': unsupported embedding version {} (expected {})", path.string(),
                            version, kEmbeddingVersion));
  }
  EmbeddingMatrix m;
  m.dim = rd.u32();
  m.count = rd.u64();
  const std::uint64_t expected = kHeaderBytes + m.count * m.dim * sizeof(float);
  if (bytes.size() != expected) {
    throw Error(ErrorKind::kLength,
                fmt::format("'{}': expected {} bytes for {} x {} floats, got {}", path.string(),
                            expected, m.count, m.dim, bytes.size()));
  }
  m.values.resize(m.count * m.dim);
  for (std::size_t i = 0; i < m.values.size(); ++i) {
    const float v = rd.f32();
    if (!std::isfinite(v)) {
      throw Error(ErrorKind::kValidation,
                  fmt::format("'{}': non-finite value at row {}, column {}", path.string(),
                              i / m.dim, i % m.dim));
    }
    m.values[i] = v;
  }

  const auto idx = embedding_index_path(path);
  if (std::filesystem::exists(idx)) {
    io::for_each_jsonl(idx, [&](std::size_t line, const io::Json& j) {
      const auto id = io::require_string(j, "id");
      const auto r = io::require_int(j, "row");
      if (r < 0 || static_cast<std::uint64_t>(r) >= m.count) {
        throw Error(ErrorKind::kValidation,
                    fmt::format("{}:{}: row {} out of range for {} rows", idx.string(), line, r, m.count));
      }
      m.id_index[id] = static_cast<std::size_t>(r);
    });
  }
  return m;
}

void save_embeddings(const EmbeddingMatrix& m, const std::filesystem::path& path) {
  if (m.values.size() != m.count * m.dim) {
    throw Error(ErrorKind::kShape, "embedding matrix storage does not match count x dim");
  }
  std::string out;
  out.reserve(kHeaderBytes + m.values.size() * 4);
  out.append(kMagic);
  io::put_u32(out, kEmbeddingVersion);
  io::put_u32(out, m.dim);
  io::put_u64(out, m.count);
  for (float v : m.values) io::put_f32(out, v);
  io::write_file_atomic(path, out);

  std::vector<std::pair<std::size_t, std::string>> rows;
  rows.reserve(m.id_index.size());
  for (const auto& [id, r] : m.id_index) rows.emplace_back(r, id);
  std::sort(rows.begin(), rows.end());
  std::vector<io::Json> lines;
  lines.reserve(rows.size());
  for (const auto& [r, id] : rows) lines.push_back({{"id", id}, {"row", r}});
  io::write_jsonl_atomic(embedding_index_path(path), lines);
}

}  // namespace altogether::corpus
