#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace altogether::corpus {

// Dense row-major float32 matrix of image (or text) embeddings, one row per
// item, with an optional id -> row index loaded from a JSONL sidecar.
//
// On-disk layout: "ALTE", u32 version (1), u32 dim, u64 count, then
// count*dim little-endian float32. The sidecar `<path>.index.jsonl` holds
// {"id": str, "row": int} lines.
struct EmbeddingMatrix {
  std::uint32_t dim = 0;
  std::uint64_t count = 0;
  std::vector<float> values;
  std::unordered_map<std::string, std::size_t> id_index;

  std::span<const float> row(std::size_t r) const;
  std::optional<std::span<const float>> find(std::string_view id) const;

  // Appends a row and, when `id` is nonempty, indexes it.
  std::size_t add_row(std::span<const float> v, std::string_view id = {});
};

inline constexpr std::uint32_t kEmbeddingVersion = 1;

std::filesystem::path embedding_index_path(const std::filesystem::path& path);

EmbeddingMatrix load_embeddings(const std::filesystem::path& path);
void save_embeddings(const EmbeddingMatrix& m, const std::filesystem::path& path);

// Maps caption text to a vector in the same space as the image rows.
using TextEmbedder = std::function<std::vector<float>(std::string_view)>;

}  // namespace altogether::corpus
