#pragma once

#include <cstdint>
#include <filesystem>
#include <new>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "altogether/rng.hpp"
#include "altogether/textproc.hpp"

namespace altogether::model {

using textproc::TokenId;

// Cache-line aligned storage. Vectorized kernels pick their code path from
// pointer alignment, so a fixed alignment keeps results bitwise reproducible.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }

  friend bool operator==(const AlignedAllocator&, const AlignedAllocator&) { return true; }
};

using ParamVector = std::vector<double, AlignedAllocator<double>>;

struct ModelConfig {
  int d_model = 64;
  int n_heads = 4;
  int n_decoder_layers = 2;
  int n_mapping_layers = 1;
  int vocab_size = 512;
  int image_embed_dim = 64;
  int n_visual = 40;
  int m_alt = 128;
  int max_gen = 256;

  int total_len() const { return n_visual + m_alt + max_gen; }
  int d_ff() const { return 4 * d_model; }
  int head_dim() const { return d_model / n_heads; }
  void validate() const;  // throws kConfig

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// One named tensor inside the flat parameter buffer.
struct TensorSpec {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t offset = 0;

  std::size_t size() const { return rows * cols; }
};

// Offsets of every tensor, in declaration (= serialization) order.
std::vector<TensorSpec> parameter_layout(const ModelConfig& cfg);
std::size_t parameter_count(const ModelConfig& cfg);

struct ModelParams {
  ModelConfig config;
  ParamVector values;  // laid out per parameter_layout(config)

  std::size_t count() const { return values.size(); }
  TensorSpec tensor(std::string_view name) const;  // throws kNotFound
  std::span<double> view(std::string_view name);
  std::span<const double> view(std::string_view name) const;

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

ModelParams init_model(const ModelConfig& cfg, std::uint64_t seed);

void save_model(const ModelParams& params, const std::filesystem::path& path);
// When `expected` is given its vocab_size and image_embed_dim must match the file.
ModelParams load_model(const std::filesystem::path& path, const ModelConfig* expected = nullptr);

// --- sequence layout -------------------------------------------------------

enum class Role : std::uint8_t { kVisual, kAlt, kCaption, kPad };

// One decoder row over the fixed [visual | alt | caption] layout.
//   visual: n_visual positions filled from the mapping network
//   alt:    alt ids (or a single EMPTY_ALT) right-padded to m_alt
//   caption: BOS, caption ids, EOS, then PAD up to max_gen
// targets[j] is the label predicted at position j; only loss_mask positions
// contribute to the loss.
struct SequenceRow {
  std::vector<TokenId> ids;
  std::vector<TokenId> targets;
  std::vector<Role> roles;
  std::vector<std::uint8_t> loss_mask;
  bool alt_truncated = false;
  bool caption_truncated = false;

  std::size_t mask_count() const;
  // Keys at PAD positions are excluded from attention.
  bool attends(std::size_t j) const { return roles[j] != Role::kPad; }
};

// Empty `alt_ids` is encoded as a single EMPTY_ALT token. Overlong alt is
// head-truncated to m_alt; overlong captions keep the first max_gen - 1 ids
// so that BOS..caption fit and EOS remains the final target.
SequenceRow layout_sequence(std::span<const TokenId> alt_ids, std::span<const TokenId> caption_ids,
                            const ModelConfig& cfg);

struct SequenceBatch {
  std::vector<std::vector<double>> images;  // F(i) per row, length image_embed_dim
  std::vector<SequenceRow> rows;

  std::size_t size() const { return rows.size(); }
  std::size_t mask_count() const;
};

// --- forward / backward ----------------------------------------------------

// n_visual x d_model visual tokens, row-major.
std::vector<double> map_embedding(const ModelParams& params, std::span<const double> image_vec);

struct LossResult {
  double mean_loss = 0.0;
  std::size_t masked_positions = 0;
  std::vector<std::vector<double>> per_position;  // [row][layout position], 0 outside mask
};

LossResult forward_loss(const ModelParams& params, const SequenceBatch& batch);

// Mean masked loss; `grad` (resized to params.count()) receives d loss / d params.
double forward_backward(const ModelParams& params, const SequenceBatch& batch, ParamVector& grad);

// --- generation ------------------------------------------------------------

struct DecodeConfig {
  double temperature = 0.2;
  double top_p = 0.7;
  int max_tokens = 256;
  std::uint64_t seed = 0;
  bool stop_at_eos = true;

  void validate(const ModelConfig& cfg) const;
};

// Keeps the smallest prefix of tokens (by descending probability) whose mass
// reaches top_p and renormalizes; everything else gets probability 0.
std::vector<double> nucleus_filter(std::span<const double> probs, double top_p);

// Draws the next token from logits: greedy at temperature 0, otherwise
// temperature-scaled softmax followed by nucleus truncation.
TokenId sample_token(std::span<const double> logits, double temperature, double top_p, Rng& rng);

std::vector<TokenId> generate(const ModelParams& params, std::span<const double> image_vec,
                              std::span<const TokenId> alt_ids, const DecodeConfig& cfg);

// Generation over an explicit alt region: `alt_ids` are used verbatim (no
// EMPTY_ALT substitution), so an empty span yields a visual+caption layout.
std::vector<TokenId> generate_raw(const ModelParams& params, std::span<const double> image_vec,
                                  std::span<const TokenId> alt_ids, const DecodeConfig& cfg);

// Logits at every position of a prefix, computed through the incremental
// (cached) decoder; used to cross-check against forward_loss.
std::vector<std::vector<double>> prefix_logits(const ModelParams& params, std::span<const double> image_vec,
                                               std::span<const TokenId> alt_ids,
                                               std::span<const TokenId> caption_prefix);

}  // namespace altogether::model
