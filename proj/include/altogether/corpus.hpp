#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

#include "altogether/embeddings.hpp"
#include "altogether/io.hpp"

namespace altogether::corpus {

enum class Source { kWit, kMetaclip, kSynthetic, kOther };

std::string_view source_name(Source s);
Source parse_source(std::string_view s);  // throws kParse on unknown names

struct ImageItem {
  std::string id;
  std::string image_ref;  // opaque URI, never fetched
  std::string alt_text;
  Source source = Source::kOther;
  std::optional<std::size_t> embedding_row;
};

// One caption in an item's round chain. Round 1 is the alt-text itself; each
// later round rewrites the caption of the round before it.
struct RoundRecord {
  std::string item_id;
  int round_no = 0;
  std::string caption;
  std::string annotator;
  double timestamp = 0.0;
  std::size_t edit_distance_to_prev = 0;
  std::size_t length_words = 0;
};

struct RoundStats {
  int round_no = 0;
  std::size_t item_count = 0;
  double mean_length_words = 0.0;
  double mean_edit_distance = 0.0;
  std::optional<double> mean_alignment;
};

// Character (code point) Levenshtein distance with unit costs.
std::size_t edit_distance(std::string_view a, std::string_view b);

struct IngestOptions {
  // Create the round-1 record from each item's alt-text during ingestion.
  bool auto_round_one = true;
  std::string round_one_annotator = "alt-text";
};

// In-memory corpus of items and their round chains. Items are immutable after
// construction; rounds are appended through a single writer lock and may be
// read concurrently.
class Corpus {
 public:
  Corpus();
  Corpus(Corpus&&) noexcept;
  Corpus& operator=(Corpus&&) noexcept;
  ~Corpus();

  static Corpus from_items(std::vector<ImageItem> items, const IngestOptions& opts = {});

  std::size_t size() const { return items_.size(); }
  const std::vector<ImageItem>& items() const { return items_; }
  bool contains(std::string_view id) const;
  const ImageItem& item(std::string_view id) const;  // throws kNotFound

  // Appends the next round for an item. The record is immutable once stored.
  RoundRecord record_round(std::string_view item_id, int round_no, std::string caption,
                           std::string annotator, std::optional<double> timestamp = std::nullopt);

  std::vector<RoundRecord> rounds(std::string_view item_id) const;
  std::optional<RoundRecord> round(std::string_view item_id, int round_no) const;
  std::optional<RoundRecord> latest(std::string_view item_id) const;
  int max_round(std::string_view item_id) const;

  // Mirrors every subsequently recorded round as a line in a rounds JSONL file.
  void attach_round_log(const std::filesystem::path& path);

 private:
  std::size_t index_of(std::string_view id) const;

  std::vector<ImageItem> items_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<std::vector<RoundRecord>> rounds_;
  std::optional<std::filesystem::path> round_log_;
  std::unique_ptr<std::shared_mutex> mu_;
};

// One items-JSONL object: {"id", "image_ref", "alt_text", "source", "embedding_row"?}.
ImageItem item_from_json(const io::Json& j);  // throws kParse
io::Json item_to_json(const ImageItem& item);

Corpus ingest_pairs(const std::filesystem::path& path, const IngestOptions& opts = {});
void save_items(const Corpus& corpus, const std::filesystem::path& path);

// Rounds JSONL: {"id", "round", "caption", "annotator", "ts"}. Loading
// replays records in round order; a round-1 line identical to an
// auto-created record is accepted as a no-op.
void load_rounds(Corpus& corpus, const std::filesystem::path& path);
void save_rounds(const Corpus& corpus, const std::filesystem::path& path);

// Means over all items that have a record at `round_no`. Alignment is
// reported only when both an image embedding matrix and a text embedder are
// given and at least one item resolves to an image row.
RoundStats round_stats(const Corpus& corpus, int round_no,
                       const EmbeddingMatrix* embeddings = nullptr,
                       const TextEmbedder* text_embedder = nullptr);

// --- training-set mixing ---------------------------------------------------

struct MixSpec {
  double p = 0.15;  // probability an item uses its synthetic caption
  std::uint64_t seed = 0;
};

enum class CaptionSource { kAlt, kSynthetic };
std::string_view caption_source_name(CaptionSource s);

struct CaptionChoice {
  std::string item_id;
  CaptionSource chosen_source = CaptionSource::kAlt;
  std::string chosen_text;

  friend bool operator==(const CaptionChoice&, const CaptionChoice&) = default;
};

struct MixCandidate {
  std::string_view id;
  std::string_view alt;
  std::string_view synthetic;
};

void validate(const MixSpec& spec);

// Independent Bernoulli(p) draw per candidate, in order, from one seeded stream.
std::vector<CaptionChoice> mix_sample(std::span<const MixCandidate> candidates, const MixSpec& spec);

// Synthetic captions come either from a stored round (e.g. the latest
// captioner round) or from an explicit id -> caption map.
using SyntheticSource = std::variant<int, std::unordered_map<std::string, std::string>>;

std::vector<CaptionChoice> mix_sample(const Corpus& corpus, const MixSpec& spec,
                                      const SyntheticSource& synthetic);

// JSONL of {"id", "text", "source"} in input order.
void export_training_set(std::span<const CaptionChoice> choices, const std::filesystem::path& path);
std::vector<CaptionChoice> read_training_set(const std::filesystem::path& path);

}  // namespace altogether::corpus
