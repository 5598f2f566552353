#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "altogether/embeddings.hpp"
#include "altogether/textproc.hpp"

namespace altogether::metrics {

using Tokens = std::vector<std::string>;

// Lowercases and splits on whitespace and ASCII punctuation.
Tokens caption_tokens(std::string_view text);

// `degenerate` marks inputs the metric is undefined on (e.g. an empty
// candidate); the value is then 0.
struct Score {
  double value = 0.0;
  bool degenerate = false;
};

inline constexpr double kClipScale = 100.0;

// scale * max(cos(image, text), 0)
double clip_score(std::span<const float> image_vec, std::span<const float> text_vec,
                  double scale = kClipScale);

Score bleu1(const Tokens& candidate, std::span<const Tokens> references);

Score meteor_lite(const Tokens& candidate, const Tokens& reference);
std::string light_stem(std::string_view word);

Score rouge_l(const Tokens& candidate, const Tokens& reference);
std::size_t lcs_length(const Tokens& a, const Tokens& b);

// Document frequencies of 1..4-grams. A document is one item's reference set.
struct NGramStats {
  static constexpr int kMaxOrder = 4;
  std::array<std::unordered_map<std::string, std::size_t>, kMaxOrder> doc_freq;
  std::size_t doc_count = 0;

  double idf(int order, const std::string& ngram) const;  // log(N / max(df, 1))
};

// n-grams joined by a single space; order is 1-based.
std::map<std::string, std::size_t> ngram_counts(const Tokens& toks, int order);

NGramStats build_ngram_stats(std::span<const std::vector<Tokens>> reference_sets);

inline constexpr double kCiderSigma = 6.0;

// CIDEr-D in [0, 10]. Throws kDependency when `stats` is null or empty.
double cider_d(const Tokens& candidate, std::span<const Tokens> references, const NGramStats* stats,
               double sigma = kCiderSigma);

struct PRF {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

PRF np_prf(std::string_view candidate, std::string_view reference, const textproc::Lexicon& lexicon);

struct MetricReport {
  std::optional<double> clip_score;
  double bleu1 = 0.0;
  double meteor = 0.0;
  double rouge_l = 0.0;
  double cider_d = 0.0;
  double np_precision = 0.0;
  double np_recall = 0.0;
  double np_f1 = 0.0;
  std::size_t n_items = 0;
};

struct ItemMetrics {
  std::string id;
  MetricReport scores;  // n_items = 1
};

struct EvalEmbeddings {
  const corpus::EmbeddingMatrix* images = nullptr;  // looked up by item id
  const corpus::TextEmbedder* text_embedder = nullptr;
  const corpus::EmbeddingMatrix* texts = nullptr;  // precomputed, by item id
  double scale = kClipScale;
};

struct SuiteResult {
  MetricReport aggregate;
  std::vector<ItemMetrics> items;  // in prediction order
};

// Per-item scores, macro-averaged in prediction order. Multiple references
// per id are allowed; BLEU-1 and CIDEr-D use all of them, the remaining
// metrics take the best-scoring reference.
SuiteResult evaluate_suite(const std::vector<std::pair<std::string, std::string>>& predictions,
                           const std::unordered_map<std::string, std::vector<std::string>>& references,
                           const textproc::Lexicon& lexicon,
                           const EvalEmbeddings* embeddings = nullptr, std::size_t jobs = 1);

}  // namespace altogether::metrics
