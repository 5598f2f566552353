#include "altogether/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <thread>
#include <tuple>

#include <fmt/format.h>

#include "altogether/error.hpp"
#include "altogether/text.hpp"

namespace altogether::metrics {

Tokens caption_tokens(std::string_view s) {
  Tokens out;
  std::string cur;
  for (char c : s) {
    const auto u = static_cast<unsigned char>(c);
    const bool sep = text::is_space(c) || (u < 0x80 && std::ispunct(u) && c != '\'' && c != '-');
    if (sep) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c >= 'A' && c <= 'Z' ? static_cast<char>(c - 'A' + 'a') : c);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

double clip_score(std::span<const float> image_vec, std::span<const float> text_vec, double scale) {
  if (image_vec.size() != text_vec.size()) {
    throw Error(ErrorKind::kShape, fmt::format("clip_score: dimension mismatch ({} vs {})",
                                               image_vec.size(), text_vec.size()));
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < image_vec.size(); ++i) {
    const double a = image_vec[i], b = text_vec[i];
    dot += a * b;
    na += a * a;
    nb += b * b;
  }
  if (na == 0.0 || nb == 0.0) {
    throw Error(ErrorKind::kDomain, "clip_score: zero-norm vector");
  }
  const double cosine = std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
  return scale * std::max(cosine, 0.0);
}

Score bleu1(const Tokens& candidate, std::span<const Tokens> references) {
  if (candidate.empty() || references.empty()) return {0.0, true};
  std::map<std::string, std::size_t> cand = ngram_counts(candidate, 1);
  std::map<std::string, std::size_t> max_ref;
  for (const auto& ref : references) {
    for (const auto& [g, n] : ngram_counts(ref, 1)) max_ref[g] = std::max(max_ref[g], n);
  }
  std::size_t clipped = 0;
  for (const auto& [g, n] : cand) {
    auto it = max_ref.find(g);
    if (it != max_ref.end()) clipped += std::min(n, it->second);
  }
  const double c = static_cast<double>(candidate.size());
  // Closest reference length; ties go to the shorter one.
  std::size_t best_len = references[0].size();
  for (const auto& ref : references) {
    const auto d = std::abs(static_cast<long>(ref.size()) - static_cast<long>(candidate.size()));
    const auto bd = std::abs(static_cast<long>(best_len) - static_cast<long>(candidate.size()));
    if (d < bd || (d == bd && ref.size() < best_len)) best_len = ref.size();
  }
  const double r = static_cast<double>(best_len);
  const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
  return {bp * static_cast<double>(clipped) / c, false};
}

std::string light_stem(std::string_view w) {
  for (std::string_view suf : {"ing", "ed", "es", "ly", "s"}) {
    if (w.size() >= suf.size() + 3 && w.ends_with(suf)) {
      return std::string(w.substr(0, w.size() - suf.size()));
    }
  }
  return std::string(w);
}

Score meteor_lite(const Tokens& candidate, const Tokens& reference) {
  if (candidate.empty() || reference.empty()) return {0.0, true};
  constexpr std::size_t kUnmatched = SIZE_MAX;
  std::vector<std::size_t> align(candidate.size(), kUnmatched);  // cand pos -> ref pos
  std::vector<bool> ref_used(reference.size(), false);

  auto stage = [&](auto&& key) {
    for (std::size_t i = 0; i < candidate.size(); ++i) {
      if (align[i] != kUnmatched) continue;
      const auto k = key(candidate[i]);
      for (std::size_t j = 0; j < reference.size(); ++j) {
        if (!ref_used[j] && key(reference[j]) == k) {
          align[i] = j;
          ref_used[j] = true;
          break;
        }
      }
    }
  };
  stage([](const std::string& w) { return w; });
  stage([](const std::string& w) { return light_stem(w); });

  std::size_t matches = 0, chunks = 0;
  std::size_t prev_ref = kUnmatched;
  bool in_chunk = false;
  for (std::size_t i = 0; i < candidate.size(); ++i) {
    if (align[i] == kUnmatched) {
      in_chunk = false;
      continue;
    }
    ++matches;
    if (!in_chunk || prev_ref == kUnmatched || align[i] != prev_ref + 1) ++chunks;
    in_chunk = true;
    prev_ref = align[i];
  }
  if (matches == 0) return {0.0, false};
  const double m = static_cast<double>(matches);
  const double p = m / static_cast<double>(candidate.size());
  const double r = m / static_cast<double>(reference.size());
  const double f_mean = 10.0 * p * r / (r + 9.0 * p);
  const double penalty = 0.5 * std::pow(static_cast<double>(chunks) / m, 3.0);
  return {f_mean * (1.0 - penalty), false};
}

std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

Score rouge_l(const Tokens& candidate, const Tokens& reference) {
  if (candidate.empty() || reference.empty()) return {0.0, true};
  const auto lcs = static_cast<double>(lcs_length(candidate, reference));
  if (lcs == 0.0) return {0.0, false};
  const double p = lcs / static_cast<double>(candidate.size());
  const double r = lcs / static_cast<double>(reference.size());
  return {2.0 * p * r / (p + r), false};
}

std::map<std::string, std::size_t> ngram_counts(const Tokens& toks, int order) {
  std::map<std::string, std::size_t> out;
  const auto n = static_cast<std::size_t>(order);
  if (toks.size() < n) return out;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) {
    std::string g = toks[i];
    for (std::size_t k = 1; k < n; ++k) {
      g.push_back(' ');
      g += toks[i + k];
    }
    ++out[g];
  }
  return out;
}

double NGramStats::idf(int order, const std::string& ngram) const {
  const auto& table = doc_freq[static_cast<std::size_t>(order - 1)];
  auto it = table.find(ngram);
  const double df = it == table.end() ? 1.0 : static_cast<double>(std::max<std::size_t>(it->second, 1));
  return std::log(static_cast<double>(doc_count)) - std::log(df);
}

NGramStats build_ngram_stats(std::span<const std::vector<Tokens>> reference_sets) {
  if (reference_sets.empty()) {
    throw Error(ErrorKind::kValidation, "cannot build n-gram statistics from an empty corpus");
  }
  NGramStats st;
  st.doc_count = reference_sets.size();
  for (const auto& refs : reference_sets) {
    for (int order = 1; order <= NGramStats::kMaxOrder; ++order) {
      std::map<std::string, std::size_t> seen;
      for (const auto& ref : refs) {
        for (const auto& [g, _] : ngram_counts(ref, order)) seen[g] = 1;
      }
      auto& table = st.doc_freq[static_cast<std::size_t>(order - 1)];
      for (const auto& [g, _] : seen) ++table[g];
    }
  }
  return st;
}

namespace {

struct TfIdf {
  std::array<std::map<std::string, double>, NGramStats::kMaxOrder> vec;
  std::array<double, NGramStats::kMaxOrder> norm{};
};

TfIdf tfidf(const Tokens& toks, const NGramStats& st) {
  TfIdf out;
  for (int order = 1; order <= NGramStats::kMaxOrder; ++order) {
    const auto o = static_cast<std::size_t>(order - 1);
    double sq = 0.0;
    for (const auto& [g, tf] : ngram_counts(toks, order)) {
      const double w = static_cast<double>(tf) * st.idf(order, g);
      out.vec[o][g] = w;
      sq += w * w;
    }
    out.norm[o] = std::sqrt(sq);
  }
  return out;
}

}  // namespace

double cider_d(const Tokens& candidate, std::span<const Tokens> references, const NGramStats* stats,
               double sigma) {
  if (stats == nullptr || stats->doc_count == 0) {
    throw Error(ErrorKind::kDependency, "cider_d requires n-gram statistics over the reference corpus");
  }
  if (references.empty()) return 0.0;
  const TfIdf cand = tfidf(candidate, *stats);
  double total = 0.0;
  for (const auto& ref_toks : references) {
    const TfIdf ref = tfidf(ref_toks, *stats);
    const double delta = static_cast<double>(candidate.size()) - static_cast<double>(ref_toks.size());
    const double penalty = std::exp(-(delta * delta) / (2.0 * sigma * sigma));
    double per_ref = 0.0;
    for (std::size_t o = 0; o < NGramStats::kMaxOrder; ++o) {
      double val = 0.0;
      for (const auto& [g, w] : cand.vec[o]) {
        auto it = ref.vec[o].find(g);
        if (it != ref.vec[o].end()) val += std::min(w, it->second) * it->second;
      }
      if (cand.norm[o] != 0.0 && ref.norm[o] != 0.0) {
        val /= cand.norm[o] * ref.norm[o];
      } else {
        val = 0.0;
      }
      per_ref += val * penalty;
    }
    total += per_ref / NGramStats::kMaxOrder;
  }
  return 10.0 * total / static_cast<double>(references.size());
}

PRF np_prf(std::string_view candidate, std::string_view reference, const textproc::Lexicon& lexicon) {
  const auto c = textproc::noun_phrases(candidate, lexicon);
  const auto r = textproc::noun_phrases(reference, lexicon);
  std::size_t tp = 0;
  for (const auto& np : c) tp += r.contains(np) ? 1 : 0;
  PRF out;
  out.precision = c.empty() ? 0.0 : static_cast<double>(tp) / static_cast<double>(c.size());
  out.recall = r.empty() ? 0.0 : static_cast<double>(tp) / static_cast<double>(r.size());
  const double s = out.precision + out.recall;
  out.f1 = s == 0.0 ? 0.0 : 2.0 * out.precision * out.recall / s;
  return out;
}

SuiteResult evaluate_suite(const std::vector<std::pair<std::string, std::string>>& predictions,
                           const std::unordered_map<std::string, std::vector<std::string>>& references,
                           const textproc::Lexicon& lexicon, const EvalEmbeddings* embeddings,
                           std::size_t jobs) {
  std::vector<std::string> missing;
  for (const auto& [id, _] : predictions) {
    auto it = references.find(id);
    if (it == references.end() || it->second.empty()) missing.push_back(id);
  }
  if (predictions.size() != references.size() && missing.empty()) {
    for (const auto& [id, _] : references) {
      if (std::none_of(predictions.begin(), predictions.end(),
                       [&](const auto& p) { return p.first == id; })) {
        missing.push_back(id);
      }
    }
    std::sort(missing.begin(), missing.end());
  }
  if (!missing.empty()) {
    std::string list;
    for (std::size_t i = 0; i < missing.size() && i < 20; ++i) {
      list += (i ? ", " : "") + missing[i];
    }
    throw Error(ErrorKind::kAlignment,
                fmt::format("predictions and references are not aligned; {} id(s) unmatched: {}{}",
                            missing.size(), list, missing.size() > 20 ? ", ..." : ""));
  }
  if (predictions.empty()) {
    throw Error(ErrorKind::kValidation, "no predictions to evaluate");
  }

  // Tokenized references and the CIDEr document frequencies over them.
  std::vector<std::vector<Tokens>> ref_tokens(predictions.size());
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    for (const auto& r : references.at(predictions[i].first)) ref_tokens[i].push_back(caption_tokens(r));
  }
  const NGramStats stats = build_ngram_stats(ref_tokens);

  const bool with_clip = embeddings != nullptr && embeddings->images != nullptr &&
                         (embeddings->texts != nullptr ||
                          (embeddings->text_embedder != nullptr && *embeddings->text_embedder));

  SuiteResult result;
  result.items.resize(predictions.size());
  auto score_item = [&](std::size_t i) {
    const auto& [id, pred] = predictions[i];
    const auto& refs_text = references.at(id);
    const Tokens cand = caption_tokens(pred);
    const auto& refs = ref_tokens[i];
    MetricReport m;
    m.n_items = 1;
    m.bleu1 = bleu1(cand, refs).value;
    m.cider_d = cider_d(cand, refs, &stats);
    for (const auto& ref : refs) {
      m.meteor = std::max(m.meteor, meteor_lite(cand, ref).value);
      m.rouge_l = std::max(m.rouge_l, rouge_l(cand, ref).value);
    }
    PRF best;
    bool first = true;
    for (const auto& r : refs_text) {
      const PRF prf = np_prf(pred, r, lexicon);
      if (first || std::tie(prf.f1, prf.precision, prf.recall) >
                       std::tie(best.f1, best.precision, best.recall)) {
        best = prf;
        first = false;
      }
    }
    m.np_precision = best.precision;
    m.np_recall = best.recall;
    m.np_f1 = best.f1;
    if (with_clip) {
      auto image = embeddings->images->find(id);
      if (!image) {
        throw Error(ErrorKind::kNotFound, fmt::format("no image embedding for '{}'", id));
      }
      if (embeddings->texts != nullptr) {
        auto tv = embeddings->texts->find(id);
        if (!tv) throw Error(ErrorKind::kNotFound, fmt::format("no text embedding for '{}'", id));
        m.clip_score = clip_score(*image, *tv, embeddings->scale);
      } else {
        const auto tv = (*embeddings->text_embedder)(pred);
        m.clip_score = clip_score(*image, tv, embeddings->scale);
      }
    }
    result.items[i] = ItemMetrics{id, m};
  };

  jobs = std::max<std::size_t>(1, std::min(jobs, predictions.size()));
  if (jobs == 1) {
    for (std::size_t i = 0; i < predictions.size(); ++i) score_item(i);
  } else {
    std::vector<std::exception_ptr> errors(jobs);
    std::vector<std::thread> workers;
    for (std::size_t w = 0; w < jobs; ++w) {
      workers.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < predictions.size(); i += jobs) score_item(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : workers) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  // Fixed summation order keeps the aggregate independent of `jobs`.
  MetricReport& agg = result.aggregate;
  double clip_sum = 0.0;
  for (const auto& it : result.items) {
    agg.bleu1 += it.scores.bleu1;
    agg.meteor += it.scores.meteor;
    agg.rouge_l += it.scores.rouge_l;
    agg.cider_d += it.scores.cider_d;
    agg.np_precision += it.scores.np_precision;
    agg.np_recall += it.scores.np_recall;
    agg.np_f1 += it.scores.np_f1;
    if (it.scores.clip_score) clip_sum += *it.scores.clip_score;
  }
  const double n = static_cast<double>(result.items.size());
  agg.n_items = result.items.size();
  agg.bleu1 /= n;
  agg.meteor /= n;
  agg.rouge_l /= n;
  agg.cider_d /= n;
  agg.np_precision /= n;
  agg.np_recall /= n;
  agg.np_f1 /= n;
  if (with_clip) agg.clip_score = clip_sum / n;
  return result;
}

}  // namespace altogether::metrics
