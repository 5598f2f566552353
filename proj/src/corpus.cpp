#include "altogether/corpus.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <mutex>

#include <fmt/format.h>

#include "altogether/error.hpp"
#include "altogether/io.hpp"
#include "altogether/metrics.hpp"
#include "altogether/rng.hpp"
#include "altogether/text.hpp"

namespace altogether::corpus {

std::string_view source_name(Source s) {
  switch (s) {
    case Source::kWit: return "wit";
    case Source::kMetaclip: return "metaclip";
    case Source::kSynthetic: return "synthetic";
    case Source::kOther: return "other";
  }
  return "other";
}

Source parse_source(std::string_view s) {
  if (s == "wit") return Source::kWit;
  if (s == "metaclip") return Source::kMetaclip;
  if (s == "synthetic") return Source::kSynthetic;
  if (s == "other") return Source::kOther;
  throw Error(ErrorKind::kParse, fmt::format("unknown source '{}'", s));
}

std::size_t edit_distance(std::string_view a, std::string_view b) {
  const auto da = text::decode_utf8(a).chars;
  const auto db = text::decode_utf8(b).chars;
  const std::u32string& s = da.size() >= db.size() ? da : db;
  const std::u32string& t = da.size() >= db.size() ? db : da;
  // Two rows over the shorter string.
  std::vector<std::size_t> prev(t.size() + 1), cur(t.size() + 1);
  for (std::size_t j = 0; j <= t.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= s.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= t.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (s[i - 1] == t[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[t.size()];
}

Corpus::Corpus() : mu_(std::make_unique<std::shared_mutex>()) {}
Corpus::Corpus(Corpus&&) noexcept = default;
Corpus& Corpus::operator=(Corpus&&) noexcept = default;
Corpus::~Corpus() = default;

Corpus Corpus::from_items(std::vector<ImageItem> items, const IngestOptions& opts) {
  Corpus c;
  c.index_.reserve(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (!c.index_.emplace(items[i].id, i).second) {
      throw Error(ErrorKind::kIngestion, fmt::format("duplicate item id '{}'", items[i].id));
    }
  }
  c.items_ = std::move(items);
  c.rounds_.resize(c.items_.size());
  if (opts.auto_round_one) {
    for (std::size_t i = 0; i < c.items_.size(); ++i) {
      const auto& it = c.items_[i];
      RoundRecord r;
      r.item_id = it.id;
      r.round_no = 1;
      r.caption = it.alt_text;
      r.annotator = opts.round_one_annotator;
      r.length_words = text::word_count(it.alt_text);
      c.rounds_[i].push_back(std::move(r));
    }
  }
  return c;
}

std::size_t Corpus::index_of(std::string_view id) const {
  auto it = index_.find(std::string(id));
  if (it == index_.end()) {
    throw Error(ErrorKind::kNotFound, fmt::format("unknown item id '{}'", id));
  }
  return it->second;
}

bool Corpus::contains(std::string_view id) const { return index_.contains(std::string(id)); }

const ImageItem& Corpus::item(std::string_view id) const { return items_[index_of(id)]; }

RoundRecord Corpus::record_round(std::string_view item_id, int round_no, std::string caption,
                                 std::string annotator, std::optional<double> timestamp) {
  const std::size_t idx = index_of(item_id);
  std::unique_lock lock(*mu_);
  auto& chain = rounds_[idx];
  const int expected = static_cast<int>(chain.size()) + 1;
  if (round_no != expected) {
    throw Error(ErrorKind::kSequencing,
                fmt::format("item '{}': round {} recorded out of order (next round is {})", item_id,
                            round_no, expected));
  }
  if (round_no == 1 && caption != items_[idx].alt_text) {
    throw Error(ErrorKind::kValidation,
                fmt::format("item '{}': round 1 caption must equal the alt-text verbatim", item_id));
  }
  RoundRecord r;
  r.item_id = std::string(item_id);
  r.round_no = round_no;
  r.edit_distance_to_prev = round_no == 1 ? 0 : edit_distance(chain.back().caption, caption);
  r.length_words = text::word_count(caption);
  r.caption = std::move(caption);
  r.annotator = std::move(annotator);
  r.timestamp = timestamp.value_or(std::chrono::duration<double>(
                                       std::chrono::system_clock::now().time_since_epoch())
                                       .count());
  if (round_log_) {
    std::ofstream out(*round_log_, std::ios::app);
    if (!out) {
      throw Error(ErrorKind::kIo, fmt::format("cannot append to '{}'", round_log_->string()));
    }
    const io::Json line{{"id", r.item_id},
                        {"round", r.round_no},
                        {"caption", r.caption},
                        {"annotator", r.annotator},
                        {"ts", r.timestamp}};
    out << line.dump() << '\n';
  }
  chain.push_back(r);
  return r;
}

std::vector<RoundRecord> Corpus::rounds(std::string_view item_id) const {
  const std::size_t idx = index_of(item_id);
  std::shared_lock lock(*mu_);
  return rounds_[idx];
}

std::optional<RoundRecord> Corpus::round(std::string_view item_id, int round_no) const {
  const std::size_t idx = index_of(item_id);
  std::shared_lock lock(*mu_);
  const auto& chain = rounds_[idx];
  if (round_no < 1 || static_cast<std::size_t>(round_no) > chain.size()) return std::nullopt;
  return chain[static_cast<std::size_t>(round_no) - 1];
}

std::optional<RoundRecord> Corpus::latest(std::string_view item_id) const {
  const std::size_t idx = index_of(item_id);
  std::shared_lock lock(*mu_);
  if (rounds_[idx].empty()) return std::nullopt;
  return rounds_[idx].back();
}

int Corpus::max_round(std::string_view item_id) const {
  const std::size_t idx = index_of(item_id);
  std::shared_lock lock(*mu_);
  return static_cast<int>(rounds_[idx].size());
}

void Corpus::attach_round_log(const std::filesystem::path& path) {
  std::unique_lock lock(*mu_);
  round_log_ = path;
}

ImageItem item_from_json(const io::Json& j) {
  if (!j.is_object()) throw Error(ErrorKind::kParse, "item is not a JSON object");
  ImageItem it;
  it.id = io::require_string(j, "id");
  it.image_ref = io::require_string(j, "image_ref");
  it.alt_text = io::require_string(j, "alt_text");
  it.source = parse_source(io::require_string(j, "source"));
  if (auto er = j.find("embedding_row"); er != j.end() && !er->is_null()) {
    if (!er->is_number_integer() || er->get<std::int64_t>() < 0) {
      throw Error(ErrorKind::kParse, "embedding_row must be a non-negative integer");
    }
    it.embedding_row = er->get<std::size_t>();
  }
  if (it.id.empty()) throw Error(ErrorKind::kParse, "empty id");
  return it;
}

io::Json item_to_json(const ImageItem& it) {
  io::Json j{{"id", it.id}, {"image_ref", it.image_ref}, {"alt_text", it.alt_text}, {"source", source_name(it.source)}};
  if (it.embedding_row) j["embedding_row"] = *it.embedding_row;
  return j;
}

Corpus ingest_pairs(const std::filesystem::path& path, const IngestOptions& opts) {
  std::vector<ImageItem> items;
  std::unordered_map<std::string, std::size_t> first_line;
  io::for_each_jsonl(path, [&](std::size_t line, const io::Json& j) {
    ImageItem it;
    try {
      it = item_from_json(j);
    } catch (const Error& e) {
      throw Error(ErrorKind::kParse, fmt::format("{}:{}: {}", path.string(), line, e.what()));
    }
    if (auto [pos, fresh] = first_line.emplace(it.id, line); !fresh) {
      throw Error(ErrorKind::kIngestion,
                  fmt::format("{}:{}: duplicate id '{}' (first seen on line {})", path.string(),
                              line, it.id, pos->second));
    }
    items.push_back(std::move(it));
  });
  return Corpus::from_items(std::move(items), opts);
}

void save_items(const Corpus& corpus, const std::filesystem::path& path) {
  std::vector<io::Json> rows;
  rows.reserve(corpus.size());
  for (const auto& it : corpus.items()) rows.push_back(item_to_json(it));
  io::write_jsonl_atomic(path, rows);
}

void load_rounds(Corpus& corpus, const std::filesystem::path& path) {
  struct Line {
    std::size_t line_no;
    std::string id;
    int round;
    std::string caption;
    std::string annotator;
    std::optional<double> ts;
  };
  std::vector<Line> lines;
  io::for_each_jsonl(path, [&](std::size_t line_no, const io::Json& j) {
    try {
      Line l{line_no, io::require_string(j, "id"), static_cast<int>(io::require_int(j, "round")),
             io::require_string(j, "caption"), j.value("annotator", std::string{}), std::nullopt};
      if (auto ts = j.find("ts"); ts != j.end() && ts->is_number()) l.ts = ts->get<double>();
      lines.push_back(std::move(l));
    } catch (const Error& e) {
      throw Error(ErrorKind::kParse, fmt::format("{}:{}: {}", path.string(), line_no, e.what()));
    }
  });
  std::stable_sort(lines.begin(), lines.end(),
                   [](const Line& a, const Line& b) { return a.round < b.round; });
  for (auto& l : lines) {
    if (auto existing = corpus.round(l.id, l.round)) {
      if (existing->caption == l.caption) continue;
      throw Error(ErrorKind::kSequencing,
                  fmt::format("{}:{}: item '{}' round {} already recorded with a different caption",
                              path.string(), l.line_no, l.id, l.round));
    }
    corpus.record_round(l.id, l.round, std::move(l.caption), std::move(l.annotator), l.ts);
  }
}

void save_rounds(const Corpus& corpus, const std::filesystem::path& path) {
  std::vector<io::Json> rows;
  for (const auto& it : corpus.items()) {
    for (const auto& r : corpus.rounds(it.id)) {
      rows.push_back({{"id", r.item_id},
                      {"round", r.round_no},
                      {"caption", r.caption},
                      {"annotator", r.annotator},
                      {"ts", r.timestamp}});
    }
  }
  io::write_jsonl_atomic(path, rows);
}

RoundStats round_stats(const Corpus& corpus, int round_no, const EmbeddingMatrix* embeddings,
                       const TextEmbedder* text_embedder) {
  RoundStats st;
  st.round_no = round_no;
  double sum_len = 0.0;
  double sum_edit = 0.0;
  double sum_align = 0.0;
  std::size_t n_align = 0;
  const bool with_alignment = embeddings != nullptr && text_embedder != nullptr && *text_embedder;
  for (const auto& it : corpus.items()) {
    const auto r = corpus.round(it.id, round_no);
    if (!r) continue;
    ++st.item_count;
    sum_len += static_cast<double>(r->length_words);
    sum_edit += static_cast<double>(r->edit_distance_to_prev);
    if (with_alignment) {
      std::optional<std::span<const float>> image;
      if (it.embedding_row) {
        image = embeddings->row(*it.embedding_row);
      } else {
        image = embeddings->find(it.id);
      }
      if (image) {
        const auto text_vec = (*text_embedder)(r->caption);
        sum_align += metrics::clip_score(*image, text_vec);
        ++n_align;
      }
    }
  }
  if (st.item_count == 0) {
    throw Error(ErrorKind::kEmptyRound, fmt::format("no items have a record at round {}", round_no));
  }
  st.mean_length_words = sum_len / static_cast<double>(st.item_count);
  st.mean_edit_distance = sum_edit / static_cast<double>(st.item_count);
  if (n_align > 0) st.mean_alignment = sum_align / static_cast<double>(n_align);
  return st;
}

std::string_view caption_source_name(CaptionSource s) {
  return s == CaptionSource::kAlt ? "alt" : "synthetic";
}

void validate(const MixSpec& spec) {
  if (!(spec.p >= 0.0 && spec.p <= 1.0)) {
    throw Error(ErrorKind::kValidation,
                fmt::format("mixing ratio p = {} is outside the valid range [0, 1]", spec.p));
  }
}

std::vector<CaptionChoice> mix_sample(std::span<const MixCandidate> candidates, const MixSpec& spec) {
  validate(spec);
  Rng rng(spec.seed);
  std::vector<CaptionChoice> out;
  out.reserve(candidates.size());
  for (const auto& c : candidates) {
    const bool synthetic = rng.bernoulli(spec.p);
    out.push_back(CaptionChoice{std::string(c.id),
                                synthetic ? CaptionSource::kSynthetic : CaptionSource::kAlt,
                                std::string(synthetic ? c.synthetic : c.alt)});
  }
  return out;
}

std::vector<CaptionChoice> mix_sample(const Corpus& corpus, const MixSpec& spec,
                                      const SyntheticSource& synthetic) {
  validate(spec);
  std::vector<std::string> synth_text;
  synth_text.reserve(corpus.size());
  for (const auto& it : corpus.items()) {
    if (const int* round_no = std::get_if<int>(&synthetic)) {
      auto r = corpus.round(it.id, *round_no);
      if (!r) {
        throw Error(ErrorKind::kNotFound,
                    fmt::format("item '{}' has no synthetic caption at round {}", it.id, *round_no));
      }
      synth_text.push_back(std::move(r->caption));
    } else {
      const auto& map = std::get<std::unordered_map<std::string, std::string>>(synthetic);
      auto found = map.find(it.id);
      if (found == map.end()) {
        throw Error(ErrorKind::kNotFound, fmt::format("item '{}' has no synthetic caption", it.id));
      }
      synth_text.push_back(found->second);
    }
  }
  std::vector<MixCandidate> cands;
  cands.reserve(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& it = corpus.items()[i];
    cands.push_back({it.id, it.alt_text, synth_text[i]});
  }
  return mix_sample(cands, spec);
}

void export_training_set(std::span<const CaptionChoice> choices, const std::filesystem::path& path) {
  if (choices.empty()) {
    throw Error(ErrorKind::kValidation, "refusing to export an empty training set");
  }
  std::string out;
  for (const auto& c : choices) {
    out += io::Json{{"id", c.item_id}, {"text", c.chosen_text}, {"source", caption_source_name(c.chosen_source)}}
               .dump();
    out += '\n';
  }
  io::write_file_atomic(path, out);
}

std::vector<CaptionChoice> read_training_set(const std::filesystem::path& path) {
  std::vector<CaptionChoice> out;
  io::for_each_jsonl(path, [&](std::size_t line, const io::Json& j) {
    try {
      const auto src = io::require_string(j, "source");
      if (src != "alt" && src != "synthetic") {
        throw Error(ErrorKind::kParse, fmt::format("unknown caption source '{}'", src));
      }
      out.push_back({io::require_string(j, "id"),
                     src == "alt" ? CaptionSource::kAlt : CaptionSource::kSynthetic,
                     io::require_string(j, "text")});
    } catch (const Error& e) {
      throw Error(ErrorKind::kParse, fmt::format("{}:{}: {}", path.string(), line, e.what()));
    }
  });
  return out;
}

}  // namespace altogether::corpus
