#include "altogether/world.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

#include <fmt/format.h>

#include "altogether/error.hpp"
#include "altogether/rng.hpp"
#include "altogether/text.hpp"
#include "altogether/textproc.hpp"

namespace altogether::train {

namespace {

constexpr std::string_view kHypernyms[] = {"bird", "fish", "flower", "tree", "insect", "vehicle", "building", "fruit"};

std::vector<double> unit_gaussian(Rng& rng, int dim) {
  std::vector<double> v(static_cast<std::size_t>(dim));
  double sq = 0.0;
  for (auto& x : v) {
    x = rng.normal();
    sq += x * x;
  }
  const double inv = 1.0 / std::sqrt(sq);
  for (auto& x : v) x *= inv;
  return v;
}

void normalize(std::vector<double>& v) {
  double sq = 0.0;
  for (double x : v) sq += x * x;
  if (sq == 0.0) return;
  const double inv = 1.0 / std::sqrt(sq);
  for (auto& x : v) x *= inv;
}

// Pronounceable consonant-vowel names; they end in a vowel so plural folding
// and the lexicon's suffix rules never apply to them.
std::string make_name(Rng& rng) {
  static constexpr std::string_view kCons = "bdfgklmnprtvz";
  static constexpr std::string_view kVowels = "aeiou";
  const int syllables = 2 + static_cast<int>(rng.below(2));
  std::string s;
  for (int i = 0; i < syllables; ++i) {
    s += kCons[rng.below(kCons.size())];
    s += kVowels[rng.below(kVowels.size())];
  }
  return s;
}

}  // namespace

void WorldSpec::validate() const {
  auto fail = [](const std::string& msg) { throw Error(ErrorKind::kValidation, msg); };
  if (n_concepts < 2) fail(fmt::format("n_concepts must be >= 2 (got {})", n_concepts));
  if (!(rare_fraction > 0.0 && rare_fraction < 1.0)) {
    fail(fmt::format("rare_fraction must be in (0, 1) (got {})", rare_fraction));
  }
  if (concepts_per_image < 1 || concepts_per_image >= n_concepts) {
    fail(fmt::format("concepts_per_image must be in [1, n_concepts) (got {})", concepts_per_image));
  }
  if (!(distractor_rate >= 0.0 && distractor_rate <= 1.0)) {
    fail(fmt::format("distractor_rate must be in [0, 1] (got {})", distractor_rate));
  }
  if (!(mention_prob >= 0.0 && mention_prob <= 1.0)) {
    fail(fmt::format("mention_prob must be in [0, 1] (got {})", mention_prob));
  }
  if (embed_dim < 1) fail(fmt::format("embed_dim must be positive (got {})", embed_dim));
  if (!(noise >= 0.0) || !std::isfinite(noise)) fail("noise must be finite and >= 0");
  if (!(zipf_exponent >= 0.0) || !std::isfinite(zipf_exponent)) fail("zipf_exponent must be finite and >= 0");
}

io::Json to_json(const WorldSpec& s) {
  return {{"n_concepts", s.n_concepts},         {"rare_fraction", s.rare_fraction},
          {"concepts_per_image", s.concepts_per_image}, {"distractor_rate", s.distractor_rate},
          {"embed_dim", s.embed_dim},           {"seed", s.seed},
          {"mention_prob", s.mention_prob},     {"noise", s.noise},
          {"zipf_exponent", s.zipf_exponent}};
}

WorldSpec world_spec_from_json(const io::Json& j) {
  if (!j.is_object()) throw Error(ErrorKind::kParse, "world spec must be a JSON object");
  WorldSpec s;
  try {
    s.n_concepts = j.value("n_concepts", s.n_concepts);
    s.rare_fraction = j.value("rare_fraction", s.rare_fraction);
    s.concepts_per_image = j.value("concepts_per_image", s.concepts_per_image);
    s.distractor_rate = j.value("distractor_rate", s.distractor_rate);
    s.embed_dim = j.value("embed_dim", s.embed_dim);
    s.seed = j.value("seed", s.seed);
    s.mention_prob = j.value("mention_prob", s.mention_prob);
    s.noise = j.value("noise", s.noise);
    s.zipf_exponent = j.value("zipf_exponent", s.zipf_exponent);
  } catch (const io::Json::exception& e) {
    throw Error(ErrorKind::kParse, fmt::format("bad world spec: {}", e.what()));
  }
  s.validate();
  return s;
}

World::World(const WorldSpec& spec) : spec_(spec) {
  spec_.validate();
  const auto& lex = textproc::Lexicon::builtin();
  for (auto h : kHypernyms) hypernym_names_.emplace_back(h);

  Rng names_rng(mix_seed(spec_.seed, 1));
  std::unordered_set<std::string> used(hypernym_names_.begin(), hypernym_names_.end());
  for (std::string_view w : {"a", "photo", "of", "and"}) used.emplace(w);
  for (int i = 0; i < spec_.n_concepts; ++i) {
    std::string name;
    do {
      name = make_name(names_rng);
    } while (used.contains(name) || lex.known(name) || lex.tags(name) != std::vector<textproc::Pos>{textproc::Pos::kNoun});
    used.insert(name);
    concepts_.push_back(Concept{i, std::move(name), false, {}});
  }

  Rng rare_rng(mix_seed(spec_.seed, 2));
  std::vector<int> order(static_cast<std::size_t>(spec_.n_concepts));
  std::iota(order.begin(), order.end(), 0);
  rare_rng.shuffle(order);
  const auto n_rare = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(spec_.rare_fraction * spec_.n_concepts)), 1,
      static_cast<std::size_t>(spec_.n_concepts) - 1);
  for (std::size_t i = 0; i < n_rare; ++i) {
    auto& c = concepts_[static_cast<std::size_t>(order[i])];
    c.rare = true;
    c.hypernym = hypernym_names_[rare_rng.below(hypernym_names_.size())];
  }

  Rng vec_rng(mix_seed(spec_.seed, 3));
  for (int i = 0; i < spec_.n_concepts; ++i) vectors_.push_back(unit_gaussian(vec_rng, spec_.embed_dim));
  for (std::size_t h = 0; h < hypernym_names_.size(); ++h) hypernym_vectors_.push_back(unit_gaussian(vec_rng, spec_.embed_dim));
  null_vector_ = unit_gaussian(vec_rng, spec_.embed_dim);

  Rng zipf_rng(mix_seed(spec_.seed, 4));
  zipf_order_.resize(static_cast<std::size_t>(spec_.n_concepts));
  std::iota(zipf_order_.begin(), zipf_order_.end(), 0);
  zipf_rng.shuffle(zipf_order_);
  double acc = 0.0;
  for (int r = 0; r < spec_.n_concepts; ++r) {
    acc += 1.0 / std::pow(static_cast<double>(r + 1), spec_.zipf_exponent);
    zipf_cdf_.push_back(acc);
  }
  for (auto& v : zipf_cdf_) v /= acc;
}

// Text side only: a rare name embeds as its hypernym.
std::vector<double> World::concept_vector(int id) const {
  const auto& c = concepts_[static_cast<std::size_t>(id)];
  if (!c.rare) return vectors_[static_cast<std::size_t>(id)];
  const auto h = std::find(hypernym_names_.begin(), hypernym_names_.end(), c.hypernym) - hypernym_names_.begin();
  return hypernym_vectors_[static_cast<std::size_t>(h)];
}

std::string World::caption_for(const std::vector<int>& concepts, const std::vector<int>& alt_named) const {
  std::vector<int> sorted = concepts;
  std::sort(sorted.begin(), sorted.end());
  std::string out = "a photo of";
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    const auto& c = concepts_[static_cast<std::size_t>(sorted[i])];
    const bool named = std::find(alt_named.begin(), alt_named.end(), c.id) != alt_named.end();
    out += i == 0 ? " a " : " and a ";
    out += (!c.rare || named) ? c.name : c.hypernym;
  }
  return out;
}

WorldItem World::item(std::uint64_t index) const {
  Rng rng(mix_seed(spec_.seed, 5, index));
  WorldItem it;
  it.id = fmt::format("w{:07d}", index);
  while (it.concepts.size() < static_cast<std::size_t>(spec_.concepts_per_image)) {
    const double u = rng.uniform();
    const auto rank = static_cast<std::size_t>(std::upper_bound(zipf_cdf_.begin(), zipf_cdf_.end(), u) - zipf_cdf_.begin());
    const int id = zipf_order_[std::min(rank, zipf_order_.size() - 1)];
    if (std::find(it.concepts.begin(), it.concepts.end(), id) == it.concepts.end()) it.concepts.push_back(id);
  }
  std::sort(it.concepts.begin(), it.concepts.end());

  for (int id : it.concepts) {
    if (rng.bernoulli(spec_.mention_prob)) it.mentioned.push_back(id);
  }
  if (rng.bernoulli(spec_.distractor_rate)) {
    int id;
    do {
      id = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec_.n_concepts)));
    } while (std::find(it.concepts.begin(), it.concepts.end(), id) != it.concepts.end());
    it.distractors.push_back(id);
  }

  std::vector<int> alt_ids = it.mentioned;
  alt_ids.insert(alt_ids.end(), it.distractors.begin(), it.distractors.end());
  rng.shuffle(alt_ids);
  for (std::size_t i = 0; i < alt_ids.size(); ++i) {
    if (i) it.alt_text += ' ';
    it.alt_text += concepts_[static_cast<std::size_t>(alt_ids[i])].name;
  }
  it.caption = caption_for(it.concepts, it.mentioned);

  it.image.assign(static_cast<std::size_t>(spec_.embed_dim), 0.0);
  for (int id : it.concepts) {
    if (concepts_[static_cast<std::size_t>(id)].rare) continue;
    const auto& v = vectors_[static_cast<std::size_t>(id)];
    for (std::size_t k = 0; k < v.size(); ++k) it.image[k] += v[k];
  }
  for (auto& x : it.image) x += spec_.noise * rng.normal();
  normalize(it.image);
  return it;
}

std::vector<WorldItem> World::items(std::uint64_t first, std::size_t count) const {
  std::vector<WorldItem> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(item(first + i));
  return out;
}

std::vector<int> World::named_concepts(std::string_view text) const {
  std::vector<int> out;
  const auto lowered = text::to_lower_ascii(text);
  for (auto w : text::split_words(lowered)) {
    for (const auto& c : concepts_) {
      if (c.name == w) out.push_back(c.id);
    }
    for (std::size_t h = 0; h < hypernym_names_.size(); ++h) {
      if (hypernym_names_[h] == w) out.push_back(spec_.n_concepts + static_cast<int>(h));
    }
  }
  return out;
}

std::vector<float> World::embed_text(std::string_view text) const {
  std::vector<double> acc(static_cast<std::size_t>(spec_.embed_dim), 0.0);
  bool any = false;
  for (int id : named_concepts(text)) {
    const auto& v = id < spec_.n_concepts ? concept_vector(id)
                                          : hypernym_vectors_[static_cast<std::size_t>(id - spec_.n_concepts)];
    for (std::size_t k = 0; k < v.size(); ++k) acc[k] += v[k];
    any = true;
  }
  if (!any) acc = null_vector_;
  normalize(acc);
  if (std::all_of(acc.begin(), acc.end(), [](double x) { return x == 0.0; })) acc = null_vector_;
  return std::vector<float>(acc.begin(), acc.end());
}

corpus::TextEmbedder World::text_embedder() const {
  return [this](std::string_view t) { return embed_text(t); };
}

std::vector<std::string> World::vocabulary_texts() const {
  std::vector<std::string> out{"a photo of a and"};
  for (const auto& c : concepts_) out.push_back(c.name);
  for (const auto& h : hypernym_names_) out.push_back(h);
  return out;
}

}  // namespace altogether::train
