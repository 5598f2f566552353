#include <algorithm>
#include <array>

#include <fmt/format.h>

#include "altogether/error.hpp"
#include "altogether/io.hpp"
#include "altogether/text.hpp"
#include "altogether/textproc.hpp"

namespace altogether::textproc {

namespace {

struct Entry {
  std::string_view word;
  std::string_view tags;  // space-separated, most likely first
};

// Small closed-class inventory plus frequent caption vocabulary. Open-class
// words not listed here go through the suffix rules in Lexicon::tags.
constexpr Entry kBuiltin[] = {
    // determiners
    {"a", "DET"}, {"an", "DET"}, {"the", "DET"}, {"this", "DET PRON"}, {"that", "DET PRON"},
    {"these", "DET PRON"}, {"those", "DET PRON"}, {"some", "DET"}, {"any", "DET"},
    {"each", "DET"}, {"every", "DET"}, {"no", "DET"}, {"another", "DET"}, {"both", "DET"},
    {"all", "DET"}, {"several", "DET"}, {"many", "DET ADJ"}, {"few", "DET ADJ"},
    {"his", "DET PRON"}, {"her", "DET PRON"}, {"its", "DET"}, {"their", "DET"}, {"our", "DET"},
    {"my", "DET"}, {"your", "DET"}, {"one", "DET NOUN"}, {"two", "DET"}, {"three", "DET"},
    {"four", "DET"}, {"five", "DET"},
    // pronouns
    {"it", "PRON"}, {"he", "PRON"}, {"she", "PRON"}, {"they", "PRON"}, {"them", "PRON"},
    {"we", "PRON"}, {"i", "PRON"}, {"you", "PRON"}, {"him", "PRON"}, {"us", "PRON"},
    {"which", "PRON"}, {"who", "PRON"}, {"what", "PRON"}, {"there", "PRON"},
    {"something", "PRON"}, {"itself", "PRON"},
    // adpositions and connectives
    {"of", "ADP"}, {"in", "ADP"}, {"on", "ADP"}, {"at", "ADP"}, {"by", "ADP"}, {"with", "ADP"},
    {"from", "ADP"}, {"to", "ADP"}, {"into", "ADP"}, {"onto", "ADP"}, {"over", "ADP"},
    {"under", "ADP"}, {"above", "ADP"}, {"below", "ADP"}, {"behind", "ADP"}, {"near", "ADP"},
    {"beside", "ADP"}, {"between", "ADP"}, {"through", "ADP"}, {"across", "ADP"},
    {"against", "ADP"}, {"around", "ADP"}, {"along", "ADP"}, {"for", "ADP"}, {"as", "ADP"},
    {"like", "ADP VERB"}, {"about", "ADP"}, {"up", "ADP"}, {"down", "ADP"}, {"out", "ADP"},
    {"off", "ADP"}, {"inside", "ADP"}, {"outside", "ADP"}, {"within", "ADP"}, {"without", "ADP"},
    {"and", "OTHER"}, {"or", "OTHER"}, {"but", "OTHER"}, {"while", "OTHER"}, {"not", "OTHER"},
    {"also", "OTHER"}, {"very", "OTHER"}, {"too", "OTHER"}, {"then", "OTHER"}, {"here", "OTHER"},
    {"where", "OTHER"}, {"when", "OTHER"}, {"if", "OTHER"}, {"so", "OTHER"}, {"than", "OTHER"},
    {"slightly", "OTHER"}, {"partly", "OTHER"}, {"possibly", "OTHER"},
    // auxiliaries and common verbs
    {"is", "VERB"}, {"are", "VERB"}, {"was", "VERB"}, {"were", "VERB"}, {"be", "VERB"},
    {"been", "VERB"}, {"being", "VERB"}, {"has", "VERB"}, {"have", "VERB"}, {"had", "VERB"},
    {"do", "VERB"}, {"does", "VERB"}, {"can", "VERB NOUN"}, {"may", "VERB"}, {"might", "VERB"},
    {"will", "VERB"}, {"would", "VERB"}, {"could", "VERB"}, {"should", "VERB"},
    {"shows", "VERB"}, {"show", "VERB NOUN"}, {"depicts", "VERB"}, {"features", "VERB NOUN"},
    {"sits", "VERB"}, {"sit", "VERB"}, {"stands", "VERB"}, {"stand", "VERB NOUN"},
    {"holds", "VERB"}, {"hold", "VERB"}, {"wears", "VERB"}, {"looks", "VERB"}, {"look", "VERB"},
    {"appears", "VERB"}, {"seems", "VERB"}, {"contains", "VERB"}, {"lies", "VERB"},
    {"walks", "VERB"}, {"runs", "VERB"}, {"flies", "VERB"}, {"swims", "VERB"}, {"made", "VERB"},
    {"taken", "VERB"}, {"seen", "VERB"}, {"set", "VERB NOUN"}, {"visible", "ADJ"},
    // adjectives
    {"great", "ADJ"}, {"gray", "ADJ NOUN"}, {"grey", "ADJ NOUN"}, {"white", "ADJ NOUN"},
    {"black", "ADJ NOUN"}, {"red", "ADJ NOUN"}, {"green", "ADJ NOUN"}, {"blue", "ADJ NOUN"},
    {"yellow", "ADJ NOUN"}, {"orange", "ADJ NOUN"}, {"pink", "ADJ NOUN"}, {"purple", "ADJ NOUN"},
    {"brown", "ADJ NOUN"}, {"dark", "ADJ"}, {"light", "ADJ NOUN"}, {"pale", "ADJ"},
    {"bright", "ADJ"}, {"large", "ADJ"}, {"small", "ADJ"}, {"big", "ADJ"}, {"little", "ADJ"},
    {"tall", "ADJ"}, {"short", "ADJ"}, {"long", "ADJ"}, {"wide", "ADJ"}, {"old", "ADJ"},
    {"new", "ADJ"}, {"young", "ADJ"}, {"wooden", "ADJ"}, {"metal", "NOUN ADJ"},
    {"sandy", "ADJ"}, {"rocky", "ADJ"}, {"grassy", "ADJ"}, {"spiral", "ADJ NOUN"},
    {"round", "ADJ"}, {"flat", "ADJ"}, {"thick", "ADJ"}, {"thin", "ADJ"}, {"soft", "ADJ"},
    {"high", "ADJ"}, {"low", "ADJ"}, {"deep", "ADJ"}, {"close-up", "ADJ"}, {"blurry", "ADJ"},
    {"cropped", "ADJ"}, {"vintage", "ADJ"}, {"gilded", "ADJ"}, {"juvenile", "ADJ"},
    {"male", "ADJ NOUN"}, {"female", "ADJ NOUN"}, {"empty", "ADJ"}, {"full", "ADJ"},
    {"open", "ADJ VERB"}, {"closed", "ADJ"}, {"wet", "ADJ"}, {"dry", "ADJ"}, {"clear", "ADJ"},
    {"cloudy", "ADJ"}, {"sunny", "ADJ"}, {"snowy", "ADJ"}, {"busy", "ADJ"}, {"quiet", "ADJ"},
    {"various", "ADJ"}, {"other", "ADJ"}, {"same", "ADJ"}, {"different", "ADJ"},
    {"single", "ADJ"}, {"double", "ADJ"}, {"modern", "ADJ"}, {"ancient", "ADJ"},
    {"chinese", "ADJ NOUN"}, {"french", "ADJ NOUN"}, {"american", "ADJ NOUN"},
    // nouns
    {"photo", "NOUN"}, {"photograph", "NOUN"}, {"image", "NOUN"}, {"picture", "NOUN"},
    {"painting", "NOUN"}, {"drawing", "NOUN"}, {"rendering", "NOUN"}, {"sculpture", "NOUN"},
    {"cartoon", "NOUN"}, {"illustration", "NOUN"}, {"background", "NOUN"},
    {"foreground", "NOUN"}, {"scene", "NOUN"}, {"view", "NOUN"}, {"text", "NOUN"},
    {"dog", "NOUN"}, {"cat", "NOUN"}, {"bird", "NOUN"}, {"owl", "NOUN"}, {"fish", "NOUN"},
    {"horse", "NOUN"}, {"cow", "NOUN"}, {"sheep", "NOUN"}, {"animal", "NOUN"},
    {"insect", "NOUN"}, {"lizard", "NOUN"}, {"iguana", "NOUN"}, {"monkey", "NOUN"},
    {"mushroom", "NOUN"}, {"shell", "NOUN"}, {"seashell", "NOUN"}, {"conch", "NOUN"},
    {"flower", "NOUN"}, {"tree", "NOUN"}, {"plant", "NOUN"}, {"leaf", "NOUN"},
    {"leaves", "NOUN"}, {"branch", "NOUN"}, {"grass", "NOUN"}, {"fruit", "NOUN"},
    {"food", "NOUN"}, {"vehicle", "NOUN"}, {"car", "NOUN"}, {"truck", "NOUN"}, {"boat", "NOUN"},
    {"ship", "NOUN"}, {"bike", "NOUN"}, {"bicycle", "NOUN"}, {"train", "NOUN"},
    {"plane", "NOUN"}, {"building", "NOUN"}, {"house", "NOUN"}, {"bridge", "NOUN"},
    {"tower", "NOUN"}, {"church", "NOUN"}, {"tool", "NOUN"}, {"table", "NOUN"},
    {"chair", "NOUN"}, {"bed", "NOUN"}, {"window", "NOUN"}, {"door", "NOUN"}, {"wall", "NOUN"},
    {"floor", "NOUN"}, {"roof", "NOUN"}, {"sky", "NOUN"}, {"cloud", "NOUN"}, {"sun", "NOUN"},
    {"water", "NOUN"}, {"sea", "NOUN"}, {"ocean", "NOUN"}, {"lake", "NOUN"}, {"river", "NOUN"},
    {"beach", "NOUN"}, {"sand", "NOUN"}, {"rock", "NOUN"}, {"stone", "NOUN"},
    {"mountain", "NOUN"}, {"hill", "NOUN"}, {"field", "NOUN"}, {"forest", "NOUN"},
    {"park", "NOUN VERB"}, {"garden", "NOUN"}, {"street", "NOUN"}, {"road", "NOUN"},
    {"city", "NOUN"}, {"town", "NOUN"}, {"museum", "NOUN"}, {"statue", "NOUN"},
    {"pedestal", "NOUN"}, {"figure", "NOUN"}, {"man", "NOUN"}, {"woman", "NOUN"},
    {"person", "NOUN"}, {"people", "NOUN"}, {"child", "NOUN"}, {"boy", "NOUN"}, {"girl", "NOUN"},
    {"group", "NOUN"}, {"shirt", "NOUN"}, {"t-shirt", "NOUN"}, {"hat", "NOUN"}, {"bag", "NOUN"},
    {"box", "NOUN"}, {"bottle", "NOUN"}, {"cup", "NOUN"}, {"plate", "NOUN"}, {"bowl", "NOUN"},
    {"book", "NOUN"}, {"sign", "NOUN"}, {"logo", "NOUN"}, {"graph", "NOUN"}, {"circle", "NOUN"},
    {"shape", "NOUN"}, {"pattern", "NOUN"}, {"color", "NOUN"}, {"colour", "NOUN"},
    {"fence", "NOUN"}, {"pole", "NOUN"}, {"bill", "NOUN"}, {"eye", "NOUN"}, {"leg", "NOUN"},
    {"wing", "NOUN"}, {"tail", "NOUN"}, {"head", "NOUN"}, {"face", "NOUN"}, {"hand", "NOUN"},
    {"side", "NOUN"}, {"top", "NOUN ADJ"}, {"bottom", "NOUN ADJ"}, {"front", "NOUN ADJ"},
    {"back", "NOUN ADJ"}, {"left", "NOUN ADJ"}, {"right", "NOUN ADJ"}, {"middle", "NOUN ADJ"},
    {"center", "NOUN"}, {"corner", "NOUN"}, {"edge", "NOUN"}, {"surface", "NOUN"},
    {"area", "NOUN"}, {"part", "NOUN"}, {"piece", "NOUN"}, {"species", "NOUN"},
    {"genus", "NOUN"}, {"type", "NOUN"}, {"kind", "NOUN"}, {"glass", "NOUN"}, {"day", "NOUN"},
    {"night", "NOUN"}, {"snow", "NOUN"}, {"ice", "NOUN"}, {"fire", "NOUN"},
};

std::vector<Pos> parse_tags(std::string_view tags) {
  std::vector<Pos> out;
  for (auto t : text::split_words(tags)) out.push_back(parse_pos(t));
  return out;
}

bool ends_with(std::string_view w, std::string_view suffix, std::size_t min_stem) {
  return w.size() >= suffix.size() + min_stem && w.ends_with(suffix);
}

bool is_numeric(std::string_view w) {
  bool digit = false;
  for (char c : w) {
    if (c >= '0' && c <= '9') {
      digit = true;
    } else if (c != '.' && c != ',' && c != '-' && c != '/') {
      return false;
    }
  }
  return digit;
}

std::vector<Pos> suffix_tags(std::string_view w) {
  if (is_numeric(w)) return {Pos::kOther};
  if (ends_with(w, "ing", 3) || ends_with(w, "ed", 3)) return {Pos::kVerb, Pos::kAdj};
  if (ends_with(w, "ly", 3)) return {Pos::kOther};
  for (std::string_view s : {"ous", "ful", "ive", "able", "ible", "less", "ish", "ical", "ular"}) {
    if (ends_with(w, s, 3)) return {Pos::kAdj};
  }
  return {Pos::kNoun};
}

}  // namespace

std::string_view pos_name(Pos p) {
  switch (p) {
    case Pos::kDet: return "DET";
    case Pos::kAdj: return "ADJ";
    case Pos::kNoun: return "NOUN";
    case Pos::kVerb: return "VERB";
    case Pos::kAdp: return "ADP";
    case Pos::kPron: return "PRON";
    case Pos::kOther: return "OTHER";
  }
  return "OTHER";
}

Pos parse_pos(std::string_view s) {
  if (s == "DET") return Pos::kDet;
  if (s == "ADJ") return Pos::kAdj;
  if (s == "NOUN") return Pos::kNoun;
  if (s == "VERB") return Pos::kVerb;
  if (s == "ADP") return Pos::kAdp;
  if (s == "PRON") return Pos::kPron;
  if (s == "OTHER") return Pos::kOther;
  throw Error(ErrorKind::kParse, fmt::format("unknown POS tag '{}'", s));
}

const Lexicon& Lexicon::builtin() {
  static const Lexicon lex = [] {
    Lexicon l;
    for (const auto& e : kBuiltin) l.add(std::string(e.word), parse_tags(e.tags));
    return l;
  }();
  return lex;
}

void Lexicon::add(std::string word, std::vector<Pos> tags) {
  if (tags.empty()) {
    throw Error(ErrorKind::kValidation, fmt::format("lexicon entry '{}' has no tags", word));
  }
  entries_[text::to_lower_ascii(word)] = std::move(tags);
}

std::vector<Pos> Lexicon::tags(std::string_view word) const {
  const auto lw = text::to_lower_ascii(word);
  if (auto it = entries_.find(lw); it != entries_.end()) return it->second;
  return suffix_tags(lw);
}

bool Lexicon::known(std::string_view word) const {
  return entries_.contains(text::to_lower_ascii(word));
}

bool Lexicon::has_tag(std::string_view word, Pos p) const {
  auto it = entries_.find(text::to_lower_ascii(word));
  return it != entries_.end() && std::find(it->second.begin(), it->second.end(), p) != it->second.end();
}

Lexicon Lexicon::load(const std::filesystem::path& path) {
  Lexicon l = builtin();
  io::for_each_jsonl(path, [&](std::size_t line, const io::Json& j) {
    try {
      const auto word = io::require_string(j, "word");
      auto tags_it = j.find("tags");
      if (tags_it == j.end() || !tags_it->is_array()) {
        throw Error(ErrorKind::kParse, "field 'tags' missing or not an array");
      }
      std::vector<Pos> tags;
      for (const auto& t : *tags_it) {
        if (!t.is_string()) throw Error(ErrorKind::kParse, "tag is not a string");
        tags.push_back(parse_pos(t.get<std::string>()));
      }
      l.add(word, std::move(tags));
    } catch (const Error& e) {
      throw Error(ErrorKind::kParse, fmt::format("{}:{}: {}", path.string(), line, e.what()));
    }
  });
  return l;
}

void Lexicon::save(const std::filesystem::path& path) const {
  std::vector<std::string> words;
  words.reserve(entries_.size());
  for (const auto& [w, _] : entries_) words.push_back(w);
  std::sort(words.begin(), words.end());
  std::vector<io::Json> rows;
  for (const auto& w : words) {
    io::Json tags = io::Json::array();
    for (Pos p : entries_.at(w)) tags.push_back(pos_name(p));
    rows.push_back({{"word", w}, {"tags", tags}});
  }
  io::write_jsonl_atomic(path, rows);
}

// --- noun phrase chunking ----------------------------------------------------

namespace {

struct Tagged {
  std::string word;  // lowercased; empty marks a chunk break (punctuation)
  Pos pos = Pos::kOther;
};

bool is_break_char(char c) {
  switch (c) {
    case ',': case '.': case ';': case ':': case '!': case '?': case '(': case ')':
    case '[': case ']': case '{': case '}': case '"': case '/': case '|': case '&':
      return true;
    default:
      return false;
  }
}

std::vector<std::string> split_tokens(std::string_view s) {
  std::vector<std::string> out;
  for (auto w : text::split_words(s)) {
    std::string cur;
    for (char c : w) {
      if (is_break_char(c)) {
        if (!cur.empty()) out.push_back(std::move(cur));
        cur.clear();
        out.emplace_back();  // break marker
      } else {
        cur.push_back(c);
      }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
  }
  // Trim quotes/apostrophes at token edges ("'owl'" -> "owl").
  for (auto& t : out) {
    while (!t.empty() && (t.front() == '\'' || t.front() == '`')) t.erase(t.begin());
    while (!t.empty() && (t.back() == '\'' || t.back() == '`')) t.pop_back();
  }
  return out;
}

Pos choose_tag(const std::vector<Pos>& cands, Pos prev) {
  if (prev == Pos::kDet || prev == Pos::kAdj) {
    for (Pos p : cands) {
      if (p == Pos::kNoun || p == Pos::kAdj) return p;
    }
  }
  return cands.front();
}

std::string fold_plural(const std::string& w, const Lexicon& lex) {
  if (w.size() > 2 && w.back() == 's') {
    std::string stem = w.substr(0, w.size() - 1);
    if (lex.has_tag(stem, Pos::kNoun)) return stem;
  }
  return w;
}

}  // namespace

std::set<NounPhrase> noun_phrases(std::string_view s, const Lexicon& lexicon) {
  std::vector<Tagged> toks;
  Pos prev = Pos::kOther;
  for (auto& raw : split_tokens(s)) {
    Tagged t;
    t.word = text::to_lower_ascii(raw);
    if (t.word.empty()) {
      t.pos = Pos::kOther;
      prev = Pos::kOther;
      toks.push_back(std::move(t));
      continue;
    }
    t.pos = choose_tag(lexicon.tags(t.word), prev);
    prev = t.pos;
    toks.push_back(std::move(t));
  }

  std::set<NounPhrase> out;
  std::size_t i = 0;
  while (i < toks.size()) {
    std::size_t j = i;
    if (toks[j].pos == Pos::kDet && !toks[j].word.empty()) ++j;
    const std::size_t body = j;
    std::size_t last_noun = SIZE_MAX;
    while (j < toks.size() && !toks[j].word.empty() &&
           (toks[j].pos == Pos::kAdj || toks[j].pos == Pos::kNoun)) {
      if (toks[j].pos == Pos::kNoun) last_noun = j;
      ++j;
    }
    if (last_noun != SIZE_MAX) {
      std::string phrase;
      for (std::size_t k = body; k <= last_noun; ++k) {
        if (!phrase.empty()) phrase.push_back(' ');
        phrase += toks[k].pos == Pos::kNoun ? fold_plural(toks[k].word, lexicon) : toks[k].word;
      }
      out.insert(std::move(phrase));
    }
    i = j > i ? j : i + 1;
  }
  return out;
}

}  // namespace altogether::textproc
