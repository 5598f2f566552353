#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "altogether/embeddings.hpp"
#include "altogether/io.hpp"

namespace altogether::train {

// A synthetic universe of named concepts. Images are concept sets; common
// concepts are visible in the image embedding, rare ones not at all.
// Alt-texts name a random subset of the true concepts plus occasional
// distractors, so a captioner can only name rare concepts by reading the
// alt-text.
struct WorldSpec {
  int n_concepts = 120;
  double rare_fraction = 0.3;
  int concepts_per_image = 3;
  double distractor_rate = 0.2;
  int embed_dim = 64;
  std::uint64_t seed = 0;
  double mention_prob = 0.8;  // chance each true concept is named in the alt-text
  double noise = 0.05;        // std of the per-image embedding noise (per component, before normalizing)
  double zipf_exponent = 0.8;

  void validate() const;  // throws kValidation
};

io::Json to_json(const WorldSpec& spec);
WorldSpec world_spec_from_json(const io::Json& j);  // missing keys keep their defaults

struct Concept {
  int id = 0;
  std::string name;
  bool rare = false;
  std::string hypernym;  // empty for common concepts
};

struct WorldItem {
  std::string id;
  std::vector<int> concepts;     // true concepts, ascending
  std::vector<int> mentioned;    // true concepts named in the alt-text
  std::vector<int> distractors;  // absent concepts named in the alt-text
  std::string alt_text;
  std::string caption;           // canonical target caption
  std::vector<double> image;     // F(i), unit norm
};

class World {
 public:
  explicit World(const WorldSpec& spec);

  const WorldSpec& spec() const { return spec_; }
  const std::vector<Concept>& concepts() const { return concepts_; }
  const std::vector<std::string>& hypernyms() const { return hypernym_names_; }

  // Items are a pure function of (seed, index), so disjoint index ranges give
  // disjoint train / held-out splits.
  WorldItem item(std::uint64_t index) const;
  std::vector<WorldItem> items(std::uint64_t first, std::size_t count) const;

  // Canonical caption for a concept set: "a photo of a X and a Y", concepts
  // in id order, rare ones named only when `alt_names` contains them.
  std::string caption_for(const std::vector<int>& concepts, const std::vector<int>& alt_named) const;

  // Bag-of-concepts text embedding in the image space (unit norm). Texts that
  // name nothing map to a fixed "null" direction.
  std::vector<float> embed_text(std::string_view text) const;
  corpus::TextEmbedder text_embedder() const;

  // Every word a caption or alt-text can contain, for vocabulary building.
  std::vector<std::string> vocabulary_texts() const;

  // Concept ids (or hypernym indices offset by n_concepts) named in `text`.
  std::vector<int> named_concepts(std::string_view text) const;

 private:
  std::vector<double> concept_vector(int id) const;

  WorldSpec spec_;
  std::vector<Concept> concepts_;
  std::vector<std::string> hypernym_names_;
  std::vector<std::vector<double>> vectors_;           // per concept
  std::vector<std::vector<double>> hypernym_vectors_;  // per hypernym
  std::vector<double> null_vector_;
  std::vector<double> zipf_cdf_;
  std::vector<int> zipf_order_;  // popularity rank -> concept id
};

}  // namespace altogether::train
