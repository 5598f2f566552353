#include <cmath>
#include <cstring>
#include <set>

#include "altogether/io.hpp"
#include "altogether/model.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace altogether;
using namespace altogether::model;
using textproc::kBos;
using textproc::kEmptyAlt;
using textproc::kEos;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_decoder_layers = 2;
  c.n_mapping_layers = 1;
  c.vocab_size = 64;
  c.image_embed_dim = 8;
  c.n_visual = 4;
  c.m_alt = 8;
  c.max_gen = 16;
  return c;
}

std::vector<double> random_image(Rng& rng, int dim) {
  std::vector<double> v(static_cast<std::size_t>(dim));
  for (auto& x : v) x = rng.normal();
  return v;
}

std::vector<TokenId> random_ids(Rng& rng, std::size_t n, int vocab) {
  std::vector<TokenId> ids(n);
  for (auto& id : ids) id = static_cast<TokenId>(4 + rng.below(static_cast<std::uint64_t>(vocab - 4)));
  return ids;
}

SequenceBatch random_batch(Rng& rng, const ModelConfig& cfg, std::size_t n) {
  SequenceBatch b;
  for (std::size_t i = 0; i < n; ++i) {
    b.images.push_back(random_image(rng, cfg.image_embed_dim));
    const auto alt = random_ids(rng, rng.below(static_cast<std::uint64_t>(cfg.m_alt) + 1), cfg.vocab_size);
    const auto cap = random_ids(rng, 1 + rng.below(static_cast<std::uint64_t>(cfg.max_gen) - 2), cfg.vocab_size);
    b.rows.push_back(layout_sequence(alt, cap, cfg));
  }
  return b;
}

// Parameters with non-trivial LN gains/biases so every gradient path is exercised.
ModelParams jittered(const ModelConfig& cfg, std::uint64_t seed) {
  auto p = init_model(cfg, seed);
  Rng rng(seed ^ 0xABCDu);
  for (auto& v : p.values) v += 0.05 * rng.normal();
  return p;
}

}  // namespace

TEST_CASE("config validation and parameter count") {
  ModelConfig bad = tiny();
  bad.d_model = 6;
  bad.n_heads = 4;
  CHECK(test::error_kind_of([&] { init_model(bad, 1); }) == ErrorKind::kConfig);
  bad = tiny();
  bad.n_visual = 0;
  CHECK(test::error_kind_of([&] { bad.validate(); }) == ErrorKind::kConfig);

  const auto c = tiny();
  const std::size_t d = 16, V = 64, T = 4 + 8 + 16, E = 8, nv = 4;
  const std::size_t block = 12 * d * d + 13 * d;
  const std::size_t expected = V * d + T * d + E * d + d + nv * d + 3 * block + 2 * d + d * V + V;
  CHECK(parameter_count(c) == expected);
  const auto p = init_model(c, 1);
  CHECK(p.count() == expected);
  const auto layout = parameter_layout(c);
  CHECK(layout.front().name == "tok_emb");
  CHECK(layout.back().name == "head_b");
  CHECK(p.tensor("dec.block1.attn.qkv_w").cols == 3 * d);
  CHECK(test::error_kind_of([&] { (void)p.tensor("nope"); }) == ErrorKind::kNotFound);
}

TEST_CASE("init is deterministic") {
  CHECK(init_model(tiny(), 5) == init_model(tiny(), 5));
  CHECK_FALSE(init_model(tiny(), 5) == init_model(tiny(), 6));
  const auto p = init_model(tiny(), 5);
  for (double g : p.view("lnf.g")) CHECK(g == 1.0);
  for (double b : p.view("head_b")) CHECK(b == 0.0);
}

TEST_CASE("default layout") {
  const ModelConfig cfg;
  CHECK(cfg.total_len() == 424);
  Rng rng(1);
  const auto row = layout_sequence(random_ids(rng, 5, 500), random_ids(rng, 10, 500), cfg);
  CHECK(row.ids.size() == 424);
  CHECK(row.mask_count() == 11);
  CHECK(row.ids[40 + 128] == kBos);
  CHECK(row.ids[40 + 128 + 11] == kEos);
  CHECK(row.targets[40 + 128 + 10] == kEos);
  // Role runs appear in order VISUAL, ALT, CAPTION with PAD gaps only after ALT/CAPTION content.
  for (std::size_t j = 0; j < 40; ++j) CHECK(row.roles[j] == Role::kVisual);
  for (std::size_t j = 0; j < row.roles.size(); ++j) {
    if (row.loss_mask[j]) CHECK(row.roles[j] == Role::kCaption);
  }

  const auto empty_cap = layout_sequence(random_ids(rng, 3, 500), {}, cfg);
  CHECK(empty_cap.mask_count() == 1);
  CHECK(empty_cap.targets[168] == kEos);

  const auto empty_alt = layout_sequence({}, random_ids(rng, 3, 500), cfg);
  CHECK(empty_alt.ids[40] == kEmptyAlt);
  CHECK(empty_alt.roles[41] == Role::kPad);

  const auto long_alt = random_ids(rng, 200, 500);
  const auto trunc = layout_sequence(long_alt, random_ids(rng, 3, 500), cfg);
  CHECK(trunc.alt_truncated);
  CHECK(trunc.ids[40 + 127] == long_alt[127]);

  const auto long_cap = layout_sequence({}, random_ids(rng, 300, 500), cfg);
  CHECK(long_cap.caption_truncated);
  CHECK(long_cap.mask_count() == 256);
  CHECK(long_cap.targets[423] == kEos);
}

TEST_CASE("map_embedding") {
  ModelConfig cfg;  // default 40 visual tokens
  cfg.vocab_size = 300;
  const auto p = init_model(cfg, 3);
  Rng rng(2);
  const auto a = random_image(rng, cfg.image_embed_dim);
  const auto b = random_image(rng, cfg.image_embed_dim);
  const auto va = map_embedding(p, a);
  CHECK(va.size() == static_cast<std::size_t>(40 * cfg.d_model));
  CHECK(va == map_embedding(p, a));
  CHECK(va != map_embedding(p, b));
  std::vector<double> wrong(3, 0.0);
  CHECK(test::error_kind_of([&] { map_embedding(p, wrong); }) == ErrorKind::kShape);
  auto nan = a;
  nan[0] = std::nan("");
  CHECK(test::error_kind_of([&] { map_embedding(p, nan); }) == ErrorKind::kDomain);
}

TEST_CASE("analytic cross-entropy values") {
  auto cfg = tiny();
  auto p = init_model(cfg, 9);
  Rng rng(4);
  const std::vector<TokenId> cap{7, 8, 9};
  SequenceBatch b;
  b.images.push_back(random_image(rng, cfg.image_embed_dim));
  b.rows.push_back(layout_sequence(random_ids(rng, 3, cfg.vocab_size), cap, cfg));

  SUBCASE("zero head gives ln V everywhere") {
    for (auto& v : p.view("head_w")) v = 0.0;
    for (auto& v : p.view("head_b")) v = 0.0;
    const auto r = forward_loss(p, b);
    CHECK(r.mean_loss == doctest::Approx(std::log(64.0)).epsilon(1e-14));
    for (std::size_t j = 0; j < r.per_position[0].size(); ++j) {
      if (b.rows[0].loss_mask[j]) CHECK(r.per_position[0][j] == doctest::Approx(std::log(64.0)).epsilon(1e-14));
    }
  }
  SUBCASE("two live logits (1, -1), target 0") {
    // Every other logit is pushed so low that exp underflows to exactly 0.
    for (auto& v : p.view("head_w")) v = 0.0;
    auto hb = p.view("head_b");
    for (auto& v : hb) v = -2000.0;
    hb[7] = 1.0;
    hb[8] = -1.0;
    SequenceBatch one = b;
    one.rows[0] = layout_sequence(std::vector<TokenId>{9}, std::vector<TokenId>{7}, cfg);
    // Keep only the BOS -> 7 prediction in the mask.
    one.rows[0].loss_mask[static_cast<std::size_t>(cfg.n_visual + cfg.m_alt + 1)] = 0;
    const auto r = forward_loss(p, one);
    CHECK(r.masked_positions == 1);
    CHECK(r.mean_loss == doctest::Approx(std::log1p(std::exp(-2.0))).epsilon(1e-14));
  }
}

TEST_CASE("loss mask contract") {
  const auto cfg = tiny();
  const auto p = jittered(cfg, 21);
  Rng rng(6);
  auto batch = random_batch(rng, cfg, 3);
  const auto base = forward_loss(p, batch);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    for (std::size_t j = 0; j < batch.rows[b].roles.size(); ++j) {
      if (!batch.rows[b].loss_mask[j]) CHECK(base.per_position[b][j] == 0.0);
    }
  }
  auto relabeled = batch;
  for (auto& row : relabeled.rows) {
    for (std::size_t j = 0; j < row.roles.size(); ++j) {
      if (row.roles[j] != Role::kCaption) row.targets[j] = static_cast<TokenId>(rng.below(64));
      if (row.roles[j] == Role::kPad) row.ids[j] = static_cast<TokenId>(rng.below(64));
    }
  }
  const auto after = forward_loss(p, relabeled);
  CHECK(std::memcmp(&after.mean_loss, &base.mean_loss, sizeof(double)) == 0);
  CHECK(after.per_position == base.per_position);

  SequenceBatch none = batch;
  for (auto& row : none.rows) std::fill(row.loss_mask.begin(), row.loss_mask.end(), 0);
  CHECK(test::error_kind_of([&] { forward_loss(p, none); }) == ErrorKind::kDegenerate);
}

TEST_CASE("causality") {
  const auto cfg = tiny();
  const auto p = jittered(cfg, 22);
  Rng rng(7);
  const auto image = random_image(rng, cfg.image_embed_dim);
  const auto alt = random_ids(rng, 5, cfg.vocab_size);
  const auto cap = random_ids(rng, 10, cfg.vocab_size);
  SequenceBatch a;
  a.images.push_back(image);
  a.rows.push_back(layout_sequence(alt, cap, cfg));
  const auto base = forward_loss(p, a).per_position[0];
  const std::size_t cap0 = static_cast<std::size_t>(cfg.n_visual + cfg.m_alt);
  for (std::size_t k = 3; k < cap.size(); ++k) {
    // Change the input token at caption position k+1 (caption token k).
    auto changed = cap;
    changed[k] = static_cast<TokenId>(4 + (changed[k] + 1 - 4) % 60);
    SequenceBatch b = a;
    b.rows[0] = layout_sequence(alt, changed, cfg);
    const auto loss = forward_loss(p, b).per_position[0];
    // Positions before the change see identical inputs; their targets are
    // unchanged except the one predicting token k.
    for (std::size_t j = cap0; j < cap0 + k; ++j) CHECK(loss[j] == base[j]);
  }
}

TEST_CASE("gradients match central differences") {
  const auto cfg = tiny();
  auto p = jittered(cfg, 23);
  Rng rng(8);
  const auto batch = random_batch(rng, cfg, 2);
  ParamVector grad;
  const double loss = forward_backward(p, batch, grad);
  CHECK(loss == doctest::Approx(forward_loss(p, batch).mean_loss).epsilon(1e-12));
  const double eps = 1e-3;
  double max_rel = 0.0;
  for (int k = 0; k < 400; ++k) {
    const std::size_t i = rng.below(p.values.size());
    const double orig = p.values[i];
    p.values[i] = orig + eps;
    const double lp = forward_loss(p, batch).mean_loss;
    p.values[i] = orig - eps;
    const double lm = forward_loss(p, batch).mean_loss;
    p.values[i] = orig;
    const double fd = (lp - lm) / (2 * eps);
    const double rel = std::abs(fd - grad[i]) / std::max({std::abs(fd), std::abs(grad[i]), 1e-6});
    max_rel = std::max(max_rel, rel);
  }
  CHECK(max_rel < 1e-4);
}

TEST_CASE("incremental decoder matches the batch forward pass") {
  const auto cfg = tiny();
  const auto p = jittered(cfg, 24);
  Rng rng(9);
  const auto image = random_image(rng, cfg.image_embed_dim);
  for (std::size_t n_alt : {std::size_t{0}, std::size_t{3}, std::size_t{8}}) {
    const auto alt = random_ids(rng, n_alt, cfg.vocab_size);
    const auto cap = random_ids(rng, 6, cfg.vocab_size);
    SequenceBatch b;
    b.images.push_back(image);
    b.rows.push_back(layout_sequence(alt, cap, cfg));
    const auto losses = forward_loss(p, b).per_position[0];
    const auto logits = prefix_logits(p, image, alt, cap);
    REQUIRE(logits.size() == cap.size() + 1);
    const std::size_t cap0 = static_cast<std::size_t>(cfg.n_visual + cfg.m_alt);
    for (std::size_t i = 0; i < logits.size(); ++i) {
      const auto& z = logits[i];
      const double mx = *std::max_element(z.begin(), z.end());
      double s = 0.0;
      for (double v : z) s += std::exp(v - mx);
      const TokenId target = i < cap.size() ? cap[i] : kEos;
      const double ce = mx + std::log(s) - z[static_cast<std::size_t>(target)];
      CHECK(ce == doctest::Approx(losses[cap0 + i]).epsilon(1e-10));
    }
  }
}

TEST_CASE("nucleus filtering and sampling") {
  const std::vector<double> probs{0.5, 0.3, 0.2};
  const auto f = nucleus_filter(probs, 0.7);
  CHECK(f[0] == doctest::Approx(0.625));
  CHECK(f[1] == doctest::Approx(0.375));
  CHECK(f[2] == 0.0);
  CHECK(nucleus_filter(probs, 1.0)[2] == doctest::Approx(0.2));
  CHECK(test::error_kind_of([&] { nucleus_filter(probs, 0.0); }) == ErrorKind::kValidation);

  const std::vector<double> logits{std::log(0.5), std::log(0.3), std::log(0.2)};
  Rng rng(10);
  std::array<int, 3> seen{};
  for (int i = 0; i < 5000; ++i) ++seen[static_cast<std::size_t>(sample_token(logits, 1.0, 0.7, rng))];
  CHECK(seen[2] == 0);
  CHECK(seen[0] > 2800);
  CHECK(seen[1] > 1500);
  CHECK(sample_token(logits, 0.0, 0.7, rng) == 0);
}

TEST_CASE("generation") {
  const auto cfg = tiny();
  const auto p = jittered(cfg, 25);
  Rng rng(11);
  const auto image = random_image(rng, cfg.image_embed_dim);
  const auto alt = random_ids(rng, 4, cfg.vocab_size);
  DecodeConfig greedy;
  greedy.temperature = 0.0;
  greedy.max_tokens = 16;
  const auto g1 = generate(p, image, alt, greedy);
  CHECK(g1 == generate(p, image, alt, greedy));
  CHECK(g1.size() <= 16);
  for (TokenId t : g1) {
    CHECK(t != textproc::kPad);
    CHECK(t != kBos);
    CHECK(t != kEmptyAlt);
    CHECK(t != kEos);
  }

  DecodeConfig one = greedy;
  one.max_tokens = 1;
  one.stop_at_eos = false;
  CHECK(generate(p, image, alt, one).size() == 1);

  DecodeConfig sampled;
  sampled.seed = 3;
  sampled.max_tokens = 16;
  CHECK(generate(p, image, alt, sampled) == generate(p, image, alt, sampled));

  DecodeConfig all = greedy;
  all.stop_at_eos = false;
  CHECK(generate(p, image, alt, all).size() == 16);
  CHECK(generate(p, image, {}, all).size() == 16);

  DecodeConfig bad;
  bad.top_p = 0.0;
  CHECK(test::error_kind_of([&] { generate(p, image, alt, bad); }) == ErrorKind::kValidation);
  bad = DecodeConfig{};
  bad.temperature = -1.0;
  CHECK(test::error_kind_of([&] { generate(p, image, alt, bad); }) == ErrorKind::kValidation);
  const std::vector<TokenId> oov{999};
  CHECK(test::error_kind_of([&] { generate(p, image, oov, greedy); }) == ErrorKind::kRange);
}

TEST_CASE("model files") {
  test::TempDir dir;
  const auto cfg = tiny();
  const auto p = jittered(cfg, 26);
  save_model(p, dir / "m.bin");
  CHECK(load_model(dir / "m.bin") == p);
  CHECK(load_model(dir / "m.bin", &cfg) == p);

  auto other = cfg;
  other.vocab_size = 80;
  const auto msg = test::error_message_of([&] { load_model(dir / "m.bin", &other); });
  CHECK(msg.find("64") != std::string::npos);
  CHECK(msg.find("80") != std::string::npos);
  CHECK(test::error_kind_of([&] { load_model(dir / "m.bin", &other); }) == ErrorKind::kFormat);

  test::write_text(dir / "empty.bin", "");
  CHECK(test::error_kind_of([&] { load_model(dir / "empty.bin"); }) == ErrorKind::kFormat);
  const auto bytes = io::read_file(dir / "m.bin");
  test::write_text(dir / "trunc.bin", bytes.substr(0, bytes.size() - 5));
  CHECK(test::error_kind_of([&] { load_model(dir / "trunc.bin"); }) == ErrorKind::kFormat);
}
