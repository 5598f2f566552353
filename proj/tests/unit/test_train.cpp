#include <cmath>
#include <limits>
#include <numbers>
#include <set>

#include "altogether/io.hpp"
#include "altogether/metrics.hpp"
#include "altogether/train.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace altogether;
using namespace altogether::train;

namespace {

model::ModelConfig tiny() {
  model::ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_decoder_layers = 1;
  c.n_mapping_layers = 1;
  c.vocab_size = 40;
  c.image_embed_dim = 8;
  c.n_visual = 2;
  c.m_alt = 6;
  c.max_gen = 10;
  return c;
}

std::vector<Example> toy_data(std::size_t n, std::uint64_t seed, const model::ModelConfig& cfg) {
  Rng rng(seed);
  std::vector<Example> out;
  for (std::size_t i = 0; i < n; ++i) {
    Example ex;
    ex.id = "ex" + std::to_string(i);
    for (int k = 0; k < cfg.image_embed_dim; ++k) ex.image.push_back(rng.normal());
    for (int k = 0; k < 3; ++k) ex.alt.push_back(static_cast<TokenId>(4 + rng.below(36)));
    for (int k = 0; k < 4; ++k) ex.caption.push_back(static_cast<TokenId>(4 + rng.below(36)));
    out.push_back(std::move(ex));
  }
  return out;
}

TrainConfig small_train() {
  TrainConfig c;
  c.batch_size = 4;
  c.peak_lr = 5e-3;
  c.warmup_steps = 2;
  c.seed = 7;
  return c;
}

// Independent schedule oracle.
double lr_oracle(int step, int total, double peak, int warmup, double ratio) {
  if (step <= warmup) return warmup == 0 ? peak : peak * step / warmup;
  const double t = double(step - warmup) / double(total - warmup);
  return ratio * peak + (peak - ratio * peak) * (1 + std::cos(std::numbers::pi * t)) / 2;
}

}  // namespace

TEST_CASE("lr schedule endpoints and shape") {
  TrainConfig c;
  c.peak_lr = 3e-4;
  c.warmup_steps = 100;
  c.min_lr_ratio = 0.1;
  CHECK(lr_schedule(100, 1000, c) == 3e-4);
  CHECK(lr_schedule(1000, 1000, c) == 0.1 * 3e-4);
  CHECK(lr_schedule(50, 1000, c) == doctest::Approx(1.5e-4).epsilon(1e-15));
  CHECK(lr_schedule(0, 1000, c) == 0.0);
  double prev = lr_schedule(100, 1000, c);
  for (int s = 0; s <= 1000; ++s) {
    const double lr = lr_schedule(s, 1000, c);
    CHECK(std::abs(lr - lr_oracle(s, 1000, 3e-4, 100, 0.1)) < 1e-15);
    if (s > 100) {
      CHECK(lr <= prev);
      prev = lr;
    }
  }
  // continuity at the joint
  CHECK(std::abs(lr_schedule(101, 1000, c) - lr_schedule(100, 1000, c)) < 1e-8);
  CHECK(test::error_kind_of([&] { lr_schedule(1001, 1000, c); }) == ErrorKind::kRange);
  CHECK(test::error_kind_of([&] { lr_schedule(-1, 1000, c); }) == ErrorKind::kRange);

  c.warmup_steps = 0;
  CHECK(lr_schedule(0, 10, c) == 3e-4);
  CHECK(lr_schedule(10, 10, c) == 0.1 * 3e-4);
}

TEST_CASE("step arithmetic") {
  CHECK(steps_per_epoch(22'000'000, 512) == 42969);
  CHECK(steps_per_epoch(16, 4) == 4);
  CHECK(steps_per_epoch(17, 4) == 5);
  CHECK(steps_per_epoch(0, 4) == 0);
  CHECK(test::error_kind_of([] { steps_per_epoch(10, 0); }) == ErrorKind::kConfig);
}

TEST_CASE("train config validation") {
  TrainConfig c;
  c.batch_size = 0;
  CHECK(test::error_kind_of([&] { c.validate(); }) == ErrorKind::kConfig);
  c = {};
  c.empty_alt_prob = 1.5;
  CHECK(test::error_kind_of([&] { c.validate(); }) == ErrorKind::kConfig);
  c = {};
  c.min_lr_ratio = 0.0;
  CHECK(test::error_kind_of([&] { c.validate(); }) == ErrorKind::kConfig);
}

TEST_CASE("empty-alt draws: rate and independence from content") {
  for (double p : {0.0, 0.5, 0.2, 1.0}) {
    int hits = 0;
    for (std::uint64_t s = 1; s <= 1000; ++s) {
      for (std::uint64_t slot = 0; slot < 10; ++slot) hits += empty_alt_draw(3, s, slot, p) ? 1 : 0;
    }
    CHECK(std::abs(hits / 10000.0 - p) < 0.02);
  }
  CHECK(empty_alt_draw(3, 5, 2, 0.5) == empty_alt_draw(3, 5, 2, 0.5));

  // Assign slots to 10 content buckets through a content-driven shuffle and
  // check the replacement counts per bucket are homogeneous (chi-squared, 9 dof).
  Rng rng(11);
  std::vector<int> hits(10, 0), totals(10, 0);
  for (std::uint64_t s = 1; s <= 2000; ++s) {
    for (std::uint64_t slot = 0; slot < 16; ++slot) {
      const auto bucket = static_cast<std::size_t>(rng.below(10));
      ++totals[bucket];
      hits[bucket] += empty_alt_draw(99, s, slot, 0.5) ? 1 : 0;
    }
  }
  double chi2 = 0.0;
  for (std::size_t b = 0; b < 10; ++b) {
    const double expect = totals[b] * 0.5;
    chi2 += std::pow(hits[b] - expect, 2) / expect + std::pow((totals[b] - hits[b]) - expect, 2) / expect;
  }
  CHECK(chi2 < 27.88);  // p = 0.001
}

TEST_CASE("gradient clipping") {
  std::vector<double> g{3.0, 4.0};
  CHECK(clip_gradients(g, 1.0) == 5.0);
  CHECK(std::hypot(g[0], g[1]) <= 1.0 + 1e-12);
  CHECK(g[0] == doctest::Approx(0.6));
  std::vector<double> h{0.3, 0.4};
  CHECK(clip_gradients(h, 1.0) == doctest::Approx(0.5));
  CHECK(h[0] == 0.3);
  CHECK(clip_gradients(h, 0.0) == doctest::Approx(0.5));
  Rng rng(2);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> r(100);
    for (auto& x : r) x = 10 * rng.normal();
    const double before = clip_gradients(r, 0.7);
    double sq = 0;
    for (double x : r) sq += x * x;
    if (before > 0.7) CHECK(std::sqrt(sq) <= 0.7 + 1e-12);
  }
}

TEST_CASE("training loop: step count, determinism, zero epochs, loss goes down") {
  const auto cfg = tiny();
  const auto data = toy_data(16, 1, cfg);
  const auto init = model::init_model(cfg, 3);
  auto tc = small_train();

  int calls = 0;
  TrainHooks hooks;
  hooks.on_step = [&](const StepLog&) { ++calls; };
  const auto a = train_epochs(init, data, tc, 4, hooks);
  CHECK(a.curve.size() == 16);
  CHECK(calls == 16);
  CHECK(a.curve.back().step == 16);
  CHECK(a.curve.back().lr == 0.1 * tc.peak_lr);
  CHECK(a.total_slots == 64);

  const auto b = train_epochs(init, data, tc, 4);
  CHECK(a.params.values == b.params.values);
  REQUIRE(a.curve.size() == b.curve.size());
  for (std::size_t i = 0; i < a.curve.size(); ++i) CHECK(a.curve[i].loss == b.curve[i].loss);

  tc.seed = 8;
  const auto c = train_epochs(init, data, tc, 4);
  CHECK(c.params.values != a.params.values);

  const auto z = train_epochs(init, data, tc, 0);
  CHECK(z.params.values == init.values);
  CHECK(z.curve.empty());

  tc.finetune_epochs = 30;
  tc.empty_alt_prob = 0.0;
  const auto before = model::forward_loss(init, make_batch(data, cfg)).mean_loss;
  const auto ft = finetune(init, data, tc);
  const auto after = model::forward_loss(ft.params, make_batch(data, cfg)).mean_loss;
  CHECK(after < before);
  CHECK(ft.empty_alt_slots == 0);
}

TEST_CASE("training log and early stop") {
  test::TempDir dir;
  const auto cfg = tiny();
  const auto data = toy_data(8, 2, cfg);
  TrainHooks hooks;
  hooks.log_path = dir.path() / "log.jsonl";
  hooks.max_steps = 3;
  const auto r = train_epochs(model::init_model(cfg, 1), data, small_train(), 5, hooks);
  CHECK(r.curve.size() == 3);
  std::vector<io::Json> rows;
  io::for_each_jsonl(*hooks.log_path, [&](std::size_t, const io::Json& j) { rows.push_back(j); });
  REQUIRE(rows.size() == 3);
  CHECK(rows[2]["step"] == 3);
  CHECK(rows[0].contains("lr"));
  CHECK(rows[0].contains("grad_norm"));
  CHECK(rows[1]["loss"].get<double>() == r.curve[1].loss);
}

TEST_CASE("non-finite loss aborts with step and batch ids") {
  const auto cfg = tiny();
  const auto data = toy_data(4, 3, cfg);
  auto broken = model::init_model(cfg, 1);
  broken.view("head_b")[5] = std::numeric_limits<double>::infinity();
  const auto msg = test::error_message_of([&] { train_epochs(broken, data, small_train(), 1); });
  CHECK(msg.find("step 1") != std::string::npos);
  for (const auto& ex : data) CHECK(msg.find(ex.id) != std::string::npos);
  CHECK(test::error_kind_of([&] { train_epochs(broken, data, small_train(), 1); }) == ErrorKind::kTraining);
  CHECK(test::error_kind_of([&] { train_epochs(model::init_model(cfg, 1), {}, small_train(), 1); }) ==
        ErrorKind::kValidation);
}

TEST_CASE("grad check") {
  const auto cfg = tiny();
  const auto data = toy_data(2, 4, cfg);
  auto params = model::init_model(cfg, 5);
  Rng rng(1);
  for (auto& v : params.values) v += 0.05 * rng.normal();
  const auto batch = make_batch(data, cfg);

  const auto rep = grad_check(params, batch, 1e-3, 300, 9);
  CHECK(rep.coordinates == 300);
  CHECK(rep.max_relative_error < 1e-4);

  CHECK(test::error_kind_of([&] { grad_check(params, batch, 1e-3, std::span<const std::size_t>{}); }) ==
        ErrorKind::kValidation);

  // Token 39 appears nowhere in the batch, so its embedding row is frozen.
  std::set<TokenId> used;
  for (const auto& ex : data) {
    used.insert(ex.alt.begin(), ex.alt.end());
    used.insert(ex.caption.begin(), ex.caption.end());
  }
  REQUIRE(!used.contains(39));
  const auto emb = params.tensor("tok_emb");
  std::vector<std::size_t> frozen;
  for (int k = 0; k < cfg.d_model; ++k) frozen.push_back(emb.offset + 39 * emb.cols + static_cast<std::size_t>(k));
  model::ParamVector grad;
  model::forward_backward(params, batch, grad);
  for (auto i : frozen) CHECK(grad[i] == 0.0);
  const auto fr = grad_check(params, batch, 1e-3, frozen);
  CHECK(fr.max_abs_error == 0.0);
}

TEST_CASE("world: determinism, distractors, captions") {
  WorldSpec s;
  s.seed = 4;
  const World w(s), w2(s);
  const auto a = w.items(0, 1000);
  const auto b = w2.items(0, 1000);
  std::size_t with_distractor = 0, rare = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].alt_text == b[i].alt_text);
    CHECK(a[i].image == b[i].image);
    with_distractor += a[i].distractors.empty() ? 0 : 1;
  }
  CHECK(std::abs(with_distractor / 1000.0 - 0.2) < 0.02);
  for (const auto& c : w.concepts()) rare += c.rare ? 1 : 0;
  CHECK(rare == 36);

  std::set<std::string> names;
  for (const auto& c : w.concepts()) {
    names.insert(c.name);
    CHECK(c.rare == !c.hypernym.empty());
  }
  CHECK(names.size() == w.concepts().size());

  const auto& it = a[0];
  CHECK(it.concepts.size() == 3);
  double norm = 0;
  for (double x : it.image) norm += x * x;
  CHECK(norm == doctest::Approx(1.0));
  // Caption names common concepts and rare concepts the alt-text named; the
  // rest appear as their hypernym.
  for (int id : it.concepts) {
    const auto& c = w.concepts()[static_cast<std::size_t>(id)];
    const bool named = std::find(it.mentioned.begin(), it.mentioned.end(), id) != it.mentioned.end();
    const auto words = w.named_concepts(it.caption);
    if (!c.rare || named) {
      CHECK(std::find(words.begin(), words.end(), id) != words.end());
    }
  }

  WorldSpec clean = s;
  clean.distractor_rate = 0.0;
  const World wc(clean);
  for (const auto& item : wc.items(0, 300)) {
    CHECK(item.distractors.empty());
    for (int id : wc.named_concepts(item.alt_text)) {
      CHECK(std::find(item.concepts.begin(), item.concepts.end(), id) != item.concepts.end());
    }
  }

  WorldSpec other = s;
  other.seed = 5;
  CHECK(World(other).item(0).alt_text != w.item(0).alt_text);

  WorldSpec bad = s;
  bad.rare_fraction = 1.0;
  CHECK(test::error_kind_of([&] { World x(bad); }) == ErrorKind::kValidation);
}

TEST_CASE("world caption template and rare invisibility") {
  WorldSpec s;
  s.seed = 1;
  s.noise = 0.0;
  const World w(s);
  int common = -1, rare = -1;
  for (const auto& c : w.concepts()) {
    if (c.rare && rare < 0) rare = c.id;
    if (!c.rare && common < 0) common = c.id;
  }
  const auto& rc = w.concepts()[static_cast<std::size_t>(rare)];
  const auto& cc = w.concepts()[static_cast<std::size_t>(common)];
  const std::vector<int> both{std::min(common, rare), std::max(common, rare)};
  const auto hidden = w.caption_for(both, {});
  const auto shown = w.caption_for(both, {rare});
  CHECK(hidden.find(rc.name) == std::string::npos);
  CHECK(hidden.find(rc.hypernym) != std::string::npos);
  CHECK(shown.find(rc.name) != std::string::npos);
  CHECK(shown.rfind("a photo of a ", 0) == 0);
  CHECK(shown.find(" and a ") != std::string::npos);
  CHECK(hidden.find(cc.name) != std::string::npos);

  // An image of only rare concepts with no noise carries no concept signal;
  // all such images coincide.
  std::vector<std::vector<double>> rare_only;
  for (std::uint64_t i = 0; i < 5000 && rare_only.size() < 2; ++i) {
    const auto it = w.item(i);
    bool all_rare = true;
    for (int id : it.concepts) all_rare = all_rare && w.concepts()[static_cast<std::size_t>(id)].rare;
    if (all_rare) rare_only.push_back(it.image);
  }
  REQUIRE(rare_only.size() == 2);
  CHECK(rare_only[0] == rare_only[1]);

  // The text embedder is unit norm and maps concept-free text to one direction.
  const auto e1 = w.embed_text("nothing here");
  const auto e2 = w.embed_text("");
  CHECK(e1 == e2);
  double n = 0;
  for (float x : w.embed_text(cc.name)) n += double(x) * x;
  CHECK(n == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("bench and config hash") {
  const auto cfg = tiny();
  const auto p = model::init_model(cfg, 1);
  CHECK(config_hash(cfg) == config_hash(cfg));
  auto other = cfg;
  other.max_gen = 11;
  CHECK(config_hash(other) != config_hash(cfg));
  CHECK(config_hash(cfg).size() == 16);

  const auto rep = bench_throughput(p, cfg.n_visual + 3 + cfg.max_gen, 2, 1.0, 0);
  CHECK(rep.items_per_second > 0);
  CHECK(rep.wall_seconds >= 1.0);
  CHECK(rep.parameter_count == p.values.size());
  CHECK(rep.items > 0);
  CHECK(test::error_kind_of([&] { bench_throughput(p, cfg.total_len() + 1, 1, 1.0); }) == ErrorKind::kValidation);
  CHECK(test::error_kind_of([&] { bench_throughput(p, cfg.total_len(), 1, 0.5); }) == ErrorKind::kValidation);
}

TEST_CASE("realign eval on an untrained model") {
  WorldSpec s;
  s.seed = 2;
  s.embed_dim = 8;
  const World w(s);
  const auto vocab = textproc::build_vocab(w.vocabulary_texts(), 400);
  auto cfg = tiny();
  cfg.vocab_size = static_cast<int>(vocab.size());
  cfg.m_alt = 12;
  cfg.max_gen = 16;
  const auto p = model::init_model(cfg, 1);
  const auto items = w.items(500, 20);
  model::DecodeConfig dc;
  dc.temperature = 0.0;
  const auto rep = realign_eval(p, w, items, vocab, textproc::Lexicon::builtin(), dc);
  CHECK(rep.items == 20);
  CHECK(rep.np_f1_alt < 0.2);
  CHECK(rep.np_f1_empty < 0.2);
  CHECK(rep.distractor_mention_rate() >= 0.0);
  CHECK(rep.rare_copy_rate() <= 1.0);
}
