#include "altogether/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include <fmt/format.h>

#include "altogether/error.hpp"
#include "altogether/io.hpp"
#include "altogether/metrics.hpp"
#include "altogether/rng.hpp"

namespace altogether::train {

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error(ErrorKind::kConfig, msg); };
  if (batch_size < 1) fail(fmt::format("batch_size must be positive (got {})", batch_size));
  if (!(peak_lr > 0.0) || !std::isfinite(peak_lr)) fail(fmt::format("peak_lr must be positive (got {})", peak_lr));
  if (warmup_steps < 0) fail(fmt::format("warmup_steps must be >= 0 (got {})", warmup_steps));
  if (!(min_lr_ratio > 0.0 && min_lr_ratio <= 1.0)) {
    fail(fmt::format("min_lr_ratio must be in (0, 1] (got {})", min_lr_ratio));
  }
  if (pretrain_epochs < 0 || finetune_epochs < 0) fail("epoch counts must be >= 0");
  if (!(empty_alt_prob >= 0.0 && empty_alt_prob <= 1.0)) {
    fail(fmt::format("empty_alt_prob must be in [0, 1] (got {})", empty_alt_prob));
  }
  if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
  if (!(grad_clip_norm >= 0.0)) fail("grad_clip_norm must be >= 0 (0 disables clipping)");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) fail("adam betas must be in [0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
}

double lr_schedule(int step, int total_steps, const TrainConfig& cfg) {
  if (step < 0 || step > total_steps) {
    throw Error(ErrorKind::kRange, fmt::format("step {} outside [0, {}]", step, total_steps));
  }
  if (step < cfg.warmup_steps) {
    return cfg.peak_lr * (static_cast<double>(step) / static_cast<double>(cfg.warmup_steps));
  }
  if (step == cfg.warmup_steps || total_steps == cfg.warmup_steps) return cfg.peak_lr;
  const double progress =
      static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(total_steps - cfg.warmup_steps);
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return cfg.peak_lr * (cfg.min_lr_ratio + (1.0 - cfg.min_lr_ratio) * cosine);
}

int steps_per_epoch(std::size_t n_examples, int batch_size) {
  if (batch_size < 1) throw Error(ErrorKind::kConfig, "batch_size must be positive");
  return static_cast<int>((n_examples + static_cast<std::size_t>(batch_size) - 1) / static_cast<std::size_t>(batch_size));
}

bool empty_alt_draw(std::uint64_t seed, std::uint64_t step, std::uint64_t slot, double prob) {
  const std::uint64_t h = mix_seed(mix_seed(seed, 0xE11A), step, slot);
  return static_cast<double>(h >> 11) * 0x1.0p-53 < prob;
}

double clip_gradients(std::span<double> grad, double max_norm) {
  double sq = 0.0;
  for (double g : grad) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& g : grad) g *= scale;
  }
  return norm;
}

model::SequenceBatch make_batch(std::span<const Example> data, const model::ModelConfig& cfg) {
  model::SequenceBatch b;
  for (const auto& ex : data) {
    b.images.push_back(ex.image);
    b.rows.push_back(model::layout_sequence(ex.alt, ex.caption, cfg));
  }
  return b;
}

namespace {

// Weight decay applies to matrices (rows > 1), not to gains, biases or other vectors.
std::vector<std::uint8_t> decay_mask(const model::ModelConfig& cfg, std::size_t count) {
  std::vector<std::uint8_t> mask(count, 0);
  for (const auto& t : model::parameter_layout(cfg)) {
    if (t.rows > 1) std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(t.offset), t.size(), 1);
  }
  return mask;
}

}  // namespace

TrainResult train_epochs(ModelParams params, std::span<const Example> data, const TrainConfig& cfg, int epochs,
                         const TrainHooks& hooks) {
  cfg.validate();
  params.config.validate();
  if (epochs < 0) throw Error(ErrorKind::kConfig, "epochs must be >= 0");
  TrainResult result;
  if (epochs == 0) {
    result.params = std::move(params);
    return result;
  }
  if (data.empty()) throw Error(ErrorKind::kValidation, "training set is empty");

  const int spe = steps_per_epoch(data.size(), cfg.batch_size);
  const int total = spe * epochs;
  const std::size_t n_params = params.values.size();
  std::vector<double> m(n_params, 0.0), v(n_params, 0.0);
  model::ParamVector grad;
  const auto decay = decay_mask(params.config, n_params);

  std::ofstream log;
  if (hooks.log_path) {
    log.open(*hooks.log_path, std::ios::trunc);
    if (!log) throw Error(ErrorKind::kIo, fmt::format("cannot write training log '{}'", hooks.log_path->string()));
  }

  int step = 0;
  std::vector<std::size_t> order(data.size());
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(mix_seed(cfg.seed, 0x5EED, static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order);
    for (int b = 0; b < spe; ++b) {
      if (hooks.max_steps > 0 && step >= hooks.max_steps) break;
      ++step;
      const std::size_t lo = static_cast<std::size_t>(b) * static_cast<std::size_t>(cfg.batch_size);
      const std::size_t hi = std::min(data.size(), lo + static_cast<std::size_t>(cfg.batch_size));
      model::SequenceBatch batch;
      for (std::size_t k = lo; k < hi; ++k) {
        const auto& ex = data[order[k]];
        const bool empty = empty_alt_draw(cfg.seed, static_cast<std::uint64_t>(step), k - lo, cfg.empty_alt_prob);
        result.empty_alt_slots += empty ? 1 : 0;
        ++result.total_slots;
        batch.images.push_back(ex.image);
        batch.rows.push_back(model::layout_sequence(empty ? std::span<const TokenId>{} : std::span<const TokenId>(ex.alt),
                                                    ex.caption, params.config));
      }
      const double loss = model::forward_backward(params, batch, grad);
      if (!std::isfinite(loss)) {
        std::string ids;
        for (std::size_t k = lo; k < hi; ++k) ids += (k > lo ? "," : "") + data[order[k]].id;
        throw Error(ErrorKind::kTraining, fmt::format("non-finite loss at step {} (batch ids: {})", step, ids));
      }
      const double norm = clip_gradients(grad, cfg.grad_clip_norm);
      const double lr = lr_schedule(step, total, cfg);
      const double bc1 = 1.0 - std::pow(cfg.beta1, step);
      const double bc2 = 1.0 - std::pow(cfg.beta2, step);
      for (std::size_t i = 0; i < n_params; ++i) {
        const double g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.adam_eps);
        params.values[i] -= lr * (update + (decay[i] ? cfg.weight_decay * params.values[i] : 0.0));
      }
      const StepLog entry{step, lr, loss, norm};
      result.curve.push_back(entry);
      if (log.is_open()) {
        log << io::Json{{"step", entry.step}, {"lr", entry.lr}, {"loss", entry.loss}, {"grad_norm", entry.grad_norm}}
                   .dump()
            << '\n';
      }
      if (hooks.on_step) hooks.on_step(entry);
    }
  }
  if (log.is_open() && !log.flush()) {
    throw Error(ErrorKind::kIo, fmt::format("failed writing training log '{}'", hooks.log_path->string()));
  }
  result.params = std::move(params);
  return result;
}

// --- gradient check ------------------------------------------------------------

GradCheckReport grad_check(ModelParams params, const model::SequenceBatch& batch, double epsilon,
                           std::span<const std::size_t> coords) {
  if (coords.empty()) throw Error(ErrorKind::kValidation, "grad_check needs at least one coordinate");
  if (!(epsilon > 0.0)) throw Error(ErrorKind::kValidation, "grad_check epsilon must be positive");
  model::ParamVector grad;
  model::forward_backward(params, batch, grad);
  GradCheckReport rep;
  for (std::size_t i : coords) {
    if (i >= params.values.size()) {
      throw Error(ErrorKind::kRange, fmt::format("coordinate {} outside {} parameters", i, params.values.size()));
    }
    const double orig = params.values[i];
    auto loss_at = [&](double delta) {
      params.values[i] = orig + delta;
      return model::forward_loss(params, batch).mean_loss;
    };
    // Fourth-order central stencil: truncation error O(epsilon^4).
    const double numeric =
        (8.0 * (loss_at(epsilon) - loss_at(-epsilon)) - (loss_at(2.0 * epsilon) - loss_at(-2.0 * epsilon))) /
        (12.0 * epsilon);
    params.values[i] = orig;
    const double abs_err = std::abs(numeric - grad[i]);
    const double rel = abs_err / std::max({std::abs(numeric), std::abs(grad[i]), kGradCheckFloor});
    if (rep.coordinates == 0 || rel > rep.max_relative_error) {
      rep.max_relative_error = rel;
      rep.worst_index = i;
    }
    rep.max_abs_error = std::max(rep.max_abs_error, abs_err);
    ++rep.coordinates;
  }
  return rep;
}

GradCheckReport grad_check(ModelParams params, const model::SequenceBatch& batch, double epsilon,
                           std::size_t max_coords, std::uint64_t seed) {
  const std::size_t n = params.values.size();
  std::vector<std::size_t> coords(n);
  std::iota(coords.begin(), coords.end(), 0);
  if (max_coords > 0 && max_coords < n) {
    Rng rng(seed);
    rng.shuffle(coords);
    coords.resize(max_coords);
    std::sort(coords.begin(), coords.end());
  }
  return grad_check(std::move(params), batch, epsilon, coords);
}

// --- evaluation ----------------------------------------------------------------

double RealignReport::distractor_mention_rate() const {
  return distractors == 0 ? 0.0 : static_cast<double>(distractor_mentions) / static_cast<double>(distractors);
}

double RealignReport::rare_copy_rate() const {
  return rare_in_alt == 0 ? 0.0 : static_cast<double>(rare_copied) / static_cast<double>(rare_in_alt);
}

RealignReport realign_eval(const ModelParams& params, const World& world, std::span<const WorldItem> items,
                           const textproc::Vocab& vocab, const textproc::Lexicon& lexicon,
                           const model::DecodeConfig& decode) {
  RealignReport rep;
  const auto& concepts = world.concepts();
  for (const auto& it : items) {
    const auto alt = textproc::tokenize(vocab, it.alt_text);
    const auto with_alt = textproc::detokenize(vocab, model::generate(params, it.image, alt, decode)).text;
    const auto without = textproc::detokenize(vocab, model::generate(params, it.image, {}, decode)).text;
    const auto a = metrics::np_prf(with_alt, it.caption, lexicon);
    const auto e = metrics::np_prf(without, it.caption, lexicon);
    rep.np_precision_alt += a.precision;
    rep.np_recall_alt += a.recall;
    rep.np_f1_alt += a.f1;
    rep.np_precision_empty += e.precision;
    rep.np_recall_empty += e.recall;
    rep.np_f1_empty += e.f1;

    const auto named = world.named_concepts(with_alt);
    auto mentions = [&](int id) { return std::find(named.begin(), named.end(), id) != named.end(); };
    for (int d : it.distractors) {
      ++rep.distractors;
      rep.distractor_mentions += mentions(d) ? 1 : 0;
    }
    for (int c : it.mentioned) {
      if (!concepts[static_cast<std::size_t>(c)].rare) continue;
      ++rep.rare_in_alt;
      rep.rare_copied += mentions(c) ? 1 : 0;
    }
    ++rep.items;
  }
  if (rep.items > 0) {
    const double n = static_cast<double>(rep.items);
    for (double* v : {&rep.np_precision_alt, &rep.np_recall_alt, &rep.np_f1_alt, &rep.np_precision_empty,
                      &rep.np_recall_empty, &rep.np_f1_empty}) {
      *v /= n;
    }
  }
  return rep;
}

// --- throughput ----------------------------------------------------------------

std::string config_hash(const model::ModelConfig& c) {
  // FNV-1a over the config fields.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (int v : {c.d_model, c.n_heads, c.n_decoder_layers, c.n_mapping_layers, c.vocab_size, c.image_embed_dim,
                c.n_visual, c.m_alt, c.max_gen}) {
    for (int k = 0; k < 4; ++k) {
      h ^= static_cast<std::uint64_t>((static_cast<std::uint32_t>(v) >> (8 * k)) & 0xFF);
      h *= 0x100000001b3ULL;
    }
  }
  return fmt::format("{:016x}", h);
}

BenchReport bench_throughput(const ModelParams& params, int sequence_length, int batch_size, double duration_s,
                             std::uint64_t seed) {
  const auto& cfg = params.config;
  cfg.validate();
  if (!(duration_s >= 1.0)) throw Error(ErrorKind::kValidation, fmt::format("bench duration must be >= 1 s (got {})", duration_s));
  if (batch_size < 1) throw Error(ErrorKind::kValidation, "bench batch size must be positive");
  const int alt_len = sequence_length - cfg.n_visual - cfg.max_gen;
  if (alt_len < 0 || alt_len > cfg.m_alt) {
    throw Error(ErrorKind::kValidation,
                fmt::format("sequence length {} must lie in [{}, {}] for this model", sequence_length,
                            cfg.n_visual + cfg.max_gen, cfg.total_len()));
  }
  Rng rng(seed);
  std::vector<double> image(static_cast<std::size_t>(cfg.image_embed_dim));
  std::vector<TokenId> alt(static_cast<std::size_t>(alt_len));
  auto refresh = [&] {
    for (auto& x : image) x = rng.normal();
    for (auto& t : alt) t = static_cast<TokenId>(textproc::kFirstByte + rng.below(static_cast<std::uint64_t>(cfg.vocab_size - textproc::kFirstByte)));
  };
  model::DecodeConfig dec;
  dec.temperature = 0.2;
  dec.top_p = 0.7;
  dec.max_tokens = cfg.max_gen;
  dec.stop_at_eos = false;

  refresh();
  (void)model::generate_raw(params, image, alt, dec);  // warmup, excluded from timing

  using Clock = std::chrono::steady_clock;
  const auto start = Clock::now();
  std::size_t items = 0;
  double elapsed = 0.0;
  while (elapsed < duration_s) {
    for (int b = 0; b < batch_size; ++b) {
      refresh();
      dec.seed = items;
      (void)model::generate_raw(params, image, alt, dec);
      ++items;
    }
    elapsed = std::chrono::duration<double>(Clock::now() - start).count();
  }
  BenchReport rep;
  rep.sequence_length = sequence_length;
  rep.items = items;
  rep.wall_seconds = elapsed;
  rep.items_per_second = static_cast<double>(items) / elapsed;
  rep.parameter_count = params.values.size();
  rep.batch_size = batch_size;
  rep.config_hash = config_hash(cfg);
  return rep;
}

}  // namespace altogether::train
