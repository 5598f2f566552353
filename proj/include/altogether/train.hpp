#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "altogether/model.hpp"
#include "altogether/textproc.hpp"
#include "altogether/world.hpp"

namespace altogether::train {

using model::ModelParams;
using textproc::TokenId;

struct TrainConfig {
  int batch_size = 512;
  double peak_lr = 1e-3;
  int warmup_steps = 2000;
  double min_lr_ratio = 0.1;
  int pretrain_epochs = 1;
  int finetune_epochs = 4;
  double empty_alt_prob = 0.5;
  double weight_decay = 0.01;
  double grad_clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;

  void validate() const;  // throws kConfig
};

// Linear warmup 0 -> peak over warmup_steps, then cosine decay to
// min_lr_ratio * peak at total_steps. Throws kRange outside [0, total_steps].
double lr_schedule(int step, int total_steps, const TrainConfig& cfg);

int steps_per_epoch(std::size_t n_examples, int batch_size);

struct Example {
  std::string id;
  std::vector<double> image;
  std::vector<TokenId> alt;      // empty = no alt-text
  std::vector<TokenId> caption;
};

// Whether slot `slot` of update `step` trains with EMPTY_ALT instead of its
// alt-text. A pure function of (seed, step, slot): independent of content.
bool empty_alt_draw(std::uint64_t seed, std::uint64_t step, std::uint64_t slot, double prob);

struct StepLog {
  int step = 0;  // 1-based update index
  double lr = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;  // before clipping
};

struct TrainResult {
  ModelParams params;
  std::vector<StepLog> curve;
  int empty_alt_slots = 0;
  int total_slots = 0;
};

struct TrainHooks {
  std::function<void(const StepLog&)> on_step;  // called after every update
  std::optional<std::filesystem::path> log_path;  // JSONL {"step","lr","loss","grad_norm"}
  int max_steps = 0;  // when > 0, stop early (the schedule still spans all epochs)
};

// Scales `grad` in place so its global L2 norm is at most max_norm; returns
// the norm before clipping.
double clip_gradients(std::span<double> grad, double max_norm);

// Runs `epochs` passes of AdamW over `data` (shuffled per epoch). With
// `empty_alt_prob` > 0 each slot's alt region is swapped for EMPTY_ALT.
TrainResult train_epochs(ModelParams params, std::span<const Example> data, const TrainConfig& cfg, int epochs,
                         const TrainHooks& hooks = {});

inline TrainResult pretrain(ModelParams params, std::span<const Example> data, const TrainConfig& cfg,
                            const TrainHooks& hooks = {}) {
  return train_epochs(std::move(params), data, cfg, cfg.pretrain_epochs, hooks);
}

inline TrainResult finetune(ModelParams params, std::span<const Example> data, const TrainConfig& cfg,
                            const TrainHooks& hooks = {}) {
  return train_epochs(std::move(params), data, cfg, cfg.finetune_epochs, hooks);
}

model::SequenceBatch make_batch(std::span<const Example> data, const model::ModelConfig& cfg);

// --- gradient check --------------------------------------------------------

struct GradCheckReport {
  double max_relative_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t worst_index = 0;
};

// Relative error per coordinate: |a - n| / max(|a|, |n|, floor), where n is
// the fourth-order central difference with step epsilon. Checks all
// coordinates when max_coords is 0 (or >= parameter count), otherwise a
// seeded random subset.
inline constexpr double kGradCheckFloor = 1e-6;

GradCheckReport grad_check(ModelParams params, const model::SequenceBatch& batch, double epsilon,
                           std::size_t max_coords = 0, std::uint64_t seed = 0);

// Coordinate-explicit variant; an empty list is an error.
GradCheckReport grad_check(ModelParams params, const model::SequenceBatch& batch, double epsilon,
                           std::span<const std::size_t> coords);

// --- evaluation ------------------------------------------------------------

struct RealignReport {
  std::size_t items = 0;
  double np_precision_alt = 0.0, np_recall_alt = 0.0, np_f1_alt = 0.0;
  double np_precision_empty = 0.0, np_recall_empty = 0.0, np_f1_empty = 0.0;
  std::size_t distractors = 0, distractor_mentions = 0;
  std::size_t rare_in_alt = 0, rare_copied = 0;

  double distractor_mention_rate() const;
  double rare_copy_rate() const;
  double f1_gain() const { return np_f1_alt - np_f1_empty; }
};

// Generates each item twice (with its alt-text and with EMPTY_ALT) and
// scores both against the canonical caption.
RealignReport realign_eval(const ModelParams& params, const World& world, std::span<const WorldItem> items,
                           const textproc::Vocab& vocab, const textproc::Lexicon& lexicon,
                           const model::DecodeConfig& decode);

// --- throughput ------------------------------------------------------------

struct BenchReport {
  int sequence_length = 0;
  double items_per_second = 0.0;
  std::size_t parameter_count = 0;
  double wall_seconds = 0.0;
  int batch_size = 0;
  std::size_t items = 0;
  std::string config_hash;
};

// Full-generation throughput (max_gen tokens per item, no early stop) at a
// layout of `sequence_length` = n_visual + alt length + max_gen positions.
BenchReport bench_throughput(const ModelParams& params, int sequence_length, int batch_size, double duration_s,
                             std::uint64_t seed = 0);

std::string config_hash(const model::ModelConfig& cfg);

}  // namespace altogether::train
