#include "altogether/cli.hpp"

#include <cstdlib>
#include <functional>
#include <map>
#include <ostream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

#include "altogether/annosvc.hpp"
#include "altogether/annosvc_http.hpp"
#include "altogether/corpus.hpp"
#include "altogether/error.hpp"
#include "altogether/io.hpp"
#include "altogether/metrics.hpp"
#include "altogether/model.hpp"
#include "altogether/rng.hpp"
#include "altogether/textproc.hpp"
#include "altogether/train.hpp"
#include "altogether/world.hpp"

namespace altogether::cli {

namespace {

namespace fs = std::filesystem;
using io::Json;

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kIo:
      return kIoFailure;
    case ErrorKind::kTraining:
    case ErrorKind::kDegenerate:
    case ErrorKind::kDependency:
      return kInternalFailure;
    default:
      return kValidationFailure;
  }
}

std::shared_ptr<spdlog::logger> make_logger(std::ostream& err) {
  auto sink = std::make_shared<spdlog::sinks::ostream_sink_mt>(err, true);
  auto log = std::make_shared<spdlog::logger>("altogether", sink);
  log->set_pattern("[%l] %v");
  const char* env = std::getenv("ALTOGETHER_LOG");
  const std::string level = env ? env : "info";
  if (level == "error") {
    log->set_level(spdlog::level::err);
  } else if (level == "debug") {
    log->set_level(spdlog::level::debug);
  } else {
    log->set_level(spdlog::level::info);
    if (level != "info") log->warn("ALTOGETHER_LOG='{}' is not one of error, info, debug; using info", level);
  }
  return log;
}

// --- input helpers -------------------------------------------------------------

struct Captioned {
  std::string id;
  std::string text;
};

// JSONL lines with "id" and "caption" (or "text").
std::vector<Captioned> read_captions(const fs::path& path) {
  std::vector<Captioned> out;
  io::for_each_jsonl(path, [&](std::size_t line, const Json& j) {
    try {
      const auto id = io::require_string(j, "id");
      const auto text = j.contains("caption") ? io::require_string(j, "caption") : io::require_string(j, "text");
      out.push_back({id, text});
    } catch (const Error& e) {
      throw Error(ErrorKind::kParse, fmt::format("{}:{}: {}", path.string(), line, e.what()));
    }
  });
  return out;
}

std::unordered_map<std::string, std::string> caption_map(const fs::path& path) {
  std::unordered_map<std::string, std::string> out;
  for (auto& c : read_captions(path)) out[c.id] = std::move(c.text);
  return out;
}

corpus::Corpus load_corpus(const fs::path& items, const std::optional<fs::path>& rounds) {
  auto c = corpus::ingest_pairs(items);
  if (rounds && fs::exists(*rounds)) corpus::load_rounds(c, *rounds);
  return c;
}

std::vector<double> image_for(const corpus::EmbeddingMatrix& m, const corpus::ImageItem& item) {
  std::span<const float> row;
  if (auto r = m.find(item.id)) {
    row = *r;
  } else if (item.embedding_row && *item.embedding_row < m.count) {
    row = m.row(*item.embedding_row);
  } else {
    throw Error(ErrorKind::kValidation, fmt::format("no image embedding for item '{}'", item.id));
  }
  return {row.begin(), row.end()};
}

train::World load_world(const fs::path& path) {
  return train::World(train::world_spec_from_json(Json::parse(io::read_file(path), nullptr, true)));
}

void write_json_file(const fs::path& path, const Json& j) { io::write_file_atomic(path, j.dump(2) + "\n"); }

std::string fixed(double v, int digits = 4) { return fmt::format("{:.{}f}", v, digits); }

// --- subcommands ---------------------------------------------------------------

struct Globals {
  std::uint64_t seed = 0;
};

struct ModelFlags {
  int d_model = 64;
  int heads = 4;
  int layers = 2;
  int mapping_layers = 1;
  int n_visual = 40;
  int m_alt = 128;
  int max_gen = 256;

  void add(CLI::App* app) {
    app->add_option("--d-model", d_model, "Model width")->capture_default_str();
    app->add_option("--heads", heads, "Attention heads")->capture_default_str();
    app->add_option("--layers", layers, "Decoder layers")->capture_default_str();
    app->add_option("--mapping-layers", mapping_layers, "Mapping network layers")->capture_default_str();
    app->add_option("--n-visual", n_visual, "Visual prefix tokens")->capture_default_str();
    app->add_option("--m-alt", m_alt, "Alt-text region length")->capture_default_str();
    app->add_option("--max-gen", max_gen, "Caption region length")->capture_default_str();
  }

  model::ModelConfig config(int vocab, int image_dim) const {
    model::ModelConfig c;
    c.d_model = d_model;
    c.n_heads = heads;
    c.n_decoder_layers = layers;
    c.n_mapping_layers = mapping_layers;
    c.vocab_size = vocab;
    c.image_embed_dim = image_dim;
    c.n_visual = n_visual;
    c.m_alt = m_alt;
    c.max_gen = max_gen;
    c.validate();
    return c;
  }
};

class Tool {
 public:
  Tool(std::ostream& out, std::ostream& err) : out_(out), err_(err), log_(make_logger(err)) {}

  int main(int argc, const char* const* argv) {
    CLI::App app{"Alt-text re-alignment toolkit: corpus, captioner, metrics, annotation service", "altogether"};
    app.set_config("--config", "", "Flat key=value file supplying flag defaults (subcommand.flag=value)");
    app.add_option("--seed", g_.seed, "Seed for every stochastic component")->capture_default_str();
    app.require_subcommand(1);
    app.fallthrough();

    add_ingest(app);
    add_rounds(app);
    add_vocab(app);
    add_synth(app);
    add_train(app);
    add_caption(app);
    add_eval(app);
    add_mix(app);
    add_bench(app);
    add_serve(app);
    add_gradcheck(app);

    try {
      app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
      const int code = app.exit(e, out_, err_);
      return code == 0 ? kOk : kValidationFailure;
    }
    try {
      for (auto& [sub, fn] : handlers_) {
        if (sub->parsed()) return fn();
      }
      err_ << "error: no subcommand given\n" << app.help();
      return kValidationFailure;
    } catch (const Error& e) {
      log_->error("{}", e.what());
      return exit_code_for(e.kind());
    } catch (const Json::exception& e) {
      log_->error("invalid JSON: {}", e.what());
      return kValidationFailure;
    } catch (const std::exception& e) {
      log_->error("internal error: {}", e.what());
      return kInternalFailure;
    }
  }

 private:
  void on(CLI::App* sub, std::function<int()> fn) { handlers_.emplace_back(sub, std::move(fn)); }

  // ingest -----------------------------------------------------------------
  void add_ingest(CLI::App& app) {
    auto* sub = app.add_subcommand("ingest", "Validate an items JSONL file and report a summary");
    auto items = std::make_shared<std::string>();
    auto rounds_out = std::make_shared<std::string>();
    sub->add_option("--items", *items, "Items JSONL (id, image_ref, alt_text, source, embedding_row?)")->required();
    sub->add_option("--rounds-out", *rounds_out, "Write the auto-created round-1 records here");
    on(sub, [=, this] {
      const auto c = corpus::ingest_pairs(*items);
      std::map<std::string, std::size_t> sources;
      for (const auto& it : c.items()) ++sources[std::string(corpus::source_name(it.source))];
      if (!rounds_out->empty()) corpus::save_rounds(c, *rounds_out);
      out_ << Json{{"items", c.size()}, {"sources", sources}}.dump() << '\n';
      log_->info("ingested {} items from {}", c.size(), *items);
      return kOk;
    });
  }

  // rounds -----------------------------------------------------------------
  void add_rounds(CLI::App& app) {
    auto* rounds = app.add_subcommand("rounds", "Record and summarize annotation rounds");
    rounds->require_subcommand(1);

    auto* rec = rounds->add_subcommand("record", "Append the next round for one item");
    auto a = std::make_shared<std::tuple<std::string, std::string, std::string, int, std::string, std::string>>();
    auto& [items, rfile, id, round, caption, annotator] = *a;
    rec->add_option("--items", items, "Items JSONL")->required();
    rec->add_option("--rounds", rfile, "Rounds JSONL (created if missing, rewritten atomically)")->required();
    rec->add_option("--id", id, "Item id")->required();
    rec->add_option("--round", round, "Round number (must be the item's next round)")->required();
    rec->add_option("--caption", caption, "Caption text")->required();
    rec->add_option("--annotator", annotator, "Annotator id")->required();
    on(rec, [a, this] {
      auto& [items, rfile, id, round, caption, annotator] = *a;
      auto c = load_corpus(items, rfile);
      const auto r = c.record_round(id, round, caption, annotator);
      corpus::save_rounds(c, rfile);
      out_ << annosvc::to_json(r).dump() << '\n';
      return kOk;
    });

    auto* st = rounds->add_subcommand("stats", "Per-round length, edit distance and (optionally) alignment");
    auto s = std::make_shared<std::tuple<std::string, std::string, int, std::string, std::string, std::string>>();
    auto& [s_items, s_rounds, s_round, s_emb, s_world, s_format] = *s;
    s_format = "json";
    st->add_option("--items", s_items, "Items JSONL")->required();
    st->add_option("--rounds", s_rounds, "Rounds JSONL")->required();
    st->add_option("--round", s_round, "Only this round (default: every round present)");
    st->add_option("--embeddings", s_emb, "Image embedding matrix (enables alignment with --world)");
    st->add_option("--world", s_world, "World spec JSON whose text embedder scores alignment");
    st->add_option("--format", s_format, "Output format")->check(CLI::IsMember({"json", "table"}))->capture_default_str();
    on(st, [s, this] {
      auto& [items, rfile, round, emb_path, world_path, format] = *s;
      const auto c = load_corpus(items, rfile);
      std::optional<corpus::EmbeddingMatrix> emb;
      std::optional<corpus::TextEmbedder> embedder;
      std::optional<train::World> world;
      if (!emb_path.empty() != !world_path.empty()) {
        throw Error(ErrorKind::kValidation, "--embeddings and --world must be given together");
      }
      if (!emb_path.empty()) {
        emb = corpus::load_embeddings(emb_path);
        world.emplace(load_world(world_path));
        embedder = world->text_embedder();
      }
      int max_round = 0;
      for (const auto& it : c.items()) max_round = std::max(max_round, c.max_round(it.id));
      std::vector<corpus::RoundStats> all;
      for (int r = round > 0 ? round : 1; r <= (round > 0 ? round : max_round); ++r) {
        all.push_back(corpus::round_stats(c, r, emb ? &*emb : nullptr, embedder ? &*embedder : nullptr));
      }
      if (format == "json") {
        Json arr = Json::array();
        for (const auto& x : all) arr.push_back(annosvc::to_json(x));
        out_ << Json{{"rounds", arr}}.dump() << '\n';
      } else {
        out_ << fmt::format("{:>5}  {:>6}  {:>10}  {:>10}  {:>9}\n", "round", "items", "length", "edit_dist", "alignment");
        for (const auto& x : all) {
          out_ << fmt::format("{:>5}  {:>6}  {:>10}  {:>10}  {:>9}\n", x.round_no, x.item_count,
                              fixed(x.mean_length_words, 2), fixed(x.mean_edit_distance, 2),
                              x.mean_alignment ? fixed(*x.mean_alignment, 2) : std::string("-"));
        }
      }
      return kOk;
    });
  }

  // vocab ------------------------------------------------------------------
  void add_vocab(CLI::App& app) {
    auto* vocab = app.add_subcommand("vocab", "Tokenizer vocabulary tools");
    vocab->require_subcommand(1);
    auto* build = vocab->add_subcommand("build", "Build a frequency-ranked word vocabulary");
    auto inputs = std::make_shared<std::vector<std::string>>();
    auto world = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto size = std::make_shared<std::size_t>(4096);
    build->add_option("--texts", *inputs, "JSONL files; alt_text, caption and text fields are read");
    build->add_option("--world", *world, "World spec JSON; adds every word the world can produce");
    build->add_option("--size", *size, "Total vocabulary size including the 260 reserved and byte ids")
        ->capture_default_str();
    build->add_option("--out", *out, "Output vocabulary file")->required();
    on(build, [=, this] {
      std::vector<std::string> texts;
      for (const auto& path : *inputs) {
        io::for_each_jsonl(path, [&](std::size_t, const Json& j) {
          for (const char* key : {"alt_text", "caption", "text"}) {
            if (auto it = j.find(key); it != j.end() && it->is_string()) texts.push_back(it->get<std::string>());
          }
        });
      }
      if (!world->empty()) {
        for (auto& t : load_world(*world).vocabulary_texts()) texts.push_back(std::move(t));
      }
      if (texts.empty()) throw Error(ErrorKind::kValidation, "no input texts (give --texts and/or --world)");
      const auto v = textproc::build_vocab(texts, *size);
      textproc::save_vocab(v, *out);
      out_ << Json{{"size", v.size()}, {"learned", v.learned_count()}, {"texts", texts.size()}}.dump() << '\n';
      return kOk;
    });
  }

  // synth ------------------------------------------------------------------
  void add_synth(CLI::App& app) {
    auto* sub = app.add_subcommand("synth", "Generate a synthetic concept world and item corpus");
    auto spec = std::make_shared<train::WorldSpec>();
    auto dir = std::make_shared<std::string>();
    auto count = std::make_shared<std::size_t>(1000);
    auto first = std::make_shared<std::uint64_t>(0);
    sub->add_option("--out-dir", *dir, "Output directory")->required();
    sub->add_option("--count", *count, "Number of items")->capture_default_str();
    sub->add_option("--first", *first, "Index of the first item (disjoint ranges give disjoint splits)")
        ->capture_default_str();
    sub->add_option("--n-concepts", spec->n_concepts, "Number of concepts")->capture_default_str();
    sub->add_option("--rare-fraction", spec->rare_fraction, "Share of concepts invisible in the image embedding")
        ->capture_default_str();
    sub->add_option("--concepts-per-image", spec->concepts_per_image, "Concepts per image")->capture_default_str();
    sub->add_option("--distractor-rate", spec->distractor_rate, "Chance an alt-text names an absent concept")
        ->capture_default_str();
    sub->add_option("--embed-dim", spec->embed_dim, "Image embedding dimension")->capture_default_str();
    on(sub, [=, this] {
      train::WorldSpec s = *spec;
      s.seed = g_.seed;
      const train::World world(s);
      fs::create_directories(*dir);
      const fs::path d = *dir;
      write_json_file(d / "world.json", train::to_json(s));
      std::vector<Json> items, captions;
      corpus::EmbeddingMatrix emb;
      emb.dim = static_cast<std::uint32_t>(s.embed_dim);
      for (std::size_t i = 0; i < *count; ++i) {
        const auto it = world.item(*first + i);
        const std::vector<float> row(it.image.begin(), it.image.end());
        const auto r = emb.add_row(row, it.id);
        items.push_back({{"id", it.id},
                         {"image_ref", "synthetic://" + it.id},
                         {"alt_text", it.alt_text},
                         {"source", "synthetic"},
                         {"embedding_row", r}});
        captions.push_back({{"id", it.id}, {"caption", it.caption}});
      }
      io::write_jsonl_atomic(d / "items.jsonl", items);
      io::write_jsonl_atomic(d / "captions.jsonl", captions);
      corpus::save_embeddings(emb, d / "embeddings.bin");
      out_ << Json{{"items", *count}, {"out_dir", d.string()}, {"world", train::to_json(s)}}.dump() << '\n';
      return kOk;
    });
  }

  // train ------------------------------------------------------------------
  struct TrainArgs {
    std::string items, embeddings, vocab, captions, rounds, out, init, log;
    int epochs = -1;
    train::TrainConfig cfg;
    ModelFlags model;
  };

  void add_train_flags(CLI::App* sub, TrainArgs& t, bool finetune) {
    sub->add_option("--items", t.items, "Items JSONL (alt-texts and embedding rows)")->required();
    sub->add_option("--embeddings", t.embeddings, "Image embedding matrix")->required();
    sub->add_option("--vocab", t.vocab, "Vocabulary file")->required();
    sub->add_option("--captions", t.captions, "Target captions JSONL (id, caption)");
    sub->add_option("--rounds", t.rounds, "Rounds JSONL; each item's latest round is its target");
    sub->add_option("--out", t.out, "Output model file")->required();
    auto* init = sub->add_option("--init", t.init, "Start from this model file");
    if (finetune) init->required();
    sub->add_option("--log", t.log, "Per-step JSONL training log");
    sub->add_option("--epochs", t.epochs, "Override the configured epoch count");
    sub->add_option("--batch-size", t.cfg.batch_size, "Examples per update")->capture_default_str();
    sub->add_option("--lr", t.cfg.peak_lr, "Peak learning rate")->capture_default_str();
    sub->add_option("--warmup", t.cfg.warmup_steps, "Linear warmup steps")->capture_default_str();
    sub->add_option("--min-lr-ratio", t.cfg.min_lr_ratio, "Final lr as a fraction of the peak")->capture_default_str();
    sub->add_option("--empty-alt-prob", t.cfg.empty_alt_prob, "Chance each example trains without its alt-text")
        ->capture_default_str();
    sub->add_option("--weight-decay", t.cfg.weight_decay, "Decoupled weight decay")->capture_default_str();
    sub->add_option("--clip", t.cfg.grad_clip_norm, "Global gradient-norm clip (0 disables)")->capture_default_str();
    t.model.add(sub);
  }

  int run_train(const TrainArgs& t, bool finetune) {
    if (t.captions.empty() == t.rounds.empty()) {
      throw Error(ErrorKind::kValidation, "exactly one of --captions or --rounds is required");
    }
    const auto c = load_corpus(t.items, t.rounds.empty() ? std::nullopt : std::optional<fs::path>(t.rounds));
    const auto emb = corpus::load_embeddings(t.embeddings);
    const auto vocab = textproc::load_vocab(t.vocab);
    std::unordered_map<std::string, std::string> targets;
    if (!t.captions.empty()) {
      targets = caption_map(t.captions);
    } else {
      for (const auto& it : c.items()) {
        if (c.max_round(it.id) > 1) targets[it.id] = c.latest(it.id)->caption;
      }
    }

    std::vector<train::Example> data;
    for (const auto& it : c.items()) {
      auto tg = targets.find(it.id);
      if (tg == targets.end()) continue;
      data.push_back({it.id, image_for(emb, it), textproc::tokenize(vocab, it.alt_text),
                      textproc::tokenize(vocab, tg->second)});
    }
    if (data.empty()) throw Error(ErrorKind::kValidation, "no items have a target caption");

    model::ModelParams params;
    if (!t.init.empty()) {
      model::ModelConfig expect;
      expect.vocab_size = static_cast<int>(vocab.size());
      expect.image_embed_dim = static_cast<int>(emb.dim);
      params = model::load_model(t.init, &expect);
    } else {
      params = model::init_model(t.model.config(static_cast<int>(vocab.size()), static_cast<int>(emb.dim)), g_.seed);
    }

    auto cfg = t.cfg;
    cfg.seed = g_.seed;
    const int epochs = t.epochs >= 0 ? t.epochs : (finetune ? cfg.finetune_epochs : cfg.pretrain_epochs);
    train::TrainHooks hooks;
    if (!t.log.empty()) hooks.log_path = t.log;
    const int total = epochs * train::steps_per_epoch(data.size(), cfg.batch_size);
    hooks.on_step = [&](const train::StepLog& s) {
      if (s.step % 50 == 0 || s.step == total) {
        log_->info("step {}/{} loss {:.4f} lr {:.3g} grad_norm {:.3g}", s.step, total, s.loss, s.lr, s.grad_norm);
      }
    };
    log_->info("{} {} examples for {} epochs ({} steps), {} parameters", finetune ? "finetuning on" : "pretraining on",
               data.size(), epochs, total, params.count());
    const auto res = train::train_epochs(std::move(params), data, cfg, epochs, hooks);
    model::save_model(res.params, t.out);
    out_ << Json{{"steps", res.curve.size()},
                 {"examples", data.size()},
                 {"final_loss", res.curve.empty() ? Json(nullptr) : Json(res.curve.back().loss)},
                 {"empty_alt_fraction", res.total_slots ? double(res.empty_alt_slots) / res.total_slots : 0.0},
                 {"model", t.out}}
                .dump()
         << '\n';
    return kOk;
  }

  void add_train(CLI::App& app) {
    auto* tr = app.add_subcommand("train", "Train the captioner");
    tr->require_subcommand(1);
    auto pre = std::make_shared<TrainArgs>();
    auto ft = std::make_shared<TrainArgs>();
    ft->cfg.warmup_steps = 0;
    auto* p = tr->add_subcommand("pretrain", "Train on (image, alt-text, caption) triples");
    add_train_flags(p, *pre, false);
    on(p, [=, this] { return run_train(*pre, false); });
    auto* f = tr->add_subcommand("finetune", "Continue training on annotated captions");
    add_train_flags(f, *ft, true);
    on(f, [=, this] { return run_train(*ft, true); });
  }

  // caption ----------------------------------------------------------------
  void add_caption(CLI::App& app) {
    auto* sub = app.add_subcommand("caption", "Caption one image, optionally conditioned on an alt-text");
    struct Args {
      std::string model, vocab, embeddings, id, alt;
      model::DecodeConfig dec;
    };
    auto a = std::make_shared<Args>();
    sub->add_option("--model", a->model, "Model file")->required();
    sub->add_option("--vocab", a->vocab, "Vocabulary file")->required();
    sub->add_option("--embeddings", a->embeddings, "Image embedding matrix")->required();
    sub->add_option("--embedding-id", a->id, "Item id of the image row")->required();
    sub->add_option("--alt", a->alt, "Alt-text to condition on (omitted: empty alt)");
    sub->add_option("--temperature", a->dec.temperature, "Sampling temperature (0 = greedy)")->capture_default_str();
    sub->add_option("--top-p", a->dec.top_p, "Nucleus mass")->capture_default_str();
    sub->add_option("--max-tokens", a->dec.max_tokens, "Maximum caption tokens")->capture_default_str();
    on(sub, [=, this] {
      const auto vocab = textproc::load_vocab(a->vocab);
      const auto emb = corpus::load_embeddings(a->embeddings);
      model::ModelConfig expect;
      expect.vocab_size = static_cast<int>(vocab.size());
      expect.image_embed_dim = static_cast<int>(emb.dim);
      const auto params = model::load_model(a->model, &expect);
      const auto row = emb.find(a->id);
      if (!row) throw Error(ErrorKind::kValidation, fmt::format("no embedding row for id '{}'", a->id));
      auto dec = a->dec;
      dec.seed = g_.seed;
      const auto ids = model::generate(params, std::vector<double>(row->begin(), row->end()),
                                       textproc::tokenize(vocab, a->alt), dec);
      out_ << textproc::detokenize(vocab, ids).text << '\n';
      return kOk;
    });
  }

  // eval -------------------------------------------------------------------
  void add_eval(CLI::App& app) {
    auto* sub = app.add_subcommand("eval", "Score predicted captions against references");
    struct Args {
      std::string pred, ref, format = "json", images, texts;
      std::size_t jobs = 1;
      bool per_item = false;
    };
    auto a = std::make_shared<Args>();
    sub->add_option("--pred", a->pred, "Predictions JSONL (id, caption|text)")->required();
    sub->add_option("--ref", a->ref, "References JSONL (id, caption|text); repeat ids for multiple references")
        ->required();
    sub->add_option("--format", a->format, "Output format")->check(CLI::IsMember({"json", "table"}))->capture_default_str();
    sub->add_option("--jobs", a->jobs, "Parallel workers (results do not depend on this)")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    sub->add_option("--images", a->images, "Image embedding matrix for the alignment score");
    sub->add_option("--text-embeddings", a->texts, "Precomputed caption embeddings keyed by prediction id");
    sub->add_flag("--per-item", a->per_item, "Include per-item scores (json only)");
    on(sub, [=, this] {
      std::vector<std::pair<std::string, std::string>> preds;
      for (auto& p : read_captions(a->pred)) preds.emplace_back(std::move(p.id), std::move(p.text));
      std::unordered_map<std::string, std::vector<std::string>> refs;
      for (auto& r : read_captions(a->ref)) refs[r.id].push_back(std::move(r.text));
      if (a->images.empty() != a->texts.empty()) {
        throw Error(ErrorKind::kValidation, "--images and --text-embeddings must be given together");
      }
      std::optional<corpus::EmbeddingMatrix> images, texts;
      metrics::EvalEmbeddings ee;
      if (!a->images.empty()) {
        images = corpus::load_embeddings(a->images);
        texts = corpus::load_embeddings(a->texts);
        ee.images = &*images;
        ee.texts = &*texts;
      }
      const auto res = metrics::evaluate_suite(preds, refs, textproc::Lexicon::builtin(), images ? &ee : nullptr,
                                               a->jobs);
      auto report_json = [](const metrics::MetricReport& m) {
        Json j{{"bleu1", m.bleu1},          {"meteor", m.meteor},       {"rouge_l", m.rouge_l},
               {"cider_d", m.cider_d},      {"np_precision", m.np_precision}, {"np_recall", m.np_recall},
               {"np_f1", m.np_f1},          {"n_items", m.n_items}};
        if (m.clip_score) j["clip_score"] = *m.clip_score;
        return j;
      };
      if (a->format == "json") {
        Json j = report_json(res.aggregate);
        if (a->per_item) {
          Json items = Json::array();
          for (const auto& it : res.items) {
            auto s = report_json(it.scores);
            s["id"] = it.id;
            items.push_back(std::move(s));
          }
          j["items"] = std::move(items);
        }
        out_ << j.dump() << '\n';
      } else {
        const auto& m = res.aggregate;
        std::vector<std::pair<std::string, std::string>> rows = {
            {"items", std::to_string(m.n_items)}, {"bleu1", fixed(m.bleu1)},   {"meteor", fixed(m.meteor)},
            {"rouge_l", fixed(m.rouge_l)},        {"cider_d", fixed(m.cider_d)}, {"np_precision", fixed(m.np_precision)},
            {"np_recall", fixed(m.np_recall)},    {"np_f1", fixed(m.np_f1)}};
        if (m.clip_score) rows.emplace_back("clip_score", fixed(*m.clip_score, 2));
        for (const auto& [k, v] : rows) out_ << fmt::format("{:<14}{:>10}\n", k, v);
      }
      return kOk;
    });
  }

  // mix --------------------------------------------------------------------
  void add_mix(CLI::App& app) {
    auto* sub = app.add_subcommand("mix", "Choose alt-text or synthetic caption per item with probability p");
    struct Args {
      std::string items, rounds, synthetic, out;
      int synthetic_round = 0;
      double p = 0.15;
    };
    auto a = std::make_shared<Args>();
    sub->add_option("--items", a->items, "Items JSONL")->required();
    sub->add_option("--p", a->p, "Probability of the synthetic caption")->check(CLI::Range(0.0, 1.0))->capture_default_str();
    sub->add_option("--rounds", a->rounds, "Rounds JSONL (with --synthetic-round)");
    sub->add_option("--synthetic-round", a->synthetic_round, "Round whose captions are the synthetic ones");
    sub->add_option("--synthetic", a->synthetic, "Synthetic captions JSONL (id, caption|text)");
    sub->add_option("--out", a->out, "Training-set JSONL (id, text, source)")->required();
    on(sub, [=, this] {
      const bool by_round = a->synthetic_round > 0;
      if (by_round == !a->synthetic.empty()) {
        throw Error(ErrorKind::kValidation, "exactly one of --synthetic-round or --synthetic is required");
      }
      if (by_round && a->rounds.empty()) throw Error(ErrorKind::kValidation, "--synthetic-round needs --rounds");
      const auto c = load_corpus(a->items, a->rounds.empty() ? std::nullopt : std::optional<fs::path>(a->rounds));
      corpus::SyntheticSource src = by_round ? corpus::SyntheticSource(a->synthetic_round)
                                             : corpus::SyntheticSource(caption_map(a->synthetic));
      const auto choices = corpus::mix_sample(c, {a->p, g_.seed}, src);
      corpus::export_training_set(choices, a->out);
      std::size_t synthetic = 0;
      for (const auto& ch : choices) synthetic += ch.chosen_source == corpus::CaptionSource::kSynthetic ? 1 : 0;
      out_ << Json{{"items", choices.size()},
                   {"synthetic", synthetic},
                   {"fraction", choices.empty() ? 0.0 : double(synthetic) / double(choices.size())},
                   {"p", a->p},
                   {"seed", g_.seed}}
                  .dump()
           << '\n';
      return kOk;
    });
  }

  // bench ------------------------------------------------------------------
  void add_bench(CLI::App& app) {
    auto* sub = app.add_subcommand("bench", "Measure full-generation throughput at one layout length");
    struct Args {
      int seq_len = 0;
      double duration = 2.0;
      int batch = 1;
      std::string model;
      int vocab = 512;
      int image_dim = 64;
      ModelFlags flags;
    };
    auto a = std::make_shared<Args>();
    sub->add_option("--seq-len", a->seq_len, "Layout length = n_visual + alt tokens + max_gen")->required();
    sub->add_option("--duration", a->duration, "Timed seconds (>= 1)")->capture_default_str();
    sub->add_option("--batch", a->batch, "Items per timing batch")->capture_default_str();
    sub->add_option("--model", a->model, "Model file (default: random weights of the given shape)");
    sub->add_option("--vocab-size", a->vocab, "Vocabulary size for random weights")->capture_default_str();
    sub->add_option("--image-dim", a->image_dim, "Image embedding size for random weights")->capture_default_str();
    a->flags.add(sub);
    on(sub, [=, this] {
      const auto params = a->model.empty() ? model::init_model(a->flags.config(a->vocab, a->image_dim), g_.seed)
                                           : model::load_model(a->model);
      const auto r = train::bench_throughput(params, a->seq_len, a->batch, a->duration, g_.seed);
      out_ << Json{{"sequence_length", r.sequence_length}, {"items_per_second", r.items_per_second},
                   {"parameter_count", r.parameter_count}, {"wall_seconds", r.wall_seconds},
                   {"batch_size", r.batch_size},           {"items", r.items},
                   {"config_hash", r.config_hash}}
                  .dump()
           << '\n';
      return kOk;
    });
  }

  // serve ------------------------------------------------------------------
  void add_serve(CLI::App& app) {
    auto* sub = app.add_subcommand("serve", "Run the annotation HTTP service");
    struct Args {
      std::string host = "127.0.0.1";
      int port = 8080;
      std::string events;
    };
    auto a = std::make_shared<Args>();
    sub->add_option("--host", a->host, "Bind address")->capture_default_str();
    sub->add_option("--port", a->port, "Port (0 picks a free one)")->check(CLI::Range(0, 65535))->capture_default_str();
    sub->add_option("--events", a->events, "Append-only event log, replayed at startup");
    on(sub, [=, this] {
      annosvc::ServiceOptions opts;
      if (!a->events.empty()) opts.log_path = a->events;
      annosvc::Service svc(opts);
      annosvc::HttpServer http(svc);
      const int port = http.bind(a->host, a->port);
      log_->info("listening on http://{}:{}", a->host, port);
      out_ << Json{{"host", a->host}, {"port", port}}.dump() << std::endl;
      http.serve();
      return kOk;
    });
  }

  // gradcheck --------------------------------------------------------------
  void add_gradcheck(CLI::App& app) {
    auto* sub = app.add_subcommand("gradcheck", "Compare analytic gradients with central differences on a tiny model");
    struct Args {
      double epsilon = 1e-3;
      std::size_t coords = 0;
      double tolerance = 1e-4;
    };
    auto a = std::make_shared<Args>();
    sub->add_option("--epsilon", a->epsilon, "Finite-difference step")->capture_default_str();
    sub->add_option("--coords", a->coords, "Random coordinates to check (0 = all)")->capture_default_str();
    sub->add_option("--tolerance", a->tolerance, "Maximum accepted relative error")->capture_default_str();
    on(sub, [=, this] {
      model::ModelConfig cfg;
      cfg.d_model = 16;
      cfg.n_heads = 2;
      cfg.n_decoder_layers = 2;
      cfg.n_mapping_layers = 1;
      cfg.vocab_size = 64;
      cfg.image_embed_dim = 16;
      cfg.n_visual = 4;
      cfg.m_alt = 8;
      cfg.max_gen = 16;
      auto params = model::init_model(cfg, g_.seed);
      Rng rng(mix_seed(g_.seed, 77));
      for (auto& v : params.values) v += 0.05 * rng.normal();
      std::vector<train::Example> data(2);
      for (auto& ex : data) {
        for (int k = 0; k < cfg.image_embed_dim; ++k) ex.image.push_back(rng.normal());
        for (int k = 0; k < 5; ++k) ex.alt.push_back(static_cast<textproc::TokenId>(4 + rng.below(60)));
        for (int k = 0; k < 9; ++k) ex.caption.push_back(static_cast<textproc::TokenId>(4 + rng.below(60)));
      }
      const auto rep = train::grad_check(params, train::make_batch(data, cfg), a->epsilon, a->coords, g_.seed);
      const bool pass = rep.max_relative_error < a->tolerance;
      out_ << Json{{"max_relative_error", rep.max_relative_error}, {"max_abs_error", rep.max_abs_error},
                   {"coordinates", rep.coordinates}, {"worst_index", rep.worst_index}, {"pass", pass}}
                  .dump()
           << '\n';
      if (!pass) log_->error("relative error {:.3g} exceeds {:.3g}", rep.max_relative_error, a->tolerance);
      return pass ? kOk : kInternalFailure;
    });
  }

  std::ostream& out_;
  std::ostream& err_;
  std::shared_ptr<spdlog::logger> log_;
  Globals g_;
  std::vector<std::pair<CLI::App*, std::function<int()>>> handlers_;
};

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  Tool tool(out, err);
  return tool.main(argc, argv);
}

}  // namespace altogether::cli
