#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "altogether/corpus.hpp"
#include "altogether/error.hpp"
#include "altogether/metrics.hpp"
#include "altogether/model.hpp"
#include "altogether/textproc.hpp"
#include "altogether/train.hpp"
#include "altogether/world.hpp"

namespace py = pybind11;
using namespace altogether;

namespace {

py::dict report_dict(const metrics::MetricReport& m) {
  py::dict d;
  d["bleu1"] = m.bleu1;
  d["meteor"] = m.meteor;
  d["rouge_l"] = m.rouge_l;
  d["cider_d"] = m.cider_d;
  d["np_precision"] = m.np_precision;
  d["np_recall"] = m.np_recall;
  d["np_f1"] = m.np_f1;
  d["n_items"] = m.n_items;
  if (m.clip_score) d["clip_score"] = *m.clip_score;
  return d;
}

py::dict stats_dict(const corpus::RoundStats& s) {
  py::dict d;
  d["round_no"] = s.round_no;
  d["item_count"] = s.item_count;
  d["mean_length_words"] = s.mean_length_words;
  d["mean_edit_distance"] = s.mean_edit_distance;
  d["mean_alignment"] = s.mean_alignment ? py::cast(*s.mean_alignment) : py::none();
  return d;
}

model::ModelConfig config_from_kwargs(const py::kwargs& kw) {
  model::ModelConfig c;
  for (auto [key, value] : kw) {
    const auto k = key.cast<std::string>();
    const int v = value.cast<int>();
    if (k == "d_model") c.d_model = v;
    else if (k == "n_heads") c.n_heads = v;
    else if (k == "n_decoder_layers") c.n_decoder_layers = v;
    else if (k == "n_mapping_layers") c.n_mapping_layers = v;
    else if (k == "vocab_size") c.vocab_size = v;
    else if (k == "image_embed_dim") c.image_embed_dim = v;
    else if (k == "n_visual") c.n_visual = v;
    else if (k == "m_alt") c.m_alt = v;
    else if (k == "max_gen") c.max_gen = v;
    else throw py::type_error("unknown model config field '" + k + "'");
  }
  c.validate();
  return c;
}

py::dict config_dict(const model::ModelConfig& c) {
  py::dict d;
  d["d_model"] = c.d_model;
  d["n_heads"] = c.n_heads;
  d["n_decoder_layers"] = c.n_decoder_layers;
  d["n_mapping_layers"] = c.n_mapping_layers;
  d["vocab_size"] = c.vocab_size;
  d["image_embed_dim"] = c.image_embed_dim;
  d["n_visual"] = c.n_visual;
  d["m_alt"] = c.m_alt;
  d["max_gen"] = c.max_gen;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Alt-text re-alignment toolkit";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  (void)base;

  // --- corpus ------------------------------------------------------------
  m.def("edit_distance", &corpus::edit_distance, py::arg("a"), py::arg("b"),
        "Code-point Levenshtein distance with unit costs.");

  m.def(
      "round_stats",
      [](const std::filesystem::path& items, const std::optional<std::filesystem::path>& rounds) {
        auto c = corpus::ingest_pairs(items);
        if (rounds) corpus::load_rounds(c, *rounds);
        int max_round = 0;
        for (const auto& it : c.items()) max_round = std::max(max_round, c.max_round(it.id));
        py::list out;
        for (int r = 1; r <= max_round; ++r) out.append(stats_dict(corpus::round_stats(c, r)));
        return out;
      },
      py::arg("items"), py::arg("rounds") = py::none(),
      "Per-round mean length, edit distance to the previous round and item count.");

  m.def(
      "mix",
      [](const std::vector<std::tuple<std::string, std::string, std::string>>& rows, double p, std::uint64_t seed) {
        std::vector<corpus::MixCandidate> cands;
        cands.reserve(rows.size());
        for (const auto& [id, alt, syn] : rows) cands.push_back({id, alt, syn});
        py::list out;
        for (const auto& c : corpus::mix_sample(cands, {p, seed})) {
          out.append(py::make_tuple(c.item_id, std::string(corpus::caption_source_name(c.chosen_source)),
                                    c.chosen_text));
        }
        return out;
      },
      py::arg("candidates"), py::arg("p"), py::arg("seed") = 0,
      "candidates: (id, alt, synthetic) tuples. Returns (id, source, text) per candidate.");

  // --- textproc ----------------------------------------------------------
  py::class_<textproc::Vocab>(m, "Vocab")
      .def(py::init<>())
      .def_static(
          "build", [](const std::vector<std::string>& texts, std::size_t size) { return textproc::build_vocab(texts, size); },
          py::arg("texts"), py::arg("size"))
      .def_static("load", &textproc::load_vocab, py::arg("path"))
      .def("save", [](const textproc::Vocab& v, const std::filesystem::path& p) { textproc::save_vocab(v, p); })
      .def("__len__", &textproc::Vocab::size)
      .def("token", &textproc::Vocab::token)
      .def("tokenize", [](const textproc::Vocab& v, std::string_view text) { return textproc::tokenize(v, text); })
      .def("detokenize", [](const textproc::Vocab& v, const std::vector<textproc::TokenId>& ids) {
        return textproc::detokenize(v, ids).text;
      });

  m.def(
      "noun_phrases",
      [](std::string_view text) {
        const auto s = textproc::noun_phrases(text, textproc::Lexicon::builtin());
        return std::vector<std::string>(s.begin(), s.end());
      },
      py::arg("text"));

  m.def(
      "starting_prompt_check",
      [](std::string_view text) -> std::optional<std::string> {
        auto r = textproc::starting_prompt_check(text);
        if (!r.accepted) return std::nullopt;
        return r.prompt;
      },
      py::arg("text"), "The matched recommended prompt, or None when the caption is rejected.");

  // --- metrics -----------------------------------------------------------
  m.def(
      "evaluate",
      [](const std::vector<std::pair<std::string, std::string>>& predictions,
         const std::unordered_map<std::string, std::vector<std::string>>& references, std::size_t jobs) {
        const auto res = metrics::evaluate_suite(predictions, references, textproc::Lexicon::builtin(), nullptr, jobs);
        py::dict d = report_dict(res.aggregate);
        py::list items;
        for (const auto& it : res.items) {
          auto s = report_dict(it.scores);
          s["id"] = it.id;
          items.append(s);
        }
        d["items"] = items;
        return d;
      },
      py::arg("predictions"), py::arg("references"), py::arg("jobs") = 1,
      "predictions: (id, caption) pairs; references: id -> list of captions.");

  m.def(
      "np_prf",
      [](std::string_view candidate, std::string_view reference) {
        const auto r = metrics::np_prf(candidate, reference, textproc::Lexicon::builtin());
        return py::make_tuple(r.precision, r.recall, r.f1);
      },
      py::arg("candidate"), py::arg("reference"));

  // --- model -------------------------------------------------------------
  py::class_<model::ModelParams>(m, "Model")
      .def_static(
          "init", [](std::uint64_t seed, const py::kwargs& kw) { return model::init_model(config_from_kwargs(kw), seed); },
          py::arg("seed") = 0)
      .def_static("load", [](const std::filesystem::path& p) { return model::load_model(p); }, py::arg("path"))
      .def("save", [](const model::ModelParams& p, const std::filesystem::path& path) { model::save_model(p, path); })
      .def_property_readonly("config", [](const model::ModelParams& p) { return config_dict(p.config); })
      .def_property_readonly("parameter_count", &model::ModelParams::count)
      .def(
          "generate",
          [](const model::ModelParams& p, const std::vector<double>& image, const std::vector<textproc::TokenId>& alt,
             double temperature, double top_p, int max_tokens, std::uint64_t seed) {
            model::DecodeConfig dc;
            dc.temperature = temperature;
            dc.top_p = top_p;
            dc.max_tokens = max_tokens;
            dc.seed = seed;
            py::gil_scoped_release release;
            return model::generate(p, image, alt, dc);
          },
          py::arg("image"), py::arg("alt") = std::vector<textproc::TokenId>{}, py::arg("temperature") = 0.2,
          py::arg("top_p") = 0.7, py::arg("max_tokens") = 256, py::arg("seed") = 0)
      .def(
          "loss",
          [](const model::ModelParams& p, const std::vector<std::vector<double>>& images,
             const std::vector<std::vector<textproc::TokenId>>& alts,
             const std::vector<std::vector<textproc::TokenId>>& captions) {
            if (images.size() != alts.size() || images.size() != captions.size()) {
              throw py::value_error("images, alts and captions must have the same length");
            }
            std::vector<train::Example> data;
            for (std::size_t i = 0; i < images.size(); ++i) data.push_back({"", images[i], alts[i], captions[i]});
            return model::forward_loss(p, train::make_batch(data, p.config)).mean_loss;
          },
          py::arg("images"), py::arg("alts"), py::arg("captions"), "Mean masked cross-entropy per caption token.");

  // --- train -------------------------------------------------------------
  m.def(
      "lr_schedule",
      [](int step, int total, double peak, int warmup, double min_ratio) {
        train::TrainConfig c;
        c.peak_lr = peak;
        c.warmup_steps = warmup;
        c.min_lr_ratio = min_ratio;
        return train::lr_schedule(step, total, c);
      },
      py::arg("step"), py::arg("total"), py::arg("peak") = 1e-3, py::arg("warmup") = 2000, py::arg("min_ratio") = 0.1);

  m.def(
      "train",
      [](model::ModelParams params, const std::vector<std::vector<double>>& images,
         const std::vector<std::vector<textproc::TokenId>>& alts,
         const std::vector<std::vector<textproc::TokenId>>& captions, int epochs, int batch_size, double lr,
         int warmup, double empty_alt_prob, std::uint64_t seed) {
        if (images.size() != alts.size() || images.size() != captions.size()) {
          throw py::value_error("images, alts and captions must have the same length");
        }
        std::vector<train::Example> data;
        for (std::size_t i = 0; i < images.size(); ++i) {
          data.push_back({std::to_string(i), images[i], alts[i], captions[i]});
        }
        train::TrainConfig c;
        c.batch_size = batch_size;
        c.peak_lr = lr;
        c.warmup_steps = warmup;
        c.empty_alt_prob = empty_alt_prob;
        c.seed = seed;
        train::TrainResult res;
        {
          py::gil_scoped_release release;
          res = train::train_epochs(std::move(params), data, c, epochs);
        }
        std::vector<double> losses;
        for (const auto& s : res.curve) losses.push_back(s.loss);
        return py::make_tuple(std::move(res.params), losses);
      },
      py::arg("model"), py::arg("images"), py::arg("alts"), py::arg("captions"), py::arg("epochs") = 1,
      py::arg("batch_size") = 32, py::arg("lr") = 1e-3, py::arg("warmup") = 0, py::arg("empty_alt_prob") = 0.5,
      py::arg("seed") = 0, "Returns (trained model, per-step losses).");

  py::class_<train::World>(m, "World")
      .def(py::init([](std::uint64_t seed, int n_concepts, double rare_fraction, double distractor_rate,
                       int embed_dim) {
             train::WorldSpec s;
             s.seed = seed;
             s.n_concepts = n_concepts;
             s.rare_fraction = rare_fraction;
             s.distractor_rate = distractor_rate;
             s.embed_dim = embed_dim;
             return train::World(s);
           }),
           py::arg("seed") = 0, py::arg("n_concepts") = 120, py::arg("rare_fraction") = 0.3,
           py::arg("distractor_rate") = 0.2, py::arg("embed_dim") = 64)
      .def("item",
           [](const train::World& w, std::uint64_t index) {
             const auto it = w.item(index);
             py::dict d;
             d["id"] = it.id;
             d["alt_text"] = it.alt_text;
             d["caption"] = it.caption;
             d["image"] = it.image;
             d["concepts"] = it.concepts;
             d["distractors"] = it.distractors;
             return d;
           })
      .def("vocabulary_texts", &train::World::vocabulary_texts)
      .def("embed_text", &train::World::embed_text);
}
