#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <fmt/format.h>

#include "altogether/error.hpp"
#include "altogether/model.hpp"
#include "model_internal.hpp"

namespace altogether::model {

using detail::CMap;
using detail::Mat;
using textproc::kBos;
using textproc::kEmptyAlt;
using textproc::kEos;
using textproc::kPad;

void DecodeConfig::validate(const ModelConfig& cfg) const {
  (void)cfg;
  if (!std::isfinite(temperature) || temperature < 0.0) {
    throw Error(ErrorKind::kValidation, fmt::format("temperature must be >= 0 (got {})", temperature));
  }
  if (!(top_p > 0.0 && top_p <= 1.0)) {
    throw Error(ErrorKind::kValidation, fmt::format("top_p must be in (0, 1] (got {})", top_p));
  }
  if (max_tokens <= 0) {
    throw Error(ErrorKind::kValidation, fmt::format("max_tokens must be positive (got {})", max_tokens));
  }
}

std::vector<double> nucleus_filter(std::span<const double> probs, double top_p) {
  if (!(top_p > 0.0 && top_p <= 1.0)) {
    throw Error(ErrorKind::kValidation, fmt::format("top_p must be in (0, 1] (got {})", top_p));
  }
  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  const double total = std::accumulate(probs.begin(), probs.end(), 0.0);
  std::vector<double> out(probs.size(), 0.0);
  double mass = 0.0;
  for (std::size_t idx : order) {
    if (probs[idx] <= 0.0) break;
    out[idx] = probs[idx];
    mass += probs[idx];
    if (mass >= top_p * total) break;
  }
  if (mass <= 0.0) throw Error(ErrorKind::kDegenerate, "probability vector has no mass");
  for (double& v : out) v /= mass;
  return out;
}

TokenId sample_token(std::span<const double> logits, double temperature, double top_p, Rng& rng) {
  if (logits.empty()) throw Error(ErrorKind::kShape, "empty logits");
  if (temperature == 0.0) {
    return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) p[i] = std::exp((logits[i] - mx) / temperature);
  const auto filtered = nucleus_filter(p, top_p);
  const double u = rng.uniform();
  double acc = 0.0;
  std::size_t last = 0;
  for (std::size_t i = 0; i < filtered.size(); ++i) {
    if (filtered[i] <= 0.0) continue;
    acc += filtered[i];
    last = i;
    if (u < acc) return static_cast<TokenId>(i);
  }
  return static_cast<TokenId>(last);
}

namespace {

// Decoder that consumes one position at a time, keeping per-layer keys and
// values so each step costs O(context).
class IncrementalDecoder {
 public:
  IncrementalDecoder(const ModelParams& params, std::size_t capacity)
      : p_(params), cfg_(params.config), off_(detail::build_layout(params.config, nullptr)) {
    const int d = cfg_.d_model;
    keys_.assign(off_.dec_blocks.size(), Mat(static_cast<Eigen::Index>(capacity), d));
    values_.assign(off_.dec_blocks.size(), Mat(static_cast<Eigen::Index>(capacity), d));
  }

  const detail::Offsets& offsets() const { return off_; }

  // Pushes the input embedding (token + position already added) and returns
  // the final hidden state for that position.
  Eigen::RowVectorXd push(const Eigen::RowVectorXd& x_in) {
    const double* P = p_.values.data();
    const int d = cfg_.d_model;
    const int H = cfg_.n_heads;
    const int dh = cfg_.head_dim();
    const int ff = cfg_.d_ff();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const Eigen::Index t = len_;
    if (!keys_.empty() && t >= keys_[0].rows()) throw Error(ErrorKind::kLength, "decoder context is full");
    Eigen::RowVectorXd x = x_in;
    for (std::size_t l = 0; l < off_.dec_blocks.size(); ++l) {
      const auto& o = off_.dec_blocks[l];
      const Eigen::RowVectorXd h = layer_norm(x, P + o.ln1_g, P + o.ln1_b);
      Eigen::RowVectorXd qkv = h * CMap(P + o.qkv_w, d, 3 * d);
      qkv += Eigen::Map<const Eigen::RowVectorXd>(P + o.qkv_b, 3 * d);
      keys_[l].row(t) = qkv.segment(d, d);
      values_[l].row(t) = qkv.segment(2 * d, d);
      Eigen::RowVectorXd att(d);
      for (int hh = 0; hh < H; ++hh) {
        const auto K = keys_[l].block(0, hh * dh, t + 1, dh);
        const auto V = values_[l].block(0, hh * dh, t + 1, dh);
        Eigen::VectorXd s = (K * qkv.segment(hh * dh, dh).transpose()) * scale;
        const double mx = s.maxCoeff();
        s = (s.array() - mx).exp();
        s /= s.sum();
        att.segment(hh * dh, dh) = s.transpose() * V;
      }
      x += att * CMap(P + o.proj_w, d, d);
      x += Eigen::Map<const Eigen::RowVectorXd>(P + o.proj_b, d);
      const Eigen::RowVectorXd h2 = layer_norm(x, P + o.ln2_g, P + o.ln2_b);
      Eigen::RowVectorXd f = h2 * CMap(P + o.fc_w, d, ff);
      f += Eigen::Map<const Eigen::RowVectorXd>(P + o.fc_b, ff);
      f = f.unaryExpr([](double v) {
        return 0.5 * v * (1.0 + std::tanh(0.7978845608028654 * (v + 0.044715 * v * v * v)));
      });
      x += f * CMap(P + o.fc2_w, ff, d);
      x += Eigen::Map<const Eigen::RowVectorXd>(P + o.fc2_b, d);
    }
    ++len_;
    return x;
  }

  std::vector<double> logits(const Eigen::RowVectorXd& hidden) const {
    const double* P = p_.values.data();
    const int d = cfg_.d_model;
    const Eigen::RowVectorXd h = layer_norm(hidden, P + off_.lnf_g, P + off_.lnf_b);
    Eigen::RowVectorXd z = h * CMap(P + off_.head_w, d, cfg_.vocab_size);
    z += Eigen::Map<const Eigen::RowVectorXd>(P + off_.head_b, cfg_.vocab_size);
    return std::vector<double>(z.data(), z.data() + z.size());
  }

  Eigen::RowVectorXd token_input(TokenId id, int position) const {
    const double* P = p_.values.data();
    const int d = cfg_.d_model;
    return CMap(P + off_.tok_emb, cfg_.vocab_size, d).row(id) + CMap(P + off_.pos_emb, cfg_.total_len(), d).row(position);
  }

  Eigen::RowVectorXd visual_input(const Mat& mapped, int position) const {
    const double* P = p_.values.data();
    return mapped.row(1 + position) + CMap(P + off_.pos_emb, cfg_.total_len(), cfg_.d_model).row(position);
  }

 private:
  static Eigen::RowVectorXd layer_norm(const Eigen::RowVectorXd& x, const double* g, const double* b) {
    const auto d = x.size();
    const double mu = x.mean();
    const double var = (x.array() - mu).square().mean();
    const double rstd = 1.0 / std::sqrt(var + detail::kLnEps);
    return ((x.array() - mu) * rstd).matrix().cwiseProduct(Eigen::Map<const Eigen::RowVectorXd>(g, d)) +
           Eigen::Map<const Eigen::RowVectorXd>(b, d);
  }

  const ModelParams& p_;
  const ModelConfig& cfg_;
  detail::Offsets off_;
  std::vector<Mat> keys_, values_;
  Eigen::Index len_ = 0;
};

void check_image(const ModelConfig& cfg, std::span<const double> image_vec) {
  if (image_vec.size() != static_cast<std::size_t>(cfg.image_embed_dim)) {
    throw Error(ErrorKind::kShape, fmt::format("image embedding has {} values, model expects {}",
                                               image_vec.size(), cfg.image_embed_dim));
  }
  for (double v : image_vec) {
    if (!std::isfinite(v)) throw Error(ErrorKind::kDomain, "image embedding contains non-finite values");
  }
}

void check_ids(const ModelConfig& cfg, std::span<const TokenId> ids, const char* what) {
  for (TokenId id : ids) {
    if (id < 0 || id >= cfg.vocab_size) {
      throw Error(ErrorKind::kRange, fmt::format("{} token id {} outside vocabulary of {}", what, id, cfg.vocab_size));
    }
  }
}

// Feeds the visual tokens and alt ids; returns the hidden state at the last
// pushed position (unused) and leaves the decoder ready for the caption.
void feed_prefix(IncrementalDecoder& dec, const ModelParams& params, std::span<const double> image_vec,
                 std::span<const TokenId> alt_ids) {
  const auto& cfg = params.config;
  Mat map_in;
  std::vector<detail::BlockCache> blocks;
  detail::mapping_forward(params, dec.offsets(), image_vec, map_in, blocks);
  const Mat& mapped = blocks.empty() ? map_in : blocks.back().y;
  for (int j = 0; j < cfg.n_visual; ++j) dec.push(dec.visual_input(mapped, j));
  const std::size_t n_alt = std::min(alt_ids.size(), static_cast<std::size_t>(cfg.m_alt));
  for (std::size_t i = 0; i < n_alt; ++i) dec.push(dec.token_input(alt_ids[i], cfg.n_visual + static_cast<int>(i)));
}

std::vector<TokenId> run_generation(const ModelParams& params, std::span<const double> image_vec,
                                    std::span<const TokenId> alt_ids, const DecodeConfig& dcfg) {
  const auto& cfg = params.config;
  cfg.validate();
  dcfg.validate(cfg);
  check_image(cfg, image_vec);
  check_ids(cfg, alt_ids, "alt");
  IncrementalDecoder dec(params, static_cast<std::size_t>(cfg.total_len()));
  feed_prefix(dec, params, image_vec, alt_ids);

  const int cap0 = cfg.n_visual + cfg.m_alt;
  const int limit = std::min(dcfg.max_tokens, cfg.max_gen);
  Rng rng(dcfg.seed);
  std::vector<TokenId> out;
  out.reserve(static_cast<std::size_t>(limit));
  TokenId next = kBos;
  for (int step = 0; step < limit; ++step) {
    const auto hidden = dec.push(dec.token_input(next, cap0 + step));
    auto logits = dec.logits(hidden);
    // Structural tokens never appear inside a caption.
    for (TokenId banned : {kPad, kBos, kEmptyAlt}) logits[static_cast<std::size_t>(banned)] = -std::numeric_limits<double>::infinity();
    next = sample_token(logits, dcfg.temperature, dcfg.top_p, rng);
    if (next == kEos && dcfg.stop_at_eos) break;
    out.push_back(next);
  }
  return out;
}

}  // namespace

std::vector<TokenId> generate(const ModelParams& params, std::span<const double> image_vec,
                              std::span<const TokenId> alt_ids, const DecodeConfig& cfg) {
  if (alt_ids.empty()) {
    const TokenId empty[] = {kEmptyAlt};
    return run_generation(params, image_vec, empty, cfg);
  }
  return run_generation(params, image_vec, alt_ids, cfg);
}

std::vector<TokenId> generate_raw(const ModelParams& params, std::span<const double> image_vec,
                                  std::span<const TokenId> alt_ids, const DecodeConfig& cfg) {
  return run_generation(params, image_vec, alt_ids, cfg);
}

std::vector<std::vector<double>> prefix_logits(const ModelParams& params, std::span<const double> image_vec,
                                               std::span<const TokenId> alt_ids,
                                               std::span<const TokenId> caption_prefix) {
  const auto& cfg = params.config;
  cfg.validate();
  check_image(cfg, image_vec);
  check_ids(cfg, alt_ids, "alt");
  check_ids(cfg, caption_prefix, "caption");
  if (caption_prefix.size() + 1 > static_cast<std::size_t>(cfg.max_gen)) {
    throw Error(ErrorKind::kLength, fmt::format("caption prefix of {} tokens exceeds max_gen {}",
                                                caption_prefix.size(), cfg.max_gen));
  }
  IncrementalDecoder dec(params, static_cast<std::size_t>(cfg.total_len()));
  const TokenId empty[] = {kEmptyAlt};
  feed_prefix(dec, params, image_vec, alt_ids.empty() ? std::span<const TokenId>(empty) : alt_ids);
  const int cap0 = cfg.n_visual + cfg.m_alt;
  std::vector<std::vector<double>> out;
  TokenId next = kBos;
  for (std::size_t i = 0; i <= caption_prefix.size(); ++i) {
    out.push_back(dec.logits(dec.push(dec.token_input(next, cap0 + static_cast<int>(i)))));
    if (i < caption_prefix.size()) next = caption_prefix[i];
  }
  return out;
}

}  // namespace altogether::model
