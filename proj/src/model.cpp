#include "altogether/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <Eigen/Dense>
#include <fmt/format.h>

#include "altogether/error.hpp"
#include "altogether/io.hpp"
#include "model_internal.hpp"

namespace altogether::model {

using textproc::kBos;
using textproc::kEmptyAlt;
using textproc::kEos;
using textproc::kPad;

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v <= 0) throw Error(ErrorKind::kConfig, fmt::format("{} must be positive (got {})", name, v));
  };
  positive(d_model, "d_model");
  positive(n_heads, "n_heads");
  positive(n_decoder_layers, "n_decoder_layers");
  if (n_mapping_layers < 0) {
    throw Error(ErrorKind::kConfig, fmt::format("n_mapping_layers must be >= 0 (got {})", n_mapping_layers));
  }
  positive(vocab_size, "vocab_size");
  positive(image_embed_dim, "image_embed_dim");
  positive(n_visual, "n_visual");
  positive(m_alt, "m_alt");
  positive(max_gen, "max_gen");
  if (d_model % n_heads != 0) {
    throw Error(ErrorKind::kConfig,
                fmt::format("d_model ({}) is not divisible by n_heads ({})", d_model, n_heads));
  }
  if (vocab_size < textproc::kFirstByte) {
    throw Error(ErrorKind::kConfig, fmt::format("vocab_size {} cannot hold the {} reserved tokens", vocab_size,
                                                textproc::kFirstByte));
  }
}

namespace detail {

Offsets build_layout(const ModelConfig& cfg, std::vector<TensorSpec>* specs) {
  Offsets off;
  std::size_t cursor = 0;
  auto add = [&](std::string name, std::size_t rows, std::size_t cols) {
    const std::size_t at = cursor;
    if (specs) specs->push_back(TensorSpec{std::move(name), rows, cols, at});
    cursor += rows * cols;
    return at;
  };
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto ff = static_cast<std::size_t>(cfg.d_ff());
  auto add_block = [&](const std::string& prefix) {
    BlockOffsets b;
    b.ln1_g = add(prefix + ".ln1.g", 1, d);
    b.ln1_b = add(prefix + ".ln1.b", 1, d);
    b.qkv_w = add(prefix + ".attn.qkv_w", d, 3 * d);
    b.qkv_b = add(prefix + ".attn.qkv_b", 1, 3 * d);
    b.proj_w = add(prefix + ".attn.proj_w", d, d);
    b.proj_b = add(prefix + ".attn.proj_b", 1, d);
    b.ln2_g = add(prefix + ".ln2.g", 1, d);
    b.ln2_b = add(prefix + ".ln2.b", 1, d);
    b.fc_w = add(prefix + ".mlp.fc_w", d, ff);
    b.fc_b = add(prefix + ".mlp.fc_b", 1, ff);
    b.fc2_w = add(prefix + ".mlp.proj_w", ff, d);
    b.fc2_b = add(prefix + ".mlp.proj_b", 1, d);
    return b;
  };
  off.tok_emb = add("tok_emb", static_cast<std::size_t>(cfg.vocab_size), d);
  off.pos_emb = add("pos_emb", static_cast<std::size_t>(cfg.total_len()), d);
  off.img_w = add("map.img_w", static_cast<std::size_t>(cfg.image_embed_dim), d);
  off.img_b = add("map.img_b", 1, d);
  off.queries = add("map.queries", static_cast<std::size_t>(cfg.n_visual), d);
  for (int i = 0; i < cfg.n_mapping_layers; ++i) off.map_blocks.push_back(add_block(fmt::format("map.block{}", i)));
  for (int i = 0; i < cfg.n_decoder_layers; ++i) off.dec_blocks.push_back(add_block(fmt::format("dec.block{}", i)));
  off.lnf_g = add("lnf.g", 1, d);
  off.lnf_b = add("lnf.b", 1, d);
  off.head_w = add("head_w", d, static_cast<std::size_t>(cfg.vocab_size));
  off.head_b = add("head_b", 1, static_cast<std::size_t>(cfg.vocab_size));
  off.total = cursor;
  return off;
}

}  // namespace detail

std::vector<TensorSpec> parameter_layout(const ModelConfig& cfg) {
  std::vector<TensorSpec> specs;
  detail::build_layout(cfg, &specs);
  return specs;
}

std::size_t parameter_count(const ModelConfig& cfg) { return detail::build_layout(cfg, nullptr).total; }

TensorSpec ModelParams::tensor(std::string_view name) const {
  for (auto& t : parameter_layout(config)) {
    if (t.name == name) return t;
  }
  throw Error(ErrorKind::kNotFound, fmt::format("no parameter tensor named '{}'", name));
}

std::span<double> ModelParams::view(std::string_view name) {
  const auto t = tensor(name);
  return std::span<double>(values).subspan(t.offset, t.size());
}

std::span<const double> ModelParams::view(std::string_view name) const {
  const auto t = tensor(name);
  return std::span<const double>(values).subspan(t.offset, t.size());
}

namespace {
constexpr double kEmbeddingStd = 1.0;
}  // namespace

ModelParams init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelParams p;
  p.config = cfg;
  const auto specs = parameter_layout(cfg);
  p.values.assign(specs.empty() ? 0 : specs.back().offset + specs.back().size(), 0.0);
  Rng rng(seed);
  // Fan-in scaling keeps every LayerNorm input at unit scale, so the loss is
  // smooth at the finite-difference step sizes used by grad_check.
  const double residual_scale =
      1.0 / std::sqrt(2.0 * static_cast<double>(std::max(1, cfg.n_decoder_layers + cfg.n_mapping_layers)));
  for (const auto& t : specs) {
    const std::string_view name = t.name;
    if (name.ends_with(".g")) {
      std::fill_n(p.values.begin() + static_cast<std::ptrdiff_t>(t.offset), t.size(), 1.0);
      continue;
    }
    if (name.ends_with("_b") || name.ends_with(".b")) continue;  // biases start at zero
    double std = kEmbeddingStd;
    if (name.ends_with("_w")) {
      std = 1.0 / std::sqrt(static_cast<double>(t.rows));
      if (name.ends_with("attn.proj_w") || name.ends_with("mlp.proj_w")) std *= residual_scale;
    }
    for (std::size_t i = 0; i < t.size(); ++i) p.values[t.offset + i] = std * rng.normal();
  }
  return p;
}

// --- serialization -----------------------------------------------------------

namespace {
constexpr std::string_view kModelMagic = "ALTM";
constexpr std::uint32_t kModelVersion = 1;
}  // namespace

void save_model(const ModelParams& params, const std::filesystem::path& path) {
  const auto& c = params.config;
  std::string out;
  out.reserve(64 + params.values.size() * 8);
  out.append(kModelMagic);
  io::put_u32(out, kModelVersion);
  for (int v : {c.d_model, c.n_heads, c.n_decoder_layers, c.n_mapping_layers, c.vocab_size,
                c.image_embed_dim, c.n_visual, c.m_alt, c.max_gen}) {
    io::put_u32(out, static_cast<std::uint32_t>(v));
  }
  io::put_u64(out, params.values.size());
  for (double v : params.values) io::put_f64(out, v);
  io::write_file_atomic(path, out);
}

ModelParams load_model(const std::filesystem::path& path, const ModelConfig* expected) {
  const std::string bytes = io::read_file(path);
  if (bytes.size() < 8 || std::string_view(bytes).substr(0, 4) != kModelMagic) {
    throw Error(ErrorKind::kFormat, fmt::format("'{}' is not a model file (bad magic)", path.string()));
  }
  try {
    io::ByteReader rd(bytes);
    rd.take(4);
    const std::uint32_t version = rd.u32();
    if (version != kModelVersion) {
      throw Error(ErrorKind::kFormat, fmt::format("unsupported model version {}", version));
    }
    ModelParams p;
    auto& c = p.config;
    for (int* f : {&c.d_model, &c.n_heads, &c.n_decoder_layers, &c.n_mapping_layers, &c.vocab_size,
                   &c.image_embed_dim, &c.n_visual, &c.m_alt, &c.max_gen}) {
      *f = static_cast<int>(rd.u32());
    }
    try {
      c.validate();
    } catch (const Error& e) {
      throw Error(ErrorKind::kFormat, fmt::format("invalid stored config: {}", e.what()));
    }
    if (expected) {
      if (expected->vocab_size != c.vocab_size) {
        throw Error(ErrorKind::kFormat, fmt::format("vocab_size mismatch: file has {}, expected {}",
                                                    c.vocab_size, expected->vocab_size));
      }
      if (expected->image_embed_dim != c.image_embed_dim) {
        throw Error(ErrorKind::kFormat, fmt::format("image_embed_dim mismatch: file has {}, expected {}",
                                                    c.image_embed_dim, expected->image_embed_dim));
      }
    }
    const std::uint64_t n = rd.u64();
    const std::size_t want = parameter_count(c);
    if (n != want) {
      throw Error(ErrorKind::kFormat,
                  fmt::format("parameter count {} does not match the stored config ({})", n, want));
    }
    if (rd.remaining() != n * 8) {
      throw Error(ErrorKind::kFormat,
                  fmt::format("expected {} bytes of parameters, found {}", n * 8, rd.remaining()));
    }
    p.values.resize(n);
    for (auto& v : p.values) v = rd.f64();
    return p;
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kFormat) {
      throw Error(ErrorKind::kFormat, fmt::format("'{}': {}", path.string(), e.what()));
    }
    throw Error(ErrorKind::kFormat, fmt::format("'{}': truncated model file ({})", path.string(), e.what()));
  }
}

// --- layout ------------------------------------------------------------------

std::size_t SequenceRow::mask_count() const {
  return static_cast<std::size_t>(std::count(loss_mask.begin(), loss_mask.end(), 1));
}

std::size_t SequenceBatch::mask_count() const {
  std::size_t n = 0;
  for (const auto& r : rows) n += r.mask_count();
  return n;
}

SequenceRow layout_sequence(std::span<const TokenId> alt_ids, std::span<const TokenId> caption_ids,
                            const ModelConfig& cfg) {
  const auto nv = static_cast<std::size_t>(cfg.n_visual);
  const auto ma = static_cast<std::size_t>(cfg.m_alt);
  const auto mg = static_cast<std::size_t>(cfg.max_gen);
  const std::size_t total = nv + ma + mg;

  SequenceRow row;
  row.ids.assign(total, kPad);
  row.targets.assign(total, kPad);
  row.roles.assign(total, Role::kPad);
  row.loss_mask.assign(total, 0);

  std::fill_n(row.roles.begin(), nv, Role::kVisual);

  if (alt_ids.empty()) {
    row.ids[nv] = kEmptyAlt;
    row.roles[nv] = Role::kAlt;
  } else {
    const std::size_t n_alt = std::min(alt_ids.size(), ma);
    row.alt_truncated = alt_ids.size() > ma;
    for (std::size_t i = 0; i < n_alt; ++i) {
      row.ids[nv + i] = alt_ids[i];
      row.roles[nv + i] = Role::kAlt;
    }
  }

  const std::size_t cap0 = nv + ma;
  const std::size_t n_cap = std::min(caption_ids.size(), mg - 1);
  row.caption_truncated = caption_ids.size() > mg - 1;
  row.ids[cap0] = kBos;
  row.roles[cap0] = Role::kCaption;
  for (std::size_t i = 0; i < n_cap; ++i) {
    row.ids[cap0 + 1 + i] = caption_ids[i];
    row.roles[cap0 + 1 + i] = Role::kCaption;
  }
  if (n_cap + 1 < mg) {
    row.ids[cap0 + 1 + n_cap] = kEos;
    row.roles[cap0 + 1 + n_cap] = Role::kCaption;
  }
  // BOS predicts the first caption token, the last caption token predicts EOS.
  for (std::size_t i = 0; i <= n_cap; ++i) {
    row.targets[cap0 + i] = i < n_cap ? caption_ids[i] : kEos;
    row.loss_mask[cap0 + i] = 1;
  }
  return row;
}

// --- forward / backward --------------------------------------------------------

namespace {

using detail::BlockCache;
using detail::CMap;
using detail::Mat;
using detail::MMap;

void validate_image(const ModelConfig& cfg, std::span<const double> image_vec) {
  if (image_vec.size() != static_cast<std::size_t>(cfg.image_embed_dim)) {
    throw Error(ErrorKind::kShape, fmt::format("image embedding has {} values, model expects {}",
                                               image_vec.size(), cfg.image_embed_dim));
  }
  for (double v : image_vec) {
    if (!std::isfinite(v)) throw Error(ErrorKind::kDomain, "image embedding contains non-finite values");
  }
}

void validate_batch(const ModelParams& params, const SequenceBatch& batch) {
  const auto& cfg = params.config;
  if (batch.images.size() != batch.rows.size()) {
    throw Error(ErrorKind::kShape, fmt::format("batch has {} images for {} rows", batch.images.size(),
                                               batch.rows.size()));
  }
  const auto total = static_cast<std::size_t>(cfg.total_len());
  for (std::size_t b = 0; b < batch.rows.size(); ++b) {
    validate_image(cfg, batch.images[b]);
    const auto& r = batch.rows[b];
    if (r.ids.size() != total || r.targets.size() != total || r.roles.size() != total ||
        r.loss_mask.size() != total) {
      throw Error(ErrorKind::kShape, fmt::format("row {} does not span the {}-position layout", b, total));
    }
    for (std::size_t j = 0; j < total; ++j) {
      const bool check_id = r.roles[j] == Role::kAlt || r.roles[j] == Role::kCaption;
      if ((check_id && (r.ids[j] < 0 || r.ids[j] >= cfg.vocab_size)) ||
          (r.loss_mask[j] && (r.targets[j] < 0 || r.targets[j] >= cfg.vocab_size))) {
        throw Error(ErrorKind::kRange, fmt::format("row {} position {}: token id out of range", b, j));
      }
      if (r.loss_mask[j] && r.roles[j] != Role::kCaption) {
        throw Error(ErrorKind::kValidation,
                    fmt::format("row {} position {}: loss mask set outside the caption region", b, j));
      }
    }
  }
}

struct ItemCache {
  Mat map_in;
  std::vector<BlockCache> map_blocks;
  std::vector<std::size_t> positions;  // absolute layout position of each active row
  Mat x0;
  std::vector<BlockCache> dec_blocks;
  Mat x_final;
  std::vector<std::size_t> masked;  // indices into the active rows
  detail::LnCache lnf;
  Mat hf;
  Mat probs;
};

// Runs the mapping network and the decoder over one row; returns the sum of
// masked token losses and fills `losses` at layout positions.
double item_forward(const ModelParams& params, const detail::Offsets& off, std::span<const double> image,
                    const SequenceRow& row, ItemCache& c, std::vector<double>* losses) {
  const auto& cfg = params.config;
  const double* P = params.values.data();
  const int d = cfg.d_model;
  const int nv = cfg.n_visual;

  detail::mapping_forward(params, off, image, c.map_in, c.map_blocks);
  const Mat& mapped = c.map_blocks.empty() ? c.map_in : c.map_blocks.back().y;

  c.positions.clear();
  for (std::size_t j = 0; j < row.roles.size(); ++j) {
    if (row.attends(j)) c.positions.push_back(j);
  }
  const auto n = static_cast<Eigen::Index>(c.positions.size());
  c.x0.resize(n, d);
  const CMap tok(P + off.tok_emb, cfg.vocab_size, d);
  const CMap pos(P + off.pos_emb, cfg.total_len(), d);
  for (Eigen::Index k = 0; k < n; ++k) {
    const std::size_t j = c.positions[static_cast<std::size_t>(k)];
    if (row.roles[j] == Role::kVisual) {
      c.x0.row(k) = mapped.row(1 + static_cast<Eigen::Index>(j)) + pos.row(static_cast<Eigen::Index>(j));
    } else {
      c.x0.row(k) = tok.row(row.ids[j]) + pos.row(static_cast<Eigen::Index>(j));
    }
  }
  (void)nv;

  c.dec_blocks.resize(off.dec_blocks.size());
  const Mat* x = &c.x0;
  for (std::size_t l = 0; l < off.dec_blocks.size(); ++l) {
    detail::block_forward(P, off.dec_blocks[l], cfg, /*causal=*/true, *x, c.dec_blocks[l]);
    x = &c.dec_blocks[l].y;
  }
  c.x_final = *x;

  c.masked.clear();
  for (std::size_t k = 0; k < c.positions.size(); ++k) {
    if (row.loss_mask[c.positions[k]]) c.masked.push_back(k);
  }
  const auto m = static_cast<Eigen::Index>(c.masked.size());
  Mat xm(m, d);
  for (Eigen::Index i = 0; i < m; ++i) xm.row(i) = c.x_final.row(static_cast<Eigen::Index>(c.masked[static_cast<std::size_t>(i)]));
  detail::ln_forward(xm, P + off.lnf_g, P + off.lnf_b, c.hf, c.lnf);
  const CMap head_w(P + off.head_w, d, cfg.vocab_size);
  const Eigen::Map<const Eigen::RowVectorXd> head_b(P + off.head_b, cfg.vocab_size);
  c.probs = c.hf * head_w;
  c.probs.rowwise() += head_b;

  double total = 0.0;
  for (Eigen::Index i = 0; i < m; ++i) {
    const std::size_t j = c.positions[c.masked[static_cast<std::size_t>(i)]];
    auto logits = c.probs.row(i);
    const double mx = logits.maxCoeff();
    const double lse = mx + std::log((logits.array() - mx).exp().sum());
    const double loss = lse - logits(row.targets[j]);
    total += loss;
    if (losses) (*losses)[j] = loss;
    logits = (logits.array() - lse).exp();
  }
  return total;
}

void item_backward(const ModelParams& params, const detail::Offsets& off, std::span<const double> image,
                   const SequenceRow& row, const ItemCache& c, double scale, double* G) {
  const auto& cfg = params.config;
  const double* P = params.values.data();
  const int d = cfg.d_model;
  const auto m = static_cast<Eigen::Index>(c.masked.size());

  Mat dlogits = c.probs;
  for (Eigen::Index i = 0; i < m; ++i) {
    const std::size_t j = c.positions[c.masked[static_cast<std::size_t>(i)]];
    dlogits(i, row.targets[j]) -= 1.0;
  }
  dlogits *= scale;

  const CMap head_w(P + off.head_w, d, cfg.vocab_size);
  MMap(G + off.head_w, d, cfg.vocab_size).noalias() += c.hf.transpose() * dlogits;
  Eigen::Map<Eigen::RowVectorXd>(G + off.head_b, cfg.vocab_size) += dlogits.colwise().sum();
  const Mat dhf = dlogits * head_w.transpose();
  Mat dxm;
  detail::ln_backward(dhf, c.lnf, P + off.lnf_g, G + off.lnf_g, G + off.lnf_b, dxm);

  const auto n = static_cast<Eigen::Index>(c.positions.size());
  Mat dx = Mat::Zero(n, d);
  for (Eigen::Index i = 0; i < m; ++i) dx.row(static_cast<Eigen::Index>(c.masked[static_cast<std::size_t>(i)])) = dxm.row(i);

  for (std::size_t l = off.dec_blocks.size(); l-- > 0;) {
    Mat dprev;
    detail::block_backward(P, G, off.dec_blocks[l], cfg, /*causal=*/true, dx, c.dec_blocks[l], dprev);
    dx = std::move(dprev);
  }

  MMap dtok(G + off.tok_emb, cfg.vocab_size, d);
  MMap dpos(G + off.pos_emb, cfg.total_len(), d);
  Mat dmapped = Mat::Zero(1 + cfg.n_visual, d);
  for (Eigen::Index k = 0; k < n; ++k) {
    const std::size_t j = c.positions[static_cast<std::size_t>(k)];
    dpos.row(static_cast<Eigen::Index>(j)) += dx.row(k);
    if (row.roles[j] == Role::kVisual) {
      dmapped.row(1 + static_cast<Eigen::Index>(j)) += dx.row(k);
    } else {
      dtok.row(row.ids[j]) += dx.row(k);
    }
  }
  detail::mapping_backward(params, off, image, c.map_in, c.map_blocks, dmapped, G);
}

}  // namespace

namespace detail {

void ln_forward(const Mat& x, const double* g, const double* b, Mat& y, LnCache& c) {
  const auto d = x.cols();
  const Eigen::Map<const Eigen::RowVectorXd> gain(g, d), bias(b, d);
  c.xhat.resize(x.rows(), d);
  c.rstd.resize(x.rows());
  y.resize(x.rows(), d);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().mean();
    const double rstd = 1.0 / std::sqrt(var + kLnEps);
    c.rstd(i) = rstd;
    c.xhat.row(i) = (x.row(i).array() - mu) * rstd;
    y.row(i) = c.xhat.row(i).cwiseProduct(gain) + bias;
  }
}

void ln_backward(const Mat& dy, const LnCache& c, const double* g, double* dg, double* db, Mat& dx) {
  const auto d = dy.cols();
  const Eigen::Map<const Eigen::RowVectorXd> gain(g, d);
  Eigen::Map<Eigen::RowVectorXd> dgain(dg, d), dbias(db, d);
  dgain += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  dbias += dy.colwise().sum();
  dx.resize(dy.rows(), d);
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const Eigen::RowVectorXd dxhat = dy.row(i).cwiseProduct(gain);
    const double m1 = dxhat.mean();
    const double m2 = dxhat.cwiseProduct(c.xhat.row(i)).mean();
    dx.row(i) = c.rstd(i) * (dxhat.array() - m1 - c.xhat.row(i).array() * m2).matrix();
  }
}

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x))); }

double gelu_grad(double x) {
  const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

}  // namespace

void block_forward(const double* P, const BlockOffsets& o, const ModelConfig& cfg, bool causal, const Mat& x,
                   BlockCache& c) {
  const int d = cfg.d_model;
  const int H = cfg.n_heads;
  const int dh = cfg.head_dim();
  const int ff = cfg.d_ff();
  const auto n = x.rows();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  c.x_in = x;
  ln_forward(x, P + o.ln1_g, P + o.ln1_b, c.h1, c.ln1);
  c.qkv.noalias() = c.h1 * CMap(P + o.qkv_w, d, 3 * d);
  c.qkv.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(P + o.qkv_b, 3 * d);

  c.probs.resize(static_cast<std::size_t>(H));
  c.att.resize(n, d);
  for (int h = 0; h < H; ++h) {
    const auto Q = c.qkv.middleCols(h * dh, dh);
    const auto K = c.qkv.middleCols(d + h * dh, dh);
    const auto V = c.qkv.middleCols(2 * d + h * dh, dh);
    Mat& Pm = c.probs[static_cast<std::size_t>(h)];
    Pm.noalias() = (Q * K.transpose()) * scale;
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::Index valid = causal ? i + 1 : n;
      auto r = Pm.row(i);
      const double mx = r.head(valid).maxCoeff();
      double sum = 0.0;
      for (Eigen::Index j = 0; j < valid; ++j) {
        r(j) = std::exp(r(j) - mx);
        sum += r(j);
      }
      r.head(valid) /= sum;
      if (valid < n) r.tail(n - valid).setZero();
    }
    c.att.middleCols(h * dh, dh).noalias() = Pm * V;
  }
  c.x_mid = x;
  c.x_mid.noalias() += c.att * CMap(P + o.proj_w, d, d);
  c.x_mid.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(P + o.proj_b, d);

  ln_forward(c.x_mid, P + o.ln2_g, P + o.ln2_b, c.h2, c.ln2);
  c.f.noalias() = c.h2 * CMap(P + o.fc_w, d, ff);
  c.f.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(P + o.fc_b, ff);
  c.g = c.f.unaryExpr([](double v) { return gelu(v); });
  c.y = c.x_mid;
  c.y.noalias() += c.g * CMap(P + o.fc2_w, ff, d);
  c.y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(P + o.fc2_b, d);
}

void block_backward(const double* P, double* G, const BlockOffsets& o, const ModelConfig& cfg, bool causal,
                    const Mat& dy, const BlockCache& c, Mat& dx) {
  (void)causal;  // masked probabilities are exactly zero, so the mask needs no special handling here
  const int d = cfg.d_model;
  const int H = cfg.n_heads;
  const int dh = cfg.head_dim();
  const int ff = cfg.d_ff();
  const auto n = dy.rows();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  // MLP branch.
  MMap(G + o.fc2_w, ff, d).noalias() += c.g.transpose() * dy;
  Eigen::Map<Eigen::RowVectorXd>(G + o.fc2_b, d) += dy.colwise().sum();
  Mat df = dy * CMap(P + o.fc2_w, ff, d).transpose();
  df.array() *= c.f.unaryExpr([](double v) { return gelu_grad(v); }).array();
  MMap(G + o.fc_w, d, ff).noalias() += c.h2.transpose() * df;
  Eigen::Map<Eigen::RowVectorXd>(G + o.fc_b, ff) += df.colwise().sum();
  const Mat dh2 = df * CMap(P + o.fc_w, d, ff).transpose();
  Mat dmid;
  ln_backward(dh2, c.ln2, P + o.ln2_g, G + o.ln2_g, G + o.ln2_b, dmid);
  dmid += dy;

  // Attention branch.
  MMap(G + o.proj_w, d, d).noalias() += c.att.transpose() * dmid;
  Eigen::Map<Eigen::RowVectorXd>(G + o.proj_b, d) += dmid.colwise().sum();
  const Mat datt = dmid * CMap(P + o.proj_w, d, d).transpose();
  Mat dqkv(n, 3 * d);
  for (int h = 0; h < H; ++h) {
    const auto Q = c.qkv.middleCols(h * dh, dh);
    const auto K = c.qkv.middleCols(d + h * dh, dh);
    const auto V = c.qkv.middleCols(2 * d + h * dh, dh);
    const Mat& Pm = c.probs[static_cast<std::size_t>(h)];
    const auto dO = datt.middleCols(h * dh, dh);
    const Mat dP = dO * V.transpose();
    dqkv.middleCols(2 * d + h * dh, dh).noalias() = Pm.transpose() * dO;
    const Eigen::VectorXd rowdot = (dP.array() * Pm.array()).rowwise().sum();
    Mat dS = Pm.array() * (dP.array().colwise() - rowdot.array());
    dS *= scale;
    dqkv.middleCols(h * dh, dh).noalias() = dS * K;
    dqkv.middleCols(d + h * dh, dh).noalias() = dS.transpose() * Q;
  }
  MMap(G + o.qkv_w, d, 3 * d).noalias() += c.h1.transpose() * dqkv;
  Eigen::Map<Eigen::RowVectorXd>(G + o.qkv_b, 3 * d) += dqkv.colwise().sum();
  const Mat dh1 = dqkv * CMap(P + o.qkv_w, d, 3 * d).transpose();
  ln_backward(dh1, c.ln1, P + o.ln1_g, G + o.ln1_g, G + o.ln1_b, dx);
  dx += dmid;
}

void mapping_forward(const ModelParams& params, const Offsets& off, std::span<const double> image, Mat& map_in,
                     std::vector<BlockCache>& blocks) {
  const auto& cfg = params.config;
  const double* P = params.values.data();
  const int d = cfg.d_model;
  map_in.resize(1 + cfg.n_visual, d);
  const Eigen::RowVectorXd img = Eigen::Map<const Eigen::RowVectorXd>(image.data(), cfg.image_embed_dim);
  map_in.row(0).noalias() = img * CMap(P + off.img_w, cfg.image_embed_dim, d);
  map_in.row(0) += Eigen::Map<const Eigen::RowVectorXd>(P + off.img_b, d);
  map_in.bottomRows(cfg.n_visual) = CMap(P + off.queries, cfg.n_visual, d);
  blocks.resize(off.map_blocks.size());
  const Mat* x = &map_in;
  for (std::size_t l = 0; l < off.map_blocks.size(); ++l) {
    block_forward(P, off.map_blocks[l], cfg, /*causal=*/false, *x, blocks[l]);
    x = &blocks[l].y;
  }
}

void mapping_backward(const ModelParams& params, const Offsets& off, std::span<const double> image,
                      const Mat& map_in, const std::vector<BlockCache>& blocks, const Mat& dmapped, double* G) {
  (void)map_in;
  const auto& cfg = params.config;
  const double* P = params.values.data();
  const int d = cfg.d_model;
  Mat dx = dmapped;
  for (std::size_t l = off.map_blocks.size(); l-- > 0;) {
    Mat dprev;
    block_backward(P, G, off.map_blocks[l], cfg, /*causal=*/false, dx, blocks[l], dprev);
    dx = std::move(dprev);
  }
  MMap(G + off.queries, cfg.n_visual, d) += dx.bottomRows(cfg.n_visual);
  const Eigen::RowVectorXd img = Eigen::Map<const Eigen::RowVectorXd>(image.data(), cfg.image_embed_dim);
  MMap(G + off.img_w, cfg.image_embed_dim, d).noalias() += img.transpose() * dx.row(0);
  Eigen::Map<Eigen::RowVectorXd>(G + off.img_b, d) += dx.row(0);
}

}  // namespace detail

std::vector<double> map_embedding(const ModelParams& params, std::span<const double> image_vec) {
  params.config.validate();
  validate_image(params.config, image_vec);
  const auto off = detail::build_layout(params.config, nullptr);
  Mat map_in;
  std::vector<BlockCache> blocks;
  detail::mapping_forward(params, off, image_vec, map_in, blocks);
  const Mat& y = blocks.empty() ? map_in : blocks.back().y;
  const Mat visual = y.bottomRows(params.config.n_visual);
  return std::vector<double>(visual.data(), visual.data() + visual.size());
}

LossResult forward_loss(const ModelParams& params, const SequenceBatch& batch) {
  validate_batch(params, batch);
  const std::size_t n_masked = batch.mask_count();
  if (n_masked == 0) {
    throw Error(ErrorKind::kDegenerate, "batch has no loss-masked positions");
  }
  const auto off = detail::build_layout(params.config, nullptr);
  LossResult out;
  out.masked_positions = n_masked;
  out.per_position.assign(batch.size(), std::vector<double>(static_cast<std::size_t>(params.config.total_len()), 0.0));
  double total = 0.0;
  ItemCache cache;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    total += item_forward(params, off, batch.images[b], batch.rows[b], cache, &out.per_position[b]);
  }
  out.mean_loss = total / static_cast<double>(n_masked);
  return out;
}

double forward_backward(const ModelParams& params, const SequenceBatch& batch, ParamVector& grad) {
  validate_batch(params, batch);
  const std::size_t n_masked = batch.mask_count();
  if (n_masked == 0) {
    throw Error(ErrorKind::kDegenerate, "batch has no loss-masked positions");
  }
  const auto off = detail::build_layout(params.config, nullptr);
  grad.assign(params.values.size(), 0.0);
  const double scale = 1.0 / static_cast<double>(n_masked);
  double total = 0.0;
  ItemCache cache;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    total += item_forward(params, off, batch.images[b], batch.rows[b], cache, nullptr);
    item_backward(params, off, batch.images[b], batch.rows[b], cache, scale, grad.data());
  }
  return total * scale;
}

}  // namespace altogether::model
