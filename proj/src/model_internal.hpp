#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "altogether/model.hpp"

namespace altogether::model::detail {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const Mat>;
using MMap = Eigen::Map<Mat>;

inline constexpr double kLnEps = 1e-5;

struct BlockOffsets {
  std::size_t ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b;
  std::size_t ln2_g, ln2_b, fc_w, fc_b, fc2_w, fc2_b;
};

struct Offsets {
  std::size_t tok_emb = 0, pos_emb = 0, img_w = 0, img_b = 0, queries = 0;
  std::vector<BlockOffsets> map_blocks;
  std::vector<BlockOffsets> dec_blocks;
  std::size_t lnf_g = 0, lnf_b = 0, head_w = 0, head_b = 0;
  std::size_t total = 0;
};

Offsets build_layout(const ModelConfig& cfg, std::vector<TensorSpec>* specs);

struct LnCache {
  Mat xhat;
  Eigen::VectorXd rstd;
};

struct BlockCache {
  Mat x_in;
  LnCache ln1;
  Mat h1, qkv, att;
  std::vector<Mat> probs;  // per head, n x n
  Mat x_mid;
  LnCache ln2;
  Mat h2, f, g;
  Mat y;
};

void ln_forward(const Mat& x, const double* g, const double* b, Mat& y, LnCache& c);
void ln_backward(const Mat& dy, const LnCache& c, const double* g, double* dg, double* db, Mat& dx);

void block_forward(const double* P, const BlockOffsets& o, const ModelConfig& cfg, bool causal, const Mat& x,
                   BlockCache& c);
void block_backward(const double* P, double* G, const BlockOffsets& o, const ModelConfig& cfg, bool causal,
                    const Mat& dy, const BlockCache& c, Mat& dx);

void mapping_forward(const ModelParams& params, const Offsets& off, std::span<const double> image, Mat& map_in,
                     std::vector<BlockCache>& blocks);
void mapping_backward(const ModelParams& params, const Offsets& off, std::span<const double> image,
                      const Mat& map_in, const std::vector<BlockCache>& blocks, const Mat& dmapped, double* G);

}  // namespace altogether::model::detail
