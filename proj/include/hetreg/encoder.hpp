#pragma once

#include "hetreg/moa.hpp"
#include "hetreg/volume.hpp"

#include <algorithm>
#include <string>
#include <utility>
#include <vector>

namespace hetreg {

struct EncoderConfig
{
  Index            patch_size = 2;
  Index            embed_dim  = 16;
  std::vector<int> depths{2, 2, 2, 2};
  Index            window     = 4;
  int              experts    = 12;
  int              topk       = 4;
  AttentionKind    attention  = AttentionKind::Mixture;
  int              heads      = 4; ///< heads per layer when attention is MultiHead
  Index            mlp_ratio  = 2;

  int levels() const { return static_cast<int>(depths.size()); }
  /// Channels and spatial extent divisor of level l (0-based).
  Index channels(int level) const { return embed_dim << level; }
  Index stride(int level) const { return patch_size << level; }
  /// Attention window at a level of extent n: min(window, n).
  Index window_at(Index extent) const { return std::min(window, extent); }

  /// Throws ConfigError unless every level divides evenly.
  void validate(Index depth, Index height, Index width) const;
};

struct BlockParams
{
  Tensor    norm1_gamma, norm1_beta;
  MoAParams attention;
  Tensor    norm2_gamma, norm2_beta;
  Tensor    fc1_weight, fc1_bias; // [C x rC], [rC]
  Tensor    fc2_weight, fc2_bias; // [rC x C], [C]

  static BlockParams create(Rng &rng, const EncoderConfig &cfg, Index channels);
  std::vector<std::pair<std::string, Tensor>> named(const std::string &prefix) const;
};

/// 2^3 neighbourhood concatenation, normalization, linear 8C -> 2C.
struct MergeParams
{
  Tensor norm_gamma, norm_beta, reduction;

  static MergeParams create(Rng &rng, Index channels);
  std::vector<std::pair<std::string, Tensor>> named(const std::string &prefix) const;
};

struct EncoderParams
{
  Tensor                                embed_weight; // [C_in p^3 x E]
  Tensor                                embed_bias;   // [E]
  std::vector<std::vector<BlockParams>> blocks;       // per level
  std::vector<MergeParams>              merges;       // between levels

  static EncoderParams create(Rng &rng, const EncoderConfig &cfg, Index in_channels = 1);
  std::vector<std::pair<std::string, Tensor>> named(const std::string &prefix = "encoder") const;
};

/// Per-level features [C_l x D_l x H_l x W_l], finest first.
using FeaturePyramid = std::vector<Tensor>;

/// Token routings of every attention layer, grouped by level.
struct EncoderTrace
{
  std::vector<std::vector<TokenRouting>> routing;
};

/// Non-overlapping patches linearly projected: [C x D x H x W] -> [E x D/p x H/p x W/p].
Tensor patch_embed(const Tensor &volume, const EncoderParams &params, const EncoderConfig &cfg);

/// Cyclic roll of the spatial axes: out(x) = in((x + s) mod n). Rolling by
/// -s undoes it.
Tensor cyclic_shift(const Tensor &x, Index s);

/// Pre-norm transformer block over window^3 windows:
///   h = x + MoA(LN(h)) within windows, then h + FFN(LN(h)).
/// With `shift` the grid is rolled by window/2 before partitioning and back
/// afterwards; wrapped windows attend without masking.
Tensor windowed_moa_block(const Tensor &x, const BlockParams &params, Index window, bool shift,
                          TokenRouting *routing = nullptr);

/// Pyramid of one volume.
FeaturePyramid encode(const Tensor &volume, const EncoderConfig &cfg, const EncoderParams &params,
                      EncoderTrace *trace = nullptr);

/// Both streams through the same parameters.
std::pair<FeaturePyramid, FeaturePyramid> encode_pair(const Volume &moving, const Volume &fixed,
                                                      const EncoderConfig &cfg, const EncoderParams &params,
                                                      EncoderTrace *moving_trace = nullptr,
                                                      EncoderTrace *fixed_trace  = nullptr);

} // namespace hetreg
