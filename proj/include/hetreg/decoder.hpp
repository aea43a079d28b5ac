#pragma once

#include "hetreg/encoder.hpp"
#include "hetreg/shmoe.hpp"

#include <array>
#include <ostream>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace hetreg {

enum class HeadType
{
  Conv,  ///< one 3^3 convolution producing three channels
  Shmoe, ///< three direction-wise SHMoE layers
};

/*
 * Stages run coarse to fine: one per encoder level, then a full-resolution
 * stage fed by a convolution stem on (warped moving, fixed). A stage is named
 * by its resolution factor: 1 for full resolution, 2 for half, and so on.
 */
struct DecoderConfig
{
  std::set<int>    shmoe_factors{1, 2};
  std::vector<int> kernel_sizes{1, 3, 5};
  int              shmoe_topk     = 1;
  int              router_kernel  = 3;
  Index            stem_channels  = 8;
  bool             diffeomorphic  = false;
  int              velocity_steps = 7;

  /// Heads are conv at factors coarser than 8 regardless of `shmoe_factors`.
  HeadType head_at(int factor) const;
};

struct HeadParams
{
  HeadType                   type = HeadType::Conv;
  Tensor                     weight, bias; // conv head: [3 x C x 3 x 3 x 3], [3]
  std::array<ShmoeParams, 3> directions;   // SHMoE head

  static HeadParams create(Rng &rng, HeadType type, Index channels, const DecoderConfig &cfg);
  std::vector<std::pair<std::string, Tensor>> named(const std::string &prefix) const;
};

struct DecoderParams
{
  Tensor                  stem1_weight, stem1_bias, stem2_weight, stem2_bias;
  std::vector<HeadParams> heads; // coarse to fine, full resolution last
  std::vector<int>        factors;

  static DecoderParams create(Rng &rng, const EncoderConfig &enc, const DecoderConfig &cfg, Index in_channels = 1);
  std::vector<std::pair<std::string, Tensor>> named(const std::string &prefix = "decoder") const;
};

/// Trilinear x2 upsampling with displacements doubled.
DeformationField upsample_field(const DeformationField &phi);

struct LevelOutput
{
  int              factor = 1;
  HeadType         head   = HeadType::Conv;
  Tensor           residual; ///< delta phi [3 x D x H x W]
  DeformationField phi;
  /// SHMoE heads only, one per direction.
  std::array<Tensor, 3>        direction_outputs;
  std::array<Tensor, 3>        probs;
  std::array<RoutingTensor, 3> routing;
};

/// Warp moving features by phi_in, concatenate with the fixed features, run
/// the head and add its residual (integrated first in the diffeomorphic
/// variant).
LevelOutput decode_level(const Tensor &moving_features, const Tensor &fixed_features, const DeformationField &phi_in,
                         const HeadParams &head, const DecoderConfig &cfg);

struct DecodeResult
{
  DeformationField         phi;
  std::vector<LevelOutput> levels; // coarse to fine
};

DecodeResult decode_pyramid(const FeaturePyramid &moving, const FeaturePyramid &fixed, const Volume &moving_image,
                            const Volume &fixed_image, const DecoderConfig &cfg, const DecoderParams &params);

/// Per-level residual L2 norms and expert loads as text.
void write_diagnostics(std::ostream &os, const DecodeResult &result);

} // namespace hetreg
