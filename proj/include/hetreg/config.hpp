#pragma once

#include "hetreg/decoder.hpp"
#include "hetreg/encoder.hpp"
#include "hetreg/losses.hpp"

#include <cstdint>
#include <string>

namespace hetreg {

/*
 * Everything a run needs. Text form: one `key = value` per line, `#` starts a
 * comment, lists are comma separated. Keys:
 *
 *   seed            u64      model initialization and data generation
 *   size            int      synthetic volume extent (cubic)
 *   spacing         3 reals  voxel size in mm
 *   max_disp        real     synthetic ground-truth peak displacement (voxels)
 *   smoothness      real     synthetic field correlation length (voxels)
 *   patch_size, embed_dim, window, mlp_ratio        encoder geometry
 *   depths          ints     blocks per encoder level
 *   attention       moa|mha  routed heads or plain multi-head attention
 *   moa_experts, moa_topk, mha_heads
 *   shmoe_levels    ints     resolution factors with SHMoE heads ("none" for no SHMoE)
 *   shmoe_kernels   ints     expert kernel sizes
 *   shmoe_topk, router_kernel, stem_channels
 *   quantile        real     rc-label threshold quantile q
 *   lambda_reg, lambda_rc, learning_rate
 *   iterations      int
 *   diffeomorphic   bool     integrate residuals as stationary velocities
 *   velocity_steps  int
 */
struct RunConfig
{
  std::uint64_t seed       = 0;
  Index         size       = 32;
  Spacing       spacing{1.0, 1.0, 1.0};
  double        max_disp   = 4.0;
  double        smoothness = 4.0;

  EncoderConfig encoder;
  DecoderConfig decoder;
  LossWeights   weights;
  double        quantile      = 0.5;
  double        learning_rate = 1e-4;
  int           iterations    = 300;

  /// Throws ConfigError on unknown keys, malformed values or out-of-range settings.
  static RunConfig parse(const std::string &text);
  static RunConfig load(const std::string &path);
  std::string      to_text() const;

  void validate() const;
};

/// "1,2,4" -> {1,2,4}; "none" or "" -> {}.
std::set<int> parse_level_list(const std::string &text);

} // namespace hetreg
