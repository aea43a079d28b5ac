#pragma once

#include "hetreg/volume.hpp"

#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

namespace hetreg {

struct LossWeights
{
  double reg     = 0.01;  ///< lambda_r
  double routing = 0.001; ///< lambda_rc
};

/// Mean squared voxel difference.
Tensor sim_loss(const Volume &warped, const Volume &fixed);

/// Diffusion regularizer: for each displacement channel and each axis, the
/// mean of squared forward differences; summed over channels and axes.
Tensor reg_loss(const DeformationField &phi);

struct LossTerms
{
  Tensor sim, reg, rc, total;
};

/// sim + lambda_r reg + lambda_rc mean(rc_terms). An empty `rc_terms`
/// contributes zero.
LossTerms total_loss(const Volume &warped, const Volume &fixed, const DeformationField &phi,
                     std::span<const Tensor> rc_terms, const LossWeights &w);

/// Per-label Dice 2|A∩B| / (|A|+|B|) in [0, 1]; labels empty in both are absent.
std::vector<std::optional<double>> dice(const SegVolume &a, const SegVolume &b, std::span<const std::uint16_t> labels);

/// Average symmetric surface distance in physical units. Surface voxels have
/// at least one 6-neighbour outside the label (outside the volume counts).
/// Throws MetricUndefined when either mask is empty.
double assd(const SegVolume &a, const SegVolume &b, std::uint16_t label, const Spacing &spacing);

/// Nearest-neighbour label lookup at x + phi(x), clamped to the volume.
SegVolume warp_labels(const SegVolume &seg, const DeformationField &phi);

struct LabelScore
{
  std::uint16_t         label = 0;
  std::optional<double> dice_percent;
  std::optional<double> assd;
};

struct EvalReport
{
  std::vector<LabelScore> labels;
  double                  mean_dice_percent = 0.0;
  double                  mean_assd         = 0.0;
  double                  folding_percent   = 0.0;
};

/// Scores `moved` against `reference` over the union of their labels.
EvalReport evaluate(const SegVolume &moved, const SegVolume &reference, const DeformationField &phi);

/// Comma-separated table: header, one row per label, a mean row, then the
/// folding summary. Undefined entries are written as "nan".
void write_report(std::ostream &os, const EvalReport &report);

} // namespace hetreg
