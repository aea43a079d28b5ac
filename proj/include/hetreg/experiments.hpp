#pragma once

#include "hetreg/model.hpp"
#include "hetreg/synthetic.hpp"

#include <ostream>
#include <set>
#include <string>
#include <vector>

namespace hetreg {

/// Selection frequency of every expert in one routed layer.
struct LoadRow
{
  std::string         layer;
  int                 topk = 0;
  std::vector<double> loads; ///< percentages, summing to 100 topk
};

struct ExpertMap
{
  std::string name; ///< e.g. "1_2_z": resolution 1/2, z direction
  SegVolume   ids;
};

struct ExpertAnalysis
{
  std::vector<LoadRow>   attention; ///< encoder layers, both streams pooled
  std::vector<LoadRow>   shmoe;     ///< decoder SHMoE layers per direction
  std::vector<ExpertMap> maps;      ///< arg-max expert per voxel, per SHMoE direction
};

ExpertAnalysis analyze_experts(const Model &model, const Volume &moving, const Volume &fixed);

/// Header "layer,topk,expert_0,...,sum"; one row per layer.
void write_load_table(std::ostream &os, const std::vector<LoadRow> &rows);

struct AblationConfig
{
  std::string   name;
  bool          moa = true;
  std::set<int> shmoe_levels;
};

/// MoA off/on crossed with the SHMoE level sets of the ablation table:
/// (off, none), (off, {1,2}), (on, none), (on, {1}), (on, {1,2}),
/// (on, {1,2,4}), (on, {1,2,4,8}). "MoA off" is plain multi-head attention.
std::vector<AblationConfig> ablation_grid();
RunConfig                   apply(const RunConfig &base, const AblationConfig &a);

struct AblationResult
{
  AblationConfig config;
  Index          parameters   = 0;
  double         initial_sim  = 0.0, final_sim = 0.0;
  double         initial_dice = 0.0, final_dice = 0.0; ///< mean over labels, percent
  double         folding      = 0.0;
};

/// Trains a fresh model for cfg.iterations on `pairs` and scores it on them.
AblationResult run_ablation(const RunConfig &base, const AblationConfig &a, std::span<const SyntheticPair> pairs);

void write_ablation_table(std::ostream &os, const std::vector<AblationResult> &rows);

/// Mean Dice (percent) over the fixed segmentation's labels after warping
/// the moving segmentation by phi.
double mean_dice_after(const SegVolume &moving_seg, const SegVolume &fixed_seg, const DeformationField &phi);

} // namespace hetreg
