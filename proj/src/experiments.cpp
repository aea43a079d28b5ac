#include "hetreg/experiments.hpp"

#include "hetreg/errors.hpp"
#include "hetreg/warpfield.hpp"

#include <iomanip>
#include <numeric>

namespace hetreg {

namespace {

const char *direction_name(std::size_t d)
{
  static const char *names[3] = {"z", "y", "x"};
  return names[d];
}

std::string level_list(const std::set<int> &s)
{
  if (s.empty()) { return "none"; }
  std::string out;
  for (int f : s) { out += (out.empty() ? "" : "+") + std::to_string(f); }
  return out;
}

} // namespace

ExpertAnalysis analyze_experts(const Model &model, const Volume &moving, const Volume &fixed)
{
  ExpertAnalysis a;
  auto           r        = forward(model, moving, fixed, true);
  auto          &enc      = model.encoder_config;
  int            selected = enc.attention == AttentionKind::Mixture ? enc.topk : enc.heads;
  int            experts  = enc.attention == AttentionKind::Mixture ? enc.experts : enc.heads;
  for (std::size_t l = 0; l < r.moving_trace.routing.size(); ++l) {
    for (std::size_t b = 0; b < r.moving_trace.routing[l].size(); ++b) {
      auto               &m = r.moving_trace.routing[l][b];
      auto               &f = r.fixed_trace.routing[l][b];
      std::vector<double> count(static_cast<std::size_t>(experts), 0.0);
      for (auto *t : {&m, &f}) {
        for (int i : t->indices) { count[static_cast<std::size_t>(i)] += 1.0; }
      }
      double tokens = static_cast<double>(m.tokens() + f.tokens());
      for (auto &c : count) { c = 100.0 * c / tokens; }
      a.attention.push_back({"level" + std::to_string(l + 1) + ".block" + std::to_string(b), selected, std::move(count)});
    }
  }
  for (auto &level : r.decoded.levels) {
    if (level.head != HeadType::Shmoe) { continue; }
    for (std::size_t d = 0; d < 3; ++d) {
      std::string name = "1_" + std::to_string(level.factor) + "_" + direction_name(d);
      a.shmoe.push_back({name, level.routing[d].topk, expert_load(level.routing[d])});
      auto ids    = expert_id_map(level.routing[d]);
      ids.spacing = fixed.spacing;
      for (int k = 0; k < 3; ++k) { ids.spacing[static_cast<std::size_t>(k)] *= level.factor; }
      a.maps.push_back({name, std::move(ids)});
    }
  }
  return a;
}

void write_load_table(std::ostream &os, const std::vector<LoadRow> &rows)
{
  std::size_t width = 0;
  for (auto &r : rows) { width = std::max(width, r.loads.size()); }
  os << "layer,topk";
  for (std::size_t e = 0; e < width; ++e) { os << ",expert_" << e; }
  os << ",sum\n" << std::fixed << std::setprecision(6);
  for (auto &r : rows) {
    os << r.layer << ',' << r.topk;
    for (std::size_t e = 0; e < width; ++e) {
      os << ',';
      if (e < r.loads.size()) { os << r.loads[e]; }
    }
    os << ',' << std::accumulate(r.loads.begin(), r.loads.end(), 0.0) << '\n';
  }
  os.unsetf(std::ios::floatfield);
}

std::vector<AblationConfig> ablation_grid()
{
  std::vector<AblationConfig> grid{{"", false, {}},     {"", false, {1, 2}},       {"", true, {}},
                                   {"", true, {1}},     {"", true, {1, 2}},        {"", true, {1, 2, 4}},
                                   {"", true, {1, 2, 4, 8}}};
  for (auto &g : grid) { g.name = std::string(g.moa ? "moa" : "mha") + "/shmoe=" + level_list(g.shmoe_levels); }
  return grid;
}

RunConfig apply(const RunConfig &base, const AblationConfig &a)
{
  RunConfig cfg             = base;
  cfg.encoder.attention     = a.moa ? AttentionKind::Mixture : AttentionKind::MultiHead;
  cfg.decoder.shmoe_factors = a.shmoe_levels;
  return cfg;
}

double mean_dice_after(const SegVolume &moving_seg, const SegVolume &fixed_seg, const DeformationField &phi)
{
  auto labels = fixed_seg.label_set();
  if (labels.empty()) { throw MetricUndefined("mean_dice_after: fixed segmentation has no labels"); }
  auto   scores = dice(warp_labels(moving_seg, phi), fixed_seg, labels);
  double total  = 0.0;
  for (auto &s : scores) { total += s.value_or(0.0); }
  return 100.0 * total / static_cast<double>(scores.size());
}

AblationResult run_ablation(const RunConfig &base, const AblationConfig &a, std::span<const SyntheticPair> pairs)
{
  if (pairs.empty()) { throw ArgumentError("run_ablation: no pairs"); }
  auto           cfg   = apply(base, a);
  auto           model = Model::create(cfg);
  AblationResult res;
  res.config     = a;
  res.parameters = model.parameter_count();

  auto score = [&](double &sim, double &dice_pct, double *folding) {
    sim = dice_pct = 0.0;
    double fold    = 0.0;
    for (auto &p : pairs) {
      auto             r = forward(model, p.moving, p.fixed);
      DeformationField phi{r.decoded.phi.disp.detach()};
      sim += sim_loss(r.warped, p.fixed).item();
      dice_pct += mean_dice_after(p.moving_seg, p.fixed_seg, phi);
      fold += jacobian_folding(phi);
    }
    auto n = static_cast<double>(pairs.size());
    sim /= n;
    dice_pct /= n;
    if (folding) { *folding = fold / n; }
  };
  score(res.initial_sim, res.initial_dice, nullptr);
  std::vector<TrainingPair> train_pairs;
  for (auto &p : pairs) { train_pairs.push_back({p.moving, p.fixed}); }
  train(model, train_pairs, cfg);
  score(res.final_sim, res.final_dice, &res.folding);
  return res;
}

void write_ablation_table(std::ostream &os, const std::vector<AblationResult> &rows)
{
  os << "config,attention,shmoe_levels,parameters,initial_sim,final_sim,initial_dice_percent,final_dice_percent,"
        "folding_percent\n";
  for (auto &r : rows) {
    os << r.config.name << ',' << (r.config.moa ? "moa" : "mha") << ',' << level_list(r.config.shmoe_levels) << ','
       << r.parameters << ',' << std::setprecision(9) << r.initial_sim << ',' << r.final_sim << ',' << r.initial_dice
       << ',' << r.final_dice << ',' << r.folding << '\n';
  }
}

} // namespace hetreg
