#include "cli.hpp"

#include "hetreg/errors.hpp"
#include "hetreg/experiments.hpp"
#include "hetreg/io.hpp"
#include "hetreg/warpfield.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

namespace hetreg::cli {

namespace fs = std::filesystem;

namespace {

struct Options
{
  std::string                  config, out, checkpoint, levels, field;
  std::optional<std::uint64_t> seed;
  std::vector<std::string>     pairs;
  bool                         diff = false;
};

RunConfig run_config(const Options &o, bool apply_levels = true)
{
  RunConfig cfg = o.config.empty() ? RunConfig{} : RunConfig::load(o.config);
  if (o.seed) { cfg.seed = *o.seed; }
  if (o.diff) { cfg.decoder.diffeomorphic = true; }
  if (apply_levels && !o.levels.empty()) { cfg.decoder.shmoe_factors = parse_level_list(o.levels); }
  cfg.validate();
  return cfg;
}

void make_dir(const std::string &dir)
{
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) { throw IoError("cannot create directory " + dir + ": " + ec.message()); }
}

std::string join(const std::string &dir, const std::string &name) { return (fs::path(dir) / name).string(); }

/// Output directory for pair i: `out` itself for a single pair, else out/<i>.
std::string pair_dir(const Options &o, std::size_t i)
{
  auto d = o.pairs.size() == 1 ? o.out : join(o.out, std::to_string(i));
  make_dir(d);
  return d;
}

void write_text(const std::string &path, const std::string &text)
{
  write_bytes(path, std::span(reinterpret_cast<const std::uint8_t *>(text.data()), text.size()));
}

std::vector<SyntheticPair> read_pairs(const Options &o)
{
  std::vector<SyntheticPair> v;
  for (auto &p : o.pairs) { v.push_back(read_pair(p)); }
  return v;
}

Model restored(const std::string &path, RunConfig *cfg_out = nullptr)
{
  auto ckpt  = load_checkpoint(path);
  auto cfg   = RunConfig::parse(ckpt.config_text);
  auto model = Model::create(cfg);
  restore(model, ckpt);
  if (cfg_out) { *cfg_out = cfg; }
  return model;
}

DeformationField field_of(const Model &model, const SyntheticPair &p)
{
  return DeformationField{forward(model, p.moving, p.fixed).decoded.phi.disp.detach()};
}

int gen_data(const Options &o, std::ostream &out)
{
  auto cfg  = run_config(o);
  Rng  rng(cfg.seed);
  auto pair = generate_pair(rng, cfg.size, cfg.spacing, cfg.max_disp, cfg.smoothness);
  write_pair(o.out, pair);
  auto zero = DeformationField::zeros(cfg.size, cfg.size, cfg.size);
  out << "wrote " << o.out << " (" << cfg.size << "^3, initial mean dice "
      << mean_dice_after(pair.moving_seg, pair.fixed_seg, zero) << "%)\n";
  return ok;
}

int train_cmd(const Options &o, std::ostream &out)
{
  auto cfg   = run_config(o);
  auto pairs = read_pairs(o);
  make_dir(o.out);
  std::vector<TrainingPair> tp;
  for (auto &p : pairs) { tp.push_back({p.moving, p.fixed}); }
  auto               model = Model::create(cfg);
  std::ostringstream trace;
  trace << "iteration,sim,reg,rc,total\n" << std::setprecision(17);
  auto records = train(model, tp, cfg, [&](int it, const StepRecord &r) {
    trace << it << ',' << r.sim << ',' << r.reg << ',' << r.rc << ',' << r.total << '\n';
  });
  save_checkpoint(join(o.out, "checkpoint.hrgc"), cfg, model);
  write_text(join(o.out, "loss_trace.csv"), trace.str());
  write_text(join(o.out, "config.txt"), cfg.to_text());
  out << "trained " << records.size() << " iterations, " << model.parameter_count() << " parameters";
  if (!records.empty()) { out << ", sim " << records.front().sim << " -> " << records.back().sim; }
  out << '\n';
  return ok;
}

int register_cmd(const Options &o, std::ostream &out)
{
  auto model = restored(o.checkpoint);
  auto pairs = read_pairs(o);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    auto &p   = pairs[i];
    auto  dir = pair_dir(o, i);
    auto  r   = forward(model, p.moving, p.fixed);
    write_field(join(dir, "field.hrgv"), DeformationField{r.decoded.phi.disp.detach()}, p.fixed.spacing);
    Volume warped{r.warped.data.detach(), p.fixed.spacing};
    write_volume(join(dir, "warped.hrgv"), warped);
    std::ostringstream diag;
    write_diagnostics(diag, r.decoded);
    write_text(join(dir, "diagnostics.txt"), diag.str());
    out << "registered " << o.pairs[i] << " -> " << dir << '\n';
  }
  return ok;
}

int evaluate_cmd(const Options &o, std::ostream &out)
{
  if (!o.field.empty() && !o.checkpoint.empty()) { throw ArgumentError("--field and --checkpoint are exclusive"); }
  if (!o.field.empty() && o.pairs.size() != 1) { throw ArgumentError("--field needs exactly one pair"); }
  std::optional<Model> model;
  if (!o.checkpoint.empty()) { model = restored(o.checkpoint); }
  auto pairs = read_pairs(o);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    auto            &p = pairs[i];
    DeformationField phi =
      !o.field.empty() ? read_field(o.field)
      : model          ? field_of(*model, p)
                       : DeformationField::zeros(p.fixed.depth(), p.fixed.height(), p.fixed.width());
    if (phi.depth() != p.fixed_seg.depth || phi.height() != p.fixed_seg.height || phi.width() != p.fixed_seg.width) {
      throw DimensionError("evaluate: field extent differs from the segmentation");
    }
    auto               report = evaluate(warp_labels(p.moving_seg, phi), p.fixed_seg, phi);
    std::ostringstream text;
    write_report(text, report);
    write_text(join(pair_dir(o, i), "report.csv"), text.str());
    out << text.str();
  }
  return ok;
}

int analyze_cmd(const Options &o, std::ostream &out)
{
  auto model = restored(o.checkpoint);
  if (o.pairs.size() != 1) { throw ArgumentError("analyze-experts takes exactly one pair"); }
  auto p = read_pair(o.pairs[0]);
  make_dir(o.out);
  auto               a = analyze_experts(model, p.moving, p.fixed);
  std::ostringstream moa, shm;
  write_load_table(moa, a.attention);
  write_load_table(shm, a.shmoe);
  write_text(join(o.out, "moa_load.csv"), moa.str());
  write_text(join(o.out, "shmoe_load.csv"), shm.str());
  for (auto &m : a.maps) { write_labels(join(o.out, "expert_map_" + m.name + ".hrgv"), m.ids); }
  out << a.attention.size() << " attention layers, " << a.shmoe.size() << " SHMoE layers, " << a.maps.size()
      << " expert maps -> " << o.out << '\n';
  return ok;
}

int ablate_cmd(const Options &o, std::ostream &out)
{
  auto                       cfg = run_config(o, false);
  std::vector<SyntheticPair> pairs;
  if (o.pairs.empty()) {
    Rng rng(cfg.seed);
    pairs.push_back(generate_pair(rng, cfg.size, cfg.spacing, cfg.max_disp, cfg.smoothness));
  } else {
    pairs = read_pairs(o);
  }
  auto grid = ablation_grid();
  if (!o.levels.empty()) {
    auto want = parse_level_list(o.levels);
    std::erase_if(grid, [&](const AblationConfig &a) { return a.shmoe_levels != want; });
    if (grid.empty()) { throw ArgumentError("--levels " + o.levels + " matches no ablation configuration"); }
  }
  make_dir(o.out);
  std::vector<AblationResult> rows;
  for (auto &a : grid) {
    rows.push_back(run_ablation(cfg, a, pairs));
    auto &r = rows.back();
    out << r.config.name << ": " << r.parameters << " parameters, dice " << r.initial_dice << " -> " << r.final_dice
        << '\n';
  }
  std::ostringstream table;
  write_ablation_table(table, rows);
  write_text(join(o.out, "ablation.csv"), table.str());
  return ok;
}

} // namespace

int run(const std::vector<std::string> &args, std::ostream &out, std::ostream &err)
{
  CLI::App app{"Deformable registration with routed attention and per-voxel deformation experts", "hetreg"};
  app.require_subcommand(1);
  Options o;

  auto config = [&](CLI::App *c) {
    c->add_option("--config", o.config, "key = value run configuration");
  };
  auto seed = [&](CLI::App *c) { c->add_option("--seed", o.seed, "overrides the configured seed"); };
  auto outd = [&](CLI::App *c, bool required) {
    auto opt = c->add_option("--out", o.out, "output directory");
    if (required) { opt->required(); }
  };
  auto pairs = [&](CLI::App *c, bool required) {
    auto opt = c->add_option("--pairs", o.pairs, "pair directories (see gen-data)");
    if (required) { opt->required(); }
  };
  auto ckpt = [&](CLI::App *c, bool required) {
    auto opt = c->add_option("--checkpoint", o.checkpoint, "checkpoint written by train");
    if (required) { opt->required(); }
  };
  auto diff   = [&](CLI::App *c) { c->add_flag("--diff", o.diff, "diffeomorphic variant"); };
  auto levels = [&](CLI::App *c, const char *help) { c->add_option("--levels", o.levels, help); };

  auto gen = app.add_subcommand("gen-data", "write one synthetic pair");
  config(gen), seed(gen), outd(gen, true);

  auto tr = app.add_subcommand("train", "train on pairs; writes checkpoint and loss trace");
  config(tr), seed(tr), outd(tr, true), pairs(tr, true), diff(tr);
  levels(tr, "resolution factors with SHMoE heads, e.g. 1,2");

  auto reg = app.add_subcommand("register", "predict the field for each pair");
  ckpt(reg, true), pairs(reg, true), outd(reg, true);

  auto ev = app.add_subcommand("evaluate", "Dice, ASSD and folding after warping the moving labels");
  pairs(ev, true), outd(ev, true), ckpt(ev, false);
  ev->add_option("--field", o.field, "field VolumeFile (default: identity)");

  auto an = app.add_subcommand("analyze-experts", "expert-load tables and per-voxel expert maps");
  ckpt(an, true), pairs(an, true), outd(an, true);

  auto ab = app.add_subcommand("ablate", "train every attention / SHMoE-level configuration");
  config(ab), seed(ab), outd(ab, true), pairs(ab, false), diff(ab);
  levels(ab, "run only configurations with this SHMoE level set");

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
    app.parse(rev);
  } catch (const CLI::ParseError &e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return ok;
    }
    err << "error: " << e.what() << "\n\n" << app.help();
    return usage;
  }

  try {
    if (*gen) { return gen_data(o, out); }
    if (*tr) { return train_cmd(o, out); }
    if (*reg) { return register_cmd(o, out); }
    if (*ev) { return evaluate_cmd(o, out); }
    if (*an) { return analyze_cmd(o, out); }
    if (*ab) { return ablate_cmd(o, out); }
  } catch (const ConfigError &e) {
    err << "config error: " << e.what() << '\n';
    return usage;
  } catch (const std::invalid_argument &e) {
    err << "error: " << e.what() << '\n';
    return usage;
  } catch (const IoError &e) {
    err << "i/o error: " << e.what() << '\n';
    return io;
  } catch (const fs::filesystem_error &e) {
    err << "i/o error: " << e.what() << '\n';
    return io;
  } catch (const NumericError &e) {
    err << "numeric failure: " << e.what() << '\n';
    return numeric;
  } catch (const MetricUndefined &e) {
    err << "numeric failure: " << e.what() << '\n';
    return numeric;
  }
  return usage;
}

} // namespace hetreg::cli
