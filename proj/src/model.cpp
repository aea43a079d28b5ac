#include "hetreg/model.hpp"

#include "hetreg/errors.hpp"
#include "hetreg/ops.hpp"
#include "hetreg/warpfield.hpp"

#include <cmath>
#include <set>

namespace hetreg {

Model Model::create(const RunConfig &cfg)
{
  cfg.validate();
  Rng   rng(cfg.seed);
  Model m;
  m.encoder_config = cfg.encoder;
  m.decoder_config = cfg.decoder;
  m.encoder        = EncoderParams::create(rng, cfg.encoder);
  m.decoder        = DecoderParams::create(rng, cfg.encoder, cfg.decoder);
  return m;
}

NamedTensors Model::parameters() const
{
  auto out = encoder.named("encoder");
  for (auto &p : decoder.named("decoder")) { out.push_back(std::move(p)); }
  return out;
}

Index Model::parameter_count() const
{
  Index n = 0;
  for (auto &[name, t] : parameters()) { n += t.size(); }
  return n;
}

ForwardResult forward(const Model &model, const Volume &moving, const Volume &fixed, bool trace)
{
  ForwardResult r;
  auto [pm, pf] = encode_pair(moving, fixed, model.encoder_config, model.encoder, trace ? &r.moving_trace : nullptr,
                              trace ? &r.fixed_trace : nullptr);
  r.decoded     = decode_pyramid(pm, pf, moving, fixed, model.decoder_config, model.decoder);
  r.warped      = warp(moving, r.decoded.phi);
  return r;
}

Adam::Adam(NamedTensors params, double lr, double beta1, double beta2, double eps)
  : params_(std::move(params))
  , lr_(lr)
  , beta1_(beta1)
  , beta2_(beta2)
  , eps_(eps)
{
  for (auto &[name, t] : params_) {
    m_.emplace_back(static_cast<std::size_t>(t.size()), 0.0);
    v_.emplace_back(static_cast<std::size_t>(t.size()), 0.0);
  }
}

void Adam::step()
{
  ++t_;
  double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto &t = params_[i].second;
    if (!t.has_grad()) { continue; }
    auto  g = t.grad();
    auto  x = t.data();
    auto &m = m_[i];
    auto &v = v_[i];
    for (std::size_t j = 0; j < x.size(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      x[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
    }
  }
}

void Adam::zero_grad()
{
  for (auto &[name, t] : params_) { t.zero_grad(); }
}

LossEvaluation evaluate_loss(const Model &model, const Volume &moving, const Volume &fixed, const RunConfig &cfg)
{
  LossEvaluation ev;
  ev.result = forward(model, moving, fixed);
  auto sim  = sim_loss(ev.result.warped, fixed);

  std::vector<Tensor>                                        outputs;
  std::vector<std::pair<const RoutingTensor *, const Tensor *>> heads;
  for (auto &level : ev.result.decoded.levels) {
    if (level.head != HeadType::Shmoe) { continue; }
    for (std::size_t d = 0; d < 3; ++d) {
      outputs.push_back(level.direction_outputs[d]);
      heads.emplace_back(&level.routing[d], &level.probs[d]);
    }
  }
  std::vector<Tensor> rc_terms;
  if (!outputs.empty()) {
    auto eps = gradients_wrt(sim, outputs);
    for (std::size_t i = 0; i < outputs.size(); ++i) {
      ErrorSignal e{Tensor(outputs[i].shape(), std::move(eps[i]))};
      auto        labels = build_rc_labels(e, *heads[i].first, cfg.quantile);
      rc_terms.push_back(rc_loss(*heads[i].second, labels));
    }
  }
  ev.terms = total_loss(ev.result.warped, fixed, ev.result.decoded.phi, rc_terms, cfg.weights);
  return ev;
}

void check_finite(const StepRecord &r, int iteration)
{
  const std::pair<const char *, double> terms[] = {{"sim", r.sim}, {"reg", r.reg}, {"rc", r.rc}, {"total", r.total}};
  for (auto &[name, v] : terms) {
    if (!std::isfinite(v)) {
      throw NumericError("non-finite " + std::string(name) + " loss (" + std::to_string(v) + ") at iteration " +
                         std::to_string(iteration));
    }
  }
}

std::vector<StepRecord> train(Model &model, std::span<const TrainingPair> pairs, const RunConfig &cfg,
                              const std::function<void(int, const StepRecord &)> &on_step)
{
  if (pairs.empty() && cfg.iterations > 0) { throw ArgumentError("train: no training pairs"); }
  Adam                    opt(model.parameters(), cfg.learning_rate);
  std::vector<StepRecord> trace;
  for (int it = 0; it < cfg.iterations; ++it) {
    auto &pair = pairs[static_cast<std::size_t>(it) % pairs.size()];
    opt.zero_grad();
    auto       ev = evaluate_loss(model, pair.moving, pair.fixed, cfg);
    StepRecord r{ev.terms.sim.item(), ev.terms.reg.item(), ev.terms.rc.item(), ev.terms.total.item()};
    check_finite(r, it);
    ev.terms.total.backward();
    opt.step();
    trace.push_back(r);
    if (on_step) { on_step(it, r); }
  }
  opt.zero_grad();
  return trace;
}

} // namespace hetreg
