#include "hetreg/decoder.hpp"

#include "init.hpp"
#include "hetreg/errors.hpp"
#include "hetreg/ops.hpp"
#include "hetreg/warpfield.hpp"

#include <cmath>
#include <iomanip>

namespace hetreg {

using detail::random_normal;

namespace {

Tensor conv_weight(Rng &rng, Index out, Index in, Index s)
{
  return random_normal(rng, {out, in, s, s, s}, 1.0 / std::sqrt(static_cast<double>(in * s * s * s)));
}

void append(std::vector<std::pair<std::string, Tensor>> &out, std::vector<std::pair<std::string, Tensor>> more)
{
  for (auto &m : more) { out.push_back(std::move(m)); }
}

const char *direction_name(int d)
{
  static const char *names[3] = {"z", "y", "x"};
  return names[d];
}

LevelOutput apply_head(const Tensor &features, const DeformationField &phi_in, const HeadParams &head,
                       const DecoderConfig &cfg, int factor)
{
  LevelOutput out;
  out.factor = factor;
  out.head   = head.type;
  Tensor raw;
  if (head.type == HeadType::Conv) {
    raw = add_channel_bias(conv3d(features, head.weight), head.bias);
  } else {
    std::vector<Tensor> parts;
    for (std::size_t d = 0; d < 3; ++d) {
      auto r                  = shmoe_forward(features, head.directions[d]);
      out.direction_outputs[d] = r.delta;
      out.probs[d]             = r.probs;
      out.routing[d]           = std::move(r.routing);
      parts.push_back(r.delta);
    }
    raw = concat(parts);
  }
  out.residual = cfg.diffeomorphic ? integrate_velocity(VelocityField{raw}, cfg.velocity_steps).disp : raw;
  out.phi      = {add(phi_in.disp, out.residual)};
  return out;
}

} // namespace

HeadType DecoderConfig::head_at(int factor) const
{
  return factor <= 8 && shmoe_factors.count(factor) ? HeadType::Shmoe : HeadType::Conv;
}

HeadParams HeadParams::create(Rng &rng, HeadType type, Index channels, const DecoderConfig &cfg)
{
  HeadParams h;
  h.type = type;
  if (type == HeadType::Conv) {
    h.weight = Tensor({3, channels, 3, 3, 3}, 0.0, true);
    h.bias   = Tensor({3}, 0.0, true);
  } else {
    for (auto &d : h.directions) {
      d = ShmoeParams::create(rng, channels, cfg.kernel_sizes, cfg.shmoe_topk, cfg.router_kernel);
    }
  }
  return h;
}

std::vector<std::pair<std::string, Tensor>> HeadParams::named(const std::string &prefix) const
{
  if (type == HeadType::Conv) { return {{prefix + ".conv.weight", weight}, {prefix + ".conv.bias", bias}}; }
  std::vector<std::pair<std::string, Tensor>> out;
  for (int d = 0; d < 3; ++d) {
    append(out, directions[static_cast<std::size_t>(d)].named(prefix + ".shmoe_" + direction_name(d)));
  }
  return out;
}

DecoderParams DecoderParams::create(Rng &rng, const EncoderConfig &enc, const DecoderConfig &cfg, Index in_channels)
{
  if (cfg.stem_channels < 1) { throw ConfigError("decoder: stem_channels must be positive"); }
  if (cfg.velocity_steps < 1) { throw ConfigError("decoder: velocity_steps must be positive"); }
  for (int f : cfg.shmoe_factors) {
    if (f < 1 || (f & (f - 1)) != 0) { throw ConfigError("decoder: SHMoE level factors must be powers of two"); }
  }
  if (enc.patch_size < 2 || (enc.patch_size & (enc.patch_size - 1)) != 0) {
    throw ConfigError("decoder: patch_size must be a power of two >= 2");
  }
  DecoderParams p;
  Index         s = cfg.stem_channels;
  p.stem1_weight  = conv_weight(rng, s, 2 * in_channels, 3);
  p.stem1_bias    = Tensor({s}, 0.0, true);
  p.stem2_weight  = conv_weight(rng, s, s, 3);
  p.stem2_bias    = Tensor({s}, 0.0, true);
  for (int l = enc.levels() - 1; l >= 0; --l) {
    int factor = static_cast<int>(enc.stride(l));
    p.factors.push_back(factor);
    p.heads.push_back(HeadParams::create(rng, cfg.head_at(factor), 2 * enc.channels(l), cfg));
  }
  p.factors.push_back(1);
  p.heads.push_back(HeadParams::create(rng, cfg.head_at(1), s, cfg));
  return p;
}

std::vector<std::pair<std::string, Tensor>> DecoderParams::named(const std::string &prefix) const
{
  std::vector<std::pair<std::string, Tensor>> out{{prefix + ".stem1.weight", stem1_weight},
                                                  {prefix + ".stem1.bias", stem1_bias},
                                                  {prefix + ".stem2.weight", stem2_weight},
                                                  {prefix + ".stem2.bias", stem2_bias}};
  for (std::size_t i = 0; i < heads.size(); ++i) {
    append(out, heads[i].named(prefix + ".head_1_" + std::to_string(factors[i])));
  }
  return out;
}

DeformationField upsample_field(const DeformationField &phi) { return {scale(upsample2x(phi.disp), 2.0)}; }

LevelOutput decode_level(const Tensor &moving_features, const Tensor &fixed_features, const DeformationField &phi_in,
                         const HeadParams &head, const DecoderConfig &cfg)
{
  if (moving_features.shape() != fixed_features.shape() || moving_features.dim(1) != phi_in.depth() ||
      moving_features.dim(2) != phi_in.height() || moving_features.dim(3) != phi_in.width()) {
    throw DimensionError("decode_level: features " + shape_string(moving_features.shape()) + " / " +
                         shape_string(fixed_features.shape()) + " vs field " + shape_string(phi_in.disp.shape()));
  }
  std::vector<Tensor> both{warp(moving_features, phi_in), fixed_features};
  return apply_head(concat(both), phi_in, head, cfg, 0);
}

DecodeResult decode_pyramid(const FeaturePyramid &moving, const FeaturePyramid &fixed, const Volume &moving_image,
                            const Volume &fixed_image, const DecoderConfig &cfg, const DecoderParams &params)
{
  if (moving.size() != fixed.size() || moving.size() + 1 != params.heads.size()) {
    throw DimensionError("decode_pyramid: pyramid depth does not match decoder heads");
  }
  DecodeResult     res;
  const Tensor    &coarsest = moving.back();
  DeformationField phi      = DeformationField::zeros(coarsest.dim(1), coarsest.dim(2), coarsest.dim(3));
  for (std::size_t i = 0; i < params.heads.size(); ++i) {
    int factor = params.factors[i];
    if (i > 0) {
      for (int f = params.factors[i - 1]; f > factor; f /= 2) { phi = upsample_field(phi); }
    }
    LevelOutput level;
    if (i + 1 < params.heads.size()) {
      std::size_t l = moving.size() - 1 - i;
      level         = decode_level(moving[l], fixed[l], phi, params.heads[i], cfg);
    } else {
      std::vector<Tensor> both{warp(moving_image.data, phi), fixed_image.data};
      auto stem = gelu(add_channel_bias(conv3d(concat(both), params.stem1_weight), params.stem1_bias));
      stem      = gelu(add_channel_bias(conv3d(stem, params.stem2_weight), params.stem2_bias));
      level     = apply_head(stem, phi, params.heads[i], cfg, factor);
    }
    level.factor = factor;
    phi          = level.phi;
    res.levels.push_back(std::move(level));
  }
  res.phi = phi;
  return res;
}

void write_diagnostics(std::ostream &os, const DecodeResult &result)
{
  os << "# factor extent head residual_l2 [direction loads...]\n";
  for (auto &l : result.levels) {
    double ss = 0.0;
    for (double v : l.residual.data()) { ss += v * v; }
    os << "1/" << l.factor << ' ' << l.phi.depth() << 'x' << l.phi.height() << 'x' << l.phi.width() << ' '
       << (l.head == HeadType::Shmoe ? "shmoe" : "conv") << ' ' << std::setprecision(9) << std::sqrt(ss);
    if (l.head == HeadType::Shmoe) {
      for (int d = 0; d < 3; ++d) {
        os << ' ' << direction_name(d) << '=';
        auto load = expert_load(l.routing[static_cast<std::size_t>(d)]);
        for (std::size_t e = 0; e < load.size(); ++e) { os << (e ? "," : "") << load[e]; }
      }
    }
    os << '\n';
  }
}

} // namespace hetreg
