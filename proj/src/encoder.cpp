#include "hetreg/encoder.hpp"

#include "init.hpp"
#include "hetreg/errors.hpp"
#include "hetreg/ops.hpp"

#include <cmath>

namespace hetreg {

using detail::random_normal;

namespace {

Tensor ones(Index n) { return Tensor({n}, 1.0, true); }
Tensor zeros(Index n) { return Tensor({n}, 0.0, true); }

Tensor linear_weight(Rng &rng, Index in, Index out)
{
  return random_normal(rng, {in, out}, 1.0 / std::sqrt(static_cast<double>(in)));
}

Index wrap(Index i, Index n) { return ((i % n) + n) % n; }

// Row order that lists tokens window by window; entry r is the voxel (after a
// roll by `s`) that lands at window-ordered row r.
std::vector<Index> window_order(Index D, Index H, Index W, Index w, Index s)
{
  std::vector<Index> order;
  order.reserve(static_cast<std::size_t>(D * H * W));
  for (Index wz = 0; wz < D; wz += w)
    for (Index wy = 0; wy < H; wy += w)
      for (Index wx = 0; wx < W; wx += w)
        for (Index z = wz; z < wz + w; ++z)
          for (Index y = wy; y < wy + w; ++y)
            for (Index x = wx; x < wx + w; ++x) {
              order.push_back((wrap(z + s, D) * H + wrap(y + s, H)) * W + wrap(x + s, W));
            }
  return order;
}

std::vector<Index> invert(const std::vector<Index> &p)
{
  std::vector<Index> inv(p.size());
  for (std::size_t r = 0; r < p.size(); ++r) { inv[static_cast<std::size_t>(p[r])] = static_cast<Index>(r); }
  return inv;
}

void append(std::vector<std::pair<std::string, Tensor>> &out, std::vector<std::pair<std::string, Tensor>> more)
{
  for (auto &m : more) { out.push_back(std::move(m)); }
}

} // namespace

void EncoderConfig::validate(Index depth, Index height, Index width) const
{
  if (patch_size < 1 || embed_dim < 4 || window < 1 || depths.empty() || mlp_ratio < 1) {
    throw ConfigError("encoder: patch, window, mlp ratio and levels must be positive and embed_dim >= 4");
  }
  if (embed_dim % 4 != 0) { throw ConfigError("encoder: embed_dim must be a multiple of 4"); }
  for (int d : depths) {
    if (d < 1) { throw ConfigError("encoder: every level needs at least one block"); }
  }
  Index total = stride(levels() - 1);
  for (Index e : {depth, height, width}) {
    if (e % total != 0) {
      throw ConfigError("encoder: extent " + std::to_string(e) + " not divisible by patch_size * 2^(levels-1) = " +
                        std::to_string(total));
    }
  }
  for (int l = 0; l < levels(); ++l) {
    Index w = window_at(std::min({depth, height, width}) / stride(l));
    for (Index e : {depth, height, width}) {
      Index n = e / stride(l);
      if (n % w != 0) {
        throw ConfigError("encoder: window " + std::to_string(w) + " does not divide level " + std::to_string(l + 1) +
                          " extent " + std::to_string(n));
      }
    }
  }
}

BlockParams BlockParams::create(Rng &rng, const EncoderConfig &cfg, Index channels)
{
  BlockParams b;
  b.norm1_gamma = ones(channels);
  b.norm1_beta  = zeros(channels);
  Index dh      = channels / 4;
  b.attention   = cfg.attention == AttentionKind::Mixture ? MoAParams::mixture(rng, channels, dh, cfg.experts, cfg.topk)
                                                          : MoAParams::multi_head(rng, channels, dh, cfg.heads);
  b.norm2_gamma = ones(channels);
  b.norm2_beta  = zeros(channels);
  Index hidden  = cfg.mlp_ratio * channels;
  b.fc1_weight  = linear_weight(rng, channels, hidden);
  b.fc1_bias    = zeros(hidden);
  b.fc2_weight  = linear_weight(rng, hidden, channels);
  b.fc2_bias    = zeros(channels);
  return b;
}

std::vector<std::pair<std::string, Tensor>> BlockParams::named(const std::string &prefix) const
{
  std::vector<std::pair<std::string, Tensor>> out{{prefix + ".norm1.gamma", norm1_gamma},
                                                  {prefix + ".norm1.beta", norm1_beta}};
  append(out, attention.named(prefix + ".attn"));
  append(out, {{prefix + ".norm2.gamma", norm2_gamma},
               {prefix + ".norm2.beta", norm2_beta},
               {prefix + ".fc1.weight", fc1_weight},
               {prefix + ".fc1.bias", fc1_bias},
               {prefix + ".fc2.weight", fc2_weight},
               {prefix + ".fc2.bias", fc2_bias}});
  return out;
}

MergeParams MergeParams::create(Rng &rng, Index channels)
{
  return {ones(8 * channels), zeros(8 * channels), linear_weight(rng, 8 * channels, 2 * channels)};
}

std::vector<std::pair<std::string, Tensor>> MergeParams::named(const std::string &prefix) const
{
  return {{prefix + ".norm.gamma", norm_gamma}, {prefix + ".norm.beta", norm_beta}, {prefix + ".reduction", reduction}};
}

EncoderParams EncoderParams::create(Rng &rng, const EncoderConfig &cfg, Index in_channels)
{
  EncoderParams p;
  Index         fan_in = in_channels * cfg.patch_size * cfg.patch_size * cfg.patch_size;
  p.embed_weight       = linear_weight(rng, fan_in, cfg.embed_dim);
  p.embed_bias         = zeros(cfg.embed_dim);
  for (int l = 0; l < cfg.levels(); ++l) {
    std::vector<BlockParams> level;
    for (int b = 0; b < cfg.depths[static_cast<std::size_t>(l)]; ++b) {
      level.push_back(BlockParams::create(rng, cfg, cfg.channels(l)));
    }
    p.blocks.push_back(std::move(level));
    if (l + 1 < cfg.levels()) { p.merges.push_back(MergeParams::create(rng, cfg.channels(l))); }
  }
  return p;
}

std::vector<std::pair<std::string, Tensor>> EncoderParams::named(const std::string &prefix) const
{
  std::vector<std::pair<std::string, Tensor>> out{{prefix + ".embed.weight", embed_weight},
                                                  {prefix + ".embed.bias", embed_bias}};
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    for (std::size_t b = 0; b < blocks[l].size(); ++b) {
      append(out, blocks[l][b].named(prefix + ".level" + std::to_string(l + 1) + ".block" + std::to_string(b)));
    }
    if (l < merges.size()) { append(out, merges[l].named(prefix + ".merge" + std::to_string(l + 1))); }
  }
  return out;
}

Tensor patch_embed(const Tensor &volume, const EncoderParams &params, const EncoderConfig &cfg)
{
  Index p = cfg.patch_size;
  auto  t = add_row_bias(matmul(extract_patches(volume, p), params.embed_weight), params.embed_bias);
  return rows_to_channels(t, volume.dim(1) / p, volume.dim(2) / p, volume.dim(3) / p);
}

Tensor cyclic_shift(const Tensor &x, Index s)
{
  if (x.ndim() != 4) { throw DimensionError("cyclic_shift: expected [C x D x H x W], got " + shape_string(x.shape())); }
  Index              C = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3);
  std::vector<Index> src;
  src.reserve(static_cast<std::size_t>(x.size()));
  for (Index c = 0; c < C; ++c)
    for (Index z = 0; z < D; ++z)
      for (Index y = 0; y < H; ++y)
        for (Index w = 0; w < W; ++w) { src.push_back(((c * D + wrap(z + s, D)) * H + wrap(y + s, H)) * W + wrap(w + s, W)); }
  return gather_flat(x, x.shape(), std::move(src));
}

Tensor windowed_moa_block(const Tensor &x, const BlockParams &params, Index window, bool shift, TokenRouting *routing)
{
  Index D = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (D % window || H % window || W % window) {
    throw ConfigError("windowed_moa_block: window " + std::to_string(window) + " does not divide " +
                      shape_string(x.shape()));
  }
  auto order = window_order(D, H, W, window, shift ? window / 2 : 0);
  auto back  = invert(order);

  auto h   = gather_rows(channels_to_rows(x), order);
  auto n1  = layer_norm_rows(h, params.norm1_gamma, params.norm1_beta);
  auto att = moa_forward_windows(n1, n1, n1, params.attention, window * window * window);
  if (routing) { *routing = att.routing; }
  h       = h + att.output;
  auto n2 = layer_norm_rows(h, params.norm2_gamma, params.norm2_beta);
  auto f  = add_row_bias(matmul(gelu(add_row_bias(matmul(n2, params.fc1_weight), params.fc1_bias)), params.fc2_weight),
                         params.fc2_bias);
  h       = h + f;
  return rows_to_channels(gather_rows(h, back), D, H, W);
}

FeaturePyramid encode(const Tensor &volume, const EncoderConfig &cfg, const EncoderParams &params, EncoderTrace *trace)
{
  cfg.validate(volume.dim(1), volume.dim(2), volume.dim(3));
  FeaturePyramid pyramid;
  if (trace) { trace->routing.assign(static_cast<std::size_t>(cfg.levels()), {}); }
  auto x = patch_embed(volume, params, cfg);
  for (int l = 0; l < cfg.levels(); ++l) {
    auto  lu     = static_cast<std::size_t>(l);
    Index extent = std::min({x.dim(1), x.dim(2), x.dim(3)});
    Index w      = cfg.window_at(extent);
    for (std::size_t b = 0; b < params.blocks[lu].size(); ++b) {
      TokenRouting r;
      bool         shift = b % 2 == 1 && w < extent;
      x                  = windowed_moa_block(x, params.blocks[lu][b], w, shift, trace ? &r : nullptr);
      if (trace) { trace->routing[lu].push_back(std::move(r)); }
    }
    pyramid.push_back(x);
    if (l + 1 < cfg.levels()) {
      auto &m = params.merges[lu];
      auto  t = matmul(layer_norm_rows(extract_patches(x, 2), m.norm_gamma, m.norm_beta), m.reduction);
      x       = rows_to_channels(t, x.dim(1) / 2, x.dim(2) / 2, x.dim(3) / 2);
    }
  }
  return pyramid;
}

std::pair<FeaturePyramid, FeaturePyramid> encode_pair(const Volume &moving, const Volume &fixed, const EncoderConfig &cfg,
                                                      const EncoderParams &params, EncoderTrace *moving_trace,
                                                      EncoderTrace *fixed_trace)
{
  if (moving.data.shape() != fixed.data.shape()) {
    throw ArgumentError("encode_pair: moving " + shape_string(moving.data.shape()) + " vs fixed " +
                        shape_string(fixed.data.shape()));
  }
  return {encode(moving.data, cfg, params, moving_trace), encode(fixed.data, cfg, params, fixed_trace)};
}

} // namespace hetreg
