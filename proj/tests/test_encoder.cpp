#include "hetreg/encoder.hpp"
#include "hetreg/errors.hpp"
#include "hetreg/gradcheck.hpp"
#include "hetreg/ops.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace hetreg;

namespace {

Tensor random_tensor(Shape shape, Rng &rng, double scale = 1.0)
{
  std::vector<double> v(static_cast<std::size_t>(shape_size(shape)));
  for (auto &x : v) { x = scale * rng.normal(); }
  return Tensor(std::move(shape), std::move(v));
}

EncoderConfig small_config()
{
  EncoderConfig c;
  c.embed_dim = 8;
  c.depths    = {2, 1};
  c.window    = 2;
  c.experts   = 4;
  c.topk      = 2;
  return c;
}

void jitter(BlockParams &b, Rng &rng)
{
  for (auto *t : {&b.norm1_gamma, &b.norm1_beta, &b.norm2_gamma, &b.norm2_beta, &b.fc1_bias, &b.fc2_bias}) {
    for (auto &v : t->data()) { v += 0.3 * rng.normal(); }
  }
}

double at(const Tensor &t, Index c, Index z, Index y, Index x)
{
  return t[((c * t.dim(1) + z) * t.dim(2) + y) * t.dim(3) + x];
}

// Row-wise layer norm, then the block written out window by window with
// explicit loops. The MoA layer itself is tested on its own.
Tensor block_oracle(const Tensor &x, const BlockParams &p, Index w)
{
  Index C = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3);
  auto  norm = [&](std::vector<double> row, const Tensor &g, const Tensor &b) {
    double mu = 0, var = 0;
    for (double v : row) mu += v;
    mu /= static_cast<double>(C);
    for (double v : row) var += (v - mu) * (v - mu);
    var /= static_cast<double>(C);
    for (Index c = 0; c < C; ++c) row[c] = (row[c] - mu) / std::sqrt(var + 1e-5) * g[c] + b[c];
    return row;
  };
  std::vector<double> out(static_cast<std::size_t>(x.size()));
  for (Index wz = 0; wz < D; wz += w)
    for (Index wy = 0; wy < H; wy += w)
      for (Index wx = 0; wx < W; wx += w) {
        std::vector<std::array<Index, 3>> pos;
        std::vector<double>               h, n;
        for (Index z = wz; z < wz + w; ++z)
          for (Index y = wy; y < wy + w; ++y)
            for (Index xx = wx; xx < wx + w; ++xx) {
              pos.push_back({z, y, xx});
              std::vector<double> row(static_cast<std::size_t>(C));
              for (Index c = 0; c < C; ++c) row[c] = at(x, c, z, y, xx);
              h.insert(h.end(), row.begin(), row.end());
              auto nr = norm(row, p.norm1_gamma, p.norm1_beta);
              n.insert(n.end(), nr.begin(), nr.end());
            }
        Index  T  = static_cast<Index>(pos.size());
        Tensor nt({T, C}, n);
        auto   a  = moa_forward(nt, nt, nt, p.attention).output;
        Index  hd = p.fc1_weight.dim(1);
        for (Index t = 0; t < T; ++t) {
          std::vector<double> row(static_cast<std::size_t>(C));
          for (Index c = 0; c < C; ++c) row[c] = h[t * C + c] + a[t * C + c];
          auto                n2 = norm(row, p.norm2_gamma, p.norm2_beta);
          std::vector<double> hid(static_cast<std::size_t>(hd));
          for (Index j = 0; j < hd; ++j) {
            double s = p.fc1_bias[j];
            for (Index c = 0; c < C; ++c) s += n2[c] * p.fc1_weight[c * hd + j];
            hid[j] = 0.5 * s * (1.0 + std::erf(s / std::sqrt(2.0)));
          }
          for (Index c = 0; c < C; ++c) {
            double s = p.fc2_bias[c];
            for (Index j = 0; j < hd; ++j) s += hid[j] * p.fc2_weight[j * C + c];
            auto [z, y, xx] = pos[t];
            out[((c * D + z) * H + y) * W + xx] = row[c] + s;
          }
        }
      }
  return Tensor(x.shape(), std::move(out));
}

double max_diff(const Tensor &a, const Tensor &b)
{
  EXPECT_EQ(a.shape(), b.shape());
  double m = 0.0;
  for (Index i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

} // namespace

TEST(PatchEmbed, MatchesLoopOracle)
{
  Rng           rng(3);
  EncoderConfig cfg = small_config();
  auto          p   = EncoderParams::create(rng, cfg);
  for (auto &b : p.embed_bias.data()) b = rng.normal();
  auto vol = random_tensor({1, 4, 6, 8}, rng);
  auto out = patch_embed(vol, p, cfg);
  ASSERT_EQ(out.shape(), (Shape{8, 2, 3, 4}));
  Index E = cfg.embed_dim;
  for (Index e = 0; e < E; ++e)
    for (Index z = 0; z < 2; ++z)
      for (Index y = 0; y < 3; ++y)
        for (Index x = 0; x < 4; ++x) {
          double s = p.embed_bias[e];
          Index  f = 0;
          for (Index a = 0; a < 2; ++a)
            for (Index b = 0; b < 2; ++b)
              for (Index c = 0; c < 2; ++c, ++f) s += at(vol, 0, 2 * z + a, 2 * y + b, 2 * x + c) * p.embed_weight[f * E + e];
          EXPECT_NEAR(at(out, e, z, y, x), s, 1e-12);
        }
}

TEST(PatchEmbed, OutputDependsOnlyOnOwnPatch)
{
  Rng           rng(4);
  EncoderConfig cfg = small_config();
  auto          p   = EncoderParams::create(rng, cfg);
  auto          vol = random_tensor({1, 4, 4, 4}, rng);
  auto          a   = patch_embed(vol, p, cfg);
  vol.data()[((0 * 4 + 3) * 4 + 2) * 4 + 1] += 1.0; // voxel (3,2,1) lives in patch (1,1,0)
  auto b = patch_embed(vol, p, cfg);
  for (Index e = 0; e < cfg.embed_dim; ++e)
    for (Index z = 0; z < 2; ++z)
      for (Index y = 0; y < 2; ++y)
        for (Index x = 0; x < 2; ++x) {
          bool own = z == 1 && y == 1 && x == 0;
          if (!own) EXPECT_EQ(at(a, e, z, y, x), at(b, e, z, y, x));
        }
}

TEST(CyclicShift, MatchesDefinition)
{
  Rng  rng(5);
  auto x = random_tensor({2, 3, 4, 5}, rng);
  auto y = cyclic_shift(x, 2);
  for (Index c = 0; c < 2; ++c)
    for (Index z = 0; z < 3; ++z)
      for (Index h = 0; h < 4; ++h)
        for (Index w = 0; w < 5; ++w) EXPECT_EQ(at(y, c, z, h, w), at(x, c, (z + 2) % 3, (h + 2) % 4, (w + 2) % 5));
}

TEST(CyclicShift, ShiftThenUnshiftIsIdentity)
{
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng   rng(seed);
    Index s    = static_cast<Index>(rng.uniform() * 7) - 3;
    auto  x    = random_tensor({3, 4, 4, 6}, rng);
    auto  back = cyclic_shift(cyclic_shift(x, s), -s);
    EXPECT_EQ(max_diff(back, x), 0.0) << "seed " << seed;
  }
}

TEST(WindowedBlock, MatchesWindowLoopOracle)
{
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng           rng(100 + seed);
    EncoderConfig cfg = small_config();
    auto          p   = BlockParams::create(rng, cfg, 8);
    jitter(p, rng);
    auto x = random_tensor({8, 4, 4, 4}, rng);
    EXPECT_LT(max_diff(windowed_moa_block(x, p, 2, false), block_oracle(x, p, 2)), 1e-12) << "seed " << seed;
  }
}

TEST(WindowedBlock, ShiftedEqualsRollPartitionUnroll)
{
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng           rng(200 + seed);
    EncoderConfig cfg = small_config();
    auto          p   = BlockParams::create(rng, cfg, 8);
    jitter(p, rng);
    auto x        = random_tensor({8, 4, 4, 4}, rng);
    auto expected = cyclic_shift(block_oracle(cyclic_shift(x, 1), p, 2), -1);
    EXPECT_LT(max_diff(windowed_moa_block(x, p, 2, true), expected), 1e-12) << "seed " << seed;
  }
}

TEST(WindowedBlock, WindowsDoNotInteract)
{
  Rng           rng(7);
  EncoderConfig cfg = small_config();
  auto          p   = BlockParams::create(rng, cfg, 8);
  auto          x   = random_tensor({8, 4, 4, 4}, rng);
  auto          a   = windowed_moa_block(x, p, 2, false);
  for (Index c = 0; c < 8; ++c) x.data()[((c * 4 + 0) * 4 + 0) * 4 + 0] += 0.5;
  auto b = windowed_moa_block(x, p, 2, false);
  for (Index c = 0; c < 8; ++c)
    for (Index z = 0; z < 4; ++z)
      for (Index y = 0; y < 4; ++y)
        for (Index w = 0; w < 4; ++w) {
          bool first_window = z < 2 && y < 2 && w < 2;
          if (!first_window) EXPECT_EQ(at(a, c, z, y, w), at(b, c, z, y, w));
        }
}

TEST(WindowedBlock, RejectsWindowThatDoesNotDivide)
{
  Rng           rng(1);
  EncoderConfig cfg = small_config();
  auto          p   = BlockParams::create(rng, cfg, 8);
  EXPECT_THROW(windowed_moa_block(Tensor({8, 3, 4, 4}), p, 2, false), ConfigError);
}

TEST(WindowedBlock, SingleWindowShiftIsIrrelevantUnderRoll)
{
  // One window covering the volume: attention is permutation-equivariant and
  // the FFN is per token, so rolling before and after changes nothing.
  Rng           rng(9);
  EncoderConfig cfg = small_config();
  auto          p   = BlockParams::create(rng, cfg, 8);
  auto          x   = random_tensor({8, 2, 2, 2}, rng);
  EXPECT_LT(max_diff(windowed_moa_block(x, p, 2, true), windowed_moa_block(x, p, 2, false)), 1e-12);
}

TEST(Encode, DefaultPyramidExtentsAndChannels)
{
  Rng           rng(0);
  EncoderConfig cfg;
  auto          p = EncoderParams::create(rng, cfg);
  EncoderTrace  trace;
  auto          pyr = encode(random_tensor({1, 32, 32, 32}, rng), cfg, p, &trace);
  ASSERT_EQ(pyr.size(), 4u);
  for (int l = 0; l < 4; ++l) {
    Index n = 16 >> l;
    EXPECT_EQ(pyr[static_cast<std::size_t>(l)].shape(), (Shape{16 << l, n, n, n}));
    ASSERT_EQ(trace.routing[static_cast<std::size_t>(l)].size(), 2u);
    for (auto &r : trace.routing[static_cast<std::size_t>(l)]) {
      EXPECT_EQ(r.topk, 4);
      EXPECT_EQ(r.tokens(), n * n * n);
    }
  }
}

TEST(Encode, ValidateRejectsIndivisibleExtents)
{
  EncoderConfig cfg;
  EXPECT_THROW(cfg.validate(32, 32, 24), ConfigError);
  EXPECT_THROW(cfg.validate(32, 32, 48), ConfigError); // 6 at level 3
  EXPECT_NO_THROW(cfg.validate(32, 16, 64));
  cfg.embed_dim = 10;
  EXPECT_THROW(cfg.validate(32, 32, 32), ConfigError);
}

TEST(Encode, WindowClampedToExtent)
{
  EncoderConfig cfg;
  EXPECT_EQ(cfg.window_at(16), 4);
  EXPECT_EQ(cfg.window_at(2), 2);
}

TEST(EncodePair, SharedWeightsAndSwapSymmetry)
{
  Rng           rng(11);
  EncoderConfig cfg = small_config();
  auto          p   = EncoderParams::create(rng, cfg);
  Volume        m{random_tensor({1, 8, 8, 8}, rng)}, f{random_tensor({1, 8, 8, 8}, rng)};
  auto [pm, pf]     = encode_pair(m, f, cfg, p);
  auto [qm, qf]     = encode_pair(f, m, cfg, p);
  auto solo         = encode(m.data, cfg, p);
  for (std::size_t l = 0; l < pm.size(); ++l) {
    EXPECT_EQ(max_diff(pm[l], solo[l]), 0.0);
    EXPECT_EQ(max_diff(pm[l], qf[l]), 0.0);
    EXPECT_EQ(max_diff(pf[l], qm[l]), 0.0);
  }
  EXPECT_THROW(encode_pair(m, Volume{Tensor({1, 8, 8, 16})}, cfg, p), ArgumentError);
}

TEST(EncoderParams, NamesAreUniqueAndCoverTensors)
{
  Rng           rng(0);
  EncoderConfig cfg;
  auto          named = EncoderParams::create(rng, cfg).named();
  std::set<std::string> names;
  for (auto &[n, t] : named) {
    EXPECT_TRUE(names.insert(n).second) << n;
    EXPECT_TRUE(t.requires_grad()) << n;
  }
  EXPECT_TRUE(names.count("encoder.level1.block0.attn.gate"));
  EXPECT_TRUE(names.count("encoder.merge3.reduction"));
  EXPECT_FALSE(names.count("encoder.merge4.reduction"));
}

TEST(Encode, GradientCheck8Cubed)
{
  Rng           rng(21);
  EncoderConfig cfg = small_config();
  auto          p   = EncoderParams::create(rng, cfg);
  for (auto &lvl : p.blocks)
    for (auto &b : lvl) jitter(b, rng);
  auto vol = random_tensor({1, 8, 8, 8}, rng);
  auto r0  = random_tensor({8, 4, 4, 4}, rng);
  auto r1  = random_tensor({16, 2, 2, 2}, rng);
  auto f   = [&] {
    auto pyr = encode(vol, cfg, p);
    return sum(pyr[0] * r0) + sum(pyr[1] * r1);
  };
  std::vector<Tensor> params;
  for (auto &[n, t] : p.named()) params.push_back(t);
  GradCheckOptions opts;
  opts.max_entries_per_tensor = 6;
  opts.seed                   = 4;
  EXPECT_LT(finite_diff_check(f, params, opts), 1e-4);
}
