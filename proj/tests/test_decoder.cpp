#include "hetreg/decoder.hpp"
#include "hetreg/errors.hpp"
#include "hetreg/gradcheck.hpp"
#include "hetreg/model.hpp"
#include "hetreg/ops.hpp"
#include "hetreg/warpfield.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

using namespace hetreg;

namespace {

Tensor random_tensor(Shape shape, Rng &rng, double scale = 1.0)
{
  std::vector<double> v(static_cast<std::size_t>(shape_size(shape)));
  for (auto &x : v) { x = scale * rng.normal(); }
  return Tensor(std::move(shape), std::move(v));
}

EncoderConfig small_encoder()
{
  EncoderConfig c;
  c.embed_dim = 8;
  c.depths    = {1, 1};
  c.window    = 2;
  c.experts   = 4;
  c.topk      = 2;
  return c;
}

void randomize(DecoderParams &p, Rng &rng, double scale)
{
  for (auto &[n, t] : p.named()) {
    for (auto &v : const_cast<Tensor &>(t).data()) { v = scale * rng.normal(); }
  }
}

double max_diff(const Tensor &a, const Tensor &b)
{
  EXPECT_EQ(a.shape(), b.shape());
  double m = 0.0;
  for (Index i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

struct Rig
{
  EncoderConfig  enc = small_encoder();
  DecoderConfig  dec;
  EncoderParams  ep;
  DecoderParams  dp;
  Volume         moving, fixed;
  FeaturePyramid pm, pf;

  explicit Rig(std::uint64_t seed, bool random_heads, DecoderConfig d = {})
    : dec(std::move(d))
  {
    Rng rng(seed);
    ep = EncoderParams::create(rng, enc);
    dp = DecoderParams::create(rng, enc, dec);
    if (random_heads) randomize(dp, rng, 0.05);
    moving        = {random_tensor({1, 8, 8, 8}, rng)};
    fixed         = {random_tensor({1, 8, 8, 8}, rng)};
    std::tie(pm, pf) = encode_pair(moving, fixed, enc, ep);
  }
  DecodeResult run() const { return decode_pyramid(pm, pf, moving, fixed, dec, dp); }
};

Index conv_head_size(Index c) { return 3 * c * 27 + 3; }

Index shmoe_head_size(Index c, const DecoderConfig &d)
{
  Index n = static_cast<Index>(d.kernel_sizes.size()), experts = 0;
  for (int k : d.kernel_sizes) experts += c * k * k * k + 1;
  Index r = d.router_kernel;
  return 3 * (experts + n * c * r * r * r + n);
}

} // namespace

TEST(UpsampleField, ConstantFieldDoubles)
{
  Tensor t({3, 2, 3, 4});
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = i < 24 ? 1.5 : (i < 48 ? -0.25 : 3.0);
  auto u = upsample_field({t});
  ASSERT_EQ(u.disp.shape(), (Shape{3, 4, 6, 8}));
  for (Index i = 0; i < u.disp.size(); ++i) {
    double expect = i < 192 ? 3.0 : (i < 384 ? -0.5 : 6.0);
    EXPECT_NEAR(u.disp[i], expect, 1e-14);
  }
}

TEST(DecoderConfig, HeadAssignment)
{
  DecoderConfig d;
  EXPECT_EQ(d.head_at(1), HeadType::Shmoe);
  EXPECT_EQ(d.head_at(2), HeadType::Shmoe);
  EXPECT_EQ(d.head_at(4), HeadType::Conv);
  d.shmoe_factors = {8, 16};
  EXPECT_EQ(d.head_at(8), HeadType::Shmoe);
  EXPECT_EQ(d.head_at(16), HeadType::Conv);
}

TEST(DecodePyramid, ZeroInitializedHeadsGiveZeroField)
{
  Rig s(1, false);
  auto  r = s.run();
  ASSERT_EQ(r.levels.size(), 3u);
  for (double v : r.phi.disp.data()) EXPECT_EQ(v, 0.0);
  for (auto &l : r.levels)
    for (double v : l.residual.data()) EXPECT_EQ(v, 0.0);
  auto warped = warp(s.moving, r.phi);
  EXPECT_EQ(max_diff(warped.data, s.moving.data), 0.0);
}

TEST(DecodePyramid, LevelFactorsExtentsAndHeads)
{
  Rig s(2, true);
  auto  r = s.run();
  std::vector<int>   factors{4, 2, 1};
  std::vector<Index> extents{2, 4, 8};
  std::vector<HeadType> heads{HeadType::Conv, HeadType::Shmoe, HeadType::Shmoe};
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(r.levels[i].factor, factors[i]);
    EXPECT_EQ(r.levels[i].head, heads[i]);
    EXPECT_EQ(r.levels[i].phi.disp.shape(), (Shape{3, extents[i], extents[i], extents[i]}));
  }
}

TEST(DecodePyramid, ResidualsComposeAdditively)
{
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rig s(10 + seed, true);
    auto  r = s.run();
    EXPECT_EQ(max_diff(r.levels[0].phi.disp, r.levels[0].residual), 0.0);
    for (std::size_t i = 1; i < r.levels.size(); ++i) {
      auto up = upsample_field(r.levels[i - 1].phi);
      EXPECT_LT(max_diff(sub(r.levels[i].phi.disp, up.disp), r.levels[i].residual), 1e-12);
    }
    EXPECT_EQ(max_diff(r.phi.disp, r.levels.back().phi.disp), 0.0);
  }
}

TEST(DecodePyramid, DiffeomorphicResidualIsIntegratedVelocity)
{
  DecoderConfig diff;
  diff.diffeomorphic = true;
  Rig plain(3, true), integ(3, true, diff);
  auto  a = plain.run(), b = integ.run();
  // The coarsest level starts from zero, so its raw head output is the plain residual.
  auto expected = integrate_velocity(VelocityField{a.levels[0].residual}, diff.velocity_steps);
  EXPECT_LT(max_diff(b.levels[0].residual, expected.disp), 1e-12);
  EXPECT_GT(max_diff(b.levels[0].residual, a.levels[0].residual), 0.0);
}

TEST(DecodeLevel, ZeroFieldAndExplicitConvHead)
{
  Rng           rng(5);
  DecoderConfig d;
  auto          head = HeadParams::create(rng, HeadType::Conv, 4, d);
  for (auto &v : head.weight.data()) v = rng.normal();
  for (auto &v : head.bias.data()) v = rng.normal();
  auto fm  = random_tensor({2, 3, 3, 3}, rng);
  auto ff  = random_tensor({2, 3, 3, 3}, rng);
  auto out = decode_level(fm, ff, DeformationField::zeros(3, 3, 3), head, d);
  std::vector<Tensor> both{fm, ff};
  auto expect = add_channel_bias(conv3d(concat(both), head.weight), head.bias);
  EXPECT_LT(max_diff(out.phi.disp, expect), 1e-12);
  EXPECT_THROW(decode_level(fm, ff, DeformationField::zeros(2, 3, 3), head, d), DimensionError);
}

TEST(DecoderParams, DefaultParameterCountMatchesClosedForm)
{
  Rng           rng(0);
  EncoderConfig enc;
  DecoderConfig dec;
  auto          p = DecoderParams::create(rng, enc, dec);
  Index         n = 0;
  for (auto &[name, t] : p.named()) n += t.size();
  Index expect = 8 * 2 * 27 + 8 + 8 * 8 * 27 + 8;
  expect += conv_head_size(256) + conv_head_size(128) + conv_head_size(64); // 1/16, 1/8, 1/4
  expect += shmoe_head_size(32, dec) + shmoe_head_size(8, dec);             // 1/2, full
  EXPECT_EQ(n, expect);
  EXPECT_EQ(p.factors, (std::vector<int>{16, 8, 4, 2, 1}));
}

TEST(DecoderParams, NoShmoeLeavesOnlyThreeChannelConvHeads)
{
  Rng           rng(0);
  EncoderConfig enc;
  DecoderConfig dec;
  dec.shmoe_factors.clear();
  auto  p = DecoderParams::create(rng, enc, dec);
  Index n = 0;
  for (auto &[name, t] : p.named()) n += t.size();
  EXPECT_EQ(n, 8 * 2 * 27 + 8 + 8 * 8 * 27 + 8 + conv_head_size(256) + conv_head_size(128) + conv_head_size(64) +
                 conv_head_size(32) + conv_head_size(8));
  for (auto &h : p.heads) {
    EXPECT_EQ(h.type, HeadType::Conv);
    EXPECT_EQ(h.weight.dim(0), 3);
  }
}

TEST(DecoderParams, RejectsBadGeometry)
{
  Rng           rng(0);
  EncoderConfig enc;
  DecoderConfig dec;
  enc.patch_size = 3;
  EXPECT_THROW(DecoderParams::create(rng, enc, dec), ConfigError);
  enc.patch_size    = 2;
  dec.shmoe_factors = {3};
  EXPECT_THROW(DecoderParams::create(rng, enc, dec), ConfigError);
}

TEST(WriteDiagnostics, OneLinePerLevel)
{
  Rig              s(4, true);
  std::ostringstream os;
  write_diagnostics(os, s.run());
  std::string text = os.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 4);
  EXPECT_NE(text.find("1/4 2x2x2 conv"), std::string::npos);
  EXPECT_NE(text.find("1/1 8x8x8 shmoe"), std::string::npos);
}

TEST(EndToEnd, GradientCheck8Cubed)
{
  RunConfig cfg;
  cfg.size    = 8;
  cfg.encoder = small_encoder();
  cfg.seed    = 31;
  auto model  = Model::create(cfg);
  Rng  rng(32);
  randomize(model.decoder, rng, 0.05);
  Volume m{random_tensor({1, 8, 8, 8}, rng)}, f{random_tensor({1, 8, 8, 8}, rng)};
  auto   loss = [&] { return evaluate_loss(model, m, f, cfg).terms.total; };
  std::vector<Tensor> params;
  for (auto &[n, t] : model.parameters()) params.push_back(t);
  GradCheckOptions opts;
  opts.max_entries_per_tensor = 3;
  opts.seed                   = 8;
  EXPECT_LT(finite_diff_check(loss, params, opts), 1e-3);
}
