#include "hetreg/errors.hpp"
#include "hetreg/gradcheck.hpp"
#include "hetreg/ops.hpp"
#include "hetreg/shmoe.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace hetreg;
using namespace oracle;

namespace {

Tensor random_tensor(Shape shape, Rng &rng, double scale = 1.0, bool rg = false)
{
  std::vector<double> v(static_cast<std::size_t>(shape_size(shape)));
  for (auto &x : v) { x = scale * rng.normal(); }
  return Tensor(std::move(shape), std::move(v), rg);
}

ShmoeParams random_params(Rng &rng, Index C, int k)
{
  auto p = ShmoeParams::create(rng, C, {1, 3, 5}, k, 3, false);
  for (auto &b : p.router_bias.data()) { b = rng.normal(); }
  return p;
}

} // namespace

TEST(ShmoeForward, BiasedRouterGathersOneExpert)
{
  Rng  rng(1);
  auto p = random_params(rng, 2, 1);
  std::fill(p.router_kernel.data().begin(), p.router_kernel.data().end(), 0.0);
  p.router_bias = Tensor::from({0.0, 10.0, 0.0});
  auto f        = random_tensor({2, 3, 3, 3}, rng);
  auto out      = shmoe_forward(f, p);
  auto e1       = add_channel_bias(conv3d(f, p.expert_kernels[1]), p.expert_biases[1]);
  for (Index i = 0; i < e1.size(); ++i) { EXPECT_EQ(out.delta[i], e1[i]); }
}

TEST(ShmoeForward, ZeroFeaturesAndBiasesGiveZero)
{
  Rng  rng(2);
  auto p   = ShmoeParams::create(rng, 4);
  auto out = shmoe_forward(Tensor({4, 2, 2, 2}, 0.0), p);
  for (double v : out.delta.data()) { EXPECT_EQ(v, 0.0); }
}

class ShmoeDense : public ::testing::TestWithParam<int>
{
};

TEST_P(ShmoeDense, SparseEqualsDenseEnumeration)
{
  for (int k : {1, 2, 3}) {
    Rng   rng(static_cast<std::uint64_t>(GetParam() * 7 + k));
    Index n   = 2 + GetParam() % 3;
    auto  p   = random_params(rng, 3, k);
    auto  f   = random_tensor({3, n, n, n}, rng);
    auto  out = shmoe_forward(f, p);
    auto  ref = dense_oracle(f, p);
    for (Index i = 0; i < out.delta.size(); ++i) { EXPECT_NEAR(out.delta[i], ref[static_cast<std::size_t>(i)], 1e-12); }
  }
}

TEST_P(ShmoeDense, RoutingTensorHasKNonzerosSummingToOne)
{
  for (int k : {1, 2}) {
    Rng   rng(static_cast<std::uint64_t>(GetParam() + 50 * k));
    auto  p   = random_params(rng, 2, k);
    auto  out = shmoe_forward(random_tensor({2, 3, 3, 3}, rng), p);
    Index V   = out.routing.voxels();
    for (Index v = 0; v < V; ++v) {
      int    nz  = 0;
      double sum = 0.0;
      for (Index i = 0; i < 3; ++i) {
        double g = out.routing.values[i * V + v];
        if (g != 0.0) {
          ++nz;
          EXPECT_GT(g, 0.0);
          EXPECT_LE(g, 1.0);
        }
        sum += g;
      }
      EXPECT_EQ(nz, k);
      EXPECT_NEAR(sum, 1.0, 1e-10);
    }
  }
}

TEST_P(ShmoeDense, GradientPassesFiniteDifferences)
{
  Rng  rng(static_cast<std::uint64_t>(300 + GetParam()));
  int  k = 1 + GetParam() % 2;
  auto p = random_params(rng, 2, k);
  auto f = random_tensor({2, 2, 3, 2}, rng, 1.0, true);
  // Labels fixed from one forward pass; they stay constant under perturbation.
  auto         first = shmoe_forward(f, p);
  ErrorSignal  eps{random_tensor({1, 2, 3, 2}, rng)};
  ExpertLabels y     = build_rc_labels(eps, first.routing, 0.5);
  Tensor       w     = random_tensor({1, 2, 3, 2}, rng);

  std::vector<Tensor> params{f, p.router_kernel, p.router_bias};
  for (std::size_t i = 0; i < p.expert_kernels.size(); ++i) {
    params.push_back(p.expert_kernels[i]);
    params.push_back(p.expert_biases[i]);
  }
  double err = finite_diff_check(
    [&] {
      auto out = shmoe_forward(f, p);
      return add(mean(mul(out.delta, w)), rc_loss(out.probs, y));
    },
    params);
  EXPECT_LT(err, 1e-4);
}

INSTANTIATE_TEST_SUITE_P(Seeds, ShmoeDense, ::testing::Range(0, 20));

TEST(ShmoeParams, ValidatesConfiguration)
{
  Rng rng(3);
  EXPECT_THROW(ShmoeParams::create(rng, 2, {1, 3, 5}, 0), ArgumentError);
  EXPECT_THROW(ShmoeParams::create(rng, 2, {1, 3, 5}, 4), ArgumentError);
  EXPECT_THROW(ShmoeParams::create(rng, 2, {1, 2}), ArgumentError);
  auto p = ShmoeParams::create(rng, 2);
  EXPECT_EQ(p.experts(), 3);
  EXPECT_EQ(p.router_kernel.dim(0), 3);
  EXPECT_EQ(p.named("x").size(), 8u);
}

TEST(RcLabels, WorkedExamples)
{
  // Voxel 0 correct (small error), voxel 1 incorrect; expert 0 selected at both.
  ErrorSignal eps{Tensor({1, 1, 1, 2}, std::vector<double>{0.1, 5.0})};
  auto        y = build_rc_labels(eps, routing_from({{0}, {0}}, 3), 0.5);
  EXPECT_EQ(y.values[0], 1.0);
  EXPECT_EQ(y.values[2], 0.0);
  EXPECT_EQ(y.values[4], 0.0);
  EXPECT_EQ(y.values[1], 0.0);
  EXPECT_EQ(y.values[3], 0.5);
  EXPECT_EQ(y.values[5], 0.5);
}

TEST(RcLabels, ConstantErrorMarksEverythingCorrect)
{
  ErrorSignal eps{Tensor({1, 1, 1, 4}, 0.3)};
  auto        y = build_rc_labels(eps, routing_from({{0}, {1}, {2}, {1}}, 3), 0.5);
  std::vector<double> expect{1, 0, 0, 0, 0, 1, 0, 1, 0, 0, 1, 0};
  for (Index i = 0; i < 12; ++i) { EXPECT_EQ(y.values[i], expect[static_cast<std::size_t>(i)]); }
}

TEST(RcLabels, RejectsQuantileOutsideOpenInterval)
{
  ErrorSignal eps{Tensor({1, 1, 1, 1}, 0.0)};
  for (double q : {0.0, 1.0, -0.1, 1.5}) { EXPECT_THROW(build_rc_labels(eps, routing_from({{0}}, 3), q), ArgumentError); }
}

TEST(RcLabels, MatchesRuleInterpreterExhaustively)
{
  // Every selection pattern for three voxels, several (N, k) and quantiles.
  Rng rng(4);
  for (auto [N, k] : std::vector<std::pair<int, int>>{{3, 1}, {3, 2}, {4, 1}, {4, 2}, {5, 3}}) {
    std::vector<std::vector<int>> subsets;
    for (int mask = 0; mask < (1 << N); ++mask) {
      if (__builtin_popcount(unsigned(mask)) != k) continue;
      std::vector<int> s;
      for (int i = 0; i < N; ++i)
        if (mask >> i & 1) s.push_back(i);
      subsets.push_back(s);
    }
    for (auto &a : subsets)
      for (auto &b : subsets)
        for (auto &c : subsets)
          for (double q : {0.25, 0.5, 0.75}) {
            std::vector<double> e{rng.normal(), rng.normal(), rng.normal()};
            auto                y   = build_rc_labels(ErrorSignal{Tensor({1, 1, 1, 3}, e)}, routing_from({a, b, c}, N), q);
            auto                ref = label_oracle(e, {a, b, c}, N, q);
            for (std::size_t i = 0; i < ref.size(); ++i) { ASSERT_EQ(y.values[static_cast<Index>(i)], ref[i]); }
          }
  }
}

TEST(RcLabels, EntriesLieOnTheLabelLattice)
{
  Rng  rng(5);
  auto p   = random_params(rng, 2, 2);
  auto out = shmoe_forward(random_tensor({2, 3, 3, 3}, rng), p);
  auto y   = build_rc_labels(ErrorSignal{random_tensor({1, 3, 3, 3}, rng)}, out.routing, 0.5);
  Index V  = 27;
  for (Index v = 0; v < V; ++v) {
    int ones = 0;
    for (Index i = 0; i < 3; ++i) {
      double l = y.values[i * V + v];
      EXPECT_TRUE(l == 0.0 || l == 1.0);
      ones += l == 1.0;
    }
    EXPECT_TRUE(ones == 2 || ones == 1);
  }
}

TEST(RcLoss, ClosedForms)
{
  ExpertLabels y{Tensor({2, 1, 1, 1}, std::vector<double>{1.0, 0.0})};
  EXPECT_NEAR(rc_loss(Tensor({2, 1, 1, 1}, std::vector<double>{0.8, 0.2}), y).item(), -std::log(0.8), 1e-15);
  EXPECT_NEAR(rc_loss(Tensor({2, 1, 1, 1}, std::vector<double>{0.8, 0.2}), y).item(), 0.2231, 1e-4);

  Rng                 rng(6);
  std::vector<double> labels(24);
  for (auto &l : labels) l = rng.uniform();
  EXPECT_NEAR(rc_loss(Tensor({3, 2, 2, 2}, 0.5), ExpertLabels{Tensor({3, 2, 2, 2}, labels)}).item(), std::log(2.0),
              1e-15);

  auto perfect = rc_loss(Tensor({2, 1, 1, 1}, std::vector<double>{1.0, 0.0}), y).item();
  EXPECT_LT(perfect, 1e-6);
  EXPECT_LT(rc_loss(Tensor({2, 1, 1, 1}, std::vector<double>{1.0, 0.0}), y, 1e-12).item(), perfect);
  EXPECT_THROW(rc_loss(Tensor({3, 1, 1, 1}, 0.5), y), DimensionError);
}

TEST(RcLoss, GradientPassesFiniteDifferences)
{
  for (int seed = 0; seed < 20; ++seed) {
    Rng                 rng(static_cast<std::uint64_t>(seed));
    std::vector<double> p(12), l(12);
    for (auto &x : p) x = rng.uniform(0.05, 0.95);
    for (auto &x : l) x = rng.uniform();
    ExpertLabels y{Tensor({3, 1, 2, 2}, l)};
    EXPECT_LT(finite_diff_check([&](const Tensor &t) { return rc_loss(t, y); }, Tensor({3, 1, 2, 2}, p)), 1e-4);
  }
}

TEST(ExpertLoad, ConservationAndDegenerateRouting)
{
  auto load = expert_load(routing_from({{0}, {0}, {0}, {0}}, 3));
  EXPECT_EQ(load, (std::vector<double>{100.0, 0.0, 0.0}));
  auto two = expert_load(routing_from({{0, 1}, {1, 2}, {0, 2}}, 3));
  EXPECT_NEAR(std::accumulate(two.begin(), two.end(), 0.0), 200.0, 1e-9);
}

TEST(ExpertLoad, UniformLogitsGiveBalancedLoads)
{
  // Random logits, many voxels: each expert wins about 100 k / N percent.
  Rng rng(7);
  // Independent logits per expert: three feature channels.
  auto p = ShmoeParams::create(rng, 3, {1, 3, 5}, 1, 1);
  std::fill(p.router_kernel.data().begin(), p.router_kernel.data().end(), 0.0);
  for (int i = 0; i < 3; ++i) p.router_kernel.data()[i * 3 + i] = 1.0;
  auto f     = random_tensor({3, 16, 16, 16}, rng);
  auto out   = shmoe_forward(f, p);
  auto loads = expert_load(out.routing);
  for (double l : loads) { EXPECT_NEAR(l, 100.0 / 3.0, 3.0); }
  EXPECT_NEAR(std::accumulate(loads.begin(), loads.end(), 0.0), 100.0, 1e-9);
}

TEST(ExpertIdMap, ArgmaxPerVoxel)
{
  auto map = expert_id_map(routing_from({{2}, {0}, {1}}, 3));
  EXPECT_EQ(map.labels, (std::vector<std::uint16_t>{2, 0, 1}));
}
