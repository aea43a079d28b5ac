#include "hetreg/errors.hpp"
#include "hetreg/gradcheck.hpp"
#include "hetreg/moa.hpp"
#include "hetreg/ops.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

using namespace hetreg;
using namespace oracle;

namespace {

Tensor random_tensor(Shape shape, Rng &rng, double s = 1.0)
{
  std::vector<double> v(static_cast<std::size_t>(shape_size(shape)));
  for (auto &x : v) x = s * rng.normal();
  return Tensor(std::move(shape), std::move(v));
}

MoAParams fixed_scalar_params(int N, int k)
{
  MoAParams p;
  p.experts = N, p.topk = k;
  p.query   = Tensor({N, 1, 1}, 1.0, true);
  p.key     = Tensor({1, 1}, 1.0, true);
  p.value   = Tensor({1, 1}, 1.0, true);
  p.output  = Tensor({N, 1, 1}, 1.0, true);
  p.gate    = Tensor({1, N}, 0.0, true);
  return p;
}

std::vector<Tensor> param_list(const MoAParams &p)
{
  std::vector<Tensor> out;
  for (auto &[name, t] : p.named("moa")) out.push_back(t);
  return out;
}

} // namespace

TEST(RouteTokens, ZeroGateSelectsLowestIdsUniformly)
{
  Rng  rng(0);
  auto p = MoAParams::mixture(rng, 4, 2, 12, 4);
  std::fill(p.gate.data().begin(), p.gate.data().end(), 0.0);
  auto r = route_tokens(random_tensor({3, 4}, rng), p);
  for (Index t = 0; t < 3; ++t)
    for (int j = 0; j < 4; ++j) {
      EXPECT_EQ(r.indices[static_cast<std::size_t>(t * 4 + j)], j);
      EXPECT_NEAR(r.weights[static_cast<std::size_t>(t * 4 + j)], 0.25, 1e-15);
    }
}

TEST(RouteTokens, FullSelectionGivesSoftmax)
{
  Rng  rng(1);
  auto p = MoAParams::mixture(rng, 3, 2, 4, 4);
  auto q = random_tensor({1, 3}, rng);
  auto r = route_tokens(q, p);
  auto s = softmax(matmul(q, p.gate.detach()), 1);
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(r.weights[static_cast<std::size_t>(i)], s[i], 1e-15);
}

TEST(RouteTokens, ScalarExample)
{
  MoAParams p = fixed_scalar_params(3, 2);
  p.query     = Tensor({3, 2, 1}, 1.0);
  p.key = p.value = Tensor({2, 1}, 1.0);
  p.output        = Tensor({3, 1, 2}, 1.0);
  p.gate          = Tensor({2, 3}, {1, 0, -1, 0, 0, 0});
  auto r          = route_tokens(Tensor({1, 2}, {1, 0}), p);
  EXPECT_EQ(r.indices, (std::vector<int>{0, 1}));
  double e = std::exp(1.0);
  EXPECT_NEAR(r.weights[0], e / (e + 1), 1e-12);
  EXPECT_NEAR(r.weights[1], 1 / (e + 1), 1e-12);
  EXPECT_NEAR(r.weights[0], 0.7311, 1e-4);
}

TEST(ExpertAttention, SingleKeyIgnoresQuery)
{
  Rng  rng(2);
  auto p  = MoAParams::mixture(rng, 3, 2, 2, 1);
  auto k  = random_tensor({1, 3}, rng);
  auto v  = random_tensor({1, 3}, rng);
  auto a  = expert_attention(random_tensor({3}, rng), k, v, 1, p);
  auto b  = expert_attention(random_tensor({3}, rng), k, v, 1, p);
  auto vw = matmul(matmul(v, p.value.detach()), slice(p.output.detach(), 1, 2).reshape({2, 3}));
  for (int i = 0; i < 3; ++i) {
    EXPECT_NEAR(a[i], vw[i], 1e-14);
    EXPECT_NEAR(b[i], vw[i], 1e-14);
  }
  auto z = expert_attention(random_tensor({3}, rng), random_tensor({4, 3}, rng), Tensor({4, 3}, 0.0), 0, p);
  for (auto x : z.data()) EXPECT_EQ(x, 0.0);
}

TEST(ExpertAttention, ScalarExample)
{
  auto p   = fixed_scalar_params(1, 1);
  auto out = expert_attention(Tensor::from({1}), Tensor({2, 1}, {0, std::log(3.0)}), Tensor({2, 1}, {0, 4}), 0, p);
  EXPECT_NEAR(out[0], 3.0, 1e-12);
}

TEST(MoAForward, SingleExpertIsSingleHeadAttention)
{
  Rng  rng(3);
  auto p = MoAParams::mixture(rng, 4, 3, 1, 1);
  auto x = random_tensor({5, 4}, rng);
  auto y = moa_forward(x, x, x, p).output;
  for (Index t = 0; t < 5; ++t) {
    auto e = loop_expert(p, x, t, x, x, 0);
    for (Index m = 0; m < 4; ++m) EXPECT_NEAR(y[t * 4 + m], e[m], 1e-12);
  }
}

TEST(MoAForward, IdenticalExpertsEqualOneExpert)
{
  Rng  rng(4);
  auto p = MoAParams::mixture(rng, 4, 2, 6, 3);
  for (Index i = 1; i < 6; ++i) {
    std::copy_n(p.query.data().begin(), 8, p.query.data().begin() + i * 8);
    std::copy_n(p.output.data().begin(), 8, p.output.data().begin() + i * 8);
  }
  auto x = random_tensor({4, 4}, rng);
  auto y = moa_forward(x, x, x, p).output;
  for (Index t = 0; t < 4; ++t) {
    auto e = loop_expert(p, x, t, x, x, 0);
    for (Index m = 0; m < 4; ++m) EXPECT_NEAR(y[t * 4 + m], e[m], 1e-12);
  }
}

TEST(MoAForward, SparseEqualsDenseEnumeration)
{
  struct Case { Index T, dm, dh; int N, k; };
  for (auto cs : {Case{2, 2, 1, 2, 1}, Case{3, 4, 2, 12, 4}, Case{8, 4, 2, 5, 2}}) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng  rng(seed);
      auto p = MoAParams::mixture(rng, cs.dm, cs.dh, cs.N, cs.k);
      auto q = random_tensor({cs.T, cs.dm}, rng);
      auto k = random_tensor({cs.T, cs.dm}, rng);
      auto v = random_tensor({cs.T, cs.dm}, rng);
      auto y = moa_forward(q, k, v, p);
      auto d = dense_moa(p, q, k, v);
      for (std::size_t i = 0; i < d.size(); ++i) ASSERT_NEAR(y.output[static_cast<Index>(i)], d[i], 1e-12);
      for (Index t = 0; t < cs.T; ++t) {
        double s = 0.0;
        for (int j = 0; j < cs.k; ++j) s += y.routing.weights[static_cast<std::size_t>(t * cs.k + j)];
        EXPECT_NEAR(s, 1.0, 1e-10);
        std::vector<int> ids(y.routing.indices.begin() + t * cs.k, y.routing.indices.begin() + (t + 1) * cs.k);
        EXPECT_TRUE(std::adjacent_find(ids.begin(), ids.end(), std::greater_equal<>()) == ids.end());
      }
    }
  }
}

TEST(MoAForward, UniformRouterWithAllExpertsIsMultiHeadAverage)
{
  Rng  rng(5);
  int  N = 4;
  auto moa = MoAParams::mixture(rng, 6, 3, N, N);
  std::fill(moa.gate.data().begin(), moa.gate.data().end(), 0.0);
  MoAParams mha;
  mha.experts = mha.topk = N;
  mha.kind               = AttentionKind::MultiHead;
  mha.query              = moa.query;
  mha.output             = moa.output;
  mha.gate               = Tensor({6, N}, 0.0);
  std::vector<double> kk, vv;
  for (int i = 0; i < N; ++i) {
    kk.insert(kk.end(), moa.key.data().begin(), moa.key.data().end());
    vv.insert(vv.end(), moa.value.data().begin(), moa.value.data().end());
  }
  mha.key   = Tensor({N, 6, 3}, kk);
  mha.value = Tensor({N, 6, 3}, vv);
  auto x    = random_tensor({7, 6}, rng);
  auto a    = moa_forward(x, x, x, moa).output;
  auto b    = moa_forward(x, x, x, mha).output;
  for (Index i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i] / N, 1e-10);
}

TEST(MoAForward, ExpertPermutationEquivariance)
{
  Rng  rng(6);
  auto p = MoAParams::mixture(rng, 4, 2, 5, 2);
  auto x = random_tensor({6, 4}, rng);
  auto y = moa_forward(x, x, x, p).output;

  std::vector<int> perm{3, 0, 4, 1, 2};
  auto             q = p.query.detach(), o = p.output.detach(), g = p.gate.detach();
  MoAParams        pp = p;
  pp.query = q, pp.output = o, pp.gate = g;
  for (int i = 0; i < 5; ++i) {
    int src = perm[static_cast<std::size_t>(i)];
    std::copy_n(p.query.data().begin() + src * 8, 8, pp.query.data().begin() + i * 8);
    std::copy_n(p.output.data().begin() + src * 8, 8, pp.output.data().begin() + i * 8);
    for (int m = 0; m < 4; ++m) pp.gate.data()[static_cast<std::size_t>(m * 5 + i)] = p.gate[m * 5 + src];
  }
  auto z = moa_forward(x, x, x, pp).output;
  for (Index i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], z[i], 1e-12);
}

TEST(MoAForward, WindowsAreIndependent)
{
  Rng  rng(7);
  auto p = MoAParams::mixture(rng, 4, 2, 6, 2);
  auto x = random_tensor({8, 4}, rng);
  auto y = moa_forward_windows(x, x, x, p, 4).output;
  for (Index w = 0; w < 2; ++w) {
    auto part = slice(x, w * 4, w * 4 + 4);
    auto ref  = moa_forward(part, part, part, p).output;
    for (Index i = 0; i < 16; ++i) EXPECT_NEAR(y[w * 16 + i], ref[i], 1e-14);
  }
  EXPECT_THROW(moa_forward_windows(x, x, x, p, 3), DimensionError);
}

TEST(MoAForward, GradientsMatchFiniteDifferences)
{
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng  rng(seed);
    auto p  = MoAParams::mixture(rng, 4, 2, 6, 2);
    auto q  = random_tensor({5, 4}, rng);
    q.set_requires_grad(true);
    auto k = random_tensor({5, 4}, rng);
    k.set_requires_grad(true);
    auto v = random_tensor({5, 4}, rng);
    v.set_requires_grad(true);
    auto params = param_list(p);
    params.push_back(q);
    params.push_back(k);
    params.push_back(v);
    auto err = finite_diff_check([&] { return mean(moa_forward(q, k, v, p).output); }, params);
    EXPECT_LT(err, 1e-4) << "seed " << seed;
  }
}

TEST(MoAForward, TwoTokenToyGradient)
{
  Rng  rng(21);
  auto p = MoAParams::mixture(rng, 2, 1, 2, 1);
  auto x = random_tensor({2, 2}, rng);
  x.set_requires_grad(true);
  auto params = param_list(p);
  params.push_back(x);
  EXPECT_LT(finite_diff_check([&] { return mean(moa_forward(x, x, x, p).output); }, params), 1e-4);
}

TEST(MoAForward, MultiHeadGradients)
{
  Rng  rng(8);
  auto p = MoAParams::multi_head(rng, 4, 2, 3);
  auto x = random_tensor({4, 4}, rng);
  x.set_requires_grad(true);
  auto params = param_list(p);
  params.push_back(x);
  EXPECT_LT(finite_diff_check([&] { return mean(square(moa_forward(x, x, x, p).output)); }, params), 1e-4);
}

TEST(ExpertLoad, SumsToTopkTimesHundred)
{
  Rng  rng(9);
  auto p = MoAParams::mixture(rng, 4, 2, 12, 4);
  auto r = route_tokens(random_tensor({50, 4}, rng), p);
  auto l = expert_load(r, 12);
  EXPECT_NEAR(std::accumulate(l.begin(), l.end(), 0.0), 400.0, 1e-9);
}

TEST(MoAParams, RejectsInvalidTopk)
{
  Rng rng(0);
  EXPECT_THROW(MoAParams::mixture(rng, 4, 2, 3, 4), ArgumentError);
  EXPECT_THROW(MoAParams::mixture(rng, 4, 2, 3, 0), ArgumentError);
}
