#include "hetreg/moa.hpp"

#include "init.hpp"
#include "hetreg/errors.hpp"
#include "hetreg/ops.hpp"

#include <Eigen/Core>

#include <cmath>
#include <memory>

namespace hetreg {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMatrix = Eigen::Map<RowMatrix>;
using MapConst  = Eigen::Map<const RowMatrix>;
using RowVector = Eigen::RowVectorXd;
using MapRow    = Eigen::Map<const RowVector>;
using MapRowMut = Eigen::Map<RowVector>;

using detail::random_normal;

int selected_count(const MoAParams &p) { return p.kind == AttentionKind::Mixture ? p.topk : p.experts; }
Index kv_count(const MoAParams &p) { return p.kind == AttentionKind::Mixture ? 1 : p.experts; }

void validate(const MoAParams &p)
{
  if (p.experts < 1 || p.topk < 1 || p.topk > p.experts) {
    throw ArgumentError("moa: need 1 <= k <= N, got k=" + std::to_string(p.topk) + " N=" + std::to_string(p.experts));
  }
  Index dm = p.model_dim(), dh = p.head_dim(), N = p.experts;
  Shape kv = p.kind == AttentionKind::Mixture ? Shape{dm, dh} : Shape{N, dm, dh};
  if (p.query.shape() != Shape{N, dm, dh} || p.key.shape() != kv || p.value.shape() != kv ||
      p.output.shape() != Shape{N, dh, dm} || p.gate.shape() != Shape{dm, N}) {
    throw DimensionError("moa: inconsistent parameter shapes");
  }
}

// Routing of a single token row; `probs` receives the full softmax.
void route_row(const double *q, const MoAParams &p, int *idx, double *w, double *probs)
{
  int N = p.experts;
  if (p.kind == AttentionKind::MultiHead) {
    for (int i = 0; i < N; ++i) {
      idx[i]   = i;
      w[i]     = 1.0;
      probs[i] = 1.0;
    }
    return;
  }
  RowVector logits = MapRow(q, p.model_dim()) * MapConst(p.gate.data().data(), p.model_dim(), N);
  double    mx     = logits.maxCoeff();
  double    s      = 0.0;
  for (int i = 0; i < N; ++i) {
    probs[i] = std::exp(logits[i] - mx);
    s += probs[i];
  }
  for (int i = 0; i < N; ++i) { probs[i] /= s; }
  auto   sel   = topk(std::span<const double>(probs, static_cast<std::size_t>(N)), p.topk);
  double total = 0.0;
  for (double v : sel.values) { total += v; }
  for (int j = 0; j < p.topk; ++j) {
    idx[j] = sel.indices[static_cast<std::size_t>(j)];
    w[j]   = sel.values[static_cast<std::size_t>(j)] / total;
  }
}

// Everything the backward pass needs from the forward pass.
struct MoACache
{
  Index B, Tq, Tw, dm, dh, N, k, nkv;
  std::vector<double> kp, vp;     // [B][nkv][Tw x dh]
  std::vector<int>    idx;        // [B*Tq][k]
  std::vector<double> weight;     // [B*Tq][k]
  std::vector<double> probs;      // [B*Tq][N]
  std::vector<double> qh, attn, head, expert_out; // per (row, slot): dh, Tw, dh, dm

  double *kp_at(Index b, Index e) { return kp.data() + (b * nkv + e) * Tw * dh; }
  double *vp_at(Index b, Index e) { return vp.data() + (b * nkv + e) * Tw * dh; }
};

} // namespace

MoAParams MoAParams::mixture(Rng &rng, Index model_dim, Index head_dim, int experts, int topk)
{
  MoAParams p;
  p.experts   = experts;
  p.topk      = topk;
  p.kind      = AttentionKind::Mixture;
  double in_s = 1.0 / std::sqrt(static_cast<double>(model_dim));
  double hd_s = 1.0 / std::sqrt(static_cast<double>(head_dim));
  p.query     = random_normal(rng, {experts, model_dim, head_dim}, in_s);
  p.key       = random_normal(rng, {model_dim, head_dim}, in_s);
  p.value     = random_normal(rng, {model_dim, head_dim}, in_s);
  p.output    = random_normal(rng, {experts, head_dim, model_dim}, hd_s);
  p.gate      = random_normal(rng, {model_dim, experts}, in_s);
  validate(p);
  return p;
}

MoAParams MoAParams::multi_head(Rng &rng, Index model_dim, Index head_dim, int heads)
{
  MoAParams p;
  p.experts   = heads;
  p.topk      = heads;
  p.kind      = AttentionKind::MultiHead;
  double in_s = 1.0 / std::sqrt(static_cast<double>(model_dim));
  double hd_s = 1.0 / std::sqrt(static_cast<double>(head_dim * heads));
  p.query     = random_normal(rng, {heads, model_dim, head_dim}, in_s);
  p.key       = random_normal(rng, {heads, model_dim, head_dim}, in_s);
  p.value     = random_normal(rng, {heads, model_dim, head_dim}, in_s);
  p.output    = random_normal(rng, {heads, head_dim, model_dim}, hd_s);
  p.gate      = Tensor({model_dim, heads}, 0.0);
  validate(p);
  return p;
}

std::vector<std::pair<std::string, Tensor>> MoAParams::named(const std::string &prefix) const
{
  std::vector<std::pair<std::string, Tensor>> out{
    {prefix + ".query", query}, {prefix + ".key", key}, {prefix + ".value", value}, {prefix + ".output", output}};
  if (kind == AttentionKind::Mixture) { out.emplace_back(prefix + ".gate", gate); }
  return out;
}

TokenRouting route_tokens(const Tensor &queries, const MoAParams &params)
{
  validate(params);
  if (queries.ndim() != 2 || queries.dim(1) != params.model_dim()) {
    throw DimensionError("route_tokens: queries " + shape_string(queries.shape()) + " vs model dim " +
                         std::to_string(params.model_dim()));
  }
  int          k = selected_count(params);
  TokenRouting r;
  r.topk = k;
  r.indices.resize(static_cast<std::size_t>(queries.dim(0) * k));
  r.weights.resize(r.indices.size());
  std::vector<double> probs(static_cast<std::size_t>(params.experts));
  for (Index t = 0; t < queries.dim(0); ++t) {
    route_row(queries.data().data() + t * params.model_dim(), params, r.indices.data() + t * k,
              r.weights.data() + t * k, probs.data());
  }
  return r;
}

Tensor expert_attention(const Tensor &query_token, const Tensor &keys, const Tensor &values, int expert,
                        const MoAParams &params)
{
  validate(params);
  Index dm = params.model_dim(), dh = params.head_dim(), T = keys.dim(0);
  if (expert < 0 || expert >= params.experts) { throw ArgumentError("expert_attention: invalid expert id"); }
  if (query_token.size() != dm || keys.shape() != Shape{T, dm} || values.shape() != Shape{T, dm}) {
    throw DimensionError("expert_attention: token/key/value shapes disagree with model dim");
  }
  Index kv = params.kind == AttentionKind::Mixture ? 0 : expert;
  RowVector q  = MapRow(query_token.data().data(), dm) * MapConst(params.query.data().data() + expert * dm * dh, dm, dh);
  RowMatrix kp = MapConst(keys.data().data(), T, dm) * MapConst(params.key.data().data() + kv * dm * dh, dm, dh);
  RowMatrix vp = MapConst(values.data().data(), T, dm) * MapConst(params.value.data().data() + kv * dm * dh, dm, dh);
  Eigen::VectorXd scores = kp * q.transpose() / std::sqrt(static_cast<double>(dh));
  scores                 = (scores.array() - scores.maxCoeff()).exp();
  scores /= scores.sum();
  RowVector out = (scores.transpose() * vp) * MapConst(params.output.data().data() + expert * dh * dm, dh, dm);
  return Tensor({dm}, std::vector<double>(out.data(), out.data() + dm));
}

MoAOutput moa_forward(const Tensor &queries, const Tensor &keys, const Tensor &values, const MoAParams &params)
{
  if (keys.ndim() != 2) { throw DimensionError("moa_forward: keys must be [T x d_m]"); }
  return moa_forward_windows(queries, keys, values, params, keys.dim(0));
}

MoAOutput moa_forward_windows(const Tensor &queries, const Tensor &keys, const Tensor &values,
                              const MoAParams &params, Index window_tokens)
{
  validate(params);
  Index dm = params.model_dim(), dh = params.head_dim();
  if (queries.ndim() != 2 || keys.ndim() != 2 || values.ndim() != 2 || queries.dim(1) != dm || keys.dim(1) != dm ||
      values.dim(1) != dm || keys.dim(0) != values.dim(0)) {
    throw DimensionError("moa_forward: Q " + shape_string(queries.shape()) + ", K " + shape_string(keys.shape()) +
                         ", V " + shape_string(values.shape()) + " incompatible with d_m=" + std::to_string(dm));
  }
  if (window_tokens < 1 || keys.dim(0) % window_tokens) {
    throw DimensionError("moa_forward: " + std::to_string(keys.dim(0)) + " key tokens not divisible into windows of " +
                         std::to_string(window_tokens));
  }
  Index B = keys.dim(0) / window_tokens;
  if (queries.dim(0) % B) { throw DimensionError("moa_forward: query tokens not divisible across windows"); }

  auto  c = std::make_shared<MoACache>();
  c->B = B, c->Tq = queries.dim(0) / B, c->Tw = window_tokens, c->dm = dm, c->dh = dh;
  c->N = params.experts, c->k = selected_count(params), c->nkv = kv_count(params);
  Index rows = B * c->Tq, k = c->k, Tw = c->Tw, N = c->N;
  c->kp.resize(static_cast<std::size_t>(B * c->nkv * Tw * dh));
  c->vp.resize(c->kp.size());
  c->idx.resize(static_cast<std::size_t>(rows * k));
  c->weight.resize(c->idx.size());
  c->probs.resize(static_cast<std::size_t>(rows * N));
  c->qh.resize(static_cast<std::size_t>(rows * k * dh));
  c->attn.resize(static_cast<std::size_t>(rows * k * Tw));
  c->head.resize(static_cast<std::size_t>(rows * k * dh));
  c->expert_out.resize(static_cast<std::size_t>(rows * k * dm));

  const double        inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const double       *Q = queries.data().data(), *K = keys.data().data(), *V = values.data().data();
  const double       *Wq = params.query.data().data(), *Wk = params.key.data().data();
  const double       *Wv = params.value.data().data(), *Wo = params.output.data().data();
  std::vector<double> out(static_cast<std::size_t>(rows * dm), 0.0);

  for (Index b = 0; b < B; ++b) {
    for (Index e = 0; e < c->nkv; ++e) {
      MapMatrix(c->kp_at(b, e), Tw, dh).noalias() = MapConst(K + b * Tw * dm, Tw, dm) * MapConst(Wk + e * dm * dh, dm, dh);
      MapMatrix(c->vp_at(b, e), Tw, dh).noalias() = MapConst(V + b * Tw * dm, Tw, dm) * MapConst(Wv + e * dm * dh, dm, dh);
    }
    for (Index t = 0; t < c->Tq; ++t) {
      Index r = b * c->Tq + t;
      route_row(Q + r * dm, params, c->idx.data() + r * k, c->weight.data() + r * k, c->probs.data() + r * N);
      MapRowMut y(out.data() + r * dm, dm);
      for (Index j = 0; j < k; ++j) {
        Index    i = c->idx[static_cast<std::size_t>(r * k + j)];
        Index    e = c->nkv == 1 ? 0 : i;
        Index    slot = r * k + j;
        MapRowMut qi(c->qh.data() + slot * dh, dh);
        MapRowMut a(c->attn.data() + slot * Tw, Tw);
        MapRowMut h(c->head.data() + slot * dh, dh);
        MapRowMut ex(c->expert_out.data() + slot * dm, dm);
        qi.noalias() = MapRow(Q + r * dm, dm) * MapConst(Wq + i * dm * dh, dm, dh);
        a.noalias()  = (MapConst(c->kp_at(b, e), Tw, dh) * qi.transpose()).transpose() * inv_sqrt;
        a            = (a.array() - a.maxCoeff()).exp();
        a /= a.sum();
        h.noalias()  = a * MapConst(c->vp_at(b, e), Tw, dh);
        ex.noalias() = h * MapConst(Wo + i * dh * dm, dh, dm);
        y += c->weight[static_cast<std::size_t>(slot)] * ex;
      }
    }
  }

  TokenRouting routing;
  routing.topk    = static_cast<int>(k);
  routing.indices = c->idx;
  routing.weights = c->weight;

  const bool mixture = params.kind == AttentionKind::Mixture;
  auto result = make_result(
    {rows, dm}, std::move(out),
    {queries, keys, values, params.query, params.key, params.value, params.output, params.gate},
    [c, inv_sqrt, mixture](detail::Node &self) {
      Index B = c->B, Tq = c->Tq, Tw = c->Tw, dm = c->dm, dh = c->dh, N = c->N, k = c->k, nkv = c->nkv;
      const double *Q = self.parents[0]->value.data(), *K = self.parents[1]->value.data();
      const double *V = self.parents[2]->value.data(), *Wq = self.parents[3]->value.data();
      const double *Wk = self.parents[4]->value.data(), *Wv = self.parents[5]->value.data();
      const double *Wo = self.parents[6]->value.data(), *Wg = self.parents[7]->value.data();
      const double *G = self.grad.data();

      std::vector<double> dQ(static_cast<std::size_t>(B * Tq * dm), 0.0), dK(static_cast<std::size_t>(B * Tw * dm), 0.0),
        dV(dK.size(), 0.0), dWq(self.parents[3]->value.size(), 0.0), dWk(self.parents[4]->value.size(), 0.0),
        dWv(self.parents[5]->value.size(), 0.0), dWo(self.parents[6]->value.size(), 0.0),
        dWg(self.parents[7]->value.size(), 0.0);
      std::vector<double> dKp(static_cast<std::size_t>(nkv * Tw * dh)), dVp(dKp.size());
      std::vector<double> dw(static_cast<std::size_t>(k));
      RowVector           de(dm), dhd(dh), da(Tw), ds(Tw), dq(dh), dp(N), dz(N);

      for (Index b = 0; b < B; ++b) {
        std::fill(dKp.begin(), dKp.end(), 0.0);
        std::fill(dVp.begin(), dVp.end(), 0.0);
        for (Index t = 0; t < Tq; ++t) {
          Index  r = b * Tq + t;
          MapRow gy(G + r * dm, dm);
          MapRow qrow(Q + r * dm, dm);
          MapRowMut dqrow(dQ.data() + r * dm, dm);
          for (Index j = 0; j < k; ++j) {
            Index  slot = r * k + j;
            Index  i    = c->idx[static_cast<std::size_t>(slot)];
            Index  e    = nkv == 1 ? 0 : i;
            double w    = c->weight[static_cast<std::size_t>(slot)];
            MapRow qi(c->qh.data() + slot * dh, dh);
            MapRow a(c->attn.data() + slot * Tw, Tw);
            MapRow h(c->head.data() + slot * dh, dh);
            MapRow ex(c->expert_out.data() + slot * dm, dm);
            MapConst kp(c->kp_at(b, e), Tw, dh);
            MapConst vp(c->vp_at(b, e), Tw, dh);

            dw[static_cast<std::size_t>(j)] = gy.dot(ex);
            de                               = w * gy;
            MapMatrix(dWo.data() + i * dh * dm, dh, dm).noalias() += h.transpose() * de;
            dhd.noalias() = de * MapConst(Wo + i * dh * dm, dh, dm).transpose();
            da.noalias()  = (vp * dhd.transpose()).transpose();
            MapMatrix(dVp.data() + e * Tw * dh, Tw, dh).noalias() += a.transpose() * dhd;
            ds = a.array() * (da.array() - a.dot(da));
            dq.noalias() = ds * kp * inv_sqrt;
            MapMatrix(dKp.data() + e * Tw * dh, Tw, dh).noalias() += ds.transpose() * qi * inv_sqrt;
            MapMatrix(dWq.data() + i * dm * dh, dm, dh).noalias() += qrow.transpose() * dq;
            dqrow.noalias() += dq * MapConst(Wq + i * dm * dh, dm, dh).transpose();
          }
          if (!mixture) { continue; }
          // Renormalized weights w_j = p_j / P over the selection; only the
          // selected probabilities carry gradient into the router.
          const double *p     = c->probs.data() + r * N;
          double        total = 0.0, wdw = 0.0;
          for (Index j = 0; j < k; ++j) {
            total += p[c->idx[static_cast<std::size_t>(r * k + j)]];
            wdw += c->weight[static_cast<std::size_t>(r * k + j)] * dw[static_cast<std::size_t>(j)];
          }
          dp.setZero();
          for (Index j = 0; j < k; ++j) {
            dp[c->idx[static_cast<std::size_t>(r * k + j)]] = (dw[static_cast<std::size_t>(j)] - wdw) / total;
          }
          double pdp = 0.0;
          for (Index n = 0; n < N; ++n) { pdp += p[n] * dp[n]; }
          for (Index n = 0; n < N; ++n) { dz[n] = p[n] * (dp[n] - pdp); }
          MapMatrix(dWg.data(), dm, N).noalias() += qrow.transpose() * dz;
          dqrow.noalias() += dz * MapConst(Wg, dm, N).transpose();
        }
        for (Index e = 0; e < nkv; ++e) {
          MapConst kb(K + b * Tw * dm, Tw, dm), vb(V + b * Tw * dm, Tw, dm);
          MapConst dkp(dKp.data() + e * Tw * dh, Tw, dh), dvp(dVp.data() + e * Tw * dh, Tw, dh);
          MapMatrix(dK.data() + b * Tw * dm, Tw, dm).noalias() += dkp * MapConst(Wk + e * dm * dh, dm, dh).transpose();
          MapMatrix(dV.data() + b * Tw * dm, Tw, dm).noalias() += dvp * MapConst(Wv + e * dm * dh, dm, dh).transpose();
          MapMatrix(dWk.data() + e * dm * dh, dm, dh).noalias() += kb.transpose() * dkp;
          MapMatrix(dWv.data() + e * dm * dh, dm, dh).noalias() += vb.transpose() * dvp;
        }
      }

      const std::vector<double> *local[] = {&dQ, &dK, &dV, &dWq, &dWk, &dWv, &dWo, &dWg};
      for (std::size_t p = 0; p < 8; ++p) {
        if (!self.parents[p]->requires_grad) { continue; }
        auto &g = self.parents[p]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) { g[i] += (*local[p])[i]; }
      }
    });
  return {std::move(result), std::move(routing)};
}

std::vector<double> expert_load(const TokenRouting &routing, int experts)
{
  std::vector<double> load(static_cast<std::size_t>(experts), 0.0);
  Index               tokens = routing.tokens();
  if (tokens == 0) { return load; }
  for (int id : routing.indices) { load.at(static_cast<std::size_t>(id)) += 1.0; }
  for (auto &l : load) { l *= 100.0 / static_cast<double>(tokens); }
  return load;
}

} // namespace hetreg
