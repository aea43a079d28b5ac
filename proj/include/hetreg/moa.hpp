#pragma once

#include "hetreg/rng.hpp"
#include "hetreg/tensor.hpp"

#include <string>
#include <utility>
#include <vector>

namespace hetreg {

enum class AttentionKind
{
  Mixture,   ///< routed attention heads with shared key/value projections
  MultiHead, ///< standard multi-head attention: every head, own key/value, summed
};

/*
 * Parameters of a mixture-of-attention-heads layer.
 *
 *   query  [N x d_m x d_h]  per-expert query projection
 *   key    [d_m x d_h]      shared key projection   ([N x d_m x d_h] for MultiHead)
 *   value  [d_m x d_h]      shared value projection ([N x d_m x d_h] for MultiHead)
 *   output [N x d_h x d_m]  per-expert output projection
 *   gate   [d_m x N]        routing matrix (Mixture only)
 */
struct MoAParams
{
  Tensor        query, key, value, output, gate;
  int           experts = 0;
  int           topk    = 0;
  AttentionKind kind    = AttentionKind::Mixture;

  Index model_dim() const { return query.dim(1); }
  Index head_dim() const { return query.dim(2); }

  static MoAParams mixture(Rng &rng, Index model_dim, Index head_dim, int experts, int topk);
  static MoAParams multi_head(Rng &rng, Index model_dim, Index head_dim, int heads);

  std::vector<std::pair<std::string, Tensor>> named(const std::string &prefix) const;
};

/// Per-token expert selection: `topk` ascending expert ids and their
/// renormalized weights, stored row-major [tokens x topk].
struct TokenRouting
{
  int                 topk = 0;
  std::vector<int>    indices;
  std::vector<double> weights;

  Index tokens() const { return topk ? static_cast<Index>(indices.size()) / topk : 0; }
};

/// Softmax of q_t . W^g, top-k, weights renormalized over the selection.
/// MultiHead parameters select every head with weight 1.
TokenRouting route_tokens(const Tensor &queries, const MoAParams &params);

/// Output of expert `expert` for one query token against keys/values [T x d_m].
/// Not differentiable; the layer itself is `moa_forward`.
Tensor expert_attention(const Tensor &query_token, const Tensor &keys, const Tensor &values, int expert,
                        const MoAParams &params);

struct MoAOutput
{
  Tensor       output; // [T x d_m]
  TokenRouting routing;
};

/// y_t = sum over selected experts of w_{i,t} E_i(q_t, K, V). Differentiable
/// in Q, K, V and every parameter; unselected experts receive no gradient.
MoAOutput moa_forward(const Tensor &queries, const Tensor &keys, const Tensor &values, const MoAParams &params);

/// Same layer applied independently to consecutive groups of
/// `window_tokens` rows (attention never crosses a group).
MoAOutput moa_forward_windows(const Tensor &queries, const Tensor &keys, const Tensor &values,
                              const MoAParams &params, Index window_tokens);

/// Percentage of tokens at which each expert is among the selected.
std::vector<double> expert_load(const TokenRouting &routing, int experts);

} // namespace hetreg
