// Attention operators: generic scaled dot-product, the row/column variants,
// pixel-to-Bbox and query-to-Bbox detection attention, and multi-head
// attention for the traditional transformer blocks.
#pragma once

#include "laneformer/tensor.hpp"

namespace laneformer {

/// `values` are the mixed value rows; `weights` is the attention matrix
/// (queries x keys, each row nonnegative and summing to 1), retained so the
/// dump-attention path can export it.
struct AttentionOutput {
  Tensor values;
  Tensor weights;
};

/// softmax(Q K^T / sqrt(d')) V with the weights kept.
AttentionOutput scaled_dot_attention(const Tensor& q, const Tensor& k,
                                     const Tensor& v);

/// Detection attention with feature pixels as queries: keys are box
/// embeddings Z_b, values are ROI embeddings Z_r (both M x d').
AttentionOutput pixel_to_bbox(const Tensor& hf_prime, const Tensor& z_b,
                              const Tensor& z_r);

/// Same key/value structure with the learned decoder queries as queries.
AttentionOutput query_to_bbox(const Tensor& queries, const Tensor& z_b,
                              const Tensor& z_r);

/// Row attention: each feature-map row (flattened to w*d) is one token.
/// The reduction W (w*d x d') + b maps tokens to H_r'; sinusoidal row
/// positions are added to queries and keys only. `use_positions=false` is a
/// test-only switch for the permutation-equivariance property.
AttentionOutput row_attention(const Tensor& h_r, const Tensor& w_reduce,
                              const Tensor& b_reduce, bool use_positions = true);

/// Mirror of row_attention over column tokens (h*d each).
AttentionOutput column_attention(const Tensor& h_c, const Tensor& w_reduce,
                                 const Tensor& b_reduce, bool use_positions = true);

/// Projection weights for one multi-head attention block; all of wq/wk/wv/wo
/// are d x d with d-sized biases.
struct MhaWeights {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

/// Standard multi-head attention. Positional codes enter by adding them to
/// the query/key inputs before the call (never to the value input). The
/// retained weight matrix is the mean over heads, so its rows still sum to 1.
AttentionOutput multi_head_attention(const Tensor& q_in, const Tensor& k_in,
                                     const Tensor& v_in, const MhaWeights& w,
                                     Index heads);

/// count x d matrix whose row i is sinusoidal_embedding(i, d).
Tensor row_position_embeddings(Index count, Index d);

/// (h*w) x d matrix of 2-D codes for a row-major pixel grid.
Tensor grid_position_embeddings(Index h, Index w, Index d);

}  // namespace laneformer
