#include "laneformer/attention.hpp"

#include "laneformer/error.hpp"
#include "laneformer/ops.hpp"

#include <cmath>
#include <vector>

namespace laneformer {

AttentionOutput scaled_dot_attention(const Tensor& q, const Tensor& k,
                                     const Tensor& v) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
    throw ShapeError("scaled_dot_attention: rank-2 inputs required");
  }
  if (q.dim(1) != k.dim(1)) {
    throw ShapeError("scaled_dot_attention: query dim " +
                     shape_to_string(q.shape()) + " vs key dim " +
                     shape_to_string(k.shape()));
  }
  if (k.dim(0) != v.dim(0)) {
    throw ShapeError("scaled_dot_attention: key rows " +
                     shape_to_string(k.shape()) + " vs value rows " +
                     shape_to_string(v.shape()));
  }
  double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(q.dim(1)));
  Tensor weights = softmax(scale(matmul_nt(q, k), inv_sqrt_d), 1);
  return {matmul(weights, v), weights};
}

AttentionOutput pixel_to_bbox(const Tensor& hf_prime, const Tensor& z_b,
                              const Tensor& z_r) {
  if (z_b.shape() != z_r.shape()) {
    throw ShapeError("pixel_to_bbox: Z_b " + shape_to_string(z_b.shape()) +
                     " and Z_r " + shape_to_string(z_r.shape()) +
                     " must share the M x d' shape");
  }
  return scaled_dot_attention(hf_prime, z_b, z_r);
}

AttentionOutput query_to_bbox(const Tensor& queries, const Tensor& z_b,
                              const Tensor& z_r) {
  if (z_b.shape() != z_r.shape()) {
    throw ShapeError("query_to_bbox: Z_b " + shape_to_string(z_b.shape()) +
                     " and Z_r " + shape_to_string(z_r.shape()) +
                     " must share the M x d' shape");
  }
  return scaled_dot_attention(queries, z_b, z_r);
}

namespace {

AttentionOutput axis_attention(const Tensor& tokens, const Tensor& w_reduce,
                               const Tensor& b_reduce, bool use_positions,
                               const char* what) {
  if (tokens.rank() != 2) {
    throw ShapeError(std::string(what) + ": rank-2 token matrix required");
  }
  Tensor reduced = linear(tokens, w_reduce, b_reduce);  // tokens x d'
  if (!use_positions) {
    return scaled_dot_attention(reduced, reduced, reduced);
  }
  Tensor pos = row_position_embeddings(reduced.dim(0), reduced.dim(1));
  Tensor qk = add(reduced, pos);  // positions feed queries and keys, not values
  return scaled_dot_attention(qk, qk, reduced);
}

}  // namespace

AttentionOutput row_attention(const Tensor& h_r, const Tensor& w_reduce,
                              const Tensor& b_reduce, bool use_positions) {
  return axis_attention(h_r, w_reduce, b_reduce, use_positions, "row_attention");
}

AttentionOutput column_attention(const Tensor& h_c, const Tensor& w_reduce,
                                 const Tensor& b_reduce, bool use_positions) {
  return axis_attention(h_c, w_reduce, b_reduce, use_positions,
                        "column_attention");
}

AttentionOutput multi_head_attention(const Tensor& q_in, const Tensor& k_in,
                                     const Tensor& v_in, const MhaWeights& w,
                                     Index heads) {
  Index d = w.wq.dim(1);
  if (heads < 1 || d % heads != 0) {
    throw ShapeError("multi_head_attention: " + std::to_string(heads) +
                     " heads do not divide model dim " + std::to_string(d));
  }
  Tensor q = linear(q_in, w.wq, w.bq);
  Tensor k = linear(k_in, w.wk, w.bk);
  Tensor v = linear(v_in, w.wv, w.bv);

  if (heads == 1) {
    AttentionOutput att = scaled_dot_attention(q, k, v);
    return {linear(att.values, w.wo, w.bo), att.weights};
  }

  Index dh = d / heads;
  std::vector<Tensor> head_values_t;  // transposed per-head outputs
  Tensor weight_sum;
  head_values_t.reserve(static_cast<std::size_t>(heads));
  for (Index h = 0; h < heads; ++h) {
    AttentionOutput att = scaled_dot_attention(slice_cols(q, h * dh, dh),
                                               slice_cols(k, h * dh, dh),
                                               slice_cols(v, h * dh, dh));
    head_values_t.push_back(transpose(att.values));
    weight_sum = h == 0 ? att.weights : add(weight_sum, att.weights);
  }
  Tensor merged = transpose(concat_rows(head_values_t));  // queries x d
  return {linear(merged, w.wo, w.bo),
          scale(weight_sum, 1.0 / static_cast<double>(heads))};
}

Tensor row_position_embeddings(Index count, Index d) {
  Tensor out = Tensor::zeros({count, d});
  for (Index i = 0; i < count; ++i) {
    Tensor e = sinusoidal_embedding(i, d);
    std::copy(e.values().begin(), e.values().end(),
              out.values_mut().begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return out;
}

Tensor grid_position_embeddings(Index h, Index w, Index d) {
  Tensor out = Tensor::zeros({h * w, d});
  for (Index r = 0; r < h; ++r) {
    for (Index c = 0; c < w; ++c) {
      Tensor e = sinusoidal_embedding_2d(r, c, d);
      std::copy(e.values().begin(), e.values().end(),
                out.values_mut().begin() +
                    static_cast<std::ptrdiff_t>((r * w + c) * d));
    }
  }
  return out;
}

}  // namespace laneformer
