#pragma once

#include <span>
#include <vector>

#include "laneformer/tensor.hpp"

namespace laneformer {

// Differentiable primitives over float64 tensors. Every function checks its
// input shapes (ShapeError names both sides), verifies the result is finite,
// and records its adjoint on the active GradTape when any input requires a
// gradient. All math runs through Eigen maps over the row-major buffers.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

/// x: T×d, bias: vector of length d, added to every row.
Tensor add_rowwise(const Tensor& x, const Tensor& bias);

Tensor matmul(const Tensor& a, const Tensor& b);
/// a · bᵀ without materializing the transpose.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor absolute(const Tensor& a);
/// log(max(x, floor)); the floor keeps classification losses finite.
Tensor log_clamped(const Tensor& a, double floor = 1e-12);

/// Softmax along `axis` of a rank-1 or rank-2 tensor. Output is positive and
/// sums to 1 along the reduced axis.
Tensor softmax(const Tensor& a, int axis);

/// Sum of all entries, as a {1} tensor.
Tensor sum_all(const Tensor& a);

/// y = x·W + b. x: T×in, W: in×out, b: out.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

/// Per-row normalization over the last axis of a rank-2 tensor.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

Tensor reshape(const Tensor& a, Shape shape);
/// (h, w, d) -> (w, h, d); used to build per-column feature tokens.
Tensor permute_hw(const Tensor& a);
/// out.row(i) = a.row(rows[i]); rows may repeat (broadcast).
Tensor gather_rows(const Tensor& a, std::vector<Index> rows);
Tensor slice_cols(const Tensor& a, Index start, Index count);
/// Vertical concatenation of rank-2 tensors with equal column counts.
Tensor concat_rows(std::span<const Tensor> parts);

/// x: (h, w, c_in); w: (kh, kw, c_in, c_out); b: c_out.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, Index stride,
              Index pad);

/// Axis-aligned box in image pixels.
struct BoxPx {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

/// Bilinear crop of `f` (h×w×d) over `box` scaled by `spatial_scale`
/// (image px -> feature px). One sample per output cell, at the cell
/// center; borders clamp. Differentiable w.r.t. `f`.
Tensor roi_align(const Tensor& f, const BoxPx& box, Index out_size,
                 double spatial_scale);

/// Interleaved sin/cos transformer position code of length d_model (even).
Tensor sinusoidal_embedding(Index position, Index d_model);
/// Row code in the first half, column code in the second; d_model % 4 == 0.
Tensor sinusoidal_embedding_2d(Index row, Index col, Index d_model);

}  // namespace laneformer
