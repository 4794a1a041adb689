#include "laneformer/ops.hpp"

#include <Eigen/Core>

#include <cmath>
#include <utility>

namespace laneformer {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<const RowMat>;
using MutMatMap = Eigen::Map<RowMat>;
using ArrMap = Eigen::Map<const Eigen::ArrayXd>;
using MutArrMap = Eigen::Map<Eigen::ArrayXd>;

ArrMap arr(const Tensor& t) { return ArrMap(t.values().data(), t.size()); }
MutArrMap arr_mut(Tensor& t) { return MutArrMap(t.values_mut().data(), t.size()); }

MatMap mat(const Tensor& t) { return MatMap(t.values().data(), t.dim(0), t.dim(1)); }
MutMatMap mat_mut(Tensor& t) { return MutMatMap(t.values_mut().data(), t.dim(0), t.dim(1)); }

MutArrMap grad_arr(const Tensor& t) { return MutArrMap(t.ensure_grad().data(), t.size()); }
MutMatMap grad_mat(const Tensor& t) {
  return MutMatMap(t.ensure_grad().data(), t.dim(0), t.dim(1));
}

// Adjoint of `out` if any gradient reached it, else nothing to propagate.
bool has_out_grad(const Tensor& out) { return out.has_grad(); }
ArrMap out_grad_arr(const Tensor& out) {
  return ArrMap(out.grad().data(), out.size());
}
MatMap out_grad_mat(const Tensor& out) {
  return MatMap(out.grad().data(), out.dim(0), out.dim(1));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + shape_to_string(a.shape()) +
                     " and " + shape_to_string(b.shape()) + " differ");
  }
}

void require_rank(const Tensor& t, int rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                     ", got shape " + shape_to_string(t.shape()));
  }
}

bool tracked(const Tensor& t) { return t.requires_grad(); }

Tensor make_output(Shape shape, bool requires_grad) {
  return Tensor::zeros(std::move(shape), requires_grad);
}

// Eigen's vectorized reductions and matrix-vector kernels split scalar/SIMD
// work by the runtime alignment of the mapped buffers, so their summation
// order — and hence the last bits of the result — depends on where the heap
// happened to place a tensor. Everything that reduces over mapped memory
// therefore runs through these fixed-order loops. Full GEMM is exempt: it
// packs both operands into aligned scratch, making its order
// address-independent.
double fixed_dot(const double* a, Index stride_a, const double* b,
                 Index stride_b, Index n) {
  double acc = 0.0;
  for (Index i = 0; i < n; ++i) acc += a[i * stride_a] * b[i * stride_b];
  return acc;
}

// Column sums of a row-major (rows, cols) block, accumulated into dst.
void fixed_col_sums(const double* m, Index rows, Index cols, double* dst) {
  for (Index r = 0; r < rows; ++r) {
    const double* row = m + r * cols;
    for (Index c = 0; c < cols; ++c) dst[c] += row[c];
  }
}

// True when an Eigen product of these dimensions would dispatch to a
// vector kernel rather than packed GEMM.
bool vector_shaped(Index m, Index k, Index n) {
  return m == 1 || k == 1 || n == 1;
}

// C(m,n) ?= A(m,k) * B(k,n), row-major throughout.
void fixed_gemm_nn(const double* A, const double* B, double* C, Index m,
                   Index k, Index n, bool accumulate) {
  for (Index i = 0; i < m; ++i) {
    for (Index j = 0; j < n; ++j) {
      double v = fixed_dot(A + i * k, 1, B + j, n, k);
      C[i * n + j] = accumulate ? C[i * n + j] + v : v;
    }
  }
}

// C(m,n) ?= A(m,k) * B(n,k)^T.
void fixed_gemm_nt(const double* A, const double* B, double* C, Index m,
                   Index k, Index n, bool accumulate) {
  for (Index i = 0; i < m; ++i) {
    for (Index j = 0; j < n; ++j) {
      double v = fixed_dot(A + i * k, 1, B + j * k, 1, k);
      C[i * n + j] = accumulate ? C[i * n + j] + v : v;
    }
  }
}

// C(m,n) ?= A(k,m)^T * B(k,n).
void fixed_gemm_tn(const double* A, const double* B, double* C, Index m,
                   Index k, Index n, bool accumulate) {
  for (Index i = 0; i < m; ++i) {
    for (Index j = 0; j < n; ++j) {
      double v = fixed_dot(A + i, m, B + j, n, k);
      C[i * n + j] = accumulate ? C[i * n + j] + v : v;
    }
  }
}

void maybe_record(std::function<void()> adjoint) {
  if (GradTape* tape = GradTape::active()) {
    tape->record(std::move(adjoint));
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  bool rg = tracked(a) || tracked(b);
  Tensor out = make_output(a.shape(), rg);
  arr_mut(out) = arr(a) + arr(b);
  out.check_finite("add");
  if (rg) {
    maybe_record([a, b, out]() mutable {
      if (!has_out_grad(out)) return;
      if (a.requires_grad()) grad_arr(a) += out_grad_arr(out);
      if (b.requires_grad()) grad_arr(b) += out_grad_arr(out);
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  bool rg = tracked(a) || tracked(b);
  Tensor out = make_output(a.shape(), rg);
  arr_mut(out) = arr(a) - arr(b);
  out.check_finite("sub");
  if (rg) {
    maybe_record([a, b, out]() mutable {
      if (!has_out_grad(out)) return;
      if (a.requires_grad()) grad_arr(a) += out_grad_arr(out);
      if (b.requires_grad()) grad_arr(b) -= out_grad_arr(out);
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  bool rg = tracked(a) || tracked(b);
  Tensor out = make_output(a.shape(), rg);
  arr_mut(out) = arr(a) * arr(b);
  out.check_finite("mul");
  if (rg) {
    maybe_record([a, b, out]() mutable {
      if (!has_out_grad(out)) return;
      if (a.requires_grad()) grad_arr(a) += out_grad_arr(out) * arr(b);
      if (b.requires_grad()) grad_arr(b) += out_grad_arr(out) * arr(a);
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double factor) {
  bool rg = tracked(a);
  Tensor out = make_output(a.shape(), rg);
  arr_mut(out) = arr(a) * factor;
  out.check_finite("scale");
  if (rg) {
    maybe_record([a, out, factor]() mutable {
      if (!has_out_grad(out)) return;
      grad_arr(a) += out_grad_arr(out) * factor;
    });
  }
  return out;
}

Tensor add_rowwise(const Tensor& x, const Tensor& bias) {
  require_rank(x, 2, "add_rowwise");
  require_rank(bias, 1, "add_rowwise");
  if (x.dim(1) != bias.dim(0)) {
    throw ShapeError("add_rowwise: shapes " + shape_to_string(x.shape()) + " and " +
                     shape_to_string(bias.shape()) + " disagree on columns");
  }
  bool rg = tracked(x) || tracked(bias);
  Tensor out = make_output(x.shape(), rg);
  mat_mut(out) = mat(x).rowwise() +
                 Eigen::Map<const Eigen::RowVectorXd>(bias.values().data(), bias.dim(0));
  out.check_finite("add_rowwise");
  if (rg) {
    maybe_record([x, bias, out]() mutable {
      if (!has_out_grad(out)) return;
      if (x.requires_grad()) grad_mat(x) += out_grad_mat(out);
      if (bias.requires_grad()) {
        fixed_col_sums(out.grad().data(), out.dim(0), out.dim(1),
                       bias.ensure_grad().data());
      }
    });
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: shapes " + shape_to_string(a.shape()) + " and " +
                     shape_to_string(b.shape()) + " are not conformable");
  }
  bool rg = tracked(a) || tracked(b);
  Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = make_output({m, n}, rg);
  if (vector_shaped(m, k, n)) {
    fixed_gemm_nn(a.values().data(), b.values().data(), out.values_mut().data(),
                  m, k, n, false);
  } else {
    mat_mut(out).noalias() = mat(a) * mat(b);
  }
  out.check_finite("matmul");
  if (rg) {
    maybe_record([a, b, out, m, k, n]() mutable {
      if (!has_out_grad(out)) return;
      if (a.requires_grad()) {
        if (vector_shaped(m, n, k)) {
          fixed_gemm_nt(out.grad().data(), b.values().data(),
                        a.ensure_grad().data(), m, n, k, true);
        } else {
          grad_mat(a).noalias() += out_grad_mat(out) * mat(b).transpose();
        }
      }
      if (b.requires_grad()) {
        if (vector_shaped(k, m, n)) {
          fixed_gemm_tn(a.values().data(), out.grad().data(),
                        b.ensure_grad().data(), k, m, n, true);
        } else {
          grad_mat(b).noalias() += mat(a).transpose() * out_grad_mat(out);
        }
      }
    });
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  if (a.dim(1) != b.dim(1)) {
    throw ShapeError("matmul_nt: shapes " + shape_to_string(a.shape()) + " and " +
                     shape_to_string(b.shape()) + " disagree on the inner dimension");
  }
  bool rg = tracked(a) || tracked(b);
  Index m = a.dim(0), k = a.dim(1), n = b.dim(0);
  Tensor out = make_output({m, n}, rg);
  if (vector_shaped(m, k, n)) {
    fixed_gemm_nt(a.values().data(), b.values().data(), out.values_mut().data(),
                  m, k, n, false);
  } else {
    mat_mut(out).noalias() = mat(a) * mat(b).transpose();
  }
  out.check_finite("matmul_nt");
  if (rg) {
    maybe_record([a, b, out, m, k, n]() mutable {
      if (!has_out_grad(out)) return;
      if (a.requires_grad()) {
        if (vector_shaped(m, n, k)) {
          fixed_gemm_nn(out.grad().data(), b.values().data(),
                        a.ensure_grad().data(), m, n, k, true);
        } else {
          grad_mat(a).noalias() += out_grad_mat(out) * mat(b);
        }
      }
      if (b.requires_grad()) {
        if (vector_shaped(n, m, k)) {
          fixed_gemm_tn(out.grad().data(), a.values().data(),
                        b.ensure_grad().data(), n, m, k, true);
        } else {
          grad_mat(b).noalias() += out_grad_mat(out).transpose() * mat(a);
        }
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  bool rg = tracked(a);
  Tensor out = make_output({a.dim(1), a.dim(0)}, rg);
  mat_mut(out) = mat(a).transpose();
  if (rg) {
    maybe_record([a, out]() mutable {
      if (!has_out_grad(out)) return;
      grad_mat(a) += out_grad_mat(out).transpose();
    });
  }
  return out;
}

Tensor relu(const Tensor& a) {
  bool rg = tracked(a);
  Tensor out = make_output(a.shape(), rg);
  arr_mut(out) = arr(a).max(0.0);
  out.check_finite("relu");
  if (rg) {
    maybe_record([a, out]() mutable {
      if (!has_out_grad(out)) return;
      grad_arr(a) += out_grad_arr(out) * (arr(a) > 0.0).cast<double>();
    });
  }
  return out;
}

Tensor sigmoid(const Tensor& a) {
  bool rg = tracked(a);
  Tensor out = make_output(a.shape(), rg);
  arr_mut(out) = 1.0 / (1.0 + (-arr(a)).exp());
  out.check_finite("sigmoid");
  if (rg) {
    maybe_record([a, out]() mutable {
      if (!has_out_grad(out)) return;
      grad_arr(a) += out_grad_arr(out) * arr(out) * (1.0 - arr(out));
    });
  }
  return out;
}

Tensor absolute(const Tensor& a) {
  bool rg = tracked(a);
  Tensor out = make_output(a.shape(), rg);
  arr_mut(out) = arr(a).abs();
  out.check_finite("absolute");
  if (rg) {
    maybe_record([a, out]() mutable {
      if (!has_out_grad(out)) return;
      grad_arr(a) += out_grad_arr(out) * arr(a).sign();
    });
  }
  return out;
}

Tensor log_clamped(const Tensor& a, double floor) {
  bool rg = tracked(a);
  Tensor out = make_output(a.shape(), rg);
  arr_mut(out) = arr(a).max(floor).log();
  out.check_finite("log_clamped");
  if (rg) {
    maybe_record([a, out, floor]() mutable {
      if (!has_out_grad(out)) return;
      grad_arr(a) += out_grad_arr(out) * (arr(a) >= floor).cast<double>() / arr(a).max(floor);
    });
  }
  return out;
}

Tensor softmax(const Tensor& a, int axis) {
  if (a.rank() != 1 && a.rank() != 2) {
    throw ShapeError("softmax: expected rank 1 or 2, got " + shape_to_string(a.shape()));
  }
  if (axis < 0 || axis >= a.rank()) {
    throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                     shape_to_string(a.shape()));
  }
  bool rg = tracked(a);
  Tensor out = make_output(a.shape(), rg);

  // View rank-1 input as a single row; axis then selects rows vs columns.
  Index rows = a.rank() == 2 ? a.dim(0) : 1;
  Index cols = a.rank() == 2 ? a.dim(1) : a.dim(0);
  bool along_cols = (a.rank() == 1) || (axis == 1);
  MatMap in(a.values().data(), rows, cols);
  MutMatMap res(out.values_mut().data(), rows, cols);

  if (along_cols) {
    for (Index r = 0; r < rows; ++r) {
      Eigen::ArrayXd row = in.row(r).transpose().array();
      Eigen::ArrayXd e = (row - row.maxCoeff()).exp();
      res.row(r) = (e / e.sum()).matrix().transpose();
    }
  } else {
    for (Index c = 0; c < cols; ++c) {
      Eigen::ArrayXd col = in.col(c).array();
      Eigen::ArrayXd e = (col - col.maxCoeff()).exp();
      res.col(c) = (e / e.sum()).matrix();
    }
  }
  out.check_finite("softmax");
  if (rg) {
    maybe_record([a, out, rows, cols, along_cols]() mutable {
      if (!has_out_grad(out)) return;
      MatMap y(out.values().data(), rows, cols);
      MatMap gy(out.grad().data(), rows, cols);
      MutMatMap gx(a.ensure_grad().data(), rows, cols);
      // dx = y ⊙ (gy − <gy, y>) per softmax group.
      if (along_cols) {
        for (Index r = 0; r < rows; ++r) {
          double dot = fixed_dot(out.grad().data() + r * cols, 1,
                                 out.values().data() + r * cols, 1, cols);
          gx.row(r).array() += y.row(r).array() * (gy.row(r).array() - dot);
        }
      } else {
        for (Index c = 0; c < cols; ++c) {
          double dot = fixed_dot(out.grad().data() + c, cols,
                                 out.values().data() + c, cols, rows);
          gx.col(c).array() += y.col(c).array() * (gy.col(c).array() - dot);
        }
      }
    });
  }
  return out;
}

Tensor sum_all(const Tensor& a) {
  bool rg = tracked(a);
  Tensor out = make_output({1}, rg);
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  out.values_mut()[0] = acc;
  out.check_finite("sum_all");
  if (rg) {
    maybe_record([a, out]() mutable {
      if (!has_out_grad(out)) return;
      grad_arr(a) += out.grad()[0];
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_rowwise(matmul(x, w), b);
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_rank(x, 2, "layer_norm");
  require_rank(gamma, 1, "layer_norm");
  require_rank(beta, 1, "layer_norm");
  Index d = x.dim(1);
  if (gamma.dim(0) != d || beta.dim(0) != d) {
    throw ShapeError("layer_norm: feature size " + std::to_string(d) +
                     " vs gamma " + shape_to_string(gamma.shape()) + ", beta " +
                     shape_to_string(beta.shape()));
  }
  bool rg = tracked(x) || tracked(gamma) || tracked(beta);
  Tensor out = make_output(x.shape(), rg);
  // Cache per-row mean and inverse stddev for the adjoint.
  Tensor inv_sigma = Tensor::zeros({x.dim(0)});
  Tensor centered = Tensor::zeros(x.shape());

  MatMap xin = mat(x);
  MutMatMap y = mat_mut(out);
  MutMatMap cmap(centered.values_mut().data(), x.dim(0), d);
  ArrMap g(gamma.values().data(), d);
  ArrMap bvals(beta.values().data(), d);
  for (Index r = 0; r < x.dim(0); ++r) {
    Eigen::ArrayXd row = xin.row(r).transpose().array();
    double mean = row.mean();
    double var = (row - mean).square().mean();
    double inv = 1.0 / std::sqrt(var + eps);
    inv_sigma.values_mut()[static_cast<std::size_t>(r)] = inv;
    Eigen::ArrayXd xhat = (row - mean) * inv;
    cmap.row(r) = xhat.matrix().transpose();
    y.row(r) = (xhat * g + bvals).matrix().transpose();
  }
  out.check_finite("layer_norm");
  if (rg) {
    maybe_record([x, gamma, beta, out, inv_sigma, centered]() mutable {
      if (!has_out_grad(out)) return;
      Index rows = x.dim(0);
      Index d = x.dim(1);
      MatMap gy(out.grad().data(), rows, d);
      MatMap xhat(centered.values().data(), rows, d);
      ArrMap g(gamma.values().data(), d);
      for (Index r = 0; r < rows; ++r) {
        Eigen::ArrayXd gyr = gy.row(r).transpose().array();
        Eigen::ArrayXd xh = xhat.row(r).transpose().array();
        if (gamma.requires_grad()) {
          MutArrMap(gamma.ensure_grad().data(), d) += gyr * xh;
        }
        if (beta.requires_grad()) {
          MutArrMap(beta.ensure_grad().data(), d) += gyr;
        }
        if (x.requires_grad()) {
          Eigen::ArrayXd gxhat = gyr * g;
          double m1 = gxhat.mean();
          double m2 = (gxhat * xh).mean();
          double inv = inv_sigma.values()[static_cast<std::size_t>(r)];
          MutMatMap gx(x.ensure_grad().data(), rows, d);
          gx.row(r) += (((gxhat - m1 - xh * m2) * inv).matrix()).transpose();
        }
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_to_string(a.shape()) + " as " +
                     shape_to_string(shape));
  }
  bool rg = tracked(a);
  Tensor out = Tensor::from_values(std::move(shape),
                                   std::vector<double>(a.values().begin(), a.values().end()),
                                   rg);
  if (rg) {
    maybe_record([a, out]() mutable {
      if (!has_out_grad(out)) return;
      grad_arr(a) += out_grad_arr(out);
    });
  }
  return out;
}

Tensor permute_hw(const Tensor& a) {
  require_rank(a, 3, "permute_hw");
  Index h = a.dim(0), w = a.dim(1), d = a.dim(2);
  bool rg = tracked(a);
  Tensor out = make_output({w, h, d}, rg);
  const double* src = a.values().data();
  double* dst = out.values_mut().data();
  for (Index r = 0; r < h; ++r) {
    for (Index c = 0; c < w; ++c) {
      const double* from = src + (r * w + c) * d;
      double* to = dst + (c * h + r) * d;
      std::copy(from, from + d, to);
    }
  }
  if (rg) {
    maybe_record([a, out, h, w, d]() mutable {
      if (!has_out_grad(out)) return;
      const double* gsrc = out.grad().data();
      double* gdst = a.ensure_grad().data();
      for (Index r = 0; r < h; ++r) {
        for (Index c = 0; c < w; ++c) {
          const double* from = gsrc + (c * h + r) * d;
          double* to = gdst + (r * w + c) * d;
          for (Index k = 0; k < d; ++k) to[k] += from[k];
        }
      }
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& a, std::vector<Index> rows) {
  require_rank(a, 2, "gather_rows");
  for (Index r : rows) {
    if (r < 0 || r >= a.dim(0)) {
      throw ShapeError("gather_rows: index " + std::to_string(r) + " outside " +
                       shape_to_string(a.shape()));
    }
  }
  bool rg = tracked(a);
  Tensor out = make_output({static_cast<Index>(rows.size()), a.dim(1)}, rg);
  MatMap in = mat(a);
  MutMatMap res = mat_mut(out);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    res.row(static_cast<Index>(i)) = in.row(rows[i]);
  }
  if (rg) {
    maybe_record([a, out, rows = std::move(rows)]() mutable {
      if (!has_out_grad(out)) return;
      MatMap gy = out_grad_mat(out);
      MutMatMap gx = grad_mat(a);
      for (std::size_t i = 0; i < rows.size(); ++i) {
        gx.row(rows[i]) += gy.row(static_cast<Index>(i));
      }
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& a, Index start, Index count) {
  require_rank(a, 2, "slice_cols");
  if (start < 0 || count < 1 || start + count > a.dim(1)) {
    throw ShapeError("slice_cols: [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") outside " +
                     shape_to_string(a.shape()));
  }
  bool rg = tracked(a);
  Tensor out = make_output({a.dim(0), count}, rg);
  mat_mut(out) = mat(a).middleCols(start, count);
  if (rg) {
    maybe_record([a, out, start, count]() mutable {
      if (!has_out_grad(out)) return;
      grad_mat(a).middleCols(start, count) += out_grad_mat(out);
    });
  }
  return out;
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) {
    throw ShapeError("concat_rows: no parts");
  }
  Index cols = parts[0].dim(1);
  Index rows = 0;
  bool rg = false;
  for (const Tensor& p : parts) {
    require_rank(p, 2, "concat_rows");
    if (p.dim(1) != cols) {
      throw ShapeError("concat_rows: column mismatch between " +
                       shape_to_string(parts[0].shape()) + " and " +
                       shape_to_string(p.shape()));
    }
    rows += p.dim(0);
    rg = rg || tracked(p);
  }
  Tensor out = make_output({rows, cols}, rg);
  MutMatMap res = mat_mut(out);
  Index at = 0;
  for (const Tensor& p : parts) {
    res.middleRows(at, p.dim(0)) = mat(p);
    at += p.dim(0);
  }
  if (rg) {
    std::vector<Tensor> held(parts.begin(), parts.end());
    maybe_record([held = std::move(held), out]() mutable {
      if (!has_out_grad(out)) return;
      MatMap gy = out_grad_mat(out);
      Index at = 0;
      for (Tensor& p : held) {
        if (p.requires_grad()) {
          grad_mat(p) += gy.middleRows(at, p.dim(0));
        }
        at += p.dim(0);
      }
    });
  }
  return out;
}

namespace {

// Unfold (h,w,cin) into (oh*ow) rows of (kh*kw*cin) patch values.
std::vector<double> im2col(const Tensor& x, Index kh, Index kw, Index stride,
                           Index pad, Index oh, Index ow) {
  Index h = x.dim(0), w = x.dim(1), cin = x.dim(2);
  std::vector<double> col(static_cast<std::size_t>(oh * ow * kh * kw * cin), 0.0);
  const double* src = x.values().data();
  for (Index oy = 0; oy < oh; ++oy) {
    for (Index ox = 0; ox < ow; ++ox) {
      double* dst = col.data() + (oy * ow + ox) * kh * kw * cin;
      for (Index ky = 0; ky < kh; ++ky) {
        Index iy = oy * stride + ky - pad;
        for (Index kx = 0; kx < kw; ++kx) {
          Index ix = ox * stride + kx - pad;
          double* cell = dst + (ky * kw + kx) * cin;
          if (iy >= 0 && iy < h && ix >= 0 && ix < w) {
            const double* from = src + (iy * w + ix) * cin;
            std::copy(from, from + cin, cell);
          }
        }
      }
    }
  }
  return col;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, Index stride, Index pad) {
  require_rank(x, 3, "conv2d");
  require_rank(w, 4, "conv2d");
  require_rank(b, 1, "conv2d");
  Index kh = w.dim(0), kw = w.dim(1), cin = w.dim(2), cout = w.dim(3);
  if (x.dim(2) != cin || b.dim(0) != cout) {
    throw ShapeError("conv2d: input " + shape_to_string(x.shape()) + " vs kernel " +
                     shape_to_string(w.shape()) + " / bias " + shape_to_string(b.shape()));
  }
  if (stride < 1 || pad < 0) {
    throw ShapeError("conv2d: invalid stride/pad");
  }
  Index oh = (x.dim(0) + 2 * pad - kh) / stride + 1;
  Index ow = (x.dim(1) + 2 * pad - kw) / stride + 1;
  if (oh < 1 || ow < 1) {
    throw ShapeError("conv2d: kernel " + shape_to_string(w.shape()) +
                     " larger than padded input " + shape_to_string(x.shape()));
  }
  bool rg = tracked(x) || tracked(w) || tracked(b);
  Tensor out = make_output({oh, ow, cout}, rg);

  std::vector<double> col = im2col(x, kh, kw, stride, pad, oh, ow);
  Index patch = kh * kw * cin;
  if (vector_shaped(oh * ow, patch, cout)) {
    fixed_gemm_nn(col.data(), w.values().data(), out.values_mut().data(),
                  oh * ow, patch, cout, false);
  } else {
    MatMap colm(col.data(), oh * ow, patch);
    MatMap wm(w.values().data(), patch, cout);
    MutMatMap om(out.values_mut().data(), oh * ow, cout);
    om.noalias() = colm * wm;
  }
  MutMatMap(out.values_mut().data(), oh * ow, cout).rowwise() +=
      Eigen::Map<const Eigen::RowVectorXd>(b.values().data(), cout);
  out.check_finite("conv2d");

  if (rg) {
    maybe_record([x, w, b, out, col = std::move(col), kh, kw, stride, pad, oh, ow]() mutable {
      if (!has_out_grad(out)) return;
      Index cin = w.dim(2), cout = w.dim(3);
      Index patch = kh * kw * cin;
      MatMap gy(out.grad().data(), oh * ow, cout);
      if (b.requires_grad()) {
        fixed_col_sums(out.grad().data(), oh * ow, cout, b.ensure_grad().data());
      }
      if (w.requires_grad()) {
        if (vector_shaped(patch, oh * ow, cout)) {
          fixed_gemm_tn(col.data(), out.grad().data(), w.ensure_grad().data(),
                        patch, oh * ow, cout, true);
        } else {
          MatMap colm(col.data(), oh * ow, patch);
          MutMatMap gw(w.ensure_grad().data(), patch, cout);
          gw.noalias() += colm.transpose() * gy;
        }
      }
      if (x.requires_grad()) {
        RowMat gcol(oh * ow, patch);
        if (vector_shaped(oh * ow, cout, patch)) {
          fixed_gemm_nt(out.grad().data(), w.values().data(), gcol.data(),
                        oh * ow, cout, patch, false);
        } else {
          gcol.noalias() = gy * MatMap(w.values().data(), patch, cout).transpose();
        }
        Index h = x.dim(0), wd = x.dim(1);
        double* gx = x.ensure_grad().data();
        for (Index oy = 0; oy < oh; ++oy) {
          for (Index ox = 0; ox < ow; ++ox) {
            const double* src = gcol.data() + (oy * ow + ox) * patch;
            for (Index ky = 0; ky < kh; ++ky) {
              Index iy = oy * stride + ky - pad;
              if (iy < 0 || iy >= h) continue;
              for (Index kx = 0; kx < kw; ++kx) {
                Index ix = ox * stride + kx - pad;
                if (ix < 0 || ix >= wd) continue;
                const double* from = src + (ky * kw + kx) * cin;
                double* to = gx + (iy * wd + ix) * cin;
                for (Index c = 0; c < cin; ++c) to[c] += from[c];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor roi_align(const Tensor& f, const BoxPx& box, Index out_size, double spatial_scale) {
  require_rank(f, 3, "roi_align");
  if (out_size < 1) {
    throw ShapeError("roi_align: output size must be >= 1");
  }
  double x1 = box.x1 * spatial_scale;
  double y1 = box.y1 * spatial_scale;
  double x2 = box.x2 * spatial_scale;
  double y2 = box.y2 * spatial_scale;
  if (!(x2 > x1) || !(y2 > y1)) {
    throw Error("roi_align: degenerate box (zero width or height)");
  }
  Index h = f.dim(0), w = f.dim(1), d = f.dim(2);
  bool rg = tracked(f);
  Tensor out = make_output({out_size, out_size, d}, rg);

  struct Sample {
    Index i00, i01, i10, i11;  // flat cell indices
    double w00, w01, w10, w11;
  };
  std::vector<Sample> samples;
  samples.reserve(static_cast<std::size_t>(out_size * out_size));

  auto clamp_idx = [](Index v, Index hi) { return v < 0 ? 0 : (v > hi ? hi : v); };
  const double* src = f.values().data();
  double* dst = out.values_mut().data();
  for (Index sy = 0; sy < out_size; ++sy) {
    double v = y1 + (sy + 0.5) * (y2 - y1) / static_cast<double>(out_size);
    for (Index sx = 0; sx < out_size; ++sx) {
      double u = x1 + (sx + 0.5) * (x2 - x1) / static_cast<double>(out_size);
      // Cell (r, c) holds the value at continuous point (c + 0.5, r + 0.5).
      double xs = u - 0.5, ys = v - 0.5;
      Index x0 = static_cast<Index>(std::floor(xs));
      Index y0 = static_cast<Index>(std::floor(ys));
      double tx = xs - static_cast<double>(x0);
      double ty = ys - static_cast<double>(y0);
      Index x0c = clamp_idx(x0, w - 1), x1c = clamp_idx(x0 + 1, w - 1);
      Index y0c = clamp_idx(y0, h - 1), y1c = clamp_idx(y0 + 1, h - 1);
      Sample s;
      s.i00 = (y0c * w + x0c) * d;
      s.i01 = (y0c * w + x1c) * d;
      s.i10 = (y1c * w + x0c) * d;
      s.i11 = (y1c * w + x1c) * d;
      s.w00 = (1 - ty) * (1 - tx);
      s.w01 = (1 - ty) * tx;
      s.w10 = ty * (1 - tx);
      s.w11 = ty * tx;
      double* cell = dst + (sy * out_size + sx) * d;
      for (Index c = 0; c < d; ++c) {
        cell[c] = s.w00 * src[s.i00 + c] + s.w01 * src[s.i01 + c] +
                  s.w10 * src[s.i10 + c] + s.w11 * src[s.i11 + c];
      }
      samples.push_back(s);
    }
  }
  out.check_finite("roi_align");
  if (rg) {
    maybe_record([f, out, samples = std::move(samples), out_size]() mutable {
      if (!has_out_grad(out)) return;
      Index d = f.dim(2);
      const double* gy = out.grad().data();
      double* gx = f.ensure_grad().data();
      for (Index p = 0; p < out_size * out_size; ++p) {
        const auto& s = samples[static_cast<std::size_t>(p)];
        const double* g = gy + p * d;
        for (Index c = 0; c < d; ++c) {
          gx[s.i00 + c] += s.w00 * g[c];
          gx[s.i01 + c] += s.w01 * g[c];
          gx[s.i10 + c] += s.w10 * g[c];
          gx[s.i11 + c] += s.w11 * g[c];
        }
      }
    });
  }
  return out;
}

Tensor sinusoidal_embedding(Index position, Index d_model) {
  if (d_model < 2 || d_model % 2 != 0) {
    throw Error("sinusoidal_embedding: d_model must be a positive even number, got " +
                std::to_string(d_model));
  }
  if (position < 0) {
    throw Error("sinusoidal_embedding: position must be non-negative");
  }
  Tensor out = Tensor::zeros({d_model});
  double* v = out.values_mut().data();
  for (Index i = 0; i < d_model / 2; ++i) {
    double freq = std::pow(10000.0, 2.0 * static_cast<double>(i) / static_cast<double>(d_model));
    double angle = static_cast<double>(position) / freq;
    v[2 * i] = std::sin(angle);
    v[2 * i + 1] = std::cos(angle);
  }
  return out;
}

Tensor sinusoidal_embedding_2d(Index row, Index col, Index d_model) {
  if (d_model % 4 != 0) {
    throw Error("sinusoidal_embedding_2d: d_model must be divisible by 4, got " +
                std::to_string(d_model));
  }
  Tensor r = sinusoidal_embedding(row, d_model / 2);
  Tensor c = sinusoidal_embedding(col, d_model / 2);
  Tensor out = Tensor::zeros({d_model});
  std::copy(r.values().begin(), r.values().end(), out.values_mut().begin());
  std::copy(c.values().begin(), c.values().end(),
            out.values_mut().begin() + static_cast<std::ptrdiff_t>(d_model / 2));
  return out;
}

}  // namespace laneformer
