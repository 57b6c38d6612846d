#pragma once

#include "crqat/tensor.hpp"

namespace crqat {

namespace detail {
inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}
inline void require_rank(const Tensor& a, std::size_t rank, const char* op) {
  if (a.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(a.shape()));
  }
}
inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](GraphNode& n) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (double* g = n.input_grad(k)) {
        for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
      }
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](GraphNode& n) {
    if (double* g = n.input_grad(0)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
    }
    if (double* g = n.input_grad(1)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] -= n.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](GraphNode& n) {
    const auto& av = n.input_value(0);
    const auto& bv = n.input_value(1);
    if (double* g = n.input_grad(0)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * bv[i];
    }
    if (double* g = n.input_grad(1)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * av[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * a[i];
  return make_op(a.shape(), std::move(out), {a}, [c](GraphNode& n) {
    double* g = n.input_grad(0);
    for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += c * n.grad[i];
  });
}

/// Elementwise product with a constant array of the same shape.
inline Tensor mul_const(const Tensor& a, std::vector<double> c) {
  if (c.size() != a.size()) throw ShapeError("mul_const: size mismatch");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * c[i];
  return make_op(a.shape(), std::move(out), {a}, [c = std::move(c)](GraphNode& n) {
    double* g = n.input_grad(0);
    for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += c[i] * n.grad[i];
  });
}

inline Tensor silu(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * detail::sigmoid(a[i]);
  return make_op(a.shape(), std::move(out), {a}, [](GraphNode& n) {
    const auto& x = n.input_value(0);
    double* g = n.input_grad(0);
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      const double s = detail::sigmoid(x[i]);
      g[i] += n.grad[i] * s * (1.0 + x[i] * (1.0 - s));
    }
  });
}

inline Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::sigmoid(a[i]);
  return make_op(a.shape(), out, {a}, [y = out](GraphNode& n) {
    double* g = n.input_grad(0);
    for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * y[i] * (1.0 - y[i]);
  });
}

inline Tensor softplus(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a[i];
    out[i] = x > 30.0 ? x : std::log1p(std::exp(x));
  }
  return make_op(a.shape(), std::move(out), {a}, [](GraphNode& n) {
    const auto& x = n.input_value(0);
    double* g = n.input_grad(0);
    for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * detail::sigmoid(x[i]);
  });
}

/// y = alpha * x + beta with learnable scalar alpha and beta (shape [1]).
inline Tensor affine_scalar(const Tensor& x, const Tensor& alpha, const Tensor& beta) {
  if (alpha.size() != 1 || beta.size() != 1) throw ShapeError("affine_scalar: alpha/beta must be scalars");
  const double al = alpha[0], be = beta[0];
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = al * x[i] + be;
  return make_op(x.shape(), std::move(out), {x, alpha, beta}, [al](GraphNode& n) {
    const auto& xv = n.input_value(0);
    if (double* g = n.input_grad(0)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += al * n.grad[i];
    }
    if (double* g = n.input_grad(1)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n.grad.size(); ++i) acc += n.grad[i] * xv[i];
      g[0] += acc;
    }
    if (double* g = n.input_grad(2)) {
      double acc = 0.0;
      for (double v : n.grad) acc += v;
      g[0] += acc;
    }
  });
}

/// Elementwise Smooth L1 between a and b: 0.5 d^2 / delta if |d| < delta, else |d| - 0.5 delta.
inline double smooth_l1(double a, double b, double delta) {
  if (!(delta > 0)) throw std::invalid_argument("smooth_l1: delta must be positive");
  if (!std::isfinite(a) || !std::isfinite(b)) throw NumericError("smooth_l1: non-finite input");
  const double d = std::abs(a - b);
  return d < delta ? 0.5 * d * d / delta : d - 0.5 * delta;
}

inline Tensor smooth_l1(const Tensor& a, const Tensor& b, double delta) {
  detail::require_same_shape(a, b, "smooth_l1");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = smooth_l1(a[i], b[i], delta);
  return make_op(a.shape(), std::move(out), {a, b}, [delta](GraphNode& n) {
    const auto& av = n.input_value(0);
    const auto& bv = n.input_value(1);
    double* ga = n.input_grad(0);
    double* gb = n.input_grad(1);
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      const double d = av[i] - bv[i];
      const double dd = std::abs(d) < delta ? d / delta : (d > 0 ? 1.0 : -1.0);
      if (ga) ga[i] += n.grad[i] * dd;
      if (gb) gb[i] -= n.grad[i] * dd;
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  return make_op(Shape{1}, {acc}, {a}, [](GraphNode& n) {
    double* g = n.input_grad(0);
    const std::size_t m = n.inputs[0]->value.size();
    for (std::size_t i = 0; i < m; ++i) g[i] += n.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

/// sum_i w_i * a_i with constant weights.
inline Tensor weighted_sum(const Tensor& a, std::vector<double> w) {
  if (w.size() != a.size()) throw ShapeError("weighted_sum: weight size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) acc += w[i] * a[i];
  return make_op(Shape{1}, {acc}, {a}, [w = std::move(w)](GraphNode& n) {
    double* g = n.input_grad(0);
    for (std::size_t i = 0; i < w.size(); ++i) g[i] += n.grad[0] * w[i];
  });
}

/// Sum of scalar tensors; empty input yields a constant zero.
inline Tensor add_n(const std::vector<Tensor>& terms) {
  double acc = 0.0;
  for (const auto& t : terms) acc += t.item();
  return make_op(Shape{1}, {acc}, terms, [](GraphNode& n) {
    for (std::size_t k = 0; k < n.inputs.size(); ++k) {
      if (double* g = n.input_grad(k)) g[0] += n.grad[0];
    }
  });
}

// ---------------------------------------------------------------------------
// Layout
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size()) {
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  return make_op(std::move(shape), a.vec(), {a}, [](GraphNode& n) {
    double* g = n.input_grad(0);
    for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
  });
}

/// [B x C x H x W] -> [(B*H*W) x C], rows ordered by (b, y, x).
inline Tensor nchw_to_rows(const Tensor& x) {
  detail::require_rank(x, 4, "nchw_to_rows");
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  std::vector<double> out(x.size());
  const auto& v = x.vec();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < HW; ++p) out[(b * HW + p) * C + c] = v[(b * C + c) * HW + p];
  return make_op(Shape{B * HW, C}, std::move(out), {x}, [B, C, HW](GraphNode& n) {
    double* g = n.input_grad(0);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < HW; ++p) g[(b * C + c) * HW + p] += n.grad[(b * HW + p) * C + c];
  });
}

/// Concatenate 2-D tensors with equal column counts along rows.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t C = parts[0].dim(1);
  std::size_t rows = 0;
  for (const auto& p : parts) {
    detail::require_rank(p, 2, "concat_rows");
    if (p.dim(1) != C) throw ShapeError("concat_rows: column mismatch");
    rows += p.dim(0);
  }
  std::vector<double> out;
  out.reserve(rows * C);
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  return make_op(Shape{rows, C}, std::move(out), parts, [](GraphNode& n) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < n.inputs.size(); ++k) {
      const std::size_t m = n.inputs[k]->value.size();
      if (double* g = n.input_grad(k)) {
        for (std::size_t i = 0; i < m; ++i) g[i] += n.grad[offset + i];
      }
      offset += m;
    }
  });
}

inline Tensor gather_rows(const Tensor& x, std::vector<std::size_t> rows) {
  detail::require_rank(x, 2, "gather_rows");
  const std::size_t C = x.dim(1);
  std::vector<double> out(rows.size() * C);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= x.dim(0)) throw ShapeError("gather_rows: index out of range");
    std::copy_n(x.values().begin() + static_cast<std::ptrdiff_t>(rows[r] * C), C, out.begin() + static_cast<std::ptrdiff_t>(r * C));
  }
  const std::size_t R = rows.size();
  return make_op(Shape{R, C}, std::move(out), {x}, [rows = std::move(rows), C](GraphNode& n) {
    double* g = n.input_grad(0);
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t c = 0; c < C; ++c) g[rows[r] * C + c] += n.grad[r * C + c];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

/// [M x K] . [K x N]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  if (b.dim(0) != K) throw ShapeError("matmul: inner dimension mismatch");
  std::vector<double> out(M * N, 0.0);
  const auto& av = a.vec();
  const auto& bv = b.vec();
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t k = 0; k < K; ++k) {
      const double s = av[i * K + k];
      for (std::size_t j = 0; j < N; ++j) out[i * N + j] += s * bv[k * N + j];
    }
  return make_op(Shape{M, N}, std::move(out), {a, b}, [M, K, N](GraphNode& n) {
    const auto& av = n.input_value(0);
    const auto& bv = n.input_value(1);
    if (double* ga = n.input_grad(0)) {
      for (std::size_t i = 0; i < M; ++i)
        for (std::size_t k = 0; k < K; ++k) {
          double acc = 0.0;
          for (std::size_t j = 0; j < N; ++j) acc += n.grad[i * N + j] * bv[k * N + j];
          ga[i * K + k] += acc;
        }
    }
    if (double* gb = n.input_grad(1)) {
      for (std::size_t i = 0; i < M; ++i)
        for (std::size_t k = 0; k < K; ++k) {
          const double s = av[i * K + k];
          for (std::size_t j = 0; j < N; ++j) gb[k * N + j] += s * n.grad[i * N + j];
        }
    }
  });
}

/// [M x K] . [N x K]^T
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul_nt");
  detail::require_rank(b, 2, "matmul_nt");
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(0);
  if (b.dim(1) != K) throw ShapeError("matmul_nt: inner dimension mismatch");
  std::vector<double> out(M * N);
  const auto& av = a.vec();
  const auto& bv = b.vec();
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < N; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < K; ++k) acc += av[i * K + k] * bv[j * K + k];
      out[i * N + j] = acc;
    }
  return make_op(Shape{M, N}, std::move(out), {a, b}, [M, K, N](GraphNode& n) {
    const auto& av = n.input_value(0);
    const auto& bv = n.input_value(1);
    double* ga = n.input_grad(0);
    double* gb = n.input_grad(1);
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t j = 0; j < N; ++j) {
        const double g = n.grad[i * N + j];
        if (g == 0.0) continue;
        if (ga)
          for (std::size_t k = 0; k < K; ++k) ga[i * K + k] += g * bv[j * K + k];
        if (gb)
          for (std::size_t k = 0; k < K; ++k) gb[j * K + k] += g * av[i * K + k];
      }
  });
}

/// x [R x in], weight [out x in], bias [out] (may be undefined) -> [R x out].
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  detail::require_rank(x, 2, "linear");
  detail::require_rank(weight, 2, "linear");
  const std::size_t R = x.dim(0), I = x.dim(1), O = weight.dim(0);
  if (weight.dim(1) != I) throw ShapeError("linear: weight expects " + std::to_string(weight.dim(1)) + " inputs, got " + std::to_string(I));
  const bool has_bias = bias.defined();
  if (has_bias && bias.size() != O) throw ShapeError("linear: bias size mismatch");
  std::vector<double> out(R * O);
  const auto& xv = x.vec();
  const auto& wv = weight.vec();
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t o = 0; o < O; ++o) {
      double acc = has_bias ? bias[o] : 0.0;
      for (std::size_t i = 0; i < I; ++i) acc += xv[r * I + i] * wv[o * I + i];
      out[r * O + o] = acc;
    }
  std::vector<Tensor> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_op(Shape{R, O}, std::move(out), std::move(inputs), [R, I, O, has_bias](GraphNode& n) {
    const auto& xv = n.input_value(0);
    const auto& wv = n.input_value(1);
    double* gx = n.input_grad(0);
    double* gw = n.input_grad(1);
    double* gb = has_bias ? n.input_grad(2) : nullptr;
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t o = 0; o < O; ++o) {
        const double g = n.grad[r * O + o];
        if (gb) gb[o] += g;
        if (gx)
          for (std::size_t i = 0; i < I; ++i) gx[r * I + i] += g * wv[o * I + i];
        if (gw)
          for (std::size_t i = 0; i < I; ++i) gw[o * I + i] += g * xv[r * I + i];
      }
  });
}

/// Direct 2-D convolution. x [B x C x H x W], weight [O x C x k x k], bias [O].
inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride, std::size_t pad) {
  detail::require_rank(x, 4, "conv2d");
  detail::require_rank(weight, 4, "conv2d");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = weight.dim(0), K = weight.dim(2);
  if (weight.dim(1) != C || weight.dim(3) != K) throw ShapeError("conv2d: weight shape " + shape_str(weight.shape()) + " incompatible with input " + shape_str(x.shape()));
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  if (H + 2 * pad < K || W + 2 * pad < K) throw ShapeError("conv2d: kernel larger than padded input");
  const bool has_bias = bias.defined();
  const std::size_t OH = (H + 2 * pad - K) / stride + 1, OW = (W + 2 * pad - K) / stride + 1;

  // For kernel offset kk, output positions o with 0 <= o*stride - pad + kk < extent.
  auto valid_range = [stride, pad](std::size_t kk, std::size_t extent, std::size_t out_extent) {
    const long s = static_cast<long>(stride), p = static_cast<long>(pad), k = static_cast<long>(kk);
    long lo = p - k > 0 ? (p - k + s - 1) / s : 0;
    long hi = (static_cast<long>(extent) - 1 + p - k);
    hi = hi < 0 ? -1 : hi / s;
    hi = std::min(hi, static_cast<long>(out_extent) - 1);
    return std::pair<long, long>{lo, hi};
  };

  std::vector<double> out(B * O * OH * OW);
  const auto& xv = x.vec();
  const auto& wv = weight.vec();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < O; ++o) {
      double* plane = out.data() + (b * O + o) * OH * OW;
      std::fill(plane, plane + OH * OW, has_bias ? bias[o] : 0.0);
      for (std::size_t c = 0; c < C; ++c) {
        const double* in = xv.data() + (b * C + c) * H * W;
        for (std::size_t kh = 0; kh < K; ++kh) {
          const auto [ylo, yhi] = valid_range(kh, H, OH);
          for (std::size_t kw = 0; kw < K; ++kw) {
            const double w = wv[((o * C + c) * K + kh) * K + kw];
            const auto [xlo, xhi] = valid_range(kw, W, OW);
            for (long oy = ylo; oy <= yhi; ++oy) {
              const double* row = in + (oy * static_cast<long>(stride) - static_cast<long>(pad) + static_cast<long>(kh)) * static_cast<long>(W);
              double* orow = plane + oy * static_cast<long>(OW);
              for (long ox = xlo; ox <= xhi; ++ox)
                orow[ox] += w * row[ox * static_cast<long>(stride) - static_cast<long>(pad) + static_cast<long>(kw)];
            }
          }
        }
      }
    }

  std::vector<Tensor> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_op(Shape{B, O, OH, OW}, std::move(out), std::move(inputs),
                 [=](GraphNode& n) {
                   const auto& xv = n.input_value(0);
                   const auto& wv = n.input_value(1);
                   double* gx = n.input_grad(0);
                   double* gw = n.input_grad(1);
                   double* gb = has_bias ? n.input_grad(2) : nullptr;
                   const long s = static_cast<long>(stride), p = static_cast<long>(pad);
                   for (std::size_t b = 0; b < B; ++b)
                     for (std::size_t o = 0; o < O; ++o) {
                       const double* gplane = n.grad.data() + (b * O + o) * OH * OW;
                       if (gb)
                         for (std::size_t i = 0; i < OH * OW; ++i) gb[o] += gplane[i];
                       for (std::size_t c = 0; c < C; ++c) {
                         const double* in = xv.data() + (b * C + c) * H * W;
                         double* gin = gx ? gx + (b * C + c) * H * W : nullptr;
                         for (std::size_t kh = 0; kh < K; ++kh) {
                           const auto [ylo, yhi] = valid_range(kh, H, OH);
                           for (std::size_t kw = 0; kw < K; ++kw) {
                             const std::size_t widx = ((o * C + c) * K + kh) * K + kw;
                             const double w = wv[widx];
                             const auto [xlo, xhi] = valid_range(kw, W, OW);
                             double wacc = 0.0;
                             for (long oy = ylo; oy <= yhi; ++oy) {
                               const long iy = oy * s - p + static_cast<long>(kh);
                               const double* grow = gplane + oy * static_cast<long>(OW);
                               const double* row = in + iy * static_cast<long>(W);
                               double* girow = gin ? gin + iy * static_cast<long>(W) : nullptr;
                               for (long ox = xlo; ox <= xhi; ++ox) {
                                 const long ix = ox * s - p + static_cast<long>(kw);
                                 wacc += grow[ox] * row[ix];
                                 if (girow) girow[ix] += w * grow[ox];
                               }
                             }
                             if (gw) gw[widx] += wacc;
                           }
                         }
                       }
                     }
                 });
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Softmax over the last axis.
inline Tensor softmax_last(const Tensor& x) {
  const std::size_t N = x.shape().back(), R = x.size() / N;
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < R; ++r) {
    const double* in = x.vec().data() + r * N;
    double* y = out.data() + r * N;
    const double m = *std::max_element(in, in + N);
    double z = 0.0;
    for (std::size_t j = 0; j < N; ++j) z += (y[j] = std::exp(in[j] - m));
    for (std::size_t j = 0; j < N; ++j) y[j] /= z;
  }
  return make_op(x.shape(), out, {x}, [y = out, R, N](GraphNode& n) {
    double* g = n.input_grad(0);
    for (std::size_t r = 0; r < R; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < N; ++j) dot += n.grad[r * N + j] * y[r * N + j];
      for (std::size_t j = 0; j < N; ++j) g[r * N + j] += y[r * N + j] * (n.grad[r * N + j] - dot);
    }
  });
}

/// Row-wise L2 normalization. Rows with norm below eps are scaled by 1/eps instead.
inline Tensor l2_normalize_rows(const Tensor& m, double eps = 1e-12) {
  if (!(eps > 0)) throw std::invalid_argument("l2_normalize_rows: eps must be positive");
  detail::require_rank(m, 2, "l2_normalize_rows");
  require_finite(m.values(), "l2_normalize_rows");
  const std::size_t R = m.dim(0), D = m.dim(1);
  std::vector<double> out(m.size()), inv(R);
  std::vector<bool> guarded(R);
  for (std::size_t r = 0; r < R; ++r) {
    double sq = 0.0;
    for (std::size_t d = 0; d < D; ++d) sq += m[r * D + d] * m[r * D + d];
    const double norm = std::sqrt(sq);
    guarded[r] = norm < eps;
    inv[r] = guarded[r] ? 1.0 / eps : 1.0 / norm;
    for (std::size_t d = 0; d < D; ++d) out[r * D + d] = m[r * D + d] * inv[r];
  }
  return make_op(m.shape(), out, {m}, [y = out, inv = std::move(inv), guarded = std::move(guarded), R, D](GraphNode& n) {
    double* g = n.input_grad(0);
    for (std::size_t r = 0; r < R; ++r) {
      const double* gy = n.grad.data() + r * D;
      const double* yr = y.data() + r * D;
      double dot = 0.0;
      if (!guarded[r])
        for (std::size_t d = 0; d < D; ++d) dot += gy[d] * yr[d];
      for (std::size_t d = 0; d < D; ++d) g[r * D + d] += inv[r] * (gy[d] - yr[d] * dot);
    }
  });
}

/// Standardize each (image, channel) plane of x [B x C x H x W] to zero mean and
/// unit variance over spatial positions. The variance is floored at var_floor.
inline Tensor standardize_spatial(const Tensor& x, double var_floor = 1e-6) {
  detail::require_rank(x, 4, "standardize_spatial");
  const std::size_t planes = x.dim(0) * x.dim(1), P = x.dim(2) * x.dim(3);
  std::vector<double> out(x.size()), inv_std(planes);
  std::vector<bool> floored(planes);
  for (std::size_t k = 0; k < planes; ++k) {
    const double* in = x.vec().data() + k * P;
    double mu = 0.0;
    for (std::size_t i = 0; i < P; ++i) mu += in[i];
    mu /= static_cast<double>(P);
    double var = 0.0;
    for (std::size_t i = 0; i < P; ++i) var += (in[i] - mu) * (in[i] - mu);
    var /= static_cast<double>(P);
    floored[k] = var < var_floor;
    inv_std[k] = 1.0 / std::sqrt(std::max(var, var_floor));
    for (std::size_t i = 0; i < P; ++i) out[k * P + i] = (in[i] - mu) * inv_std[k];
  }
  return make_op(x.shape(), out, {x}, [z = out, inv_std = std::move(inv_std), floored = std::move(floored), planes, P](GraphNode& n) {
    double* g = n.input_grad(0);
    const double inv_p = 1.0 / static_cast<double>(P);
    for (std::size_t k = 0; k < planes; ++k) {
      const double* gz = n.grad.data() + k * P;
      const double* zk = z.data() + k * P;
      double gmean = 0.0, gzmean = 0.0;
      for (std::size_t i = 0; i < P; ++i) {
        gmean += gz[i];
        gzmean += gz[i] * zk[i];
      }
      gmean *= inv_p;
      gzmean = floored[k] ? 0.0 : gzmean * inv_p;
      for (std::size_t i = 0; i < P; ++i) g[k * P + i] += inv_std[k] * (gz[i] - gmean - zk[i] * gzmean);
    }
  });
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

/// Per-head scaled dot products: q [R x C], k [N x C] -> [H x R x N].
inline Tensor attention_scores(const Tensor& q, const Tensor& k, std::size_t heads) {
  detail::require_rank(q, 2, "attention_scores");
  detail::require_rank(k, 2, "attention_scores");
  const std::size_t R = q.dim(0), C = q.dim(1), N = k.dim(0);
  if (k.dim(1) != C || heads == 0 || C % heads != 0) throw ShapeError("attention_scores: incompatible shapes/heads");
  const std::size_t dh = C / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> out(heads * R * N);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t j = 0; j < N; ++j) {
        double acc = 0.0;
        for (std::size_t d = h * dh; d < (h + 1) * dh; ++d) acc += q[r * C + d] * k[j * C + d];
        out[(h * R + r) * N + j] = acc * sc;
      }
  return make_op(Shape{heads, R, N}, std::move(out), {q, k}, [=](GraphNode& n) {
    const auto& qv = n.input_value(0);
    const auto& kv = n.input_value(1);
    double* gq = n.input_grad(0);
    double* gk = n.input_grad(1);
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t j = 0; j < N; ++j) {
          const double g = n.grad[(h * R + r) * N + j] * sc;
          for (std::size_t d = h * dh; d < (h + 1) * dh; ++d) {
            if (gq) gq[r * C + d] += g * kv[j * C + d];
            if (gk) gk[j * C + d] += g * qv[r * C + d];
          }
        }
  });
}

/// Mix values by per-head weights: p [H x R x N], v [N x C] -> [R x C].
inline Tensor attention_mix(const Tensor& p, const Tensor& v) {
  detail::require_rank(p, 3, "attention_mix");
  detail::require_rank(v, 2, "attention_mix");
  const std::size_t H = p.dim(0), R = p.dim(1), N = p.dim(2), C = v.dim(1);
  if (v.dim(0) != N || C % H != 0) throw ShapeError("attention_mix: incompatible shapes");
  const std::size_t dh = C / H;
  std::vector<double> out(R * C, 0.0);
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t j = 0; j < N; ++j) {
        const double w = p[(h * R + r) * N + j];
        for (std::size_t d = h * dh; d < (h + 1) * dh; ++d) out[r * C + d] += w * v[j * C + d];
      }
  return make_op(Shape{R, C}, std::move(out), {p, v}, [=](GraphNode& n) {
    const auto& pv = n.input_value(0);
    const auto& vv = n.input_value(1);
    double* gp = n.input_grad(0);
    double* gv = n.input_grad(1);
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t j = 0; j < N; ++j) {
          const double w = pv[(h * R + r) * N + j];
          double acc = 0.0;
          for (std::size_t d = h * dh; d < (h + 1) * dh; ++d) {
            acc += n.grad[r * C + d] * vv[j * C + d];
            if (gv) gv[j * C + d] += w * n.grad[r * C + d];
          }
          if (gp) gp[(h * R + r) * N + j] += acc;
        }
  });
}

// ---------------------------------------------------------------------------
// Fused losses
// ---------------------------------------------------------------------------

/// Sum over elements of binary cross-entropy with logits against constant targets.
inline Tensor bce_with_logits_sum(const Tensor& logits, std::vector<double> targets) {
  if (targets.size() != logits.size()) throw ShapeError("bce_with_logits_sum: target size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const double x = logits[i];
    acc += std::max(x, 0.0) - x * targets[i] + std::log1p(std::exp(-std::abs(x)));
  }
  return make_op(Shape{1}, {acc}, {logits}, [t = std::move(targets)](GraphNode& n) {
    const auto& x = n.input_value(0);
    double* g = n.input_grad(0);
    for (std::size_t i = 0; i < t.size(); ++i) g[i] += n.grad[0] * (detail::sigmoid(x[i]) - t[i]);
  });
}

/// Per-row 1 - IoU for boxes given as (left, top, right, bottom) distances from a
/// shared reference point. pred [P x 4] positive; target constant, nonnegative.
inline Tensor iou_loss_ltrb(const Tensor& pred, std::vector<double> target) {
  detail::require_rank(pred, 2, "iou_loss_ltrb");
  if (pred.dim(1) != 4 || target.size() != pred.size()) throw ShapeError("iou_loss_ltrb: expects [P x 4]");
  const std::size_t P = pred.dim(0);
  std::vector<double> out(P);
  for (std::size_t i = 0; i < P; ++i) {
    const double* p = pred.vec().data() + i * 4;
    const double* t = target.data() + i * 4;
    const double wi = std::min(p[0], t[0]) + std::min(p[2], t[2]);
    const double hi = std::min(p[1], t[1]) + std::min(p[3], t[3]);
    const double inter = std::max(wi, 0.0) * std::max(hi, 0.0);
    const double uni = (p[0] + p[2]) * (p[1] + p[3]) + (t[0] + t[2]) * (t[1] + t[3]) - inter;
    out[i] = 1.0 - (uni > 0 ? inter / uni : 0.0);
  }
  return make_op(Shape{P}, std::move(out), {pred}, [t = std::move(target), P](GraphNode& n) {
    const auto& pv = n.input_value(0);
    double* g = n.input_grad(0);
    for (std::size_t i = 0; i < P; ++i) {
      const double* p = pv.data() + i * 4;
      const double* tt = t.data() + i * 4;
      const double wi = std::min(p[0], tt[0]) + std::min(p[2], tt[2]);
      const double hi = std::min(p[1], tt[1]) + std::min(p[3], tt[3]);
      if (wi <= 0 || hi <= 0) continue;
      const double inter = wi * hi;
      const double uni = (p[0] + p[2]) * (p[1] + p[3]) + (tt[0] + tt[2]) * (tt[1] + tt[3]) - inter;
      if (uni <= 0) continue;
      // d(inter)/d(l,t,r,b) and d(area_pred)/d(l,t,r,b)
      const double di[4] = {p[0] <= tt[0] ? hi : 0.0, p[1] <= tt[1] ? wi : 0.0,
                            p[2] <= tt[2] ? hi : 0.0, p[3] <= tt[3] ? wi : 0.0};
      const double da[4] = {p[1] + p[3], p[0] + p[2], p[1] + p[3], p[0] + p[2]};
      for (int c = 0; c < 4; ++c) {
        const double du = da[c] - di[c];
        const double diou = (di[c] * uni - inter * du) / (uni * uni);
        g[i * 4 + c] -= n.grad[i] * diou;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Max over coordinates of |analytic - central difference| / max(1, |central difference|).
inline double grad_check(const std::function<Tensor(const Tensor&)>& scalar_fn, const Tensor& x, double step = 1e-5) {
  if (!(step > 0)) throw std::invalid_argument("grad_check: step must be positive");
  Tensor leaf(x.shape(), x.vec(), true);
  Tensor y = scalar_fn(leaf);
  if (y.size() != 1) throw ShapeError("grad_check: function must return a scalar");
  if (!std::isfinite(y.item())) throw NumericError("grad_check: non-finite function value");
  y.backward();
  std::vector<double> analytic(leaf.size(), 0.0);
  if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());

  NoGradGuard no_grad;
  double worst = 0.0;
  for (std::size_t i = 0; i < leaf.size(); ++i) {
    auto eval = [&](double offset) {
      std::vector<double> v = x.vec();
      v[i] += offset;
      const double f = scalar_fn(Tensor(x.shape(), std::move(v))).item();
      if (!std::isfinite(f)) throw NumericError("grad_check: non-finite function value");
      return f;
    };
    const double numeric = (eval(step) - eval(-step)) / (2.0 * step);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
  }
  return worst;
}

}  // namespace crqat
