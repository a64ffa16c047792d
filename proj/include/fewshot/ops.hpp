#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "fewshot/tensor.hpp"

// Primitive differentiable operators. Each backward rule is written in terms
// of other primitives, so the set is closed under differentiation: running a
// backward sweep with recording on yields gradients that can be
// differentiated again (the second-order path of the meta update).

namespace fewshot::ops {

namespace detail {

template <typename Real>
inline void require_same_shape(const char* op, const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": operand shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()) + " differ");
}

template <typename Real>
inline void require_rank(const char* op, const Tensor<Real>& a, std::size_t rank) {
    if (a.shape().size() != rank)
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_str(a.shape()));
}

// C[M,N] += A[M,K] * B[K,N]; ikj order so the inner loop is contiguous.
template <typename Real>
inline void matmul_accum_raw(const Real* A, const Real* B, Real* C,
                             std::int64_t M, std::int64_t K, std::int64_t N) {
    for (std::int64_t i = 0; i < M; ++i) {
        const Real* a_row = A + i * K;
        Real* c_row = C + i * N;
        for (std::int64_t k = 0; k < K; ++k) {
            Real a = a_row[k];
            if (a == Real(0)) continue;
            const Real* b_row = B + k * N;
            for (std::int64_t j = 0; j < N; ++j) c_row[j] += a * b_row[j];
        }
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
    detail::require_same_shape("add", a, b);
    std::vector<Real> out(a.data());
    const auto& bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
    return Tensor<Real>::make_op("add", a.shape(), std::move(out), {a, b},
        [a, b](const Tensor<Real>& g, GradAccum<Real>& acc) {
            acc.add(a, g);
            acc.add(b, g);
        });
}

template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b);

template <typename Real>
Tensor<Real> scale(const Tensor<Real>& a, Real c) {
    std::vector<Real> out(a.data());
    for (auto& v : out) v *= c;
    return Tensor<Real>::make_op("scale", a.shape(), std::move(out), {a},
        [a, c](const Tensor<Real>& g, GradAccum<Real>& acc) { acc.add(a, scale(g, c)); });
}

template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
    detail::require_same_shape("sub", a, b);
    std::vector<Real> out(a.data());
    const auto& bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
    return Tensor<Real>::make_op("sub", a.shape(), std::move(out), {a, b},
        [a, b](const Tensor<Real>& g, GradAccum<Real>& acc) {
            acc.add(a, g);
            acc.add(b, scale(g, Real(-1)));
        });
}

template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
    detail::require_same_shape("mul", a, b);
    std::vector<Real> out(a.data());
    const auto& bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
    return Tensor<Real>::make_op("mul", a.shape(), std::move(out), {a, b},
        [a, b](const Tensor<Real>& g, GradAccum<Real>& acc) {
            acc.add(a, mul(g, b));
            acc.add(b, mul(g, a));
        });
}

template <typename Real>
Tensor<Real> shift(const Tensor<Real>& a, Real c) {
    std::vector<Real> out(a.data());
    for (auto& v : out) v += c;
    return Tensor<Real>::make_op("shift", a.shape(), std::move(out), {a},
        [a](const Tensor<Real>& g, GradAccum<Real>& acc) { acc.add(a, g); });
}

template <typename Real>
Tensor<Real> relu(const Tensor<Real>& a) {
    std::vector<Real> out(a.data());
    for (auto& v : out)
        if (v < Real(0)) v = Real(0);
    return Tensor<Real>::make_op("relu", a.shape(), std::move(out), {a},
        [a](const Tensor<Real>& g, GradAccum<Real>& acc) {
            // Subgradient 0 at exactly 0; the mask is piecewise constant so it
            // enters the second-order graph as a constant.
            std::vector<Real> m(a.data().size());
            const auto& ad = a.data();
            for (std::size_t i = 0; i < m.size(); ++i) m[i] = ad[i] > Real(0) ? Real(1) : Real(0);
            acc.add(a, mul(g, Tensor<Real>::constant(a.shape(), std::move(m))));
        });
}

template <typename Real>
Tensor<Real> exp_op(const Tensor<Real>& a) {
    std::vector<Real> out(a.data());
    for (auto& v : out) v = std::exp(v);
    return Tensor<Real>::make_op("exp", a.shape(), std::move(out), {a},
        [a](const Tensor<Real>& g, GradAccum<Real>& acc) { acc.add(a, mul(g, exp_op(a))); });
}

template <typename Real>
Tensor<Real> recip(const Tensor<Real>& a) {
    std::vector<Real> out(a.data());
    for (auto& v : out) v = Real(1) / v;
    return Tensor<Real>::make_op("recip", a.shape(), std::move(out), {a},
        [a](const Tensor<Real>& g, GradAccum<Real>& acc) {
            auto r = recip(a);
            acc.add(a, scale(mul(g, mul(r, r)), Real(-1)));
        });
}

template <typename Real>
Tensor<Real> log_op(const Tensor<Real>& a) {
    std::vector<Real> out(a.data());
    for (auto& v : out) v = std::log(v);
    return Tensor<Real>::make_op("log", a.shape(), std::move(out), {a},
        [a](const Tensor<Real>& g, GradAccum<Real>& acc) { acc.add(a, mul(g, recip(a))); });
}

template <typename Real>
Tensor<Real> sqrt_op(const Tensor<Real>& a) {
    std::vector<Real> out(a.data());
    for (auto& v : out) v = std::sqrt(v);
    return Tensor<Real>::make_op("sqrt", a.shape(), std::move(out), {a},
        [a](const Tensor<Real>& g, GradAccum<Real>& acc) {
            acc.add(a, scale(mul(g, recip(sqrt_op(a))), Real(0.5)));
        });
}

template <typename Real>
Tensor<Real> rsqrt(const Tensor<Real>& a) {
    std::vector<Real> out(a.data());
    for (auto& v : out) v = Real(1) / std::sqrt(v);
    return Tensor<Real>::make_op("rsqrt", a.shape(), std::move(out), {a},
        [a](const Tensor<Real>& g, GradAccum<Real>& acc) {
            // d/dx x^(-1/2) = -1/2 x^(-3/2)
            acc.add(a, scale(mul(g, mul(rsqrt(a), recip(a))), Real(-0.5)));
        });
}

/// Recorded identity with a fresh buffer. Gradients flow straight through, so
/// a clone of a parameter stays connected to its origin.
template <typename Real>
Tensor<Real> clone_value(const Tensor<Real>& a) {
    return Tensor<Real>::make_op("clone", a.shape(), std::vector<Real>(a.data()), {a},
        [a](const Tensor<Real>& g, GradAccum<Real>& acc) { acc.add(a, g); });
}

// ---------------------------------------------------------------------------
// Matrix ops (rank 2)
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> transpose(const Tensor<Real>& a) {
    detail::require_rank("transpose", a, 2);
    std::int64_t m = a.dim(0), n = a.dim(1);
    std::vector<Real> out(static_cast<std::size_t>(m * n));
    const auto& ad = a.data();
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) out[j * m + i] = ad[i * n + j];
    return Tensor<Real>::make_op("transpose", {n, m}, std::move(out), {a},
        [a](const Tensor<Real>& g, GradAccum<Real>& acc) { acc.add(a, transpose(g)); });
}

template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
    detail::require_rank("matmul", a, 2);
    detail::require_rank("matmul", b, 2);
    std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k)
        throw ShapeError("matmul: inner dimensions " + std::to_string(k) + " and " +
                         std::to_string(b.dim(0)) + " differ (shapes " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()) + ")");
    std::vector<Real> out(static_cast<std::size_t>(m * n), Real(0));
    detail::matmul_accum_raw(a.data().data(), b.data().data(), out.data(), m, k, n);
    return Tensor<Real>::make_op("matmul", {m, n}, std::move(out), {a, b},
        [a, b](const Tensor<Real>& g, GradAccum<Real>& acc) {
            acc.add(a, matmul(g, transpose(b)));
            acc.add(b, matmul(transpose(a), g));
        });
}

// ---------------------------------------------------------------------------
// Shape and reduction
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> reshape(const Tensor<Real>& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    Shape orig = a.shape();
    return Tensor<Real>::make_op("reshape", std::move(shape), std::vector<Real>(a.data()), {a},
        [a, orig](const Tensor<Real>& g, GradAccum<Real>& acc) { acc.add(a, reshape(g, orig)); });
}

template <typename Real>
Tensor<Real> broadcast_scalar(const Tensor<Real>& s, const Shape& shape);

template <typename Real>
Tensor<Real> sum_all(const Tensor<Real>& a) {
    Real total = 0;
    for (Real v : a.data()) total += v;
    return Tensor<Real>::make_op("sum", Shape{}, {total}, {a},
        [a](const Tensor<Real>& g, GradAccum<Real>& acc) { acc.add(a, broadcast_scalar(g, a.shape())); });
}

template <typename Real>
Tensor<Real> broadcast_scalar(const Tensor<Real>& s, const Shape& shape) {
    if (s.numel() != 1)
        throw ShapeError("broadcast_scalar: source has shape " + shape_str(s.shape()));
    std::vector<Real> out(static_cast<std::size_t>(shape_numel(shape)), s.data()[0]);
    return Tensor<Real>::make_op("broadcast_scalar", shape, std::move(out), {s},
        [s](const Tensor<Real>& g, GradAccum<Real>& acc) { acc.add(s, sum_all(g)); });
}

template <typename Real>
Tensor<Real> repeat_rows(const Tensor<Real>& v, std::int64_t rows);

/// Sum over axis 0 of a [M,N] matrix -> [N].
template <typename Real>
Tensor<Real> sum_axis0(const Tensor<Real>& a) {
    detail::require_rank("sum_axis0", a, 2);
    std::int64_t m = a.dim(0), n = a.dim(1);
    std::vector<Real> out(static_cast<std::size_t>(n), Real(0));
    const auto& ad = a.data();
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) out[j] += ad[i * n + j];
    return Tensor<Real>::make_op("sum_axis0", {n}, std::move(out), {a},
        [a, m](const Tensor<Real>& g, GradAccum<Real>& acc) { acc.add(a, repeat_rows(g, m)); });
}

template <typename Real>
Tensor<Real> repeat_cols(const Tensor<Real>& v, std::int64_t cols);

/// Sum over axis 1 of a [M,N] matrix -> [M].
template <typename Real>
Tensor<Real> sum_axis1(const Tensor<Real>& a) {
    detail::require_rank("sum_axis1", a, 2);
    std::int64_t m = a.dim(0), n = a.dim(1);
    std::vector<Real> out(static_cast<std::size_t>(m), Real(0));
    const auto& ad = a.data();
    for (std::int64_t i = 0; i < m; ++i) {
        Real s = 0;
        for (std::int64_t j = 0; j < n; ++j) s += ad[i * n + j];
        out[static_cast<std::size_t>(i)] = s;
    }
    return Tensor<Real>::make_op("sum_axis1", {m}, std::move(out), {a},
        [a, n](const Tensor<Real>& g, GradAccum<Real>& acc) { acc.add(a, repeat_cols(g, n)); });
}

/// [N] -> [rows,N], every row a copy of v.
template <typename Real>
Tensor<Real> repeat_rows(const Tensor<Real>& v, std::int64_t rows) {
    detail::require_rank("repeat_rows", v, 1);
    std::int64_t n = v.dim(0);
    std::vector<Real> out(static_cast<std::size_t>(rows * n));
    for (std::int64_t i = 0; i < rows; ++i)
        std::copy(v.data().begin(), v.data().end(), out.begin() + i * n);
    return Tensor<Real>::make_op("repeat_rows", {rows, n}, std::move(out), {v},
        [v](const Tensor<Real>& g, GradAccum<Real>& acc) { acc.add(v, sum_axis0(g)); });
}

/// [M] -> [M,cols], every column a copy of v.
template <typename Real>
Tensor<Real> repeat_cols(const Tensor<Real>& v, std::int64_t cols) {
    detail::require_rank("repeat_cols", v, 1);
    std::int64_t m = v.dim(0);
    std::vector<Real> out(static_cast<std::size_t>(m * cols));
    const auto& vd = v.data();
    for (std::int64_t i = 0; i < m; ++i)
        std::fill(out.begin() + i * cols, out.begin() + (i + 1) * cols, vd[static_cast<std::size_t>(i)]);
    return Tensor<Real>::make_op("repeat_cols", {m, cols}, std::move(out), {v},
        [v](const Tensor<Real>& g, GradAccum<Real>& acc) { acc.add(v, sum_axis1(g)); });
}

// ---------------------------------------------------------------------------
// Channel ops on [N,C,H,W] batches
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> channel_broadcast(const Tensor<Real>& v, const Shape& shape);

/// Sum over batch and spatial dims -> [C].
template <typename Real>
Tensor<Real> channel_sum(const Tensor<Real>& x) {
    detail::require_rank("channel_sum", x, 4);
    std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    std::vector<Real> out(static_cast<std::size_t>(c), Real(0));
    const Real* xd = x.data().data();
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const Real* p = xd + (b * c + ch) * hw;
            Real s = 0;
            for (std::int64_t i = 0; i < hw; ++i) s += p[i];
            out[static_cast<std::size_t>(ch)] += s;
        }
    Shape xs = x.shape();
    return Tensor<Real>::make_op("channel_sum", {c}, std::move(out), {x},
        [x, xs](const Tensor<Real>& g, GradAccum<Real>& acc) { acc.add(x, channel_broadcast(g, xs)); });
}

/// [C] -> [N,C,H,W] with v[c] in every (batch, spatial) slot of channel c.
template <typename Real>
Tensor<Real> channel_broadcast(const Tensor<Real>& v, const Shape& shape) {
    detail::require_rank("channel_broadcast", v, 1);
    if (shape.size() != 4 || shape[1] != v.dim(0))
        throw ShapeError("channel_broadcast: vector " + shape_str(v.shape()) +
                         " does not match channel dim of " + shape_str(shape));
    std::int64_t n = shape[0], c = shape[1], hw = shape[2] * shape[3];
    std::vector<Real> out(static_cast<std::size_t>(n * c * hw));
    const auto& vd = v.data();
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t ch = 0; ch < c; ++ch)
            std::fill(out.begin() + (b * c + ch) * hw, out.begin() + (b * c + ch + 1) * hw,
                      vd[static_cast<std::size_t>(ch)]);
    return Tensor<Real>::make_op("channel_broadcast", shape, std::move(out), {v},
        [v](const Tensor<Real>& g, GradAccum<Real>& acc) { acc.add(v, channel_sum(g)); });
}

template <typename Real>
Tensor<Real> channel_bias_add(const Tensor<Real>& x, const Tensor<Real>& b) {
    detail::require_rank("channel_bias_add", x, 4);
    detail::require_rank("channel_bias_add", b, 1);
    if (x.dim(1) != b.dim(0))
        throw ShapeError("channel_bias_add: " + std::to_string(b.dim(0)) + " biases for " +
                         std::to_string(x.dim(1)) + " channels");
    std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    std::vector<Real> out(x.data());
    const auto& bd = b.data();
    for (std::int64_t bi = 0; bi < n; ++bi)
        for (std::int64_t ch = 0; ch < c; ++ch) {
            Real bias = bd[static_cast<std::size_t>(ch)];
            Real* p = out.data() + (bi * c + ch) * hw;
            for (std::int64_t i = 0; i < hw; ++i) p[i] += bias;
        }
    return Tensor<Real>::make_op("channel_bias_add", x.shape(), std::move(out), {x, b},
        [x, b](const Tensor<Real>& g, GradAccum<Real>& acc) {
            acc.add(x, g);
            acc.add(b, channel_sum(g));
        });
}

// ---------------------------------------------------------------------------
// Convolution (stride 1, zero padding) on [N,Ci,H,W] with kernels
// [Co,Ci,kh,kw]. Forward, input-gradient and kernel-gradient are three views
// of one trilinear form, and each one's backward rule is built from the other
// two, so the trio is closed under differentiation.
// ---------------------------------------------------------------------------

namespace detail {

template <typename Real>
inline void im2col(const Real* x, std::int64_t ci, std::int64_t h, std::int64_t w,
                   std::int64_t kh, std::int64_t kw, std::int64_t pad,
                   std::int64_t ho, std::int64_t wo, Real* cols) {
    // cols is [ci*kh*kw, ho*wo]
    for (std::int64_t c = 0; c < ci; ++c)
        for (std::int64_t r = 0; r < kh; ++r)
            for (std::int64_t s = 0; s < kw; ++s) {
                Real* dst = cols + ((c * kh + r) * kw + s) * (ho * wo);
                for (std::int64_t oy = 0; oy < ho; ++oy) {
                    std::int64_t iy = oy + r - pad;
                    if (iy < 0 || iy >= h) {
                        std::fill(dst + oy * wo, dst + (oy + 1) * wo, Real(0));
                        continue;
                    }
                    const Real* src_row = x + (c * h + iy) * w;
                    for (std::int64_t ox = 0; ox < wo; ++ox) {
                        std::int64_t ix = ox + s - pad;
                        dst[oy * wo + ox] = (ix >= 0 && ix < w) ? src_row[ix] : Real(0);
                    }
                }
            }
}

template <typename Real>
inline void col2im_accum(const Real* cols, std::int64_t ci, std::int64_t h, std::int64_t w,
                         std::int64_t kh, std::int64_t kw, std::int64_t pad,
                         std::int64_t ho, std::int64_t wo, Real* x) {
    for (std::int64_t c = 0; c < ci; ++c)
        for (std::int64_t r = 0; r < kh; ++r)
            for (std::int64_t s = 0; s < kw; ++s) {
                const Real* src = cols + ((c * kh + r) * kw + s) * (ho * wo);
                for (std::int64_t oy = 0; oy < ho; ++oy) {
                    std::int64_t iy = oy + r - pad;
                    if (iy < 0 || iy >= h) continue;
                    Real* dst_row = x + (c * h + iy) * w;
                    for (std::int64_t ox = 0; ox < wo; ++ox) {
                        std::int64_t ix = ox + s - pad;
                        if (ix >= 0 && ix < w) dst_row[ix] += src[oy * wo + ox];
                    }
                }
            }
}

struct ConvDims {
    std::int64_t n, ci, h, w, co, kh, kw, ho, wo;
};

template <typename Real>
inline ConvDims conv_dims(const char* op, const Shape& xs, const Shape& ks, std::int64_t pad) {
    if (xs.size() != 4) throw ShapeError(std::string(op) + ": input must be [N,C,H,W], got " + shape_str(xs));
    if (ks.size() != 4) throw ShapeError(std::string(op) + ": kernel must be [Co,Ci,kh,kw], got " + shape_str(ks));
    if (xs[1] != ks[1])
        throw ShapeError(std::string(op) + ": input channels " + std::to_string(xs[1]) +
                         " vs kernel channels " + std::to_string(ks[1]));
    ConvDims d{xs[0], xs[1], xs[2], xs[3], ks[0], ks[2], ks[3], 0, 0};
    d.ho = d.h + 2 * pad - d.kh + 1;
    d.wo = d.w + 2 * pad - d.kw + 1;
    if (d.ho <= 0 || d.wo <= 0)
        throw ShapeError(std::string(op) + ": kernel " + std::to_string(d.kh) + "x" + std::to_string(d.kw) +
                         " larger than padded input " + std::to_string(d.h + 2 * pad) + "x" +
                         std::to_string(d.w + 2 * pad));
    return d;
}

} // namespace detail

template <typename Real>
Tensor<Real> conv2d_input_grad(const Tensor<Real>& g, const Tensor<Real>& kernel,
                               std::int64_t pad, std::int64_t h, std::int64_t w);
template <typename Real>
Tensor<Real> conv2d_kernel_grad(const Tensor<Real>& x, const Tensor<Real>& g,
                                std::int64_t pad, std::int64_t kh, std::int64_t kw);

template <typename Real>
Tensor<Real> conv2d(const Tensor<Real>& x, const Tensor<Real>& kernel, std::int64_t pad) {
    auto d = detail::conv_dims<Real>("conv2d", x.shape(), kernel.shape(), pad);
    std::int64_t patch = d.ci * d.kh * d.kw, spatial = d.ho * d.wo;
    std::vector<Real> out(static_cast<std::size_t>(d.n * d.co * spatial), Real(0));
    std::vector<Real> cols(static_cast<std::size_t>(patch * spatial));
    for (std::int64_t b = 0; b < d.n; ++b) {
        detail::im2col(x.data().data() + b * d.ci * d.h * d.w, d.ci, d.h, d.w,
                       d.kh, d.kw, pad, d.ho, d.wo, cols.data());
        detail::matmul_accum_raw(kernel.data().data(), cols.data(),
                                 out.data() + b * d.co * spatial, d.co, patch, spatial);
    }
    auto dd = d;
    return Tensor<Real>::make_op("conv2d", {d.n, d.co, d.ho, d.wo}, std::move(out), {x, kernel},
        [x, kernel, pad, dd](const Tensor<Real>& g, GradAccum<Real>& acc) {
            acc.add(x, conv2d_input_grad(g, kernel, pad, dd.h, dd.w));
            acc.add(kernel, conv2d_kernel_grad(x, g, pad, dd.kh, dd.kw));
        });
}

/// Adjoint of conv2d with respect to the input: [N,Co,Ho,Wo] -> [N,Ci,H,W].
template <typename Real>
Tensor<Real> conv2d_input_grad(const Tensor<Real>& g, const Tensor<Real>& kernel,
                               std::int64_t pad, std::int64_t h, std::int64_t w) {
    detail::require_rank("conv2d_input_grad", g, 4);
    detail::require_rank("conv2d_input_grad", kernel, 4);
    std::int64_t n = g.dim(0), co = g.dim(1), ho = g.dim(2), wo = g.dim(3);
    std::int64_t ci = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
    if (kernel.dim(0) != co)
        throw ShapeError("conv2d_input_grad: grad channels " + std::to_string(co) +
                         " vs kernel output channels " + std::to_string(kernel.dim(0)));
    if (ho != h + 2 * pad - kh + 1 || wo != w + 2 * pad - kw + 1)
        throw ShapeError("conv2d_input_grad: grad spatial " + std::to_string(ho) + "x" + std::to_string(wo) +
                         " inconsistent with input " + std::to_string(h) + "x" + std::to_string(w));
    std::int64_t patch = ci * kh * kw, spatial = ho * wo;
    // kernel^T [patch, co]
    std::vector<Real> kt(static_cast<std::size_t>(patch * co));
    const auto& kd = kernel.data();
    for (std::int64_t o = 0; o < co; ++o)
        for (std::int64_t p = 0; p < patch; ++p) kt[p * co + o] = kd[o * patch + p];
    std::vector<Real> out(static_cast<std::size_t>(n * ci * h * w), Real(0));
    std::vector<Real> cols(static_cast<std::size_t>(patch * spatial), Real(0));
    for (std::int64_t b = 0; b < n; ++b) {
        std::fill(cols.begin(), cols.end(), Real(0));
        detail::matmul_accum_raw(kt.data(), g.data().data() + b * co * spatial, cols.data(),
                                 patch, co, spatial);
        detail::col2im_accum(cols.data(), ci, h, w, kh, kw, pad, ho, wo,
                             out.data() + b * ci * h * w);
    }
    return Tensor<Real>::make_op("conv2d_input_grad", {n, ci, h, w}, std::move(out), {g, kernel},
        [g, kernel, pad](const Tensor<Real>& u, GradAccum<Real>& acc) {
            acc.add(g, conv2d(u, kernel, pad));
            acc.add(kernel, conv2d_kernel_grad(u, g, pad, kernel.dim(2), kernel.dim(3)));
        });
}

/// Adjoint of conv2d with respect to the kernel: accumulates [Co,Ci,kh,kw].
template <typename Real>
Tensor<Real> conv2d_kernel_grad(const Tensor<Real>& x, const Tensor<Real>& g,
                                std::int64_t pad, std::int64_t kh, std::int64_t kw) {
    detail::require_rank("conv2d_kernel_grad", x, 4);
    detail::require_rank("conv2d_kernel_grad", g, 4);
    std::int64_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
    std::int64_t co = g.dim(1), ho = g.dim(2), wo = g.dim(3);
    if (g.dim(0) != n)
        throw ShapeError("conv2d_kernel_grad: batch dims " + std::to_string(n) + " vs " +
                         std::to_string(g.dim(0)));
    if (ho != h + 2 * pad - kh + 1 || wo != w + 2 * pad - kw + 1)
        throw ShapeError("conv2d_kernel_grad: grad spatial " + std::to_string(ho) + "x" + std::to_string(wo) +
                         " inconsistent with input " + std::to_string(h) + "x" + std::to_string(w));
    std::int64_t patch = ci * kh * kw, spatial = ho * wo;
    std::vector<Real> out(static_cast<std::size_t>(co * patch), Real(0));
    std::vector<Real> cols(static_cast<std::size_t>(patch * spatial));
    std::vector<Real> colsT(static_cast<std::size_t>(spatial * patch));
    for (std::int64_t b = 0; b < n; ++b) {
        detail::im2col(x.data().data() + b * ci * h * w, ci, h, w, kh, kw, pad, ho, wo, cols.data());
        for (std::int64_t p = 0; p < patch; ++p)
            for (std::int64_t s = 0; s < spatial; ++s) colsT[s * patch + p] = cols[p * spatial + s];
        detail::matmul_accum_raw(g.data().data() + b * co * spatial, colsT.data(), out.data(),
                                 co, spatial, patch);
    }
    return Tensor<Real>::make_op("conv2d_kernel_grad", {co, ci, kh, kw}, std::move(out), {x, g},
        [x, g, pad, kh, kw](const Tensor<Real>& u, GradAccum<Real>& acc) {
            acc.add(x, conv2d_input_grad(g, u, pad, x.dim(2), x.dim(3)));
            acc.add(g, conv2d(x, u, pad));
        });
}

// ---------------------------------------------------------------------------
// 2x2 max pooling, floor semantics (trailing odd row/column dropped). Ties go
// to the first maximal element in scan order.
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> maxpool_scatter(const Tensor<Real>& g, std::shared_ptr<const std::vector<std::int64_t>> idx,
                             Shape in_shape);
template <typename Real>
Tensor<Real> maxpool_gather(const Tensor<Real>& u, std::shared_ptr<const std::vector<std::int64_t>> idx,
                            Shape out_shape);

template <typename Real>
Tensor<Real> maxpool2x2(const Tensor<Real>& x) {
    detail::require_rank("maxpool2x2", x, 4);
    std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    std::int64_t ho = h / 2, wo = w / 2;
    if (ho == 0 || wo == 0)
        throw ShapeError("maxpool2x2: input spatial " + std::to_string(h) + "x" + std::to_string(w) +
                         " too small for a 2x2 window");
    std::vector<Real> out(static_cast<std::size_t>(n * c * ho * wo));
    auto idx = std::make_shared<std::vector<std::int64_t>>(out.size());
    const Real* xd = x.data().data();
    std::size_t o = 0;
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const Real* plane = xd + (b * c + ch) * h * w;
            std::int64_t base = (b * c + ch) * h * w;
            for (std::int64_t oy = 0; oy < ho; ++oy)
                for (std::int64_t ox = 0; ox < wo; ++ox, ++o) {
                    std::int64_t best_off = (2 * oy) * w + 2 * ox;
                    Real best = plane[best_off];
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                            std::int64_t off = (2 * oy + dy) * w + (2 * ox + dx);
                            if (plane[off] > best) {
                                best = plane[off];
                                best_off = off;
                            }
                        }
                    out[o] = best;
                    (*idx)[o] = base + best_off;
                }
        }
    Shape in_shape = x.shape();
    std::shared_ptr<const std::vector<std::int64_t>> cidx = idx;
    return Tensor<Real>::make_op("maxpool2x2", {n, c, ho, wo}, std::move(out), {x},
        [x, cidx, in_shape](const Tensor<Real>& g, GradAccum<Real>& acc) {
            acc.add(x, maxpool_scatter(g, cidx, in_shape));
        });
}

/// Routes pooled gradients back to their argmax positions.
template <typename Real>
Tensor<Real> maxpool_scatter(const Tensor<Real>& g, std::shared_ptr<const std::vector<std::int64_t>> idx,
                             Shape in_shape) {
    if (g.data().size() != idx->size())
        throw ShapeError("maxpool_scatter: grad size " + std::to_string(g.data().size()) +
                         " vs index count " + std::to_string(idx->size()));
    std::vector<Real> out(static_cast<std::size_t>(shape_numel(in_shape)), Real(0));
    const auto& gd = g.data();
    for (std::size_t i = 0; i < gd.size(); ++i) out[static_cast<std::size_t>((*idx)[i])] += gd[i];
    Shape out_shape = g.shape();
    return Tensor<Real>::make_op("maxpool_scatter", std::move(in_shape), std::move(out), {g},
        [g, idx, out_shape](const Tensor<Real>& u, GradAccum<Real>& acc) {
            acc.add(g, maxpool_gather(u, idx, out_shape));
        });
}

/// Adjoint of maxpool_scatter: picks values at the recorded positions.
template <typename Real>
Tensor<Real> maxpool_gather(const Tensor<Real>& u, std::shared_ptr<const std::vector<std::int64_t>> idx,
                            Shape out_shape) {
    std::vector<Real> out(idx->size());
    const auto& ud = u.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ud[static_cast<std::size_t>((*idx)[i])];
    Shape in_shape = u.shape();
    return Tensor<Real>::make_op("maxpool_gather", std::move(out_shape), std::move(out), {u},
        [u, idx, in_shape](const Tensor<Real>& g, GradAccum<Real>& acc) {
            acc.add(u, maxpool_scatter(g, idx, in_shape));
        });
}

// ---------------------------------------------------------------------------
// Mode-n matricization of a 3-mode tensor (adjoint pair of permutations).
// Remaining modes keep their original order in the columns.
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> dematricize3(const Tensor<Real>& m, int mode, Shape target);

template <typename Real>
Tensor<Real> matricize3(const Tensor<Real>& t, int mode) {
    detail::require_rank("matricize3", t, 3);
    if (mode < 0 || mode > 2) throw ContractError("matricize3: mode must be 0, 1 or 2");
    std::int64_t d0 = t.dim(0), d1 = t.dim(1), d2 = t.dim(2);
    const auto& td = t.data();
    std::vector<Real> out(td.size());
    std::int64_t rows = t.dim(static_cast<std::size_t>(mode));
    std::int64_t cols = (d0 * d1 * d2) / rows;
    for (std::int64_t i = 0; i < d0; ++i)
        for (std::int64_t j = 0; j < d1; ++j)
            for (std::int64_t k = 0; k < d2; ++k) {
                std::int64_t src = (i * d1 + j) * d2 + k;
                std::int64_t r, c;
                if (mode == 0) { r = i; c = j * d2 + k; }
                else if (mode == 1) { r = j; c = i * d2 + k; }
                else { r = k; c = i * d1 + j; }
                out[static_cast<std::size_t>(r * cols + c)] = td[static_cast<std::size_t>(src)];
            }
    Shape orig = t.shape();
    return Tensor<Real>::make_op("matricize3", {rows, cols}, std::move(out), {t},
        [t, mode, orig](const Tensor<Real>& g, GradAccum<Real>& acc) {
            acc.add(t, dematricize3(g, mode, orig));
        });
}

template <typename Real>
Tensor<Real> dematricize3(const Tensor<Real>& m, int mode, Shape target) {
    detail::require_rank("dematricize3", m, 2);
    if (target.size() != 3) throw ShapeError("dematricize3: target must be rank 3, got " + shape_str(target));
    if (mode < 0 || mode > 2) throw ContractError("dematricize3: mode must be 0, 1 or 2");
    if (m.numel() != shape_numel(target) || m.dim(0) != target[static_cast<std::size_t>(mode)])
        throw ShapeError("dematricize3: matrix " + shape_str(m.shape()) + " cannot fill " + shape_str(target) +
                         " along mode " + std::to_string(mode));
    std::int64_t d0 = target[0], d1 = target[1], d2 = target[2];
    std::int64_t cols = m.dim(1);
    const auto& md = m.data();
    std::vector<Real> out(md.size());
    for (std::int64_t i = 0; i < d0; ++i)
        for (std::int64_t j = 0; j < d1; ++j)
            for (std::int64_t k = 0; k < d2; ++k) {
                std::int64_t r, c;
                if (mode == 0) { r = i; c = j * d2 + k; }
                else if (mode == 1) { r = j; c = i * d2 + k; }
                else { r = k; c = i * d1 + j; }
                out[static_cast<std::size_t>((i * d1 + j) * d2 + k)] = md[static_cast<std::size_t>(r * cols + c)];
            }
    return Tensor<Real>::make_op("dematricize3", std::move(target), std::move(out), {m},
        [m, mode](const Tensor<Real>& g, GradAccum<Real>& acc) {
            acc.add(m, matricize3(g, mode));
        });
}

} // namespace fewshot::ops
