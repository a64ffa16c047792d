#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "fewshot/ops.hpp"

// Composite layers assembled from the primitive operators. Nothing here has a
// hand-written backward rule; differentiation (first and second order) comes
// from the pieces.

namespace fewshot::ops {

template <typename Real>
Tensor<Real> mean_all(const Tensor<Real>& a) {
    if (a.numel() == 0) throw ShapeError("mean_all: empty tensor");
    return scale(sum_all(a), Real(1) / static_cast<Real>(a.numel()));
}

/// sum((a - b)^2), a scalar.
template <typename Real>
Tensor<Real> sum_squared_diff(const Tensor<Real>& a, const Tensor<Real>& b) {
    detail::require_same_shape("sum_squared_diff", a, b);
    auto d = sub(a, b);
    return sum_all(mul(d, d));
}

/// Batch norm over [N,C,H,W] with per-channel affine parameters. Statistics
/// are always computed from the batch at hand — episodes are small and each
/// one is its own distribution, so no running averages exist anywhere.
template <typename Real>
Tensor<Real> batch_norm(const Tensor<Real>& x, const Tensor<Real>& gamma,
                        const Tensor<Real>& beta, Real eps = Real(1e-5)) {
    detail::require_rank("batch_norm", x, 4);
    if (gamma.shape() != Shape{x.dim(1)} || beta.shape() != Shape{x.dim(1)})
        throw ShapeError("batch_norm: affine params " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " for " + std::to_string(x.dim(1)) + " channels");
    Real count = static_cast<Real>(x.dim(0) * x.dim(2) * x.dim(3));
    auto mean = scale(channel_sum(x), Real(1) / count);
    auto xc = sub(x, channel_broadcast(mean, x.shape()));
    auto var = scale(channel_sum(mul(xc, xc)), Real(1) / count);
    auto inv = rsqrt(shift(var, eps));
    auto xhat = mul(xc, channel_broadcast(inv, x.shape()));
    return channel_bias_add(mul(xhat, channel_broadcast(gamma, x.shape())), beta);
}

/// Row-wise log-softmax of [M,C]. The max shift is a piecewise-constant
/// quantity, so treating it as a constant leaves gradients exact while keeping
/// exp() in a safe range.
template <typename Real>
Tensor<Real> log_softmax(const Tensor<Real>& a) {
    detail::require_rank("log_softmax", a, 2);
    std::int64_t m = a.dim(0), c = a.dim(1);
    if (c == 0) throw ShapeError("log_softmax: zero classes");
    std::vector<Real> mx(static_cast<std::size_t>(m));
    const auto& ad = a.data();
    for (std::int64_t i = 0; i < m; ++i) {
        Real best = ad[static_cast<std::size_t>(i * c)];
        for (std::int64_t j = 1; j < c; ++j) best = std::max(best, ad[static_cast<std::size_t>(i * c + j)]);
        mx[static_cast<std::size_t>(i)] = best;
    }
    auto mx_const = Tensor<Real>::constant(Shape{m}, std::move(mx));
    auto shifted = sub(a, repeat_cols(mx_const, c));
    auto log_z = add(log_op(sum_axis1(exp_op(shifted))), mx_const);
    return sub(a, repeat_cols(log_z, c));
}

/// Mean negative log-likelihood of the labelled entries of [M,C] log
/// probabilities.
template <typename Real>
Tensor<Real> nll_loss(const Tensor<Real>& log_probs, const std::vector<std::int64_t>& labels) {
    detail::require_rank("nll_loss", log_probs, 2);
    std::int64_t m = log_probs.dim(0), c = log_probs.dim(1);
    if (static_cast<std::int64_t>(labels.size()) != m)
        throw ShapeError("nll_loss: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(m) + " rows");
    std::vector<Real> onehot(static_cast<std::size_t>(m * c), Real(0));
    for (std::int64_t i = 0; i < m; ++i) {
        std::int64_t y = labels[static_cast<std::size_t>(i)];
        if (y < 0 || y >= c)
            throw ContractError("nll_loss: label " + std::to_string(y) + " at row " + std::to_string(i) +
                                " outside [0," + std::to_string(c) + ")");
        onehot[static_cast<std::size_t>(i * c + y)] = Real(1);
    }
    auto mask = Tensor<Real>::constant({m, c}, std::move(onehot));
    return scale(sum_all(mul(log_probs, mask)), Real(-1) / static_cast<Real>(m));
}

/// Squared Euclidean distances between rows: [M,D] x [C,D] -> [M,C].
template <typename Real>
Tensor<Real> pairwise_sqdist(const Tensor<Real>& q, const Tensor<Real>& p) {
    detail::require_rank("pairwise_sqdist", q, 2);
    detail::require_rank("pairwise_sqdist", p, 2);
    if (q.dim(1) != p.dim(1))
        throw ShapeError("pairwise_sqdist: feature dims " + std::to_string(q.dim(1)) + " and " +
                         std::to_string(p.dim(1)) + " differ");
    auto qs = sum_axis1(mul(q, q));
    auto ps = sum_axis1(mul(p, p));
    auto cross = matmul(q, transpose(p));
    return sub(add(repeat_cols(qs, p.dim(0)), repeat_rows(ps, q.dim(0))), scale(cross, Real(2)));
}

/// Unsquared variant; clamps the tiny negatives that cancellation can produce
/// and offsets by 1e-12 so the square root stays differentiable.
template <typename Real>
Tensor<Real> pairwise_dist(const Tensor<Real>& q, const Tensor<Real>& p) {
    return sqrt_op(shift(relu(pairwise_sqdist(q, p)), Real(1e-12)));
}

/// y = M v for a [m,n] matrix and length-n vector.
template <typename Real>
Tensor<Real> matvec(const Tensor<Real>& m, const Tensor<Real>& v) {
    detail::require_rank("matvec", m, 2);
    detail::require_rank("matvec", v, 1);
    if (m.dim(1) != v.dim(0))
        throw ShapeError("matvec: matrix " + shape_str(m.shape()) + " times vector " + shape_str(v.shape()));
    return reshape(matmul(m, reshape(v, {v.dim(0), std::int64_t(1)})), {m.dim(0)});
}

/// Mode-n product of a 3-mode tensor with a matrix: contracts dimension
/// `mode` of g against the columns of m.
template <typename Real>
Tensor<Real> mode_n_product(const Tensor<Real>& g, const Tensor<Real>& m, int mode) {
    detail::require_rank("mode_n_product", g, 3);
    detail::require_rank("mode_n_product", m, 2);
    if (mode < 0 || mode > 2) throw ContractError("mode_n_product: mode must be 0, 1 or 2");
    if (m.dim(1) != g.dim(static_cast<std::size_t>(mode)))
        throw ShapeError("mode_n_product: matrix columns " + std::to_string(m.dim(1)) +
                         " vs tensor mode-" + std::to_string(mode) + " extent " +
                         std::to_string(g.dim(static_cast<std::size_t>(mode))));
    Shape target = g.shape();
    target[static_cast<std::size_t>(mode)] = m.dim(0);
    return dematricize3(matmul(m, matricize3(g, mode)), mode, std::move(target));
}

} // namespace fewshot::ops
