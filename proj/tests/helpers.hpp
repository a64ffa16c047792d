#pragma once

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <vector>

#include "fewshot/autodiff.hpp"
#include "fewshot/rng.hpp"

namespace testutil {

using fewshot::Shape;
using fewshot::Tensor;

// Relative error with a floor so near-zero gradients are compared absolutely.
inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-4});
}

inline std::vector<double> random_vec(fewshot::Rng& rng, std::size_t n, double lo, double hi) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return v;
}

inline std::vector<double> random_normal_vec(fewshot::Rng& rng, std::size_t n, double scale = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = scale * rng.normal();
    return v;
}

/// Checks recorded gradients of a scalar-valued function against central
/// finite differences. `loss_fn` receives one leaf per shape; `flat` holds the
/// concatenated initial values.
inline void require_grad_matches_fd(
    const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& loss_fn,
    const std::vector<Shape>& shapes, const std::vector<double>& flat,
    double tol = 1e-4, double eps = 1e-5) {
    auto build = [&](const std::vector<double>& values, bool rg) {
        std::vector<Tensor<double>> leaves;
        std::size_t off = 0;
        for (const auto& s : shapes) {
            std::size_t n = static_cast<std::size_t>(fewshot::shape_numel(s));
            leaves.push_back(Tensor<double>::leaf(
                s, std::vector<double>(values.begin() + off, values.begin() + off + n), rg));
            off += n;
        }
        REQUIRE(off == values.size());
        return leaves;
    };

    auto leaves = build(flat, true);
    auto loss = loss_fn(leaves);
    auto grads = fewshot::backward(loss);

    auto eval = [&](const std::vector<double>& values) {
        fewshot::NoGradGuard ng;
        return loss_fn(build(values, false)).item();
    };
    auto fd = fewshot::finite_difference_gradient(eval, flat, eps);

    std::size_t off = 0;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        const auto& g = grads.at(leaves[li]).data();
        for (std::size_t i = 0; i < g.size(); ++i, ++off) {
            INFO("leaf " << li << " element " << i << ": analytic " << g[i] << " vs fd " << fd[off]);
            REQUIRE(rel_err(g[i], fd[off]) < tol);
        }
    }
}

} // namespace testutil
