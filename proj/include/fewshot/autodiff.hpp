#pragma once

#include <algorithm>
#include <functional>
#include <unordered_set>
#include <vector>

#include "fewshot/ops.hpp"

namespace fewshot {

struct BackwardOptions {
    // When set, the gradient expressions built during the sweep are recorded
    // themselves, so the returned gradients can be differentiated again.
    bool create_second_order = false;
};

/// Reverse-mode sweep from a recorded scalar. Returns gradients for every
/// requires-grad leaf reachable from `loss`, plus any explicitly requested
/// intermediate values in `wrt`. The graph is not mutated, so concurrent
/// sweeps over shared parameters are safe.
template <typename Real>
GradTable<Real> backward(const Tensor<Real>& loss, const BackwardOptions& opt = {},
                         const std::vector<Tensor<Real>>& wrt = {}) {
    if (!loss.defined() || loss.numel() != 1)
        throw ContractError("backward: loss must be a defined scalar, got " +
                            (loss.defined() ? shape_str(loss.shape()) : std::string("an empty tensor")));
    if (!loss.requires_grad() || loss.is_leaf())
        throw ContractError("backward: loss was not produced by recorded operations");

    using NodeT = detail::Node<Real>;
    // Collect the reachable requires-grad subgraph. Parents lists already
    // contain only requires-grad inputs.
    std::vector<const NodeT*> nodes;
    {
        std::unordered_set<const NodeT*> seen;
        std::vector<const NodeT*> stack{loss.node()};
        seen.insert(loss.node());
        while (!stack.empty()) {
            const NodeT* n = stack.back();
            stack.pop_back();
            nodes.push_back(n);
            for (const auto& p : n->parents)
                if (seen.insert(p.get()).second) stack.push_back(p.get());
        }
    }
    // A node is created after all of its inputs, so descending creation order
    // is a reverse topological order — and it is identical across runs.
    std::sort(nodes.begin(), nodes.end(),
              [](const NodeT* a, const NodeT* b) { return a->seq > b->seq; });

    GradAccum<Real> accum;
    accum.seed(loss.node(), Tensor<Real>::full(loss.shape(), Real(1)));

    {
        RecordingScope rec(opt.create_second_order);
        for (const NodeT* n : nodes) {
            if (!n->backward) continue;
            const Tensor<Real>* found = accum.find(n);
            if (!found) continue; // pruned: no path carried gradient here
            Tensor<Real> g = *found; // copy the handle; accum may rehash below
            n->backward(g, accum);
        }
    }

    GradTable<Real> table;
    for (const NodeT* n : nodes) {
        if (n->backward || !n->requires_grad) continue;
        if (const Tensor<Real>* g = accum.find(n)) table.set_raw(n, *g);
    }
    for (const auto& t : wrt)
        if (t.defined())
            if (const Tensor<Real>* g = accum.find(t.node())) table.set_raw(t.node(), *g);
    return table;
}

template <typename Real>
GradTable<Real> backward(const Tensor<Real>& loss, const std::vector<Tensor<Real>>& wrt) {
    return backward(loss, BackwardOptions{}, wrt);
}

/// Central-difference gradient of a scalar function, the reference that
/// recorded gradients are checked against.
inline std::vector<double> finite_difference_gradient(
    const std::function<double(const std::vector<double>&)>& f,
    std::vector<double> at, double epsilon = 1e-5) {
    if (epsilon <= 0) throw ContractError("finite_difference_gradient: epsilon must be positive");
    std::vector<double> grad(at.size());
    for (std::size_t i = 0; i < at.size(); ++i) {
        double saved = at[i];
        at[i] = saved + epsilon;
        double hi = f(at);
        at[i] = saved - epsilon;
        double lo = f(at);
        at[i] = saved;
        grad[i] = (hi - lo) / (2 * epsilon);
    }
    return grad;
}

} // namespace fewshot
