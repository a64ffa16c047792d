#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fewshot/functional.hpp"

// Prototype construction and distance-softmax classification.

namespace fewshot {

enum class Distance { squared, unsquared };

template <typename Real>
struct Prototypes {
    Tensor<Real> vectors;                // [C, embed_dim]
    std::vector<std::int64_t> class_ids; // episode-local ids, length C
};

/// Per-class mean of support embeddings. Classes may have unequal counts
/// (RDFT sub-supports do), but every class in 0..C-1 needs at least one
/// sample. Implemented as a constant averaging matrix times the embeddings so
/// the whole thing is one differentiable matmul.
template <typename Real>
Prototypes<Real> compute_prototypes(const Tensor<Real>& support_embeddings,
                                    const std::vector<std::int64_t>& support_labels,
                                    std::int64_t num_classes) {
    if (support_embeddings.shape().size() != 2)
        throw ShapeError("compute_prototypes: embeddings must be [M,D], got " +
                         shape_str(support_embeddings.shape()));
    std::int64_t m = support_embeddings.dim(0);
    if (static_cast<std::int64_t>(support_labels.size()) != m)
        throw ShapeError("compute_prototypes: " + std::to_string(support_labels.size()) +
                         " labels for " + std::to_string(m) + " embeddings");
    if (num_classes < 2)
        throw ContractError("compute_prototypes: need at least 2 classes, got " +
                            std::to_string(num_classes));
    std::vector<std::int64_t> counts(static_cast<std::size_t>(num_classes), 0);
    for (std::int64_t i = 0; i < m; ++i) {
        std::int64_t y = support_labels[static_cast<std::size_t>(i)];
        if (y < 0 || y >= num_classes)
            throw ContractError("compute_prototypes: label " + std::to_string(y) +
                                " outside [0," + std::to_string(num_classes) + ")");
        ++counts[static_cast<std::size_t>(y)];
    }
    for (std::int64_t k = 0; k < num_classes; ++k)
        if (counts[static_cast<std::size_t>(k)] == 0)
            throw ContractError("compute_prototypes: class " + std::to_string(k) + " has no support samples");
    std::vector<Real> avg(static_cast<std::size_t>(num_classes * m), Real(0));
    for (std::int64_t i = 0; i < m; ++i) {
        std::int64_t y = support_labels[static_cast<std::size_t>(i)];
        avg[static_cast<std::size_t>(y * m + i)] =
            Real(1) / static_cast<Real>(counts[static_cast<std::size_t>(y)]);
    }
    Prototypes<Real> p;
    p.vectors = ops::matmul(Tensor<Real>::constant({num_classes, m}, std::move(avg)), support_embeddings);
    p.class_ids.resize(static_cast<std::size_t>(num_classes));
    for (std::int64_t k = 0; k < num_classes; ++k) p.class_ids[static_cast<std::size_t>(k)] = k;
    return p;
}

/// Log probabilities [M,C]: softmax over negated distances to the prototypes.
template <typename Real>
Tensor<Real> classify(const Tensor<Real>& query_embeddings, const Prototypes<Real>& prototypes,
                      Distance distance = Distance::squared) {
    auto d = distance == Distance::squared
                 ? ops::pairwise_sqdist(query_embeddings, prototypes.vectors)
                 : ops::pairwise_dist(query_embeddings, prototypes.vectors);
    return ops::log_softmax(ops::scale(d, Real(-1)));
}

/// Mean cross-entropy over the query rows.
template <typename Real>
Tensor<Real> episode_loss(const Tensor<Real>& log_probs, const std::vector<std::int64_t>& labels) {
    return ops::nll_loss(log_probs, labels);
}

/// Fraction of rows whose argmax matches the label; ties break to the lowest
/// class index.
template <typename Real>
double episode_accuracy(const Tensor<Real>& log_probs, const std::vector<std::int64_t>& labels) {
    if (log_probs.shape().size() != 2)
        throw ShapeError("episode_accuracy: log_probs must be [M,C], got " + shape_str(log_probs.shape()));
    std::int64_t m = log_probs.dim(0), c = log_probs.dim(1);
    if (static_cast<std::int64_t>(labels.size()) != m)
        throw ShapeError("episode_accuracy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(m) + " rows");
    if (m == 0) throw ContractError("episode_accuracy: empty query set");
    std::int64_t correct = 0;
    const auto& d = log_probs.data();
    for (std::int64_t i = 0; i < m; ++i) {
        std::int64_t y = labels[static_cast<std::size_t>(i)];
        if (y < 0 || y >= c)
            throw ContractError("episode_accuracy: label " + std::to_string(y) + " outside [0," +
                                std::to_string(c) + ")");
        std::int64_t best = 0;
        for (std::int64_t j = 1; j < c; ++j)
            if (d[static_cast<std::size_t>(i * c + j)] > d[static_cast<std::size_t>(i * c + best)]) best = j;
        if (best == y) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(m);
}

} // namespace fewshot
