#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "fewshot/errors.hpp"

namespace fewshot {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

template <typename Real>
class Tensor;

template <typename Real>
class GradAccum;

namespace ops {
template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b);
} // namespace ops

namespace detail {

// Thread-local recording switch. Each worker thread builds its own graph, so
// a thread_local flag is all the isolation the concurrency model needs.
inline thread_local bool t_recording = true;

// Monotone creation counter. A parent is always fully constructed before any
// node that consumes it, so descending-seq order is a valid reverse
// topological order, and the relative order of nodes created by one thread
// does not depend on scheduling.
inline std::atomic<std::uint64_t> g_node_seq{0};

template <typename Real>
struct Node {
    std::vector<Real> data;
    Shape shape;
    bool requires_grad = false;
    const char* op = "leaf";
    std::uint64_t seq = 0;
    // Inputs that carry requires_grad; drives the backward traversal.
    std::vector<std::shared_ptr<Node>> parents;
    // Given d(loss)/d(this node), accumulate contributions into the parents.
    // Implemented with recorded ops so gradients stay differentiable when a
    // second-order sweep asks for it.
    std::function<void(const Tensor<Real>&, GradAccum<Real>&)> backward;
};

} // namespace detail

inline bool recording_enabled() { return detail::t_recording; }

// Disables graph recording for the current scope (forward-only evaluation,
// detached gradients).
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::t_recording) { detail::t_recording = false; }
    ~NoGradGuard() { detail::t_recording = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Sets recording to an explicit value for the current scope. backward() uses
// this to decide whether the gradient expressions it builds are themselves
// recorded (second order) or plain arrays (first order).
class RecordingScope {
public:
    explicit RecordingScope(bool enable) : prev_(detail::t_recording) { detail::t_recording = enable; }
    ~RecordingScope() { detail::t_recording = prev_; }
    RecordingScope(const RecordingScope&) = delete;
    RecordingScope& operator=(const RecordingScope&) = delete;

private:
    bool prev_;
};

/// Value handle into the computation graph. Copies share the underlying node.
template <typename Real>
class Tensor {
public:
    using NodeT = detail::Node<Real>;

    Tensor() = default;

    static Tensor leaf(Shape shape, std::vector<Real> data, bool requires_grad) {
        check_size(shape, data.size());
        return Tensor(make_node(std::move(shape), std::move(data), requires_grad, "leaf"));
    }

    static Tensor constant(Shape shape, std::vector<Real> data) {
        return leaf(std::move(shape), std::move(data), false);
    }

    static Tensor full(Shape shape, Real value, bool requires_grad = false) {
        std::vector<Real> d(static_cast<std::size_t>(shape_numel(shape)), value);
        return leaf(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), Real(0), requires_grad);
    }

    static Tensor scalar(Real value, bool requires_grad = false) {
        return leaf(Shape{}, std::vector<Real>{value}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::int64_t numel() const { return static_cast<std::int64_t>(node_->data.size()); }
    std::int64_t dim(std::size_t i) const { return node_->shape.at(i); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool is_leaf() const { return node_->parents.empty() && !node_->backward; }
    const char* op_name() const { return node_->op; }
    std::uint64_t seq() const { return node_->seq; }

    const std::vector<Real>& data() const { return node_->data; }
    // In-place access for initializers and tests. Mutating a node that other
    // recorded nodes already consumed invalidates their saved values.
    std::vector<Real>& mutable_data() { return node_->data; }

    Real item() const {
        if (numel() != 1)
            throw ContractError("item() on non-scalar tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }

    /// Plain copy with no graph history.
    Tensor detach() const {
        return constant(node_->shape, node_->data);
    }

    bool all_finite() const {
        for (Real v : node_->data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    const NodeT* node() const { return node_.get(); }
    const std::shared_ptr<NodeT>& node_ptr() const { return node_; }

    // Graph-construction entry point used by the ops layer. Records parents
    // and a backward rule only when recording is on and an input needs grad.
    static Tensor make_op(const char* op, Shape shape, std::vector<Real> data,
                          const std::vector<Tensor>& inputs,
                          std::function<void(const Tensor&, GradAccum<Real>&)> backward) {
        check_size(shape, data.size());
        auto node = make_node(std::move(shape), std::move(data), false, op);
        bool track = recording_enabled();
        bool any_grad = false;
        if (track) {
            for (const auto& in : inputs)
                if (in.requires_grad()) {
                    any_grad = true;
                    node->parents.push_back(in.node_);
                }
        }
        if (track && any_grad) {
            node->requires_grad = true;
            node->backward = std::move(backward);
        }
        return Tensor(std::move(node));
    }

private:
    explicit Tensor(std::shared_ptr<NodeT> n) : node_(std::move(n)) {}

    static void check_size(const Shape& shape, std::size_t n) {
        if (static_cast<std::int64_t>(n) != shape_numel(shape))
            throw ShapeError("tensor data size " + std::to_string(n) +
                             " does not match shape " + shape_str(shape));
    }

    static std::shared_ptr<NodeT> make_node(Shape shape, std::vector<Real> data, bool rg, const char* op) {
        auto node = std::make_shared<NodeT>();
        node->shape = std::move(shape);
        node->data = std::move(data);
        node->requires_grad = rg;
        node->op = op;
        node->seq = detail::g_node_seq.fetch_add(1, std::memory_order_relaxed);
        return node;
    }

    std::shared_ptr<NodeT> node_;
};

/// Gradients keyed by graph node, as produced by backward().
template <typename Real>
class GradTable {
public:
    bool contains(const Tensor<Real>& t) const { return grads_.count(t.node()) != 0; }

    const Tensor<Real>& at(const Tensor<Real>& t) const {
        auto it = grads_.find(t.node());
        if (it == grads_.end())
            throw ContractError("no gradient recorded for the requested tensor");
        return it->second;
    }

    void set(const Tensor<Real>& t, Tensor<Real> grad) { grads_[t.node()] = std::move(grad); }
    // Node-keyed insertion for backward(), which walks raw graph nodes.
    void set_raw(const detail::Node<Real>* n, Tensor<Real> grad) { grads_[n] = std::move(grad); }
    std::size_t size() const { return grads_.size(); }

private:
    std::unordered_map<const detail::Node<Real>*, Tensor<Real>> grads_;
};

// Accumulates parent contributions during one backward sweep. Uses the
// recorded add op, so in a second-order sweep the running sums are themselves
// differentiable values.
template <typename Real>
class GradAccum {
public:
    void add(const Tensor<Real>& parent, const Tensor<Real>& contribution) {
        if (!parent.requires_grad()) return;
        if (contribution.shape() != parent.shape())
            throw ShapeError(std::string("gradient contribution shape ") + shape_str(contribution.shape()) +
                             " does not match parent shape " + shape_str(parent.shape()));
        auto it = map_.find(parent.node());
        if (it == map_.end())
            map_.emplace(parent.node(), contribution);
        else
            it->second = ops::add(it->second, contribution);
    }

    bool contains(const detail::Node<Real>* n) const { return map_.count(n) != 0; }

    const Tensor<Real>* find(const detail::Node<Real>* n) const {
        auto it = map_.find(n);
        return it == map_.end() ? nullptr : &it->second;
    }

    void seed(const detail::Node<Real>* n, Tensor<Real> g) { map_.emplace(n, std::move(g)); }

private:
    std::unordered_map<const detail::Node<Real>*, Tensor<Real>> map_;
};

} // namespace fewshot
