#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "fewshot/encoder.hpp"
#include "fewshot/episodes.hpp"
#include "fewshot/metrics.hpp"
#include "fewshot/parallel.hpp"
#include "fewshot/protonet.hpp"

// Inner-loop adaptation (RDFT), the Meta-Curvature gradient transform, the
// episodic meta training step, evaluation with and without fine-tuning, and
// the learning-rate x step-count sweep.

namespace fewshot {

enum class Algorithm { protonet, maml_proto, mc_proto };
enum class GradOrder { first, second };
enum class MetaOptimizer { sgd, adam };

struct MetaConfig {
    double alpha = 0.2;     // inner learning rate
    double beta = 1e-3;     // meta learning rate
    std::int64_t steps = 8; // inner fine-tune step count n
    std::int64_t way = 5;
    std::int64_t shot = 5;
    std::int64_t query = 5;
    std::int64_t meta_batch = 16;
    GradOrder order = GradOrder::second;
    Algorithm algorithm = Algorithm::protonet;
    Distance distance = Distance::squared;
    MetaOptimizer meta_optimizer = MetaOptimizer::adam;
    bool test_time_curvature = true; // use learned curvature during test-time RDFT

    void validate(bool finetuning_enabled) const {
        if (alpha <= 0) throw ConfigError("alpha must be positive, got " + std::to_string(alpha));
        if (beta <= 0) throw ConfigError("beta must be positive, got " + std::to_string(beta));
        if (steps < 1) throw ConfigError("steps must be at least 1, got " + std::to_string(steps));
        if (way < 2) throw ConfigError("way must be at least 2, got " + std::to_string(way));
        if (shot < 1 || query < 1) throw ConfigError("shot and query must be at least 1");
        if (meta_batch < 1) throw ConfigError("meta_batch must be at least 1");
        if (finetuning_enabled && shot < 2)
            throw ConfigError("fine-tuning requires shot >= 2 (one column must rotate out); got shot = " +
                              std::to_string(shot));
    }
};

// ---------------------------------------------------------------------------
// Meta-Curvature
// ---------------------------------------------------------------------------

template <typename Real>
struct CurvatureEntry {
    // 4-D kernels use the triple (mo, mi, mf) over [C_out, C_in, h*w];
    // 2-D tensors use (mo, mi); 1-D tensors use the single matrix mb.
    Tensor<Real> mo, mi, mf, mb;
};

template <typename Real>
struct CurvatureSet {
    std::vector<CurvatureEntry<Real>> entries; // parallel to named_params order
    std::vector<std::string> names;

    std::vector<NamedParam<Real>> matrices() {
        std::vector<NamedParam<Real>> out;
        for (std::size_t i = 0; i < entries.size(); ++i) {
            auto& e = entries[i];
            if (e.mo.defined()) out.push_back({names[i] + ".mo", &e.mo});
            if (e.mi.defined()) out.push_back({names[i] + ".mi", &e.mi});
            if (e.mf.defined()) out.push_back({names[i] + ".mf", &e.mf});
            if (e.mb.defined()) out.push_back({names[i] + ".mb", &e.mb});
        }
        return out;
    }

    std::vector<NamedParamConst<Real>> matrices() const {
        std::vector<NamedParamConst<Real>> out;
        for (std::size_t i = 0; i < entries.size(); ++i) {
            const auto& e = entries[i];
            if (e.mo.defined()) out.push_back({names[i] + ".mo", &e.mo});
            if (e.mi.defined()) out.push_back({names[i] + ".mi", &e.mi});
            if (e.mf.defined()) out.push_back({names[i] + ".mf", &e.mf});
            if (e.mb.defined()) out.push_back({names[i] + ".mb", &e.mb});
        }
        return out;
    }
};

template <typename Real>
Tensor<Real> identity_matrix(std::int64_t n, bool requires_grad) {
    std::vector<Real> v(static_cast<std::size_t>(n * n), Real(0));
    for (std::int64_t i = 0; i < n; ++i) v[static_cast<std::size_t>(i * n + i)] = Real(1);
    return Tensor<Real>::leaf({n, n}, std::move(v), requires_grad);
}

/// One identity-initialized curvature entry per parameter tensor, so the
/// transform starts as the identity map.
template <typename Real>
CurvatureSet<Real> init_curvature(const EncoderParams<Real>& params) {
    CurvatureSet<Real> set;
    for (const auto& p : named_params(params)) {
        const Shape& s = p.tensor->shape();
        CurvatureEntry<Real> e;
        if (s.size() == 4) {
            e.mo = identity_matrix<Real>(s[0], true);
            e.mi = identity_matrix<Real>(s[1], true);
            e.mf = identity_matrix<Real>(s[2] * s[3], true);
        } else if (s.size() == 2) {
            e.mo = identity_matrix<Real>(s[0], true);
            e.mi = identity_matrix<Real>(s[1], true);
        } else if (s.size() == 1) {
            e.mb = identity_matrix<Real>(s[0], true);
        } else {
            throw ShapeError("curvature for rank-" + std::to_string(s.size()) + " tensor " + p.name +
                             " is not defined");
        }
        set.entries.push_back(std::move(e));
        set.names.push_back(p.name);
    }
    return set;
}

/// Preconditions one gradient tensor: 3-mode (or reshaped 4-D) tensors get
/// the triple n-mode product, matrices get a two-sided product, vectors a
/// single matrix. Differentiable in both the gradient and the matrices.
template <typename Real>
Tensor<Real> mc_transform(const Tensor<Real>& grad, const CurvatureEntry<Real>& entry) {
    const Shape& s = grad.shape();
    if (s.size() == 4) {
        auto g3 = ops::reshape(grad, {s[0], s[1], s[2] * s[3]});
        auto t = ops::mode_n_product(
            ops::mode_n_product(ops::mode_n_product(g3, entry.mf, 2), entry.mi, 1), entry.mo, 0);
        return ops::reshape(t, s);
    }
    if (s.size() == 3)
        return ops::mode_n_product(
            ops::mode_n_product(ops::mode_n_product(grad, entry.mf, 2), entry.mi, 1), entry.mo, 0);
    if (s.size() == 2) return ops::matmul(entry.mo, ops::matmul(grad, ops::transpose(entry.mi)));
    if (s.size() == 1) return ops::matvec(entry.mb, grad);
    throw ShapeError("mc_transform: rank-" + std::to_string(s.size()) + " gradients are not supported");
}

// ---------------------------------------------------------------------------
// Inner adaptation
// ---------------------------------------------------------------------------

template <typename Real>
using ParamVec = std::vector<Tensor<Real>>;

/// Shared inner-loop core: `steps` passes over `rotations` losses, one
/// recorded gradient step each. The loss callback sees the current parameter
/// vector and the (step, rotation) pair. With GradOrder::second the gradient
/// expressions stay differentiable, so an outer backward reaches the original
/// parameters through the whole chain; with GradOrder::first the inner
/// gradients are detached but the update chain itself is still recorded.
template <typename Real, typename LossFn>
ParamVec<Real> adapt_param_vec(ParamVec<Real> current, LossFn&& loss_fn, std::int64_t steps,
                               std::int64_t rotations, Real alpha, GradOrder order,
                               const CurvatureSet<Real>* curvature,
                               std::int64_t* update_count = nullptr) {
    if (curvature && curvature->entries.size() != current.size())
        throw ContractError("curvature set has " + std::to_string(curvature->entries.size()) +
                            " entries for " + std::to_string(current.size()) + " parameters");
    BackwardOptions opts{order == GradOrder::second};
    for (std::int64_t step = 0; step < steps; ++step)
        for (std::int64_t rot = 0; rot < rotations; ++rot) {
            auto loss = loss_fn(current, step, rot);
            auto grads = backward(loss, opts, current);
            ParamVec<Real> next;
            next.reserve(current.size());
            for (std::size_t i = 0; i < current.size(); ++i) {
                if (!grads.contains(current[i]))
                    throw ContractError("inner step has no gradient for parameter " + std::to_string(i));
                auto g = grads.at(current[i]);
                if (curvature) g = mc_transform(g, curvature->entries[i]);
                next.push_back(ops::sub(current[i], ops::scale(g, alpha)));
            }
            current = std::move(next);
            if (update_count) ++*update_count;
        }
    return current;
}

namespace detail {

template <typename Real>
ParamVec<Real> encoder_to_vec(const EncoderParams<Real>& p) {
    ParamVec<Real> v;
    for (const auto& e : named_params(p)) v.push_back(*e.tensor);
    return v;
}

template <typename Real>
EncoderParams<Real> encoder_from_vec(const EncoderParams<Real>& like, const ParamVec<Real>& v) {
    EncoderParams<Real> p;
    p.input_shape = like.input_shape;
    for (std::size_t b = 0; b < like.blocks.size(); ++b)
        p.blocks.push_back({v[4 * b], v[4 * b + 1], v[4 * b + 2], v[4 * b + 3]});
    return p;
}

} // namespace detail

/// Fine-tunes a clone of `params` on one support block by rotational
/// division: for each of `config.steps` passes and each rotation j, the
/// held-out column is classified against prototypes from the remaining
/// columns and one gradient step is taken. Exactly steps * K updates.
template <typename Real>
EncoderParams<Real> rdft_adapt(const EncoderParams<Real>& params, const SampleBlock<Real>& support,
                               const MetaConfig& config,
                               std::type_identity_t<const CurvatureSet<Real>*> curvature = nullptr,
                               std::int64_t* update_count = nullptr) {
    std::int64_t k = support.per_class;
    if (k < 2)
        throw UnsupportedError("rotational division needs more than one shot per class (K > 1); "
                               "got K = " + std::to_string(k));
    auto rotations = rdft_rotations(support);
    std::int64_t way = support.way();
    auto initial = detail::encoder_to_vec(clone_params(params));
    auto adapted = adapt_param_vec<Real>(
        std::move(initial),
        [&](const ParamVec<Real>& cur, std::int64_t, std::int64_t rot) {
            auto view = detail::encoder_from_vec(params, cur);
            const auto& [sub, fake] = rotations[static_cast<std::size_t>(rot)];
            auto protos = compute_prototypes(encode(view, sub.batch()), sub.labels, way);
            auto lp = classify(encode(view, fake.batch()), protos, config.distance);
            return episode_loss(lp, fake.labels);
        },
        config.steps, k, static_cast<Real>(config.alpha), config.order, curvature, update_count);
    return detail::encoder_from_vec(params, adapted);
}

/// Loss of `params` on the full episode: prototypes from the complete
/// support set, cross-entropy on the true query set.
template <typename Real>
Tensor<Real> episode_post_loss(const EncoderParams<Real>& params, const Episode<Real>& ep,
                               Distance distance) {
    auto protos = compute_prototypes(encode(params, ep.support.batch()), ep.support.labels, ep.way);
    return episode_loss(classify(encode(params, ep.query.batch()), protos, distance), ep.query.labels);
}

// ---------------------------------------------------------------------------
// Outer optimizer
// ---------------------------------------------------------------------------

/// Moment buffers for the outer optimizer, positional over the parameter
/// list (encoder tensors first, curvature matrices after).
template <typename Real>
struct MetaOptState {
    std::vector<std::vector<Real>> m, v;
    std::int64_t t = 0;
};

template <typename Real>
void apply_meta_update(std::vector<NamedParam<Real>> targets, const std::vector<std::vector<Real>>& grads,
                       MetaOptState<Real>& state, MetaOptimizer kind, Real beta) {
    if (targets.size() != grads.size())
        throw ContractError("meta update: " + std::to_string(grads.size()) + " gradients for " +
                            std::to_string(targets.size()) + " parameters");
    if (state.m.empty()) {
        for (const auto& t : targets) {
            state.m.emplace_back(t.tensor->data().size(), Real(0));
            state.v.emplace_back(t.tensor->data().size(), Real(0));
        }
    }
    ++state.t;
    const Real b1 = Real(0.9), b2 = Real(0.999), eps = Real(1e-8);
    Real bc1 = Real(1) - static_cast<Real>(std::pow(double(b1), double(state.t)));
    Real bc2 = Real(1) - static_cast<Real>(std::pow(double(b2), double(state.t)));
    for (std::size_t i = 0; i < targets.size(); ++i) {
        auto values = targets[i].tensor->data(); // copy
        const auto& g = grads[i];
        if (g.size() != values.size())
            throw ShapeError("meta update: gradient size " + std::to_string(g.size()) +
                             " for parameter " + targets[i].name);
        if (kind == MetaOptimizer::sgd) {
            for (std::size_t j = 0; j < values.size(); ++j) values[j] -= beta * g[j];
        } else {
            auto& m = state.m[i];
            auto& v = state.v[i];
            for (std::size_t j = 0; j < values.size(); ++j) {
                m[j] = b1 * m[j] + (Real(1) - b1) * g[j];
                v[j] = b2 * v[j] + (Real(1) - b2) * g[j] * g[j];
                values[j] -= beta * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps);
            }
        }
        *targets[i].tensor = Tensor<Real>::leaf(targets[i].tensor->shape(), std::move(values), true);
    }
}

// ---------------------------------------------------------------------------
// Meta training step
// ---------------------------------------------------------------------------

template <typename Real>
struct MetaStepResult {
    EncoderParams<Real> params;
    CurvatureSet<Real> curvature;
    double mean_loss = 0;
};

/// One meta update: adapts a clone per episode (for the MAML/MC algorithms)
/// and differentiates that episode's post-adaptation loss in the worker, then
/// merges the per-episode gradients in episode order on the calling thread
/// and steps the shared initialization (and curvature matrices). The
/// serialized merge keeps the result independent of the worker count.
template <typename Real>
MetaStepResult<Real> meta_train_step(const EncoderParams<Real>& params,
                                     const CurvatureSet<Real>& curvature,
                                     const std::vector<Episode<Real>>& episodes,
                                     const MetaConfig& config, MetaOptState<Real>& opt_state,
                                     int workers = 1) {
    if (episodes.empty()) throw ContractError("meta_train_step: empty episode list");
    bool inner = config.algorithm != Algorithm::protonet;
    bool use_curvature = config.algorithm == Algorithm::mc_proto;

    std::vector<Tensor<Real>> wrt;
    for (const auto& e : named_params(params)) wrt.push_back(*e.tensor);
    if (use_curvature)
        for (const auto& e : curvature.matrices()) wrt.push_back(*e.tensor);

    std::vector<double> losses(episodes.size());
    std::vector<std::vector<std::vector<Real>>> episode_grads(episodes.size());
    parallel_for(static_cast<std::int64_t>(episodes.size()), workers, [&](std::int64_t idx) {
        auto i = static_cast<std::size_t>(idx);
        const auto& ep = episodes[i];
        Tensor<Real> loss;
        if (inner) {
            auto adapted = rdft_adapt(params, ep.support, config, use_curvature ? &curvature : nullptr);
            loss = episode_post_loss(adapted, ep, config.distance);
        } else {
            loss = episode_post_loss(params, ep, config.distance);
        }
        auto table = backward(loss, wrt);
        std::vector<std::vector<Real>> rows;
        rows.reserve(wrt.size());
        for (const auto& t : wrt) {
            if (table.contains(t)) rows.push_back(table.at(t).data());
            else rows.emplace_back(t.data().size(), Real(0)); // parameter unused by this episode
        }
        episode_grads[i] = std::move(rows);
        losses[i] = static_cast<double>(loss.item());
    });

    std::vector<std::vector<Real>> grad_sum = std::move(episode_grads[0]);
    for (std::size_t i = 1; i < episode_grads.size(); ++i)
        for (std::size_t j = 0; j < grad_sum.size(); ++j) {
            const auto& src = episode_grads[i][j];
            auto& dst = grad_sum[j];
            for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
        }

    MetaStepResult<Real> result;
    result.params = params;
    result.curvature = curvature;
    for (double l : losses) result.mean_loss += l;
    result.mean_loss /= static_cast<double>(losses.size());

    auto targets = named_params(result.params);
    if (use_curvature) {
        auto mats = result.curvature.matrices();
        targets.insert(targets.end(), mats.begin(), mats.end());
    }
    apply_meta_update(targets, grad_sum, opt_state, config.meta_optimizer,
                      static_cast<Real>(config.beta));
    return result;
}

/// Plain episodic ProtoNet training: no inner loop, one outer step per
/// episode at rate beta.
template <typename Real>
EncoderParams<Real> train_protonet_baseline(
    EncoderParams<Real> params,
    const std::type_identity_t<std::function<Episode<Real>(std::int64_t)>>& episode_stream,
    std::int64_t num_episodes, const MetaConfig& config) {
    MetaConfig cfg = config;
    cfg.algorithm = Algorithm::protonet;
    MetaOptState<Real> state;
    CurvatureSet<Real> no_curvature;
    for (std::int64_t i = 0; i < num_episodes; ++i) {
        std::vector<Episode<Real>> batch{episode_stream(i)};
        params = std::move(meta_train_step(params, no_curvature, batch, cfg, state).params);
    }
    return params;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Per-episode accuracy with unadapted parameters, plus (optionally) after
/// fine-tuning a fresh clone on the episode's support set. Adaptation starts
/// from the same base parameters for every episode; nothing persists from one
/// episode to the next.
template <typename Real>
std::vector<EpisodeMetrics> evaluate(const EncoderParams<Real>& params,
                                     std::type_identity_t<const CurvatureSet<Real>*> curvature,
                                     const std::vector<Episode<Real>>& test_episodes, bool with_finetune,
                                     const MetaConfig& config, int workers = 1) {
    MetaConfig inner_cfg = config;
    inner_cfg.order = GradOrder::first; // nothing differentiates through test-time adaptation
    const CurvatureSet<Real>* test_curv =
        (with_finetune && config.test_time_curvature && curvature) ? curvature : nullptr;
    std::vector<EpisodeMetrics> out(test_episodes.size());
    parallel_for(static_cast<std::int64_t>(test_episodes.size()), workers, [&](std::int64_t i) {
        const auto& ep = test_episodes[static_cast<std::size_t>(i)];
        EpisodeMetrics m;
        m.episode_id = ep.id;
        m.seed = ep.seed;
        {
            NoGradGuard ng;
            auto protos = compute_prototypes(encode(params, ep.support.batch()), ep.support.labels, ep.way);
            auto lp = classify(encode(params, ep.query.batch()), protos, config.distance);
            m.acc_before = episode_accuracy(lp, ep.query.labels);
            if (!with_finetune) m.loss_after = episode_loss(lp, ep.query.labels).item();
        }
        if (with_finetune) {
            auto adapted = rdft_adapt(params, ep.support, inner_cfg, test_curv);
            NoGradGuard ng;
            auto protos =
                compute_prototypes(encode(adapted, ep.support.batch()), ep.support.labels, ep.way);
            auto lp = classify(encode(adapted, ep.query.batch()), protos, config.distance);
            m.acc_after = episode_accuracy(lp, ep.query.labels);
            m.loss_after = episode_loss(lp, ep.query.labels).item();
        }
        out[static_cast<std::size_t>(i)] = std::move(m);
    });
    return out;
}

// ---------------------------------------------------------------------------
// Fine-tuning amplitude sweep
// ---------------------------------------------------------------------------

/// Evaluates every (alpha, step-count) pair with fine-tuning on the same
/// episode list and reports mean accuracy gain.
template <typename Real>
std::vector<SweepCell> finetune_sweep(const EncoderParams<Real>& params,
                                      const std::vector<Episode<Real>>& test_episodes,
                                      const std::vector<double>& alphas,
                                      const std::vector<std::int64_t>& step_counts,
                                      const MetaConfig& config,
                                      std::type_identity_t<const CurvatureSet<Real>*> curvature = nullptr,
                                      int workers = 1) {
    if (alphas.empty() || step_counts.empty())
        throw ContractError("finetune_sweep: alpha and step lists must be non-empty");
    std::vector<SweepCell> grid;
    for (double a : alphas)
        for (std::int64_t n : step_counts) {
            MetaConfig cfg = config;
            cfg.alpha = a;
            cfg.steps = n;
            auto metrics = evaluate(params, curvature, test_episodes, true, cfg, workers);
            SweepCell cell;
            cell.alpha = a;
            cell.steps = n;
            for (const auto& m : metrics) {
                cell.mean_before += m.acc_before;
                cell.mean_after += *m.acc_after;
            }
            cell.mean_before /= static_cast<double>(metrics.size());
            cell.mean_after /= static_cast<double>(metrics.size());
            cell.delta = cell.mean_after - cell.mean_before;
            grid.push_back(cell);
        }
    return grid;
}

} // namespace fewshot
