#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fewshot/autodiff.hpp"
#include "fewshot/functional.hpp"
#include "fewshot/rng.hpp"

// Conv4 embedding network: four blocks of 3x3 conv (stride 1, zero padding 1)
// -> batch norm -> ReLU -> 2x2 max pool, flattened into the embedding.

namespace fewshot {

template <typename Real>
struct ConvBlockParams {
    Tensor<Real> kernel;   // [out_ch, in_ch, 3, 3]
    Tensor<Real> bias;     // [out_ch]
    Tensor<Real> bn_gamma; // [out_ch]
    Tensor<Real> bn_beta;  // [out_ch]
};

template <typename Real>
struct EncoderParams {
    std::vector<ConvBlockParams<Real>> blocks;
    Shape input_shape; // {channels, mel_bins, frames}
};

template <typename Real>
struct NamedParam {
    std::string name;
    Tensor<Real>* tensor;
};

template <typename Real>
struct NamedParamConst {
    std::string name;
    const Tensor<Real>* tensor;
};

/// Stable-order view over every learnable tensor; the order defines gradient
/// table layout, optimizer state slots, and checkpoint layout.
template <typename Real>
std::vector<NamedParam<Real>> named_params(EncoderParams<Real>& p) {
    std::vector<NamedParam<Real>> out;
    for (std::size_t i = 0; i < p.blocks.size(); ++i) {
        std::string prefix = "block" + std::to_string(i) + ".";
        out.push_back({prefix + "kernel", &p.blocks[i].kernel});
        out.push_back({prefix + "bias", &p.blocks[i].bias});
        out.push_back({prefix + "bn_gamma", &p.blocks[i].bn_gamma});
        out.push_back({prefix + "bn_beta", &p.blocks[i].bn_beta});
    }
    return out;
}

template <typename Real>
std::vector<NamedParamConst<Real>> named_params(const EncoderParams<Real>& p) {
    std::vector<NamedParamConst<Real>> out;
    for (std::size_t i = 0; i < p.blocks.size(); ++i) {
        std::string prefix = "block" + std::to_string(i) + ".";
        out.push_back({prefix + "kernel", &p.blocks[i].kernel});
        out.push_back({prefix + "bias", &p.blocks[i].bias});
        out.push_back({prefix + "bn_gamma", &p.blocks[i].bn_gamma});
        out.push_back({prefix + "bn_beta", &p.blocks[i].bn_beta});
    }
    return out;
}

/// Variable-size initializer backing init_encoder; tests use it to build tiny
/// two-block encoders that are cheap to finite-difference.
template <typename Real>
EncoderParams<Real> init_encoder_custom(const Shape& input_shape, std::uint64_t seed,
                                        int num_blocks, std::int64_t channels) {
    if (input_shape.size() != 3)
        throw ConfigError("encoder input shape must be (channels, mel_bins, frames), got " +
                          shape_str(input_shape));
    if (num_blocks < 1 || channels < 1)
        throw ConfigError("encoder needs at least one block and one channel");
    std::int64_t min_side = std::int64_t(1) << num_blocks;
    if (input_shape[1] < min_side || input_shape[2] < min_side)
        throw ConfigError("input " + std::to_string(input_shape[1]) + "x" + std::to_string(input_shape[2]) +
                          " too small for " + std::to_string(num_blocks) + " pooling stages; both sides must be >= " +
                          std::to_string(min_side));
    EncoderParams<Real> p;
    p.input_shape = input_shape;
    std::int64_t in_ch = input_shape[0];
    for (int b = 0; b < num_blocks; ++b) {
        Rng rng(derive_seed(seed, "encoder-block", static_cast<std::uint64_t>(b)));
        std::int64_t fan_in = in_ch * 9;
        Real bound = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(fan_in)));
        std::vector<Real> kv(static_cast<std::size_t>(channels * in_ch * 9));
        for (auto& v : kv) v = static_cast<Real>(rng.uniform(-bound, bound));
        ConvBlockParams<Real> blk;
        blk.kernel = Tensor<Real>::leaf({channels, in_ch, 3, 3}, std::move(kv), true);
        blk.bias = Tensor<Real>::zeros({channels}, true);
        blk.bn_gamma = Tensor<Real>::full({channels}, Real(1), true);
        blk.bn_beta = Tensor<Real>::zeros({channels}, true);
        p.blocks.push_back(std::move(blk));
        in_ch = channels;
    }
    return p;
}

/// The standard encoder: 4 blocks, 64 channels each. Requires both spatial
/// sides >= 16 so the four 2x2 pools stay valid.
template <typename Real>
EncoderParams<Real> init_encoder(const Shape& input_shape, std::uint64_t seed) {
    return init_encoder_custom<Real>(input_shape, seed, 4, 64);
}

/// Flattened embedding width for a given encoder (floor division at each
/// pool).
template <typename Real>
std::int64_t embed_dim(const EncoderParams<Real>& p) {
    std::int64_t h = p.input_shape[1], w = p.input_shape[2];
    for (std::size_t b = 0; b < p.blocks.size(); ++b) {
        h /= 2;
        w /= 2;
    }
    return p.blocks.back().kernel.dim(0) * h * w;
}

/// Runs the blocks over [N, channels, mel_bins, frames] and flattens to
/// [N, embed_dim]. Batch statistics are always per-batch.
template <typename Real>
Tensor<Real> encode(const EncoderParams<Real>& p, const Tensor<Real>& batch) {
    if (batch.shape().size() != 4 || batch.dim(1) != p.input_shape[0] ||
        batch.dim(2) != p.input_shape[1] || batch.dim(3) != p.input_shape[2])
        throw ShapeError("encode: batch " + shape_str(batch.shape()) + " does not match encoder input " +
                         shape_str(p.input_shape));
    Tensor<Real> x = batch;
    for (const auto& blk : p.blocks) {
        x = ops::conv2d(x, blk.kernel, 1);
        x = ops::channel_bias_add(x, blk.bias);
        x = ops::batch_norm(x, blk.bn_gamma, blk.bn_beta);
        x = ops::relu(x);
        x = ops::maxpool2x2(x);
    }
    return ops::reshape(x, {x.dim(0), x.dim(1) * x.dim(2) * x.dim(3)});
}

/// Recorded deep copy: buffers are independent, but gradients of losses built
/// from the clone flow back to the original parameters.
template <typename Real>
EncoderParams<Real> clone_params(const EncoderParams<Real>& p) {
    EncoderParams<Real> c;
    c.input_shape = p.input_shape;
    c.blocks.reserve(p.blocks.size());
    for (const auto& blk : p.blocks)
        c.blocks.push_back({ops::clone_value(blk.kernel), ops::clone_value(blk.bias),
                            ops::clone_value(blk.bn_gamma), ops::clone_value(blk.bn_beta)});
    return c;
}

/// One gradient step: every parameter becomes p - lr * g. The subtraction is
/// recorded, so with second-order gradients the result stays differentiable
/// with respect to the pre-update parameters.
template <typename Real>
EncoderParams<Real> apply_update(const EncoderParams<Real>& params, const GradTable<Real>& grads, Real lr) {
    EncoderParams<Real> updated;
    updated.input_shape = params.input_shape;
    auto entries = named_params(params);
    std::vector<Tensor<Real>> stepped;
    stepped.reserve(entries.size());
    for (const auto& e : entries) {
        if (!grads.contains(*e.tensor))
            throw ContractError("apply_update: no gradient for parameter " + e.name);
        stepped.push_back(ops::sub(*e.tensor, ops::scale(grads.at(*e.tensor), lr)));
    }
    for (std::size_t i = 0; i < params.blocks.size(); ++i)
        updated.blocks.push_back({stepped[4 * i], stepped[4 * i + 1], stepped[4 * i + 2], stepped[4 * i + 3]});
    return updated;
}

} // namespace fewshot
