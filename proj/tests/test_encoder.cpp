#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "fewshot/encoder.hpp"
#include "helpers.hpp"

using Catch::Matchers::ContainsSubstring;
using fewshot::ConfigError;
using fewshot::ContractError;
using fewshot::Shape;
using fewshot::Tensor;
namespace ops = fewshot::ops;

using T = Tensor<double>;

namespace {

std::vector<double> flatten(const fewshot::EncoderParams<double>& p) {
    std::vector<double> out;
    for (const auto& e : fewshot::named_params(p))
        out.insert(out.end(), e.tensor->data().begin(), e.tensor->data().end());
    return out;
}

} // namespace

TEST_CASE("init_encoder is seed-deterministic") {
    auto a = fewshot::init_encoder<double>({1, 64, 64}, 7);
    auto b = fewshot::init_encoder<double>({1, 64, 64}, 7);
    REQUIRE(flatten(a) == flatten(b));
    auto c = fewshot::init_encoder<double>({1, 64, 64}, 8);
    REQUIRE(flatten(a) != flatten(c));
}

TEST_CASE("init_encoder builds 4 blocks of 64 channels") {
    auto p = fewshot::init_encoder<double>({1, 64, 64}, 1);
    REQUIRE(p.blocks.size() == 4);
    REQUIRE(p.blocks[0].kernel.shape() == Shape{64, 1, 3, 3});
    for (int b = 1; b < 4; ++b) REQUIRE(p.blocks[static_cast<std::size_t>(b)].kernel.shape() == Shape{64, 64, 3, 3});
    for (const auto& blk : p.blocks) {
        for (double v : blk.bias.data()) REQUIRE(v == 0.0);
        for (double v : blk.bn_gamma.data()) REQUIRE(v == 1.0);
        for (double v : blk.bn_beta.data()) REQUIRE(v == 0.0);
    }
    REQUIRE(fewshot::embed_dim(p) == 64 * 4 * 4);
}

TEST_CASE("init_encoder rejects inputs too small for four pools") {
    REQUIRE_THROWS_AS(fewshot::init_encoder<double>({1, 8, 8}, 1), ConfigError);
    REQUIRE_THROWS_WITH(fewshot::init_encoder<double>({1, 8, 8}, 1), ContainsSubstring("16"));
    REQUIRE_NOTHROW(fewshot::init_encoder<double>({1, 16, 16}, 1));
}

TEST_CASE("encode output width matches embed_dim for varied shapes") {
    for (auto [mel, frames] : {std::pair<std::int64_t, std::int64_t>{16, 16}, {20, 24}, {17, 31}}) {
        auto p = fewshot::init_encoder_custom<double>({1, mel, frames}, 3, 2, 3);
        fewshot::Rng rng(9);
        auto batch = T::constant({2, 1, mel, frames},
                                 testutil::random_normal_vec(rng, static_cast<std::size_t>(2 * mel * frames)));
        auto e = fewshot::encode(p, batch);
        REQUIRE(e.shape() == Shape{2, fewshot::embed_dim(p)});
        REQUIRE(fewshot::embed_dim(p) == 3 * (mel / 4) * (frames / 4));
    }
}

TEST_CASE("encode of all zeros is all zeros at init") {
    auto p = fewshot::init_encoder<double>({1, 16, 16}, 5);
    auto e = fewshot::encode(p, T::zeros({2, 1, 16, 16}));
    for (double v : e.data()) REQUIRE(v == 0.0);
}

TEST_CASE("identical batch rows produce identical embeddings") {
    auto p = fewshot::init_encoder_custom<double>({1, 16, 16}, 5, 2, 4);
    fewshot::Rng rng(13);
    auto one = testutil::random_normal_vec(rng, 256);
    auto two = one;
    two.insert(two.end(), one.begin(), one.end());
    auto e = fewshot::encode(p, T::constant({2, 1, 16, 16}, two));
    std::int64_t d = fewshot::embed_dim(p);
    for (std::int64_t i = 0; i < d; ++i)
        REQUIRE(e.data()[static_cast<std::size_t>(i)] == e.data()[static_cast<std::size_t>(d + i)]);
}

TEST_CASE("encode rejects mismatched batches") {
    auto p = fewshot::init_encoder<double>({1, 16, 16}, 5);
    REQUIRE_THROWS_AS(fewshot::encode(p, T::zeros({2, 1, 16, 8})), fewshot::ShapeError);
    REQUIRE_THROWS_AS(fewshot::encode(p, T::zeros({2, 2, 16, 16})), fewshot::ShapeError);
}

TEST_CASE("clone_params is independent but gradient-connected") {
    auto p = fewshot::init_encoder_custom<double>({1, 16, 16}, 11, 2, 3);
    auto c = fewshot::clone_params(p);
    REQUIRE(flatten(c) == flatten(p));

    auto before = p.blocks[0].kernel.data();
    c.blocks[0].kernel.mutable_data()[0] += 1.0;
    REQUIRE(p.blocks[0].kernel.data() == before);

    // losses built from the clone still reach the originals
    fewshot::Rng rng(17);
    auto c2 = fewshot::clone_params(p);
    auto batch = T::constant({2, 1, 16, 16}, testutil::random_normal_vec(rng, 512));
    auto e = fewshot::encode(c2, batch);
    auto grads = fewshot::backward(ops::sum_all(ops::mul(e, e)));
    for (const auto& entry : fewshot::named_params(p)) {
        INFO(entry.name);
        REQUIRE(grads.contains(*entry.tensor));
    }
}

TEST_CASE("apply_update steps every parameter") {
    auto p = fewshot::init_encoder_custom<double>({1, 16, 16}, 19, 2, 3);
    fewshot::Rng rng(23);
    auto batch = T::constant({3, 1, 16, 16}, testutil::random_normal_vec(rng, 768));
    auto e = fewshot::encode(p, batch);
    auto grads = fewshot::backward(ops::sum_all(ops::mul(e, e)));

    auto zero_step = fewshot::apply_update(p, grads, 0.0);
    REQUIRE(flatten(zero_step) == flatten(p));

    double lr = 0.2;
    auto stepped = fewshot::apply_update(p, grads, lr);
    auto orig_entries = fewshot::named_params(p);
    auto new_entries = fewshot::named_params(stepped);
    for (std::size_t t = 0; t < orig_entries.size(); ++t) {
        const auto& pv = orig_entries[t].tensor->data();
        const auto& gv = grads.at(*orig_entries[t].tensor).data();
        const auto& nv = new_entries[t].tensor->data();
        for (std::size_t i = 0; i < pv.size(); ++i)
            REQUIRE(std::abs(nv[i] - (pv[i] - lr * gv[i])) < 1e-12);
    }

    // two half steps with the same gradient values equal one full step
    auto half = fewshot::apply_update(p, grads, 0.1);
    fewshot::GradTable<double> grads_rekeyed;
    auto half_entries = fewshot::named_params(half);
    for (std::size_t t = 0; t < orig_entries.size(); ++t)
        grads_rekeyed.set(*half_entries[t].tensor, grads.at(*orig_entries[t].tensor));
    auto twice = fewshot::apply_update(half, grads_rekeyed, 0.1);
    auto once = fewshot::apply_update(p, grads, 0.2);
    auto a = flatten(twice), b = flatten(once);
    for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(std::abs(a[i] - b[i]) < 1e-12);
}

TEST_CASE("apply_update names the tensor missing a gradient") {
    auto p = fewshot::init_encoder_custom<double>({1, 16, 16}, 19, 2, 3);
    fewshot::GradTable<double> empty;
    REQUIRE_THROWS_WITH(fewshot::apply_update(p, empty, 0.1), ContainsSubstring("block0.kernel"));
}

TEST_CASE("p=1 g=2 lr=0.2 steps to 0.6") {
    auto p = fewshot::init_encoder_custom<double>({1, 16, 16}, 19, 2, 3);
    fewshot::GradTable<double> grads;
    for (auto& e : fewshot::named_params(p)) {
        auto& t = *e.tensor;
        for (auto& v : t.mutable_data()) v = 1.0;
        grads.set(t, T::full(t.shape(), 2.0));
    }
    auto stepped = fewshot::apply_update(p, grads, 0.2);
    for (double v : flatten(stepped)) REQUIRE(std::abs(v - 0.6) < 1e-12);
}

TEST_CASE("encode gradients match finite differences on a tiny encoder") {
    auto p = fewshot::init_encoder_custom<double>({1, 16, 16}, 29, 2, 3);
    fewshot::Rng rng(31);
    auto batch_vals = testutil::random_normal_vec(rng, 512);

    std::vector<Shape> shapes;
    std::vector<double> flat;
    for (const auto& e : fewshot::named_params(p)) {
        shapes.push_back(e.tensor->shape());
        flat.insert(flat.end(), e.tensor->data().begin(), e.tensor->data().end());
    }
    testutil::require_grad_matches_fd(
        [&](const std::vector<T>& leaves) {
            fewshot::EncoderParams<double> q;
            q.input_shape = {1, 16, 16};
            q.blocks.push_back({leaves[0], leaves[1], leaves[2], leaves[3]});
            q.blocks.push_back({leaves[4], leaves[5], leaves[6], leaves[7]});
            auto emb = fewshot::encode(q, T::constant({2, 1, 16, 16}, batch_vals));
            return ops::mean_all(ops::mul(emb, emb));
        },
        shapes, flat);
}
