#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "fewshot/functional.hpp"
#include "helpers.hpp"

using Catch::Matchers::ContainsSubstring;
using fewshot::ContractError;
using fewshot::Shape;
using fewshot::ShapeError;
using fewshot::Tensor;
namespace ops = fewshot::ops;
using testutil::require_grad_matches_fd;

using T = Tensor<double>;

TEST_CASE("relu clamps negatives") {
    auto x = T::constant({3}, {-1, 0, 2});
    REQUIRE(ops::relu(x).data() == std::vector<double>{0, 0, 2});
}

TEST_CASE("maxpool takes window maximum") {
    auto x = T::constant({1, 1, 2, 2}, {1, 2, 3, 4});
    auto y = ops::maxpool2x2(x);
    REQUIRE(y.shape() == Shape{1, 1, 1, 1});
    REQUIRE(y.item() == 4);
}

TEST_CASE("maxpool drops trailing odd row and column") {
    auto x = T::constant({1, 1, 3, 5}, std::vector<double>(15, 1.0));
    REQUIRE(ops::maxpool2x2(x).shape() == Shape{1, 1, 1, 2});
}

TEST_CASE("maxpool tie routes gradient to first element in scan order") {
    auto x = T::leaf({1, 1, 2, 2}, {5, 5, 3, 5}, true);
    auto loss = ops::sum_all(ops::maxpool2x2(x));
    auto g = fewshot::backward(loss).at(x);
    REQUIRE(g.data() == std::vector<double>{1, 0, 0, 0});
}

TEST_CASE("conv2d with zero kernel annihilates") {
    fewshot::Rng rng(11);
    auto x = T::constant({2, 1, 4, 4}, testutil::random_normal_vec(rng, 32));
    auto k = T::zeros({3, 1, 3, 3});
    auto y = ops::conv2d(x, k, 1);
    REQUIRE(y.shape() == Shape{2, 3, 4, 4});
    for (double v : y.data()) REQUIRE(v == 0.0);
}

TEST_CASE("conv2d known values") {
    // 1x1 kernel = pointwise scaling
    auto x = T::constant({1, 1, 2, 2}, {1, 2, 3, 4});
    auto k = T::constant({1, 1, 1, 1}, {2});
    REQUIRE(ops::conv2d(x, k, 0).data() == std::vector<double>{2, 4, 6, 8});

    // 3x3 kernel with only the center set, padding 1 = identity
    std::vector<double> kc(9, 0.0);
    kc[4] = 1.0;
    auto k2 = T::constant({1, 1, 3, 3}, kc);
    REQUIRE(ops::conv2d(x, k2, 1).data() == x.data());

    // full 2x2 sum kernel, no padding
    auto k3 = T::constant({1, 1, 2, 2}, {1, 1, 1, 1});
    auto y = ops::conv2d(x, k3, 0);
    REQUIRE(y.shape() == Shape{1, 1, 1, 1});
    REQUIRE(y.item() == 10.0);
}

TEST_CASE("matmul grad of sum is column sums") {
    auto w = T::constant({2, 2}, {1, 2, 3, 4});
    auto v = T::leaf({2, 1}, {1, 1}, true);
    auto loss = ops::sum_all(ops::matmul(w, v));
    auto g = fewshot::backward(loss).at(v);
    REQUIRE(g.data() == std::vector<double>{4, 6});
}

TEST_CASE("elementwise and scalar op gradients match finite differences") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        fewshot::Rng rng(fewshot::derive_seed(100, "fd-elementwise", seed));
        Shape s{2, 3};
        auto flat = testutil::random_normal_vec(rng, 12);
        require_grad_matches_fd(
            [](const std::vector<T>& in) {
                auto u = ops::add(in[0], in[1]);
                auto v = ops::sub(in[0], ops::scale(in[1], 0.5));
                return ops::sum_all(ops::mul(u, ops::shift(v, 0.25)));
            },
            {s, s}, flat);
    }
}

TEST_CASE("relu gradient matches finite differences away from the kink") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        fewshot::Rng rng(fewshot::derive_seed(100, "fd-relu", seed));
        auto flat = testutil::random_normal_vec(rng, 12);
        for (auto& v : flat) v += (v >= 0 ? 0.1 : -0.1);
        require_grad_matches_fd(
            [](const std::vector<T>& in) { return ops::sum_all(ops::mul(ops::relu(in[0]), in[0])); },
            {Shape{3, 4}}, flat);
    }
}

TEST_CASE("pointwise transcendental gradients match finite differences") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        fewshot::Rng rng(fewshot::derive_seed(100, "fd-pointwise", seed));
        auto flat = testutil::random_vec(rng, 6, 0.5, 2.0);
        require_grad_matches_fd(
            [](const std::vector<T>& in) {
                auto a = ops::exp_op(ops::scale(in[0], 0.3));
                auto b = ops::log_op(in[0]);
                auto c = ops::recip(in[0]);
                auto d = ops::sqrt_op(in[0]);
                auto e = ops::rsqrt(in[0]);
                return ops::sum_all(ops::add(ops::add(a, b), ops::mul(c, ops::add(d, e))));
            },
            {Shape{6}}, flat);
    }
}

TEST_CASE("matmul and transpose gradients match finite differences") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        fewshot::Rng rng(fewshot::derive_seed(100, "fd-matmul", seed));
        auto flat = testutil::random_normal_vec(rng, 2 * 3 + 3 * 2);
        require_grad_matches_fd(
            [](const std::vector<T>& in) {
                auto y = ops::matmul(in[0], in[1]);
                auto z = ops::matmul(in[1], in[0]);
                return ops::add(ops::sum_all(ops::mul(y, ops::transpose(y))),
                                ops::sum_all(ops::mul(z, z)));
            },
            {Shape{2, 3}, Shape{3, 2}}, flat);
    }
}

TEST_CASE("reduction and broadcast gradients match finite differences") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        fewshot::Rng rng(fewshot::derive_seed(100, "fd-reduce", seed));
        auto flat = testutil::random_normal_vec(rng, 6);
        require_grad_matches_fd(
            [](const std::vector<T>& in) {
                auto a = ops::mul(ops::repeat_rows(ops::sum_axis0(in[0]), 2), in[0]);
                auto b = ops::mul(ops::repeat_cols(ops::sum_axis1(in[0]), 3), in[0]);
                auto c = ops::broadcast_scalar(ops::sum_all(in[0]), Shape{2, 3});
                return ops::sum_all(ops::add(ops::add(a, b), ops::mul(c, in[0])));
            },
            {Shape{2, 3}}, flat);
    }
}

TEST_CASE("channel op gradients match finite differences") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        fewshot::Rng rng(fewshot::derive_seed(100, "fd-channel", seed));
        Shape xs{2, 3, 2, 2};
        auto flat = testutil::random_normal_vec(rng, 24 + 3);
        require_grad_matches_fd(
            [&](const std::vector<T>& in) {
                auto y = ops::channel_bias_add(in[0], in[1]);
                auto s = ops::channel_broadcast(ops::channel_sum(in[0]), xs);
                return ops::sum_all(ops::mul(y, ops::shift(ops::scale(s, 0.1), 1.0)));
            },
            {xs, Shape{3}}, flat);
    }
}

TEST_CASE("conv2d gradients match finite differences") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        fewshot::Rng rng(fewshot::derive_seed(100, "fd-conv", seed));
        Shape xs{2, 2, 4, 4}, ks{3, 2, 3, 3};
        auto flat = testutil::random_normal_vec(rng, 64 + 54, 0.5);
        require_grad_matches_fd(
            [](const std::vector<T>& in) {
                auto y = ops::conv2d(in[0], in[1], 1);
                return ops::sum_all(ops::mul(y, y));
            },
            {xs, ks}, flat);
    }
}

TEST_CASE("conv2d unpadded gradients match finite differences") {
    fewshot::Rng rng(fewshot::derive_seed(100, "fd-conv0", 0));
    Shape xs{1, 2, 3, 3}, ks{2, 2, 2, 2};
    auto flat = testutil::random_normal_vec(rng, 18 + 16, 0.5);
    require_grad_matches_fd(
        [](const std::vector<T>& in) {
            auto y = ops::conv2d(in[0], in[1], 0);
            return ops::sum_all(ops::mul(y, y));
        },
        {xs, ks}, flat);
}

TEST_CASE("maxpool gradients match finite differences") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        fewshot::Rng rng(fewshot::derive_seed(100, "fd-pool", seed));
        // well-separated values so the argmax is stable under the probe step
        std::vector<int> order(32);
        for (int i = 0; i < 32; ++i) order[i] = i;
        rng.shuffle(order);
        std::vector<double> flat(32);
        for (int i = 0; i < 32; ++i) flat[i] = 0.05 * order[i] + 0.001 * rng.uniform();
        require_grad_matches_fd(
            [](const std::vector<T>& in) {
                auto y = ops::maxpool2x2(in[0]);
                return ops::sum_all(ops::mul(y, y));
            },
            {Shape{1, 2, 4, 4}}, flat);
    }
}

TEST_CASE("batch_norm gradients match finite differences") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        fewshot::Rng rng(fewshot::derive_seed(100, "fd-bn", seed));
        Shape xs{3, 2, 2, 2};
        auto flat = testutil::random_normal_vec(rng, 24);
        auto gamma = testutil::random_vec(rng, 2, 0.5, 1.5);
        auto beta = testutil::random_normal_vec(rng, 2, 0.3);
        flat.insert(flat.end(), gamma.begin(), gamma.end());
        flat.insert(flat.end(), beta.begin(), beta.end());
        require_grad_matches_fd(
            [](const std::vector<T>& in) {
                auto y = ops::batch_norm(in[0], in[1], in[2]);
                return ops::sum_all(ops::mul(y, y));
            },
            {xs, Shape{2}, Shape{2}}, flat);
    }
}

TEST_CASE("batch_norm normalizes per channel") {
    fewshot::Rng rng(21);
    auto x = T::constant({4, 3, 2, 2}, testutil::random_normal_vec(rng, 48, 2.0));
    auto y = ops::batch_norm(x, T::full({3}, 1.0), T::zeros({3}));
    for (int c = 0; c < 3; ++c) {
        double sum = 0, sq = 0;
        int count = 0;
        for (int n = 0; n < 4; ++n)
            for (int i = 0; i < 4; ++i) {
                double v = y.data()[static_cast<std::size_t>((n * 3 + c) * 4 + i)];
                sum += v;
                sq += v * v;
                ++count;
            }
        REQUIRE(std::abs(sum / count) < 1e-6);
        REQUIRE(std::abs(sq / count - 1.0) < 1e-3); // eps shrinks variance slightly
    }
}

TEST_CASE("log_softmax rows are normalized") {
    fewshot::Rng rng(31);
    auto a = T::constant({4, 5}, testutil::random_normal_vec(rng, 20, 3.0));
    auto lp = ops::log_softmax(a);
    for (int i = 0; i < 4; ++i) {
        double s = 0;
        for (int j = 0; j < 5; ++j) s += std::exp(lp.data()[static_cast<std::size_t>(i * 5 + j)]);
        REQUIRE(std::abs(s - 1.0) < 1e-6);
    }
}

TEST_CASE("log_softmax survives extreme logits") {
    auto a = T::constant({1, 3}, {1000.0, -1000.0, 999.0});
    auto lp = ops::log_softmax(a);
    REQUIRE(lp.all_finite());
    REQUIRE(std::abs(lp.data()[0] - (-std::log1p(std::exp(-1.0)))) < 1e-9);
}

TEST_CASE("log_softmax gradients match finite differences") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        fewshot::Rng rng(fewshot::derive_seed(100, "fd-lsm", seed));
        auto flat = testutil::random_normal_vec(rng, 12, 2.0);
        auto mask = T::constant({3, 4}, testutil::random_normal_vec(rng, 12));
        require_grad_matches_fd(
            [&](const std::vector<T>& in) {
                return ops::sum_all(ops::mul(ops::log_softmax(in[0]), mask));
            },
            {Shape{3, 4}}, flat);
    }
}

TEST_CASE("nll_loss of uniform prediction is log C") {
    auto lp = T::constant({4, 5}, std::vector<double>(20, std::log(0.2)));
    auto loss = ops::nll_loss(lp, {0, 1, 2, 3});
    REQUIRE(std::abs(loss.item() - std::log(5.0)) < 1e-12);
}

TEST_CASE("nll_loss rejects out-of-range labels") {
    auto lp = T::constant({2, 3}, std::vector<double>(6, std::log(1.0 / 3)));
    REQUIRE_THROWS_AS(ops::nll_loss(lp, {0, 3}), ContractError);
    REQUIRE_THROWS_AS(ops::nll_loss(lp, {-1, 0}), ContractError);
}

TEST_CASE("nll_loss gradient matches finite differences") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        fewshot::Rng rng(fewshot::derive_seed(100, "fd-nll", seed));
        auto flat = testutil::random_normal_vec(rng, 15, 2.0);
        require_grad_matches_fd(
            [](const std::vector<T>& in) {
                return ops::nll_loss(ops::log_softmax(in[0]), {2, 0, 4});
            },
            {Shape{3, 5}}, flat);
    }
}

TEST_CASE("pairwise_sqdist matches brute force") {
    fewshot::Rng rng(41);
    auto qv = testutil::random_normal_vec(rng, 4 * 3);
    auto pv = testutil::random_normal_vec(rng, 2 * 3);
    auto d = ops::pairwise_sqdist(T::constant({4, 3}, qv), T::constant({2, 3}, pv));
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 2; ++j) {
            double ref = 0;
            for (int k = 0; k < 3; ++k) {
                double diff = qv[static_cast<std::size_t>(i * 3 + k)] - pv[static_cast<std::size_t>(j * 3 + k)];
                ref += diff * diff;
            }
            REQUIRE(std::abs(d.data()[static_cast<std::size_t>(i * 2 + j)] - ref) < 1e-10);
        }
}

TEST_CASE("pairwise_sqdist is translation invariant") {
    fewshot::Rng rng(43);
    auto qv = testutil::random_normal_vec(rng, 4 * 3);
    auto pv = testutil::random_normal_vec(rng, 2 * 3);
    auto shiftv = testutil::random_normal_vec(rng, 3);
    auto qs = qv, ps = pv;
    for (int i = 0; i < 4; ++i)
        for (int k = 0; k < 3; ++k) qs[static_cast<std::size_t>(i * 3 + k)] += shiftv[static_cast<std::size_t>(k)];
    for (int j = 0; j < 2; ++j)
        for (int k = 0; k < 3; ++k) ps[static_cast<std::size_t>(j * 3 + k)] += shiftv[static_cast<std::size_t>(k)];
    auto d0 = ops::pairwise_sqdist(T::constant({4, 3}, qv), T::constant({2, 3}, pv));
    auto d1 = ops::pairwise_sqdist(T::constant({4, 3}, qs), T::constant({2, 3}, ps));
    for (std::size_t i = 0; i < d0.data().size(); ++i)
        REQUIRE(std::abs(d0.data()[i] - d1.data()[i]) < 1e-6);
}

TEST_CASE("pairwise distance gradients match finite differences") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        fewshot::Rng rng(fewshot::derive_seed(100, "fd-dist", seed));
        auto flat = testutil::random_normal_vec(rng, 4 * 3 + 2 * 3);
        auto mask = T::constant({4, 2}, testutil::random_normal_vec(rng, 8));
        require_grad_matches_fd(
            [&](const std::vector<T>& in) {
                auto sq = ops::pairwise_sqdist(in[0], in[1]);
                auto eu = ops::pairwise_dist(in[0], in[1]);
                return ops::sum_all(ops::mul(ops::add(sq, eu), mask));
            },
            {Shape{4, 3}, Shape{2, 3}}, flat);
    }
}

TEST_CASE("matricize3 round-trips and matches the layout oracle") {
    // 2x2x2 tensor with entries t[i][j][k] = 100 i + 10 j + k
    std::vector<double> tv = {0, 1, 10, 11, 100, 101, 110, 111};
    auto t = T::constant({2, 2, 2}, tv);
    auto m0 = ops::matricize3(t, 0);
    REQUIRE(m0.shape() == Shape{2, 4});
    REQUIRE(m0.data() == std::vector<double>{0, 1, 10, 11, 100, 101, 110, 111});
    auto m1 = ops::matricize3(t, 1);
    REQUIRE(m1.shape() == Shape{2, 4});
    REQUIRE(m1.data() == std::vector<double>{0, 1, 100, 101, 10, 11, 110, 111});
    auto m2 = ops::matricize3(t, 2);
    REQUIRE(m2.shape() == Shape{2, 4});
    REQUIRE(m2.data() == std::vector<double>{0, 10, 100, 110, 1, 11, 101, 111});
    for (int mode = 0; mode < 3; ++mode) {
        auto rt = ops::dematricize3(ops::matricize3(t, mode), mode, {2, 2, 2});
        REQUIRE(rt.data() == tv);
    }
}

TEST_CASE("mode_n_product scalar collapse and identity") {
    auto g = T::constant({1, 1, 1}, {1.0});
    auto y = ops::mode_n_product(
        ops::mode_n_product(ops::mode_n_product(g, T::constant({1, 1}, {5.0}), 2),
                            T::constant({1, 1}, {3.0}), 1),
        T::constant({1, 1}, {2.0}), 0);
    REQUIRE(y.item() == 30.0);

    fewshot::Rng rng(47);
    auto t = T::constant({2, 3, 4}, testutil::random_normal_vec(rng, 24));
    std::vector<double> eye(9, 0.0);
    eye[0] = eye[4] = eye[8] = 1.0;
    auto r = ops::mode_n_product(t, T::constant({3, 3}, eye), 1);
    REQUIRE(r.data() == t.data());
}

TEST_CASE("mode_n_product matches the triple-sum oracle") {
    fewshot::Rng rng(53);
    std::int64_t d0 = 2, d1 = 3, d2 = 4;
    auto gv = testutil::random_normal_vec(rng, static_cast<std::size_t>(d0 * d1 * d2));
    auto mo = testutil::random_normal_vec(rng, static_cast<std::size_t>(d0 * d0));
    auto mi = testutil::random_normal_vec(rng, static_cast<std::size_t>(d1 * d1));
    auto mf = testutil::random_normal_vec(rng, static_cast<std::size_t>(d2 * d2));
    auto g = T::constant({d0, d1, d2}, gv);
    auto y = ops::mode_n_product(
        ops::mode_n_product(ops::mode_n_product(g, T::constant({d2, d2}, mf), 2),
                            T::constant({d1, d1}, mi), 1),
        T::constant({d0, d0}, mo), 0);
    for (std::int64_t a = 0; a < d0; ++a)
        for (std::int64_t b = 0; b < d1; ++b)
            for (std::int64_t c = 0; c < d2; ++c) {
                double ref = 0;
                for (std::int64_t a2 = 0; a2 < d0; ++a2)
                    for (std::int64_t b2 = 0; b2 < d1; ++b2)
                        for (std::int64_t c2 = 0; c2 < d2; ++c2)
                            ref += mo[static_cast<std::size_t>(a * d0 + a2)] *
                                   mi[static_cast<std::size_t>(b * d1 + b2)] *
                                   mf[static_cast<std::size_t>(c * d2 + c2)] *
                                   gv[static_cast<std::size_t>((a2 * d1 + b2) * d2 + c2)];
                REQUIRE(std::abs(y.data()[static_cast<std::size_t>((a * d1 + b) * d2 + c)] - ref) < 1e-10);
            }
}

TEST_CASE("mode_n_product gradients match finite differences") {
    fewshot::Rng rng(59);
    auto flat = testutil::random_normal_vec(rng, 2 * 2 * 3 + 3 * 3);
    require_grad_matches_fd(
        [](const std::vector<T>& in) {
            auto y = ops::mode_n_product(in[0], in[1], 2);
            return ops::sum_all(ops::mul(y, y));
        },
        {Shape{2, 2, 3}, Shape{3, 3}}, flat);
}

TEST_CASE("shape errors name the operator") {
    auto a = T::constant({2, 3}, std::vector<double>(6, 0.0));
    auto b = T::constant({3, 2}, std::vector<double>(6, 0.0));
    REQUIRE_THROWS_WITH(ops::add(a, b), ContainsSubstring("add"));
    REQUIRE_THROWS_WITH(ops::matmul(a, a), ContainsSubstring("matmul"));
    auto x = T::constant({1, 2, 4, 4}, std::vector<double>(32, 0.0));
    auto k = T::constant({1, 3, 3, 3}, std::vector<double>(27, 0.0));
    REQUIRE_THROWS_WITH(ops::conv2d(x, k, 1), ContainsSubstring("conv2d"));
    REQUIRE_THROWS_AS(ops::conv2d(x, k, 1), ShapeError);
    REQUIRE_THROWS_AS(ops::maxpool2x2(a), ShapeError);
    REQUIRE_THROWS_AS(ops::reshape(a, {4, 2}), ShapeError);
}

TEST_CASE("sum and mean reductions") {
    auto a = T::constant({2, 2}, {1, 2, 3, 4});
    REQUIRE(ops::sum_all(a).item() == 10.0);
    REQUIRE(ops::mean_all(a).item() == 2.5);
    REQUIRE(ops::sum_squared_diff(a, T::zeros({2, 2})).item() == 30.0);
    REQUIRE(ops::sum_axis0(a).data() == std::vector<double>{4, 6});
    REQUIRE(ops::sum_axis1(a).data() == std::vector<double>{3, 7});
}
