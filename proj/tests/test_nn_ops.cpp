#include <cmath>
#include <random>

#include "doctest.h"
#include "gradcheck.hpp"
#include "seqcls/nn/layers.hpp"
#include "seqcls/nn/ops.hpp"

using namespace seqcls::nn;
using seqcls::testing::check_gradients;

namespace {

Var random_var(const Shape& shape, std::mt19937_64& rng, bool grad = true) {
    return Var(normal_tensor(shape, 1.0, rng), grad);
}

// Projects an op output onto fixed random weights so every output entry
// contributes to the scalar loss.
Tensor probe_weights(const Shape& shape, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return normal_tensor(shape, 1.0, rng);
}

void expect_grads_match(const std::function<Var()>& f, const std::vector<seqcls::testing::GradCheckParam>& params) {
    const auto r = check_gradients(f, params, 1.0, 7);
    INFO(r.worst);
    CHECK(r.max_relative_error < 1e-4);
}

// Direct 7-loop convolution used as the oracle for the im2col path.
Tensor naive_conv3d(const Tensor& x, const Tensor& w, const Conv3dGeometry& g) {
    const auto n = x.dim(0), c = x.dim(1), d = x.dim(2), h = x.dim(3), wd = x.dim(4);
    const auto o = w.dim(0), kd = w.dim(2), kh = w.dim(3), kw = w.dim(4);
    const auto od = (d + 2 * g.padding[0] - kd) / g.stride[0] + 1;
    const auto oh = (h + 2 * g.padding[1] - kh) / g.stride[1] + 1;
    const auto ow = (wd + 2 * g.padding[2] - kw) / g.stride[2] + 1;
    Tensor y({n, o, od, oh, ow});
    for (std::int64_t a = 0; a < n; ++a)
        for (std::int64_t oc = 0; oc < o; ++oc)
            for (std::int64_t z = 0; z < od; ++z)
                for (std::int64_t yy = 0; yy < oh; ++yy)
                    for (std::int64_t xx = 0; xx < ow; ++xx) {
                        double s = 0.0;
                        for (std::int64_t ic = 0; ic < c; ++ic)
                            for (std::int64_t i = 0; i < kd; ++i)
                                for (std::int64_t j = 0; j < kh; ++j)
                                    for (std::int64_t k = 0; k < kw; ++k) {
                                        const auto iz = z * g.stride[0] - g.padding[0] + i;
                                        const auto iy = yy * g.stride[1] - g.padding[1] + j;
                                        const auto ix = xx * g.stride[2] - g.padding[2] + k;
                                        if (iz < 0 || iz >= d || iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                                        s += x.at({a, ic, iz, iy, ix}) * w.at({oc, ic, i, j, k});
                                    }
                        y.at({a, oc, z, yy, xx}) = s;
                    }
    return y;
}

}  // namespace

TEST_CASE("conv3d matches direct convolution for spatial, temporal and strided kernels") {
    std::mt19937_64 rng(1);
    struct Case {
        Shape x, w;
        Conv3dGeometry g;
    };
    const std::vector<Case> cases = {
        {{2, 3, 1, 9, 8}, {4, 3, 1, 3, 3}, {{1, 1, 1}, {0, 1, 1}}},
        {{2, 3, 1, 11, 11}, {5, 3, 1, 7, 7}, {{1, 2, 2}, {0, 3, 3}}},
        {{1, 4, 5, 6, 6}, {3, 4, 3, 1, 1}, {{2, 1, 1}, {1, 0, 0}}},
        {{2, 2, 4, 5, 5}, {3, 2, 1, 1, 1}, {{2, 2, 2}, {0, 0, 0}}},
    };
    for (const auto& c : cases) {
        Var x = random_var(c.x, rng), w = random_var(c.w, rng);
        Var y = conv3d(x, w, c.g);
        CHECK(y.shape() == conv3d_output_shape(c.x, c.w, c.g));
        CHECK(max_abs_diff(y.value(), naive_conv3d(x.value(), w.value(), c.g)) < 1e-12);
        const Tensor probe = probe_weights(y.shape(), 3);
        expect_grads_match([&] { return weighted_sum(conv3d(x, w, c.g), probe); }, {{"x", x}, {"w", w}});
    }
}

TEST_CASE("conv3d rejects mismatched channels") {
    std::mt19937_64 rng(2);
    Var x = random_var({1, 3, 1, 5, 5}, rng), w = random_var({2, 4, 1, 3, 3}, rng);
    CHECK_THROWS_AS(conv3d(x, w, {}), std::invalid_argument);
}

TEST_CASE("linear, bmm, softmax and layer norm gradients") {
    std::mt19937_64 rng(3);
    Var x = random_var({4, 5}, rng), w = random_var({3, 5}, rng), b = random_var({3}, rng);
    const Tensor p1 = probe_weights({4, 3}, 11);
    expect_grads_match([&] { return weighted_sum(linear(x, w, b), p1); }, {{"x", x}, {"w", w}, {"b", b}});

    Var a = random_var({2, 3, 4}, rng), c = random_var({2, 4, 5}, rng), ct = random_var({2, 5, 4}, rng);
    const Tensor p2 = probe_weights({2, 3, 5}, 12);
    expect_grads_match([&] { return weighted_sum(bmm(a, c), p2); }, {{"a", a}, {"c", c}});
    expect_grads_match([&] { return weighted_sum(bmm(a, ct, true), p2); }, {{"a", a}, {"ct", ct}});

    Var s = random_var({3, 6}, rng);
    const Tensor p3 = probe_weights({3, 6}, 13);
    expect_grads_match([&] { return weighted_sum(softmax_last(s), p3); }, {{"s", s}});
    {
        NoGradGuard guard;
        Var y = softmax_last(s);
        for (int r = 0; r < 3; ++r) {
            double sum = 0.0;
            for (int i = 0; i < 6; ++i) sum += y.value().at({r, i});
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
        }
    }

    Var gamma = random_var({6}, rng), beta = random_var({6}, rng);
    expect_grads_match([&] { return weighted_sum(layer_norm_last(s, gamma, beta), p3); },
                       {{"s", s}, {"gamma", gamma}, {"beta", beta}});
}

TEST_CASE("elementwise, reshaping and reduction gradients") {
    std::mt19937_64 rng(4);
    Var a = random_var({2, 3, 4}, rng), b = random_var({2, 3, 4}, rng), p = random_var({3, 4}, rng);
    const Tensor probe = probe_weights({2, 3, 4}, 21);
    expect_grads_match([&] { return weighted_sum(mul(sigmoid(a), tanh(b)), probe); }, {{"a", a}, {"b", b}});
    expect_grads_match([&] { return weighted_sum(scale(relu(add(a, b)), 0.5), probe); }, {{"a", a}, {"b", b}});
    expect_grads_match([&] { return weighted_sum(add_broadcast(a, p), probe); }, {{"a", a}, {"p", p}});
    expect_grads_match([&] { return weighted_sum(permute(a, {2, 0, 1}), probe); }, {{"a", a}});
    const Tensor probe_n = probe_weights({2, 2, 4}, 22);
    expect_grads_match([&] { return weighted_sum(narrow(a, 1, 1, 2), probe_n); }, {{"a", a}});
    const Tensor probe_m = probe_weights({2, 4}, 23);
    expect_grads_match([&] { return weighted_sum(mean_dim(a, 1), probe_m); }, {{"a", a}});
}

TEST_CASE("permute places elements by the requested order") {
    Tensor t({2, 3, 4});
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<double>(i);
    Var y = permute(Var(t), {2, 0, 1});
    REQUIRE(y.shape() == Shape{4, 2, 3});
    for (std::int64_t i = 0; i < 2; ++i)
        for (std::int64_t j = 0; j < 3; ++j)
            for (std::int64_t k = 0; k < 4; ++k) CHECK(y.value().at({k, i, j}) == t.at({i, j, k}));
}

TEST_CASE("pooling and batch norm") {
    std::mt19937_64 rng(5);
    Var x = random_var({2, 3, 2, 7, 7}, rng);
    const Pool3dGeometry pool{{1, 3, 3}, {1, 2, 2}, {0, 1, 1}};
    Var y = max_pool3d(x, pool);
    CHECK(y.shape() == Shape{2, 3, 2, 4, 4});
    const Tensor probe = probe_weights(y.shape(), 31);
    expect_grads_match([&] { return weighted_sum(max_pool3d(x, pool), probe); }, {{"x", x}});

    const Tensor probe_g = probe_weights({2, 3}, 32);
    expect_grads_match([&] { return weighted_sum(global_avg_pool(x), probe_g); }, {{"x", x}});

    Tensor rm({3}, 0.0), rv({3}, 1.0);
    Var gamma = random_var({3}, rng), beta = random_var({3}, rng);
    const Tensor probe_b = probe_weights(x.shape(), 33);
    for (bool training : {true, false}) {
        expect_grads_match([&] { return weighted_sum(batch_norm(x, gamma, beta, {&rm, &rv}, training), probe_b); },
                           {{"x", x}, {"gamma", gamma}, {"beta", beta}});
    }

    // Training-mode output has zero mean and unit (biased) variance per channel
    // before the affine transform.
    Tensor rm2({3}, 0.0), rv2({3}, 1.0);
    Var ones(Tensor({3}, 1.0)), zeros(Tensor({3}, 0.0));
    Var z = batch_norm(x, ones, zeros, {&rm2, &rv2}, true, 0.1, 0.0);
    for (std::int64_t c = 0; c < 3; ++c) {
        double s = 0.0, sq = 0.0;
        std::int64_t m = 0;
        for (std::int64_t n = 0; n < 2; ++n)
            for (std::int64_t i = 0; i < 2 * 49; ++i, ++m) {
                const double v = z.value()[(n * 3 + c) * 98 + i];
                s += v;
                sq += v * v;
            }
        CHECK(std::abs(s / static_cast<double>(m)) < 1e-12);
        CHECK(sq / static_cast<double>(m) == doctest::Approx(1.0).epsilon(1e-9));
    }
    CHECK(rm2[0] != 0.0);
}

TEST_CASE("no graph is recorded under NoGradGuard or for constant inputs") {
    std::mt19937_64 rng(6);
    Var w = random_var({3, 4}, rng);
    Var x = random_var({2, 4}, rng, false);
    {
        NoGradGuard guard;
        CHECK_FALSE(linear(x, w, Var()).requires_grad());
    }
    CHECK(linear(x, w, Var()).requires_grad());
    Var c = random_var({3, 4}, rng, false);
    CHECK_FALSE(linear(x, c, Var()).requires_grad());
}

TEST_CASE("lstm and transformer layer gradients") {
    std::mt19937_64 rng(8);
    InitEngine init(9);
    Lstm lstm(5, 4, 2, init);
    Var x = random_var({3, 4, 5}, rng);
    const Tensor probe = probe_weights({3, 4}, 41);
    std::vector<seqcls::testing::GradCheckParam> params{{"x", x}};
    for (auto& p : lstm.named_parameters()) params.push_back({p.name, p.var});
    expect_grads_match([&] { return weighted_sum(lstm.forward(x), probe); }, params);

    TransformerEncoderLayer layer(8, 2, 6, init);
    Var s = random_var({2, 3, 8}, rng);
    const Tensor probe_t = probe_weights({2, 3, 8}, 42);
    std::vector<seqcls::testing::GradCheckParam> tparams{{"s", s}};
    for (auto& p : layer.named_parameters()) tparams.push_back({p.name, p.var});
    expect_grads_match([&] { return weighted_sum(layer.forward(s), probe_t); }, tparams);
}
