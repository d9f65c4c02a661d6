// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "peft/graph.hpp"
#include "peft/tensor.hpp"
#include "peft/verification.hpp"

using namespace peft;
using Td = Tensor<double>;
using Tf = Tensor<float>;

namespace {

Td mat(std::size_t r, std::size_t c, std::vector<double> v, bool rg = false) { return Td({r, c}, std::move(v), rg); }

std::vector<double> vals(const Td& t) { return t.values(); }

}  // namespace

TEST(Tensor, ShapeMustMatchData) {
    EXPECT_THROW(Td({2, 3}, std::vector<double>(5)), DimensionError);
    Td t({2, 3}, std::vector<double>(6));
    EXPECT_EQ(t.numel(), 6u);
    EXPECT_EQ(t.rows(), 2u);
    EXPECT_EQ(t.cols(), 3u);
}

TEST(Tensor, FrozenTensorNeverAccumulates) {
    auto t = Td::zeros({3});
    std::vector<double> g{1, 2, 3};
    t.accumulate_grad(g);
    EXPECT_FALSE(t.has_grad());
    t.set_requires_grad(true);
    t.accumulate_grad(g);
    ASSERT_TRUE(t.has_grad());
    EXPECT_EQ(t.grad().size(), t.numel());
    t.set_requires_grad(false);
    EXPECT_FALSE(t.has_grad());
}

TEST(Tensor, CopiesShareStorageClonesDoNot) {
    auto a = Td::full({2}, 1.0);
    auto b = a;
    auto c = a.clone();
    b[0] = 5.0;
    EXPECT_EQ(a[0], 5.0);
    EXPECT_EQ(c[0], 1.0);
    EXPECT_TRUE(a.same_storage(b));
    EXPECT_FALSE(a.same_storage(c));
}

TEST(Matmul, HandExample) {
    Graph<double> g;
    auto c = g.matmul(mat(2, 2, {1, 2, 3, 4}), mat(2, 2, {5, 6, 7, 8}));
    EXPECT_EQ(vals(c), (std::vector<double>{19, 22, 43, 50}));
}

TEST(Matmul, IdentityAndZero) {
    Graph<double> g;
    auto m = mat(2, 2, {0.3, -1.5, 2.25, 7.0});
    EXPECT_EQ(vals(g.matmul(Td::identity(2), m)), vals(m));
    EXPECT_EQ(vals(g.matmul(Td::zeros({2, 2}), m)), (std::vector<double>{0, 0, 0, 0}));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
    Graph<double> g;
    try {
        g.matmul(Td::zeros({2, 3}), Td::zeros({4, 5}));
        FAIL() << "expected DimensionError";
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
        EXPECT_NE(msg.find("[4x5]"), std::string::npos) << msg;
    }
}

TEST(Matmul, AssociativeWithinSinglePrecisionTolerance) {
    std::mt19937_64 rng(11);
    Graph<float> g;
    for (int trial = 0; trial < 20; ++trial) {
        auto a = Tf::uniform({8, 8}, -1.f, 1.f, rng);
        auto b = Tf::uniform({8, 8}, -1.f, 1.f, rng);
        auto c = Tf::uniform({8, 8}, -1.f, 1.f, rng);
        auto left = g.matmul(g.matmul(a, b), c);
        auto right = g.matmul(a, g.matmul(b, c));
        EXPECT_LE(max_abs_diff(left, right), 1e-5f);
    }
}

TEST(Elementwise, HandExamples) {
    Graph<double> g;
    auto a = Td({3}, {1, 2, 3});
    EXPECT_EQ(vals(g.mul(a, Td({3}, {4, 5, 6}))), (std::vector<double>{4, 10, 18}));
    EXPECT_EQ(vals(g.add(a, Td::zeros({3}))), vals(a));
    EXPECT_EQ(vals(g.scale(Td({2}, {2, 4}), 0.5)), (std::vector<double>{1, 2}));
    EXPECT_EQ(vals(g.sub(a, a)), (std::vector<double>{0, 0, 0}));
}

TEST(Elementwise, TrailingVectorBroadcastsOverRows) {
    Graph<double> g;
    auto m = mat(2, 3, {1, 2, 3, 4, 5, 6}, true);
    auto v = Td({3}, {10, 20, 30}, true);
    auto out = g.add(m, v);
    EXPECT_EQ(vals(out), (std::vector<double>{11, 22, 33, 14, 25, 36}));
    g.backward(g.sum(out));
    // The vector's adjoint is summed over the two rows.
    EXPECT_EQ(std::vector<double>(v.grad().begin(), v.grad().end()), (std::vector<double>{2, 2, 2}));
    EXPECT_THROW(g.add(m, Td::zeros({2})), DimensionError);
    Graph<double> g2;
    EXPECT_THROW(g2.mul(mat(2, 2, {1, 2, 3, 4}), mat(2, 3, {1, 2, 3, 4, 5, 6})), DimensionError);
}

TEST(Clamp01, Definition) {
    Graph<double> g;
    EXPECT_EQ(vals(g.clamp01(Td({3}, {-0.5, 0.3, 1.7}))), (std::vector<double>{0, 0.3, 1}));
}

TEST(Clamp01, SaturatedLowHasZeroAdjoint) {
    Graph<double> g;
    auto x = Td({3}, {-0.1, -2.0, -5.0}, true);
    auto y = g.clamp01(x);
    EXPECT_EQ(vals(y), (std::vector<double>{0, 0, 0}));
    g.backward(g.sum(g.add(y, x)));
    // d(sum(y + x))/dx = 0 + 1 everywhere: the clamp contributes nothing.
    for (auto v : x.grad()) EXPECT_EQ(v, 1.0);
}

TEST(Clamp01, InteriorPointPassesAdjoint) {
    Graph<double> g;
    auto x = Td({1}, {0.999999}, true);
    auto y = g.clamp01(x);
    EXPECT_EQ(y[0], 0.999999);
    g.backward(g.sum(y));
    EXPECT_EQ(x.grad()[0], 1.0);
}

TEST(Clamp01, BoundaryPointsHaveZeroSubgradient) {
    Graph<double> g;
    auto x = Td({2}, {0.0, 1.0}, true);
    g.backward(g.sum(g.clamp01(x)));
    EXPECT_EQ(x.grad()[0], 0.0);
    EXPECT_EQ(x.grad()[1], 0.0);
}

TEST(Clamp01, OutputAlwaysInUnitInterval) {
    std::mt19937_64 rng(3);
    Graph<double> g;
    auto y = g.clamp01(Td::uniform({1000}, -1e6, 1e6, rng));
    for (auto v : y.values()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(CosineSim, HandExamples) {
    Graph<double> g;
    EXPECT_NEAR(g.cosine_sim(Td({2}, {1, 1}), Td({2}, {1, 0})).item(), std::sqrt(0.5), 1e-4);
    EXPECT_EQ(g.cosine_sim(Td({2}, {1, 0}), Td({2}, {0, 1})).item(), 0.0);
    auto u = Td({3}, {0.4, -2.0, 7.5});
    EXPECT_NEAR(g.cosine_sim(u, u).item(), 1.0, 1e-6);
}

TEST(CosineSim, ZeroVectorGivesZeroNotNaN) {
    Graph<double> g;
    auto u = Td::zeros({4}, true);
    auto v = Td({4}, {1, 2, 3, 4}, true);
    auto c = g.cosine_sim(u, v);
    EXPECT_EQ(c.item(), 0.0);
    g.backward(g.sum(c));
    for (auto x : v.grad()) EXPECT_TRUE(std::isfinite(x));
}

TEST(CosineSim, DimensionMismatch) {
    Graph<double> g;
    EXPECT_THROW(g.cosine_sim(Td::zeros({2}), Td::zeros({3})), DimensionError);
}

TEST(Softmax, ConstantRowIsUniformAndRowsSumToOne) {
    Graph<double> g;
    auto s = g.softmax_rows(mat(2, 4, {3, 3, 3, 3, -1, 0.5, 2, 9}));
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(s.at(0, j), 0.25, 1e-12);
    for (std::size_t r = 0; r < 2; ++r) {
        double sum = 0;
        for (std::size_t j = 0; j < 4; ++j) sum += s.at(r, j);
        EXPECT_NEAR(sum, 1.0, 1e-6);
    }
}

TEST(LayerNorm, NormalisesEachRow) {
    Graph<double> g;
    auto y = g.layer_norm(mat(1, 3, {1, 2, 3}), Td::full({3}, 1.0), Td::zeros({3}));
    double mean = (y[0] + y[1] + y[2]) / 3.0;
    double var = ((y[0] - mean) * (y[0] - mean) + (y[1] - mean) * (y[1] - mean) + (y[2] - mean) * (y[2] - mean)) / 3.0;
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(var, 1.0, 1e-5);
    // Hand value: (1 - 2) / sqrt(2/3 + eps).
    EXPECT_NEAR(y[0], -1.0 / std::sqrt(2.0 / 3.0 + kLayerNormEps), 1e-12);
}

TEST(LayerNorm, RandomRowsHaveUnitVariance) {
    std::mt19937_64 rng(5);
    Graph<float> g;
    auto y = g.layer_norm(Tf::uniform({16, 32}, -3.f, 3.f, rng), Tf::full({32}, 1.f), Tf::zeros({32}));
    for (std::size_t r = 0; r < 16; ++r) {
        double m = 0, v = 0;
        for (std::size_t j = 0; j < 32; ++j) m += y.at(r, j);
        m /= 32;
        for (std::size_t j = 0; j < 32; ++j) v += (y.at(r, j) - m) * (y.at(r, j) - m);
        EXPECT_NEAR(m, 0.0, 1e-5);
        EXPECT_NEAR(v / 32, 1.0, 1e-5);
    }
}

TEST(Gelu, ExactErfForm) {
    Graph<double> g;
    auto y = g.gelu(Td({3}, {0.0, 1.0, -1.0}));
    EXPECT_EQ(y[0], 0.0);
    // 0.5 x (1 + erf(x / sqrt 2)) at x = +-1.
    EXPECT_NEAR(y[1], 0.8413447460685429, 1e-15);
    EXPECT_NEAR(y[2], -0.15865525393145707, 1e-15);
}

TEST(Backward, QuadraticDerivative) {
    Graph<double> g;
    auto w = Td({2}, {1, 2}, true);
    g.backward(g.sum(g.mul(w, w)));
    EXPECT_EQ(std::vector<double>(w.grad().begin(), w.grad().end()), (std::vector<double>{2, 4}));
}

TEST(Backward, FrozenInputHasNoGrad) {
    Graph<double> g;
    auto w = Td({2}, {1, 2}, true);
    auto frozen = Td({2}, {3, 4});
    g.backward(g.sum(g.mul(w, frozen)));
    EXPECT_FALSE(frozen.has_grad());
    EXPECT_EQ(w.grad()[1], 4.0);
}

TEST(Backward, UnrelatedTensorUntouched) {
    Graph<double> g;
    auto w = Td({2}, {1, 2}, true);
    auto other = Td({2}, {5, 6}, true);
    auto unused = g.mul(other, other);
    (void)unused;
    g.backward(g.sum(w));
    EXPECT_TRUE(!other.has_grad() || (other.grad()[0] == 0.0 && other.grad()[1] == 0.0));
}

TEST(Backward, RejectsSecondCallWithoutReset) {
    Graph<double> g;
    auto w = Td({2}, {1, 2}, true);
    auto loss = g.sum(g.mul(w, w));
    g.backward(loss);
    EXPECT_THROW(g.backward(loss), StateError);
    g.reset();
    w.zero_grad();
    g.backward(g.sum(g.mul(w, w)));
    EXPECT_EQ(w.grad()[0], 2.0);
}

TEST(Backward, RejectsNonScalarLoss) {
    Graph<double> g;
    auto w = Td({2}, {1, 2}, true);
    EXPECT_THROW(g.backward(g.mul(w, w)), ContractError);
}

TEST(Backward, RejectsEmptyGraph) {
    Graph<double> g;
    EXPECT_THROW(g.backward(Td::scalar(1.0)), ContractError);
}

TEST(Backward, ReverseOrderMatchesChainRule) {
    // y = gelu(x * 3), dy/dx = 3 * gelu'(3x), with gelu'(z) = Phi(z) + z phi(z).
    Graph<double> g;
    auto x = Td({1}, {0.2}, true);
    g.backward(g.sum(g.gelu(g.scale(x, 3.0))));
    const double z = 0.6;
    const double expected = 3.0 * (0.5 * (1 + std::erf(z / std::sqrt(2.0))) +
                                   z * std::exp(-0.5 * z * z) / std::sqrt(2.0 * 3.14159265358979323846));
    EXPECT_NEAR(x.grad()[0], expected, 1e-14);
}

TEST(Backward, DisabledModeRecordsNothing) {
    Graph<double> g(GradMode::disabled);
    auto w = Td({2}, {1, 2}, true);
    auto y = g.mul(w, w);
    EXPECT_EQ(g.size(), 0u);
    EXPECT_FALSE(y.requires_grad());
}

TEST(Gather, RejectsOutOfRangeIndex) {
    Graph<double> g;
    std::vector<std::size_t> ids{0, 3};
    EXPECT_THROW(g.gather_rows(Td::zeros({3, 2}), ids), InputError);
}

// Finite differences against every differentiable op, on random inputs in [-1, 1].
class OpGradcheck : public ::testing::Test {
protected:
    std::mt19937_64 rng{2024};
    Td rand(Shape s) { return Td::uniform(std::move(s), -1.0, 1.0, rng, true); }

    void check(const char* what, const std::function<Td(Graph<double>&)>& f, std::vector<NamedTensor<double>> params) {
        Td probe;
        {
            Graph<double> g(GradMode::disabled);
            probe = f(g);
        }
        const auto w = Td::uniform(probe.shape(), -1.0, 1.0, rng);
        auto loss = [&](Graph<double>& g) { return g.sum(g.mul(f(g), w)); };
        const auto rep = gradcheck(loss, params, 1e-6);
        EXPECT_TRUE(rep.pass) << what << ": " << rep.worst_param << "[" << rep.worst_index
                              << "] rel err " << rep.max_rel_error;
    }
};

TEST_F(OpGradcheck, Matmul) {
    auto a = rand({3, 4}), b = rand({4, 2});
    check("matmul", [&](Graph<double>& g) { return g.matmul(a, b); }, {{"a", a}, {"b", b}});
}

TEST_F(OpGradcheck, TransposeAddSubMulScale) {
    auto a = rand({3, 4}), b = rand({3, 4}), v = rand({4});
    check("add", [&](Graph<double>& g) { return g.add(a, v); }, {{"a", a}, {"v", v}});
    check("sub", [&](Graph<double>& g) { return g.sub(a, b); }, {{"a", a}, {"b", b}});
    check("mul", [&](Graph<double>& g) { return g.mul(a, v); }, {{"a", a}, {"v", v}});
    check("scale", [&](Graph<double>& g) { return g.scale(g.transpose(a), -1.7); }, {{"a", a}});
}

TEST_F(OpGradcheck, Clamp01AwayFromKinks) {
    auto x = Td({6}, {-0.7, -0.2, 0.15, 0.5, 0.93, 1.4}, true);
    check("clamp01", [&](Graph<double>& g) { return g.clamp01(x); }, {{"x", x}});
}

TEST_F(OpGradcheck, Nonlinearities) {
    auto x = rand({3, 5}), gain = rand({5}), bias = rand({5});
    check("gelu", [&](Graph<double>& g) { return g.gelu(x); }, {{"x", x}});
    check("softmax_rows", [&](Graph<double>& g) { return g.softmax_rows(x); }, {{"x", x}});
    check("layer_norm", [&](Graph<double>& g) { return g.layer_norm(x, gain, bias); },
          {{"x", x}, {"gain", gain}, {"bias", bias}});
}

TEST_F(OpGradcheck, Similarities) {
    auto h = rand({4, 6}), v = rand({6}), w = rand({4, 1});
    check("cosine_rows", [&](Graph<double>& g) { return g.cosine_rows(h, v); }, {{"h", h}, {"v", v}});
    check("dot_rows", [&](Graph<double>& g) { return g.dot_rows(h, v); }, {{"h", h}, {"v", v}});
    check("scale_rows", [&](Graph<double>& g) { return g.scale_rows(h, w); }, {{"h", h}, {"w", w}});
}

TEST_F(OpGradcheck, Reductions) {
    auto x = rand({4, 3});
    std::vector<std::size_t> labels{2, 0, 1, 1};
    check("mean_rows", [&](Graph<double>& g) { return g.mean_rows(x); }, {{"x", x}});
    check("cross_entropy", [&](Graph<double>& g) { return g.cross_entropy(x, labels); }, {{"x", x}});
}

TEST_F(OpGradcheck, Attention) {
    auto q = rand({7, 4}), k = rand({7, 4}), v = rand({7, 4});
    std::vector<std::size_t> lengths{3, 4};
    check("attention", [&](Graph<double>& g) { return g.attention(q, k, v, lengths, 2); },
          {{"q", q}, {"k", k}, {"v", v}});
}

TEST_F(OpGradcheck, Indexing) {
    auto a = rand({5, 3}), b = rand({2, 3}), c = rand({5, 2});
    std::vector<std::size_t> ids{4, 0, 4, 2};
    check("slice_rows", [&](Graph<double>& g) { return g.slice_rows(a, 1, 3); }, {{"a", a}});
    check("slice_cols", [&](Graph<double>& g) { return g.slice_cols(a, 1, 2); }, {{"a", a}});
    check("concat_rows", [&](Graph<double>& g) { return g.concat_rows({a, b}); }, {{"a", a}, {"b", b}});
    check("concat_cols", [&](Graph<double>& g) { return g.concat_cols({a, c}); }, {{"a", a}, {"c", c}});
    check("gather_rows", [&](Graph<double>& g) { return g.gather_rows(a, ids); }, {{"a", a}});
}
