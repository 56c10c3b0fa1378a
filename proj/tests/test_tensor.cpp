#include <gtest/gtest.h>

#include <sstream>

#include "decoy/gradcheck.hpp"
#include "decoy/ops.hpp"
#include "decoy/optim.hpp"
#include "decoy/random.hpp"
#include "decoy/tnsr.hpp"
#include "random_graph.hpp"

using namespace decoy;
using D = double;
using decoy::testing::RandomGraph;

namespace {

Tensor<D> seq(Shape s, D start = 0.1, D step = 0.37) {
    std::vector<D> v(numel_of(s));
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::sin(start + step * static_cast<D>(i));
    return Tensor<D>(std::move(s), std::move(v));
}

}  // namespace

TEST(Softmax, UniformRowIsSymmetric) {
    auto y = ops::softmax(Tensor<float>({1, 3}, {0, 0, 0}));
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(y[i], 1.0f / 3, 1e-7f);
}

TEST(Softmax, LargeBiasSelectsOneColumn) {
    auto y = ops::softmax(Tensor<float>({1, 3}, {0, 0, 0}), Tensor<float>({1, 3}, {1e4f, 0, 0}));
    EXPECT_NEAR(y[0], 1.0f, 1e-6f);
    EXPECT_NEAR(y[1], 0.0f, 1e-6f);
    EXPECT_NEAR(y[2], 0.0f, 1e-6f);
}

TEST(Softmax, RowsSumToOneWithAndWithoutBias) {
    Rng rng = make_rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        auto x = randn<float>({7, 9}, rng, 5.0f);
        auto b = rand_uniform<float>({1, 9}, rng, 0.0f, 1e4f);
        for (const auto& y : {ops::softmax(x), ops::softmax(x, b)})
            for (std::size_t r = 0; r < 7; ++r) {
                double s = 0;
                for (std::size_t c = 0; c < 9; ++c) s += y.at(r, c);
                EXPECT_NEAR(s, 1.0, 1e-6);
            }
    }
}

TEST(Matmul, MatchesTripleLoop) {
    Rng rng = make_rng(11);
    auto a = randn<float>({2, 3}, rng), b = randn<float>({3, 2}, rng);
    auto c = ops::matmul(a, b);
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 2; ++j) {
            double s = 0;
            for (std::size_t k = 0; k < 3; ++k) s += static_cast<double>(a.at(i, k)) * b.at(k, j);
            EXPECT_NEAR(c.at(i, j), s, 1e-6);
        }
}

TEST(Ops, ShapeMismatchNamesBothShapes) {
    Tensor<float> a = Tensor<float>::zeros({2, 3}), b = Tensor<float>::zeros({2, 3});
    try {
        ops::matmul(a, b);
        FAIL();
    } catch (const ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos);
    }
    EXPECT_THROW(ops::add(a, Tensor<float>::zeros({3, 2})), ShapeError);
}

TEST(Ops, ZeroLengthAxisIsRejected) {
    EXPECT_THROW(Tensor<float>({2, 0}, {}), ShapeError);
}

TEST(Ops, PoolThenUpsampleKeepsBlockMeans) {
    auto x = seq({16, 3});
    auto p = ops::pool_tokens(x, 4);
    ASSERT_EQ(p.shape(), (Shape{4, 3}));
    EXPECT_NEAR(p.at(0, 1), (x.at(0, 1) + x.at(1, 1) + x.at(4, 1) + x.at(5, 1)) / 4, 1e-12);
    auto u = ops::upsample_tokens(p, 2);
    EXPECT_EQ(u.shape(), (Shape{16, 3}));
    EXPECT_EQ(u.at(5, 2), p.at(0, 2));
    EXPECT_EQ(u.at(15, 0), p.at(3, 0));
}

TEST(Backward, SumGivesOnes) {
    Tape<D> tape;
    auto x = Tensor<D>({4}, {1, 2, 3, 4}, true);
    Tensor<D> y;
    {
        Recording<D> rec(tape);
        y = ops::sum(x);
    }
    tape.backward(y);
    auto g = tape.grad(x);
    for (int i = 0; i < 4; ++i) EXPECT_EQ(g[i], 1.0);
}

TEST(Backward, MseUsesMeanConvention) {
    Tape<D> tape;
    auto x = Tensor<D>({1}, {2}, true);
    Tensor<D> y;
    {
        Recording<D> rec(tape);
        y = ops::mse(x, Tensor<D>::zeros({1}));
    }
    tape.backward(y);
    EXPECT_DOUBLE_EQ(tape.grad(x)[0], 4.0);

    Tape<D> tape2;
    auto x2 = Tensor<D>({2}, {2, 0}, true);
    {
        Recording<D> rec(tape2);
        y = ops::mse(x2, Tensor<D>::zeros({2}));
    }
    tape2.backward(y);
    EXPECT_DOUBLE_EQ(tape2.grad(x2)[0], 2.0);  // 2 * 2 / n
}

TEST(Backward, NonScalarRejected) {
    Tape<D> tape;
    auto x = Tensor<D>({2}, {1, 2}, true);
    Tensor<D> y;
    {
        Recording<D> rec(tape);
        y = ops::scale(x, 2.0);
    }
    EXPECT_THROW(tape.backward(y), ShapeError);
}

TEST(Backward, SecondSweepRejected) {
    Tape<D> tape;
    auto x = Tensor<D>({2}, {1, 2}, true);
    Tensor<D> y;
    {
        Recording<D> rec(tape);
        y = ops::sum(ops::mul(x, x));
    }
    tape.backward(y);
    EXPECT_THROW(tape.backward(y), Error);
}

TEST(Backward, UnreachableLeafGetsZeroGrad) {
    Tape<D> tape;
    auto x = Tensor<D>({2}, {1, 2}, true), z = Tensor<D>({3}, {1, 2, 3}, true);
    Tensor<D> y;
    {
        Recording<D> rec(tape);
        y = ops::sum(x);
        ops::sum(z);
    }
    tape.backward(y);
    auto g = tape.grad(z);
    for (int i = 0; i < 3; ++i) EXPECT_EQ(g[i], 0.0);
}

TEST(CheckGradient, LinearIsExact) {
    Rng rng = make_rng(5);
    auto x = randn<D>({5, 4}, rng);
    EXPECT_LT(check_gradient<D>([](const Tensor<D>& v) { return ops::sum(v); }, x, 1e-3), 1e-7);
}

TEST(CheckGradient, RejectsNonDeterministicFunction) {
    int calls = 0;
    auto f = [&](const Tensor<D>& v) { return ops::add_scalar(ops::sum(v), static_cast<D>(calls++)); };
    EXPECT_THROW(check_gradient<D>(f, Tensor<D>({2}, {1, 2}), 1e-3), Error);
    EXPECT_THROW(check_gradient<D>([](const Tensor<D>& v) { return ops::sum(v); }, Tensor<D>({1}, {1}), 0.0),
                 ConfigError);
}


TEST(GradientSuite, FiftySeededRandomGraphs) {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        RandomGraph g(seed);
        Rng rng = make_rng(seed, 1);
        auto x = randn<D>({4, 6}, rng);
        const D err = check_gradient<D>(g, x, 1e-3);
        EXPECT_LT(err, 1e-4) << "graph seed " << seed;
    }
}

TEST(Determinism, SameInputsGiveBitIdenticalValuesAndGrads) {
    auto run = [] {
        RandomGraph g(7);
        Rng rng = make_rng(7, 1);
        auto x = randn<D>({4, 6}, rng).with_grad();
        Tape<D> tape;
        Tensor<D> y;
        {
            Recording<D> rec(tape);
            y = g(x);
        }
        tape.backward(y);
        return std::pair(y, tape.grad(x));
    };
    auto a = run(), b = run();
    EXPECT_TRUE(bit_equal(a.first, b.first));
    EXPECT_TRUE(bit_equal(a.second, b.second));
}

TEST(Finite, OperationsOnFiniteInputsStayFinite) {
    Rng rng = make_rng(9);
    auto x = randn<float>({8, 8}, rng, 50.0f);
    auto b = rand_uniform<float>({1, 8}, rng, 0.0f, 1e4f);
    for (const auto& y : {ops::softmax(x, b), ops::gelu(x), ops::layer_norm(x, Tensor<float>::full({8}, 1.0f),
                                                                            Tensor<float>::zeros({8}))})
        for (float v : y.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Adam, ZeroGradLeavesParamsAndDecaysMoments) {
    AdamState<D> st;
    auto p = Tensor<D>({2}, {1, -1});
    auto out = adam_step<D>({p}, {Tensor<D>({2}, {0.5, 0.5})}, st, 0.1);
    const D m0 = st.m[0][0], v0 = st.v[0][0];
    out = adam_step<D>(out, {Tensor<D>::zeros({2})}, st, 0.1);
    EXPECT_DOUBLE_EQ(st.m[0][0], 0.9 * m0);
    EXPECT_DOUBLE_EQ(st.v[0][0], 0.999 * v0);

    AdamState<D> fresh;
    auto same = adam_step<D>({p}, {Tensor<D>::zeros({2})}, fresh, 0.1);
    EXPECT_TRUE(bit_equal(same[0], p));
}

TEST(Adam, FirstStepIsLrTimesSignLike) {
    AdamState<D> st;
    const D lr = 1e-3;
    auto p = Tensor<D>({3}, {0, 0, 0});
    const std::vector<D> g{0.3, -2.0, 1e-3};
    auto out = adam_step<D>({p}, {Tensor<D>({3}, g)}, st, lr);
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(out[0][i], -lr * g[i] / (std::abs(g[i]) + 1e-8), 1e-6);
}

TEST(Adam, ConstantGradStepApproachesLr) {
    AdamState<D> st;
    const D lr = 0.01;
    std::vector<Tensor<D>> p{Tensor<D>({1}, {0})};
    D before = 0;
    for (int i = 0; i < 5000; ++i) {
        before = p[0][0];
        p = adam_step<D>(p, {Tensor<D>({1}, {0.7})}, st, lr);
    }
    EXPECT_NEAR(std::abs(p[0][0] - before), lr, 0.01 * lr);
}

TEST(Adam, ShapeMismatchRejected) {
    AdamState<D> st;
    EXPECT_THROW(adam_step<D>({Tensor<D>::zeros({2})}, {Tensor<D>::zeros({3})}, st, 0.1), ShapeError);
    EXPECT_THROW(adam_step<D>({Tensor<D>::zeros({2})}, {}, st, 0.1), ShapeError);
}

TEST(Tnsr, BitExactRoundTripAndHeaderLayout) {
    Rng rng = make_rng(21);
    auto t = randn<float>({3, 5, 2}, rng);
    std::stringstream ss;
    tnsr::write(ss, t);
    const std::string bytes = ss.str();
    ASSERT_EQ(bytes.size(), 4 + 1 + 4 + 3 * 4 + 30 * 4u);
    EXPECT_EQ(bytes.substr(0, 4), "TNSR");
    EXPECT_EQ(static_cast<int>(bytes[4]), 1);
    EXPECT_EQ(static_cast<unsigned char>(bytes[5]), 3u);  // rank, little-endian
    auto back = tnsr::read(ss);
    EXPECT_TRUE(bit_equal(back, t));
}

TEST(Tnsr, BadMagicRejected) {
    std::stringstream ss("XXXX\x01");
    EXPECT_THROW(tnsr::read(ss), Error);
}
