#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace moeroute;

namespace {

// Backprop gradient of f at each input, compared against central differences.
void expect_grads_match(const std::vector<Tensor>& inputs, const std::function<Tensor()>& f, double tol = 1e-7) {
    for (const auto& x : inputs) {
        x.set_requires_grad(true);
        x.zero_grad();
    }
    Tape tape;
    Tensor loss;
    {
        Tape::Recording rec(tape);
        loss = f();
    }
    tape.backward(loss);
    for (const auto& x : inputs) {
        Tensor probe = x;
        const auto analytic = std::vector<double>(x.grad().begin(), x.grad().end());
        const auto numeric = oracle::central_diff(
            [&] {
                Tape::Pause p;
                return f().item();
            },
            probe.mutable_data(), 1e-6);
        ASSERT_EQ(analytic.size(), numeric.size());
        for (std::size_t i = 0; i < numeric.size(); ++i)
            EXPECT_NEAR(analytic[i], numeric[i], tol * std::max(1.0, std::abs(numeric[i]))) << "element " << i;
    }
}

}  // namespace

TEST(Tensor, ShapesAndFactories) {
    const auto m = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
    EXPECT_EQ(m.rows(), 2u);
    EXPECT_EQ(m.cols(), 3u);
    EXPECT_DOUBLE_EQ(m.at(1, 2), 6.0);
    EXPECT_THROW(Tensor({2, 2}, {1.0}), DimensionError);
    EXPECT_THROW(Tensor::zeros({2, 2, 2}), DimensionError);
    EXPECT_THROW(m.item(), ContractError);
    EXPECT_DOUBLE_EQ(Tensor::scalar(3.5).item(), 3.5);
}

TEST(Tensor, SameSeedSameDraws) {
    SeededRng a(9), b(9);
    const auto x = Tensor::randn({4, 4}, a), y = Tensor::randn({4, 4}, b);
    EXPECT_EQ(x.values(), y.values());
    SeededRng c(10);
    EXPECT_NE(x.values(), Tensor::randn({4, 4}, c).values());
}

TEST(Tensor, ForkedStreamsDiffer) {
    SeededRng r(1);
    EXPECT_NE(r.fork(1).next_u64(), r.fork(2).next_u64());
    EXPECT_EQ(r.fork(3).next_u64(), SeededRng(1).fork(3).next_u64());
}

TEST(Ops, MatmulAgainstLoops) {
    SeededRng rng(1);
    const auto a = Tensor::randn({3, 5}, rng), b = Tensor::randn({5, 4}, rng);
    const auto ref = oracle::mul(oracle::to_mat(a), oracle::to_mat(b));
    EXPECT_LT(oracle::max_abs_diff(ref, matmul(a, b)), 1e-13);
    const auto bt = Tensor::randn({4, 5}, rng);
    const auto ref_nt = oracle::mul(oracle::to_mat(a), oracle::transpose(oracle::to_mat(bt)));
    EXPECT_LT(oracle::max_abs_diff(ref_nt, matmul_nt(a, bt)), 1e-13);
    EXPECT_THROW(matmul(a, a), DimensionError);
}

TEST(Ops, BroadcastRules) {
    const auto a = Tensor::matrix(2, 2, {1, 2, 3, 4});
    const auto row = add(a, Tensor::vector({10, 20}));
    EXPECT_EQ(row.values(), (std::vector<double>{11, 22, 13, 24}));
    EXPECT_EQ(add_scalar(a, 1.0).values(), (std::vector<double>{2, 3, 4, 5}));
    EXPECT_THROW(add(a, Tensor::vector({1, 2, 3})), DimensionError);
}

TEST(Ops, SoftmaxRowsSumToOneAndResistOverflow) {
    const auto s = softmax_rows(Tensor::matrix(2, 3, {1000, 1001, 1002, -5, 0, 5}));
    for (std::size_t r = 0; r < 2; ++r) EXPECT_NEAR(s.at(r, 0) + s.at(r, 1) + s.at(r, 2), 1.0, 1e-15);
    EXPECT_TRUE(s.all_finite());
}

TEST(Ops, NonFiniteIsRejected) {
    EXPECT_THROW(log(Tensor::vector({-1.0})), NumericError);
    EXPECT_THROW(exp(Tensor::vector({1000.0})), NumericError);
}

TEST(Ops, LayerNormMatchesReference) {
    SeededRng rng(2);
    const auto x = Tensor::randn({3, 6}, rng), g = Tensor::randn({6}, rng), b = Tensor::randn({6}, rng);
    EXPECT_LT(oracle::max_abs_diff(oracle::layer_norm(oracle::to_mat(x), g, b), layer_norm(x, g, b)), 1e-13);
    // a constant row has zero variance and normalizes to the bias
    const auto c = layer_norm(Tensor::full({1, 6}, 3.0), g, b);
    for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(c[j], b[j], 1e-12);
}

TEST(Gradients, Elementwise) {
    SeededRng rng(3);
    const auto x = Tensor::randn({3, 4}, rng), y = Tensor::randn({3, 4}, rng), r = Tensor::randn({4}, rng);
    expect_grads_match({x, y, r}, [&] { return sum(multiply(add(x, r), exp(scale(y, 0.3)))); });
    const auto pos = Tensor::uniform({2, 3}, rng, 0.5, 2.0);
    expect_grads_match({pos}, [&] { return mean(log(maximum(pos, 1e-3))); });
}

TEST(Gradients, MatmulSoftmaxLayerNorm) {
    SeededRng rng(4);
    const auto a = Tensor::randn({3, 4}, rng), b = Tensor::randn({4, 5}, rng);
    const auto g = Tensor::randn({5}, rng), beta = Tensor::randn({5}, rng), w = Tensor::randn({3, 5}, rng);
    expect_grads_match({a, b, g, beta}, [&] {
        return sum(multiply(softmax_rows(layer_norm(matmul(a, b), g, beta)), w));
    });
    const auto c = Tensor::randn({5, 4}, rng);
    expect_grads_match({a, c}, [&] { return sum(multiply(matmul_nt(a, c), w)); });
}

TEST(Gradients, StructuralOps) {
    SeededRng rng(5);
    const auto t = Tensor::randn({6, 4}, rng), u = Tensor::randn({2, 4}, rng);
    const std::vector<int> ids{0, 3, 3, 5};
    const std::vector<int> cols{1, 0, 3, 2, 2, 0};
    expect_grads_match({t, u}, [&] {
        const auto rows = concat_rows({slice_rows(t, 1, 3), u, gather_rows(t, ids)});
        const auto wide = concat_cols({slice_cols(rows, 0, 2), repeat_cols(slice_cols(rows, 3, 4), 2)});
        return add(sum(sum_col_groups(multiply(wide, wide), 2)), sum(pick(t, cols)));
    });
}

TEST(Gradients, ReluAwayFromKink) {
    const auto x = Tensor::vector({-1.0, -0.2, 0.3, 2.0});
    expect_grads_match({x}, [&] { return sum(multiply(relu(x), x)); });
}

TEST(Tape, PauseStopsRecording) {
    const auto x = Tensor::vector({1.0, 2.0});
    x.set_requires_grad(true);
    Tape tape;
    {
        Tape::Recording rec(tape);
        {
            Tape::Pause p;
            sum(x);
        }
        EXPECT_EQ(tape.size(), 0u);
        sum(x);
    }
    EXPECT_EQ(tape.size(), 1u);
}

TEST(Tape, BackwardNeedsScalarFromThisTape) {
    const auto x = Tensor::vector({1.0, 2.0});
    x.set_requires_grad(true);
    Tape tape;
    Tensor v;
    {
        Tape::Recording rec(tape);
        v = scale(x, 2.0);
    }
    EXPECT_THROW(tape.backward(v), ContractError);
    EXPECT_THROW(tape.backward(Tensor::scalar(1.0)), ContractError);
}

TEST(FiniteDiff, LibraryHelperAgreesWithIndependentOne) {
    const auto x = Tensor::vector({0.3, -0.7, 1.1});
    const auto f = [](const Tensor& t) { return std::sin(t[0]) * t[1] + t[2] * t[2] * t[2]; };
    const auto g = finite_diff_grad(f, x, 1e-6);
    EXPECT_NEAR(g[0], std::cos(0.3) * -0.7, 1e-8);
    EXPECT_NEAR(g[1], std::sin(0.3), 1e-8);
    EXPECT_NEAR(g[2], 3 * 1.1 * 1.1, 1e-8);
}

TEST(Adam, MinimizesQuadratic) {
    const auto x = Tensor::vector({3.0, -2.0});
    x.set_requires_grad(true);
    Adam opt({x}, {0.1});
    for (int i = 0; i < 500; ++i) {
        opt.zero_grad();
        Tape tape;
        Tensor loss;
        {
            Tape::Recording rec(tape);
            loss = sum(multiply(x, x));
        }
        tape.backward(loss);
        opt.step();
    }
    EXPECT_NEAR(x[0], 0.0, 1e-3);
    EXPECT_NEAR(x[1], 0.0, 1e-3);
}
