#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "fixture.hpp"
#include "oracles.hpp"

using namespace moeroute;

namespace {

Tensor two_col(std::vector<double> t5) {
    std::vector<double> v;
    for (double x : t5) {
        v.push_back(1.0 - x);
        v.push_back(x);
    }
    return Tensor::matrix(t5.size(), 2, std::move(v));
}

// Per-row KL(S || U) written out by hand.
double kl_uniform(double s) {
    double k = std::log(2.0);
    for (double p : {s, 1.0 - s})
        if (p > 0.0) k += p * std::log(p);
    return k;
}

}  // namespace

TEST(Balance, NonNegativeAndZeroOnlyAtUniform) {
    SeededRng rng(1);
    EXPECT_NEAR(balance_loss(two_col({0.5, 0.5, 0.5})).item(), 0.0, 1e-12);
    for (int i = 0; i < 200; ++i) {
        std::vector<double> s(1 + rng.below(5));
        for (auto& v : s) v = rng.uniform(0.0, 1.0);
        const double b = balance_loss(two_col(s)).item();
        double want = 0.0;
        for (double v : s) want += kl_uniform(v);
        EXPECT_NEAR(b, want / static_cast<double>(s.size()), 1e-12);
        EXPECT_GE(b, 0.0);
    }
    EXPECT_GT(balance_loss(two_col({0.5 + 1e-4})).item(), 0.0);
}

TEST(Balance, OneHotGivesLn2) {
    EXPECT_NEAR(balance_loss(two_col({1.0})).item(), std::numbers::ln2, 1e-12);
    EXPECT_NEAR(balance_loss(two_col({0.0, 1.0})).item(), std::numbers::ln2, 1e-12);
}

TEST(Balance, LiteralSignIsNegation) {
    const auto s = two_col({0.2, 0.9});
    EXPECT_DOUBLE_EQ(balance_loss(s, {}, true).item(), -balance_loss(s).item());
}

TEST(Balance, WeightsActAsRepeatedRows) {
    const auto merged = balance_loss(two_col({0.3, 0.8}), std::vector<double>{3.0, 1.0}).item();
    const auto expanded = balance_loss(two_col({0.3, 0.3, 0.3, 0.8})).item();
    EXPECT_NEAR(merged, expanded, 1e-15);
}

TEST(SpeedPenalty, ZeroIffUnderThreshold) {
    EXPECT_EQ(speed_penalty(two_col({0.0, 0.05, 0.08}), 0.08).item(), 0.0);
    EXPECT_GT(speed_penalty(two_col({0.0, 0.081}), 0.08).item(), 0.0);
    EXPECT_NEAR(speed_penalty(two_col({0.5, 0.0}), 0.08).item(), 0.21, 1e-15);
    EXPECT_THROW(speed_penalty(Tensor::zeros({2, 3}), 0.08), DimensionError);
}

TEST(CrossEntropy, MatchesHandComputation) {
    const auto p = Tensor::matrix(2, 3, {0.2, 0.5, 0.3, 0.1, 0.1, 0.8});
    const std::vector<int> y{1, 2};
    EXPECT_NEAR(ce_loss(p, y).item(), -(std::log(0.5) + std::log(0.8)) / 2, 1e-15);
    EXPECT_THROW(ce_loss(p, std::vector<int>{1}), DimensionError);
}

TEST(Total, IsWeightedSum) {
    LossWeights w;
    w.lambda1 = 0.7;
    w.lambda2 = 1.3;
    const auto t = total_loss(Tensor::scalar(2.0), Tensor::scalar(0.5), Tensor::scalar(0.25), w);
    EXPECT_DOUBLE_EQ(t.l_total(), 2.0 + 0.7 * 0.5 + 1.3 * 0.25);
}

TEST(Weights, Validation) {
    LossWeights w;
    EXPECT_NO_THROW(w.validate());
    w.lambda2 = -1.0;
    EXPECT_THROW(w.validate(), ConfigError);
    w = {};
    w.t_u = 1.5;
    EXPECT_THROW(w.validate(), ConfigError);
}

// The aggregated training objective must equal the loss read off the soft
// mixture itself: CE at the answer slots of moe_forward_soft, and Bal/Pen
// averaged over every routing unit.
TEST(RouterObjective, EqualsSoftMixtureLoss) {
    const auto w = fixture::make_world(6);
    SeededRng rng(2);
    const auto m = RouterMLP::random(16, 8, RouterInput::Concat, rng);
    LossWeights lw;
    for (auto g : {Granularity::Token, Granularity::Sequence}) {
        const auto ctx = fixture::context(w, m, g);
        std::vector<RouterSample> samples;
        double ce = 0.0, n_ans = 0.0;
        std::vector<double> units_t5;
        for (std::size_t q = 0; q < w.data.size(); ++q) {
            const auto& ex = w.data[q];
            samples.push_back(make_router_sample(ex, w.caches[q], ctx));
            const auto soft = moe_forward_soft(ex, ctx, w.pair());
            for (std::size_t j = 0; j < ex.answer_length(); ++j) {
                ce -= std::log(soft.probs.at(ex.answer_offset + j, static_cast<std::size_t>(ex.targets[j])));
                n_ans += 1.0;
            }
            for (std::size_t u = 0; u < soft.scores.size(); ++u) units_t5.push_back(soft.scores.t5(u));
        }
        std::vector<const RouterSample*> ptrs;
        for (const auto& s : samples) ptrs.push_back(&s);
        const auto loss = router_objective(m, stack_samples(ptrs), lw);
        const auto scores = two_col(units_t5);
        EXPECT_NEAR(loss.l_ce(), ce / n_ans, 1e-12) << to_string(g);
        EXPECT_NEAR(loss.l_bal(), balance_loss(scores).item(), 1e-12) << to_string(g);
        EXPECT_NEAR(loss.l_pen(), speed_penalty(scores, lw.t_u).item(), 1e-12) << to_string(g);
    }
}

TEST(RouterObjective, GradientMatchesFiniteDifferences) {
    const auto w = fixture::make_world(6);
    SeededRng rng(3);
    const auto m = RouterMLP::random(16, 6, RouterInput::Concat, rng);
    const auto ctx = fixture::context(w, m, Granularity::Token);
    std::vector<RouterSample> samples;
    for (std::size_t q = 0; q < w.data.size(); ++q) samples.push_back(make_router_sample(w.data[q], w.caches[q], ctx));
    std::vector<const RouterSample*> ptrs;
    for (const auto& s : samples) ptrs.push_back(&s);
    const auto batch = stack_samples(ptrs);
    LossWeights lw;
    lw.t_u = 0.3;
    m.set_trainable(true);
    Tape tape;
    LossBreakdown loss;
    {
        Tape::Recording rec(tape);
        loss = router_objective(m, batch, lw);
    }
    tape.backward(loss.total);
    for (auto p : m.parameters()) {
        const std::vector<double> g(p.grad().begin(), p.grad().end());
        const auto num = oracle::central_diff(
            [&] {
                Tape::Pause pause;
                return router_objective(m, batch, lw).l_total();
            },
            p.mutable_data(), 1e-6);
        for (std::size_t i = 0; i < g.size(); ++i)
            EXPECT_LE(std::abs(g[i] - num[i]), 1e-5 * std::max(1.0, std::abs(num[i]))) << i;
    }
}

TEST(RouterTraining, DeterministicAndLeavesExpertsAlone) {
    const auto w = fixture::make_world(30);
    const auto before = w.mamba->parameters()[0].values();
    const auto run = [&] {
        SeededRng rng(4);
        auto m = RouterMLP::random(16, 8, RouterInput::Concat, rng);
        const auto ctx = fixture::context(w, m, Granularity::Sequence);
        std::vector<Example> tr(w.data.begin(), w.data.begin() + 24), va(w.data.begin() + 24, w.data.end());
        std::vector<AnswerCache> tc(w.caches.begin(), w.caches.begin() + 24), vc(w.caches.begin() + 24, w.caches.end());
        const auto data = build_router_data(tr, tc, va, vc, ctx);
        TrainState st;
        st.epochs = 5;
        st.batch = 8;
        st.lr = 1e-2;
        st.seed = 11;
        train_router(m, data, LossWeights{}, st);
        return std::pair{m, st};
    };
    const auto [m1, s1] = run();
    const auto [m2, s2] = run();
    EXPECT_EQ(m1.w1.values(), m2.w1.values());
    EXPECT_EQ(m1.b2.values(), m2.b2.values());
    ASSERT_EQ(s1.history.size(), 5u);
    EXPECT_EQ(s1.step, 15u);
    EXPECT_LT(s1.history.back().l_total, s1.history.front().l_total);
    EXPECT_EQ(w.mamba->parameters()[0].values(), before);
    for (const auto& p : m1.parameters()) EXPECT_FALSE(p.requires_grad());
    std::ostringstream csv;
    write_epoch_csv(csv, s1.history);
    EXPECT_EQ(csv.str().substr(0, csv.str().find('\n')), kEpochCsvHeader);
}

TEST(RouterTraining, CachedEvaluationEqualsHardExecution) {
    const auto w = fixture::make_world(12);
    SeededRng rng(5);
    auto m = RouterMLP::random(16, 8, RouterInput::Concat, rng);
    for (auto& v : m.w2.mutable_data()) v *= 10.0;
    for (auto g : {Granularity::Token, Granularity::Sequence}) {
        const auto ctx = fixture::context(w, m, g);
        std::vector<RouterSample> samples;
        for (std::size_t q = 0; q < w.data.size(); ++q) samples.push_back(make_router_sample(w.data[q], w.caches[q], ctx));
        const auto cached = evaluate_cached(m, w.data, w.caches, samples);
        double f1 = 0.0, t5 = 0.0, units = 0.0;
        for (const auto& ex : w.data) {
            const auto out = moe_forward_hard(ex, ctx, w.pair());
            f1 += token_f1(out.answer, ex.targets).f1;
            for (int e : out.unit_expert) t5 += e == kT5;
            units += static_cast<double>(out.unit_expert.size());
        }
        EXPECT_NEAR(cached.accuracy, f1 / static_cast<double>(w.data.size()), 1e-15);
        EXPECT_NEAR(cached.hard_util_t5, t5 / units, 1e-12);
    }
}

TEST(RouterTraining, RejectsBadSettings) {
    const auto w = fixture::make_world(4);
    SeededRng rng(6);
    auto m = RouterMLP::random(16, 8, RouterInput::Concat, rng);
    const auto data = build_router_data(w.data, w.caches, {}, {}, fixture::context(w, m, Granularity::Token));
    TrainState st;
    st.batch = 0;
    EXPECT_THROW(train_router(m, data, LossWeights{}, st), ConfigError);
    st = {};
    LossWeights bad;
    bad.lambda1 = -1.0;
    EXPECT_THROW(train_router(m, data, bad, st), ConfigError);
}
