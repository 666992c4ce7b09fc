#include <gtest/gtest.h>

#include <sstream>

#include "oracles.hpp"

using namespace moeroute;

namespace {

ExpertDims small_dims() {
    ExpertDims d;
    d.d_model = 16;
    d.max_len = 64;
    d.d_ff = 32;
    d.d_state = 4;
    d.lora_rank = 4;
    d.num_heads = 4;
    return d;
}

std::vector<int> letters(SeededRng& rng, std::size_t n) {
    std::vector<int> t(n);
    for (auto& v : t) v = static_cast<int>('a' + rng.below(26));
    return t;
}

}  // namespace

TEST(LoRA, FreshAdapterLeavesBaseMapUntouched) {
    SeededRng rng(1);
    auto ad = LoRAAdapter::create(Tensor::randn({6, 5}, rng), 2, 16.0, rng);
    const auto x = Tensor::randn({5}, rng);
    EXPECT_EQ(lora_apply(ad, x).values(), matmul_nt(x, ad.base).values());
    oracle::perturb_lora(ad, rng);
    const auto ref = oracle::xw(oracle::to_mat(x), oracle::merged(ad));
    EXPECT_LT(oracle::max_abs_diff(ref, reshaped(lora_apply(ad, x), {1, 6})), 1e-13);
    EXPECT_DOUBLE_EQ(ad.scaling(), 8.0);
}

TEST(LoRA, RankMustBeBelowMinDimension) {
    SeededRng rng(1);
    EXPECT_THROW(LoRAAdapter::create(Tensor::randn({6, 5}, rng), 5, 16.0, rng), ConfigError);
    EXPECT_THROW(LoRAAdapter::create(Tensor::randn({6, 5}, rng), 0, 16.0, rng), ConfigError);
}

TEST(Embedding, AdaptedVectorIsSumOfParts) {
    SeededRng rng(2);
    const auto ad = EmbeddingAdaptation::random(256, 8, 32, 2, rng);
    const auto v = adapt_embedding(ad, 'x', 5, 1);
    for (std::size_t c = 0; c < 8; ++c)
        EXPECT_NEAR(v[c], ad.token_table.at('x', c) + ad.positional.at(5, c) + ad.domain_proj.at(c, 1), 1e-15);
    EXPECT_THROW(adapt_embedding(ad, 300, 0, 0), IndexError);
    EXPECT_THROW(adapt_embedding(ad, 1, 32, 0), IndexError);
    EXPECT_THROW(adapt_embedding(ad, 1, 0, 2), IndexError);
}

TEST(SSM, ScanMatchesMatrixPowerOracle) {
    SeededRng rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        auto P = SSMExpertParams::random(8, 8, 4, 1, 2, 16.0, rng);
        oracle::perturb_lora(P.layers[0].in_proj, rng);
        oracle::perturb_lora(P.layers[0].out_proj, rng);
        const std::size_t L = 1 + rng.below(32);
        const auto x = Tensor::randn({L, 8}, rng);
        const auto got = ssm_scan(P, x, 0);
        EXPECT_LT(oracle::max_abs_diff(oracle::ssm_block(P, oracle::to_mat(x), 0), got), 1e-10) << "L=" << L;
    }
}

TEST(SSM, RecordedGraphAgreesWithKernel) {
    SeededRng rng(4);
    auto P = SSMExpertParams::random(8, 8, 4, 1, 2, 16.0, rng);
    const auto u = Tensor::randn({12, 8}, rng);
    const auto plain = ssm_recurrence(P.layers[0], u);
    P.layers[0].a.set_requires_grad(true);
    Tape tape;
    Tape::Recording rec(tape);
    const auto graph = ssm_recurrence(P.layers[0], u);
    EXPECT_GT(tape.size(), 0u);
    for (std::size_t i = 0; i < plain.numel(); ++i) EXPECT_NEAR(plain[i], graph[i], 1e-12);
}

TEST(SSM, ScanGradientMatchesFiniteDifferences) {
    SeededRng rng(5);
    auto P = SSMExpertParams::random(6, 6, 3, 1, 2, 16.0, rng);
    const auto& layer = P.layers[0];
    const auto u = Tensor::randn({7, 6}, rng), w = Tensor::randn({7, 6}, rng);
    for (const auto& t : {layer.a, layer.b, layer.c, u}) t.set_requires_grad(true);
    Tape tape;
    Tensor loss;
    {
        Tape::Recording rec(tape);
        loss = sum(multiply(ssm_recurrence(layer, u), w));
    }
    tape.backward(loss);
    for (const auto& t : {layer.a, layer.b, layer.c, u}) {
        Tensor probe = t;
        const auto num = oracle::central_diff(
            [&] {
                Tape::Pause p;
                return sum(multiply(ssm_recurrence(layer, u), w)).item();
            },
            probe.mutable_data(), 1e-6);
        for (std::size_t i = 0; i < num.size(); ++i) EXPECT_NEAR(t.grad()[i], num[i], 1e-7);
    }
}

TEST(SSM, UnstableTransitionIsRejected) {
    SeededRng rng(6);
    auto P = SSMExpertParams::random(8, 8, 4, 1, 2, 16.0, rng);
    P.layers[0].a.mutable_data()[3] = 1.01;
    EXPECT_THROW(P.check_stability(), StabilityError);
    EXPECT_THROW(ssm_scan(P, Tensor::randn({4, 8}, rng), 0), StabilityError);
    P.clamp_transitions();
    EXPECT_NO_THROW(P.check_stability());
}

TEST(SSM, SelectiveVariantIsForwardOnly) {
    SeededRng rng(7);
    auto P = SSMExpertParams::random(8, 8, 4, 1, 2, 16.0, rng);
    P.selective = true;
    const auto x = Tensor::randn({5, 8}, rng);
    EXPECT_NO_THROW(ssm_scan(P, x, 0));
    x.set_requires_grad(true);
    Tape tape;
    Tape::Recording rec(tape);
    EXPECT_THROW(ssm_scan(P, x, 0), ConfigError);
}

TEST(SSM, WindowedForwardCarriesExactState) {
    SeededRng rng(8);
    SSMExpert e(small_dims(), rng);
    const auto tokens = letters(rng, 40);
    const auto full = e.forward(tokens, 0).logits;
    const auto win = e.forward_window(tokens, 0, 25).logits;
    ASSERT_EQ(win.rows(), 15u);
    for (std::size_t r = 0; r < 15; ++r)
        for (std::size_t c = 0; c < win.cols(); ++c) ASSERT_NEAR(win.at(r, c), full.at(r + 25, c), 1e-10);
}

TEST(SSM, CausalOutputIgnoresFutureTokens) {
    SeededRng rng(9);
    SSMExpert e(small_dims(), rng);
    auto tokens = letters(rng, 20);
    const auto before = e.run(tokens, 0).logits;
    tokens[15] = tokens[15] == 'a' ? 'b' : 'a';
    const auto after = e.run(tokens, 0).logits;
    for (std::size_t r = 0; r < 15; ++r)
        for (std::size_t c = 0; c < before.cols(); ++c) ASSERT_EQ(before.at(r, c), after.at(r, c));
}

TEST(Attention, LayerMatchesNaiveReference) {
    SeededRng rng(10);
    for (int trial = 0; trial < 6; ++trial) {
        auto P = AttentionExpertParams::random(8, 16, 1, trial % 2 ? 2 : 1, 2, 16.0, rng);
        oracle::perturb_lora(P.layers[0].query, rng);
        oracle::perturb_lora(P.layers[0].value, rng);
        const std::size_t L = 1 + rng.below(16);
        const auto h = Tensor::randn({L, 8}, rng);
        EXPECT_LT(oracle::max_abs_diff(oracle::attention_layer(P, oracle::to_mat(h), 0), attention_layer(P, h, 0)), 1e-10);
    }
}

TEST(Attention, WeightsAreRowStochastic) {
    SeededRng rng(11);
    const auto P = AttentionExpertParams::random(8, 16, 1, 2, 2, 16.0, rng);
    std::vector<Tensor> maps;
    attention_layer(P, Tensor::randn({6, 8}, rng), 0, nullptr, &maps);
    ASSERT_EQ(maps.size(), 2u);
    for (const auto& m : maps)
        for (std::size_t i = 0; i < 6; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < 6; ++j) {
                EXPECT_GE(m.at(i, j), 0.0);
                s += m.at(i, j);
            }
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
}

TEST(Attention, HeadsMustDivideWidth) {
    SeededRng rng(12);
    EXPECT_THROW(AttentionExpertParams::random(10, 16, 1, 4, 2, 16.0, rng), ConfigError);
}

TEST(OpCounts, QuadraticVersusLinear) {
    SeededRng rng(13);
    auto dims = small_dims();
    dims.max_len = 256;
    AttentionExpert t5(dims, rng);
    SSMExpert mamba(dims, rng);
    for (std::size_t L : {16u, 32u, 64u}) {
        const auto tok = letters(rng, L), tok2 = letters(rng, 2 * L);
        const auto a1 = t5.run(tok, 0).ops, a2 = t5.run(tok2, 0).ops;
        const auto s1 = mamba.run(tok, 0).ops, s2 = mamba.run(tok2, 0).ops;
        EXPECT_EQ(a1, 2 * L * L * dims.d_model * dims.num_layers);
        EXPECT_EQ(s1, L * dims.d_state * dims.d_model * dims.num_layers);
        EXPECT_EQ(a2, 4 * a1);
        EXPECT_EQ(s2, 2 * s1);
    }
}

TEST(Experts, FrozenExpertRefusesTraining) {
    SeededRng rng(14);
    SSMExpert e(small_dims(), rng);
    EXPECT_NO_THROW(e.set_trainable(e.adaptation_parameters()));
    e.freeze();
    EXPECT_TRUE(e.frozen());
    EXPECT_THROW(e.set_trainable(e.adaptation_parameters()), ContractError);
    for (const auto& p : e.parameters()) EXPECT_FALSE(p.requires_grad());
}

TEST(Experts, BadTokensAndEmptyInput) {
    SeededRng rng(15);
    AttentionExpert e(small_dims(), rng);
    EXPECT_THROW(e.run(std::vector<int>{}, 0), ContractError);
    EXPECT_THROW(e.run(std::vector<int>{1, 999}, 0), IndexError);
}

TEST(Experts, ShortTrainingLowersLoss) {
    SeededRng rng(16);
    SSMExpert e(small_dims(), rng);
    SyntheticSpec spec;
    spec.long_min = 20;
    spec.long_max = 40;
    spec.short_max = 20;
    spec.long_fraction = 0.5;
    EncodeOptions opt;
    opt.max_len = 64;
    std::vector<Example> data;
    for (const auto& p : gen_synthetic(spec, 40)) data.push_back(encode(p, opt));
    ExpertTrainConfig cfg;
    cfg.base_steps = 40;
    cfg.adapt_steps = 10;
    cfg.batch = 4;
    cfg.window = 16;
    const auto report = train_expert(e, data, cfg);
    ASSERT_EQ(report.step_loss.size(), 50u);
    const auto head = (report.step_loss[0] + report.step_loss[1] + report.step_loss[2]) / 3;
    const auto tail = (report.step_loss[37] + report.step_loss[38] + report.step_loss[39]) / 3;
    EXPECT_LT(tail, head);
}

TEST(Checkpoint, ExpertRoundTripIsByteExact) {
    SeededRng rng(17);
    for (int kind = 0; kind < 2; ++kind) {
        std::unique_ptr<Expert> e;
        if (kind == 0)
            e = std::make_unique<AttentionExpert>(small_dims(), rng);
        else
            e = std::make_unique<SSMExpert>(small_dims(), rng);
        std::stringstream first;
        write_expert(first, *e);
        const auto restored = read_expert(first, "memory");
        EXPECT_TRUE(restored->frozen());
        EXPECT_EQ(restored->kind(), e->kind());
        std::stringstream second;
        write_expert(second, *restored);
        EXPECT_EQ(first.str(), second.str());
        const auto tok = letters(rng, 10);
        EXPECT_EQ(e->run(tok, 1).logits.values(), restored->run(tok, 1).logits.values());
    }
}

TEST(Checkpoint, CorruptInputIsRejected) {
    SeededRng rng(18);
    SSMExpert e(small_dims(), rng);
    std::stringstream ss;
    write_expert(ss, e);
    const auto bytes = ss.str();
    std::stringstream truncated(bytes.substr(0, bytes.size() - 8));
    EXPECT_THROW(read_expert(truncated), IoError);
    std::stringstream bad("NOTMOEXX" + bytes.substr(8));
    EXPECT_THROW(read_expert(bad), IoError);
    std::stringstream trailing(bytes + "x");
    EXPECT_THROW(read_expert(trailing), IoError);
}
