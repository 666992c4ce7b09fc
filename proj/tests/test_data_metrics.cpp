#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "oracles.hpp"

using namespace moeroute;

// ---- data ----

TEST(Data, TokenizeRoundTrip) {
    const std::string s = "hello? \x01\xff";
    const auto ids = tokenize(s);
    EXPECT_EQ(ids.size(), s.size());
    EXPECT_EQ(ids.back(), 255);
    EXPECT_EQ(detokenize(ids), s);
}

TEST(Data, SyntheticIsSeededAndShaped) {
    SyntheticSpec spec;
    spec.seed = 42;
    const auto a = gen_synthetic(spec, 400), b = gen_synthetic(spec, 400);
    EXPECT_EQ(a, b);
    spec.seed = 43;
    EXPECT_NE(a, gen_synthetic(spec, 400));
    std::size_t n_long = 0;
    for (const auto& p : a) {
        const std::size_t len = p.question.size() + p.answer.size();
        if (p.domain == "long") {
            ++n_long;
            EXPECT_GE(len, spec.long_min);
            EXPECT_LE(len, spec.long_max);
            EXPECT_EQ(p.answer.size(), 1u);
        } else {
            ASSERT_EQ(p.domain, "short");
            EXPECT_GE(len, spec.short_min);
            EXPECT_LE(len, spec.short_max);
        }
    }
    // 95% long, binomial sd ≈ 4.4 on 400 draws
    EXPECT_NEAR(static_cast<double>(n_long), 380.0, 25.0);
}

TEST(Data, LongItemAnswerFollowsQuery) {
    SyntheticSpec spec;
    spec.long_fraction = 1.0;
    for (const auto& p : gen_synthetic(spec, 50)) {
        const char q = p.question.back();
        EXPECT_EQ(p.answer[0], static_cast<char>('a' + (q - 'a' + 1) % 26));
    }
}

TEST(Data, SpecValidation) {
    SyntheticSpec spec;
    spec.long_fraction = 1.5;
    EXPECT_THROW(gen_synthetic(spec, 10), ConfigError);
    spec = {};
    spec.long_min = spec.long_max;
    EXPECT_THROW(gen_synthetic(spec, 10), ConfigError);
    EXPECT_THROW(gen_synthetic(SyntheticSpec{}, 0), ContractError);
}

TEST(Data, EncodePlacesSlotsAndTruncatesLeft) {
    const QAPair p{"abcdefghij", "xyz", "short"};
    EncodeOptions opt;
    opt.max_len = 8;
    const auto ex = encode(p, opt);
    EXPECT_EQ(ex.length(), 8u);
    EXPECT_EQ(ex.answer_offset, 5u);
    EXPECT_EQ(detokenize(ex.question_tokens()), "fghij");
    EXPECT_EQ(ex.targets, tokenize("xyz"));
    for (std::size_t j = 0; j < 3; ++j) EXPECT_TRUE(is_slot_token(ex.tokens[5 + j]));
    EXPECT_EQ(ex.domain, 1);
    opt.max_len = 3;
    EXPECT_THROW(encode(p, opt), ConfigError);
}

TEST(Data, JsonlErrorsNameTheLine) {
    DomainMap dm;
    EXPECT_NO_THROW(parse_qa_line(R"({"question":"q","answer":"a","domain":"long"})", 1, dm));
    try {
        parse_qa_line("{not json", 7, dm);
        FAIL();
    } catch (const ParseError& e) {
        EXPECT_NE(std::string(e.what()).find("line 7"), std::string::npos);
    }
    EXPECT_THROW(parse_qa_line(R"({"question":"q","domain":"long"})", 1, dm), ParseError);
    EXPECT_THROW(parse_qa_line(R"({"question":"q","answer":"","domain":"long"})", 1, dm), ParseError);
    EXPECT_THROW(parse_qa_line(R"({"question":"q","answer":"a","domain":"legal"})", 1, dm), ParseError);
    EXPECT_THROW(parse_qa_line("[1,2]", 1, dm), ParseError);
}

TEST(Data, JsonlFileRoundTrip) {
    SyntheticSpec spec;
    spec.long_max = 300;
    const auto pairs = gen_synthetic(spec, 20);
    const auto path = std::filesystem::temp_directory_path() / "moeroute_roundtrip.jsonl";
    {
        std::ofstream os(path);
        os << to_jsonl(pairs) << "\n\n";
    }
    EXPECT_EQ(load_jsonl(path.string()), pairs);
    std::filesystem::remove(path);
    EXPECT_THROW(load_jsonl("/nonexistent/file.jsonl"), IoError);
}

TEST(Data, SplitsPartitionDeterministically) {
    const auto s = split_dataset(2000, 5);
    EXPECT_EQ(s.train.size(), 1600u);
    EXPECT_EQ(s.valid.size(), 200u);
    EXPECT_EQ(s.test.size(), 200u);
    std::set<std::size_t> all(s.train.begin(), s.train.end());
    all.insert(s.valid.begin(), s.valid.end());
    all.insert(s.test.begin(), s.test.end());
    EXPECT_EQ(all.size(), 2000u);
    EXPECT_EQ(split_dataset(2000, 5).test, s.test);
    EXPECT_NE(split_dataset(2000, 6).test, s.test);
    EXPECT_THROW(split_dataset(9, 0), ContractError);
    const auto odd = split_dataset(15, 0);
    EXPECT_EQ(odd.train.size() + odd.valid.size() + odd.test.size(), 15u);
}

TEST(Data, Fnv1aKnownValues) {
    EXPECT_EQ(fnv1a(""), 0xcbf29ce484222325ULL);
    EXPECT_EQ(fnv1a("a"), 0xaf63dc4c8601ec8cULL);
}

// ---- metrics ----

TEST(Metrics, TokenF1WorkedExample) {
    const auto f = token_f1({1}, {1, 2});
    EXPECT_DOUBLE_EQ(f.precision, 1.0);
    EXPECT_DOUBLE_EQ(f.recall, 0.5);
    EXPECT_NEAR(f.f1, 2.0 / 3.0, 1e-15);
    EXPECT_DOUBLE_EQ(token_f1({}, {1}).f1, 0.0);
    EXPECT_DOUBLE_EQ(token_f1({1, 1, 2}, {1, 2, 2}).f1, 2.0 / 3.0);
    EXPECT_THROW(token_f1({1}, {}), ContractError);
}

TEST(Metrics, LcsDynamicProgramEqualsExhaustiveSearch) {
    SeededRng rng(1);
    for (int trial = 0; trial < 2000; ++trial) {
        std::vector<int> a(rng.below(9)), b(rng.below(9));
        for (auto& v : a) v = static_cast<int>(rng.below(3));
        for (auto& v : b) v = static_cast<int>(rng.below(3));
        ASSERT_EQ(lcs_length(a, b), oracle::exhaustive_lcs(a, b));
    }
}

TEST(Metrics, RougeLFormula) {
    const auto r = rouge_l({1, 3, 2}, {1, 2, 4, 5});
    EXPECT_DOUBLE_EQ(r.recall, 0.5);
    EXPECT_NEAR(r.precision, 2.0 / 3.0, 1e-15);
    EXPECT_NEAR(r.score, 2 * 0.5 * (2.0 / 3.0) / (0.5 + 2.0 / 3.0), 1e-15);
    const auto b2 = rouge_l({1, 3, 2}, {1, 2, 4, 5}, 2.0);
    EXPECT_NEAR(b2.score, 5 * 0.5 * (2.0 / 3.0) / (0.5 + 4 * 2.0 / 3.0), 1e-15);
    EXPECT_THROW(rouge_l({1}, {1}, 0.0), ContractError);
}

TEST(Metrics, CostAndEfficiency) {
    EXPECT_DOUBLE_EQ(memory_footprint(262144), 1.0);
    EXPECT_DOUBLE_EQ(throughput(50, 2.0), 25.0);
    EXPECT_THROW(throughput(5, 0.0), ContractError);
    EXPECT_DOUBLE_EQ(routing_efficiency(3, 4), 75.0);
    EXPECT_THROW(routing_efficiency(0, 0), ContractError);
    EXPECT_NEAR(perplexity(std::log(7.0)), 7.0, 1e-12);
}

TEST(Metrics, ParetoDominance) {
    std::vector<ParetoPoint> pts{{"a", 0.9, 10.0}, {"b", 0.8, 5.0}, {"c", 0.7, 6.0}, {"d", 0.9, 12.0}};
    const auto front = pareto_frontier(pts);
    ASSERT_EQ(front.size(), 2u);
    EXPECT_EQ(front[0].label, "b");
    EXPECT_EQ(front[1].label, "a");
    EXPECT_TRUE(pts[2].dominated);
    EXPECT_TRUE(pts[3].dominated);
    std::vector<ParetoPoint> none;
    EXPECT_THROW(pareto_frontier(none), ContractError);
}

TEST(Bench, LogLogSlope) {
    EXPECT_NEAR(log_log_slope({1, 2, 4, 8}, {3, 12, 48, 192}), 2.0, 1e-12);
    EXPECT_NEAR(log_log_slope({1, 2, 4}, {5, 10, 20}), 1.0, 1e-12);
    EXPECT_THROW(log_log_slope({1}, {1}), ContractError);
    EXPECT_DOUBLE_EQ(median({3, 1, 2}), 2.0);
    EXPECT_DOUBLE_EQ(median({4, 1, 2, 3}), 2.5);
}
