#pragma once

#include <array>
#include <algorithm>
#include <chrono>
#include <optional>
#include <string>
#include <vector>

#include "moeroute/expert.hpp"
#include "moeroute/router.hpp"

namespace moeroute {

/// The two frozen experts, addressed by router index.
struct ExpertPair {
    const Expert* mamba = nullptr;
    const Expert* t5 = nullptr;

    const Expert& get(int index) const {
        const Expert* e = index == kT5 ? t5 : mamba;
        if (e == nullptr) throw ContractError(std::string("expert ") + expert_name(index) + " is not loaded");
        return *e;
    }
};

/// How the router is fed and how fine its decisions are.
struct RouterContext {
    const RouterMLP* mlp = nullptr;
    const Tensor* token_table = nullptr;  // representation source (E_Mamba's frozen table)
    RouterInputOptions options{};

    Tensor inputs(const Example& ex) const {
        if (mlp == nullptr || token_table == nullptr) throw ContractError("router context is incomplete");
        return sequence_router_inputs(*mlp, *token_table, ex, options);
    }
    GateScores scores(const Example& ex) const { return gate_scores(*mlp, inputs(ex)); }
};

struct MoEConfig {
    Granularity granularity = Granularity::Token;
    bool hard = true;
    double p_mamba = 1.0;
    double p_t5 = 0.0;

    void validate() const {
        if (p_mamba < 0.0 || p_t5 < 0.0 || std::abs(p_mamba + p_t5 - 1.0) > 1e-12) {
            throw ConfigError("expert utilization fractions must be nonnegative and sum to 1");
        }
    }
};

/// p_mamba·N + p_t5·N² unit ops.
inline double expected_cost(std::size_t n, const MoEConfig& cfg) {
    if (n == 0) throw ContractError("expected_cost needs N >= 1");
    cfg.validate();
    const double N = static_cast<double>(n);
    return cfg.p_mamba * N + cfg.p_t5 * N * N;
}

// ---- soft mixture ----

struct SoftOutput {
    Tensor probs;  // L x vocab
    GateScores scores;
};

inline Tensor softmax_logits(const Tensor& logits) {
    Tape::Pause pause;
    return softmax_rows(logits);
}

/// Router scores per token, repeated from a single row in sequence mode.
inline Tensor per_token_scores(const GateScores& s, std::size_t length) {
    if (s.size() == length) return s.probs;
    if (s.size() != 1) throw DimensionError("gate scores cover neither every token nor the whole sequence");
    return gather_rows(s.probs, std::vector<int>(length, 0));
}

/// output_i = S_i,mamba·P_mamba(i) + S_i,t5·P_t5(i) over the experts' output
/// distributions given the expert probabilities directly.
inline Tensor blend(const Tensor& scores_per_token, const Tensor& p_mamba, const Tensor& p_t5) {
    const std::size_t V = p_mamba.cols();
    const auto wm = repeat_cols(slice_cols(scores_per_token, kMamba, kMamba + 1), V);
    const auto wt = repeat_cols(slice_cols(scores_per_token, kT5, kT5 + 1), V);
    return add(multiply(wm, p_mamba), multiply(wt, p_t5));
}

/// Both experts run; their distributions are blended by the gate. Only the
/// router parameters can receive gradients.
inline SoftOutput moe_forward_soft(const Example& ex, const RouterContext& router, const ExpertPair& experts) {
    const auto pm = softmax_logits(experts.get(kMamba).run(ex.tokens, static_cast<std::size_t>(ex.domain)).logits);
    const auto pt = softmax_logits(experts.get(kT5).run(ex.tokens, static_cast<std::size_t>(ex.domain)).logits);
    auto scores = router.scores(ex);
    return {blend(per_token_scores(scores, ex.length()), pm, pt), scores};
}

// ---- hard execution ----

enum class Policy { Learned, AlwaysMamba, AlwaysT5, Oracle };

inline std::string to_string(Policy p) {
    switch (p) {
        case Policy::Learned: return "learned";
        case Policy::AlwaysMamba: return "always-mamba";
        case Policy::AlwaysT5: return "always-t5";
        case Policy::Oracle: return "oracle";
    }
    return "?";
}

inline Policy policy_from_string(const std::string& s) {
    for (auto p : {Policy::Learned, Policy::AlwaysMamba, Policy::AlwaysT5, Policy::Oracle})
        if (to_string(p) == s) return p;
    throw ConfigError("unknown policy '" + s + "'");
}

struct HardOutput {
    std::vector<int> unit_expert;   // one entry per routing unit
    std::vector<int> token_expert;  // one entry per token
    std::vector<int> answer;        // greedy tokens at the answer slots
    Tensor probs;                   // L x vocab, rows from each token's expert
    std::array<bool, 2> ran{false, false};
    std::array<double, 2> expert_seconds{0.0, 0.0};
    std::array<std::uint64_t, 2> expert_ops{0, 0};
    std::vector<double> unit_ops;   // each expert's ops split evenly over the units it served
    double router_seconds = 0.0;
    std::optional<GateScores> scores;

    double seconds() const { return router_seconds + expert_seconds[0] + expert_seconds[1]; }
    std::uint64_t ops() const { return expert_ops[0] + expert_ops[1]; }
};

inline int argmax_row(const Tensor& m, std::size_t r) {
    const std::size_t n = m.cols();
    const auto d = m.data().subspan(r * n, n);
    int best = 0;
    for (std::size_t c = 1; c < n; ++c)
        if (d[c] > d[static_cast<std::size_t>(best)]) best = static_cast<int>(c);
    return best;
}

namespace detail {

inline std::vector<int> expand_units(const std::vector<int>& units, std::size_t length) {
    if (units.size() == length) return units;
    return std::vector<int>(length, units.at(0));
}

// Runs each expert that at least one token selected, on the whole sequence,
// and assembles per-token outputs from the selected expert.
inline HardOutput execute(const Example& ex, const ExpertPair& experts, std::vector<int> units) {
    HardOutput out;
    out.token_expert = expand_units(units, ex.length());
    out.unit_expert = std::move(units);
    std::array<Tensor, 2> logits;
    for (int k : {kMamba, kT5}) {
        if (std::find(out.token_expert.begin(), out.token_expert.end(), k) == out.token_expert.end()) continue;
        auto r = experts.get(k).run(ex.tokens, static_cast<std::size_t>(ex.domain));
        logits[static_cast<std::size_t>(k)] = r.logits;
        out.ran[static_cast<std::size_t>(k)] = true;
        out.expert_seconds[static_cast<std::size_t>(k)] = r.seconds;
        out.expert_ops[static_cast<std::size_t>(k)] = r.ops;
    }
    const std::size_t L = ex.length();
    const std::size_t V = logits[out.ran[0] ? 0 : 1].cols();
    std::vector<double> rows(L * V);
    {
        Tape::Pause pause;
        std::array<Tensor, 2> probs;
        for (std::size_t k = 0; k < 2; ++k)
            if (out.ran[k]) probs[k] = softmax_rows(logits[k]);
        for (std::size_t i = 0; i < L; ++i) {
            const auto src = probs[static_cast<std::size_t>(out.token_expert[i])].data().subspan(i * V, V);
            std::copy(src.begin(), src.end(), rows.begin() + static_cast<std::ptrdiff_t>(i * V));
        }
    }
    out.probs = Tensor::matrix(L, V, std::move(rows));
    for (std::size_t j = 0; j < ex.answer_length(); ++j) {
        const std::size_t r = ex.answer_offset + j;
        out.answer.push_back(argmax_row(logits[static_cast<std::size_t>(out.token_expert[r])], r));
    }
    std::array<std::size_t, 2> served{0, 0};
    for (int k : out.unit_expert) ++served[static_cast<std::size_t>(k)];
    for (int k : out.unit_expert) {
        const auto ks = static_cast<std::size_t>(k);
        out.unit_ops.push_back(static_cast<double>(out.expert_ops[ks]) / static_cast<double>(served[ks]));
    }
    return out;
}

}  // namespace detail

/// Argmax routing per unit; each expert executes at most once per sequence
/// and only if selected.
inline HardOutput moe_forward_hard(const Example& ex, const RouterContext& router, const ExpertPair& experts) {
    const auto t0 = std::chrono::steady_clock::now();
    GateScores scores;
    {
        Tape::Pause pause;
        scores = router.scores(ex);
    }
    auto decision = hard_select(scores);
    const double router_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    auto out = detail::execute(ex, experts, std::move(decision.experts));
    out.router_seconds = router_seconds;
    out.scores = scores;
    return out;
}

/// Every unit goes to one expert; no router runs.
inline HardOutput run_fixed(const Example& ex, const ExpertPair& experts, int expert, Granularity g) {
    const std::size_t units = g == Granularity::Token ? ex.length() : 1;
    return detail::execute(ex, experts, std::vector<int>(units, expert));
}

// ---- answer cache and the exhaustive oracle ----

/// Both experts' greedy answers and target probabilities at the answer
/// slots, from full-sequence runs. Exact for frozen experts.
struct AnswerCache {
    std::array<std::vector<int>, 2> argmax;
    std::array<std::vector<double>, 2> target_prob;
};

inline AnswerCache cache_answers(const Example& ex, const ExpertPair& experts) {
    AnswerCache c;
    for (int k : {kMamba, kT5}) {
        const auto r = experts.get(k).run(ex.tokens, static_cast<std::size_t>(ex.domain));
        const auto ks = static_cast<std::size_t>(k);
        Tape::Pause pause;
        const auto p = softmax_rows(slice_rows(r.logits, ex.answer_offset, ex.length()));
        for (std::size_t j = 0; j < ex.answer_length(); ++j) {
            c.argmax[ks].push_back(argmax_row(p, j));
            c.target_prob[ks].push_back(p.at(j, static_cast<std::size_t>(ex.targets[j])));
        }
    }
    return c;
}

struct OracleChoice {
    std::vector<int> answer_expert;  // per answer slot
    std::vector<int> answer;
    double f1 = 0.0;
};

/// Exhaustive search over the 2^k expert assignments of the k answer slots
/// for the best token F1; ties prefer fewer E_T5 slots, then the lower mask.
inline OracleChoice oracle_assignment(const Example& ex, const AnswerCache& cache) {
    const std::size_t k = ex.answer_length();
    if (k > 20) throw ContractError("oracle search is limited to 20 answer slots");
    OracleChoice best;
    int best_t5 = 0;
    bool have = false;
    for (std::uint32_t mask = 0; mask < (1u << k); ++mask) {
        std::vector<int> answer(k);
        int n_t5 = 0;
        for (std::size_t j = 0; j < k; ++j) {
            const int e = (mask >> j) & 1u ? kT5 : kMamba;
            n_t5 += e == kT5;
            answer[j] = cache.argmax[static_cast<std::size_t>(e)][j];
        }
        const double f1 = token_f1(answer, ex.targets).f1;
        if (!have || f1 > best.f1 || (f1 == best.f1 && n_t5 < best_t5)) {
            have = true;
            best.f1 = f1;
            best_t5 = n_t5;
            best.answer = answer;
            best.answer_expert.assign(k, kMamba);
            for (std::size_t j = 0; j < k; ++j) best.answer_expert[j] = (mask >> j) & 1u ? kT5 : kMamba;
        }
    }
    return best;
}

/// Oracle decision per routing unit. Token mode: answer slots as searched,
/// every other token to E_Mamba. Sequence mode: E_T5 iff its answer scores
/// strictly higher.
inline std::vector<int> oracle_units(const Example& ex, const AnswerCache& cache, Granularity g) {
    if (g == Granularity::Sequence) {
        const auto gain = utility_gain(cache.argmax[kT5], cache.argmax[kMamba], ex.targets);
        return {threshold_route(gain)};
    }
    const auto choice = oracle_assignment(ex, cache);
    std::vector<int> units(ex.length(), kMamba);
    for (std::size_t j = 0; j < ex.answer_length(); ++j) units[ex.answer_offset + j] = choice.answer_expert[j];
    return units;
}

/// The oracle as an executable policy: both experts run (it needs both
/// answers to choose), and the chosen outputs are assembled per unit.
inline HardOutput run_oracle(const Example& ex, const ExpertPair& experts, Granularity g) {
    HardOutput out;
    AnswerCache cache;
    std::array<Tensor, 2> logits;
    for (int k : {kMamba, kT5}) {
        const auto ks = static_cast<std::size_t>(k);
        auto r = experts.get(k).run(ex.tokens, static_cast<std::size_t>(ex.domain));
        out.ran[ks] = true;
        out.expert_seconds[ks] = r.seconds;
        out.expert_ops[ks] = r.ops;
        logits[ks] = r.logits;
        Tape::Pause pause;
        const auto p = softmax_rows(slice_rows(r.logits, ex.answer_offset, ex.length()));
        for (std::size_t j = 0; j < ex.answer_length(); ++j) {
            cache.argmax[ks].push_back(argmax_row(p, j));
            cache.target_prob[ks].push_back(p.at(j, static_cast<std::size_t>(ex.targets[j])));
        }
    }
    out.unit_expert = oracle_units(ex, cache, g);
    out.token_expert = detail::expand_units(out.unit_expert, ex.length());
    const std::size_t L = ex.length(), V = logits[0].cols();
    std::vector<double> rows(L * V);
    {
        Tape::Pause pause;
        const std::array<Tensor, 2> probs{softmax_rows(logits[0]), softmax_rows(logits[1])};
        for (std::size_t i = 0; i < L; ++i) {
            const auto src = probs[static_cast<std::size_t>(out.token_expert[i])].data().subspan(i * V, V);
            std::copy(src.begin(), src.end(), rows.begin() + static_cast<std::ptrdiff_t>(i * V));
        }
    }
    out.probs = Tensor::matrix(L, V, std::move(rows));
    for (std::size_t j = 0; j < ex.answer_length(); ++j) {
        const auto e = static_cast<std::size_t>(out.token_expert[ex.answer_offset + j]);
        out.answer.push_back(cache.argmax[e][j]);
    }
    // Both runs are charged; split each over every unit.
    for (std::size_t u = 0; u < out.unit_expert.size(); ++u)
        out.unit_ops.push_back(static_cast<double>(out.ops()) / static_cast<double>(out.unit_expert.size()));
    return out;
}

inline HardOutput run_policy(Policy policy, const Example& ex, const RouterContext& router, const ExpertPair& experts) {
    const auto g = router.options.granularity;
    switch (policy) {
        case Policy::Learned: return moe_forward_hard(ex, router, experts);
        case Policy::AlwaysMamba: return run_fixed(ex, experts, kMamba, g);
        case Policy::AlwaysT5: return run_fixed(ex, experts, kT5, g);
        case Policy::Oracle: return run_oracle(ex, experts, g);
    }
    throw ConfigError("unknown policy");
}

// ---- utilization ----

struct UtilizationStats {
    std::array<std::size_t, 2> counts{0, 0};
    std::array<double, 2> fractions{0.0, 0.0};
    std::array<double, 2> mean_length{0.0, 0.0};

    std::size_t total() const { return counts[0] + counts[1]; }
};

/// Units per expert over a batch of sequences; mean_length averages the
/// owning sequence's length over the units each expert served.
inline UtilizationStats utilization_stats(const std::vector<std::vector<int>>& unit_experts,
                                          const std::vector<std::size_t>& lengths) {
    if (unit_experts.empty()) throw ContractError("utilization_stats needs a nonempty batch");
    if (lengths.size() != unit_experts.size()) throw DimensionError("one length per sequence required");
    UtilizationStats s;
    std::array<double, 2> len_sum{0.0, 0.0};
    for (std::size_t q = 0; q < unit_experts.size(); ++q)
        for (int k : unit_experts[q]) {
            const auto ks = static_cast<std::size_t>(k);
            ++s.counts[ks];
            len_sum[ks] += static_cast<double>(lengths[q]);
        }
    if (s.total() == 0) throw ContractError("utilization_stats needs at least one routing unit");
    for (std::size_t k = 0; k < 2; ++k) {
        s.fractions[k] = static_cast<double>(s.counts[k]) / static_cast<double>(s.total());
        s.mean_length[k] = s.counts[k] ? len_sum[k] / static_cast<double>(s.counts[k]) : 0.0;
    }
    return s;
}

}  // namespace moeroute
