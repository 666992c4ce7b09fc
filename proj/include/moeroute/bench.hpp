#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "moeroute/moe_layer.hpp"

namespace moeroute {

/// Quality and cost of one policy on an evaluation set. Everything except
/// the wall-clock fields is a pure function of the models and the data.
struct MetricReport {
    std::string label;
    std::size_t n_seq = 0;
    TokenF1 f1{};           // means over sequences
    RougeL rouge{};         // means over sequences, β = 1
    double accuracy = 0.0;  // mean token F1
    double perplexity = 1.0;
    double memory_mb = 0.0;
    double routing_efficiency = 0.0;         // % of all units matching the oracle
    double answer_routing_efficiency = 0.0;  // % of answer slots matching the oracle
    std::array<double, 2> utilization{0.0, 0.0};
    std::array<std::size_t, 2> unit_counts{0, 0};
    std::array<double, 2> mean_length{0.0, 0.0};
    double mean_ops = 0.0;  // expert ops per sequence

    // wall clock
    double mean_latency = 0.0;  // s / seq
    double throughput = 0.0;    // seq / s
};

inline nlohmann::json metrics_json(const MetricReport& r) {
    return {{"label", r.label},
            {"n_seq", r.n_seq},
            {"f1", r.f1.f1},
            {"precision", r.f1.precision},
            {"recall", r.f1.recall},
            {"rouge_l", r.rouge.score},
            {"rouge_l_recall", r.rouge.recall},
            {"rouge_l_precision", r.rouge.precision},
            {"rouge_l_beta", r.rouge.beta},
            {"accuracy", r.accuracy},
            {"perplexity", r.perplexity},
            {"memory_mb", r.memory_mb},
            {"routing_efficiency", r.routing_efficiency},
            {"answer_routing_efficiency", r.answer_routing_efficiency},
            {"util_mamba", r.utilization[kMamba]},
            {"util_t5", r.utilization[kT5]},
            {"units_mamba", r.unit_counts[kMamba]},
            {"units_t5", r.unit_counts[kT5]},
            {"mean_length_mamba", r.mean_length[kMamba]},
            {"mean_length_t5", r.mean_length[kT5]},
            {"mean_ops", r.mean_ops}};
}

inline nlohmann::json timing_json(const MetricReport& r) {
    return {{"label", r.label}, {"mean_latency_s", r.mean_latency}, {"throughput_seq_s", r.throughput}};
}

inline const char* kMetricCsvHeader =
    "label,n_seq,accuracy,f1,precision,recall,rouge_l,perplexity,memory_mb,routing_efficiency,"
    "answer_routing_efficiency,util_mamba,util_t5,mean_ops";

inline void write_metric_row(std::ostream& os, const MetricReport& r) {
    os.precision(17);
    os << r.label << ',' << r.n_seq << ',' << r.accuracy << ',' << r.f1.f1 << ',' << r.f1.precision << ','
       << r.f1.recall << ',' << r.rouge.score << ',' << r.perplexity << ',' << r.memory_mb << ','
       << r.routing_efficiency << ',' << r.answer_routing_efficiency << ',' << r.utilization[kMamba] << ','
       << r.utilization[kT5] << ',' << r.mean_ops << '\n';
}

/// Parameters of the components a policy may execute.
inline std::size_t policy_parameters(Policy p, const ExpertPair& experts, const RouterMLP* mlp) {
    switch (p) {
        case Policy::AlwaysMamba: return experts.get(kMamba).parameter_count();
        case Policy::AlwaysT5: return experts.get(kT5).parameter_count();
        case Policy::Oracle: return experts.get(kMamba).parameter_count() + experts.get(kT5).parameter_count();
        case Policy::Learned:
            return experts.get(kMamba).parameter_count() + experts.get(kT5).parameter_count() +
                   (mlp ? mlp->parameter_count() : 0);
    }
    return 0;
}

/// Runs `policy` with real hard execution on every example. `caches`
/// (one per example) supply the oracle decisions for routing efficiency.
inline MetricReport evaluate_policy(Policy policy, const std::vector<Example>& data,
                                    const std::vector<AnswerCache>& caches, const RouterContext& router,
                                    const ExpertPair& experts, const std::string& label = {}) {
    if (data.empty()) throw ContractError("evaluate_policy needs a nonempty evaluation set");
    if (caches.size() != data.size()) throw DimensionError("one answer cache per example required");
    MetricReport r;
    r.label = label.empty() ? to_string(policy) : label;
    r.n_seq = data.size();
    const auto g = router.options.granularity;
    double ce = 0.0, seconds = 0.0, ops = 0.0;
    std::size_t n_answer = 0, unit_match = 0, units = 0, answer_match = 0;
    std::vector<std::vector<int>> decisions;
    std::vector<std::size_t> lengths;
    for (std::size_t q = 0; q < data.size(); ++q) {
        const auto& ex = data[q];
        const auto out = run_policy(policy, ex, router, experts);
        const auto f = token_f1(out.answer, ex.targets);
        const auto rl = rouge_l(out.answer, ex.targets);
        r.f1.f1 += f.f1;
        r.f1.precision += f.precision;
        r.f1.recall += f.recall;
        r.rouge.score += rl.score;
        r.rouge.recall += rl.recall;
        r.rouge.precision += rl.precision;
        for (std::size_t j = 0; j < ex.answer_length(); ++j) {
            const double p = out.probs.at(ex.answer_offset + j, static_cast<std::size_t>(ex.targets[j]));
            ce -= std::log(std::max(p, kProbFloor));
            ++n_answer;
        }
        const auto oracle = oracle_units(ex, caches[q], g);
        for (std::size_t u = 0; u < oracle.size(); ++u) unit_match += oracle[u] == out.unit_expert[u];
        units += oracle.size();
        const auto oracle_tok = detail::expand_units(oracle, ex.length());
        for (std::size_t j = 0; j < ex.answer_length(); ++j)
            answer_match += oracle_tok[ex.answer_offset + j] == out.token_expert[ex.answer_offset + j];
        seconds += out.seconds();
        ops += static_cast<double>(out.ops());
        decisions.push_back(out.unit_expert);
        lengths.push_back(ex.length());
    }
    const double n = static_cast<double>(data.size());
    r.f1.f1 /= n;
    r.f1.precision /= n;
    r.f1.recall /= n;
    r.rouge.score /= n;
    r.rouge.recall /= n;
    r.rouge.precision /= n;
    r.accuracy = r.f1.f1;
    r.perplexity = perplexity(ce / static_cast<double>(n_answer));
    r.memory_mb = memory_footprint(policy_parameters(policy, experts, router.mlp));
    r.routing_efficiency = routing_efficiency(unit_match, units);
    r.answer_routing_efficiency = routing_efficiency(answer_match, n_answer);
    const auto u = utilization_stats(decisions, lengths);
    r.utilization = u.fractions;
    r.unit_counts = u.counts;
    r.mean_length = u.mean_length;
    r.mean_ops = ops / n;
    r.mean_latency = seconds / n;
    r.throughput = seconds > 0.0 ? throughput(data.size(), seconds) : 0.0;
    return r;
}

// ---- scaling ----

struct LatencyRow {
    std::size_t length = 0;
    double median_seconds = 0.0;
    std::uint64_t ops = 0;
};

struct LatencyProfile {
    std::vector<LatencyRow> rows;
    double slope = 0.0;  // least-squares slope of log time against log L
};

/// Least-squares slope of log(y) against log(x).
inline double log_log_slope(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw ContractError("slope fit needs two or more paired points");
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!(x[i] > 0.0 && y[i] > 0.0)) throw ContractError("slope fit needs positive values");
        mx += std::log(x[i]);
        my += std::log(y[i]);
    }
    mx /= static_cast<double>(x.size());
    my /= static_cast<double>(x.size());
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = std::log(x[i]) - mx;
        sxy += dx * (std::log(y[i]) - my);
        sxx += dx * dx;
    }
    return sxy / sxx;
}

inline double median(std::vector<double> v) {
    if (v.empty()) throw ContractError("median of nothing");
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

namespace detail {

// Large temporaries otherwise go back to the OS after every trial and get
// faulted in again on the next, which bends the timing curve at long L.
// Process-wide and never undone.
inline void keep_heap_resident() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_MAX, 0);
    mallopt(M_TRIM_THRESHOLD, std::numeric_limits<int>::max());
#endif
}

}  // namespace detail

/// Median-of-`trials` wall clock and exact op counts per length, after
/// `warmup` untimed runs per length. Tokens are seeded random bytes.
inline LatencyProfile latency_profile(const Expert& expert, const std::vector<std::size_t>& lengths,
                                      std::size_t trials = 20, std::size_t warmup = 2, std::uint64_t seed = 0) {
    if (lengths.size() < 3) throw ContractError("latency_profile needs at least three lengths");
    if (!std::is_sorted(lengths.begin(), lengths.end())) throw ContractError("latency_profile lengths must be ascending");
    if (trials == 0) throw ContractError("latency_profile needs at least one trial");
    detail::keep_heap_resident();
    SeededRng rng(seed);
    LatencyProfile prof;
    std::vector<double> xs, ys;
    for (std::size_t L : lengths) {
        std::vector<int> tokens(L);
        for (auto& t : tokens) t = static_cast<int>('a' + rng.below(26));
        for (std::size_t w = 0; w < warmup; ++w) expert.run(tokens, 0);
        std::vector<double> times;
        std::uint64_t ops = 0;
        for (std::size_t k = 0; k < trials; ++k) {
            const auto out = expert.run(tokens, 0);
            times.push_back(out.seconds);
            ops = out.ops;
        }
        prof.rows.push_back({L, median(times), ops});
        xs.push_back(static_cast<double>(L));
        ys.push_back(prof.rows.back().median_seconds);
    }
    prof.slope = log_log_slope(xs, ys);
    return prof;
}

}  // namespace moeroute
