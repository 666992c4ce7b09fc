#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "moeroute/error.hpp"

namespace moeroute {

struct TokenF1 {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

/// Multiset-overlap precision, recall and F = 2PR/(P+R).
inline TokenF1 token_f1(const std::vector<int>& prediction, const std::vector<int>& reference) {
    if (reference.empty()) throw ContractError("token_f1: reference must be nonempty");
    if (prediction.empty()) return {};
    std::map<int, long> counts;
    for (int t : reference) ++counts[t];
    long overlap = 0;
    for (int t : prediction) {
        auto it = counts.find(t);
        if (it != counts.end() && it->second > 0) {
            --it->second;
            ++overlap;
        }
    }
    TokenF1 out;
    out.precision = static_cast<double>(overlap) / static_cast<double>(prediction.size());
    out.recall = static_cast<double>(overlap) / static_cast<double>(reference.size());
    if (out.precision + out.recall > 0.0) out.f1 = 2.0 * out.precision * out.recall / (out.precision + out.recall);
    return out;
}

namespace detail {

// One rolling row of the LCS table; `row` has b.size() + 1 zeroed cells.
inline std::size_t lcs_rows(const std::vector<int>& a, const std::vector<int>& b, std::uint32_t* row) {
    for (int x : a) {
        std::uint32_t diag = 0;  // row_{i-1}[j-1]
        for (std::size_t j = 1; j <= b.size(); ++j) {
            const std::uint32_t up = row[j];
            // on a match diag + 1 already dominates up and left
            row[j] = std::max({up, row[j - 1], diag + static_cast<std::uint32_t>(x == b[j - 1])});
            diag = up;
        }
    }
    return row[b.size()];
}

}  // namespace detail

inline std::size_t lcs_length(const std::vector<int>& a, const std::vector<int>& b) {
    // answers are short; skip the heap for them
    if (b.size() < 64) {
        std::array<std::uint32_t, 64> row;
        std::fill_n(row.begin(), b.size() + 1, 0u);
        return detail::lcs_rows(a, b, row.data());
    }
    std::vector<std::uint32_t> row(b.size() + 1, 0);
    return detail::lcs_rows(a, b, row.data());
}

struct RougeL {
    double recall = 0.0;     // R_LCS
    double precision = 0.0;  // P_LCS
    double beta = 1.0;
    double score = 0.0;
};

/// (1+β²)·R·P / (R + β²·P) over the longest common subsequence.
inline RougeL rouge_l(const std::vector<int>& prediction, const std::vector<int>& reference, double beta = 1.0) {
    if (reference.empty()) throw ContractError("rouge_l: reference must be nonempty");
    if (!(beta > 0.0)) throw ContractError("rouge_l: beta must be positive");
    RougeL out;
    out.beta = beta;
    if (prediction.empty()) return out;
    const double lcs = static_cast<double>(lcs_length(prediction, reference));
    out.recall = lcs / static_cast<double>(reference.size());
    out.precision = lcs / static_cast<double>(prediction.size());
    const double b2 = beta * beta;
    const double den = out.recall + b2 * out.precision;
    if (den > 0.0) out.score = (1.0 + b2) * out.recall * out.precision / den;
    return out;
}

inline double perplexity(double mean_ce) {
    if (!std::isfinite(mean_ce)) throw NumericError("perplexity of a non-finite cross entropy");
    return std::exp(mean_ce);
}

/// Sequences per second.
inline double throughput(std::size_t n_seq, double t_total) {
    if (!(t_total > 0.0)) throw ContractError("throughput needs a positive duration");
    return static_cast<double>(n_seq) / t_total;
}

/// Parameter memory in MB at four bytes per parameter.
inline double memory_footprint(std::size_t n_params) {
    return static_cast<double>(n_params) * 4.0 / (1024.0 * 1024.0);
}

inline double routing_efficiency(std::size_t n_correct, std::size_t n_total) {
    if (n_total == 0) throw ContractError("routing_efficiency needs at least one decision");
    return 100.0 * static_cast<double>(n_correct) / static_cast<double>(n_total);
}

// ---- Pareto analysis ----

struct ParetoPoint {
    std::string label;
    double accuracy = 0.0;
    double latency = 0.0;
    bool dominated = false;
};

inline bool dominates(const ParetoPoint& a, const ParetoPoint& b) {
    return a.accuracy >= b.accuracy && a.latency <= b.latency && (a.accuracy > b.accuracy || a.latency < b.latency);
}

/// Sets every point's dominance flag and returns the non-dominated subset
/// sorted by latency (ties by label).
inline std::vector<ParetoPoint> pareto_frontier(std::vector<ParetoPoint>& points) {
    if (points.empty()) throw ContractError("pareto_frontier needs at least one point");
    for (auto& p : points) {
        p.dominated = std::any_of(points.begin(), points.end(), [&](const ParetoPoint& q) { return dominates(q, p); });
    }
    std::vector<ParetoPoint> frontier;
    for (const auto& p : points)
        if (!p.dominated) frontier.push_back(p);
    std::sort(frontier.begin(), frontier.end(), [](const ParetoPoint& a, const ParetoPoint& b) {
        return a.latency != b.latency ? a.latency < b.latency : a.label < b.label;
    });
    return frontier;
}

}  // namespace moeroute
