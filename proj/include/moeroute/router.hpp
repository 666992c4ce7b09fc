#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "moeroute/data.hpp"
#include "moeroute/embedding.hpp"
#include "moeroute/metrics.hpp"
#include "moeroute/ops.hpp"

namespace moeroute {

/// Expert indices in every score vector.
inline constexpr int kMamba = 0;
inline constexpr int kT5 = 1;

inline const char* expert_name(int index) { return index == kT5 ? "t5" : "mamba"; }

struct RouterFeatures {
    double length = 0.0;  // ℓ in [0, 1]
    int domain = 0;       // d in {0, 1}

    void validate() const {
        if (!(length >= 0.0 && length <= 1.0)) throw ContractError("router length feature must lie in [0, 1]");
        if (domain != 0 && domain != 1) throw ContractError("router domain feature must be 0 or 1");
    }
};

/// What the router sees: the token representation fused with [ℓ, d]
/// (default), only [ℓ, d], or only ℓ.
enum class RouterInput { Concat, Features, Length };

inline std::string to_string(RouterInput m) {
    switch (m) {
        case RouterInput::Concat: return "concat";
        case RouterInput::Features: return "features";
        case RouterInput::Length: return "length";
    }
    return "?";
}

inline RouterInput router_input_from_string(const std::string& s) {
    if (s == "concat") return RouterInput::Concat;
    if (s == "features") return RouterInput::Features;
    if (s == "length") return RouterInput::Length;
    throw ConfigError("unknown router input mode '" + s + "'");
}

/// [token_repr; ℓ; d] in that order.
inline Tensor fuse_features(const Tensor& token_repr, const RouterFeatures& f) {
    f.validate();
    std::vector<double> v(token_repr.data().begin(), token_repr.data().end());
    v.push_back(f.length);
    v.push_back(static_cast<double>(f.domain));
    return Tensor::vector(std::move(v));
}

/// Two-layer gate S = softmax(W2·ReLU(W1·x + b1) + b2). Weights are stored
/// in×out so a batch of inputs multiplies from the left.
struct RouterMLP {
    Tensor w1;  // in x hidden
    Tensor b1;  // hidden
    Tensor w2;  // hidden x 2
    Tensor b2;  // 2
    RouterInput input = RouterInput::Concat;

    std::size_t input_width() const { return w1.rows(); }
    std::size_t hidden() const { return w1.cols(); }

    static std::size_t input_width_for(RouterInput mode, std::size_t d_model) {
        switch (mode) {
            case RouterInput::Concat: return d_model + 2;
            case RouterInput::Features: return 2;
            case RouterInput::Length: return 1;
        }
        return 0;
    }

    /// (in)·h + h + h·2 + 2.
    static std::size_t closed_form_count(std::size_t in, std::size_t hidden) { return in * hidden + hidden + hidden * 2 + 2; }

    static RouterMLP random(std::size_t d_model, std::size_t hidden, RouterInput mode, SeededRng& rng) {
        if (hidden == 0) throw ConfigError("router hidden size must be positive");
        const std::size_t in = input_width_for(mode, d_model);
        RouterMLP m;
        m.w1 = Tensor::randn({in, hidden}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
        m.b1 = Tensor::zeros({hidden});
        m.w2 = Tensor::randn({hidden, 2}, rng, 1.0 / std::sqrt(static_cast<double>(hidden)));
        m.b2 = Tensor::zeros({2});
        m.input = mode;
        return m;
    }

    std::vector<Tensor> parameters() const { return {w1, b1, w2, b2}; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : parameters()) n += p.numel();
        return n;
    }

    void set_trainable(bool on) const {
        for (const auto& p : parameters()) p.set_requires_grad(on);
    }

    RouterMLP clone() const { return {w1.clone(), b1.clone(), w2.clone(), b2.clone(), input}; }
};

/// Pre-softmax gate logits for a batch of inputs (rows).
inline Tensor gate_logits(const RouterMLP& mlp, const Tensor& x) {
    if (x.cols() != mlp.input_width()) {
        throw DimensionError("router expects inputs of width " + std::to_string(mlp.input_width()) + ", got " +
                             shape_str(x.shape()));
    }
    const auto hidden = relu(add(matmul(x, mlp.w1), mlp.b1));
    return add(matmul(hidden, mlp.w2), mlp.b2);
}

/// Per-unit probability over (E_Mamba, E_T5); rows of an n x 2 tensor.
struct GateScores {
    Tensor probs;

    std::size_t size() const { return probs.rows(); }
    double mamba(std::size_t i) const { return probs.at(i, kMamba); }
    double t5(std::size_t i) const { return probs.at(i, kT5); }
};

inline GateScores gate_scores(const RouterMLP& mlp, const Tensor& fused) {
    const auto x = fused.rank() == 2 ? fused : reshaped(fused, {1, fused.numel()});
    return {softmax_rows(gate_logits(mlp, x))};
}

struct RoutingDecision {
    std::vector<int> experts;
    GateScores soft;
};

/// Argmax per unit; an exact tie goes to E_Mamba.
inline RoutingDecision hard_select(const GateScores& scores) {
    RoutingDecision d;
    d.soft = scores;
    d.experts.reserve(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) d.experts.push_back(scores.t5(i) > scores.mamba(i) ? kT5 : kMamba);
    return d;
}

// ---- router inputs for whole sequences ----

enum class Granularity { Token, Sequence };

inline std::string to_string(Granularity g) { return g == Granularity::Token ? "token" : "sequence"; }

inline Granularity granularity_from_string(const std::string& s) {
    if (s == "token") return Granularity::Token;
    if (s == "sequence") return Granularity::Sequence;
    throw ConfigError("unknown granularity '" + s + "' (expected token or sequence)");
}

struct RouterInputOptions {
    Granularity granularity = Granularity::Token;
    std::size_t length_cap = kDefaultLengthCap;
    bool drop_domain = false;  // force d = 0
};

inline RouterFeatures sequence_features(const Example& ex, const RouterInputOptions& opt) {
    return {length_feature(ex.length(), opt.length_cap), opt.drop_domain ? 0 : (ex.domain != 0 ? 1 : 0)};
}

/// One router input row for the given token representation.
inline std::vector<double> router_row(RouterInput mode, std::span<const double> repr, const RouterFeatures& f) {
    switch (mode) {
        case RouterInput::Concat: {
            std::vector<double> v(repr.begin(), repr.end());
            v.push_back(f.length);
            v.push_back(static_cast<double>(f.domain));
            return v;
        }
        case RouterInput::Features: return {f.length, static_cast<double>(f.domain)};
        case RouterInput::Length: return {f.length};
    }
    return {};
}

/// Router inputs for a sequence: one row per token, or a single row built
/// from the mean token representation. Token representations are rows of
/// `token_table` (frozen, no positional term).
inline Tensor sequence_router_inputs(const RouterMLP& mlp, const Tensor& token_table, const Example& ex,
                                     const RouterInputOptions& opt) {
    const auto f = sequence_features(ex, opt);
    const std::size_t d = token_table.cols();
    const auto table = token_table.data();
    std::vector<double> data;
    std::size_t rows = 0;
    if (opt.granularity == Granularity::Token) {
        for (int t : ex.tokens) {
            const auto row = router_row(mlp.input, table.subspan(static_cast<std::size_t>(t) * d, d), f);
            data.insert(data.end(), row.begin(), row.end());
            ++rows;
        }
    } else {
        std::vector<double> pooled(d, 0.0);
        for (int t : ex.tokens)
            for (std::size_t c = 0; c < d; ++c) pooled[c] += table[static_cast<std::size_t>(t) * d + c];
        for (auto& v : pooled) v /= static_cast<double>(ex.length());
        data = router_row(mlp.input, pooled, f);
        rows = 1;
    }
    return Tensor::matrix(rows, mlp.input_width(), std::move(data));
}

// ---- utility oracle ----

struct UtilityEstimate {
    double gain = 0.0;       // U_gain
    double threshold = 0.0;  // τ
};

using QualityFn = std::function<double(const std::vector<int>& prediction, const std::vector<int>& reference)>;

inline double f1_quality(const std::vector<int>& prediction, const std::vector<int>& reference) {
    return token_f1(prediction, reference).f1;
}

/// U_gain = quality(T5 answer) - quality(Mamba answer).
inline UtilityEstimate utility_gain(const std::vector<int>& t5_answer, const std::vector<int>& mamba_answer,
                                    const std::vector<int>& reference, const QualityFn& quality = f1_quality,
                                    double threshold = 0.0) {
    return {quality(t5_answer, reference) - quality(mamba_answer, reference), threshold};
}

/// E_T5 iff U_gain > τ.
inline int threshold_route(const UtilityEstimate& u) { return u.gain > u.threshold ? kT5 : kMamba; }

}  // namespace moeroute
