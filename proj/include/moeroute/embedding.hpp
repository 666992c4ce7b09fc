#pragma once

#include <span>
#include <string>
#include <vector>

#include "moeroute/ops.hpp"

namespace moeroute {

/// Token table, positional table and domain projection. The adapted
/// embedding of token i at position p in domain k is e_i + P_p + W_d·onehot(k).
struct EmbeddingAdaptation {
    Tensor token_table;  // vocab x d_model
    Tensor positional;   // max_len x d_model
    Tensor domain_proj;  // d_model x n_domains

    std::size_t vocab() const { return token_table.rows(); }
    std::size_t d_model() const { return token_table.cols(); }
    std::size_t max_len() const { return positional.rows(); }
    std::size_t n_domains() const { return domain_proj.cols(); }

    static EmbeddingAdaptation random(std::size_t vocab, std::size_t d_model, std::size_t max_len,
                                      std::size_t n_domains, SeededRng& rng) {
        return {Tensor::randn({vocab, d_model}, rng, 0.5), Tensor::randn({max_len, d_model}, rng, 0.02),
                Tensor::randn({d_model, n_domains}, rng, 0.1)};
    }

    std::vector<Tensor> parameters() const { return {token_table, positional, domain_proj}; }
};

inline Tensor domain_onehot(std::size_t domain, std::size_t n_domains) {
    if (domain >= n_domains) {
        throw IndexError("domain " + std::to_string(domain) + " outside [0, " + std::to_string(n_domains) + ")");
    }
    auto t = Tensor::zeros({1, n_domains});
    t.mutable_data()[domain] = 1.0;
    return t;
}

inline Tensor adapt_embedding(const EmbeddingAdaptation& ad, int token_id, std::size_t position, std::size_t domain) {
    if (token_id < 0 || static_cast<std::size_t>(token_id) >= ad.vocab()) {
        throw IndexError("token id " + std::to_string(token_id) + " outside vocab of " + std::to_string(ad.vocab()));
    }
    if (position >= ad.max_len()) {
        throw IndexError("position " + std::to_string(position) + " outside max_len " + std::to_string(ad.max_len()));
    }
    const std::size_t d = ad.d_model();
    const auto onehot = domain_onehot(domain, ad.n_domains());
    const auto dom = matmul_nt(onehot, ad.domain_proj);  // (W_d · d_s)ᵀ
    std::vector<double> v(d);
    for (std::size_t c = 0; c < d; ++c) {
        v[c] = ad.token_table.at(static_cast<std::size_t>(token_id), c) + ad.positional.at(position, c) + dom[c];
    }
    return Tensor::vector(std::move(v));
}

/// Adapted embeddings for a whole sequence whose first token sits at
/// absolute position `offset`. Differentiable in all three tables.
inline Tensor adapt_sequence(const EmbeddingAdaptation& ad, std::span<const int> tokens, std::size_t domain,
                             std::size_t offset = 0) {
    if (offset + tokens.size() > ad.max_len()) {
        throw IndexError("sequence end " + std::to_string(offset + tokens.size()) + " exceeds max_len " +
                         std::to_string(ad.max_len()));
    }
    const auto tok = gather_rows(ad.token_table, tokens);
    const auto pos = slice_rows(ad.positional, offset, offset + tokens.size());
    const auto dom = matmul_nt(domain_onehot(domain, ad.n_domains()), ad.domain_proj);
    return add(add(tok, pos), dom);
}

}  // namespace moeroute
