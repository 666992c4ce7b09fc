#pragma once

#include <algorithm>
#include <string>

#include "moeroute/ops.hpp"

namespace moeroute {

/// Low-rank adapter around a frozen base map: W' = W + (alpha/r)·B·A.
/// W is m×n (out×in), A is r×n, B is m×r. B starts at zero so a fresh
/// adapter leaves the base map untouched.
struct LoRAAdapter {
    Tensor base;
    Tensor a;
    Tensor b;
    std::size_t rank = 0;
    double alpha = 1.0;

    std::size_t out_features() const { return base.rows(); }
    std::size_t in_features() const { return base.cols(); }
    double scaling() const { return alpha / static_cast<double>(rank); }

    /// The low-rank path can be skipped: B is zero and nothing is training it.
    bool skippable() const { return !a.requires_grad() && !b.requires_grad() && adapter_is_zero(); }

    bool adapter_is_zero() const {
        const auto d = b.data();
        return std::all_of(d.begin(), d.end(), [](double v) { return v == 0.0; });
    }

    void validate() const {
        const std::size_t m = base.rows(), n = base.cols();
        if (rank == 0 || rank >= std::min(m, n)) {
            throw ConfigError("LoRA rank " + std::to_string(rank) + " must lie in [1, min(" + std::to_string(m) + ", " +
                              std::to_string(n) + "))");
        }
        if (!(alpha > 0.0)) throw ConfigError("LoRA alpha must be positive");
        if (a.rows() != rank || a.cols() != n || b.rows() != m || b.cols() != rank) {
            throw DimensionError("LoRA factor shapes " + shape_str(a.shape()) + "/" + shape_str(b.shape()) +
                                 " do not fit base " + shape_str(base.shape()));
        }
    }

    static LoRAAdapter create(Tensor base, std::size_t rank, double alpha, SeededRng& rng) {
        const std::size_t m = base.rows(), n = base.cols();
        LoRAAdapter ad{std::move(base), Tensor::zeros({rank, n}), Tensor::zeros({m, rank}), rank, alpha};
        ad.validate();
        ad.a = Tensor::randn({rank, n}, rng, 1.0 / std::sqrt(static_cast<double>(n)));
        return ad;
    }
};

/// (W + (alpha/r)·B·A)·x for a single vector, without forming W'.
inline Tensor lora_apply(const LoRAAdapter& ad, const Tensor& x) {
    ad.validate();
    if (x.numel() != ad.in_features()) {
        throw DimensionError("lora_apply: input " + shape_str(x.shape()) + " vs base " + shape_str(ad.base.shape()));
    }
    const auto row = x.rank() == 1 ? x : reshaped(x, {x.numel()});
    auto y = matmul_nt(row, ad.base);
    if (!ad.skippable()) y = add(y, scale(matmul_nt(matmul_nt(row, ad.a), ad.b), ad.scaling()));
    return y;
}

/// Row-batched form: X·W'ᵀ for X of shape L×n.
inline Tensor lora_apply_rows(const LoRAAdapter& ad, const Tensor& x) {
    auto y = matmul_nt(x, ad.base);
    if (!ad.skippable()) y = add(y, scale(matmul_nt(matmul_nt(x, ad.a), ad.b), ad.scaling()));
    return y;
}

/// Dense W' (for inspection and tests).
inline Tensor lora_merged(const LoRAAdapter& ad) {
    Tape::Pause pause;
    return add(ad.base, scale(matmul(ad.b, ad.a), ad.scaling()));
}

}  // namespace moeroute
