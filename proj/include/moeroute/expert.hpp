#pragma once

#include <chrono>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "moeroute/embedding.hpp"
#include "moeroute/ops.hpp"

namespace moeroute {

/// Hardware-independent cost counter. Only the terms that set each expert's
/// scaling law are counted: L²·d_model per attention layer (twice, for the
/// score and mixing products) and L·d_state·channels per scan.
struct OpCounter {
    std::uint64_t attention = 0;
    std::uint64_t ssm = 0;

    std::uint64_t total() const { return attention + ssm; }
    OpCounter& operator+=(const OpCounter& o) {
        attention += o.attention;
        ssm += o.ssm;
        return *this;
    }
};

struct ExpertOutput {
    Tensor hidden;   // L x d_model
    Tensor logits;   // L x vocab
    double seconds = 0.0;
    std::uint64_t ops = 0;
};

enum class ExpertKind : std::uint32_t { Attention = 1, SSM = 2 };

inline const char* to_string(ExpertKind k) { return k == ExpertKind::Attention ? "t5" : "mamba"; }

struct ExpertDims {
    std::size_t vocab = 256;
    std::size_t d_model = 64;
    std::size_t max_len = 1024;
    std::size_t n_domains = 2;
    std::size_t num_layers = 2;
    std::size_t num_heads = 4;   // attention only
    std::size_t d_ff = 256;      // attention only
    std::size_t d_state = 16;    // ssm only
    std::size_t lora_rank = 8;
    double lora_alpha = 16.0;
};

/// Output head shared in shape by both experts so routing never changes the
/// output space.
struct OutputHead {
    Tensor weight;  // vocab x d_model
    Tensor bias;    // vocab

    static OutputHead random(std::size_t vocab, std::size_t d_model, SeededRng& rng) {
        return {Tensor::randn({vocab, d_model}, rng, 1.0 / std::sqrt(static_cast<double>(d_model))),
                Tensor::zeros({vocab})};
    }
    Tensor apply(const Tensor& h) const { return add(matmul_nt(h, weight), bias); }
};

/// Uniform per-sequence interface over the two frozen experts.
class Expert {
public:
    virtual ~Expert() = default;

    virtual ExpertKind kind() const = 0;
    virtual const ExpertDims& dims() const = 0;

    /// Hidden states and logits for `tokens`, whose first token sits at
    /// absolute position `offset`. Records onto the active tape when the
    /// expert's parameters require grad.
    virtual ExpertOutput forward(std::span<const int> tokens, std::size_t domain, std::size_t offset = 0,
                                 OpCounter* ops = nullptr) const = 0;

    /// Outputs for rows [start, L) only, as used when training on the tail
    /// of a long sequence. By default the window is run on its own.
    virtual ExpertOutput forward_window(std::span<const int> tokens, std::size_t domain, std::size_t start) const {
        return forward(tokens.subspan(start), domain, start);
    }

    /// All tensors in checkpoint declaration order.
    virtual std::vector<Tensor> parameters() const = 0;
    /// Base weights, trained before adaptation.
    virtual std::vector<Tensor> base_parameters() const = 0;
    /// LoRA factors plus the domain projection.
    virtual std::vector<Tensor> adaptation_parameters() const = 0;

    /// Called after every optimizer step while training.
    virtual void project_constraints() {}

    bool frozen() const { return frozen_; }

    void freeze() {
        for (auto p : parameters()) {
            p.set_requires_grad(false);
            p.zero_grad();
        }
        frozen_ = true;
        mark_frozen();
    }

    /// Makes exactly `trainable` require grad. Refused once frozen.
    void set_trainable(const std::vector<Tensor>& trainable) {
        if (frozen_) throw ContractError(std::string("expert ") + to_string(kind()) + " is frozen and cannot be updated");
        for (auto p : parameters()) p.set_requires_grad(false);
        for (auto p : trainable) p.set_requires_grad(true);
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : parameters()) n += p.numel();
        return n;
    }

    /// Tape-free forward of a whole sequence with wall-clock timing.
    ExpertOutput run(std::span<const int> tokens, std::size_t domain, OpCounter* ops = nullptr) const {
        if (tokens.empty()) throw ContractError("expert forward on empty sequence");
        Tape::Pause pause;
        OpCounter local;
        const auto t0 = std::chrono::steady_clock::now();
        auto out = forward(tokens, domain, 0, &local);
        out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        out.ops = local.total();
        if (ops) *ops += local;
        return out;
    }

protected:
    virtual void mark_frozen() {}
    bool frozen_ = false;
};

namespace detail {

inline void check_tokens(std::span<const int> tokens, std::size_t vocab) {
    if (tokens.empty()) throw ContractError("expert forward on empty sequence");
    for (int t : tokens)
        if (t < 0 || static_cast<std::size_t>(t) >= vocab) throw IndexError("token id " + std::to_string(t) + " outside vocab");
}

inline void append(std::vector<Tensor>& dst, const std::vector<Tensor>& src) { dst.insert(dst.end(), src.begin(), src.end()); }

}  // namespace detail

}  // namespace moeroute
