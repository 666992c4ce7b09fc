#pragma once

#include <algorithm>
#include <cmath>

#include "moeroute/expert.hpp"
#include "moeroute/lora.hpp"

namespace moeroute {

inline constexpr double kStabilityBound = 1.0 + 1e-9;

/// One diagonal state-space block. Ā, B̄ and C̄ are stored per channel as rows
/// of a channels x d_state matrix.
struct SSMLayerParams {
    LoRAAdapter in_proj;   // channels x d_model, adapted
    Tensor in_bias;        // channels
    Tensor a, b, c;        // channels x d_state
    LoRAAdapter out_proj;  // d_model x channels, adapted
    Tensor out_bias;       // d_model
    Tensor ln_gain, ln_bias;

    std::size_t channels() const { return a.rows(); }
    std::size_t d_state() const { return a.cols(); }

    std::vector<Tensor> tensors() const {
        return {in_proj.base, in_proj.a, in_proj.b, in_bias, a, b, c,
                out_proj.base, out_proj.a, out_proj.b, out_bias, ln_gain, ln_bias};
    }
};

struct SSMExpertParams {
    std::vector<SSMLayerParams> layers;
    bool selective = false;
    bool frozen = false;

    std::size_t num_layers() const { return layers.size(); }

    /// Throws StabilityError when any |Ā| exceeds 1 + 1e-9.
    void check_stability() const {
        for (std::size_t l = 0; l < layers.size(); ++l)
            for (double v : layers[l].a.data())
                if (!(std::abs(v) <= kStabilityBound)) {
                    throw StabilityError("layer " + std::to_string(l) + ": |A| = " + std::to_string(std::abs(v)) +
                                         " exceeds 1");
                }
    }

    /// Clamps Ā back into [-1, 1]; applied after every training step.
    void clamp_transitions() {
        for (auto& L : layers)
            for (auto& v : L.a.mutable_data()) v = std::clamp(v, -1.0, 1.0);
    }

    static SSMExpertParams random(std::size_t d_model, std::size_t channels, std::size_t d_state, std::size_t layers,
                                  std::size_t lora_rank, double lora_alpha, SeededRng& rng) {
        SSMExpertParams p;
        const double sd = 1.0 / std::sqrt(static_cast<double>(d_model));
        const double sc = 1.0 / std::sqrt(static_cast<double>(channels));
        const double ss = 1.0 / std::sqrt(static_cast<double>(d_state));
        for (std::size_t l = 0; l < layers; ++l) {
            SSMLayerParams L;
            L.in_proj = LoRAAdapter::create(Tensor::randn({channels, d_model}, rng, sd), lora_rank, lora_alpha, rng);
            L.in_bias = Tensor::zeros({channels});
            L.a = Tensor::uniform({channels, d_state}, rng, 0.5, 0.99);
            L.b = Tensor::randn({channels, d_state}, rng, ss);
            L.c = Tensor::randn({channels, d_state}, rng, ss);
            L.out_proj = LoRAAdapter::create(Tensor::randn({d_model, channels}, rng, sc), lora_rank, lora_alpha, rng);
            L.out_bias = Tensor::zeros({d_model});
            L.ln_gain = Tensor::ones({d_model});
            L.ln_bias = Tensor::zeros({d_model});
            p.layers.push_back(std::move(L));
        }
        return p;
    }
};

namespace detail {

// Input-dependent B̄ for the selective variant: each channel's input gate is
// sigmoid(u). Forward only.
inline double selective_gate(double u) { return 1.0 / (1.0 + std::exp(-u)); }

// Tape-free left-to-right scan from state `h0` (zero when empty). The final
// state is left in `h`.
inline Tensor scan_kernel(const SSMLayerParams& p, const Tensor& u, bool selective, std::vector<double>& h) {
    const std::size_t L = u.rows(), ch = p.channels(), ds = p.d_state();
    const auto a = p.a.data(), b = p.b.data(), c = p.c.data(), x = u.data();
    if (h.empty()) h.assign(ch * ds, 0.0);
    std::vector<double> y(L * ch);
    for (std::size_t t = 0; t < L; ++t) {
        for (std::size_t k = 0; k < ch; ++k) {
            const double xt = x[t * ch + k] * (selective ? selective_gate(x[t * ch + k]) : 1.0);
            double acc = 0.0;
            const std::size_t base = k * ds;
            for (std::size_t s = 0; s < ds; ++s) {
                h[base + s] = a[base + s] * h[base + s] + b[base + s] * xt;
                acc += c[base + s] * h[base + s];
            }
            y[t * ch + k] = acc;
        }
    }
    Tensor out = Tensor::matrix(L, ch, std::move(y));
    check_finite(out, "ssm_scan");
    return out;
}

// The same recurrence built from differentiable ops, one step per timestep.
// A nonempty `h0` is a constant starting state (no gradient flows into it).
inline Tensor scan_graph(const SSMLayerParams& p, const Tensor& u, const std::vector<double>& h0) {
    const std::size_t L = u.rows(), ch = p.channels(), ds = p.d_state();
    const auto a = reshaped(p.a, {ch * ds});
    const auto b = reshaped(p.b, {ch * ds});
    const auto c = reshaped(p.c, {ch * ds});
    const auto drive = multiply(repeat_cols(u, ds), b);  // B̄·x_t for every (channel, state)
    std::vector<Tensor> states;
    states.reserve(L);
    Tensor h = slice_rows(drive, 0, 1);
    if (!h0.empty()) h = add(multiply(Tensor::matrix(1, ch * ds, h0), a), h);
    states.push_back(h);
    for (std::size_t t = 1; t < L; ++t) {
        h = add(multiply(h, a), slice_rows(drive, t, t + 1));
        states.push_back(h);
    }
    return sum_col_groups(multiply(concat_rows(states), c), ds);
}

}  // namespace detail

/// Per-channel diagonal recurrence h_t = Ā⊙h_{t-1} + B̄·u_t, y_t = C̄·h_t.
/// `u` is L x channels (already input-projected). `state`, when given, holds
/// h_0 on entry (empty means zero) and h_L on exit.
inline Tensor ssm_recurrence(const SSMLayerParams& p, const Tensor& u, bool selective = false, OpCounter* ops = nullptr,
                             std::vector<double>* state = nullptr) {
    if (u.rank() != 2 || u.rows() == 0) throw ContractError("ssm scan needs an L x channels input with L >= 1");
    if (u.cols() != p.channels()) throw DimensionError("ssm scan: input width " + std::to_string(u.cols()));
    for (double v : p.a.data())
        if (!(std::abs(v) <= kStabilityBound)) throw StabilityError("|A| = " + std::to_string(std::abs(v)) + " exceeds 1");
    const bool training = Tape::active() != nullptr &&
                          (u.requires_grad() || p.a.requires_grad() || p.b.requires_grad() || p.c.requires_grad());
    if (training && selective) throw ConfigError("the selective scan variant is forward-only");
    std::vector<double> local;
    auto& h = state ? *state : local;
    Tensor y;
    if (training) {
        y = detail::scan_graph(p, u, h);
        h.clear();  // the graph path does not report its final state
    } else {
        y = detail::scan_kernel(p, u, selective, h);
    }
    if (ops) ops->ssm += static_cast<std::uint64_t>(u.rows()) * p.d_state() * p.channels();
    return y;
}

/// Full block: z = scan(in_proj(x)); out = LN(x + out_proj(relu(z))).
inline Tensor ssm_scan(const SSMExpertParams& params, const Tensor& x, std::size_t layer, OpCounter* ops = nullptr,
                       std::vector<double>* state = nullptr) {
    if (layer >= params.layers.size()) throw IndexError("ssm layer " + std::to_string(layer) + " out of range");
    const auto& p = params.layers[layer];
    if (x.rank() != 2 || x.rows() == 0) throw ContractError("ssm_scan needs an L x d_model input with L >= 1");
    const auto u = add(lora_apply_rows(p.in_proj, x), p.in_bias);
    const auto z = ssm_recurrence(p, u, params.selective, ops, state);
    const auto y = add(lora_apply_rows(p.out_proj, relu(z)), p.out_bias);
    return layer_norm(add(x, y), p.ln_gain, p.ln_bias);
}

/// The efficiency expert: stacked diagonal SSM blocks over adapted embeddings.
class SSMExpert final : public Expert {
public:
    SSMExpert(const ExpertDims& dims, SeededRng& rng)
        : dims_(dims),
          embedding_(EmbeddingAdaptation::random(dims.vocab, dims.d_model, dims.max_len, dims.n_domains, rng)),
          params_(SSMExpertParams::random(dims.d_model, dims.d_model, dims.d_state, dims.num_layers, dims.lora_rank,
                                          dims.lora_alpha, rng)),
          head_(OutputHead::random(dims.vocab, dims.d_model, rng)) {}

    ExpertKind kind() const override { return ExpertKind::SSM; }
    const ExpertDims& dims() const override { return dims_; }

    ExpertOutput forward(std::span<const int> tokens, std::size_t domain, std::size_t offset = 0,
                         OpCounter* ops = nullptr) const override {
        detail::check_tokens(tokens, dims_.vocab);
        auto h = adapt_sequence(embedding_, tokens, domain, offset);
        for (std::size_t l = 0; l < params_.num_layers(); ++l) h = ssm_scan(params_, h, l, ops);
        return {h, head_.apply(h), 0.0, 0};
    }

    /// Rows [start, L): the prefix runs tape-free and hands its exact final
    /// state to the recorded window, so gradients are truncated at `start`.
    ExpertOutput forward_window(std::span<const int> tokens, std::size_t domain, std::size_t start) const override {
        if (start == 0) return forward(tokens, domain);
        detail::check_tokens(tokens, dims_.vocab);
        if (start >= tokens.size()) throw ContractError("window start beyond sequence end");
        std::vector<std::vector<double>> states(params_.num_layers());
        {
            Tape::Pause pause;
            auto h = adapt_sequence(embedding_, tokens.first(start), domain, 0);
            for (std::size_t l = 0; l < params_.num_layers(); ++l) h = ssm_scan(params_, h, l, nullptr, &states[l]);
        }
        auto h = adapt_sequence(embedding_, tokens.subspan(start), domain, start);
        for (std::size_t l = 0; l < params_.num_layers(); ++l) h = ssm_scan(params_, h, l, nullptr, &states[l]);
        return {h, head_.apply(h), 0.0, 0};
    }

    std::vector<Tensor> parameters() const override {
        auto out = embedding_.parameters();
        for (const auto& L : params_.layers) detail::append(out, L.tensors());
        detail::append(out, {head_.weight, head_.bias});
        return out;
    }

    std::vector<Tensor> base_parameters() const override {
        std::vector<Tensor> out{embedding_.token_table, embedding_.positional, embedding_.domain_proj};
        for (const auto& L : params_.layers) {
            detail::append(out, {L.in_proj.base, L.in_bias, L.a, L.b, L.c, L.out_proj.base, L.out_bias, L.ln_gain,
                                 L.ln_bias});
        }
        detail::append(out, {head_.weight, head_.bias});
        return out;
    }

    std::vector<Tensor> adaptation_parameters() const override {
        std::vector<Tensor> out{embedding_.domain_proj};
        for (const auto& L : params_.layers) detail::append(out, {L.in_proj.a, L.in_proj.b, L.out_proj.a, L.out_proj.b});
        return out;
    }

    void project_constraints() override { params_.clamp_transitions(); }

    const SSMExpertParams& params() const { return params_; }
    SSMExpertParams& params() { return params_; }
    const EmbeddingAdaptation& embedding() const { return embedding_; }
    EmbeddingAdaptation& embedding() { return embedding_; }
    const OutputHead& head() const { return head_; }
    OutputHead& head() { return head_; }

private:
    void mark_frozen() override { params_.frozen = true; }

    ExpertDims dims_;
    EmbeddingAdaptation embedding_;
    SSMExpertParams params_;
    OutputHead head_;
};

}  // namespace moeroute
