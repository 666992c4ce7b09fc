#pragma once

#include <cmath>
#include <memory>

#include "moeroute/expert.hpp"
#include "moeroute/lora.hpp"

namespace moeroute {

struct AttentionLayerParams {
    LoRAAdapter query;  // adapted
    Tensor key;
    LoRAAdapter value;  // adapted
    Tensor output;
    Tensor ffn_in, ffn_in_bias;    // d_ff x d_model, d_ff
    Tensor ffn_out, ffn_out_bias;  // d_model x d_ff, d_model
    Tensor ln1_gain, ln1_bias, ln2_gain, ln2_bias;

    std::vector<Tensor> tensors() const {
        return {query.base, query.a, query.b, key, value.base, value.a, value.b, output,
                ffn_in, ffn_in_bias, ffn_out, ffn_out_bias, ln1_gain, ln1_bias, ln2_gain, ln2_bias};
    }
};

struct AttentionExpertParams {
    std::vector<AttentionLayerParams> layers;
    std::size_t num_heads = 1;
    bool frozen = false;

    std::size_t d_model() const { return layers.empty() ? 0 : layers.front().key.rows(); }
    std::size_t num_layers() const { return layers.size(); }

    void validate() const {
        const std::size_t d = d_model();
        if (num_heads == 0 || d % num_heads != 0) {
            throw ConfigError("d_model " + std::to_string(d) + " is not divisible by " + std::to_string(num_heads) + " heads");
        }
    }

    static AttentionExpertParams random(std::size_t d_model, std::size_t d_ff, std::size_t layers, std::size_t heads,
                                        std::size_t lora_rank, double lora_alpha, SeededRng& rng) {
        AttentionExpertParams p;
        p.num_heads = heads;
        const double sd = 1.0 / std::sqrt(static_cast<double>(d_model));
        const double sf = 1.0 / std::sqrt(static_cast<double>(d_ff));
        for (std::size_t l = 0; l < layers; ++l) {
            AttentionLayerParams L;
            L.query = LoRAAdapter::create(Tensor::randn({d_model, d_model}, rng, sd), lora_rank, lora_alpha, rng);
            L.key = Tensor::randn({d_model, d_model}, rng, sd);
            L.value = LoRAAdapter::create(Tensor::randn({d_model, d_model}, rng, sd), lora_rank, lora_alpha, rng);
            L.output = Tensor::randn({d_model, d_model}, rng, sd);
            L.ffn_in = Tensor::randn({d_ff, d_model}, rng, sd);
            L.ffn_in_bias = Tensor::zeros({d_ff});
            L.ffn_out = Tensor::randn({d_model, d_ff}, rng, sf);
            L.ffn_out_bias = Tensor::zeros({d_model});
            L.ln1_gain = Tensor::ones({d_model});
            L.ln1_bias = Tensor::zeros({d_model});
            L.ln2_gain = Tensor::ones({d_model});
            L.ln2_bias = Tensor::zeros({d_model});
            p.layers.push_back(std::move(L));
        }
        p.validate();
        return p;
    }
};

/// Full bidirectional multi-head self-attention, concatenated heads, output
/// projection. `weights`, when given, receives each head's L×L attention map.
inline Tensor multi_head_attention(const AttentionLayerParams& p, std::size_t num_heads, const Tensor& h,
                                   std::vector<Tensor>* weights = nullptr) {
    const std::size_t d = h.cols(), dh = d / num_heads;
    const auto q = lora_apply_rows(p.query, h);
    const auto k = matmul_nt(h, p.key);
    const auto v = lora_apply_rows(p.value, h);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> heads;
    heads.reserve(num_heads);
    for (std::size_t j = 0; j < num_heads; ++j) {
        const auto cols = [&](const Tensor& t) { return num_heads == 1 ? t : slice_cols(t, j * dh, (j + 1) * dh); };
        const auto att = softmax_rows(scale(matmul_nt(cols(q), cols(k)), inv_sqrt));
        if (weights) weights->push_back(att);
        heads.push_back(matmul(att, cols(v)));
    }
    const auto mixed = num_heads == 1 ? heads.front() : concat_cols(heads);
    return matmul_nt(mixed, p.output);
}

inline Tensor feed_forward(const AttentionLayerParams& p, const Tensor& h) {
    const auto inner = relu(add(matmul_nt(h, p.ffn_in), p.ffn_in_bias));
    return add(matmul_nt(inner, p.ffn_out), p.ffn_out_bias);
}

/// h' = LN(h + MHA(h)); out = LN(h' + FFN(h')).
inline Tensor attention_layer(const AttentionExpertParams& params, const Tensor& h, std::size_t layer,
                              OpCounter* ops = nullptr, std::vector<Tensor>* weights = nullptr) {
    if (layer >= params.layers.size()) throw IndexError("attention layer " + std::to_string(layer) + " out of range");
    if (h.rank() != 2 || h.rows() == 0) throw ContractError("attention_layer needs an L x d_model input with L >= 1");
    if (h.cols() != params.d_model()) throw DimensionError("attention_layer: input width " + std::to_string(h.cols()));
    params.validate();
    const auto& p = params.layers[layer];
    const auto mid = layer_norm(add(h, multi_head_attention(p, params.num_heads, h, weights)), p.ln1_gain, p.ln1_bias);
    const auto out = layer_norm(add(mid, feed_forward(p, mid)), p.ln2_gain, p.ln2_bias);
    if (ops) {
        const std::uint64_t L = h.rows();
        ops->attention += 2 * L * L * h.cols();
    }
    return out;
}

/// The accuracy expert: an attention encoder over adapted embeddings.
class AttentionExpert final : public Expert {
public:
    AttentionExpert(const ExpertDims& dims, SeededRng& rng)
        : dims_(dims),
          embedding_(EmbeddingAdaptation::random(dims.vocab, dims.d_model, dims.max_len, dims.n_domains, rng)),
          params_(AttentionExpertParams::random(dims.d_model, dims.d_ff, dims.num_layers, dims.num_heads, dims.lora_rank,
                                                dims.lora_alpha, rng)),
          head_(OutputHead::random(dims.vocab, dims.d_model, rng)) {}

    ExpertKind kind() const override { return ExpertKind::Attention; }
    const ExpertDims& dims() const override { return dims_; }

    ExpertOutput forward(std::span<const int> tokens, std::size_t domain, std::size_t offset = 0,
                         OpCounter* ops = nullptr) const override {
        detail::check_tokens(tokens, dims_.vocab);
        auto h = adapt_sequence(embedding_, tokens, domain, offset);
        for (std::size_t l = 0; l < params_.num_layers(); ++l) h = attention_layer(params_, h, l, ops);
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
            detail::append(out, {L.query.base, L.key, L.value.base, L.output, L.ffn_in, L.ffn_in_bias, L.ffn_out,
                                 L.ffn_out_bias, L.ln1_gain, L.ln1_bias, L.ln2_gain, L.ln2_bias});
        }
        detail::append(out, {head_.weight, head_.bias});
        return out;
    }

    std::vector<Tensor> adaptation_parameters() const override {
        std::vector<Tensor> out{embedding_.domain_proj};
        for (const auto& L : params_.layers) detail::append(out, {L.query.a, L.query.b, L.value.a, L.value.b});
        return out;
    }

    const AttentionExpertParams& params() const { return params_; }
    AttentionExpertParams& params() { return params_; }
    const EmbeddingAdaptation& embedding() const { return embedding_; }
    EmbeddingAdaptation& embedding() { return embedding_; }
    const OutputHead& head() const { return head_; }
    OutputHead& head() { return head_; }

private:
    void mark_frozen() override { params_.frozen = true; }

    ExpertDims dims_;
    EmbeddingAdaptation embedding_;
    AttentionExpertParams params_;
    OutputHead head_;
};

}  // namespace moeroute
