#pragma once

#include <span>
#include <vector>

#include "moeroute/attention_expert.hpp"
#include "moeroute/data.hpp"
#include "moeroute/optim.hpp"
#include "moeroute/ssm_expert.hpp"

namespace moeroute {

/// Mean of -log(max(softmax(logits)[r, y_r], 1e-12)) over rows with y_r >= 0.
/// Returns a zero scalar when no row is labelled.
inline Tensor masked_cross_entropy(const Tensor& logits, std::span<const int> targets) {
    if (targets.size() != logits.rows()) {
        throw DimensionError("cross entropy: " + std::to_string(targets.size()) + " targets for " +
                             std::to_string(logits.rows()) + " rows");
    }
    std::vector<int> rows, labels;
    for (std::size_t r = 0; r < targets.size(); ++r)
        if (targets[r] >= 0) {
            rows.push_back(static_cast<int>(r));
            labels.push_back(targets[r]);
        }
    if (rows.empty()) return Tensor::scalar(0.0);
    const auto p = pick(softmax_rows(gather_rows(logits, rows)), labels);
    return scale(mean(log(maximum(p, kProbFloor))), -1.0);
}

/// Next-token cross entropy over the unlabelled (question) positions:
/// position p predicts inputs[p+1] whenever both are unlabelled.
inline Tensor lm_loss(const Tensor& logits, std::span<const int> targets, std::span<const int> inputs) {
    std::vector<int> next(targets.size(), -1);
    for (std::size_t p = 0; p + 1 < targets.size(); ++p)
        if (targets[p] < 0 && targets[p + 1] < 0) next[p] = inputs[p + 1];
    return masked_cross_entropy(logits, next);
}

/// CE over labelled positions plus lm_weight times the input LM loss.
inline Tensor loss_t5(const Tensor& logits, std::span<const int> targets, double lm_weight,
                      std::span<const int> inputs = {}) {
    if (lm_weight < 0.0) throw ConfigError("lm_weight must be nonnegative");
    auto ce = masked_cross_entropy(logits, targets);
    if (lm_weight == 0.0) return ce;
    if (inputs.size() != targets.size()) throw DimensionError("loss_t5: inputs and targets differ in length");
    return add(ce, scale(lm_loss(logits, targets, inputs), lm_weight));
}

/// Σ over layers and channels of (a - 1)², the Frobenius distance of the
/// diagonal transitions from identity.
inline Tensor transition_penalty(const SSMExpertParams& params) {
    Tensor total = Tensor::scalar(0.0);
    for (const auto& L : params.layers) {
        const auto d = add_scalar(L.a, -1.0);
        total = add(total, sum(multiply(d, d)));
    }
    return total;
}

inline Tensor loss_mamba(const Tensor& logits, std::span<const int> targets, const SSMExpertParams& params,
                         double stability_weight) {
    if (stability_weight < 0.0) throw ConfigError("stability_weight must be nonnegative");
    auto ce = masked_cross_entropy(logits, targets);
    if (stability_weight == 0.0) return ce;
    return add(ce, scale(transition_penalty(params), stability_weight));
}

struct ExpertTrainConfig {
    std::size_t base_steps = 800;
    std::size_t adapt_steps = 200;
    std::size_t batch = 16;
    double lr = 3e-3;
    std::size_t window = 48;  // long items train on their last `window` tokens
    double lm_weight = 0.1;
    double stability_weight = 0.01;
    std::uint64_t seed = 0;
};

/// The recurrence needs a smaller step: at 2e-3 and above it settles on the
/// short regime and never learns the long lookup.
inline ExpertTrainConfig default_train_config(ExpertKind kind, std::uint64_t seed = 0) {
    ExpertTrainConfig c;
    c.seed = seed;
    if (kind == ExpertKind::SSM) {
        c.base_steps = 1000;
        c.lr = 1e-3;
    }
    return c;
}

struct ExpertTrainReport {
    std::vector<double> step_loss;
    double seconds = 0.0;
};

namespace detail {

inline double expert_loss_value(const Expert& e, const Example& ex, const ExpertTrainConfig& cfg, Tensor& loss) {
    const std::size_t L = ex.length();
    const std::size_t start = L > cfg.window ? L - cfg.window : 0;
    std::span<const int> tokens(ex.tokens.data() + start, L - start);
    std::vector<int> targets(L - start, -1);
    for (std::size_t j = 0; j < ex.answer_length(); ++j) targets[ex.answer_offset + j - start] = ex.targets[j];
    const auto out = e.forward_window(ex.tokens, static_cast<std::size_t>(ex.domain), start);
    if (e.kind() == ExpertKind::Attention) {
        loss = loss_t5(out.logits, targets, cfg.lm_weight, tokens);
    } else {
        loss = loss_mamba(out.logits, targets, static_cast<const SSMExpert&>(e).params(), cfg.stability_weight);
    }
    return loss.item();
}

inline void run_phase(Expert& e, const std::vector<Example>& data, const std::vector<std::size_t>& short_idx,
                      const std::vector<std::size_t>& long_idx, const std::vector<Tensor>& trainable,
                      std::size_t steps, const ExpertTrainConfig& cfg, SeededRng& rng, ExpertTrainReport& report) {
    if (steps == 0) return;
    e.set_trainable(trainable);
    Adam opt(trainable, {cfg.lr});
    for (std::size_t step = 0; step < steps; ++step) {
        opt.zero_grad();
        double total = 0.0;
        for (std::size_t k = 0; k < cfg.batch; ++k) {
            // Regime-balanced draw: alternate short and long items.
            const auto& pool = (k % 2 == 0 && !short_idx.empty()) || long_idx.empty() ? short_idx : long_idx;
            const auto& ex = data[pool[rng.below(pool.size())]];
            Tape tape;
            Tape::Recording rec(tape);
            Tensor loss;
            total += expert_loss_value(e, ex, cfg, loss);
            tape.backward(scale(loss, 1.0 / static_cast<double>(cfg.batch)));
        }
        opt.step();
        e.project_constraints();
        const double mean = total / static_cast<double>(cfg.batch);
        if (!std::isfinite(mean)) throw NumericError("expert training diverged at step " + std::to_string(step));
        report.step_loss.push_back(mean);
    }
}

}  // namespace detail

/// Two phases: every base weight trains with the adapters idle, then the base
/// is held fixed while the LoRA factors and domain projection adapt. The
/// expert is frozen afterwards.
inline ExpertTrainReport train_expert(Expert& e, const std::vector<Example>& data, const ExpertTrainConfig& cfg) {
    if (e.frozen()) throw ContractError(std::string("expert ") + to_string(e.kind()) + " is frozen and cannot be updated");
    if (data.empty()) throw ContractError("train_expert needs training data");
    std::vector<std::size_t> short_idx, long_idx;
    for (std::size_t i = 0; i < data.size(); ++i) (data[i].length() <= cfg.window ? short_idx : long_idx).push_back(i);
    SeededRng rng(cfg.seed);
    ExpertTrainReport report;
    const auto t0 = std::chrono::steady_clock::now();
    detail::run_phase(e, data, short_idx, long_idx, e.base_parameters(), cfg.base_steps, cfg, rng, report);
    detail::run_phase(e, data, short_idx, long_idx, e.adaptation_parameters(), cfg.adapt_steps, cfg, rng, report);
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    e.freeze();
    return report;
}

}  // namespace moeroute
