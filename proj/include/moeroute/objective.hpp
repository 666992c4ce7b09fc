#pragma once

#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "moeroute/moe_layer.hpp"
#include "moeroute/optim.hpp"

namespace moeroute {

struct LossWeights {
    double lambda1 = 1.0;  // balance
    double lambda2 = 0.5;  // speed penalty
    double t_u = 0.08;     // largest E_T5 soft score that goes unpenalized
    double lm_weight = 0.1;
    double stability_weight = 0.01;
    bool literal_balance = false;  // use the printed sign: -KL(S || U)

    void validate() const {
        if (lambda1 < 0.0) throw ConfigError("lambda1 must be nonnegative");
        if (lambda2 < 0.0) throw ConfigError("lambda2 must be nonnegative");
        if (!(t_u >= 0.0 && t_u <= 1.0)) throw ConfigError("t_u must lie in [0, 1]");
        if (lm_weight < 0.0) throw ConfigError("lm_weight must be nonnegative");
        if (stability_weight < 0.0) throw ConfigError("stability_weight must be nonnegative");
    }
};

struct LossBreakdown {
    Tensor ce, bal, pen, total;

    double l_ce() const { return ce.item(); }
    double l_bal() const { return bal.item(); }
    double l_pen() const { return pen.item(); }
    double l_total() const { return total.item(); }
};

namespace detail {

inline Tensor weighted_mean(const Tensor& column, std::span<const double> weights) {
    if (weights.empty()) return mean(column);
    if (weights.size() != column.rows()) throw DimensionError("one weight per score row required");
    double w = 0.0;
    for (double v : weights) w += v;
    if (!(w > 0.0)) throw ContractError("weights must have a positive sum");
    const auto wt = Tensor::matrix(weights.size(), 1, {weights.begin(), weights.end()});
    return scale(sum(multiply(column, wt)), 1.0 / w);
}

inline void check_scores(const Tensor& scores) {
    if (scores.rank() != 2 || scores.cols() != 2) throw DimensionError("gate scores must be n x 2");
    if (scores.rows() == 0) throw ContractError("gate scores are empty");
}

}  // namespace detail

/// Mean over labelled positions (target >= 0) of -log(max(p[r, y_r], 1e-12)).
inline Tensor ce_loss(const Tensor& p, std::span<const int> targets) {
    if (p.rank() != 2 || targets.size() != p.rows()) throw DimensionError("ce_loss: one target per row required");
    const std::size_t V = p.cols();
    const auto d = p.data();
    for (std::size_t r = 0; r < p.rows(); ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < V; ++c) {
            const double v = d[r * V + c];
            if (!(v >= 0.0)) throw NumericError("ce_loss: row " + std::to_string(r) + " has a negative or NaN entry");
            s += v;
        }
        if (std::abs(s - 1.0) > 1e-9) throw NumericError("ce_loss: row " + std::to_string(r) + " sums to " + std::to_string(s));
    }
    std::vector<int> rows, labels;
    for (std::size_t r = 0; r < targets.size(); ++r)
        if (targets[r] >= 0) {
            rows.push_back(static_cast<int>(r));
            labels.push_back(targets[r]);
        }
    if (rows.empty()) throw ContractError("ce_loss needs at least one labelled position");
    return scale(mean(log(maximum(pick(gather_rows(p, rows), labels), kProbFloor))), -1.0);
}

/// Weighted mean over rows of KL(S_i || U) = Σ_j S_ij log S_ij + ln 2, with
/// 0·log 0 = 0. `literal` returns the negation instead.
inline Tensor balance_loss(const Tensor& scores, std::span<const double> weights = {}, bool literal = false) {
    detail::check_scores(scores);
    const auto plogp = multiply(scores, log(maximum(scores, 1e-300)));
    const auto kl = add_scalar(sum_col_groups(plogp, 2), std::numbers::ln2);
    const auto b = detail::weighted_mean(kl, weights);
    return literal ? scale(b, -1.0) : b;
}

/// Weighted mean over rows of max(0, S_T5 - T_u).
inline Tensor speed_penalty(const Tensor& scores, double t_u, std::span<const double> weights = {}) {
    detail::check_scores(scores);
    return detail::weighted_mean(relu(add_scalar(slice_cols(scores, kT5, kT5 + 1), -t_u)), weights);
}

inline LossBreakdown total_loss(const Tensor& ce, const Tensor& bal, const Tensor& pen, const LossWeights& w) {
    return {ce, bal, pen, add(add(ce, scale(bal, w.lambda1)), scale(pen, w.lambda2))};
}

// ---- router training data ----

/// One sequence reduced to what router training needs. Tokens that are not
/// answer slots are merged per token id (they share an input row), weighted
/// by how many units they stand for. Each answer slot keeps its own row and
/// carries both experts' target probabilities.
struct RouterSample {
    std::vector<double> inputs;  // rows x width
    std::vector<double> weight;  // units per row
    std::vector<int> ce_row;     // row of each answer slot
    std::vector<std::array<double, 2>> q;  // (p_mamba(y), p_t5(y)) per answer slot
    std::size_t rows = 0;
    std::size_t width = 0;
};

inline RouterSample make_router_sample(const Example& ex, const AnswerCache& cache, const RouterContext& router) {
    const auto X = router.inputs(ex);
    RouterSample s;
    s.width = X.cols();
    const auto x = X.data();
    auto push_row = [&](std::size_t src, double w) {
        s.inputs.insert(s.inputs.end(), x.begin() + static_cast<std::ptrdiff_t>(src * s.width),
                        x.begin() + static_cast<std::ptrdiff_t>((src + 1) * s.width));
        s.weight.push_back(w);
        return static_cast<int>(s.rows++);
    };
    if (router.options.granularity == Granularity::Sequence) {
        const int r = push_row(0, 1.0);
        s.ce_row.assign(ex.answer_length(), r);
    } else {
        std::map<int, std::pair<std::size_t, double>> merged;  // token id -> (first position, count)
        for (std::size_t i = 0; i < ex.answer_offset; ++i) {
            auto [it, fresh] = merged.try_emplace(ex.tokens[i], i, 0.0);
            it->second.second += 1.0;
        }
        for (const auto& [id, pc] : merged) push_row(pc.first, pc.second);
        for (std::size_t j = 0; j < ex.answer_length(); ++j) s.ce_row.push_back(push_row(ex.answer_offset + j, 1.0));
    }
    for (std::size_t j = 0; j < ex.answer_length(); ++j) s.q.push_back({cache.target_prob[kMamba][j], cache.target_prob[kT5][j]});
    return s;
}

/// A batch of samples stacked into one router input matrix.
struct RouterBatch {
    Tensor inputs;
    std::vector<double> weight;
    std::vector<int> ce_row;
    Tensor q;  // answer slots x 2
};

inline RouterBatch stack_samples(const std::vector<const RouterSample*>& samples) {
    if (samples.empty()) throw ContractError("empty router batch");
    RouterBatch b;
    std::vector<double> x, q;
    std::size_t rows = 0;
    const std::size_t width = samples.front()->width;
    for (const auto* s : samples) {
        if (s->width != width) throw DimensionError("router samples disagree on input width");
        x.insert(x.end(), s->inputs.begin(), s->inputs.end());
        b.weight.insert(b.weight.end(), s->weight.begin(), s->weight.end());
        for (int r : s->ce_row) b.ce_row.push_back(r + static_cast<int>(rows));
        for (const auto& v : s->q) q.insert(q.end(), v.begin(), v.end());
        rows += s->rows;
    }
    b.inputs = Tensor::matrix(rows, width, std::move(x));
    b.q = Tensor::matrix(b.ce_row.size(), 2, std::move(q));
    return b;
}

/// L_total on a batch. The blended probability of each answer target is
/// S_mamba·p_mamba(y) + S_t5·p_t5(y), exactly what the soft mixture assigns.
inline LossBreakdown router_objective(const RouterMLP& mlp, const RouterBatch& batch, const LossWeights& w) {
    const auto scores = softmax_rows(gate_logits(mlp, batch.inputs));
    Tensor ce = Tensor::scalar(0.0);
    if (!batch.ce_row.empty()) {
        const auto p = sum_col_groups(multiply(gather_rows(scores, batch.ce_row), batch.q), 2);
        ce = scale(mean(log(maximum(p, kProbFloor))), -1.0);
    }
    const auto bal = balance_loss(scores, batch.weight, w.literal_balance);
    const auto pen = speed_penalty(scores, w.t_u, batch.weight);
    return total_loss(ce, bal, pen, w);
}

// ---- evaluation from cached answers ----

/// What a router decides on a set of samples, scored with the cached expert
/// answers (exact for frozen experts under hard execution).
struct CachedEval {
    double accuracy = 0.0;  // mean token F1
    double soft_util_t5 = 0.0;
    double hard_util_t5 = 0.0;
};

inline CachedEval evaluate_cached(const RouterMLP& mlp, const std::vector<Example>& data,
                                  const std::vector<AnswerCache>& caches, const std::vector<RouterSample>& samples) {
    if (data.empty()) throw ContractError("evaluate_cached needs data");
    Tape::Pause pause;
    CachedEval e;
    double units = 0.0, soft = 0.0, hard = 0.0, f1 = 0.0;
    for (std::size_t q = 0; q < data.size(); ++q) {
        const auto& s = samples[q];
        const auto S = softmax_rows(gate_logits(mlp, Tensor::matrix(s.rows, s.width, s.inputs)));
        for (std::size_t r = 0; r < s.rows; ++r) {
            units += s.weight[r];
            soft += s.weight[r] * S.at(r, kT5);
            hard += S.at(r, kT5) > S.at(r, kMamba) ? s.weight[r] : 0.0;
        }
        std::vector<int> answer;
        for (std::size_t j = 0; j < s.ce_row.size(); ++j) {
            const auto r = static_cast<std::size_t>(s.ce_row[j]);
            const int k = S.at(r, kT5) > S.at(r, kMamba) ? kT5 : kMamba;
            answer.push_back(caches[q].argmax[static_cast<std::size_t>(k)][j]);
        }
        f1 += token_f1(answer, data[q].targets).f1;
    }
    e.accuracy = f1 / static_cast<double>(data.size());
    e.soft_util_t5 = soft / units;
    e.hard_util_t5 = hard / units;
    return e;
}

// ---- training loop ----

struct EpochRecord {
    std::size_t epoch = 0;
    double l_ce = 0.0, l_bal = 0.0, l_pen = 0.0, l_total = 0.0;
    double val_accuracy = 0.0;
    double soft_util_t5 = 0.0;
    double hard_util_t5 = 0.0;
};

struct TrainState {
    std::size_t step = 0;
    double lr = 1e-3;
    std::size_t batch = 64;
    std::size_t epochs = 20;
    std::uint64_t seed = 0;
    std::vector<EpochRecord> history;
};

/// Everything router training reads: samples and caches for the train and
/// validation splits.
struct RouterData {
    std::vector<Example> train, valid;
    std::vector<AnswerCache> train_cache, valid_cache;
    std::vector<RouterSample> train_samples, valid_samples;
};

inline RouterData build_router_data(const std::vector<Example>& train, const std::vector<AnswerCache>& train_cache,
                                    const std::vector<Example>& valid, const std::vector<AnswerCache>& valid_cache,
                                    const RouterContext& router) {
    if (train.size() != train_cache.size() || valid.size() != valid_cache.size())
        throw DimensionError("one answer cache per example required");
    RouterData d{train, valid, train_cache, valid_cache, {}, {}};
    for (std::size_t i = 0; i < train.size(); ++i) d.train_samples.push_back(make_router_sample(train[i], train_cache[i], router));
    for (std::size_t i = 0; i < valid.size(); ++i) d.valid_samples.push_back(make_router_sample(valid[i], valid_cache[i], router));
    return d;
}

/// Adam on the router parameters only; experts are never touched. Records
/// per-epoch mean losses and validation metrics.
inline void train_router(RouterMLP& mlp, const RouterData& data, const LossWeights& w, TrainState& state) {
    w.validate();
    if (data.train.empty()) throw ContractError("train_router needs training data");
    if (state.batch == 0) throw ConfigError("batch must be positive");
    if (!(state.lr > 0.0)) throw ConfigError("lr must be positive");
    mlp.set_trainable(true);
    Adam opt(mlp.parameters(), {state.lr});
    SeededRng rng(state.seed);
    std::vector<std::size_t> order(data.train_samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t epoch = 1; epoch <= state.epochs; ++epoch) {
        rng.shuffle(order);
        EpochRecord rec;
        rec.epoch = epoch;
        std::size_t n_batches = 0;
        for (std::size_t start = 0; start < order.size(); start += state.batch) {
            std::vector<const RouterSample*> chunk;
            for (std::size_t i = start; i < std::min(order.size(), start + state.batch); ++i)
                chunk.push_back(&data.train_samples[order[i]]);
            const auto batch = stack_samples(chunk);
            opt.zero_grad();
            Tape tape;
            LossBreakdown loss;
            {
                Tape::Recording recording(tape);
                loss = router_objective(mlp, batch, w);
            }
            const double total = loss.l_total();
            if (!std::isfinite(total)) {
                mlp.set_trainable(false);
                throw NumericError("router loss became non-finite at epoch " + std::to_string(epoch) + ", step " +
                                   std::to_string(state.step));
            }
            tape.backward(loss.total);
            opt.step();
            ++state.step;
            ++n_batches;
            rec.l_ce += loss.l_ce();
            rec.l_bal += loss.l_bal();
            rec.l_pen += loss.l_pen();
            rec.l_total += total;
        }
        const double nb = static_cast<double>(n_batches);
        rec.l_ce /= nb;
        rec.l_bal /= nb;
        rec.l_pen /= nb;
        rec.l_total /= nb;
        if (!data.valid.empty()) {
            const auto e = evaluate_cached(mlp, data.valid, data.valid_cache, data.valid_samples);
            rec.val_accuracy = e.accuracy;
            rec.soft_util_t5 = e.soft_util_t5;
            rec.hard_util_t5 = e.hard_util_t5;
        }
        state.history.push_back(rec);
    }
    mlp.set_trainable(false);
}

inline const char* kEpochCsvHeader = "epoch,L_CE,L_Bal,L_Pen,L_total,val_accuracy,soft_util_t5,hard_util_t5";

inline void write_epoch_csv(std::ostream& os, const std::vector<EpochRecord>& history) {
    os << kEpochCsvHeader << '\n';
    os.precision(17);
    for (const auto& r : history)
        os << r.epoch << ',' << r.l_ce << ',' << r.l_bal << ',' << r.l_pen << ',' << r.l_total << ',' << r.val_accuracy
           << ',' << r.soft_util_t5 << ',' << r.hard_util_t5 << '\n';
}

}  // namespace moeroute
