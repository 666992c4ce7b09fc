#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "moeroute/bench.hpp"
#include "moeroute/checkpoint.hpp"
#include "moeroute/config.hpp"

namespace moeroute {

// ---- data ----

struct Corpus {
    std::vector<QAPair> pairs;
    std::vector<Example> examples;
    DatasetSplits splits;
    std::uint64_t content_hash = 0;

    std::vector<Example> subset(const std::vector<std::size_t>& idx) const {
        std::vector<Example> out;
        out.reserve(idx.size());
        for (auto i : idx) out.push_back(examples[i]);
        return out;
    }
    std::vector<Example> train() const { return subset(splits.train); }
    std::vector<Example> valid() const { return subset(splits.valid); }
    std::vector<Example> test() const { return subset(splits.test); }
};

inline SyntheticSpec synthetic_spec(const RunConfig& c) {
    SyntheticSpec s;
    s.long_fraction = c.long_fraction();
    s.family = task_family_from_string(c.family);
    s.seed = c.seed;
    // small max_len shrinks both regimes proportionally
    s.long_max = std::min(s.long_max, c.max_len);
    s.long_min = std::min(s.long_min, s.long_max / 2);
    s.short_max = std::min(s.short_max, std::max(s.short_min + 1, s.long_min / 2));
    return s;
}

inline Corpus load_corpus(const RunConfig& c) {
    Corpus corpus;
    corpus.pairs = c.uses_jsonl() ? load_jsonl(c.jsonl) : gen_synthetic(synthetic_spec(c), c.n_items());
    if (corpus.pairs.size() < 10)
        throw ConfigError(std::string(c.uses_jsonl() ? "jsonl" : "synthetic_n") + ": dataset has " +
                          std::to_string(corpus.pairs.size()) + " items, at least 10 are needed");
    EncodeOptions opt;
    opt.max_len = c.max_len;
    for (const auto& p : corpus.pairs) corpus.examples.push_back(encode(p, opt));
    corpus.splits = split_dataset(corpus.pairs.size(), c.seed);
    corpus.content_hash = fnv1a(to_jsonl(corpus.pairs));
    return corpus;
}

/// Data the experts are customized on: a regime-balanced synthetic corpus
/// from a seed stream disjoint from the routing corpus, or the training
/// split when the data comes from a file.
inline std::vector<Example> customization_set(const RunConfig& c, const Corpus& corpus) {
    if (c.uses_jsonl()) return corpus.train();
    auto s = synthetic_spec(c);
    s.long_fraction = c.custom_long_frac;
    s.seed = SeededRng(c.seed).fork(101).next_u64();
    EncodeOptions opt;
    opt.max_len = c.max_len;
    std::vector<Example> out;
    for (const auto& p : gen_synthetic(s, c.custom_n)) out.push_back(encode(p, opt));
    return out;
}

// ---- experts ----

struct TrainedExperts {
    std::unique_ptr<Expert> mamba, t5;
    ExpertTrainReport mamba_report, t5_report;
    bool from_cache = false;

    ExpertPair pair() const { return {mamba.get(), t5.get()}; }
    /// E_Mamba's token table, the router's token representation.
    const Tensor& token_table() const { return static_cast<const SSMExpert&>(*mamba).embedding().token_table; }
};

inline TrainedExperts train_experts(const RunConfig& c, const Corpus& corpus) {
    const auto data = customization_set(c, corpus);
    const auto dims = c.dims();
    SeededRng root(c.seed);
    auto rng_t5 = root.fork(1), rng_mamba = root.fork(2);
    TrainedExperts e;
    e.t5 = std::make_unique<AttentionExpert>(dims, rng_t5);
    e.mamba = std::make_unique<SSMExpert>(dims, rng_mamba);
    auto t5_cfg = c.t5_train, mamba_cfg = c.mamba_train;
    t5_cfg.seed = root.fork(3).next_u64();
    mamba_cfg.seed = root.fork(4).next_u64();
    e.t5_report = train_expert(*e.t5, data, t5_cfg);
    e.mamba_report = train_expert(*e.mamba, data, mamba_cfg);
    return e;
}

inline std::filesystem::path expert_dir(const RunConfig& c, const Corpus& corpus) {
    return std::filesystem::path(c.out) / "experts" / (expert_key(c) + "-" + hex64(corpus.content_hash).substr(0, 8));
}

namespace detail {

inline void save_losses(const std::filesystem::path& file, const std::vector<double>& losses) {
    std::ofstream os(file, std::ios::trunc);
    if (!os) throw IoError("cannot write " + file.string());
    os.precision(17);
    for (double v : losses) os << v << '\n';
}

inline std::vector<double> load_losses(const std::filesystem::path& file) {
    std::ifstream is(file);
    if (!is) throw IoError("cannot read " + file.string());
    std::vector<double> out;
    for (double v; is >> v;) out.push_back(v);
    return out;
}

}  // namespace detail

/// Loads experts checkpointed by an earlier run with the same expert key,
/// otherwise trains and checkpoints them. Training loss curves are stored
/// alongside so a reload reports the same history.
inline TrainedExperts load_or_train_experts(const RunConfig& c, const Corpus& corpus) {
    const auto dir = expert_dir(c, corpus);
    const auto pm = dir / "mamba.ckpt", pt = dir / "t5.ckpt";
    if (std::filesystem::exists(pm) && std::filesystem::exists(pt)) {
        TrainedExperts e;
        e.mamba = load_expert(pm.string());
        e.t5 = load_expert(pt.string());
        if (e.mamba->kind() != ExpertKind::SSM || e.t5->kind() != ExpertKind::Attention)
            throw IoError("expert checkpoints in " + dir.string() + " hold the wrong expert kinds");
        e.mamba_report.step_loss = detail::load_losses(dir / "mamba_loss.txt");
        e.t5_report.step_loss = detail::load_losses(dir / "t5_loss.txt");
        e.from_cache = true;
        return e;
    }
    auto e = train_experts(c, corpus);
    std::filesystem::create_directories(dir);
    detail::save_losses(dir / "mamba_loss.txt", e.mamba_report.step_loss);
    detail::save_losses(dir / "t5_loss.txt", e.t5_report.step_loss);
    save_expert(*e.mamba, pm.string());
    save_expert(*e.t5, pt.string());
    return e;
}

inline std::vector<AnswerCache> cache_all(const std::vector<Example>& data, const ExpertPair& experts) {
    std::vector<AnswerCache> out;
    out.reserve(data.size());
    for (const auto& ex : data) out.push_back(cache_answers(ex, experts));
    return out;
}

/// Answer caches for the whole corpus, in corpus order. Stored next to the
/// expert checkpoints since they are a pure function of experts and data.
inline std::vector<AnswerCache> load_or_cache_all(const std::filesystem::path& file, const std::vector<Example>& data,
                                                  const ExpertPair& experts) {
    if (std::filesystem::exists(file)) {
        std::ifstream is(file, std::ios::binary);
        detail::Reader r(is, file.string());
        const auto n = r.get<std::uint64_t>();
        if (n == data.size()) {
            std::vector<AnswerCache> out(n);
            for (std::size_t q = 0; q < n; ++q)
                for (std::size_t k = 0; k < 2; ++k) {
                    const auto m = r.get<std::uint64_t>();
                    if (m != data[q].answer_length()) throw IoError(file.string() + ": cache does not match the corpus");
                    for (std::size_t j = 0; j < m; ++j) {
                        out[q].argmax[k].push_back(r.get<std::int32_t>());
                        out[q].target_prob[k].push_back(r.get<double>());
                    }
                }
            r.expect_end();
            return out;
        }
    }
    auto out = cache_all(data, experts);
    std::ofstream os(file, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + file.string());
    detail::Writer w(os);
    w.put<std::uint64_t>(out.size());
    for (const auto& c : out)
        for (std::size_t k = 0; k < 2; ++k) {
            w.put<std::uint64_t>(c.argmax[k].size());
            for (std::size_t j = 0; j < c.argmax[k].size(); ++j) {
                w.put<std::int32_t>(c.argmax[k][j]);
                w.put<double>(c.target_prob[k][j]);
            }
        }
    return out;
}

// ---- routing ----

/// The frozen experts with answer caches for every split.
struct Workbench {
    Corpus corpus;
    TrainedExperts experts;
    std::vector<Example> train, valid, test;
    std::vector<AnswerCache> train_cache, valid_cache, test_cache;
};

/// Loads the corpus, obtains frozen experts and caches their answers. With
/// `use_checkpoints`, experts and caches are reused from the output
/// directory when present and written there otherwise.
inline Workbench prepare(const RunConfig& c, bool use_checkpoints = true) {
    Workbench w;
    w.corpus = load_corpus(c);
    w.experts = use_checkpoints ? load_or_train_experts(c, w.corpus) : train_experts(c, w.corpus);
    w.train = w.corpus.train();
    w.valid = w.corpus.valid();
    w.test = w.corpus.test();
    const auto pair = w.experts.pair();
    const auto all = use_checkpoints ? load_or_cache_all(expert_dir(c, w.corpus) / "answers.bin", w.corpus.examples, pair)
                                     : cache_all(w.corpus.examples, pair);
    for (auto i : w.corpus.splits.train) w.train_cache.push_back(all[i]);
    for (auto i : w.corpus.splits.valid) w.valid_cache.push_back(all[i]);
    for (auto i : w.corpus.splits.test) w.test_cache.push_back(all[i]);
    return w;
}

/// One config delta per ablation variant.
struct RouterSetup {
    RouterInput input = RouterInput::Concat;
    RouterInputOptions options{};
    LossWeights weights{};
    bool bypass = false;  // no router; every unit to E_Mamba
};

inline RouterSetup router_setup(const RunConfig& c, Variant v) {
    RouterSetup s;
    s.options.granularity = granularity_from_string(c.granularity);
    s.options.length_cap = c.max_len;
    s.weights = c.weights;
    switch (v) {
        case Variant::Full: break;
        case Variant::NoGate: s.bypass = true; break;
        case Variant::NoSpeedPenalty: s.weights.lambda2 = 0.0; break;
        case Variant::NoDomainFeature: s.options.drop_domain = true; break;
        case Variant::LengthOnly: s.input = RouterInput::Features; break;
    }
    return s;
}

struct TrainedRouter {
    RouterMLP mlp;
    TrainState state;
    RouterSetup setup;

    RouterContext context(const TrainedExperts& e) const { return {&mlp, &e.token_table(), setup.options}; }
};

inline TrainedRouter train_router_run(const RunConfig& c, const Workbench& w, const RouterSetup& setup) {
    TrainedRouter r;
    r.setup = setup;
    SeededRng rng = SeededRng(c.seed).fork(5);
    r.mlp = RouterMLP::random(c.d_model, c.hidden, setup.input, rng);
    r.state.lr = c.lr;
    r.state.batch = c.batch;
    r.state.epochs = c.epochs;
    r.state.seed = SeededRng(c.seed).fork(6).next_u64();
    const auto ctx = r.context(w.experts);
    const auto data = build_router_data(w.train, w.train_cache, w.valid, w.valid_cache, ctx);
    train_router(r.mlp, data, setup.weights, r.state);
    return r;
}

/// Test-split report for a policy under a trained router (or none).
inline MetricReport evaluate(const Workbench& w, Policy policy, const TrainedRouter* router, const RouterSetup& setup,
                             const std::string& label = {}) {
    RouterContext ctx{router ? &router->mlp : nullptr, &w.experts.token_table(), setup.options};
    return evaluate_policy(policy, w.test, w.test_cache, ctx, w.experts.pair(), label);
}

/// Ablation report on the test split. no-gate bypasses the router entirely.
inline MetricReport run_ablation(const RunConfig& c, const Workbench& w, Variant v, TrainedRouter* trained = nullptr) {
    const auto setup = router_setup(c, v);
    if (setup.bypass) return evaluate(w, Policy::AlwaysMamba, nullptr, setup, to_string(v));
    auto r = train_router_run(c, w, setup);
    auto report = evaluate(w, Policy::Learned, &r, setup, to_string(v));
    if (trained) *trained = std::move(r);
    return report;
}

// ---- scaling and Pareto ----

struct ScalingResult {
    LatencyProfile attention, ssm;
};

/// Latency profiles of freshly initialized experts; scaling does not depend
/// on the weights, so no training is needed.
inline ScalingResult scaling_bench(const RunConfig& c, const std::vector<std::size_t>& lengths = {256, 512, 1024, 2048},
                                   std::size_t trials = 20) {
    auto dims = c.dims();
    dims.max_len = std::max(dims.max_len, lengths.back());
    SeededRng rng = SeededRng(c.seed).fork(7);
    AttentionExpert t5(dims, rng);
    SSMExpert mamba(dims, rng);
    t5.freeze();
    mamba.freeze();
    return {latency_profile(t5, lengths, trials, 2, c.seed), latency_profile(mamba, lengths, trials, 2, c.seed)};
}

/// Accuracy against mean expert ops (deterministic) or mean wall clock.
inline std::vector<ParetoPoint> pareto_points(const std::vector<MetricReport>& reports, bool wall_clock) {
    std::vector<ParetoPoint> pts;
    for (const auto& r : reports) pts.push_back({r.label, r.accuracy, wall_clock ? r.mean_latency : r.mean_ops, false});
    pareto_frontier(pts);
    return pts;
}

}  // namespace moeroute
