#pragma once
// Small random experts and a short synthetic corpus shared by the routing,
// objective and evaluation tests.

#include "moeroute/moeroute.hpp"

namespace fixture {

using namespace moeroute;

inline ExpertDims dims() {
    ExpertDims d;
    d.d_model = 16;
    d.max_len = 64;
    d.d_ff = 32;
    d.d_state = 4;
    d.lora_rank = 4;
    return d;
}

struct World {
    std::unique_ptr<SSMExpert> mamba;
    std::unique_ptr<AttentionExpert> t5;
    std::vector<Example> data;
    std::vector<AnswerCache> caches;

    ExpertPair pair() const { return {mamba.get(), t5.get()}; }
    const Tensor& table() const { return mamba->embedding().token_table; }
};

inline World make_world(std::size_t n = 24, std::uint64_t seed = 7) {
    SeededRng rng(seed);
    World w;
    w.mamba = std::make_unique<SSMExpert>(dims(), rng);
    w.t5 = std::make_unique<AttentionExpert>(dims(), rng);
    w.mamba->freeze();
    w.t5->freeze();
    SyntheticSpec spec;
    spec.long_min = 24;
    spec.long_max = 48;
    spec.short_min = 8;
    spec.short_max = 20;
    spec.long_fraction = 0.5;
    spec.seed = seed;
    EncodeOptions opt;
    opt.max_len = 64;
    for (const auto& p : gen_synthetic(spec, n)) w.data.push_back(encode(p, opt));
    for (const auto& ex : w.data) w.caches.push_back(cache_answers(ex, w.pair()));
    return w;
}

inline RouterContext context(const World& w, const RouterMLP& mlp, Granularity g) {
    RouterInputOptions opt;
    opt.granularity = g;
    opt.length_cap = 64;
    return {&mlp, &w.table(), opt};
}

}  // namespace fixture
