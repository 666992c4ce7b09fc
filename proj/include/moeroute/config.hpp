#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>

#include "moeroute/data.hpp"
#include "moeroute/expert_training.hpp"
#include "moeroute/moe_layer.hpp"
#include "moeroute/objective.hpp"

namespace moeroute {

enum class Variant { Full, NoGate, NoSpeedPenalty, NoDomainFeature, LengthOnly };

inline std::string to_string(Variant v) {
    switch (v) {
        case Variant::Full: return "full";
        case Variant::NoGate: return "no-gate";
        case Variant::NoSpeedPenalty: return "no-speed-penalty";
        case Variant::NoDomainFeature: return "no-domain-feature";
        case Variant::LengthOnly: return "length-only";
    }
    return "?";
}

inline Variant variant_from_string(const std::string& s) {
    for (auto v : {Variant::Full, Variant::NoGate, Variant::NoSpeedPenalty, Variant::NoDomainFeature, Variant::LengthOnly})
        if (to_string(v) == s) return v;
    throw ConfigError("unknown ablation variant '" + s + "'");
}

/// Everything a run depends on. Serialized into every run summary.
struct RunConfig {
    std::string command;
    std::uint64_t seed = 0;
    std::string out = "out";

    // data source: synthetic unless a JSONL path is given
    std::optional<std::size_t> synthetic_n;
    std::optional<double> long_frac;
    std::string family = "copy-with-lookup";
    std::string jsonl;
    std::size_t max_len = 1024;

    std::size_t d_model = 64;
    std::size_t hidden = 16;
    LossWeights weights{};
    double lr = 1e-3;
    std::size_t batch = 64;
    std::size_t epochs = 20;
    std::string granularity = "sequence";
    std::string policy = "learned";
    std::string variant = "full";

    // expert customization
    std::size_t custom_n = 2000;
    double custom_long_frac = 0.5;
    ExpertTrainConfig t5_train = default_train_config(ExpertKind::Attention);
    ExpertTrainConfig mamba_train = default_train_config(ExpertKind::SSM);

    std::size_t n_items() const { return synthetic_n.value_or(2000); }
    double long_fraction() const { return long_frac.value_or(0.95); }
    bool uses_jsonl() const { return !jsonl.empty(); }

    ExpertDims dims() const {
        ExpertDims d;
        d.d_model = d_model;
        d.max_len = max_len;
        return d;
    }
};

/// Fills defaults, range-checks every field and rejects contradictory
/// combinations. Errors name the offending field.
inline RunConfig validate_config(RunConfig c) {
    if (!c.jsonl.empty() && (c.synthetic_n || c.long_frac))
        throw ConfigError("jsonl: a JSONL path and synthetic settings (synthetic_n/long_frac) are mutually exclusive");
    if (c.n_items() < 10) throw ConfigError("synthetic_n: need at least 10 items to split, got " + std::to_string(c.n_items()));
    if (!(c.long_fraction() >= 0.0 && c.long_fraction() <= 1.0)) throw ConfigError("long_frac: must lie in [0, 1]");
    task_family_from_string(c.family);
    if (c.max_len < 32) throw ConfigError("max_len: must be at least 32");
    if (c.d_model == 0 || c.d_model % 4 != 0) throw ConfigError("d_model: must be a positive multiple of 4 (attention heads)");
    if (c.hidden == 0) throw ConfigError("hidden: must be positive");
    try {
        c.weights.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("weights: ") + e.what());
    }
    if (!(c.lr > 0.0)) throw ConfigError("lr: must be positive");
    if (c.batch == 0) throw ConfigError("batch: must be positive");
    if (c.epochs == 0) throw ConfigError("epochs: must be positive");
    granularity_from_string(c.granularity);
    policy_from_string(c.policy);
    variant_from_string(c.variant);
    if (c.custom_n < 2) throw ConfigError("custom_n: need at least 2 customization items");
    if (!(c.custom_long_frac > 0.0 && c.custom_long_frac < 1.0)) throw ConfigError("custom_long_frac: must lie in (0, 1)");
    return c;
}

inline nlohmann::json to_json(const ExpertTrainConfig& t) {
    return {{"base_steps", t.base_steps}, {"adapt_steps", t.adapt_steps}, {"batch", t.batch}, {"lr", t.lr},
            {"window", t.window}, {"lm_weight", t.lm_weight}, {"stability_weight", t.stability_weight}};
}

inline nlohmann::json to_json(const RunConfig& c) {
    nlohmann::json j{{"command", c.command},
                     {"seed", c.seed},
                     {"out", c.out},
                     {"synthetic_n", c.uses_jsonl() ? nlohmann::json() : nlohmann::json(c.n_items())},
                     {"long_frac", c.uses_jsonl() ? nlohmann::json() : nlohmann::json(c.long_fraction())},
                     {"family", c.family},
                     {"jsonl", c.jsonl},
                     {"max_len", c.max_len},
                     {"d_model", c.d_model},
                     {"hidden", c.hidden},
                     {"lambda1", c.weights.lambda1},
                     {"lambda2", c.weights.lambda2},
                     {"t_u", c.weights.t_u},
                     {"lm_weight", c.weights.lm_weight},
                     {"stability_weight", c.weights.stability_weight},
                     {"literal_balance", c.weights.literal_balance},
                     {"lr", c.lr},
                     {"batch", c.batch},
                     {"epochs", c.epochs},
                     {"granularity", c.granularity},
                     {"policy", c.policy},
                     {"variant", c.variant},
                     {"custom_n", c.custom_n},
                     {"custom_long_frac", c.custom_long_frac},
                     {"t5_train", to_json(c.t5_train)},
                     {"mamba_train", to_json(c.mamba_train)}};
    return j;
}

namespace detail {

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& dst) {
    if (!j.contains(key) || j[key].is_null()) return;
    try {
        dst = j[key].get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(std::string(key) + ": wrong type in config file");
    }
}

inline void read_train(const nlohmann::json& j, const char* key, ExpertTrainConfig& t) {
    if (!j.contains(key)) return;
    const auto& s = j[key];
    if (!s.is_object()) throw ConfigError(std::string(key) + ": expected an object");
    read_field(s, "base_steps", t.base_steps);
    read_field(s, "adapt_steps", t.adapt_steps);
    read_field(s, "batch", t.batch);
    read_field(s, "lr", t.lr);
    read_field(s, "window", t.window);
    read_field(s, "lm_weight", t.lm_weight);
    read_field(s, "stability_weight", t.stability_weight);
}

}  // namespace detail

/// Overlays the keys present in `j` onto `c`. Unknown keys are rejected.
inline void apply_json(RunConfig& c, const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config file must hold a JSON object");
    static const char* known[] = {"command", "seed", "out", "synthetic_n", "long_frac", "family", "jsonl", "max_len",
                                  "d_model", "hidden", "lambda1", "lambda2", "t_u", "lm_weight", "stability_weight",
                                  "literal_balance", "lr", "batch", "epochs", "granularity", "policy", "variant",
                                  "custom_n", "custom_long_frac", "t5_train", "mamba_train"};
    for (const auto& [key, value] : j.items())
        if (std::find(std::begin(known), std::end(known), key) == std::end(known))
            throw ConfigError(key + ": unknown config key");
    detail::read_field(j, "seed", c.seed);
    detail::read_field(j, "out", c.out);
    if (j.contains("synthetic_n") && !j["synthetic_n"].is_null()) {
        std::size_t n = 0;
        detail::read_field(j, "synthetic_n", n);
        c.synthetic_n = n;
    }
    if (j.contains("long_frac") && !j["long_frac"].is_null()) {
        double f = 0.0;
        detail::read_field(j, "long_frac", f);
        c.long_frac = f;
    }
    detail::read_field(j, "family", c.family);
    detail::read_field(j, "jsonl", c.jsonl);
    detail::read_field(j, "max_len", c.max_len);
    detail::read_field(j, "d_model", c.d_model);
    detail::read_field(j, "hidden", c.hidden);
    detail::read_field(j, "lambda1", c.weights.lambda1);
    detail::read_field(j, "lambda2", c.weights.lambda2);
    detail::read_field(j, "t_u", c.weights.t_u);
    detail::read_field(j, "lm_weight", c.weights.lm_weight);
    detail::read_field(j, "stability_weight", c.weights.stability_weight);
    detail::read_field(j, "literal_balance", c.weights.literal_balance);
    detail::read_field(j, "lr", c.lr);
    detail::read_field(j, "batch", c.batch);
    detail::read_field(j, "epochs", c.epochs);
    detail::read_field(j, "granularity", c.granularity);
    detail::read_field(j, "policy", c.policy);
    detail::read_field(j, "variant", c.variant);
    detail::read_field(j, "custom_n", c.custom_n);
    detail::read_field(j, "custom_long_frac", c.custom_long_frac);
    detail::read_train(j, "t5_train", c.t5_train);
    detail::read_train(j, "mamba_train", c.mamba_train);
}

inline std::string hex64(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

/// Hash of the full configuration, command and output directory excluded.
inline std::string config_hash(const RunConfig& c) {
    auto j = to_json(c);
    j.erase("command");
    j.erase("out");
    return hex64(fnv1a(j.dump()));
}

/// Hash of the fields the trained experts depend on.
inline std::string expert_key(const RunConfig& c) {
    const nlohmann::json j{{"seed", c.seed},
                           {"jsonl", c.jsonl},
                           {"synthetic_n", c.uses_jsonl() ? 0 : c.n_items()},
                           {"long_frac", c.uses_jsonl() ? 0.0 : c.long_fraction()},
                           {"family", c.family},
                           {"max_len", c.max_len},
                           {"d_model", c.d_model},
                           {"custom_n", c.custom_n},
                           {"custom_long_frac", c.custom_long_frac},
                           {"t5_train", to_json(c.t5_train)},
                           {"mamba_train", to_json(c.mamba_train)}};
    return hex64(fnv1a(j.dump()));
}

}  // namespace moeroute
