// moeroute command-line driver: data generation, expert customization,
// router training, evaluation, scaling benchmark, ablations, Pareto.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "moeroute/moeroute.hpp"

namespace fs = std::filesystem;
using namespace moeroute;
using nlohmann::json;

namespace {

struct Flags {
    std::string config_file;
    std::uint64_t seed = 0;
    std::string out;
    std::size_t synthetic_n = 0;
    double long_frac = 0.0;
    std::string jsonl;
    std::size_t d_model = 0, hidden = 0, batch = 0, epochs = 0;
    double lambda1 = 0.0, lambda2 = 0.0, t_u = 0.0, lr = 0.0;
    std::string granularity, policy, variant;
    std::map<std::string, CLI::Option*> opts;
};

void add_flags(CLI::App* cmd, Flags& f) {
    auto& o = f.opts;
    o["config"] = cmd->add_option("--config", f.config_file, "JSON config file; flags override its keys");
    o["seed"] = cmd->add_option("--seed", f.seed, "Seed (falls back to MOEROUTE_SEED, then 0)");
    o["out"] = cmd->add_option("--out", f.out, "Output directory (default out)");
    o["synthetic-n"] = cmd->add_option("--synthetic-n", f.synthetic_n, "Synthetic corpus size (default 2000)");
    o["long-frac"] = cmd->add_option("--long-frac", f.long_frac, "Long-regime fraction (default 0.95)");
    o["jsonl"] = cmd->add_option("--jsonl", f.jsonl, "QA pairs as JSONL instead of the synthetic corpus");
    o["d-model"] = cmd->add_option("--d-model", f.d_model, "Expert width (default 64)");
    o["hidden"] = cmd->add_option("--hidden", f.hidden, "Router hidden size (default 16)");
    o["lambda1"] = cmd->add_option("--lambda1", f.lambda1, "Balance weight (default 1.0)");
    o["lambda2"] = cmd->add_option("--lambda2", f.lambda2, "Speed penalty weight (default 0.5)");
    o["t-u"] = cmd->add_option("--t-u", f.t_u, "E_T5 soft usage threshold (default 0.08)");
    o["lr"] = cmd->add_option("--lr", f.lr, "Router learning rate (default 1e-3)");
    o["batch"] = cmd->add_option("--batch", f.batch, "Router batch size (default 64)");
    o["epochs"] = cmd->add_option("--epochs", f.epochs, "Router epochs (default 20)");
    o["granularity"] = cmd->add_option("--granularity", f.granularity, "Routing unit (default sequence)")
                           ->check(CLI::IsMember({"token", "sequence"}));
    o["policy"] = cmd->add_option("--policy", f.policy, "Evaluation policy (default learned)")
                      ->check(CLI::IsMember({"learned", "always-mamba", "always-t5", "oracle"}));
    o["variant"] = cmd->add_option("--variant", f.variant, "Ablation variant (ablate runs all when omitted)")
                       ->check(CLI::IsMember({"full", "no-gate", "no-speed-penalty", "no-domain-feature", "length-only"}));
}

bool given(const Flags& f, const char* name) { return f.opts.at(name)->count() > 0; }

RunConfig build_config(const std::string& command, const Flags& f) {
    RunConfig c;
    if (const char* env = std::getenv("MOEROUTE_SEED")) {
        try {
            c.seed = std::stoull(env);
        } catch (const std::exception&) {
            throw ConfigError(std::string("MOEROUTE_SEED: not an unsigned integer: '") + env + "'");
        }
    }
    if (given(f, "config")) {
        std::ifstream is(f.config_file);
        if (!is) throw ConfigError("config: cannot open " + f.config_file);
        json j;
        try {
            j = json::parse(is);
        } catch (const json::parse_error& e) {
            throw ConfigError("config: malformed JSON in " + f.config_file + " (" + e.what() + ")");
        }
        apply_json(c, j);
    }
    c.command = command;
    if (given(f, "seed")) c.seed = f.seed;
    if (given(f, "out")) c.out = f.out;
    if (given(f, "synthetic-n")) c.synthetic_n = f.synthetic_n;
    if (given(f, "long-frac")) c.long_frac = f.long_frac;
    if (given(f, "jsonl")) c.jsonl = f.jsonl;
    if (given(f, "d-model")) c.d_model = f.d_model;
    if (given(f, "hidden")) c.hidden = f.hidden;
    if (given(f, "lambda1")) c.weights.lambda1 = f.lambda1;
    if (given(f, "lambda2")) c.weights.lambda2 = f.lambda2;
    if (given(f, "t-u")) c.weights.t_u = f.t_u;
    if (given(f, "lr")) c.lr = f.lr;
    if (given(f, "batch")) c.batch = f.batch;
    if (given(f, "epochs")) c.epochs = f.epochs;
    if (given(f, "granularity")) c.granularity = f.granularity;
    if (given(f, "policy")) c.policy = f.policy;
    if (given(f, "variant")) c.variant = f.variant;
    return validate_config(c);
}

// ---- artifacts ----

class Run {
public:
    explicit Run(const RunConfig& c) : cfg_(c), dir_(c.out) {
        fs::create_directories(dir_);
        write_json(c.command + ".config.json", to_json(c));
    }

    const RunConfig& cfg() const { return cfg_; }

    void write_text(const std::string& name, const std::string& body) const {
        std::ofstream os(dir_ / name, std::ios::trunc);
        if (!os) throw IoError("cannot write " + (dir_ / name).string());
        os << body;
    }
    void write_json(const std::string& name, const json& j) const { write_text(name, j.dump(2) + "\n"); }

    /// Summary record {run_id, seed, config hash, config, metrics}.
    void summary(const json& metrics) const {
        const auto hash = config_hash(cfg_);
        write_json(cfg_.command + ".json", {{"run_id", cfg_.command + "-" + hash},
                                            {"seed", cfg_.seed},
                                            {"config_hash", hash},
                                            {"config", to_json(cfg_)},
                                            {"metrics", metrics}});
    }

private:
    RunConfig cfg_;
    fs::path dir_;
};

std::string metric_csv(const std::vector<MetricReport>& reports) {
    std::ostringstream os;
    os << kMetricCsvHeader << '\n';
    for (const auto& r : reports) write_metric_row(os, r);
    return os.str();
}

json timing(const std::vector<MetricReport>& reports) {
    json j = json::array();
    for (const auto& r : reports) j.push_back(timing_json(r));
    return j;
}

Policy policy_of(const RunConfig& c) { return policy_from_string(c.policy); }

/// The router for the configured variant, reused from the output directory
/// when an identical configuration has trained it before.
TrainedRouter obtain_router(const RunConfig& c, const Workbench& w, Variant v) {
    const auto setup = router_setup(c, v);
    const fs::path path = fs::path(c.out) / "routers" / (config_hash(c) + "-" + to_string(v) + ".ckpt");
    const fs::path hist = fs::path(path).replace_extension(".csv");
    TrainedRouter r;
    if (fs::exists(path) && fs::exists(hist)) {
        r.mlp = load_router(path.string());
        r.setup = setup;
        return r;
    }
    r = train_router_run(c, w, setup);
    fs::create_directories(path.parent_path());
    save_router(r.mlp, path.string());
    std::ofstream os(hist, std::ios::trunc);
    write_epoch_csv(os, r.state.history);
    return r;
}

// ---- subcommands ----

void cmd_gen_data(const RunConfig& c) {
    Run run(c);
    const auto corpus = load_corpus(c);
    run.write_text("data.jsonl", to_jsonl(corpus.pairs));
    std::size_t n_long = 0;
    for (const auto& e : corpus.examples) n_long += e.domain == 0;
    const json manifest{{"seed", c.seed},
                        {"source", c.uses_jsonl() ? c.jsonl : std::string("synthetic")},
                        {"generator",
                         {{"n", corpus.pairs.size()},
                          {"long_frac", c.uses_jsonl() ? json() : json(c.long_fraction())},
                          {"family", c.family},
                          {"max_len", c.max_len}}},
                        {"counts",
                         {{"total", corpus.pairs.size()},
                          {"long", n_long},
                          {"short", corpus.pairs.size() - n_long},
                          {"train", corpus.splits.train.size()},
                          {"valid", corpus.splits.valid.size()},
                          {"test", corpus.splits.test.size()}}},
                        {"content_hash", hex64(corpus.content_hash)}};
    run.write_json("manifest.json", manifest);
    run.summary(manifest["counts"]);
    std::cout << "gen-data: " << corpus.pairs.size() << " pairs (" << n_long << " long) -> " << c.out << "/data.jsonl\n";
}

json expert_summary(const ExpertTrainReport& r) {
    const auto& l = r.step_loss;
    return {{"steps", l.size()}, {"first_loss", l.empty() ? json() : json(l.front())},
            {"final_loss", l.empty() ? json() : json(l.back())}};
}

void cmd_train_experts(const RunConfig& c) {
    Run run(c);
    const auto corpus = load_corpus(c);
    const auto e = load_or_train_experts(c, corpus);
    std::ostringstream csv;
    csv << "step,t5_loss,mamba_loss\n";
    csv.precision(17);
    const auto n = std::max(e.t5_report.step_loss.size(), e.mamba_report.step_loss.size());
    for (std::size_t i = 0; i < n; ++i) {
        csv << i + 1 << ',';
        if (i < e.t5_report.step_loss.size()) csv << e.t5_report.step_loss[i];
        csv << ',';
        if (i < e.mamba_report.step_loss.size()) csv << e.mamba_report.step_loss[i];
        csv << '\n';
    }
    run.write_text("expert_loss.csv", csv.str());
    const json metrics{{"t5", expert_summary(e.t5_report)},
                       {"mamba", expert_summary(e.mamba_report)},
                       {"t5_params", e.t5->parameter_count()},
                       {"mamba_params", e.mamba->parameter_count()},
                       {"checkpoints", expert_dir(c, corpus).string()}};
    run.summary(metrics);
    std::cout << "train-experts: t5 loss " << metrics["t5"]["final_loss"] << ", mamba loss "
              << metrics["mamba"]["final_loss"] << (e.from_cache ? " (checkpoints reused)" : "") << '\n';
}

void cmd_train_router(const RunConfig& c) {
    Run run(c);
    const auto w = prepare(c);
    const auto v = variant_from_string(c.variant);
    if (v == Variant::NoGate) throw ConfigError("variant: no-gate has no router to train");
    const auto setup = router_setup(c, v);
    auto r = train_router_run(c, w, setup);
    save_router(r.mlp, (fs::path(c.out) / "router.ckpt").string());
    std::ostringstream csv;
    write_epoch_csv(csv, r.state.history);
    run.write_text("router_epochs.csv", csv.str());
    const auto& last = r.state.history.back();
    run.summary({{"epochs", r.state.history.size()},
                 {"steps", r.state.step},
                 {"router_params", r.mlp.parameter_count()},
                 {"L_total", last.l_total},
                 {"val_accuracy", last.val_accuracy},
                 {"soft_util_t5", last.soft_util_t5},
                 {"hard_util_t5", last.hard_util_t5}});
    std::cout << "train-router: " << r.state.history.size() << " epochs, L_total " << last.l_total
              << ", val accuracy " << last.val_accuracy << ", hard E_T5 utilization " << last.hard_util_t5 << '\n';
}

void cmd_eval(const RunConfig& c) {
    Run run(c);
    const auto w = prepare(c);
    const auto policy = policy_of(c);
    MetricReport report;
    if (policy == Policy::Learned) {
        const auto v = variant_from_string(c.variant);
        report = v == Variant::NoGate ? run_ablation(c, w, v) : [&] {
            const auto r = obtain_router(c, w, v);
            return evaluate(w, policy, &r, r.setup);
        }();
    } else {
        report = evaluate(w, policy, nullptr, router_setup(c, Variant::Full));
    }
    run.write_text("eval_" + c.policy + ".csv", metric_csv({report}));
    run.write_json("eval_" + c.policy + ".timing.json", timing({report}));
    run.summary(metrics_json(report));
    std::cout << "eval: " << report.label << " accuracy " << report.accuracy << ", E_T5 utilization "
              << report.utilization[kT5] << ", mean latency " << report.mean_latency << " s/seq\n";
}

void cmd_bench(const RunConfig& c) {
    Run run(c);
    const auto s = scaling_bench(c);
    std::ostringstream det, wall;
    det << "expert,length,ops,ops_ratio\n";
    wall << "expert,length,median_seconds\n";
    wall.precision(9);
    json slopes;
    for (const auto& [name, prof] : {std::pair{"t5", &s.attention}, std::pair{"mamba", &s.ssm}}) {
        for (std::size_t i = 0; i < prof->rows.size(); ++i) {
            const auto& row = prof->rows[i];
            det << name << ',' << row.length << ',' << row.ops << ',';
            if (i > 0) det << static_cast<double>(row.ops) / static_cast<double>(prof->rows[i - 1].ops);
            det << '\n';
            wall << name << ',' << row.length << ',' << row.median_seconds << '\n';
        }
        slopes[name] = prof->slope;
    }
    run.write_text("bench.csv", det.str());
    run.write_text("bench.timing.csv", wall.str());
    run.write_json("bench.timing.json", {{"log_log_slope", slopes}});
    run.summary({{"lengths", {256, 512, 1024, 2048}}, {"trials", 20}});
    std::cout << "bench: wall-clock slope t5 " << slopes["t5"] << ", mamba " << slopes["mamba"] << '\n';
}

void cmd_ablate(const RunConfig& c, bool all) {
    Run run(c);
    const auto w = prepare(c);
    std::vector<Variant> variants{Variant::Full, Variant::NoGate, Variant::NoSpeedPenalty, Variant::NoDomainFeature,
                                  Variant::LengthOnly};
    if (!all) variants = {variant_from_string(c.variant)};
    std::vector<MetricReport> reports;
    json metrics;
    for (auto v : variants) {
        reports.push_back(run_ablation(c, w, v));
        metrics[to_string(v)] = metrics_json(reports.back());
    }
    run.write_text("ablation.csv", metric_csv(reports));
    run.write_json("ablation.timing.json", timing(reports));
    run.summary(metrics);
    std::cout << "ablate:";
    for (const auto& r : reports) std::cout << ' ' << r.label << '=' << r.accuracy;
    std::cout << '\n';
}

void cmd_pareto(const RunConfig& c) {
    Run run(c);
    const auto w = prepare(c);
    const auto router = obtain_router(c, w, Variant::Full);
    std::vector<MetricReport> reports;
    for (auto p : {Policy::AlwaysMamba, Policy::AlwaysT5, Policy::Learned, Policy::Oracle})
        reports.push_back(evaluate(w, p, &router, router.setup));
    std::ostringstream det, wall;
    det.precision(17);
    wall.precision(17);
    det << "label,accuracy,mean_ops,dominated\n";
    wall << "label,accuracy,mean_latency_s,dominated\n";
    json metrics;
    for (const auto& p : pareto_points(reports, false)) {
        det << p.label << ',' << p.accuracy << ',' << p.latency << ',' << (p.dominated ? 1 : 0) << '\n';
        metrics[p.label] = {{"accuracy", p.accuracy}, {"mean_ops", p.latency}, {"dominated", p.dominated}};
    }
    for (const auto& p : pareto_points(reports, true))
        wall << p.label << ',' << p.accuracy << ',' << p.latency << ',' << (p.dominated ? 1 : 0) << '\n';
    run.write_text("pareto.csv", det.str());
    run.write_text("pareto.timing.csv", wall.str());
    run.write_text("pareto_metrics.csv", metric_csv(reports));
    run.summary(metrics);
    std::cout << "pareto: learned " << (metrics["learned"]["dominated"].get<bool>() ? "dominated" : "non-dominated")
              << " (accuracy " << metrics["learned"]["accuracy"] << ")\n";
}

void error_record(const char* kind, const std::string& message) {
    std::cerr << json{{"error", kind}, {"message", message}}.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"moeroute: speed-constrained routing between an attention expert and a state-space expert"};
    app.require_subcommand(1);
    Flags flags;
    const std::vector<std::pair<std::string, std::string>> commands{
        {"gen-data", "Generate (or ingest) the corpus and write data.jsonl plus a manifest"},
        {"train-experts", "Customize and freeze both experts (checkpoints cached under <out>/experts)"},
        {"train-router", "Train the router with frozen experts; writes router.ckpt and router_epochs.csv"},
        {"eval", "Evaluate one policy on the test split"},
        {"bench", "Latency and op-count scaling of both experts"},
        {"ablate", "Ablation variants on the test split"},
        {"pareto", "Accuracy/cost frontier over the four standard policies"}};
    std::map<std::string, CLI::App*> subs;
    for (const auto& [name, help] : commands) {
        subs[name] = app.add_subcommand(name, help);
    }
    // Each subcommand gets the same flat flag set; only the selected one parses.
    std::map<std::string, Flags> per;
    for (auto& [name, sub] : subs) add_flags(sub, per[name]);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    std::string command;
    for (auto& [name, sub] : subs)
        if (sub->parsed()) command = name;

    RunConfig cfg;
    try {
        cfg = build_config(command, per[command]);
    } catch (const ConfigError& e) {
        error_record("config", e.what());
        return 2;
    }

    try {
        if (command == "gen-data") cmd_gen_data(cfg);
        else if (command == "train-experts") cmd_train_experts(cfg);
        else if (command == "train-router") cmd_train_router(cfg);
        else if (command == "eval") cmd_eval(cfg);
        else if (command == "bench") cmd_bench(cfg);
        else if (command == "ablate") cmd_ablate(cfg, !given(per[command], "variant"));
        else if (command == "pareto") cmd_pareto(cfg);
    } catch (const ConfigError& e) {
        error_record("config", e.what());
        return 1;
    } catch (const Error& e) {
        error_record("runtime", e.what());
        return 1;
    } catch (const std::exception& e) {
        error_record("internal", e.what());
        return 1;
    }
    return 0;
}
